"""Ablation plans: train and evaluate several configurations over several seeds.

A plan is an INI file::

    [plan]
    seeds = 0 1 2
    train_count = 2000      ; optional overrides of the [synth] split sizes
    val_count = 500

    [synth]                 ; shared SynthSpec / TrainConfig / ModelConfig fields
    distractor_prob = 0.5
    [train]
    epochs = 12
    [model]
    num_stacks = 4

    [row:plain]             ; one section per table row, keys are section.field
    model.graph_mode = plain

Each (row, seed) result is appended to a CSV journal as soon as it finishes;
rerunning the same plan skips pairs already journaled. Rows whose config is
invalid are journaled with status ``error`` and the run moves on.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import SECTIONS, ModelConfig, SynthSpec, TrainConfig, apply_overrides, load_config
from .errors import ConfigError, DataError, LgrError
from .evaluate import ne_from_heatmaps, predict
from .model import graph_for
from .synth import Dataset, make_split

log = logging.getLogger(__name__)

JOURNAL_FIELDS = ["row", "seed", "status", "val_NE", "clean_NE", "distractor_NE", "ratio", "steps", "seconds", "message"]


@dataclass
class PlanRow:
    name: str
    model: ModelConfig | None
    train: TrainConfig | None
    error: str = ""


@dataclass
class Plan:
    seeds: list[int]
    synth: SynthSpec
    rows: list[PlanRow]
    train_count: int | None = None
    val_count: int | None = None


def parse_plan(text: str) -> Plan:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad plan file: {exc}") from exc
    if "plan" not in parser:
        raise ConfigError("plan file needs a [plan] section")
    head = parser["plan"]
    unknown = set(head) - {"seeds", "train_count", "val_count"}
    if unknown:
        raise ConfigError(f"unknown [plan] keys {sorted(unknown)}")
    try:
        seeds = [int(s) for s in head.get("seeds", "0").replace(",", " ").split()]
        train_count = int(head["train_count"]) if "train_count" in head else None
        val_count = int(head["val_count"]) if "val_count" in head else None
    except ValueError as exc:
        raise ConfigError(f"[plan]: {exc}") from exc

    shared = "\n".join(f"[{s}]\n" + "\n".join(f"{k} = {v}" for k, v in parser[s].items()) for s in SECTIONS if s in parser)
    base = load_config(text=shared)
    base["synth"].validate()

    rows = []
    for section in parser.sections():
        if section == "plan" or section in SECTIONS:
            continue
        if not section.startswith("row:"):
            raise ConfigError(f"unknown plan section [{section}]")
        name = section[4:].strip()
        try:
            grouped: dict[str, dict[str, str]] = {"model": {}, "train": {}}
            for key, raw in parser[section].items():
                sec, _, fld = key.partition(".")
                if sec not in grouped or not fld:
                    raise ConfigError(f"row key {key!r} must be model.<field> or train.<field>")
                grouped[sec][fld] = raw
            model = apply_overrides(base["model"], grouped["model"])
            train = apply_overrides(base["train"], grouped["train"])
            graph_for(model)  # validates against the hierarchy
            train.validate()
            rows.append(PlanRow(name, model, train))
        except LgrError as exc:
            rows.append(PlanRow(name, None, None, str(exc)))
    if not rows:
        raise ConfigError("plan defines no [row:NAME] sections")
    return Plan(seeds, base["synth"], rows, train_count, val_count)


def load_plan(path: str | Path) -> Plan:
    try:
        return parse_plan(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# journal


def read_journal(path: Path) -> list[dict]:
    if not path.exists():
        return []
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read journal {path}: {exc}") from exc


def append_journal(path: Path, record: dict) -> None:
    new = not path.exists()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=JOURNAL_FIELDS)
            if new:
                w.writeheader()
            w.writerow({k: record.get(k, "") for k in JOURNAL_FIELDS})
    except OSError as exc:
        raise DataError(f"cannot append to journal {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# running


def split_report(params, model: ModelConfig, data: Dataset, decode: str) -> dict[str, float]:
    """Average NE overall, on clean images and on images with a distractor."""
    graph = graph_for(model)
    hm = predict(params, model, graph, data.images)
    names = graph.spec.leaves
    out = {"val_NE": ne_from_heatmaps(hm, data.annotations, names, decode).average}
    flags = np.array([bool(a.tags.get("distractor_present")) for a in data.annotations])
    for key, mask in (("clean_NE", ~flags), ("distractor_NE", flags)):
        idx = np.flatnonzero(mask)
        out[key] = ne_from_heatmaps(hm[idx], [data.annotations[i] for i in idx], names, decode).average if len(idx) else float("nan")
    out["ratio"] = out["distractor_NE"] / out["clean_NE"] if out["clean_NE"] > 0 else float("nan")
    return out


def run_one(row: PlanRow, seed: int, train_set: Dataset, val_set: Dataset) -> dict:
    from .training import train

    t0 = time.perf_counter()
    tcfg = dataclasses.replace(row.train, seed=seed)
    result = train(row.model, tcfg, train_set, val_set)
    rec = split_report(result.best.params, row.model, val_set, tcfg.decode)
    rec.update(row=row.name, seed=seed, status="ok", steps=result.steps, seconds=round(time.perf_counter() - t0, 3))
    return rec


DataFactory = Callable[[SynthSpec, int | None, int | None], tuple[Dataset, Dataset]]


def default_data(spec: SynthSpec, train_count: int | None, val_count: int | None) -> tuple[Dataset, Dataset]:
    return make_split(spec, "train", train_count), make_split(spec, "val", val_count)


def run_ablation(plan: Plan, journal: str | Path, data: DataFactory = default_data, rows: list[str] | None = None) -> list[dict]:
    """Run every (row, seed) not yet journaled; returns all journal records for the plan."""
    journal = Path(journal)
    done = {(r["row"], int(r["seed"])) for r in read_journal(journal) if r.get("status") in ("ok", "error")}
    selected = [r for r in plan.rows if rows is None or r.name in rows]
    for seed in plan.seeds:
        pending = [r for r in selected if (r.name, seed) not in done]
        if not pending:
            continue
        datasets: dict[str, tuple[Dataset, Dataset]] = {}
        for row in pending:
            if row.error:
                rec = {"row": row.name, "seed": seed, "status": "error", "message": row.error}
            else:
                h = row.model.hierarchy
                if h not in datasets:
                    spec = dataclasses.replace(plan.synth, hierarchy=h, seed=seed)
                    datasets[h] = data(spec, plan.train_count, plan.val_count)
                try:
                    rec = run_one(row, seed, *datasets[h])
                except LgrError as exc:
                    rec = {"row": row.name, "seed": seed, "status": "error", "message": str(exc)}
            log.info("ablation %s seed %d: %s", row.name, seed, rec)
            append_journal(journal, rec)
    names = {r.name for r in selected}
    return [r for r in read_journal(journal) if r["row"] in names and int(r["seed"]) in plan.seeds]


def results_table(records: list[dict], plan: Plan) -> str:
    """One CSV line per row: mean avg NE and wall time plus the per-seed values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "avg_NE", "time_s", "seeds_ok", "mean_ratio", *[f"NE_seed{s}" for s in plan.seeds], "error"])
    for row in plan.rows:
        recs = {int(r["seed"]): r for r in records if r["row"] == row.name}
        ok = [r for r in recs.values() if r["status"] == "ok"]
        ne = [float(r["val_NE"]) for r in ok]
        ratio = [float(r["ratio"]) for r in ok if r["ratio"] not in ("", "nan")]
        secs = [float(r["seconds"]) for r in ok]
        errors = sorted({r["message"] for r in recs.values() if r["status"] == "error"})
        w.writerow([
            row.name,
            f"{np.mean(ne):.6f}" if ne else "",
            f"{np.mean(secs):.1f}" if secs else "",
            len(ok),
            f"{np.mean(ratio):.4f}" if ratio else "",
            *[f"{float(recs[s]['val_NE']):.6f}" if s in recs and recs[s]["status"] == "ok" else "" for s in plan.seeds],
            "; ".join(errors),
        ])
    return buf.getvalue()


def per_seed(records: list[dict], row: str, key: str = "val_NE") -> dict[int, float]:
    return {int(r["seed"]): float(r[key]) for r in records if r["row"] == row and r["status"] == "ok"}
