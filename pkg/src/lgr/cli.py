"""Command-line interface: ``lgr {synth,train,eval,gradcheck,ablate,export}``.

Global flags ``--config FILE``, ``--seed N`` and ``--out DIR`` are accepted
before or after the subcommand. Exit status is 0 on success, 2 for config
errors, 3 for data/I-O errors and 4 for numeric or contract failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import dump_config, load_config
from .errors import ConfigError, DataError, LgrError, NumericError

log = logging.getLogger("lgr")


def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", default=default, help="INI file with [model], [train] and [synth] sections")
    p.add_argument("--seed", type=int, default=default, help="override the seed of the relevant section")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgr", description="Layout-graph reasoning landmark detector", parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common(True)]

    p = sub.add_parser("synth", parents=common, help="generate a synthetic dataset")
    p.add_argument("--hierarchy", help="override synth.hierarchy")
    p.add_argument("--counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("train", parents=common, help="train a model")
    p.add_argument("--data", required=True, help="dataset directory written by 'lgr synth'")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=common, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--decode", choices=["subcell", "argmax"])
    p.add_argument("--overlays", action="store_true", help="also write per-image overlays under --out")

    p = sub.add_parser("gradcheck", parents=common, help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--case", action="append", help="run only the named case (repeatable)")

    p = sub.add_parser("ablate", parents=common, help="run an ablation plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--row", action="append", help="run only the named row (repeatable)")

    p = sub.add_parser("export", parents=common, help="write heatmap PNGs and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--count", type=int, default=8)
    return parser


def _out(args, fallback: str) -> Path:
    return Path(args.out or fallback)


def cmd_synth(args, cfg) -> int:
    from .synth import generate_dataset

    spec = cfg["synth"]
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.hierarchy:
        spec = dataclasses.replace(spec, hierarchy=args.hierarchy)
    if args.counts:
        spec = dataclasses.replace(spec, train_count=args.counts[0], val_count=args.counts[1], test_count=args.counts[2])
    out = _out(args, "data")
    splits = generate_dataset(spec, out)
    print(f"wrote {sum(len(d) for d in splits.values())} images to {out} " + " ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_train(args, cfg) -> int:
    from .synth import load_dataset
    from .training import train

    tcfg = cfg["train"]
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.max_steps is not None:
        changes["max_steps"] = args.max_steps
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    tcfg = dataclasses.replace(tcfg, **changes)
    mcfg = cfg["model"]
    train_set = load_dataset(args.data, "train")
    val_path = Path(args.data) / "val" / "annotations.jsonl"
    val_set = load_dataset(args.data, "val") if val_path.exists() else None
    out = _out(args, "run")
    result = train(mcfg, tcfg, train_set, val_set, out_dir=out, on_epoch=lambda r: print(f"epoch {r['epoch']} lr {r['lr']:.1e} loss {r['train_loss']:.5f} val NE {r['val_NE']:.4f}", flush=True))
    print(f"{result.steps} steps; best checkpoint {out / 'best.ckpt'}; metrics {out / 'metrics.csv'}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import run_eval
    from .synth import load_dataset

    ck = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, args.split)
    overlay_dir = _out(args, "eval") / "overlays" if args.overlays else None
    report = run_eval(ck, data, decode=args.decode, overlay_dir=overlay_dir)
    print(report.table())
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.csv").write_text(report.to_csv())
        except OSError as exc:
            raise DataError(f"cannot write report under {out}: {exc}") from exc
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradsuite import CASES, run_battery

    unknown = set(args.case or []) - set(CASES)
    if unknown:
        raise ConfigError(f"unknown gradcheck case(s) {sorted(unknown)}; known: {', '.join(CASES)}")
    start = args.seed or 0
    results = run_battery(range(start, start + args.seeds), args.case)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_err)
    width = max(map(len, worst))
    for name, err in worst.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err <= args.tol else 'FAIL'}")
    bad = [n for n, e in worst.items() if e > args.tol]
    if bad:
        raise NumericError(f"gradient mismatch above {args.tol:g} in {', '.join(bad)}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .ablation import load_plan, results_table, run_ablation

    plan = load_plan(args.plan)
    if args.seed is not None:
        plan.seeds = [args.seed]
    out = _out(args, "ablation")
    records = run_ablation(plan, out / "journal.csv", rows=args.row)
    table = results_table(records, plan)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(table)
    except OSError as exc:
        raise DataError(f"cannot write table under {out}: {exc}") from exc
    print(table, end="")
    return 0


def cmd_export(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import export_heatmaps
    from .synth import load_dataset

    ck = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, args.split)
    data = data.subset(range(min(args.count, len(data))))
    out = _out(args, "export")
    files = export_heatmaps(ck, data.images, out, ids=[a.id for a in data.annotations])
    print(f"wrote {len(files)} files to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else load_config()
        log.debug("config:\n%s", dump_config(**cfg))
        return COMMANDS[args.command](args, cfg)
    except LgrError as exc:
        print(f"lgr {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
