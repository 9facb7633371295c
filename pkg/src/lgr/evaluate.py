"""Heatmap decoding, the normalized-error metric, evaluation and export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import tensor as T
from .errors import DataError, ValidationError
from .graph import LayoutGraph
from .layer import as_tensors
from .synth import Dataset, SceneAnnotation

DECODE_MODES = ("argmax", "subcell")


def _subcell_offset(left: float, centre: float, right: float) -> float:
    # vertex of the parabola through the log-values; exact for a sampled Gaussian
    if min(left, centre, right) <= 0:
        return 0.0
    l, c, r = np.log(left), np.log(centre), np.log(right)
    curv = l - 2 * c + r
    if curv >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / curv, -0.5, 0.5))


def decode_landmarks(heatmaps: np.ndarray, mode: str = "argmax") -> np.ndarray:
    """Per-channel peak of an H×W×N heatmap as normalized (x, y), shape N×2.

    ``argmax`` returns the centre ((u + 0.5)/W, (v + 0.5)/H) of the first
    maximal cell in row-major order. ``subcell`` additionally shifts along
    each axis to the vertex of a parabola fitted to the log-values of the
    peak and its two neighbours (no shift at borders or non-positive values).
    """
    if mode not in DECODE_MODES:
        raise ValueError(f"decode mode must be one of {DECODE_MODES}, got {mode!r}")
    hm = np.asarray(heatmaps, dtype=np.float64)
    H, W, N = hm.shape
    flat = hm.reshape(H * W, N).argmax(axis=0)
    v, u = np.divmod(flat, W)
    out = np.empty((N, 2))
    for c in range(N):
        du = dv = 0.0
        if mode == "subcell":
            uc, vc = u[c], v[c]
            if 0 < uc < W - 1:
                du = _subcell_offset(hm[vc, uc - 1, c], hm[vc, uc, c], hm[vc, uc + 1, c])
            if 0 < vc < H - 1:
                dv = _subcell_offset(hm[vc - 1, uc, c], hm[vc, uc, c], hm[vc + 1, uc, c])
        out[c] = ((u[c] + 0.5 + du) / W, (v[c] + 0.5 + dv) / H)
    return out


@dataclass
class NEReport:
    per_landmark: dict[str, float]
    average: float
    count: int
    config: str = ""
    per_sample: list[float] = field(default_factory=list, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["landmark", "NE"])
        for k, v in self.per_landmark.items():
            w.writerow([k, repr(v)])
        w.writerow(["Avg.", repr(self.average)])
        w.writerow(["count", self.count])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(k) for k in [*self.per_landmark, "Avg."])
        lines = [f"{k:<{width}}  {v:.4f}" for k, v in self.per_landmark.items()]
        lines.append(f"{'Avg.':<{width}}  {self.average:.4f}")
        lines.append(f"({self.count} samples)")
        return "\n".join(lines)


def normalized_error(pred: np.ndarray, annotations: Sequence[SceneAnnotation], names: Sequence[str], config: str = "") -> NEReport:
    """Per-landmark mean Euclidean error in normalized coordinates, visible landmarks only.

    ``pred`` is S×N×2 in the order of ``names``. The average is the mean of
    the per-landmark means (landmarks never visible are left out).
    """
    pred = np.asarray(pred, dtype=np.float64)
    names = list(names)
    if pred.shape != (len(annotations), len(names), 2):
        raise ValidationError(f"predictions of shape {pred.shape} do not match {len(annotations)} samples × {len(names)} landmarks")
    sums = np.zeros(len(names))
    counts = np.zeros(len(names), dtype=int)
    per_sample = []
    for s, ann in enumerate(annotations):
        by_name = {m.name: m for m in ann.landmarks}
        errs = []
        for i, n in enumerate(names):
            if n not in by_name:
                raise ValidationError(f"{ann.id}: landmark {n!r} missing from annotation")
            m = by_name[n]
            if not m.visible:
                continue
            e = float(np.hypot(pred[s, i, 0] - m.x, pred[s, i, 1] - m.y))
            sums[i] += e
            counts[i] += 1
            errs.append(e)
        per_sample.append(float(np.mean(errs)) if errs else float("nan"))
    per = {n: float(sums[i] / counts[i]) for i, n in enumerate(names) if counts[i]}
    avg = float(np.mean([per[n] for n in names if n in per])) if per else float("nan")
    return NEReport(per, avg, len(annotations), config, per_sample)


def ne_from_heatmaps(heatmaps: np.ndarray, annotations: Sequence[SceneAnnotation], names: Sequence[str], decode: str = "argmax", config: str = "") -> NEReport:
    coords = np.array([decode_landmarks(h, decode) for h in heatmaps]).reshape(len(annotations), len(names), 2)
    return normalized_error(coords, annotations, names, config)


def predict(params: dict[str, np.ndarray], config, graph: LayoutGraph, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Heatmaps for an N×H×W×3 image array, no gradient recording."""
    from .model import model_forward

    pt = as_tensors(params)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            batch = np.asarray(images[i : i + batch_size], dtype=np.float64)
            outs.append(model_forward(batch, pt, config, graph).data)
    if not outs:
        return np.zeros((0,))
    return np.concatenate(outs)


def run_eval(checkpoint, dataset: Dataset, decode: str | None = None, batch_size: int = 100, overlay_dir: str | Path | None = None) -> NEReport:
    """Evaluate a checkpoint on a dataset split."""
    from .model import graph_for

    if len(dataset) == 0:
        raise DataError("empty dataset")
    cfg = checkpoint.model
    graph = graph_for(cfg)
    names = graph.spec.leaves
    data_names = [m.name for m in dataset.annotations[0].landmarks]
    if data_names != names:
        raise ValidationError(f"dataset landmarks {data_names} do not match model hierarchy {cfg.hierarchy!r} ({names})")
    decode = decode or (checkpoint.train.decode if checkpoint.train is not None else "subcell")
    hm = predict(checkpoint.params, cfg, graph, dataset.images, batch_size)
    report = ne_from_heatmaps(hm, dataset.annotations, names, decode, config=checkpoint.config_text())
    if overlay_dir is not None:
        write_exports(hm, dataset.images, [a.id for a in dataset.annotations], overlay_dir, names, decode, channels=False)
    return report


# ----------------------------------------------------------------------------
# export


def heatmap_png(channel: np.ndarray) -> np.ndarray:
    """uint8 grayscale with value round(255·h)."""
    return np.round(255 * np.clip(channel, 0.0, 1.0)).astype(np.uint8)


def overlay(image: np.ndarray, heatmaps: np.ndarray, coords: np.ndarray, zoom: int = 4) -> Image.Image:
    H, W = image.shape[:2]
    base = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).resize((W * zoom, H * zoom), Image.NEAREST)
    peak = Image.fromarray(heatmap_png(heatmaps.max(axis=-1))).resize((W * zoom, H * zoom), Image.BILINEAR)
    red = Image.merge("RGB", (peak, Image.new("L", peak.size, 0), Image.new("L", peak.size, 0)))
    comp = Image.blend(base, red, 0.35)
    draw = ImageDraw.Draw(comp)
    r = max(2, zoom)
    for x, y in coords:
        cx, cy = x * W * zoom, y * H * zoom
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=(255, 0, 0), width=2)
    return comp


def write_exports(heatmaps, images, ids, out_dir, names, decode="subcell", channels: bool = True) -> list[Path]:
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for hm, img, ident in zip(heatmaps, images, ids):
            if channels:
                for c, n in enumerate(names):
                    p = out / f"{ident}_{n}.png"
                    Image.fromarray(heatmap_png(hm[:, :, c]), mode="L").save(p)
                    written.append(p)
            p = out / f"{ident}_overlay.png"
            overlay(np.asarray(img, dtype=np.float64), hm, decode_landmarks(hm, decode)).save(p)
            written.append(p)
    except OSError as exc:
        raise DataError(f"writing exports under {out}: {exc}") from exc
    return written


def export_heatmaps(checkpoint, images: np.ndarray, out_dir: str | Path, ids: Sequence[str] | None = None, decode: str | None = None) -> list[Path]:
    """Per-channel grayscale PNGs plus an overlay with decoded landmarks for each image."""
    from .model import graph_for

    graph = graph_for(checkpoint.model)
    ids = list(ids) if ids is not None else [f"img{i:04d}" for i in range(len(images))]
    decode = decode or (checkpoint.train.decode if checkpoint.train is not None else "subcell")
    hm = predict(checkpoint.params, checkpoint.model, graph, images)
    return write_exports(hm, images, ids, out_dir, graph.spec.leaves, decode)
