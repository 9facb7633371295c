"""Loss, Adam, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .errors import ContractError, DataError, NumericError
from .evaluate import ne_from_heatmaps, predict
from .graph import LayoutGraph
from .layer import as_tensors
from .model import graph_for, init_params, model_forward, total_orthogonality
from .synth import Dataset, Landmark, render_heatmaps
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,train_loss,val_NE"


def total_loss(pred: Tensor, target, params: Mapping[str, Tensor], config: ModelConfig, graph: LayoutGraph, lambda_orth: float) -> Tensor:
    """Heatmap MSE plus lambda times the summed orthogonality penalty of every stack."""
    loss = T.mse(pred, target)
    if lambda_orth:
        loss = T.add(loss, T.mul(total_orthogonality(params, config, graph), lambda_orth))
    return loss


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters {missing}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 divided by drop_factor once every drop_every_epochs (epochs count from 0)."""
    return cfg.lr0 / cfg.drop_factor ** (epoch // cfg.drop_every_epochs)


# ----------------------------------------------------------------------------
# augmentation


def _rotation(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def apply_affine(image: np.ndarray, landmarks: Sequence[Landmark], scale: float, angle_deg: float, flip: bool, mirror: Mapping[str, str]) -> tuple[np.ndarray, list[Landmark]]:
    """Scale and rotate about the image centre, optionally mirroring left/right first.

    Mirroring swaps each landmark with its symmetric partner so that names
    keep their meaning. Landmarks pushed out of frame become invisible.
    """
    if scale == 1.0 and angle_deg == 0.0 and not flip:
        return image.copy(), [Landmark(m.name, m.x, m.y, m.visible) for m in landmarks]
    H, W = image.shape[:2]
    A = scale * _rotation(angle_deg) @ np.diag([-1.0 if flip else 1.0, 1.0])
    centre = np.array([0.5, 0.5])

    # output pixel (row, col) -> input pixel, with pixel = D·normalized - 0.5
    D = np.diag([W, H]).astype(float)
    inv_xy = D @ np.linalg.inv(A) @ np.linalg.inv(D)
    inv_rc = inv_xy[::-1, ::-1]
    pc = np.array([(H - 1) / 2, (W - 1) / 2])
    matrix = np.eye(3)
    matrix[:2, :2] = inv_rc
    offset = np.zeros(3)
    offset[:2] = pc - inv_rc @ pc
    out = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="nearest")

    by_name = {m.name: m for m in landmarks}
    moved = []
    for m in landmarks:
        src = by_name[mirror.get(m.name, m.name)] if flip else m
        x, y = centre + A @ (np.array([src.x, src.y]) - centre)
        inside = 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0
        moved.append(Landmark(m.name, float(x), float(y), bool(src.visible and inside)))
    return out, moved


def augment(image: np.ndarray, landmarks: Sequence[Landmark], rng: np.random.Generator, cfg: TrainConfig, mirror: Mapping[str, str]) -> tuple[np.ndarray, list[Landmark]]:
    """Random scale, rotation and horizontal flip; draws exactly three numbers from ``rng``."""
    scale = float(rng.uniform(*cfg.scale_range))
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    flip = bool(rng.uniform() < cfg.hflip_prob)
    return apply_affine(image, landmarks, scale, angle, flip, mirror)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log_lines: list[str]
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    orth_init: float = 0.0

    @property
    def metrics_csv(self) -> str:
        return "\n".join(self.log_lines) + "\n"


def _orth_value(params, config, graph) -> float:
    with T.no_grad():
        return total_orthogonality(as_tensors(params), config, graph).item()


def validate(params, config: ModelConfig, graph: LayoutGraph, data: Dataset, decode: str) -> float:
    hm = predict(params, config, graph, data.images)
    return ne_from_heatmaps(hm, data.annotations, graph.spec.leaves, decode).average


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    out_dir: str | Path | None = None,
    params: Mapping[str, np.ndarray] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from ``params`` (or a seeded init) and keep the best-validation checkpoint.

    Validation defaults to the training set. The metrics log has one
    ``epoch,lr,train_loss,val_NE`` line per epoch; checkpoints are stored
    at float32 precision. ``out_dir`` (optional) receives ``metrics.csv``,
    ``best.ckpt`` and ``final.ckpt``.
    """
    train_cfg.validate()
    graph = graph_for(model_cfg)
    if len(train_set) == 0:
        raise DataError("empty training set")
    if train_set.hierarchy != model_cfg.hierarchy:
        raise DataError(f"training data uses hierarchy {train_set.hierarchy!r}, model expects {model_cfg.hierarchy!r}")
    val_set = val_set if val_set is not None and len(val_set) else train_set

    params = {k: np.asarray(v, dtype=np.float64) for k, v in (params or init_params(model_cfg, train_cfg.seed, graph)).items()}
    state = AdamState.zeros(params)
    shuffle_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([train_cfg.seed, 1]).spawn(2))
    mirror = graph.spec.mirror()
    hw = model_cfg.feature_size
    static_targets = None
    if not train_cfg.augment:
        static_targets = np.stack([render_heatmaps(a.landmarks, hw, hw, train_cfg.sigma_g) for a in train_set.annotations])

    orth_init = _orth_value(params, model_cfg, graph)
    best = Checkpoint.snapshot(params, model_cfg, train_cfg, 0, state.m, state.v)
    best_ne = np.inf
    lines = [LOG_HEADER]
    history: list[dict] = []
    stale = 0
    stopped_early = False
    n = len(train_set)

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, train_cfg)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            images = train_set.images[idx].astype(np.float64)
            if static_targets is not None:
                targets = static_targets[idx]
            else:
                pairs = [augment(images[j], train_set.annotations[i].landmarks, aug_rng, train_cfg, mirror) for j, i in enumerate(idx)]
                images = np.stack([p[0] for p in pairs])
                targets = np.stack([render_heatmaps(p[1], hw, hw, train_cfg.sigma_g) for p in pairs])
            with T.Tape() as tape:
                pt = as_tensors(params, requires_grad=True)
                pred = model_forward(images, pt, model_cfg, graph)
                loss = total_loss(pred, targets, pt, model_cfg, graph, train_cfg.lambda_orth)
                grads = tape.backward(loss, wrt=pt.values())
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {state.step + 1}")
            params, state = adam_step(params, {k: grads[t] for k, t in pt.items()}, state, lr, train_cfg)
            losses.append(value)
            if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                break

        out_of_steps = bool(train_cfg.max_steps) and state.step >= train_cfg.max_steps
        last = epoch == train_cfg.epochs - 1 or out_of_steps
        val_ne = float("nan")
        if (epoch + 1) % train_cfg.val_every == 0 or last:
            val_ne = validate(params, model_cfg, graph, val_set, train_cfg.decode)
            if val_ne < best_ne:
                best_ne, stale = val_ne, 0
                best = Checkpoint.snapshot(params, model_cfg, train_cfg, state.step, state.m, state.v)
            else:
                stale += 1
        train_loss = float(np.mean(losses))
        lines.append(f"{epoch},{lr!r},{train_loss!r},{val_ne!r}")
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_NE": val_ne, "step": state.step, "seconds": time.perf_counter() - t0}
        history.append(record)
        log.info("epoch %d lr %.2g loss %.5f val NE %.4f (%.1fs)", epoch, lr, train_loss, val_ne, record["seconds"])
        if on_epoch is not None:
            on_epoch(record)
        if out_of_steps:
            break
        if train_cfg.patience and stale >= train_cfg.patience:
            stopped_early = True
            break

    final = Checkpoint.snapshot(params, model_cfg, train_cfg, state.step, state.m, state.v)
    result = TrainResult(best, final, lines, history, state.step, stopped_early, orth_init)
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(best, out / "best.ckpt")
        save_checkpoint(final, out / "final.ckpt")
        try:
            (out / "metrics.csv").write_text(result.metrics_csv)
        except OSError as exc:
            raise DataError(f"cannot write metrics under {out}: {exc}") from exc
    return result
