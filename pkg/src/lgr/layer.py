"""One layout-graph reasoning layer.

Pipeline per call: map the feature map onto leaf nodes, reason bottom-up
through the hierarchy by clustering (features and adjacency), come back
down by deconvolution with skip connections, and project the evolved leaf
nodes back onto the feature map.

Feature maps are ``(..., HW, C)`` and node states ``(..., N, d)``; any
leading batch axes broadcast through every op. Parameters are a mapping
from the names below to :class:`~lgr.tensor.Tensor`:

=================  ============  =========================================
``W_m``            C×N_leaf      map-to-node scores
``W_t``            C×d           map-to-node features
``up{l}.W_p``      N_l×N_{l+1}   adjacency clustering
``up{l}.W_pp``     N_l×N_{l+1}   feature clustering
``up{l}.W_h``      d×d           clustering transform
``down{l}.D_pp``   N_{l+1}×N_l   feature deconvolution (absent when tied)
``down{l}.D_p``    N_{l+1}×N_l   adjacency regeneration (regen only, untied)
``down{l}.D_h``    d×d           deconvolution transform
``reason{l}.W_g``  d×d           graph reasoning at level l
``plain{k}.W_g``   d×d           plain mode: k-th leaf-graph convolution
``W_mp``           C+d           node-to-map scores
``W_tp``           d×C           node-to-map features
=================  ============  =========================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .graph import LayoutGraph
from .tensor import Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class LgrOptions:
    depth: int = 3
    mode: str = "lgr"
    plain_layers: int = 2
    softmax_axis: str = "nodes"
    tie_deconv: bool = False
    regen_down_adjacency: bool = False
    reason_per_level: int = 1
    mask_assignments: bool = True

    @classmethod
    def from_model(cls, cfg) -> "LgrOptions":
        return cls(
            depth=cfg.clustering_depth,
            mode=cfg.graph_mode,
            plain_layers=cfg.plain_layers,
            softmax_axis=cfg.softmax_axis,
            tie_deconv=cfg.tie_deconv,
            regen_down_adjacency=cfg.regen_down_adjacency,
            reason_per_level=cfg.reason_per_level,
            mask_assignments=cfg.mask_assignments,
        )


def param_shapes(graph: LayoutGraph, C: int, d: int, opts: LgrOptions) -> dict[str, tuple[int, ...]]:
    n = graph.sizes
    shapes: dict[str, tuple[int, ...]] = {"W_m": (C, n[0]), "W_t": (C, d)}
    if opts.mode == "plain":
        for k in range(opts.plain_layers):
            shapes[f"plain{k}.W_g"] = (d, d)
    else:
        if opts.depth > graph.depth:
            raise DimensionError(f"clustering depth {opts.depth} exceeds hierarchy depth {graph.depth}")
        for lv in range(opts.depth):
            shapes[f"up{lv}.W_p"] = (n[lv], n[lv + 1])
            shapes[f"up{lv}.W_pp"] = (n[lv], n[lv + 1])
            shapes[f"up{lv}.W_h"] = (d, d)
            if not opts.tie_deconv:
                shapes[f"down{lv}.D_pp"] = (n[lv + 1], n[lv])
                if opts.regen_down_adjacency:
                    shapes[f"down{lv}.D_p"] = (n[lv + 1], n[lv])
            shapes[f"down{lv}.D_h"] = (d, d)
        for lv in range(opts.depth + 1):
            shapes[f"reason{lv}.W_g"] = (d, d)
    shapes["W_mp"] = (C + d,)
    shapes["W_tp"] = (d, C)
    return shapes


def _mask_for(name: str, graph: LayoutGraph) -> np.ndarray | None:
    """Assignment mask oriented like the named matrix, or None if unmasked."""
    head, _, leaf = name.rpartition(".")
    if leaf in ("W_p", "W_pp"):
        return graph.assignment_mask[int(head[2:])]
    if leaf in ("D_p", "D_pp"):
        return graph.assignment_mask[int(head[4:])].T
    return None


def init_lgr_params(graph: LayoutGraph, C: int, d: int, opts: LgrOptions, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(±sqrt(1/fan_in)) weights; assignment matrices centred on their mask."""
    out = {}
    for name, shape in param_shapes(graph, C, d, opts).items():
        mask = _mask_for(name, graph)
        if mask is not None and opts.mask_assignments:
            # 1/(children of the parent) on the mask, plus noise of width 0.01
            parent_axis = 1 if name.endswith(("W_p", "W_pp")) else 0
            children = mask.sum(axis=1 - parent_axis, keepdims=True)
            w = (mask / children + rng.uniform(-0.01, 0.01, size=shape)) * mask
        else:
            bound = np.sqrt(1.0 / shape[0])
            w = rng.uniform(-bound, bound, size=shape)
        out[name] = w
    return out


def _assign(p: Params, name: str, graph: LayoutGraph, opts: LgrOptions) -> Tensor:
    w = p[name]
    if opts.mask_assignments:
        w = T.mul(w, _mask_for(name, graph))
    return w


# ----------------------------------------------------------------------------
# map-to-node / node-to-map


def map_to_node(F: Tensor, p: Params, softmax_axis: str = "nodes") -> Tensor:
    """X_leaf = relu(softmax(F W_m)^T F W_t); softmax over nodes (default) or positions."""
    W_m, W_t = p["W_m"], p["W_t"]
    if F.shape[-1] != W_m.shape[0] or F.shape[-1] != W_t.shape[0]:
        raise DimensionError(f"map_to_node: feature channels {F.shape[-1]} vs W_m {W_m.shape}, W_t {W_t.shape}")
    phi = T.softmax(F @ W_m, axis=-1 if softmax_axis == "nodes" else -2)
    return T.relu(T.transpose(phi) @ (F @ W_t))


def node_to_map(F: Tensor, X: Tensor, p: Params, softmax_axis: str = "nodes", explicit: bool = False) -> Tensor:
    """F_r = relu(softmax(X_a W_mp) relu(X W_tp)) with X_a = [F broadcast, X broadcast].

    ``explicit`` materializes X_a (HW×N×(C+d)); the default computes the same
    scores as F W_mp[:C] + X W_mp[C:] broadcast over the node/position axes.
    """
    W_mp, W_tp = p["W_mp"], p["W_tp"]
    *lead, HW, C = F.shape
    *xlead, N, d = X.shape
    if W_mp.shape != (C + d,) or W_tp.shape != (d, C):
        raise DimensionError(f"node_to_map: F {F.shape}, X {X.shape} vs W_mp {W_mp.shape}, W_tp {W_tp.shape}")
    batch = tuple(np.broadcast_shapes(tuple(lead), tuple(xlead)))
    w = T.reshape(W_mp, (C + d, 1))
    if explicit:
        Fb = T.broadcast_to(T.reshape(F, (*lead, HW, 1, C)), (*batch, HW, N, C))
        Xb = T.broadcast_to(T.reshape(X, (*xlead, 1, N, d)), (*batch, HW, N, d))
        Xa = T.concat_last_axis(Fb, Xb)
        scores = T.reshape(Xa @ w, (*batch, HW, N))
    else:
        sel_f = np.eye(C + d)[:C]  # picks W_mp[:C]
        sel_x = np.eye(C + d)[C:]
        per_pos = F @ (sel_f @ w)  # (..., HW, 1)
        per_node = T.reshape(X @ (sel_x @ w), (*xlead, 1, N))
        scores = T.add(per_pos, per_node)
    phi = T.softmax(scores, axis=-1 if softmax_axis == "nodes" else -2)
    return T.relu(phi @ T.relu(X @ W_tp))


# ----------------------------------------------------------------------------
# graph operators


def graph_reasoning(X: Tensor, A_hat, W_g: Tensor) -> Tensor:
    """One normalized graph convolution, relu(Â X W_g)."""
    A_hat = T.as_tensor(A_hat)
    n = X.shape[-2]
    if A_hat.shape != (n, n) or X.shape[-1] != W_g.shape[0]:
        raise DimensionError(f"graph_reasoning: X {X.shape}, Â {A_hat.shape}, W_g {W_g.shape}")
    return T.relu(A_hat @ X @ W_g)


def renormalize(B: Tensor) -> Tensor:
    """Symmetrize, zero the diagonal, then apply D^-1/2 (A + I) D^-1/2 (differentiable)."""
    n = B.shape[-1]
    off = 1.0 - np.eye(n)
    S = T.mul(T.add(B, T.transpose(B)), 0.5)
    At = T.add(T.mul(S, off), np.eye(n))
    dinv = T.power(T.sum(At, axis=-1), -0.5)
    return T.mul(T.mul(At, T.reshape(dinv, (n, 1))), T.reshape(dinv, (1, n)))


def cluster_adjacency(A_low, W_p: Tensor) -> Tensor:
    """Raw coarse adjacency relu(W_p^T Â_low W_p), before renormalization."""
    return T.relu(T.transpose(W_p) @ T.as_tensor(A_low) @ W_p)


def cluster_step(X_low: Tensor, A_low, p: Params, level: int, graph: LayoutGraph, opts: LgrOptions = LgrOptions()):
    """Bottom-up: returns (X_up, Â_up) for level ``level + 1``."""
    if not 0 <= level < graph.depth or f"up{level}.W_p" not in p:
        raise ValueError(f"cluster level {level} out of range")
    A_low = T.as_tensor(A_low)
    W_p = _assign(p, f"up{level}.W_p", graph, opts)
    W_pp = _assign(p, f"up{level}.W_pp", graph, opts)
    X_up = T.relu(T.transpose(W_pp) @ A_low @ X_low @ p[f"up{level}.W_h"])
    A_up = renormalize(cluster_adjacency(A_low, W_p))
    return X_up, A_up


def deconv_step(X_up: Tensor, A_up, cache, p: Params, level: int, graph: LayoutGraph, opts: LgrOptions = LgrOptions()) -> Tensor:
    """Top-down: redistribute level ``level + 1`` onto ``level``, add the skip, reason."""
    if cache is None:
        raise ContractError(f"deconv_step at level {level} has no cached cluster_step input")
    X_cached, A_cached = cache
    A_up = T.as_tensor(A_up)
    if opts.tie_deconv:
        down = _assign(p, f"up{level}.W_pp", graph, opts)
    else:
        down = T.transpose(_assign(p, f"down{level}.D_pp", graph, opts))
    X_down = T.relu(down @ A_up @ X_up @ p[f"down{level}.D_h"])
    A_low = A_cached
    if opts.regen_down_adjacency:
        if opts.tie_deconv:
            D_p = T.transpose(_assign(p, f"up{level}.W_p", graph, opts))
        else:
            D_p = _assign(p, f"down{level}.D_p", graph, opts)
        A_low = renormalize(cluster_adjacency(A_up, D_p))
    return graph_reasoning(T.add(X_down, X_cached), A_low, p[f"reason{level}.W_g"])


def reason_full(X_leaf: Tensor, graph: LayoutGraph, p: Params, opts: LgrOptions = LgrOptions(), trace: list | None = None) -> Tensor:
    """Leaf reasoning, ``depth`` cluster steps up, ``depth`` deconv steps back down.

    ``trace`` (if given) receives ``("cluster", l)`` / ``("deconv", l)`` events.
    """
    A0 = graph.normalized[0]
    if opts.mode == "plain":
        X = X_leaf
        for k in range(opts.plain_layers):
            X = graph_reasoning(X, A0, p[f"plain{k}.W_g"])
        return X
    X = graph_reasoning(X_leaf, A0, p["reason0.W_g"])
    A: Tensor | np.ndarray = A0
    caches: list = [None] * opts.depth
    for lv in range(opts.depth):
        caches[lv] = (X, A)
        X, A = cluster_step(X, A, p, lv, graph, opts)
        for _ in range(opts.reason_per_level):
            X = graph_reasoning(X, A, p[f"reason{lv + 1}.W_g"])
        if trace is not None:
            trace.append(("cluster", lv))
    for lv in reversed(range(opts.depth)):
        cache, caches[lv] = caches[lv], None
        X = deconv_step(X, A, cache, p, lv, graph, opts)
        A = cache[1]
        if trace is not None:
            trace.append(("deconv", lv))
    return X


def orthogonality_penalty(p: Params, graph: LayoutGraph, opts: LgrOptions = LgrOptions()) -> Tensor:
    """Sum over up-path W_p of ||W_p^T W_p - I||_F^2."""
    total = T.as_tensor(0.0)
    lv = 0
    while f"up{lv}.W_p" in p:
        W = _assign(p, f"up{lv}.W_p", graph, opts)
        G = T.sub(T.transpose(W) @ W, np.eye(W.shape[1]))
        total = T.add(total, T.sum(T.mul(G, G)))
        lv += 1
    return total


def lgr_forward(F: Tensor, graph: LayoutGraph, p: Params, opts: LgrOptions = LgrOptions()) -> Tensor:
    X = map_to_node(F, p, opts.softmax_axis)
    X = reason_full(X, graph, p, opts)
    return node_to_map(F, X, p, opts.softmax_axis)


def as_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}
