"""Finite-difference battery over every differentiable piece of the model.

Each case builds small random inputs in [-1, 1] from a seed, reduces the op's
output(s) to a scalar with fixed random weights (so no symmetric
cancellation hides an error), and runs :func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .graph import LayoutGraph, build_hierarchy, fld8, toy2
from .gradcheck import finite_diff_check
from .layer import (
    LgrOptions,
    cluster_step,
    deconv_step,
    graph_reasoning,
    init_lgr_params,
    lgr_forward,
    map_to_node,
    node_to_map,
    orthogonality_penalty,
    renormalize,
)
from .model import backbone_block, head, pyramid_post
from .training import total_loss


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_err: float
    checked: int
    excluded: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


class _Case:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: dict[int, np.ndarray] = {}

    def u(self, *shape: int) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=shape)

    def reduce(self, *outs: T.Tensor) -> T.Tensor:
        """sum_k sum(R_k * out_k) with R_k drawn once per output position."""
        total = T.as_tensor(0.0)
        for k, o in enumerate(outs):
            if k not in self.weights:
                self.weights[k] = self.rng.uniform(0.5, 1.5, size=o.shape)
            total = T.add(total, T.sum(T.mul(o, self.weights[k])))
        return total


def _fld8() -> LayoutGraph:
    return build_hierarchy(fld8())


def case_map_to_node(c: _Case, axis: str = "nodes"):
    C, d, HW = 4, 3, 6
    def f(F, W_m, W_t):
        return c.reduce(map_to_node(F, {"W_m": W_m, "W_t": W_t}, axis))
    return f, [c.u(HW, C), c.u(C, 8), c.u(C, d)], ["F", "W_m", "W_t"]


def case_graph_reasoning(c: _Case):
    g = _fld8()
    def f(X, W_g):
        return c.reduce(graph_reasoning(X, g.normalized[0], W_g))
    return f, [c.u(8, 3), c.u(3, 3)], ["X", "W_g"]


def case_renormalize(c: _Case):
    def f(B):
        return c.reduce(renormalize(T.add(T.mul(B, B), 0.1)))
    return f, [c.u(4, 4)], ["B"]


def case_cluster_step(c: _Case, level: int = 0):
    g = _fld8()
    n, d = g.sizes, 3
    opts = LgrOptions()
    def f(X, A_low, W_p, W_pp, W_h):
        # positive, symmetric adjacency input so the renormalization stays well defined
        A = T.add(T.mul(T.add(A_low, T.transpose(A_low)), 0.25), 1.0)
        p = {f"up{level}.W_p": W_p, f"up{level}.W_pp": W_pp, f"up{level}.W_h": W_h}
        X_up, A_up = cluster_step(X, A, p, level, g, opts)
        return c.reduce(X_up, A_up)
    ins = [c.u(n[level], d), c.u(n[level], n[level]), c.u(n[level], n[level + 1]), c.u(n[level], n[level + 1]), c.u(d, d)]
    return f, ins, ["X_low", "A_low", "W_p", "W_pp", "W_h"]


def case_deconv_step(c: _Case, regen: bool = False):
    g = _fld8()
    n, d = g.sizes, 3
    opts = LgrOptions(regen_down_adjacency=regen)
    A_cached = g.normalized[0]
    def f(X_up, A_up, X_cached, D_pp, D_h, W_g, *extra):
        p = {"down0.D_pp": D_pp, "down0.D_h": D_h, "reason0.W_g": W_g}
        if regen:
            p["down0.D_p"] = extra[0]
        A = T.add(T.mul(T.add(A_up, T.transpose(A_up)), 0.25), 1.0)
        return c.reduce(deconv_step(X_up, A, (X_cached, A_cached), p, 0, g, opts))
    ins = [c.u(n[1], d), c.u(n[1], n[1]), c.u(n[0], d), c.u(n[1], n[0]), c.u(d, d), c.u(d, d)]
    names = ["X_up", "A_up", "X_cached", "D_pp", "D_h", "W_g"]
    if regen:
        ins.append(c.u(n[1], n[0]))
        names.append("D_p")
    return f, ins, names


def case_node_to_map(c: _Case, explicit: bool = False):
    C, d, HW, N = 4, 3, 5, 8
    def f(F, X, W_mp, W_tp):
        return c.reduce(node_to_map(F, X, {"W_mp": W_mp, "W_tp": W_tp}, explicit=explicit))
    return f, [c.u(HW, C), c.u(N, d), c.u(C + d), c.u(d, C)], ["F", "X", "W_mp", "W_tp"]


def case_lgr_forward(c: _Case, hierarchy: str = "fld8"):
    g = _fld8() if hierarchy == "fld8" else build_hierarchy(toy2())
    C, d, HW = 3, 2, 4
    opts = LgrOptions(depth=g.depth)
    init = init_lgr_params(g, C, d, opts, c.rng)
    names = sorted(init)
    def f(F, *vals):
        p = dict(zip(names, vals))
        out = lgr_forward(F, g, p, opts)
        # the root-level W_p only reaches the output through the penalty
        return T.add(c.reduce(out), orthogonality_penalty(p, g, opts))
    return f, [c.u(HW, C), *[init[k] for k in names]], ["F", *names]


def case_pyramid(c: _Case):
    C = 3
    def f(F, w, b):
        return c.reduce(pyramid_post(F, {"stack0.pyr.w": w, "stack0.pyr.b": b}, 0))
    return f, [c.u(1, 4, 4, C), c.u(C, C), c.u(C)], ["F", "pyr.w", "pyr.b"]


def case_head(c: _Case):
    def f(F, w, b):
        return c.reduce(head(F, {"head.w": w, "head.b": b}))
    return f, [c.u(1, 2, 2, 3), c.u(3, 4), c.u(4)], ["F", "head.w", "head.b"]


def case_backbone(c: _Case):
    def f(x, w, b):
        return c.reduce(backbone_block(x, {"backbone0.w": w, "backbone0.b": b}, 0))
    return f, [c.u(1, 6, 6, 2), c.u(3, 3, 2, 3), c.u(3)], ["x", "w", "b"]


def case_total_loss(c: _Case):
    g = _fld8()
    cfg = ModelConfig(num_stacks=1)
    target = c.rng.uniform(0, 1, size=(1, 2, 2, 8))
    shapes = [(8, 4), (4, 2), (2, 1)]
    def f(pred, *W):
        p = {f"stack0.up{i}.W_p": w for i, w in enumerate(W)}
        return total_loss(pred, target, p, cfg, g, 0.5)
    return f, [c.u(1, 2, 2, 8), *[c.u(*s) for s in shapes]], ["pred", "W_p0", "W_p1", "W_p2"]


CASES: dict[str, Callable] = {
    "map_to_node": case_map_to_node,
    "map_to_node[spatial]": lambda c: case_map_to_node(c, "spatial"),
    "graph_reasoning": case_graph_reasoning,
    "renormalize": case_renormalize,
    "cluster_step[0]": case_cluster_step,
    "cluster_step[1]": lambda c: case_cluster_step(c, 1),
    "deconv_step": case_deconv_step,
    "deconv_step[regen]": lambda c: case_deconv_step(c, True),
    "node_to_map": case_node_to_map,
    "node_to_map[explicit]": lambda c: case_node_to_map(c, True),
    "lgr_forward[toy2]": lambda c: case_lgr_forward(c, "toy2"),
    "lgr_forward[fld8]": case_lgr_forward,
    "pyramid": case_pyramid,
    "head": case_head,
    "backbone_block": case_backbone,
    "total_loss": case_total_loss,
}


def run_case(name: str, seed: int, eps: float = 1e-5) -> CaseResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, sorted(CASES).index(name)]))
    f, inputs, names = CASES[name](_Case(rng))
    rep = finite_diff_check(f, inputs, eps=eps, names=names)
    return CaseResult(name, seed, rep.max_rel_err, sum(r.checked for r in rep.inputs), rep.excluded)


def run_battery(seeds: Iterable[int] = range(5), cases: Iterable[str] | None = None, eps: float = 1e-5) -> list[CaseResult]:
    return [run_case(name, s, eps) for s in seeds for name in (cases or CASES)]
