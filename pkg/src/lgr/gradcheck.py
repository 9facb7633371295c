"""Central finite-difference oracle for the tape's analytic gradients.

The oracle only ever calls the function under ``no_grad``; it never touches
the tape, so it stays independent of the code it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class InputReport:
    name: str
    shape: tuple[int, ...]
    max_rel_err: float
    checked: int
    excluded: int


@dataclass
class GradCheckReport:
    max_rel_err: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def excluded(self) -> int:
        return int(np.sum([r.excluded for r in self.inputs]))

    def __str__(self) -> str:
        lines = [f"max_rel_err={self.max_rel_err:.3e}"]
        for r in self.inputs:
            lines.append(f"  {r.name}{list(r.shape)}: {r.max_rel_err:.3e} ({r.checked} checked, {r.excluded} excluded)")
        return "\n".join(lines)


def rel_err(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def _eval(f, args, monitor: bool):
    with T.no_grad():
        if not monitor:
            return float(np.asarray(f(*args).data).reshape(-1)[0]), None
        T._relu_monitor = []
        try:
            out = f(*args)
            seen = T._relu_monitor
        finally:
            T._relu_monitor = None
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0]), [np.sign(s) for s in seen]


def _kink_crossed(base, probe) -> bool:
    if len(base) != len(probe):
        return True
    return any(b.shape != p.shape or not np.array_equal(b, p) for b, p in zip(base, probe))


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor | np.ndarray],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
    exclude_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(1, |a|, |n|)``. With
    ``exclude_kinks`` an element is skipped when either probe flips the sign
    of any relu input, i.e. when the difference quotient straddles a kink.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in inputs]
    names = list(names) if names is not None else [f"input{i}" for i in range(len(leaves))]

    with T.Tape() as tape:
        out = f(*leaves)
        if out.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
        if out._node is None:
            analytic = {leaf: np.zeros(leaf.shape) for leaf in leaves}
        else:
            analytic = tape.backward(out, wrt=leaves)

    _, base_signs = _eval(f, leaves, exclude_kinks)
    reports = []
    worst = 0.0
    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        ga = analytic[leaf].reshape(-1)
        errs, excluded = [], 0
        for i in range(flat.size):
            vals, crossed = [], False
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[i] += sign * eps
                args = list(leaves)
                args[k] = Tensor(pert.reshape(leaf.shape))
                v, signs = _eval(f, args, exclude_kinks)
                vals.append(v)
                crossed = crossed or (exclude_kinks and _kink_crossed(base_signs, signs))
            if crossed:
                excluded += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * eps)
            errs.append(float(rel_err(ga[i], numeric)))
        m = max(errs) if errs else 0.0
        worst = max(worst, m)
        reports.append(InputReport(names[k], leaf.shape, m, len(errs), excluded))
    return GradCheckReport(worst, reports)
