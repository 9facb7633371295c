"""Hierarchical layout graphs: levels of named nodes, per-level adjacency,
parent-child assignment masks.

Level 0 holds the leaf landmarks; the last level holds the single root.
Hierarchies are plain-text files (see ``hierarchies/fld8.txt`` for the
directive format) so new landmark sets need no code change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError


@dataclass
class HierarchySpec:
    levels: list[list[str]]
    parent_of: dict[str, str]
    leaf_edges: set[frozenset] = field(default_factory=set)
    middle_edges: dict[int, set[frozenset]] = field(default_factory=dict)
    symmetric_pairs: list[tuple[str, str]] = field(default_factory=list)
    anchors: dict[str, tuple[float, float]] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    name: str = "custom"

    @property
    def leaves(self) -> list[str]:
        return self.levels[0]

    @property
    def sizes(self) -> list[int]:
        return [len(lv) for lv in self.levels]

    def level_of(self, node: str) -> int:
        for i, lv in enumerate(self.levels):
            if node in lv:
                return i
        raise ValidationError(f"unknown node {node!r}")

    def edges_at(self, level: int) -> set[frozenset]:
        return self.leaf_edges if level == 0 else self.middle_edges.get(level, set())

    def children_of(self, node: str) -> list[str]:
        return [c for c, p in self.parent_of.items() if p == node]

    def mirror(self) -> dict[str, str]:
        """Leaf name -> its horizontally mirrored counterpart (self if unpaired)."""
        m = {n: n for n in self.leaves}
        for a, b in self.symmetric_pairs:
            m[a], m[b] = b, a
        return m


@dataclass(frozen=True)
class LayoutGraph:
    spec: HierarchySpec
    adjacency: tuple[np.ndarray, ...]
    normalized: tuple[np.ndarray, ...]
    assignment_mask: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> list[int]:
        return self.spec.sizes

    @property
    def depth(self) -> int:
        """Number of level pairs (clusterings available)."""
        return len(self.spec.levels) - 1

    @property
    def n_leaf(self) -> int:
        return len(self.spec.leaves)

    def index(self, level: int) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.spec.levels[level])}


def validate(spec: HierarchySpec) -> None:
    levels = spec.levels
    if len(levels) < 2:
        raise ValidationError("a hierarchy needs at least a leaf level and a root level")
    if len(levels[-1]) != 1:
        raise ValidationError(f"last level must hold exactly one root, got {levels[-1]}")
    seen: dict[str, int] = {}
    for li, lv in enumerate(levels):
        if not lv:
            raise ValidationError(f"level {li} is empty")
        for n in lv:
            if n in seen:
                raise ValidationError(f"node {n!r} appears twice (levels {seen[n]} and {li})")
            seen[n] = li
    for n, li in seen.items():
        if li == len(levels) - 1:
            if n in spec.parent_of:
                raise ValidationError(f"root {n!r} cannot have a parent")
            continue
        if n not in spec.parent_of:
            raise ValidationError(f"orphan node {n!r} has no parent")
        p = spec.parent_of[n]
        if not isinstance(p, str):
            if len(p) != 1:
                raise ValidationError(f"node {n!r} has multiple parents {list(p)}")
            p = p[0]
        if seen.get(p) != li + 1:
            raise ValidationError(f"parent {p!r} of {n!r} is not on level {li + 1}")
    for c in spec.parent_of:
        if c not in seen:
            raise ValidationError(f"parent map names unknown node {c!r}")
    for li in range(len(levels)):
        for e in spec.edges_at(li):
            pair = tuple(e)
            if len(pair) != 2:
                raise ValidationError(f"self-loop edge on {pair[0]!r}")
            for n in pair:
                if seen.get(n) != li:
                    raise ValidationError(f"edge {sorted(pair)} leaves level {li}")
    used: set[str] = set()
    for a, b in spec.symmetric_pairs:
        for n in (a, b):
            if seen.get(n) != 0:
                raise ValidationError(f"symmetric pair member {n!r} is not a leaf")
            if n in used:
                raise ValidationError(f"leaf {n!r} is in more than one symmetric pair")
            used.add(n)
        if _parent(spec, a) != _parent(spec, b):
            raise ValidationError(f"symmetric pair ({a}, {b}) does not share a parent")


def _parent(spec: HierarchySpec, n: str) -> str:
    p = spec.parent_of[n]
    return p if isinstance(p, str) else p[0]


def normalize_adjacency(A) -> np.ndarray:
    """Self-loop-augmented symmetric normalization D^-1/2 (A + I) D^-1/2."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise ValidationError("adjacency must have a zero diagonal")
    At = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(At.sum(axis=1))
    return At * d[:, None] * d[None, :]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def build_hierarchy(spec: HierarchySpec) -> LayoutGraph:
    validate(spec)
    adj, norm, masks = [], [], []
    for li, lv in enumerate(spec.levels):
        idx = {n: i for i, n in enumerate(lv)}
        A = np.zeros((len(lv), len(lv)))
        for e in spec.edges_at(li):
            a, b = tuple(e)
            A[idx[a], idx[b]] = A[idx[b], idx[a]] = 1.0
        adj.append(_frozen(A))
        norm.append(_frozen(normalize_adjacency(A)))
        if li + 1 < len(spec.levels):
            up = {n: j for j, n in enumerate(spec.levels[li + 1])}
            M = np.zeros((len(lv), len(up)))
            for n in lv:
                M[idx[n], up[_parent(spec, n)]] = 1.0
            masks.append(_frozen(M))
    return LayoutGraph(spec, tuple(adj), tuple(norm), tuple(masks))


# ----------------------------------------------------------------------------
# text format


def parse_hierarchy(text: str, name: str = "custom") -> HierarchySpec:
    levels: list[list[str]] = []
    parents: dict[str, list[str]] = {}
    edges: list[tuple[int, str, str]] = []
    sym: list[tuple[str, str]] = []
    anchors: dict[str, tuple[float, float]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            if key == "level":
                levels.append(args)
            elif key == "parent":
                (c, p) = args
                parents.setdefault(c, []).append(p)
            elif key == "edge":
                (a, b) = args
                edges.append((lineno, a, b))
            elif key == "symmetric":
                (a, b) = args
                sym.append((a, b))
            elif key == "anchor":
                (n, x, y) = args
                anchors[n] = (float(x), float(y))
            elif key == "order":
                order = args
            else:
                raise ValidationError(f"line {lineno}: unknown directive {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"line {lineno}: malformed {key!r} directive: {raw.strip()!r}") from None
    for c, ps in parents.items():
        if len(ps) > 1:
            raise ValidationError(f"node {c!r} has multiple parents {ps}")
    where = {n: i for i, lv in enumerate(levels) for n in lv}
    leaf_edges: set[frozenset] = set()
    middle: dict[int, set[frozenset]] = {}
    for lineno, a, b in edges:
        if a not in where or b not in where:
            raise ValidationError(f"line {lineno}: edge names unknown node")
        if where[a] != where[b]:
            raise ValidationError(f"line {lineno}: edge ({a}, {b}) crosses levels")
        if a == b:
            raise ValidationError(f"line {lineno}: self-loop on {a!r}")
        target = leaf_edges if where[a] == 0 else middle.setdefault(where[a], set())
        target.add(frozenset((a, b)))
    spec = HierarchySpec(
        levels=levels,
        parent_of={c: ps[0] for c, ps in parents.items()},
        leaf_edges=leaf_edges,
        middle_edges=middle,
        symmetric_pairs=sym,
        anchors=anchors,
        order=order,
        name=name,
    )
    validate(spec)
    return spec


def dump_hierarchy(spec: HierarchySpec) -> str:
    out = [f"# {spec.name}"]
    out += ["level " + " ".join(lv) for lv in spec.levels]
    for lv in spec.levels[:-1]:
        out += [f"parent {n} {_parent(spec, n)}" for n in lv]
    for li in range(len(spec.levels)):
        pos = {n: i for i, n in enumerate(spec.levels[li])}
        pairs = sorted(tuple(sorted(e, key=pos.get)) for e in spec.edges_at(li))
        out += [f"edge {a} {b}" for a, b in sorted(pairs, key=lambda p: (pos[p[0]], pos[p[1]]))]
    out += [f"symmetric {a} {b}" for a, b in spec.symmetric_pairs]
    out += [f"anchor {n} {x!r} {y!r}" for n, (x, y) in spec.anchors.items()]
    if spec.order:
        out.append("order " + " ".join(spec.order))
    return "\n".join(out) + "\n"


SHIPPED = ("fld8", "ffld32")


def load_hierarchy(name_or_path: str | Path) -> HierarchySpec:
    """Load a shipped hierarchy by name (``fld8``/``ffld32``) or a spec file path."""
    if str(name_or_path) in SHIPPED:
        text = resources.files("lgr.hierarchies").joinpath(f"{name_or_path}.txt").read_text()
        return parse_hierarchy(text, str(name_or_path))
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read hierarchy file {path}: {exc}") from exc
    return parse_hierarchy(text, path.stem)


def fld8() -> HierarchySpec:
    return load_hierarchy("fld8")


def ffld32() -> HierarchySpec:
    return load_hierarchy("ffld32")


def toy2() -> HierarchySpec:
    """Two linked leaves under a single root; the smallest useful hierarchy."""
    return HierarchySpec(
        levels=[["L.Point", "R.Point"], ["root"]],
        parent_of={"L.Point": "root", "R.Point": "root"},
        leaf_edges={frozenset(("L.Point", "R.Point"))},
        symmetric_pairs=[("L.Point", "R.Point")],
        anchors={"L.Point": (-0.2, 0.0), "R.Point": (0.2, 0.0)},
        name="toy2",
    )


def get_hierarchy(name: str) -> HierarchySpec:
    if name == "toy2":
        return toy2()
    return load_hierarchy(name)
