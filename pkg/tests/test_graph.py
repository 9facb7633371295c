import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgr.errors import DataError, ValidationError
from lgr.graph import (
    HierarchySpec,
    build_hierarchy,
    dump_hierarchy,
    ffld32,
    fld8,
    get_hierarchy,
    load_hierarchy,
    normalize_adjacency,
    parse_hierarchy,
    toy2,
)


def kipf(A):
    # independent oracle: explicit degree matrix and inverse square roots
    At = np.asarray(A, float) + np.eye(len(A))
    D = np.diag(At.sum(axis=1))
    Dm = np.linalg.inv(np.sqrt(D))
    return Dm @ At @ Dm


class TestNormalizeAdjacency:
    def test_no_edges_is_identity(self):
        np.testing.assert_array_equal(normalize_adjacency(np.zeros((4, 4))), np.eye(4))

    def test_two_nodes(self):
        np.testing.assert_allclose(normalize_adjacency([[0, 1], [1, 0]]), [[0.5, 0.5], [0.5, 0.5]])

    def test_block_diagonal(self):
        out = normalize_adjacency([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        np.testing.assert_allclose(out, [[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])

    @pytest.mark.parametrize("A", [np.zeros((2, 3)), [[0, 1], [0, 0]], [[1, 0], [0, 0]]])
    def test_rejects_bad_input(self, A):
        with pytest.raises(ValidationError):
            normalize_adjacency(A)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**30))
    def test_matches_oracle_and_degree_identity(self, n, seed):
        rng = np.random.default_rng(seed)
        U = np.triu(rng.integers(0, 2, (n, n)), 1)
        A = (U + U.T).astype(float)
        Ah = normalize_adjacency(A)
        np.testing.assert_allclose(Ah, kipf(A), atol=1e-12)
        np.testing.assert_allclose(Ah, Ah.T)
        assert np.all(Ah >= 0)
        Dh = np.diag(np.sqrt(A.sum(axis=1) + 1))
        np.testing.assert_allclose((Dh @ Ah @ Dh).sum(axis=1), A.sum(axis=1) + 1)


class TestShippedHierarchies:
    def test_fld8_sizes(self):
        assert build_hierarchy(fld8()).sizes == [8, 4, 2, 1]

    def test_ffld32_sizes(self):
        assert build_hierarchy(ffld32()).sizes == [32, 12, 2, 1]

    def test_fld8_leaf_names(self):
        assert fld8().leaves == ["L.Collar", "R.Collar", "L.Sleeve", "R.Sleeve", "L.Waistline", "R.Waistline", "L.Hem", "R.Hem"]

    def test_fld8_symmetric_pairs(self):
        assert ("L.Collar", "R.Collar") in fld8().symmetric_pairs
        assert len(fld8().symmetric_pairs) == 4

    def test_fld8_part_names(self):
        spec = fld8()
        assert spec.levels[1] == ["collar", "sleeve", "waistline", "hem"]
        assert spec.levels[2] == ["upper_body", "lower_body"]

    def test_fld8_edges(self):
        spec = fld8()
        for a, b in spec.symmetric_pairs:
            assert frozenset((a, b)) in spec.leaf_edges
        for side in "LR":
            chain = [f"{side}.Collar", f"{side}.Sleeve", f"{side}.Waistline", f"{side}.Hem"]
            for a, b in zip(chain, chain[1:]):
                assert frozenset((a, b)) in spec.leaf_edges
        assert len(spec.leaf_edges) == 10
        assert frozenset(("upper_body", "lower_body")) in spec.middle_edges[2]

    def test_intermediate_siblings_linked(self):
        spec = fld8()
        for parent in spec.levels[2]:
            kids = spec.children_of(parent)
            assert frozenset(kids) in spec.middle_edges[1]

    @pytest.mark.parametrize("name", ["fld8", "ffld32", "toy2"])
    def test_graph_invariants(self, name):
        g = build_hierarchy(get_hierarchy(name))
        for A in g.adjacency:
            assert np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
            assert set(np.unique(A)) <= {0.0, 1.0}
        for A, Ah in zip(g.adjacency, g.normalized):
            np.testing.assert_allclose(Ah, kipf(A), atol=1e-12)
        for M in g.assignment_mask:
            np.testing.assert_array_equal(M.sum(axis=1), 1.0)
        assert not g.adjacency[0].flags.writeable

    def test_ffld32_pairs_share_parent(self):
        spec = ffld32()
        for a, b in spec.symmetric_pairs:
            assert spec.parent_of[a] == spec.parent_of[b]


class TestBuild:
    def test_smallest_hierarchy(self):
        g = build_hierarchy(toy2())
        np.testing.assert_array_equal(g.adjacency[0], [[0, 1], [1, 0]])
        np.testing.assert_array_equal(g.assignment_mask[0], [[1], [1]])

    def test_multi_parent_in_text(self):
        text = "level a b\nlevel p q\nlevel r\nparent a p\nparent a q\nparent b p\nparent p r\nparent q r\n"
        with pytest.raises(ValidationError, match="'a'"):
            parse_hierarchy(text)

    def test_multi_parent_in_spec(self):
        spec = HierarchySpec([["a", "b"], ["p", "q"], ["r"]], {"a": ["p", "q"], "b": "p", "p": "r", "q": "r"})
        with pytest.raises(ValidationError, match="'a'"):
            build_hierarchy(spec)

    def test_orphan(self):
        spec = HierarchySpec([["a", "b"], ["r"]], {"a": "r"})
        with pytest.raises(ValidationError, match="orphan node 'b'"):
            build_hierarchy(spec)

    def test_two_roots(self):
        with pytest.raises(ValidationError):
            build_hierarchy(HierarchySpec([["a"], ["r", "s"]], {"a": "r"}))

    def test_cross_level_edge(self):
        text = "level a b\nlevel r\nparent a r\nparent b r\nedge a r\n"
        with pytest.raises(ValidationError, match="crosses levels"):
            parse_hierarchy(text)

    def test_self_loop(self):
        spec = HierarchySpec([["a", "b"], ["r"]], {"a": "r", "b": "r"}, leaf_edges={frozenset(("a",))})
        with pytest.raises(ValidationError, match="self-loop"):
            build_hierarchy(spec)

    def test_pair_across_parents(self):
        text = "level a b\nlevel p q\nlevel r\nparent a p\nparent b q\nparent p r\nparent q r\nsymmetric a b\n"
        with pytest.raises(ValidationError, match="share a parent"):
            parse_hierarchy(text)

    def test_unknown_directive(self):
        with pytest.raises(ValidationError, match="line 1"):
            parse_hierarchy("levels a b\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_hierarchy(tmp_path / "nope.txt")

    def test_text_round_trip(self, tmp_path):
        spec = fld8()
        path = tmp_path / "copy.txt"
        path.write_text(dump_hierarchy(spec))
        back = load_hierarchy(path)
        assert back.levels == spec.levels and back.parent_of == spec.parent_of
        assert back.leaf_edges == spec.leaf_edges and back.middle_edges == spec.middle_edges
        assert back.symmetric_pairs == spec.symmetric_pairs and back.anchors == spec.anchors


def random_spec(draw_sizes, rng) -> HierarchySpec:
    levels = [[f"n{li}_{i}" for i in range(n)] for li, n in enumerate(draw_sizes)]
    parent_of = {}
    for li in range(len(levels) - 1):
        up = levels[li + 1]
        # every upper node gets at least one child
        order = rng.permutation(len(levels[li]))
        for k, i in enumerate(order):
            parent_of[levels[li][i]] = up[k] if k < len(up) else up[rng.integers(len(up))]
    edges = {}
    for li, lv in enumerate(levels):
        es = set()
        for i in range(len(lv)):
            for j in range(i + 1, len(lv)):
                if rng.random() < 0.4:
                    es.add(frozenset((lv[i], lv[j])))
        edges[li] = es
    return HierarchySpec(levels, parent_of, edges[0], {k: v for k, v in edges.items() if k})


@st.composite
def specs(draw):
    depth = draw(st.integers(1, 3))
    sizes = [1]
    for _ in range(depth):
        sizes.insert(0, draw(st.integers(sizes[0], sizes[0] + 4)))
    return random_spec(sizes, np.random.default_rng(draw(st.integers(0, 2**30))))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(specs())
    def test_masks_compose_to_ones(self, spec):
        g = build_hierarchy(spec)
        M = g.assignment_mask[0]
        for nxt in g.assignment_mask[1:]:
            M = M @ nxt
        np.testing.assert_array_equal(M, np.ones((g.n_leaf, 1)))

    @settings(max_examples=40, deadline=None)
    @given(specs(), st.integers(0, 2**30))
    def test_permutation_conjugates(self, spec, seed):
        rng = np.random.default_rng(seed)
        g = build_hierarchy(spec)
        perms = [rng.permutation(len(lv)) for lv in spec.levels]
        shuffled = HierarchySpec([[lv[i] for i in p] for lv, p in zip(spec.levels, perms)], spec.parent_of, spec.leaf_edges, spec.middle_edges)
        h = build_hierarchy(shuffled)
        for li, p in enumerate(perms):
            P = np.eye(len(p))[p]
            np.testing.assert_array_equal(h.adjacency[li], P @ g.adjacency[li] @ P.T)
            np.testing.assert_allclose(h.normalized[li], P @ g.normalized[li] @ P.T, atol=1e-15)
        for li in range(len(perms) - 1):
            P, Q = np.eye(len(perms[li]))[perms[li]], np.eye(len(perms[li + 1]))[perms[li + 1]]
            np.testing.assert_array_equal(h.assignment_mask[li], P @ g.assignment_mask[li] @ Q.T)
