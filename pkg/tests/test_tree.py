import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpyfmm.tree import (
    bead_pair_pathways,
    build_tree,
    compute_bounding_cube,
    compute_interaction_lists,
    leaf_pair_pathways,
)


def structural_audit(tree, n):
    assert sorted(tree.perm.tolist()) == list(range(n))
    leaves = tree.leaves
    assert tree.count[leaves].sum() == n
    assert np.all(tree.count[leaves] <= tree.threshold)
    owner = np.full(n, -1)
    for leaf in leaves:
        seg = slice(tree.start[leaf], tree.start[leaf] + tree.count[leaf])
        assert np.all(owner[seg] == -1)
        owner[seg] = leaf
        d = np.abs(tree.points[seg] - tree.center[leaf])
        assert np.all(d <= tree.half[leaf] * (1 + 1e-12))
    assert np.all(owner >= 0)
    for i in range(tree.n_nodes):
        kids = tree.children[i][tree.children[i] >= 0]
        if len(kids):
            kids = kids[np.argsort(tree.start[kids])]
            assert tree.start[kids[0]] == tree.start[i]
            assert tree.count[kids].sum() == tree.count[i]
            assert np.all(tree.start[kids[1:]] == tree.start[kids[:-1]] + tree.count[kids[:-1]])
            assert np.allclose(tree.half[kids], tree.half[i] / 2)
            assert np.allclose(np.abs(tree.center[kids] - tree.center[i]), tree.half[i] / 2)
    np.testing.assert_array_equal(tree.points, tree.points[np.argsort(tree.perm)][tree.perm])


def test_bounding_cube_single_bead():
    cube = compute_bounding_cube(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(cube.center, [1, 2, 3])
    assert 0 < cube.half_width < 1e-10


def test_bounding_cube_two_beads():
    cube = compute_bounding_cube(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    np.testing.assert_array_equal(cube.center, [1, 0, 0])
    assert cube.half_width == pytest.approx(1 + 1e-12, rel=1e-15)


def test_bounding_cube_contains_uniform():
    pts = np.random.default_rng(42).uniform(size=(1000, 3))
    cube = compute_bounding_cube(pts)
    assert cube.contains(pts).all()
    d = np.abs(pts - cube.center).max()
    assert d < cube.half_width


@pytest.mark.parametrize("bad,msg", [(np.zeros((0, 3)), "no beads"),
                                     (np.array([[0.0, np.nan, 0.0]]), "invalid position"),
                                     (np.array([[np.inf, 0.0, 0.0]]), "invalid position")])
def test_bounding_cube_errors(bad, msg):
    with pytest.raises(ValueError, match=msg):
        compute_bounding_cube(bad)


def test_small_tree_single_leaf():
    pts = np.random.default_rng(0).uniform(size=(5, 3))
    tree = build_tree(pts, 10)
    assert tree.n_nodes == 1
    assert tree.is_leaf[0] and tree.count[0] == 5


def test_octant_centers_threshold_one():
    s = np.array([-0.25, 0.25])
    pts = np.array([[x, y, z] for x in s for y in s for z in s]) + 0.5
    tree = build_tree(pts, 1)
    assert tree.n_nodes == 9
    leaves = tree.leaves
    assert len(leaves) == 8
    assert np.all(tree.level[leaves] == 1)
    assert np.all(tree.count[leaves] == 1)


def test_uniform_structural_audit():
    pts = np.random.default_rng(42).uniform(size=(10000, 3))
    tree = build_tree(pts, 80)
    structural_audit(tree, 10000)


def test_build_tree_errors():
    pts = np.random.default_rng(0).uniform(size=(10, 3))
    for bad in (0, -3, 2.5):
        with pytest.raises(ValueError):
            build_tree(pts, bad)
    dup = np.vstack([np.zeros((3, 3)), np.ones((1, 3))])
    with pytest.raises(ValueError, match="coincident points exceed depth limit"):
        build_tree(dup, 2)


def test_empty_octants_pruned():
    pts = np.random.default_rng(3).uniform(size=(500, 3)) * [1, 1, 1e-3]
    tree = build_tree(pts, 20)
    assert np.all(tree.count > 0)


def test_single_leaf_lists():
    tree = build_tree(np.random.default_rng(0).uniform(size=(4, 3)), 10)
    lists = compute_interaction_lists(tree)
    assert lists.U[0].tolist() == [0]
    for lst in (lists.V, lists.W, lists.X):
        assert lst.sizes().sum() == 0


def test_uniform_depth_two_bounds():
    g = (np.arange(4) + 0.5) / 4
    pts = np.array([[x, y, z] for x in g for y in g for z in g])
    tree = build_tree(pts, 1)
    assert len(tree.leaves) == 64 and np.all(tree.level[tree.leaves] == 2)
    lists = compute_interaction_lists(tree)
    for leaf in tree.leaves:
        assert len(lists.U[leaf]) <= 27
        assert len(lists.V[leaf]) <= 189
        assert len(lists.W[leaf]) == 0 and len(lists.X[leaf]) == 0
    interior = [l for l in tree.leaves if np.all(np.abs(tree.center[l] - 0.5) < 0.25)]
    for leaf in interior:
        assert len(lists.U[leaf]) == 27


def test_pair_coverage_seed7():
    pts = np.random.default_rng(7).uniform(size=(2000, 3)) ** 3
    tree = build_tree(pts, 20)
    lists = compute_interaction_lists(tree)
    counts = bead_pair_pathways(tree, lists)
    assert np.all(counts == 1)
    assert np.all(leaf_pair_pathways(tree, lists) == 1)


def test_x_is_dual_of_w():
    pts = np.random.default_rng(11).normal(size=(1500, 3)) ** 3
    tree = build_tree(pts, 10)
    lists = compute_interaction_lists(tree)
    w = set(zip(*[a.tolist() for a in lists.W.pairs()]))
    x = set(zip(*[a.tolist() for a in lists.X.pairs()]))
    assert len(w) > 0
    assert w == {(b, a) for a, b in x}


def test_determinism():
    pts = np.random.default_rng(5).uniform(size=(3000, 3))
    t1, t2 = build_tree(pts, 30), build_tree(pts, 30)
    l1, l2 = compute_interaction_lists(t1), compute_interaction_lists(t2)
    np.testing.assert_array_equal(t1.perm, t2.perm)
    np.testing.assert_array_equal(t1.children, t2.children)
    for name in ("U", "V", "W", "X"):
        np.testing.assert_array_equal(getattr(l1, name).idx, getattr(l2, name).idx)
        np.testing.assert_array_equal(getattr(l1, name).ptr, getattr(l2, name).ptr)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 300), threshold=st.integers(1, 40), seed=st.integers(0, 2 ** 32 - 1),
       clustered=st.booleans())
def test_property_partition_and_coverage(n, threshold, seed, clustered):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n, 3))
    if clustered:
        pts = pts ** 4
    tree = build_tree(pts, threshold)
    structural_audit(tree, n)
    lists = compute_interaction_lists(tree)
    assert np.all(leaf_pair_pathways(tree, lists) == 1)
