"""Tree construction and exact-conditioning tests.

The reference implementation here enumerates increment histories with
plain Python loops and computes conditional expectations by grouping
histories on their common-noise prefix, so the vectorized tree machinery
is checked against something written independently.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmvlq.errors import AdaptednessError, CapacityError, DimensionError
from cmvlq.lattice import (
    F0_ADAPTED,
    F_ADAPTED,
    TimeGrid,
    TreeProcess,
    build_joint_tree,
    conditional_expectation_f0,
    inner_product,
    project_breve,
    w0_prefix_cums,
)


def enumerate_histories(n_steps, n_atoms=1):
    """All (atom, history) pairs in tree node order.

    A history is a tuple of (s0, s1) sign pairs, one per step, following
    the documented branch order (+,+), (+,-), (-,+), (-,-).
    """
    pairs = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    out = []
    for atom in range(n_atoms):
        for hist in itertools.product(pairs, repeat=n_steps):
            out.append((atom, hist))
    return out


def brute_ce_f0(values, histories, atom_probs):
    """Conditional mean given the common-noise sign prefix, by grouping."""
    groups = {}
    for (atom, hist), v in zip(histories, values):
        key = tuple(s0 for s0, _ in hist)
        p = atom_probs[atom] * 0.25 ** len(hist)
        num, den = groups.get(key, (0.0, 0.0))
        groups[key] = (num + p * v, den + p)
    out = []
    for (atom, hist), _ in zip(histories, values):
        key = tuple(s0 for s0, _ in hist)
        num, den = groups[key]
        out.append(num / den)
    return np.array(out)


@pytest.fixture
def grid3():
    return TimeGrid(3, 0.75)


def test_grid_dt_consistency():
    g = TimeGrid(7, 1.3)
    assert abs(g.n_steps * g.dt - g.horizon) <= 1e-14 * g.horizon
    assert len(g.times()) == 8


def test_node_counts_and_probabilities(grid3):
    tree = build_joint_tree(grid3)
    for k in range(4):
        assert tree.n_nodes(k) == 4**k
        p = tree.probs(k)
        assert abs(p.sum() - 1.0) <= 1e-14
        assert np.all(p > 0.0)


def test_node_counts_with_atoms(grid3):
    tree = build_joint_tree(grid3, atom_probs=[0.5, 0.25, 0.25])
    for k in range(4):
        assert tree.n_nodes(k) == 3 * 4**k
        assert abs(tree.probs(k).sum() - 1.0) <= 1e-14


def test_increments_have_exact_moments(grid3):
    tree = build_joint_tree(grid3)
    dt = grid3.dt
    for k in range(1, 4):
        p = tree.probs(k)
        for inc in (tree.last_dw0[k], tree.last_dw[k]):
            assert float(p @ inc) == 0.0
            assert abs(float(p @ inc**2) - dt) <= 1e-15
        # the two increments are independent step by step
        assert float(p @ (tree.last_dw0[k] * tree.last_dw[k])) == 0.0


def test_cumulative_paths_match_enumeration(grid3):
    tree = build_joint_tree(grid3)
    s = grid3.sqrt_dt
    for k in range(4):
        hists = enumerate_histories(k)
        cw0 = np.array([s * sum(s0 for s0, _ in h) for _, h in hists])
        cw = np.array([s * sum(s1 for _, s1 in h) for _, h in hists])
        np.testing.assert_allclose(tree.cum_w0(k), cw0, atol=1e-14)
        np.testing.assert_allclose(tree.cum_w(k), cw, atol=1e-14)


def test_deterministic_rebuild(grid3):
    a = build_joint_tree(grid3, atom_probs=[0.5, 0.5])
    b = build_joint_tree(grid3, atom_probs=[0.5, 0.5])
    for k in range(4):
        assert np.array_equal(a.w0_of_node[k], b.w0_of_node[k])
        assert np.array_equal(a.w_of_node[k], b.w_of_node[k])
        assert np.array_equal(a.probs(k), b.probs(k))


def test_capacity_cap():
    with pytest.raises(CapacityError):
        build_joint_tree(TimeGrid(11, 1.0))


def test_atom_prob_validation(grid3):
    with pytest.raises(ValueError):
        build_joint_tree(grid3, atom_probs=[0.7, 0.2])
    with pytest.raises(ValueError):
        build_joint_tree(grid3, atom_probs=[1.5, -0.5])


def test_ce_matches_brute_force():
    grid = TimeGrid(2, 1.0)
    atom_probs = [0.25, 0.75]
    tree = build_joint_tree(grid, atom_probs=atom_probs)
    rng = np.random.default_rng(11)
    vals = [rng.standard_normal(tree.n_nodes(k)) for k in range(3)]
    p = TreeProcess(tree, vals, F_ADAPTED)
    ce = conditional_expectation_f0(p, tree)
    for k in range(3):
        hists = enumerate_histories(k, n_atoms=2)
        expected = brute_ce_f0(vals[k], hists, atom_probs)
        np.testing.assert_allclose(ce.values[k], expected, atol=1e-13)


def test_ce_constant_on_w0_groups(grid3):
    tree = build_joint_tree(grid3, atom_probs=[0.5, 0.5])
    rng = np.random.default_rng(5)
    p = TreeProcess(tree, [rng.standard_normal((tree.n_nodes(k), 2)) for k in range(4)])
    ce = conditional_expectation_f0(p, tree)
    assert ce.adapted == F0_ADAPTED
    assert ce.check_f0_constant(tol=1e-13) <= 1e-13


def test_ce_of_f0_process_is_identity(grid3):
    """Tower property: conditioning an already-conditioned process is a no-op."""
    tree = build_joint_tree(grid3)
    rng = np.random.default_rng(7)
    p = TreeProcess(tree, [rng.standard_normal(tree.n_nodes(k)) for k in range(4)])
    ce = conditional_expectation_f0(p, tree)
    again = conditional_expectation_f0(
        TreeProcess(tree, ce.values, F_ADAPTED), tree
    )
    for k in range(4):
        np.testing.assert_allclose(again.values[k], ce.values[k], rtol=0, atol=1e-14)


def test_ce_rejects_f0_tag(grid3):
    tree = build_joint_tree(grid3)
    p = TreeProcess(tree, [np.zeros(tree.n_nodes(k)) for k in range(2)], F0_ADAPTED)
    with pytest.raises(AdaptednessError):
        conditional_expectation_f0(p, tree)
    with pytest.raises(AdaptednessError):
        project_breve(p, tree)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    a=st.floats(-5, 5, allow_nan=False),
    b=st.floats(-5, 5, allow_nan=False),
)
def test_ce_linearity(seed, a, b):
    grid = TimeGrid(2, 0.5)
    tree = build_joint_tree(grid)
    rng = np.random.default_rng(seed)
    u = [rng.standard_normal(tree.n_nodes(k)) for k in range(3)]
    v = [rng.standard_normal(tree.n_nodes(k)) for k in range(3)]
    ce_u = conditional_expectation_f0(TreeProcess(tree, u), tree)
    ce_v = conditional_expectation_f0(TreeProcess(tree, v), tree)
    mix = conditional_expectation_f0(
        TreeProcess(tree, [a * x + b * y for x, y in zip(u, v)]), tree
    )
    for k in range(3):
        np.testing.assert_allclose(
            mix.values[k], a * ce_u.values[k] + b * ce_v.values[k], atol=1e-12
        )


def test_projection_conditions_to_zero(grid3):
    tree = build_joint_tree(grid3, atom_probs=[0.4, 0.6])
    rng = np.random.default_rng(3)
    p = TreeProcess(tree, [rng.standard_normal((tree.n_nodes(k), 3)) for k in range(4)])
    br = project_breve(p, tree)
    ce = conditional_expectation_f0(br, tree)
    for k in range(4):
        scale = 1.0 + float(np.max(np.abs(p.values[k])))
        assert float(np.max(np.abs(ce.values[k]))) <= 1e-14 * scale


def test_orthogonality(grid3):
    tree = build_joint_tree(grid3)
    rng = np.random.default_rng(9)
    raw = TreeProcess(tree, [rng.standard_normal((tree.n_nodes(k), 2)) for k in range(3)])
    u_f0 = conditional_expectation_f0(raw, tree)
    other = TreeProcess(tree, [rng.standard_normal((tree.n_nodes(k), 2)) for k in range(3)])
    br = project_breve(other, tree)
    ip = inner_product(
        TreeProcess(tree, u_f0.values, F_ADAPTED), br, tree, grid3
    )
    scale = 1.0 + max(
        float(np.max(np.abs(v))) for v in u_f0.values + br.values
    )
    assert abs(ip) <= 1e-12 * scale


def test_inner_product_constant():
    grid = TimeGrid(4, 2.0)
    tree = build_joint_tree(grid)
    one = TreeProcess(tree, [np.ones((tree.n_nodes(k), 1)) for k in range(4)])
    assert abs(inner_product(one, one, tree, grid) - grid.horizon) <= 1e-14


def test_inner_product_cumw0_cumw_brute_force():
    """E integral W0_t W_t dt over the tree, against an exhaustive sum."""
    grid = TimeGrid(2, 1.0)
    tree = build_joint_tree(grid)
    u = TreeProcess(tree, [tree.cum_w0(k)[:, None] for k in range(2)])
    v = TreeProcess(tree, [tree.cum_w(k)[:, None] for k in range(2)])
    got = inner_product(u, v, tree, grid)

    s = grid.sqrt_dt
    brute = 0.0
    for k in range(2):
        for atom, hist in enumerate_histories(k):
            p = 0.25**k
            cw0 = s * sum(s0 for s0, _ in hist)
            cw = s * sum(s1 for _, s1 in hist)
            brute += p * cw0 * cw * grid.dt
    assert abs(brute) <= 1e-15  # independent increments: the exact value is 0
    assert abs(got - brute) <= 1e-14


def test_inner_product_shape_errors(grid3):
    tree = build_joint_tree(grid3)
    u = TreeProcess(tree, [np.ones((tree.n_nodes(k), 2)) for k in range(3)])
    v = TreeProcess(tree, [np.ones((tree.n_nodes(k), 1)) for k in range(3)])
    with pytest.raises(DimensionError):
        inner_product(u, v, tree, grid3)
    short = TreeProcess(tree, [np.ones((tree.n_nodes(k), 2)) for k in range(2)])
    with pytest.raises(DimensionError):
        inner_product(u, short, tree, grid3)


def test_w0_prefix_cums_match_tree(grid3):
    cums = w0_prefix_cums(grid3)
    tree = build_joint_tree(grid3)
    for k in range(4):
        np.testing.assert_array_equal(cums[k], tree.cum_w0_prefix[k])
        assert len(cums[k]) == 2**k


def test_tree_process_node_count_validation(grid3):
    tree = build_joint_tree(grid3)
    with pytest.raises(DimensionError):
        TreeProcess(tree, [np.zeros(3)])
