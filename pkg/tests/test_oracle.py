"""Certification of the brute-force reference solver.

The gradient routine is checked against central finite differences of
the cost evaluator (which is itself certified against plain-loop
enumeration), so the reference optimum inherits its trust from nothing
but the cost function and elementary calculus.
"""

import numpy as np
import pytest

import cmvlq.oracle as oracle_mod
from cmvlq.coeffs import bar_transform
from cmvlq.decomposition import (
    eval_cost_bar,
    eval_cost_breve,
    eval_cost_mft,
    simulate_bar,
    simulate_breve,
    simulate_mft,
)
from cmvlq.errors import DimensionError
from cmvlq.fbsde import assemble_optimal_control
from cmvlq.instances import random_instance, random_control
from cmvlq.lattice import F_ADAPTED, TreeProcess
from cmvlq.oracle import (
    compare_solutions,
    cost_gradient,
    solve_qp_bar,
    solve_qp_breve,
    solve_qp_exact,
)

FD_STEP = 1e-6
FD_RTOL = 1e-6


def _cost_of(inst, tree, grid, arrays):
    u = TreeProcess(tree, arrays, F_ADAPTED)
    x = simulate_mft(inst.coeffs, tree, grid, u, inst.xi)
    return eval_cost_mft(inst.coeffs, x, u, tree, grid)


def _direction(inst, tree, grid, rng):
    return [
        rng.standard_normal((tree.n_nodes(k), inst.coeffs.d))
        for k in range(grid.n_steps)
    ]


@pytest.mark.parametrize("seed", [0, 5, 12])
def test_gradient_matches_finite_differences(seed):
    inst = random_instance(seed, max_steps=3)
    grid, tree = inst.grid(), inst.tree()
    u0 = random_control(inst, tree, seed=100)
    grad = cost_gradient(inst.coeffs, tree, grid, u0, inst.xi)

    rng = np.random.default_rng([seed, 7])
    n_dirs = 20 if seed == 0 else 6
    for _ in range(n_dirs):
        v = _direction(inst, tree, grid, rng)
        plus = [a + FD_STEP * b for a, b in zip(u0.values, v)]
        minus = [a - FD_STEP * b for a, b in zip(u0.values, v)]
        fd = (_cost_of(inst, tree, grid, plus) - _cost_of(inst, tree, grid, minus)) / (
            2.0 * FD_STEP
        )
        exact = sum(float(np.sum(g * d)) for g, d in zip(grad, v))
        assert abs(fd - exact) <= FD_RTOL * max(1.0, abs(exact))


def test_gradient_is_exactly_affine():
    # quadratic cost: g(a + b) - g(a) must not depend on a
    inst = random_instance(3, max_steps=3)
    grid, tree = inst.grid(), inst.tree()
    rng = np.random.default_rng(11)
    a = _direction(inst, tree, grid, rng)
    b = _direction(inst, tree, grid, rng)

    def g(arrays):
        u = TreeProcess(tree, arrays, F_ADAPTED)
        return cost_gradient(inst.coeffs, tree, grid, u, inst.xi)

    lhs = g([x + y for x, y in zip(a, b)])
    rhs = [ga + gb - g0 for ga, gb, g0 in zip(g(a), g(b), g([0 * x for x in a]))]
    worst = max(float(np.max(np.abs(l - r))) for l, r in zip(lhs, rhs))
    scale = max(float(np.max(np.abs(l))) for l in lhs)
    assert worst <= 1e-12 * max(1.0, scale)


@pytest.mark.parametrize("seed", [1, 8])
def test_qp_optimum_is_stationary_and_unbeatable(seed):
    inst = random_instance(seed, max_steps=4)
    grid, tree = inst.grid(), inst.tree()
    sol = solve_qp_exact(inst.coeffs, tree, grid, inst.xi)
    assert sol.method == "direct"
    assert sol.gradient_sup <= 1e-9 * max(1.0, abs(sol.cost))
    rng = np.random.default_rng([seed, 23])
    for _ in range(10):
        v = _direction(inst, tree, grid, rng)
        for t in (1e-3, 0.3):
            bumped = [a + t * b for a, b in zip(sol.control.values, v)]
            assert _cost_of(inst, tree, grid, bumped) >= sol.cost - 1e-12 * max(
                1.0, abs(sol.cost)
            )


@pytest.mark.parametrize("seed", [0, 2, 6, 9, 14])
def test_reference_optimum_matches_structured_solver(seed):
    inst = random_instance(seed, max_steps=4)
    grid, tree = inst.grid(), inst.tree()
    qp = solve_qp_exact(inst.coeffs, tree, grid, inst.xi)
    mft = assemble_optimal_control(inst.coeffs, tree, inst.xi)
    rep = compare_solutions(inst.coeffs, tree, grid, qp.control, mft.control, inst.xi)
    assert rep.control_sup_diff <= 1e-8
    assert rep.cost_rel_diff <= 1e-9
    assert abs(rep.cost_a - qp.cost) <= 1e-12 * max(1.0, abs(qp.cost))


@pytest.mark.parametrize("seed", [2, 7, 13])
def test_restricted_problems_split_the_reference_cost(seed):
    inst = random_instance(seed, max_steps=4)
    grid, tree = inst.grid(), inst.tree()
    cb = bar_transform(inst.coeffs)

    full = solve_qp_exact(inst.coeffs, tree, grid, inst.xi)
    bar = solve_qp_bar(cb, tree, grid, inst.xi_mean())
    breve = solve_qp_breve(inst.coeffs, tree, grid, inst.xi_centered())

    scale = max(1.0, abs(full.cost))
    assert abs(bar.cost + breve.cost - full.cost) <= 1e-9 * scale

    # the restricted optima are the two components of the full optimum
    ubar_full = [tree.ce_f0_step(k, full.control.values[k])[1] for k in range(grid.n_steps)]
    for k in range(grid.n_steps):
        assert np.max(np.abs(bar.control.values[k] - ubar_full[k])) <= 1e-8
        centered = full.control.values[k] - ubar_full[k]
        assert np.max(np.abs(breve.control.values[k] - centered)) <= 1e-8

    # restricted costs agree with the dedicated one-sided evaluators
    y = simulate_bar(cb, tree, grid, bar.control, inst.xi_mean())
    jb = eval_cost_bar(cb, y, bar.control, tree, grid)
    assert abs(jb - bar.cost) <= 1e-11 * scale
    z = simulate_breve(inst.coeffs, tree, grid, breve.control, inst.xi_centered())
    jbr = eval_cost_breve(inst.coeffs, z, breve.control, tree, grid)
    assert abs(jbr - breve.cost) <= 1e-11 * scale


def test_centered_restriction_rejects_uncentered_initial():
    inst = random_instance(5, max_steps=3)
    with pytest.raises(DimensionError):
        solve_qp_breve(inst.coeffs, inst.tree(), inst.grid(), inst.xi)


def test_conjugate_gradients_agrees_with_direct_solve(monkeypatch):
    inst = random_instance(4, max_steps=3)
    grid, tree = inst.grid(), inst.tree()
    direct = solve_qp_exact(inst.coeffs, tree, grid, inst.xi)
    monkeypatch.setattr(oracle_mod, "DIRECT_SOLVE_LIMIT", -1)
    cg = solve_qp_exact(inst.coeffs, tree, grid, inst.xi)
    assert cg.method == "cg"
    assert abs(cg.cost - direct.cost) <= 1e-10 * max(1.0, abs(direct.cost))
    for k in range(grid.n_steps):
        assert np.max(np.abs(cg.control.values[k] - direct.control.values[k])) <= 1e-8
