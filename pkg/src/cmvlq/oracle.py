"""Brute-force quadratic-program reference solver.

The cost is an exact quadratic in the stacked per-node controls, so the
discretized problem can be solved without any control theory: compute
the gradient by plain chain rule through the recursion (an adjoint sweep
that knows nothing about Riccati equations), assemble the Hessian by
probing with unit vectors, and solve the linear system.  Slow and
memory-hungry, but an independent certificate for the structured
solvers.  Restricted variants minimize over the conditional-mean and
centered admissible classes by reparametrizing onto a basis of the
constraint subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .coeffs import BarCoefficients, CoefficientSet, as_coefficient
from .decomposition import coeff_nodes, eval_cost_mft, simulate_mft
from .errors import ConvergenceError, DimensionError
from .lattice import F0_ADAPTED, F_ADAPTED, JointTree, TimeGrid, TreeProcess

DIRECT_SOLVE_LIMIT = 2000
CG_TOL = 1e-12


@dataclass(frozen=True)
class QpSolution:
    control: TreeProcess
    cost: float
    gradient_sup: float
    dim: int
    method: str


@dataclass(frozen=True)
class ComparisonReport:
    """Side-by-side of two controls for the same problem data."""

    cost_a: float
    cost_b: float
    control_sup_diff: float

    @property
    def cost_rel_diff(self) -> float:
        return abs(self.cost_a - self.cost_b) / max(1.0, abs(self.cost_a))


def _mv(mat, vec):
    return np.einsum("nij,nj->ni", mat, vec)


def _mtv(mat, vec):
    return np.einsum("nji,nj->ni", mat, vec)


def cost_gradient(
    c: CoefficientSet, tree: JointTree, grid: TimeGrid, u: TreeProcess, xi
) -> list:
    """Exact partial derivatives of the cost in the raw control entries.

    Returns one (n_nodes(k), d) array per step; entry (i, l) is the
    derivative of the total expected cost with respect to control
    component l at node i.  Derived purely by differentiating the sum
    over nodes: the conditional-mean couplings show up as group-averaged
    back-propagation terms.
    """
    x = simulate_mft(c, tree, grid, u, xi)
    N = grid.n_steps
    dt = grid.dt
    eye = np.eye(c.n)

    def deviation(k):
        _, xbar = tree.ce_f0_step(k, x.values[k])
        return x.values[k] - xbar @ c.H.T

    def sym(mats):
        return 0.5 * (mats + mats.transpose(0, 2, 1))

    xt = deviation(N)
    qx = xt @ (0.5 * (c.QT + c.QT.T))
    _, ce = tree.ce_f0_step(N, qx)
    grad_x = qx - ce @ c.H
    out = [None] * N
    for k in reversed(range(N)):
        nabla_hat = tree.child_mean(k, grad_x)
        A = coeff_nodes(c.A, tree, k)
        B = coeff_nodes(c.B, tree, k)
        F = coeff_nodes(c.F, tree, k)
        Q = sym(coeff_nodes(c.Q, tree, k))
        S = coeff_nodes(c.S, tree, k)
        R = sym(coeff_nodes(c.R, tree, k))
        zeta = coeff_nodes(c.zeta, tree, k)
        varpi = coeff_nodes(c.varpi, tree, k)
        xtk = deviation(k)

        gk = _mv(R, u.values[k]) + _mtv(S, xtk) + varpi + _mtv(B, nabla_hat)
        out[k] = (tree.probs(k) * dt)[:, None] * gk

        stage = _mv(Q, xtk) + _mv(S, u.values[k]) + zeta
        _, ce_stage = tree.ce_f0_step(k, stage)
        fterm = _mtv(F, nabla_hat)
        _, ce_f = tree.ce_f0_step(k, fterm)
        grad_x = (
            dt * (stage - ce_stage @ c.H)
            + _mtv(eye + dt * A, nabla_hat)
            + dt * ce_f
        )
    return out


# -- flat vector plumbing ---------------------------------------------------


def _layout(tree: JointTree, grid: TimeGrid, d: int):
    shapes = [(tree.n_nodes(k), d) for k in range(grid.n_steps)]
    sizes = [s[0] * s[1] for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return shapes, offsets


def _flatten(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(vec, shapes, offsets) -> list:
    return [
        vec[offsets[i] : offsets[i + 1]].reshape(shapes[i])
        for i in range(len(shapes))
    ]


def _solve_quadratic(grad_of, dim: int, *, label: str):
    """Minimize a quadratic given its affine gradient map on flat vectors."""
    g0 = grad_of(np.zeros(dim))

    def hess_mv(v):
        return grad_of(v) - g0

    if dim <= DIRECT_SOLVE_LIMIT:
        H = np.empty((dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = 1.0
            H[:, j] = hess_mv(e)
        H = 0.5 * (H + H.T)
        sol = np.linalg.solve(H, -g0)
        return sol, "direct"
    # matrix-free conjugate gradients on H u = -g0
    b = -g0
    ustar = np.zeros(dim)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    bnorm = float(np.linalg.norm(b)) or 1.0
    for _ in range(10 * dim):
        Hp = hess_mv(p)
        denom = float(p @ Hp)
        if denom <= 0.0:
            raise ConvergenceError(f"{label}: curvature lost in conjugate gradients")
        alpha = rs / denom
        ustar += alpha * p
        r -= alpha * Hp
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= CG_TOL * bnorm:
            return ustar, "cg"
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(f"{label}: conjugate gradients stalled at dim {dim}")


def solve_qp_exact(
    c: CoefficientSet, tree: JointTree, grid: TimeGrid, xi
) -> QpSolution:
    """Minimize the discretized cost over all adapted controls."""
    shapes, offsets = _layout(tree, grid, c.d)
    dim = int(offsets[-1])

    def grad_of(vec):
        u = TreeProcess(tree, _unflatten(vec, shapes, offsets), F_ADAPTED)
        return _flatten(cost_gradient(c, tree, grid, u, xi))

    sol_vec, method = _solve_quadratic(grad_of, dim, label="full control space")
    u = TreeProcess(tree, _unflatten(sol_vec, shapes, offsets), F_ADAPTED)
    x = simulate_mft(c, tree, grid, u, xi)
    cost = eval_cost_mft(c, x, u, tree, grid)
    gsup = float(np.max(np.abs(grad_of(sol_vec))))
    return QpSolution(control=u, cost=cost, gradient_sup=gsup, dim=dim, method=method)


def _bar_as_plain(cb: BarCoefficients) -> CoefficientSet:
    """The conditional-mean problem viewed as a problem in its own right."""
    n, d, N = cb.n, cb.d, cb.n_steps
    zero_nn = as_coefficient(np.zeros((n, n)), N, (n, n), "F")
    zero_n = as_coefficient(np.zeros(n), N, (n,), "D")
    return CoefficientSet(
        n=n,
        d=d,
        horizon=cb.horizon,
        n_steps=N,
        A=cb.Abar,
        F=zero_nn,
        B=cb.B,
        S=cb.Sbar,
        b=cb.b,
        D=zero_n,
        D0=cb.D0,
        zeta=cb.zetabar,
        varpi=cb.varpi,
        Q=cb.Qbar,
        R=cb.R,
        H=np.zeros((n, n)),
        QT=cb.QbarT,
    )


def _breve_as_plain(c: CoefficientSet) -> CoefficientSet:
    n, d, N = c.n, c.d, c.n_steps
    zero_nn = as_coefficient(np.zeros((n, n)), N, (n, n), "F")
    zero_n = as_coefficient(np.zeros(n), N, (n,), "zero")
    zero_d = as_coefficient(np.zeros(d), N, (d,), "zero")
    return replace(
        c,
        F=zero_nn,
        b=zero_n,
        D0=zero_n,
        zeta=zero_n,
        varpi=zero_d,
        H=np.zeros((n, n)),
    )


def solve_qp_bar(
    cb: BarCoefficients, tree: JointTree, grid: TimeGrid, xi_bar
) -> QpSolution:
    """Minimize the conditional-mean cost over common-noise controls.

    The decision variable is one control per common-noise prefix; the
    gradient of the node-level problem is summed over each prefix.
    """
    plain = _bar_as_plain(cb)
    d = cb.d
    shapes = [(tree.n_prefixes(k), d) for k in range(grid.n_steps)]
    sizes = [s[0] * s[1] for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    dim = int(offsets[-1])
    xi_bar = np.asarray(xi_bar, dtype=float)

    def expand(vec):
        prefs = _unflatten(vec, shapes, offsets)
        return TreeProcess(
            tree, [tree.expand_f0(k, p) for k, p in enumerate(prefs)], F0_ADAPTED
        )

    def grad_of(vec):
        u = expand(vec)
        raw = cost_gradient(plain, tree, grid, u, xi_bar)
        reduced = []
        for k, g in enumerate(raw):
            acc = np.zeros((tree.n_prefixes(k), d))
            np.add.at(acc, tree.w0_of_node[k], g)
            reduced.append(acc)
        return _flatten(reduced)

    sol_vec, method = _solve_quadratic(grad_of, dim, label="common-noise control space")
    u = expand(sol_vec)
    x = simulate_mft(plain, tree, grid, u, xi_bar)
    cost = eval_cost_mft(plain, x, u, tree, grid)
    gsup = float(np.max(np.abs(grad_of(sol_vec))))
    return QpSolution(control=u, cost=cost, gradient_sup=gsup, dim=dim, method=method)


def _centered_basis(member_weights: np.ndarray) -> np.ndarray:
    """Columns spanning the weighted-mean-zero subspace of one group.

    Weighted-orthonormal: Z' diag(w) Z = identity, w' Z = 0.
    """
    g = len(member_weights)
    sq = np.sqrt(member_weights)
    M = np.concatenate([sq[:, None], np.eye(g)], axis=1)
    Qm, _ = np.linalg.qr(M)
    return Qm[:, 1:g] / sq[:, None]


def solve_qp_breve(
    c: CoefficientSet, tree: JointTree, grid: TimeGrid, xi_breve
) -> QpSolution:
    """Minimize the centered cost over conditionally centered controls."""
    plain = _breve_as_plain(c)
    d = c.d
    xi_breve = np.asarray(xi_breve, dtype=float)
    mean = tree.atom_probs @ xi_breve if xi_breve.ndim == 2 else xi_breve
    if float(np.max(np.abs(mean))) > 1e-10 * (1.0 + float(np.max(np.abs(xi_breve)))):
        raise DimensionError("xi_breve", "initial split must have zero mean")

    N = grid.n_steps
    bases = []
    shapes = []
    for k in range(N):
        w = tree._member_weights[k]
        gsize = len(w)
        wn = w / w.sum()
        Z = _centered_basis(wn)
        bases.append(Z)
        shapes.append((tree.n_prefixes(k), gsize - 1, d))
    sizes = [s[0] * s[1] * s[2] for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    dim = int(offsets[-1])

    def to_nodes(vec):
        parts = [
            vec[offsets[i] : offsets[i + 1]].reshape(shapes[i])
            for i in range(len(shapes))
        ]
        vals = []
        for k, beta in enumerate(parts):
            # beta: (prefixes, basis, d) -> sorted member values, then unsort
            sorted_vals = np.einsum("gb,pbd->pgd", bases[k], beta).reshape(
                tree.n_nodes(k), d
            )
            out = np.empty_like(sorted_vals)
            out[tree._group_perm[k]] = sorted_vals
            vals.append(out)
        return TreeProcess(tree, vals, F_ADAPTED)

    def from_nodes(arrays):
        parts = []
        for k, g in enumerate(arrays):
            gsize = bases[k].shape[0]
            sorted_g = g[tree._group_perm[k]].reshape(
                tree.n_prefixes(k), gsize, d
            )
            parts.append(np.einsum("gb,pgd->pbd", bases[k], sorted_g))
        return _flatten(parts)

    def grad_of(vec):
        u = to_nodes(vec)
        return from_nodes(cost_gradient(plain, tree, grid, u, xi_breve))

    sol_vec, method = _solve_quadratic(grad_of, dim, label="centered control space")
    u = to_nodes(sol_vec)
    x = simulate_mft(plain, tree, grid, u, xi_breve)
    cost = eval_cost_mft(plain, x, u, tree, grid)
    gsup = float(np.max(np.abs(grad_of(sol_vec))))
    return QpSolution(control=u, cost=cost, gradient_sup=gsup, dim=dim, method=method)


def compare_solutions(
    c: CoefficientSet,
    tree: JointTree,
    grid: TimeGrid,
    control_a: TreeProcess,
    control_b: TreeProcess,
    xi,
) -> ComparisonReport:
    """Costs of two controls on the same data plus their sup distance."""
    xa = simulate_mft(c, tree, grid, control_a, xi)
    xb = simulate_mft(c, tree, grid, control_b, xi)
    ja = eval_cost_mft(c, xa, control_a, tree, grid)
    jb = eval_cost_mft(c, xb, control_b, tree, grid)
    sup = 0.0
    for k in range(grid.n_steps):
        sup = max(
            sup,
            float(np.max(np.abs(control_a.values[k] - control_b.values[k]))),
        )
    return ComparisonReport(cost_a=ja, cost_b=jb, control_sup_diff=sup)
