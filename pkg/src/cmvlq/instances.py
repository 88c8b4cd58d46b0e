"""Seeded random problem instances satisfying the standing assumptions.

The construction guarantees positivity pathwise rather than hoping for
it: the control weight is M'M + I per step, and the state weight is
built as K'K + S R^-1 S' plus a margin that dominates the largest
node-dependent perturbation any reachable cumulative-W0 value can
produce.  Every instance records its seed so reports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffs import CoefficientSet, make_coefficients, validate_coefficients
from .lattice import JointTree, TimeGrid, TreeProcess, build_joint_tree, F_ADAPTED


@dataclass(frozen=True)
class Instance:
    """A coefficient set plus initial condition atoms and the seed used."""

    coeffs: CoefficientSet
    xi: np.ndarray          # (n_atoms, n)
    atom_probs: np.ndarray  # (n_atoms,)
    seed: int

    def grid(self) -> TimeGrid:
        return self.coeffs.grid()

    def tree(self) -> JointTree:
        return build_joint_tree(self.grid(), atom_probs=self.atom_probs)

    def xi_mean(self) -> np.ndarray:
        return self.atom_probs @ self.xi

    def xi_centered(self) -> np.ndarray:
        return self.xi - self.xi_mean()


def random_instance(
    seed: int,
    *,
    max_state_dim: int = 3,
    max_control_dim: int = 2,
    max_steps: int = 6,
    horizon_range: tuple[float, float] = (0.5, 1.5),
    node_dependent: bool = True,
    random_initial: bool = True,
    scale: float = 1.0,
) -> Instance:
    """Draw one well-posed instance.

    scale < 1 shrinks the dynamics coefficients (useful where an
    iterative solver needs a comfortable contraction).  Entries are drawn
    uniformly from [-1, 1] before scaling.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_state_dim + 1))
    d = int(rng.integers(1, max_control_dim + 1))
    N = int(rng.integers(1, max_steps + 1))
    T = float(rng.uniform(*horizon_range))
    grid = TimeGrid(N, T)
    # largest |cumulative W0| at which running coefficients are evaluated
    max_cum = max(1, N - 1) * grid.sqrt_dt

    def u(shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def sym(arr):
        return 0.5 * (arr + np.swapaxes(arr, -1, -2))

    A = scale * u((N, n, n))
    F = scale * u((N, n, n))
    B = scale * u((N, n, d))
    S = scale * u((N, n, d))
    H = 0.7 * u((n, n)) * scale
    slopes = {}
    if node_dependent:
        slopes = dict(
            A_slope=0.3 * scale * u((N, n, n)),
            F_slope=0.3 * scale * u((N, n, n)),
            B_slope=0.3 * scale * u((N, n, d)),
            b_slope=0.5 * u((N, n)),
            D_slope=0.5 * u((N, n)),
            D0_slope=0.5 * u((N, n)),
            zeta_slope=0.5 * u((N, n)),
            varpi_slope=0.5 * u((N, d)),
        )

    M = u((N, d, d))
    R = np.einsum("kij,kil->kjl", M, M) + np.eye(d)
    K = u((N, n, n))
    KtK = np.einsum("kij,kil->kjl", K, K)
    Rinv_St = np.linalg.solve(R, np.swapaxes(S, 1, 2))
    margin = 0.5
    Q = sym(KtK + S @ Rinv_St) + margin * np.eye(n)
    q_slope = None
    if node_dependent:
        q_slope = sym(u((N, n, n)))
        # keep the Schur complement nonnegative at every reachable level
        norms = np.linalg.norm(q_slope, ord=2, axis=(1, 2))
        cap = 0.9 * margin / max(max_cum, 1e-12)
        too_big = norms > cap
        q_slope[too_big] *= (cap / norms[too_big])[:, None, None]
        slopes["Q_slope"] = q_slope
    KT = u((n, n))
    QT = KT @ KT.T

    c = make_coefficients(
        n,
        d,
        T,
        N,
        A=A,
        F=F,
        B=B,
        S=S,
        b=u((N, n)),
        D=u((N, n)),
        D0=u((N, n)),
        zeta=u((N, n)),
        varpi=u((N, d)),
        Q=Q,
        R=R,
        H=H,
        QT=QT,
        **slopes,
    )
    rep = validate_coefficients(c, grid)
    if not rep.passed:  # the margins above should make this unreachable
        raise AssertionError(f"generated instance failed validation: {rep.messages}")

    if random_initial:
        vals = rng.uniform(-1.0, 1.0, size=(2, n))
        atoms = np.array([0.5, 0.5])
    else:
        vals = rng.uniform(-1.0, 1.0, size=(1, n))
        atoms = np.array([1.0])
    return Instance(coeffs=c, xi=vals, atom_probs=atoms, seed=int(seed))


def random_control(inst: Instance, tree: JointTree, seed: int) -> TreeProcess:
    """An F-adapted control with independent standard-normal node values."""
    rng = np.random.default_rng([inst.seed, seed])
    grid = inst.grid()
    return TreeProcess(
        tree,
        [
            rng.standard_normal((tree.n_nodes(k), inst.coeffs.d))
            for k in range(grid.n_steps)
        ],
        F_ADAPTED,
    )
