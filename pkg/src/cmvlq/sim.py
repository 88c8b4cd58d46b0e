"""Monte Carlo forward simulation of the closed-loop system.

Increment generation uses one counter-based substream per (path, noise)
pair, keyed [seed, 4*index + noise], so every draw is reproducible from
(seed, path index, step) regardless of batch size or execution order.
Common-noise paths are shared across many idiosyncratic paths (default
16 of them); each particle carries a companion conditional-mean path
integrated from its own closed-loop dynamics under the same common
increments, so conditional-expectation terms in the cost need no
cross-path regression.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coeffs import CoefficientSet
from .errors import CmvlqError, DimensionError, NotDeterministicError
from .lattice import TimeGrid
from .riccati import OdeBackwardQuadratic

SIM_BATCH = 4096
DEFAULT_COMMON_PATHS = 16
NOISE_COMMON, NOISE_IDIO, NOISE_INIT = 0, 1, 2
# auto-storage cutoff: full per-path increment/state recording above this
# many path-steps would dominate memory, so large runs keep summaries only
STORE_LIMIT = 2_000_000


def thread_count() -> int:
    """Worker cap from CMVLQ_THREADS; 0 or unset means automatic."""
    raw = os.environ.get("CMVLQ_THREADS", "").strip()
    if not raw:
        return 1
    value = int(raw)
    if value == 0:
        return os.cpu_count() or 1
    return max(1, value)


def substream(seed: int, index: int, noise: int) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(key=[int(seed), 4 * int(index) + noise]))


def idiosyncratic_normals(seed: int, lo: int, hi: int, count: int) -> np.ndarray:
    out = np.empty((hi - lo, count))
    for row, i in enumerate(range(lo, hi)):
        out[row] = substream(seed, i, NOISE_IDIO).standard_normal(count)
    return out


def common_normals(seed: int, n_common: int, count: int) -> np.ndarray:
    out = np.empty((n_common, count))
    for j in range(n_common):
        out[j] = substream(seed, j, NOISE_COMMON).standard_normal(count)
    return out


def initial_atoms(seed: int, lo: int, hi: int, atom_probs: np.ndarray) -> np.ndarray:
    cum = np.cumsum(atom_probs)
    u = np.empty(hi - lo)
    for row, i in enumerate(range(lo, hi)):
        u[row] = substream(seed, i, NOISE_INIT).random()
    return np.minimum(np.searchsorted(cum, u, side="right"), len(atom_probs) - 1)


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    std_error: float
    n_paths: int


def estimate_from_samples(samples: np.ndarray) -> ValueEstimate:
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(mean=float(samples.mean()), std_error=se, n_paths=n)


@dataclass(frozen=True)
class CheckReport:
    label: str
    estimate: ValueEstimate
    predicted: float
    noise_term: float
    z_score: float
    passed: bool


@dataclass(frozen=True)
class DominanceReport:
    """Paired-path cost excess of a candidate policy over the reference."""

    delta: ValueEstimate
    z_score: float
    passed: bool


@dataclass(frozen=True)
class WeakOrderReport:
    bias_coarse: float
    bias_fine: float
    step_down: float       # mean shift from halving dt once
    step_down_next: float  # mean shift from halving dt again
    ratio: float
    passed: bool


@dataclass(frozen=True)
class PathEnsemble:
    n_paths: int
    seed: int
    n_common: int
    times: np.ndarray
    checkpoint_indices: np.ndarray
    common_index: np.ndarray
    path_costs: np.ndarray
    # summaries always present; full paths only within the storage budget
    group_dev_mean: np.ndarray  # (n_common, n_checkpoints, n)
    group_dev_se: np.ndarray
    increment_mean_w: float
    increment_mean_w0: float
    states: np.ndarray | None = None        # (n_paths, n_checkpoints, n)
    mean_states: np.ndarray | None = None
    controls: np.ndarray | None = None      # (n_paths, n_checkpoints, d)
    dw: np.ndarray | None = None            # (n_paths, n_fine)
    dw0_common: np.ndarray | None = None    # (n_common, n_fine)
    substream_w: np.ndarray | None = None   # substream ids, one per path


# -- fine-grid plumbing -----------------------------------------------------


def _fine_grid(grid: TimeGrid, dt_target: float):
    n_sub = max(1, int(np.ceil(grid.dt / dt_target)))
    n_fine = grid.n_steps * n_sub
    dt = grid.horizon / n_fine
    times = np.linspace(0.0, grid.horizon, n_fine + 1)
    return n_sub, n_fine, dt, times


def _coarse_index(j: int, n_sub: int, n_steps: int) -> int:
    return min(j // n_sub, n_steps - 1)


def _coeff_tables(c: CoefficientSet, n_sub: int, n_fine: int):
    """Per-fine-step coefficient arrays; deterministic coefficients only."""
    if not c.deterministic:
        raise NotDeterministicError(
            "Monte Carlo closed-loop simulation needs deterministic coefficients"
        )
    idx = [_coarse_index(j, n_sub, c.n_steps) for j in range(n_fine)]

    def tab(coeff):
        return np.stack([coeff.at_step(k) for k in idx])

    return {
        "A": tab(c.A),
        "F": tab(c.F),
        "B": tab(c.B),
        "S": tab(c.S),
        "b": tab(c.b),
        "D": tab(c.D),
        "D0": tab(c.D0),
        "zeta": tab(c.zeta),
        "varpi": tab(c.varpi),
        "Q": tab(c.Q),
        "R": tab(c.R),
    }


def _interp_table(src_times: np.ndarray, src_values: np.ndarray, at: np.ndarray):
    """Linear interpolation of a table of arrays along the time axis."""
    pos = np.clip(np.searchsorted(src_times, at, side="right") - 1, 0, len(src_times) - 2)
    t0 = src_times[pos]
    t1 = src_times[pos + 1]
    w = np.where(t1 > t0, (at - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
    shape = (len(at),) + (1,) * (src_values.ndim - 1)
    w = w.reshape(shape)
    return (1.0 - w) * src_values[pos] + w * src_values[pos + 1]


def _batches(n_paths: int):
    return [(lo, min(lo + SIM_BATCH, n_paths)) for lo in range(0, n_paths, SIM_BATCH)]


def _map_batches(worker, ranges):
    workers = min(thread_count(), len(ranges))
    if workers <= 1:
        return [worker(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, lo, hi) for lo, hi in ranges]
        # collect in submission order: the reduction stays deterministic
        return [f.result() for f in futures]


def _guard_finite(x: np.ndarray, j: int, lo: int, what: str):
    ok = np.isfinite(x)
    if not ok.all():
        if x.ndim > 1:
            bad = int(np.nonzero(~ok.reshape(len(x), -1).all(axis=1))[0][0])
        else:
            bad = 0
        raise CmvlqError(f"non-finite {what} at fine step {j}, path {lo + bad}")


def _check_initial(xi, atom_probs, n):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[None, :]
    atom_probs = np.asarray(atom_probs, dtype=float)
    if xi.shape != (len(atom_probs), n):
        raise DimensionError("xi", f"need ({len(atom_probs)}, {n}) initial atoms, got {xi.shape}")
    if abs(atom_probs.sum() - 1.0) > 1e-12 or np.any(atom_probs <= 0):
        raise DimensionError("atom_probs", "must be positive and sum to one")
    return xi, atom_probs


# -- full closed-loop system ------------------------------------------------


def simulate_forward(
    policy,
    c: CoefficientSet,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    xi,
    atom_probs,
    n_common: int = DEFAULT_COMMON_PATHS,
    dt_target: float = 1e-3,
    store_paths: bool | None = None,
) -> PathEnsemble:
    """Euler-Maruyama ensemble under a linear feedback policy.

    The conditional-mean companion is integrated first, one path per
    common-noise stream, from its own closed-loop dynamics; particles
    then follow the full dynamics with the companion supplying every
    conditional-expectation term.  Checkpoints sit on the coarse grid.
    """
    xi, atom_probs = _check_initial(xi, atom_probs, c.n)
    if n_paths < 1 or n_common < 1:
        raise DimensionError("n_paths", "need at least one path and one common stream")
    n_sub, n_fine, dt, times = _fine_grid(grid, dt_target)
    tabs = _coeff_tables(c, n_sub, n_fine)
    left = times[:n_fine]
    Kc = _interp_table(policy.times, policy.gain_centered, left)
    Km = _interp_table(policy.times, policy.gain_mean, left)
    shift = _interp_table(policy.times, policy.shift, left)
    sq = np.sqrt(dt)

    checkpoint_indices = np.arange(0, n_fine + 1, n_sub)
    n_cp = len(checkpoint_indices)
    cp_of = {int(j): i for i, j in enumerate(checkpoint_indices)}

    dw0 = common_normals(seed, n_common, n_fine) * sq

    # companion conditional-mean paths, all common streams at once
    xbar_path = np.empty((n_fine + 1, n_common, c.n))
    xbar_path[0] = (atom_probs @ xi)[None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_fine):
            xb = xbar_path[j]
            ub = -xb @ Km[j].T - shift[j]
            drift = xb @ (tabs["A"][j] + tabs["F"][j]).T + ub @ tabs["B"][j].T + tabs["b"][j]
            xbar_path[j + 1] = xb + dt * drift + np.outer(dw0[:, j], tabs["D0"][j])
            _guard_finite(xbar_path[j + 1], j + 1, 0, "conditional-mean state")

    store = store_paths
    if store is None:
        store = n_paths * n_fine <= STORE_LIMIT

    def worker(lo, hi):
        with np.errstate(over="ignore", invalid="ignore"):
            return _particle_batch(lo, hi)

    def _particle_batch(lo, hi):
        B = hi - lo
        gidx = np.arange(lo, hi) % n_common
        atoms = initial_atoms(seed, lo, hi, atom_probs)
        dw = idiosyncratic_normals(seed, lo, hi, n_fine) * sq
        x = xi[atoms]
        run = np.zeros(B)
        st = np.empty((B, n_cp, c.n)) if store else None
        mst = np.empty((B, n_cp, c.n)) if store else None
        ctl = np.empty((B, n_cp, c.d)) if store else None
        dev_sum = np.zeros((n_common, n_cp, c.n))
        dev_sq = np.zeros((n_common, n_cp, c.n))
        dev_cnt = np.zeros(n_common)
        np.add.at(dev_cnt, gidx, 1.0)
        u = np.zeros((B, c.d))
        for j in range(n_fine + 1):
            xb = xbar_path[j][gidx]
            if j in cp_of:
                i = cp_of[j]
                dev = x - xb
                np.add.at(dev_sum, (gidx, i), dev)
                np.add.at(dev_sq, (gidx, i), dev * dev)
                if store:
                    st[:, i] = x
                    mst[:, i] = xb
            if j == n_fine:
                e = x - xb @ c.H.T
                run += 0.5 * np.einsum("bi,ij,bj->b", e, c.QT, e)
                if store:
                    ctl[:, n_cp - 1] = u
                break
            u = -(x - xb) @ Kc[j].T - xb @ Km[j].T - shift[j]
            if store and j in cp_of:
                ctl[:, cp_of[j]] = u
            e = x - xb @ c.H.T
            run += dt * 0.5 * (
                np.einsum("bi,ij,bj->b", e, tabs["Q"][j], e)
                + 2.0 * np.einsum("bi,ij,bj->b", e, tabs["S"][j], u)
                + np.einsum("bi,ij,bj->b", u, tabs["R"][j], u)
                + 2.0 * e @ tabs["zeta"][j]
                + 2.0 * u @ tabs["varpi"][j]
            )
            drift = x @ tabs["A"][j].T + u @ tabs["B"][j].T + xb @ tabs["F"][j].T + tabs["b"][j]
            x = (
                x
                + dt * drift
                + np.outer(dw[:, j], tabs["D"][j])
                + np.outer(dw0[gidx, j], tabs["D0"][j])
            )
            _guard_finite(x, j + 1, lo, "state")
        return dict(
            costs=run, gidx=gidx, dw_sum=dw.sum(), states=st, mean_states=mst,
            controls=ctl, dw=dw if store else None,
            dev_sum=dev_sum, dev_sq=dev_sq, dev_cnt=dev_cnt,
        )

    parts = _map_batches(worker, _batches(n_paths))

    costs = np.concatenate([p["costs"] for p in parts])
    common_index = np.concatenate([p["gidx"] for p in parts])
    dev_sum = sum(p["dev_sum"] for p in parts)
    dev_sq = sum(p["dev_sq"] for p in parts)
    dev_cnt = sum(p["dev_cnt"] for p in parts)
    cnt = np.maximum(dev_cnt, 1.0)[:, None, None]
    dev_mean = dev_sum / cnt
    var = np.maximum(dev_sq / cnt - dev_mean**2, 0.0)
    denom = np.maximum(dev_cnt - 1.0, 1.0)[:, None, None]
    dev_se = np.sqrt(var * (dev_cnt[:, None, None] / denom)) / np.sqrt(cnt)

    return PathEnsemble(
        n_paths=n_paths,
        seed=seed,
        n_common=n_common,
        times=times,
        checkpoint_indices=checkpoint_indices,
        common_index=common_index,
        path_costs=costs,
        group_dev_mean=dev_mean,
        group_dev_se=dev_se,
        increment_mean_w=float(sum(p["dw_sum"] for p in parts) / (n_paths * n_fine)),
        increment_mean_w0=float(dw0.mean()),
        states=np.concatenate([p["states"] for p in parts]) if store else None,
        mean_states=np.concatenate([p["mean_states"] for p in parts]) if store else None,
        controls=np.concatenate([p["controls"] for p in parts]) if store else None,
        dw=np.concatenate([p["dw"] for p in parts]) if store else None,
        dw0_common=dw0 if store else None,
        substream_w=4 * np.arange(n_paths) + NOISE_IDIO,
    )


def cluster_standard_error(samples: np.ndarray, groups: np.ndarray) -> float:
    """Standard error of the mean under within-group correlation.

    Paths sharing a common-noise stream are correlated, so the mean is
    effectively averaged over the distinct streams; the variance comes
    from group totals (the usual cluster-robust estimator), which for
    equal group sizes reduces to std(group means)/sqrt(n_groups).  With
    a single nonempty group there is nothing to compare across streams
    and the plain iid formula is the only estimate available.
    """
    samples = np.asarray(samples, dtype=float)
    groups = np.asarray(groups)
    n = len(samples)
    if n != len(groups):
        raise DimensionError("groups", f"{len(groups)} labels for {n} samples")
    if n <= 1:
        return 0.0
    size = int(groups.max()) + 1
    sums = np.bincount(groups, weights=samples, minlength=size)
    counts = np.bincount(groups, minlength=size)
    live = counts > 0
    n_groups = int(live.sum())
    if n_groups <= 1:
        return estimate_from_samples(samples).std_error
    resid = sums[live] - counts[live] * samples.mean()
    variance = float(resid @ resid) * n_groups / (n_groups - 1) / n**2
    return math.sqrt(variance)


def estimate_cost(ensemble: PathEnsemble, c: CoefficientSet, grid: TimeGrid) -> ValueEstimate:
    """Mean per-path cost with a common-noise-aware standard error.

    The reported error accounts for the clustering of paths on shared
    common-noise streams; it is the honest uncertainty of the mean even
    when the between-stream variation dominates the within-stream one.
    """
    if len(ensemble.path_costs) != ensemble.n_paths:
        raise DimensionError("ensemble", "per-path costs missing or inconsistent")
    se = cluster_standard_error(ensemble.path_costs, ensemble.common_index)
    return ValueEstimate(
        mean=float(ensemble.path_costs.mean()), std_error=se, n_paths=ensemble.n_paths
    )


def conditional_zero_worst(ensemble: PathEnsemble) -> float:
    """Largest |mean|/SE of (x - xbar) over groups, checkpoints, components.

    Zero-spread cells (exactly centered by construction) count as zero.
    """
    mean = ensemble.group_dev_mean
    se = ensemble.group_dev_se
    z = np.where(se > 0, np.abs(mean) / np.where(se > 0, se, 1.0), np.where(np.abs(mean) > 0, np.inf, 0.0))
    return float(z.max())


# -- centered subproblem checks ---------------------------------------------


def _centered_tables(c: CoefficientSet, pi: OdeBackwardQuadratic, left_times: np.ndarray):
    piv = _interp_table(pi.times, pi.values, left_times)
    n_fine = len(left_times)
    K = np.empty((n_fine, c.d, c.n))
    for j in range(n_fine):
        k = _coarse_index(j, max(1, n_fine // c.n_steps), c.n_steps)
        K[j] = np.linalg.solve(
            c.R.at_step(k), c.S.at_step(k).T + c.B.at_step(k).T @ piv[j]
        )
    return K, piv


def _noise_value_curve(c: CoefficientSet, pi: OdeBackwardQuadratic):
    """c(t) = half the tail integral of D' Pi D along the fine grid."""
    tt = pi.times
    f = np.empty(len(tt))
    n_sub = pi.n_sub
    for j, t in enumerate(tt):
        k = _coarse_index(min(j, len(tt) - 2), n_sub, c.n_steps)
        D = c.D.at_step(k)
        f[j] = D @ pi.values[j] @ D
    seg = 0.5 * (f[:-1] + f[1:]) * np.diff(tt)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return tt, 0.5 * tail


def _breve_run(
    c: CoefficientSet,
    pi: OdeBackwardQuadratic,
    grid: TimeGrid,
    xi_centered,
    atom_probs,
    n_paths: int,
    seed: int,
    *,
    dt_target: float = 1e-3,
    plus_sign: bool = False,
    h_index: int | None = None,
):
    """Closed-loop centered system; returns per-path cost samples.

    With h_index set, also returns the per-path Bellman statistic:
    running cost to h plus the value function evaluated at the state
    there (tail noise constant included so the identity is exact for
    any diffusion).
    """
    xi_c, atom_probs = _check_initial(xi_centered, atom_probs, c.n)
    mean0 = atom_probs @ xi_c
    if np.max(np.abs(mean0)) > 1e-10 * (1.0 + np.max(np.abs(xi_c))):
        raise DimensionError("xi_centered", "initial split must have zero mean")
    n_sub, n_fine, dt, times = _fine_grid(grid, dt_target)
    if h_index is not None and not (0 <= h_index <= n_fine):
        raise DimensionError("h_index", f"must lie in [0, {n_fine}]")
    tabs = _coeff_tables(c, n_sub, n_fine)
    K, _ = _centered_tables(c, pi, times[:n_fine])
    tail_t, tail_v = _noise_value_curve(c, pi)
    sq = np.sqrt(dt)
    sign = 1.0 if plus_sign else -1.0

    def worker(lo, hi):
        atoms = initial_atoms(seed, lo, hi, atom_probs)
        dw = idiosyncratic_normals(seed, lo, hi, n_fine) * sq
        z = xi_c[atoms]
        run = np.zeros(hi - lo)
        bell = None
        for j in range(n_fine + 1):
            if h_index is not None and j == h_index:
                t = times[j]
                Pih = pi.at_time(t)
                bell = (
                    run
                    + 0.5 * np.einsum("bi,ij,bj->b", z, Pih, z)
                    + float(np.interp(t, tail_t, tail_v))
                )
            if j == n_fine:
                run += 0.5 * np.einsum("bi,ij,bj->b", z, c.QT, z)
                break
            a = sign * (z @ K[j].T)
            run += dt * 0.5 * (
                np.einsum("bi,ij,bj->b", z, tabs["Q"][j], z)
                + 2.0 * np.einsum("bi,ij,bj->b", z, tabs["S"][j], a)
                + np.einsum("bi,ij,bj->b", a, tabs["R"][j], a)
            )
            z = z + dt * (z @ tabs["A"][j].T + a @ tabs["B"][j].T) + np.outer(dw[:, j], tabs["D"][j])
            _guard_finite(z, j + 1, lo, "centered state")
        return run, bell

    parts = _map_batches(worker, _batches(n_paths))
    costs = np.concatenate([p[0] for p in parts])
    bells = np.concatenate([p[1] for p in parts]) if h_index is not None else None
    return costs, bells


def _predicted_value(c, pi, xi_c, atom_probs):
    xi_c = np.atleast_2d(np.asarray(xi_c, dtype=float))
    initial = 0.5 * float(
        np.einsum("a,ai,ij,aj->", np.asarray(atom_probs, float), xi_c, pi.values[0], xi_c)
    )
    _, tail = _noise_value_curve(c, pi)
    return initial, float(tail[0])


def check_value_function(
    c: CoefficientSet,
    pi: OdeBackwardQuadratic,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    xi_centered,
    atom_probs,
    dt_target: float = 1e-3,
) -> CheckReport:
    """Simulated optimal centered cost against the quadratic value form."""
    costs, _ = _breve_run(
        c, pi, grid, xi_centered, atom_probs, n_paths, seed, dt_target=dt_target
    )
    est = estimate_from_samples(costs)
    initial, noise = _predicted_value(c, pi, xi_centered, atom_probs)
    predicted = initial + noise
    gap = est.mean - predicted
    z = gap / est.std_error if est.std_error > 0 else (0.0 if gap == 0 else np.inf)
    return CheckReport(
        label="value-function",
        estimate=est,
        predicted=predicted,
        noise_term=noise,
        z_score=float(z),
        passed=bool(abs(gap) <= 3.0 * est.std_error),
    )


def check_bellman(
    c: CoefficientSet,
    pi: OdeBackwardQuadratic,
    grid: TimeGrid,
    h_index: int,
    n_paths: int,
    seed: int,
    *,
    xi_centered,
    atom_probs,
    dt_target: float = 1e-3,
) -> CheckReport:
    """Running cost to an intermediate time plus the value there.

    Under the optimal policy this matches the initial value in
    expectation; h_index indexes the simulation's fine grid.
    """
    _, bells = _breve_run(
        c,
        pi,
        grid,
        xi_centered,
        atom_probs,
        n_paths,
        seed,
        dt_target=dt_target,
        h_index=h_index,
    )
    est = estimate_from_samples(bells)
    initial, noise = _predicted_value(c, pi, xi_centered, atom_probs)
    predicted = initial + noise
    gap = est.mean - predicted
    z = gap / est.std_error if est.std_error > 0 else (0.0 if gap == 0 else np.inf)
    return CheckReport(
        label="bellman-midpoint",
        estimate=est,
        predicted=predicted,
        noise_term=noise,
        z_score=float(z),
        passed=bool(abs(gap) <= 3.0 * est.std_error),
    )


def check_policy_dominance(
    c: CoefficientSet,
    pi: OdeBackwardQuadratic,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    xi_centered,
    atom_probs,
    dt_target: float = 1e-3,
) -> DominanceReport:
    """Paired comparison of the sign-flipped feedback against the optimum.

    Both runs consume identical substreams, so the per-path cost
    difference isolates the policy effect; the flipped sign must lose
    by more than three standard errors of the paired difference.
    """
    base, _ = _breve_run(
        c, pi, grid, xi_centered, atom_probs, n_paths, seed, dt_target=dt_target
    )
    flipped, _ = _breve_run(
        c,
        pi,
        grid,
        xi_centered,
        atom_probs,
        n_paths,
        seed,
        dt_target=dt_target,
        plus_sign=True,
    )
    est = estimate_from_samples(flipped - base)
    z = est.mean / est.std_error if est.std_error > 0 else np.inf
    return DominanceReport(delta=est, z_score=float(z), passed=bool(z > 3.0))


def weak_order_check(
    c: CoefficientSet,
    pi: OdeBackwardQuadratic,
    grid: TimeGrid,
    exact_value: float,
    n_paths: int,
    seed: int,
    *,
    xi_centered,
    atom_probs,
    n_coarse: int,
) -> WeakOrderReport:
    """Euler bias decay under step halving, on strongly coupled paths.

    Three resolutions (h, h/2, h/4) consume the same underlying Gaussian
    draws, coarser increments being pair sums of finer ones, so the mean
    shift from one halving to the next is measured with the shared
    sampling error cancelled.  For a linear-in-dt bias the two shifts
    have ratio equal to the bias decay factor; weak order one puts it
    near two.  Biases against the supplied exact value are reported for
    context but carry the raw Monte Carlo error.
    """
    xi_c, atom_probs = _check_initial(xi_centered, atom_probs, c.n)
    counts = [n_coarse, 2 * n_coarse, 4 * n_coarse]
    n_finest = counts[-1]

    def run(count, dws):
        dt = grid.horizon / count
        tabs = _coeff_tables(c, max(1, count // c.n_steps), count)
        K, _ = _centered_tables(c, pi, np.linspace(0.0, grid.horizon, count + 1)[:-1])

        def worker(lo, hi):
            atoms = initial_atoms(seed, lo, hi, atom_probs)
            z = xi_c[atoms]
            run_cost = np.zeros(hi - lo)
            for j in range(count):
                a = -(z @ K[j].T)
                run_cost += dt * 0.5 * (
                    np.einsum("bi,ij,bj->b", z, tabs["Q"][j], z)
                    + 2.0 * np.einsum("bi,ij,bj->b", z, tabs["S"][j], a)
                    + np.einsum("bi,ij,bj->b", a, tabs["R"][j], a)
                )
                z = z + dt * (z @ tabs["A"][j].T + a @ tabs["B"][j].T) + np.outer(
                    dws[lo:hi, j], tabs["D"][j]
                )
            run_cost += 0.5 * np.einsum("bi,ij,bj->b", z, c.QT, z)
            return run_cost

        return np.concatenate([worker(lo, hi) for lo, hi in _batches(n_paths)])

    finest_normals = np.empty((n_paths, n_finest))
    for lo, hi in _batches(n_paths):
        finest_normals[lo:hi] = idiosyncratic_normals(seed, lo, hi, n_finest)
    dws = finest_normals * np.sqrt(grid.horizon / n_finest)
    means = []
    for count in reversed(counts):
        means.append(float(run(count, dws).mean()))
        dws = dws[:, 0::2] + dws[:, 1::2]
    mean_finest, mean_mid, mean_coarse = means

    step_down = mean_coarse - mean_mid
    step_down_next = mean_mid - mean_finest
    ratio = step_down / step_down_next if step_down_next != 0 else np.inf
    return WeakOrderReport(
        bias_coarse=abs(mean_coarse - exact_value),
        bias_fine=abs(mean_mid - exact_value),
        step_down=float(step_down),
        step_down_next=float(step_down_next),
        ratio=float(ratio),
        passed=bool(1.6 <= ratio <= 2.6),
    )
