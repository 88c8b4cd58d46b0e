"""Joint path tree for one idiosyncratic and one common Wiener process.

The discretization enumerates full increment histories: each step branches
into the four sign combinations of (dW0, dW), both increments of magnitude
sqrt(dt), each branch with probability 1/4.  Nodes are never merged, so a
node at step k is exactly one history of k increment pairs.  Conditional
expectation given the common-noise history is then an exact weighted mean
over the nodes sharing a W0 prefix, which is what makes the decomposition
identities hold at floating-point precision instead of up to a
discretization error.

Node ordering is lexicographic in the increment history, branches ordered
(+,+), (+,-), (-,+), (-,-) with "+" first.  An optional initial
randomization ("atoms", outermost index) realizes a random initial state;
atoms count as idiosyncratic information, so conditioning on the common
noise averages over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdaptednessError, CapacityError, DimensionError

F_ADAPTED = "F"
F0_ADAPTED = "F0"

MAX_TREE_STEPS = 10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with n_steps steps on [0, horizon]."""

    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not self.horizon > 0.0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def w0_prefix_cums(grid: TimeGrid) -> list[np.ndarray]:
    """Cumulative common-noise value per W0 prefix, one array per step.

    Entry k has shape (2**k,), indexed by the prefix id whose bits are the
    signs of the k first dW0 increments (0 bit = "+").  Step 0 is the
    single root prefix with value 0.  Independent of the full tree, so the
    Riccati recursions can run without building it.
    """
    s = grid.sqrt_dt
    cums = [np.zeros(1)]
    for _ in range(grid.n_steps):
        prev = cums[-1]
        nxt = np.repeat(prev, 2)
        nxt[0::2] += s
        nxt[1::2] -= s
        cums.append(nxt)
    return cums


class JointTree:
    """Enumerated joint increment histories plus exact conditioning maps.

    Not constructed directly; use :func:`build_joint_tree`.
    """

    def __init__(self, grid: TimeGrid, atom_probs: np.ndarray):
        self.grid = grid
        self.atom_probs = atom_probs
        self.n_atoms = len(atom_probs)
        n = grid.n_steps
        m = self.n_atoms
        s = grid.sqrt_dt

        # Per-step index maps, all in (atom, history) lexicographic order.
        self.w0_of_node: list[np.ndarray] = []
        self.w_of_node: list[np.ndarray] = []
        self.atom_of_node: list[np.ndarray] = []
        self.node_probs: list[np.ndarray] = []
        # Increment that led into each node (empty at step 0).
        self.last_dw0: list[np.ndarray] = [np.zeros(0)]
        self.last_dw: list[np.ndarray] = [np.zeros(0)]
        self.cum_w0_prefix = w0_prefix_cums(grid)

        w0 = np.zeros(m, dtype=np.int64)
        w = np.zeros(m, dtype=np.int64)
        atom = np.arange(m, dtype=np.int64)
        probs = np.asarray(atom_probs, dtype=float).copy()
        self.w0_of_node.append(w0)
        self.w_of_node.append(w)
        self.atom_of_node.append(atom)
        self.node_probs.append(probs)

        # Branch order (+,+), (+,-), (-,+), (-,-): sign arrays per child slot.
        sign0 = np.array([1.0, 1.0, -1.0, -1.0])
        sign1 = np.array([1.0, -1.0, 1.0, -1.0])
        bit0 = np.array([0, 0, 1, 1], dtype=np.int64)
        bit1 = np.array([0, 1, 0, 1], dtype=np.int64)
        for _ in range(n):
            count = len(w0)
            w0 = (np.repeat(w0, 4) << 1) | np.tile(bit0, count)
            w = (np.repeat(w, 4) << 1) | np.tile(bit1, count)
            atom = np.repeat(atom, 4)
            probs = np.repeat(probs, 4) * 0.25
            self.w0_of_node.append(w0)
            self.w_of_node.append(w)
            self.atom_of_node.append(atom)
            self.node_probs.append(probs)
            self.last_dw0.append(np.tile(sign0 * s, count))
            self.last_dw.append(np.tile(sign1 * s, count))

        # Grouping permutation per step: nodes sorted by (w0, atom, w) so the
        # members of each W0 group are contiguous.  Member weights within a
        # group are identical across groups.
        self._group_perm: list[np.ndarray] = []
        self._member_weights: list[np.ndarray] = []
        for k in range(n + 1):
            perm = np.lexsort(
                (self.w_of_node[k], self.atom_of_node[k], self.w0_of_node[k])
            )
            self._group_perm.append(perm)
            wk = np.repeat(probs_normalized(atom_probs), 2**k) / 2**k
            self._member_weights.append(wk)

    def n_nodes(self, k: int) -> int:
        return self.n_atoms * 4**k

    def n_prefixes(self, k: int) -> int:
        return 2**k

    def probs(self, k: int) -> np.ndarray:
        return self.node_probs[k]

    def cum_w0(self, k: int) -> np.ndarray:
        """Cumulative W0 per node at step k."""
        return self.cum_w0_prefix[k][self.w0_of_node[k]]

    def cum_w(self, k: int) -> np.ndarray:
        """Cumulative idiosyncratic W per node at step k."""
        if k == 0:
            return np.zeros(self.n_nodes(0))
        bits = (self.w_of_node[k][:, None] >> np.arange(k - 1, -1, -1)) & 1
        return self.grid.sqrt_dt * (1.0 - 2.0 * bits).sum(axis=1)

    # -- exact conditioning -------------------------------------------------

    def ce_f0_step(self, k: int, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Conditional expectation given the W0 prefix at step k.

        values has shape (n_nodes(k), ...).  Returns (per-prefix array of
        shape (2**k, ...), per-node expansion of the same).
        """
        v = np.asarray(values)
        if v.shape[0] != self.n_nodes(k):
            raise DimensionError("values", f"expected leading dim {self.n_nodes(k)}, got {v.shape[0]}", step=k)
        g = self.n_atoms * 2**k
        grouped = v[self._group_perm[k]].reshape((2**k, g) + v.shape[1:])
        prefix = np.einsum("g,xg...->x...", self._member_weights[k], grouped)
        return prefix, prefix[self.w0_of_node[k]]

    def expand_f0(self, k: int, prefix_values: np.ndarray) -> np.ndarray:
        """Broadcast per-prefix values (2**k, ...) onto the full node set."""
        pv = np.asarray(prefix_values)
        if pv.shape[0] != 2**k:
            raise DimensionError("prefix_values", f"expected leading dim {2 ** k}, got {pv.shape[0]}", step=k)
        return pv[self.w0_of_node[k]]

    def child_mean(self, k: int, child_values: np.ndarray) -> np.ndarray:
        """One-step predictor: mean over the four children of each node.

        child_values lives on step k+1; the result on step k.  Children
        of node i occupy slots 4i..4i+3, each with weight 1/4.
        """
        v = self._children_grouped(k, child_values)
        return v.mean(axis=1)

    def child_increment_mean(self, k: int, child_values: np.ndarray, which: str) -> np.ndarray:
        """E[value * dW]/dt over each node's children, for either noise.

        On the two-point increment this extracts the exact martingale
        loading of the chosen Wiener process.
        """
        v = self._children_grouped(k, child_values)
        if which == "w":
            pattern = np.array([1.0, -1.0, 1.0, -1.0])
        elif which == "w0":
            pattern = np.array([1.0, 1.0, -1.0, -1.0])
        else:
            raise ValueError(f"which must be 'w' or 'w0', got {which!r}")
        shaped = pattern.reshape((1, 4) + (1,) * (v.ndim - 2))
        return (v * shaped).sum(axis=1) / (4.0 * self.grid.sqrt_dt)

    def _children_grouped(self, k: int, child_values: np.ndarray) -> np.ndarray:
        v = np.asarray(child_values)
        if k < 0 or k + 1 > self.grid.n_steps:
            raise DimensionError("step", f"no children beyond step {self.grid.n_steps}", step=k)
        if v.shape[0] != self.n_nodes(k + 1):
            raise DimensionError(
                "child_values",
                f"expected leading dim {self.n_nodes(k + 1)}, got {v.shape[0]}",
                step=k + 1,
            )
        return v.reshape((self.n_nodes(k), 4) + v.shape[1:])


def probs_normalized(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p / p.sum()


def build_joint_tree(grid: TimeGrid, atom_probs=None) -> JointTree:
    """Enumerate the joint tree for the given grid.

    atom_probs, when given, lists the probabilities of the initial
    randomization atoms (they must sum to 1).  Capped at MAX_TREE_STEPS
    steps; beyond that the node count is unmanageable and the ODE or
    Monte Carlo route should be used instead.
    """
    if grid.n_steps > MAX_TREE_STEPS:
        raise CapacityError(
            f"a joint path tree with {grid.n_steps} steps has "
            f"{4 ** grid.n_steps} terminal nodes; the enumerated-tree mode is "
            f"capped at {MAX_TREE_STEPS} steps -- use the ODE backend or Monte "
            f"Carlo simulation for finer grids"
        )
    if atom_probs is None:
        atom_probs = np.ones(1)
    atom_probs = np.asarray(atom_probs, dtype=float)
    if atom_probs.ndim != 1 or len(atom_probs) < 1:
        raise DimensionError("atom_probs", "must be a 1-d probability vector")
    if np.any(atom_probs <= 0.0):
        raise ValueError("atom probabilities must be positive")
    if abs(atom_probs.sum() - 1.0) > 1e-12:
        raise ValueError("atom probabilities must sum to 1")
    return JointTree(grid, atom_probs)


@dataclass
class TreeProcess:
    """Values on tree nodes, one array per step, with an adaptedness tag.

    values[k] has leading dimension tree.n_nodes(k); the payload may be a
    scalar slot, a vector, or a matrix.  A process tagged F0_ADAPTED takes
    equal values on all nodes sharing a W0 prefix, which is checkable
    exactly because conditioning is an enumerated mean.
    """

    tree: JointTree
    values: list = field(default_factory=list)
    adapted: str = F_ADAPTED

    def __post_init__(self):
        if self.adapted not in (F_ADAPTED, F0_ADAPTED):
            raise AdaptednessError(f"unknown adaptedness tag {self.adapted!r}")
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        for k, v in enumerate(self.values):
            if v.shape[0] != self.tree.n_nodes(k):
                raise DimensionError(
                    "values", f"expected {self.tree.n_nodes(k)} nodes, got {v.shape[0]}", step=k
                )

    @property
    def n_step_arrays(self) -> int:
        return len(self.values)

    def payload_shape(self) -> tuple:
        return self.values[0].shape[1:]

    def check_f0_constant(self, tol: float = 1e-10) -> float:
        """Largest deviation from W0-prefix constancy; raises above tol."""
        worst = 0.0
        for k, v in enumerate(self.values):
            _, expanded = self.tree.ce_f0_step(k, v)
            scale = 1.0 + float(np.max(np.abs(v))) if v.size else 1.0
            dev = float(np.max(np.abs(v - expanded))) / scale if v.size else 0.0
            worst = max(worst, dev)
        if worst > tol:
            raise AdaptednessError(
                f"process tagged {self.adapted} varies across W branches by {worst:.3e}"
            )
        return worst


def conditional_expectation_f0(p: TreeProcess, tree: JointTree) -> TreeProcess:
    """Project a process onto the common-noise filtration, step by step."""
    _require_same_tree(p, tree)
    if p.adapted != F_ADAPTED:
        raise AdaptednessError(
            "conditional_expectation_f0 expects an F-adapted process; "
            f"got tag {p.adapted!r}"
        )
    out = [tree.ce_f0_step(k, v)[1] for k, v in enumerate(p.values)]
    return TreeProcess(tree, out, F0_ADAPTED)


def project_breve(p: TreeProcess, tree: JointTree) -> TreeProcess:
    """Centered component p - E[p | F0], which conditions to zero exactly."""
    _require_same_tree(p, tree)
    if p.adapted != F_ADAPTED:
        raise AdaptednessError(
            f"project_breve expects an F-adapted process; got tag {p.adapted!r}"
        )
    out = [v - tree.ce_f0_step(k, v)[1] for k, v in enumerate(p.values)]
    return TreeProcess(tree, out, F_ADAPTED)


def inner_product(u: TreeProcess, v: TreeProcess, tree: JointTree, grid: TimeGrid) -> float:
    """Control-space inner product E integral u.v dt as an exact tree sum.

    Sums over steps 0..n_steps-1 (left endpoints); both processes must
    provide those steps and share the payload dimension.
    """
    _require_same_tree(u, tree)
    _require_same_tree(v, tree)
    if u.n_step_arrays < grid.n_steps or v.n_step_arrays < grid.n_steps:
        raise DimensionError(
            "process", f"need values at steps 0..{grid.n_steps - 1} for the time integral"
        )
    total = 0.0
    for k in range(grid.n_steps):
        a, b = u.values[k], v.values[k]
        if a.shape != b.shape:
            raise DimensionError("payload", f"mismatched shapes {a.shape} vs {b.shape}", step=k)
        dots = (a * b).reshape(a.shape[0], -1).sum(axis=1)
        total += float(np.dot(tree.probs(k), dots))
    return total * grid.dt


def _require_same_tree(p: TreeProcess, tree: JointTree):
    if p.tree is not tree:
        # Allow structurally identical trees (same grid and atoms).
        same = (
            p.tree.grid == tree.grid
            and p.tree.n_atoms == tree.n_atoms
            and np.array_equal(p.tree.atom_probs, tree.atom_probs)
        )
        if not same:
            raise DimensionError("tree", "process belongs to a different tree")
