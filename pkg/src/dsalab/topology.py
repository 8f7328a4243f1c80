"""Communication graphs, doubly stochastic mixing matrices, and their certificates.

Static topologies are certified through the spectral contraction of the
mixing matrix on the disagreement subspace; time-varying topologies through
the joint contraction of window products over one period of the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConnectivityError, DimensionError, ValidationError

STOCHASTIC_TOL = 1e-12

__all__ = [
    "Graph",
    "MixingMatrix",
    "ProjectionBasis",
    "MixingSchedule",
    "build_metropolis_weights",
    "build_projection_basis",
    "spectral_contraction",
    "make_tv_schedule",
    "validate_joint_connectivity",
    "static_schedule",
    "load_edge_list",
    "save_matrix_csv",
    "load_matrix_csv",
]


def _normalize_edges(n: int, edges) -> tuple[tuple[int, int], ...]:
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (1 <= i <= n and 1 <= j <= n):
            raise DimensionError(f"edge ({i},{j}) outside node range 1..{n}")
        if i == j:
            continue  # self-loops are implicit
        seen.add((min(i, j), max(i, j)))
    return tuple(sorted(seen))


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes 1..n; self-loops are implicit."""

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError("graph needs at least one node")
        object.__setattr__(self, "edges", _normalize_edges(self.n, self.edges))

    @classmethod
    def path(cls, n: int) -> "Graph":
        return cls(n, tuple((i, i + 1) for i in range(1, n)))

    @classmethod
    def ring(cls, n: int) -> "Graph":
        if n < 3:
            return cls.path(n)
        return cls(n, tuple((i, i + 1) for i in range(1, n)) + ((1, n),))

    @classmethod
    def complete(cls, n: int) -> "Graph":
        return cls(n, tuple((i, j) for i in range(1, n) for j in range(i + 1, n + 1)))

    @classmethod
    def star(cls, n: int) -> "Graph":
        return cls(n, tuple((1, j) for j in range(2, n + 1)))

    @classmethod
    def random_connected(cls, n: int, p: float, seed: int) -> "Graph":
        """Erdos-Renyi draw, re-seeded until connected."""
        attempt = int(seed)
        while True:
            rng = np.random.default_rng(attempt)
            edges = [
                (i, j)
                for i in range(1, n)
                for j in range(i + 1, n + 1)
                if rng.random() < p
            ]
            g = cls(n, tuple(edges))
            if g.is_connected():
                return g
            attempt += 1

    def degrees(self) -> np.ndarray:
        """Non-self-loop degree of each node (index 0 is node 1)."""
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i - 1] += 1
            deg[j - 1] += 1
        return deg

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n))
        for i, j in self.edges:
            adj[i - 1, j - 1] = adj[j - 1, i - 1] = 1.0
        return adj

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        adj = self.adjacency()
        reached = np.zeros(self.n, dtype=bool)
        stack = [0]
        reached[0] = True
        while stack:
            u = stack.pop()
            for v in np.nonzero(adj[u])[0]:
                if not reached[v]:
                    reached[v] = True
                    stack.append(int(v))
        return bool(reached.all())


def load_edge_list(path, n: int | None = None) -> Graph:
    """Read a graph from a text file with one 1-based "i j" pair per line.

    Lines starting with '#' are skipped. When ``n`` is omitted it is
    inferred as the largest node index present.
    """
    pairs = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        i, j = line.split()[:2]
        pairs.append((int(i), int(j)))
    if not pairs and n is None:
        raise ValidationError(f"no edges found in {path} and no node count given")
    if n is None:
        n = max(max(i, j) for i, j in pairs)
    return Graph(n, tuple(pairs))


def _check_doubly_stochastic(M: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    if M.min() < -tol:
        raise ValidationError(f"negative entry {M.min():g} in mixing matrix")
    row_err = np.abs(M.sum(axis=1) - 1.0).max()
    col_err = np.abs(M.sum(axis=0) - 1.0).max()
    if row_err > tol or col_err > tol:
        raise ValidationError(
            f"matrix is not doubly stochastic (row defect {row_err:g}, "
            f"column defect {col_err:g})"
        )


@dataclass(frozen=True)
class ProjectionBasis:
    """Orthonormal basis U of the subspace orthogonal to the all-ones vector.

    U is n x (n-1) with U^T U = I and U U^T = I - (1/n) 11^T.
    """

    U: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        U.setflags(write=False)
        object.__setattr__(self, "U", U)
        n = U.shape[0]
        k = U.shape[1] if U.ndim == 2 else -1
        if U.ndim != 2 or k != n - 1:
            raise DimensionError(f"basis must be n x (n-1), got {U.shape}")
        if n >= 2:
            if np.abs(U.T @ U - np.eye(n - 1)).max() > 1e-12:
                raise ValidationError("basis columns are not orthonormal")
            P = np.eye(n) - np.ones((n, n)) / n
            if np.abs(U @ U.T - P).max() > 1e-12:
                raise ValidationError("basis does not span the disagreement subspace")

    @property
    def n(self) -> int:
        return self.U.shape[0]


def build_projection_basis(n: int) -> ProjectionBasis:
    """Deterministic disagreement-subspace basis via a Householder reflector.

    The reflector maps e_1 to the normalized all-ones vector; its remaining
    columns are the basis. Run-to-run identical by construction.
    """
    if n < 2:
        raise DimensionError(f"projection basis needs n >= 2, got n={n}")
    v = np.full(n, 1.0 / np.sqrt(n))
    w = v - np.eye(n)[:, 0]
    w /= np.linalg.norm(w)
    H = np.eye(n) - 2.0 * np.outer(w, w)
    return ProjectionBasis(H[:, 1:])


def _empty_basis(n: int) -> np.ndarray:
    # n=1 has no disagreement subspace; used internally by the engine.
    return np.zeros((1, 0)) if n == 1 else build_projection_basis(n).U


def spectral_contraction(M: np.ndarray, basis: ProjectionBasis | None = None) -> float:
    """Largest singular value of U^T M U for a doubly stochastic M.

    Equals max(|lambda_2|, |lambda_n|) when M is symmetric. A value of
    1 - rho with rho > 0 certifies geometric consensus contraction.
    """
    M = np.asarray(M, dtype=float)
    _check_doubly_stochastic(M)
    n = M.shape[0]
    if n == 1:
        return 0.0
    U = basis.U if basis is not None else build_projection_basis(n).U
    if U.shape[0] != n:
        raise DimensionError("basis size does not match the matrix")
    return float(np.linalg.svd(U.T @ M @ U, compute_uv=False)[0])


@dataclass(frozen=True)
class MixingMatrix:
    """Doubly stochastic weight matrix with a certified spectral contraction.

    ``rho_bar`` is 1 - ||U^T A U||_2; positive values certify consensus.
    """

    matrix: np.ndarray
    rho_bar: float
    graph: Graph | None = field(default=None, compare=False)

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        _check_doubly_stochastic(M)
        if self.graph is not None:
            self._check_sparsity(self.graph)
        got = 1.0 - spectral_contraction(M)
        if abs(got - self.rho_bar) > 1e-9:
            raise ValidationError(
                f"stored rho_bar {self.rho_bar:g} does not match recomputed {got:g}"
            )

    def _check_sparsity(self, graph: Graph) -> None:
        allowed = np.eye(graph.n, dtype=bool) | (graph.adjacency() > 0)
        if np.abs(self.matrix[~allowed]).max(initial=0.0) > 0.0:
            raise ValidationError("nonzero weight off the edge set")

    @classmethod
    def from_matrix(cls, M, graph: Graph | None = None) -> "MixingMatrix":
        M = np.asarray(M, dtype=float)
        return cls(M, 1.0 - spectral_contraction(M), graph)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_metropolis_weights(graph: Graph) -> MixingMatrix:
    """Metropolis weights: A_ij = 1/(1+max(deg_i,deg_j)) on edges, diagonal fill.

    Symmetric and doubly stochastic for any connected graph; on a complete
    graph this reduces to the uniform averaging matrix (1/n) 11^T.
    """
    if not graph.is_connected():
        raise ConnectivityError(f"graph on {graph.n} nodes is disconnected")
    n = graph.n
    deg = graph.degrees()
    A = np.zeros((n, n))
    for i, j in graph.edges:
        w = 1.0 / (1.0 + max(deg[i - 1], deg[j - 1]))
        A[i - 1, j - 1] = A[j - 1, i - 1] = w
    np.fill_diagonal(A, 1.0 - A.sum(axis=1))
    return MixingMatrix(A, 1.0 - spectral_contraction(A), graph)


def _subgraph_metropolis(n: int, edges: tuple[tuple[int, int], ...]) -> np.ndarray:
    # Metropolis weights on a possibly disconnected subgraph; isolated nodes
    # keep their value (row = e_i). Used for the steps of a schedule.
    deg = np.zeros(n, dtype=int)
    for i, j in edges:
        deg[i - 1] += 1
        deg[j - 1] += 1
    A = np.zeros((n, n))
    for i, j in edges:
        w = 1.0 / (1.0 + max(deg[i - 1], deg[j - 1]))
        A[i - 1, j - 1] = A[j - 1, i - 1] = w
    np.fill_diagonal(A, 1.0 - A.sum(axis=1))
    return A


@dataclass(frozen=True)
class MixingSchedule:
    """Periodic sequence of doubly stochastic matrices with a joint certificate.

    Individual matrices need not contract; ``rho_bar`` certifies that every
    window of B consecutive products does: ||U^T A^(t+B-1)...A^(t) U||_2
    <= 1 - rho_bar for all t.
    """

    matrices: tuple[np.ndarray, ...]
    B: int
    rho_bar: float

    def __post_init__(self):
        if self.B < 1:
            raise DimensionError("window length B must be >= 1")
        if not self.matrices:
            raise ValidationError("schedule has no matrices")
        mats = []
        for M in self.matrices:
            M = np.asarray(M, dtype=float)
            _check_doubly_stochastic(M)
            M.setflags(write=False)
            mats.append(M)
        if len({M.shape for M in mats}) != 1:
            raise DimensionError("schedule matrices have mixed sizes")
        object.__setattr__(self, "matrices", tuple(mats))

    @property
    def n(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def period(self) -> int:
        return len(self.matrices)

    def matrix_at(self, t: int) -> np.ndarray:
        return self.matrices[t % self.period]

    @property
    def is_static(self) -> bool:
        return self.period == 1


def static_schedule(mixing: MixingMatrix) -> MixingSchedule:
    """Wrap a single mixing matrix as the degenerate B=1 schedule."""
    return MixingSchedule((mixing.matrix,), 1, mixing.rho_bar)


def validate_joint_connectivity(schedule: MixingSchedule) -> float:
    """Joint contraction margin of a schedule.

    Returns 1 - max_t ||U^T A^(t+B-1)...A^(t) U||_2 over one full period of
    window starts. A nonpositive value is reported (not raised): the
    schedule then fails the joint-connectivity requirement.
    """
    n = schedule.n
    if n == 1:
        return 1.0
    basis = build_projection_basis(n)
    worst = 0.0
    for start in range(schedule.period):
        prod = np.eye(n)
        for k in range(schedule.B):
            prod = schedule.matrix_at(start + k) @ prod
        worst = max(worst, spectral_contraction(prod, basis))
    return 1.0 - worst


def _partition_edges(graph: Graph, B: int, policy, seed: int):
    if isinstance(policy, str):
        edges = list(graph.edges)
        if policy == "round_robin":
            pass
        elif policy == "random":
            rng = np.random.default_rng(seed)
            rng.shuffle(edges)
        else:
            raise ValidationError(f"unknown edge-partition policy {policy!r}")
        groups = [tuple(edges[k::B]) for k in range(B)]
    else:
        # explicit per-step edge lists
        groups = [_normalize_edges(graph.n, step) for step in policy]
        if len(groups) != B:
            raise DimensionError(f"expected {B} edge groups, got {len(groups)}")
    return groups


def make_tv_schedule(graph: Graph, B: int, policy="round_robin", seed: int = 0) -> MixingSchedule:
    """Periodic time-varying schedule from an edge partition of ``graph``.

    ``policy`` is "round_robin", "random", or an explicit sequence of B edge
    lists. Each step matrix is the Metropolis matrix of its (possibly
    disconnected) subgraph; certification requires every length-B window's
    union to be connected and its product to contract.
    """
    if B < 1:
        raise DimensionError("window length B must be >= 1")
    groups = _partition_edges(graph, B, policy, seed)
    for start in range(B):
        union = []
        for k in range(B):
            union.extend(groups[(start + k) % B])
        if not Graph(graph.n, tuple(union)).is_connected():
            raise ConnectivityError(
                f"union of windows starting at step {start} is disconnected"
            )
    mats = tuple(_subgraph_metropolis(graph.n, g) for g in groups)
    trial = MixingSchedule(mats, B, 0.0)
    rho = validate_joint_connectivity(trial)
    if rho <= 0.0:
        raise ConnectivityError(
            f"window products do not contract (joint margin {rho:g})"
        )
    return MixingSchedule(mats, B, rho)


def save_matrix_csv(M: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(M, dtype=float), delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
