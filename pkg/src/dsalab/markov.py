"""Finite-state Markov kernels: stationarity, mixing profiles, Poisson solves.

Everything here is exact linear algebra on the kernel matrix; sampling is
the only stochastic piece and is driven by splittable seeded generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .errors import CapacityError, DimensionError, ErgodicityError, StateError, ValidationError

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10

__all__ = [
    "MarkovModel",
    "PoissonSolution",
    "MixingProfile",
    "SampleStream",
    "stationary_distribution",
    "tv_mixing_profile",
    "solve_poisson",
    "sample_stream",
    "product_kernel",
    "load_kernel_csv",
    "save_mixing_profile",
]


def _check_row_stochastic(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError(f"kernel must be square, got shape {P.shape}")
    if P.min() < -ROW_TOL:
        raise ValidationError(f"negative transition probability {P.min():g}")
    defect = np.abs(P.sum(axis=1) - 1.0).max()
    if defect > ROW_TOL:
        raise ValidationError(f"rows do not sum to one (defect {defect:g})")
    return P


def _is_irreducible(P: np.ndarray) -> bool:
    from scipy.sparse.csgraph import connected_components

    n_comp, _ = connected_components(P > 0, directed=True, connection="strong")
    return n_comp == 1


def _period(P: np.ndarray) -> int:
    # Period of an irreducible chain: gcd of (level[u] + 1 - level[v]) over
    # all edges u -> v, with BFS levels from state 0.
    S = P.shape[0]
    level = np.full(S, -1)
    level[0] = 0
    queue = [0]
    while queue:
        u = queue.pop(0)
        for v in np.nonzero(P[u] > 0)[0]:
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(int(v))
    g = 0
    for u, v in zip(*np.nonzero(P > 0)):
        g = gcd(g, int(level[u]) + 1 - int(level[v]))
    return abs(g) if g != 0 else 1


def stationary_distribution(P) -> np.ndarray:
    """Unique stationary distribution of an ergodic row-stochastic kernel.

    Solved directly from the stacked system [P^T - I; 1^T] mu = [0; 1];
    raises ErgodicityError for reducible or periodic chains.
    """
    P = _check_row_stochastic(P)
    S = P.shape[0]
    if S == 1:
        return np.array([1.0])
    if not _is_irreducible(P):
        raise ErgodicityError("kernel is reducible")
    if _period(P) != 1:
        raise ErgodicityError(f"kernel is periodic with period {_period(P)}")
    A = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(A, b, rcond=None)
    residual = np.abs(mu @ P - mu).max()
    if residual > RESIDUAL_TOL or mu.min() <= 0:
        raise ErgodicityError(
            f"stationary solve failed (residual {residual:g}, min {mu.min():g})"
        )
    return mu / mu.sum()


@dataclass(frozen=True)
class MarkovModel:
    """Ergodic finite-state kernel with its stationary distribution.

    ``mixing`` optionally stores a fitted (K, lam) geometric envelope of the
    total-variation mixing profile.
    """

    P: np.ndarray
    mu: np.ndarray
    mixing: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        P = _check_row_stochastic(self.P)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        mu = np.asarray(self.mu, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        if mu.shape != (P.shape[0],):
            raise DimensionError("stationary distribution size mismatch")
        if np.abs(mu @ P - mu).max() > RESIDUAL_TOL:
            raise ValidationError("mu is not stationary for P")
        if self.mixing is not None:
            K, lam = self.mixing
            if K < 0 or not (0.0 <= lam < 1.0):
                raise ValidationError(f"invalid mixing pair K={K}, lam={lam}")

    @classmethod
    def from_matrix(cls, P) -> "MarkovModel":
        P = np.asarray(P, dtype=float)
        return cls(P, stationary_distribution(P))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Conditional expectation operator: (Pf)(x) = E[f(X_{t+1}) | X_t = x]."""
        return self.P @ np.asarray(f, dtype=float)


@dataclass(frozen=True)
class MixingProfile:
    """Worst-case total-variation distance to stationarity per step."""

    t: np.ndarray
    tv: np.ndarray
    K: float
    lam: float

    def envelope(self) -> np.ndarray:
        return self.K * self.lam ** self.t.astype(float)


def tv_mixing_profile(model: MarkovModel, t_max: int) -> MixingProfile:
    """Exact profile sup_x ||P^t(x,.) - mu||_TV for t = 0..t_max.

    TV uses the (1/2) L1 convention. The returned (K, lam) pair is a
    geometric upper envelope over t in [1, t_max]: lam from a log-linear
    least-squares fit on the strictly positive profile values, K raised to
    the smallest constant making K lam^t dominate every fitted point.
    """
    P, mu = model.P, model.mu
    Pt = np.eye(model.n_states)
    tv = np.empty(t_max + 1)
    for t in range(t_max + 1):
        tv[t] = 0.5 * np.abs(Pt - mu).sum(axis=1).max()
        Pt = Pt @ P
    ts = np.arange(1, t_max + 1)
    positive = tv[1:] > 1e-300
    if not positive.any():
        K, lam = 0.0, 0.0
    elif positive.sum() == 1:
        # single usable point: any geometric envelope through it works
        t1 = int(ts[positive][0])
        lam = 0.5
        K = float(tv[1:][positive][0] / lam**t1)
    else:
        slope = np.polyfit(ts[positive], np.log(tv[1:][positive]), 1)[0]
        lam = float(min(np.exp(slope), 1.0 - 1e-12))
        K = float((tv[1:][positive] / lam ** ts[positive].astype(float)).max())
    return MixingProfile(np.arange(t_max + 1), tv, K, lam)


@dataclass(frozen=True)
class PoissonSolution:
    """Corrected function table solving H_hat - P H_hat = H - mean, centered."""

    H_hat: np.ndarray
    residual: float


def solve_poisson(model: MarkovModel, H) -> PoissonSolution:
    """Exact Poisson-equation solve for a finite ergodic chain.

    Solves (I - P + 1 mu^T) H_hat = H - 1 (mu^T H) columnwise; the solution
    automatically satisfies the centering mu^T H_hat = 0. ``H`` is an S-vector
    or an S x d table.
    """
    H = np.asarray(H, dtype=float)
    squeeze = H.ndim == 1
    if squeeze:
        H = H[:, None]
    S = model.n_states
    if H.shape[0] != S:
        raise DimensionError(f"function table has {H.shape[0]} rows, chain has {S}")
    mu = model.mu
    rhs = H - np.outer(np.ones(S), mu @ H)
    A = np.eye(S) - model.P + np.outer(np.ones(S), mu)
    try:
        H_hat = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise ErgodicityError(f"Poisson system is singular: {exc}") from exc
    residual = float(np.abs((H_hat - model.P @ H_hat) - rhs).max())
    if residual > RESIDUAL_TOL:
        raise ErgodicityError(f"Poisson residual {residual:g} exceeds tolerance")
    H_hat = H_hat - np.outer(np.ones(S), mu @ H_hat)  # re-center against roundoff
    if squeeze:
        H_hat = H_hat[:, 0]
    return PoissonSolution(H_hat, residual)


class SampleStream:
    """Seeded sample path of a finite chain; single-owner mutable iterator.

    Identical (model, x0, seed) triples produce byte-identical paths. The
    seed may be an int or a numpy SeedSequence, so per-agent streams can be
    derived splittably from one master seed.
    """

    def __init__(self, model: MarkovModel, x0: int, seed):
        if not (0 <= int(x0) < model.n_states):
            raise StateError(f"state {x0} outside 0..{model.n_states - 1}")
        self.model = model
        self.state = int(x0)
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._cum = np.cumsum(model.P, axis=1)
        self._cum[:, -1] = 1.0

    def __iter__(self):
        return self

    def __next__(self) -> int:
        u = self._rng.random()
        self.state = int(np.searchsorted(self._cum[self.state], u, side="right"))
        return self.state

    def take(self, k: int) -> np.ndarray:
        """Next k states as an array."""
        us = self._rng.random(k)
        out = np.empty(k, dtype=np.int64)
        s = self.state
        cum = self._cum
        for i in range(k):
            s = int(np.searchsorted(cum[s], us[i], side="right"))
            out[i] = s
        self.state = s
        return out


def sample_stream(model: MarkovModel, x0: int, seed) -> SampleStream:
    return SampleStream(model, x0, seed)


def product_kernel(models: list[MarkovModel], cap: int = 10_000) -> MarkovModel:
    """Kernel of independent chains run jointly on the product state space.

    State ordering follows numpy's row-major (C-order) flattening of the
    multi-index (x_1, ..., x_n); the stationary distribution is the tensor
    product of the factors. Raises CapacityError beyond ``cap`` states.
    """
    if not models:
        raise DimensionError("need at least one factor")
    total = 1
    for m in models:
        total *= m.n_states
        if total > cap:
            raise CapacityError(f"product space exceeds cap ({total} > {cap})")
    P = models[0].P
    mu = models[0].mu
    for m in models[1:]:
        P = np.kron(P, m.P)
        mu = np.kron(mu, m.mu)
    return MarkovModel(P, mu)


def product_state_decode(index: int, sizes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(int(v) for v in np.unravel_index(index, sizes))


def load_kernel_csv(path) -> MarkovModel:
    """Row-stochastic matrix from CSV; validated and solved for stationarity."""
    return MarkovModel.from_matrix(np.atleast_2d(np.loadtxt(path, delimiter=",")))


def save_mixing_profile(profile: MixingProfile, path) -> None:
    """CSV with columns t, tv, envelope."""
    rows = np.column_stack([profile.t, profile.tv, profile.envelope()])
    np.savetxt(path, rows, delimiter=",", fmt="%.17g", header="t,tv,envelope", comments="")
