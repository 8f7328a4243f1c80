"""Problem oracles: local stochastic updates, mean fields, potentials, constants.

An oracle bundles, for n agents sharing a d-dimensional parameter:

* the local stochastic update H_i(theta_i; x) applied inside the recursion,
* its exact mean field h_i(theta) under the stationary distribution,
* the averaged mean field h_bar and (when defined) the potential V with
  its gradient, and
* the sample layout: one shared finite chain, or independent per-agent
  chains whose joint sample is the tuple of their states.

Both built-in problem families (least-squares regression on ergodic data
streams, and linear-function-approximation policy evaluation) are affine in
theta, which the estimators exploit for exact Lipschitz/Poisson constants.
Generic callable-based oracles fall back to sampled estimates.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from . import markov
from .errors import CapacityError, DimensionError, RankError
from .markov import MarkovModel, SampleStream, solve_poisson

__all__ = [
    "ProblemOracle",
    "AffineProblem",
    "ProductAffineProblem",
    "CallableProblem",
    "QuadraticPotential",
    "MdpSpec",
    "ConstantsBundle",
    "ThetaGrid",
    "BiasEstimate",
    "NoiseEstimate",
    "LipschitzEstimate",
    "make_ergodic_sgd_problem",
    "make_td0_problem",
    "bellman_solution",
    "td_operator_norm_expectation",
    "estimate_bias_constants",
    "estimate_noise_constants",
    "estimate_lipschitz",
    "assemble_constants",
    "sample_thetas",
    "sample_stacked_thetas",
]

PRODUCT_CAP = 10_000


# ---------------------------------------------------------------------------
# constants bundle


@dataclass(frozen=True)
class ConstantsBundle:
    """Problem/topology constants feeding the convergence certificates.

    ``provenance`` records how each value was obtained: "analytic" (closed
    form), "ball" (certified upper bound over the sampling ball), or
    "sampled" (grid extremum, a one-sided estimate).
    """

    c0: float | None = None            # alignment: <h_bar, grad V> >= c0 ||h_bar||^2
    d0: float | None = None            # ratio: ||grad V||^2 <= d0 ||h_bar||^2
    sigma_het: float | None = None     # heterogeneity bound on the local updates
    sigma_noise: float | None = None   # noise bound at consensual parameters
    l_update: float | None = None      # Lipschitz constant of H_i in theta
    l_grad: float | None = None        # smoothness constant of V
    k_poisson: float | None = None     # bound on the stacked Poisson tail P H_hat
    l_poisson: float | None = None     # Lipschitz constant of P H_hat in theta
    a_hat: float | None = None         # step decrement: gamma_t - gamma_{t+1} <= a_hat gamma_t^2
    a_ratio: float | None = None       # step ratio: sup_t gamma_t / gamma_{t+1}
    n_agents: int | None = None
    rho_bar: float | None = None
    v_star: float | None = None
    v0: float | None = None            # potential at the configured initial point
    grad0: float | None = None         # gradient norm at the configured initial point
    provenance: dict = field(default_factory=dict, compare=False)

    _FIELDS = (
        "c0", "d0", "sigma_het", "sigma_noise", "l_update", "l_grad",
        "k_poisson", "l_poisson", "a_hat", "a_ratio", "n_agents", "rho_bar",
        "v_star", "v0", "grad0",
    )

    def missing(self, names) -> list[str]:
        return [f for f in names if getattr(self, f) is None]

    def with_schedule(self, a_hat: float, a_ratio: float) -> "ConstantsBundle":
        return replace(self, a_hat=a_hat, a_ratio=a_ratio)

    def with_initial_point(self, v0: float, grad0: float) -> "ConstantsBundle":
        return replace(self, v0=v0, grad0=grad0)

    def to_dict(self) -> dict:
        out = {f: getattr(self, f) for f in self._FIELDS}
        out["provenance"] = dict(self.provenance)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConstantsBundle":
        known = {k: v for k, v in data.items() if k in cls._FIELDS}
        return cls(**known, provenance=dict(data.get("provenance", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ConstantsBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# potentials and sample streams


@dataclass(frozen=True)
class QuadraticPotential:
    """V(theta) = 0.5 theta^T Q theta + lin^T theta + const, Q symmetric PSD."""

    Q: np.ndarray
    lin: np.ndarray
    const: float = 0.0

    def value(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.Q @ theta + self.lin @ theta + self.const)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.Q @ theta + self.lin

    @property
    def smoothness(self) -> float:
        return float(np.linalg.norm(self.Q, 2))

    @classmethod
    def centered(cls, center: np.ndarray) -> "QuadraticPotential":
        """0.5 ||theta - center||^2."""
        center = np.asarray(center, dtype=float)
        return cls(np.eye(center.size), -center, 0.5 * float(center @ center))


class _SharedStream:
    """Joint samples from one shared chain; yields state ints."""

    def __init__(self, model: MarkovModel, seed):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, path_ss = ss.spawn(2)
        boot = np.random.Generator(np.random.PCG64(init_ss))
        x0 = int(boot.choice(model.n_states, p=model.mu))
        self._stream = SampleStream(model, x0, path_ss)

    def __iter__(self):
        return self

    def __next__(self):
        return next(self._stream)


class _ProductStream:
    """Independent per-agent chains; yields int arrays of length n.

    Agent i's path is a deterministic function of (seed, i) through
    SeedSequence spawning.
    """

    def __init__(self, models: list[MarkovModel], seed):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._streams = []
        for model, child in zip(models, ss.spawn(len(models))):
            init_ss, path_ss = child.spawn(2)
            boot = np.random.Generator(np.random.PCG64(init_ss))
            x0 = int(boot.choice(model.n_states, p=model.mu))
            self._streams.append(SampleStream(model, x0, path_ss))

    def __iter__(self):
        return self

    def __next__(self):
        return np.array([next(s) for s in self._streams], dtype=np.int64)


# ---------------------------------------------------------------------------
# oracle base


class ProblemOracle:
    """Base oracle; subclasses fill in the update and the sample layout.

    The generic implementations enumerate the finite sample space and loop
    over agents; affine subclasses override the hot paths with gathers.
    """

    n_agents: int
    dim: int
    label: str = "problem"
    theta_star: np.ndarray | None = None
    v_star: float | None = None
    mean_field_is_gradient: bool = False
    _potential = None        # object with .value/.grad (e.g. QuadraticPotential)
    _bias_exact = None       # (c0, d0, provenance) when known in closed form

    # -- updates -------------------------------------------------------------

    def local_update(self, i: int, theta_i: np.ndarray, x) -> np.ndarray:
        raise NotImplementedError

    def update_all(self, Theta: np.ndarray, x) -> np.ndarray:
        """Stacked update: row i is H_i(Theta[i]; x)."""
        return np.stack([self.local_update(i, Theta[i], x) for i in range(self.n_agents)])

    def update_at(self, theta: np.ndarray, x) -> np.ndarray:
        """All agents evaluated at one common parameter."""
        return np.stack([self.local_update(i, theta, x) for i in range(self.n_agents)])

    def update_stack_batch(self, Thetas: np.ndarray, x) -> np.ndarray:
        """Batched stacked update over an (m, n, d) array of stacked points."""
        return np.stack([self.update_all(Th, x) for Th in Thetas])

    def update_common_batch(self, thetas: np.ndarray, x) -> np.ndarray:
        """Batched common-parameter update over an (m, d) array."""
        return np.stack([self.update_at(th, x) for th in thetas])

    # -- mean fields and potential --------------------------------------------

    def mean_field(self, i: int, theta: np.ndarray) -> np.ndarray:
        w, xs = self.stationary_support()
        acc = np.zeros(self.dim)
        for wk, xk in zip(w, xs):
            acc += wk * self.local_update(i, theta, xk)
        return acc

    def averaged_mean_field(self, theta: np.ndarray) -> np.ndarray:
        acc = np.zeros(self.dim)
        for i in range(self.n_agents):
            acc += self.mean_field(i, theta)
        return acc / self.n_agents

    def potential(self, theta: np.ndarray) -> float | None:
        return None if self._potential is None else self._potential.value(theta)

    def gradient(self, theta: np.ndarray) -> np.ndarray | None:
        return None if self._potential is None else np.asarray(self._potential.grad(theta), dtype=float)

    @property
    def has_potential(self) -> bool:
        return self._potential is not None

    @property
    def l_grad_exact(self) -> float | None:
        pot = self._potential
        return pot.smoothness if isinstance(pot, QuadraticPotential) else None

    def bias_constants(self):
        """Exact (c0, d0, provenance) when the oracle knows them; else None."""
        return self._bias_exact

    # -- sample layout ---------------------------------------------------------

    def make_stream(self, seed):
        raise NotImplementedError

    def stationary_support(self) -> tuple[np.ndarray, list]:
        """(weights, samples) enumerating the joint sample space."""
        raise NotImplementedError

    def joint_model(self):
        """(MarkovModel, index -> sample list) for the joint chain, if materializable."""
        return None

    def affine_tables(self):
        """(models, G, g) per-chain affine tables, or None for generic oracles."""
        return None


class AffineProblem(ProblemOracle):
    """Tabular update H_i(theta; x) = G_i[x] theta + g_i[x] on one shared chain.

    Mean fields, Lipschitz constants and Poisson solutions are all exact.
    """

    def __init__(self, model: MarkovModel, G: np.ndarray, g: np.ndarray,
                 potential=None, label: str = "affine"):
        G = np.asarray(G, dtype=float)
        g = np.asarray(g, dtype=float)
        if G.ndim != 4 or g.ndim != 3 or G.shape[:2] != g.shape[:2]:
            raise DimensionError("expected G with shape (n,S,d,d) and g with (n,S,d)")
        if G.shape[1] != model.n_states:
            raise DimensionError("table rows do not match the chain's state count")
        if G.shape[2] != G.shape[3] or G.shape[2] != g.shape[2]:
            raise DimensionError("inconsistent parameter dimension in tables")
        self.model = model
        self.G = G
        self.g = g
        self.n_agents = G.shape[0]
        self.dim = G.shape[2]
        self.label = label
        mu = model.mu
        self._Mi = np.einsum("s,nsij->nij", mu, G)   # per-agent mean-field matrices
        self._mi = np.einsum("s,nsj->nj", mu, g)
        self._Mbar = self._Mi.mean(axis=0)
        self._mbar = self._mi.mean(axis=0)
        self._potential = potential
        self._poisson = None

    def local_update(self, i, theta_i, x):
        return self.G[i, x] @ theta_i + self.g[i, x]

    def update_all(self, Theta, x):
        return np.einsum("nij,nj->ni", self.G[:, x], Theta) + self.g[:, x]

    def update_at(self, theta, x):
        return self.G[:, x] @ theta + self.g[:, x]

    def update_stack_batch(self, Thetas, x):
        return np.einsum("nij,mnj->mni", self.G[:, x], Thetas) + self.g[:, x]

    def update_common_batch(self, thetas, x):
        return np.einsum("nij,mj->mni", self.G[:, x], thetas) + self.g[:, x][None, :, :]

    def mean_field(self, i, theta):
        return self._Mi[i] @ theta + self._mi[i]

    def averaged_mean_field(self, theta):
        return self._Mbar @ theta + self._mbar

    def mean_field_matrices(self):
        return self._Mbar, self._mbar

    def make_stream(self, seed):
        return _SharedStream(self.model, seed)

    def stationary_support(self):
        return self.model.mu, list(range(self.model.n_states))

    def joint_model(self):
        return self.model, list(range(self.model.n_states))

    def affine_tables(self):
        return [self.model], [self.G], [self.g]

    def poisson_tables(self):
        """Exact tails (P Ghat, P ghat) of the per-agent Poisson solutions.

        Affine updates have affine Poisson solutions: solving the equation
        componentwise for the tables gives H_hat_i(theta; x) =
        Ghat_i[x] theta + ghat_i[x]; the tails follow by applying P.
        Returned shapes: (n, S, d, d) and (n, S, d).
        """
        if self._poisson is None:
            n, S, d = self.n_agents, self.model.n_states, self.dim
            PG = np.empty_like(self.G)
            pg = np.empty_like(self.g)
            for i in range(n):
                Ghat = solve_poisson(self.model, self.G[i].reshape(S, d * d)).H_hat
                ghat = solve_poisson(self.model, self.g[i]).H_hat
                PG[i] = (self.model.P @ Ghat).reshape(S, d, d)
                pg[i] = self.model.P @ ghat
            self._poisson = (PG, pg)
        return self._poisson


class ProductAffineProblem(ProblemOracle):
    """Affine updates driven by independent per-agent chains.

    Agent i's update reads its own chain state only:
    H_i(theta; x) = G_i[x_i] theta + g_i[x_i]. The joint sample is the tuple
    of per-agent states; the explicit product kernel is materialized lazily
    and only under the state-count cap.
    """

    def __init__(self, models: list[MarkovModel], G: list[np.ndarray], g: list[np.ndarray],
                 potential=None, label: str = "affine-product", cap: int = PRODUCT_CAP):
        if not (len(models) == len(G) == len(g)):
            raise DimensionError("per-agent lists have mixed lengths")
        self.models = list(models)
        self.G = [np.asarray(Gi, dtype=float) for Gi in G]
        self.g = [np.asarray(gi, dtype=float) for gi in g]
        dims = {Gi.shape[-1] for Gi in self.G} | {gi.shape[-1] for gi in self.g}
        if len(dims) != 1:
            raise DimensionError("inconsistent parameter dimension across agents")
        for m, Gi, gi in zip(self.models, self.G, self.g):
            if Gi.shape[0] != m.n_states or gi.shape[0] != m.n_states:
                raise DimensionError("table rows do not match an agent's state count")
        self.n_agents = len(models)
        self.dim = dims.pop()
        self.label = label
        self.cap = cap
        self._sizes = tuple(m.n_states for m in models)
        self._agent_idx = np.arange(self.n_agents)
        self._uniform = len(set(self._sizes)) == 1
        if self._uniform:
            self._Gs = np.stack(self.G)   # (n, S, d, d) fast gather path
            self._gs = np.stack(self.g)
        self._Mi = np.stack([np.einsum("s,sij->ij", m.mu, Gi)
                             for m, Gi in zip(self.models, self.G)])
        self._mi = np.stack([m.mu @ gi for m, gi in zip(self.models, self.g)])
        self._Mbar = self._Mi.mean(axis=0)
        self._mbar = self._mi.mean(axis=0)
        self._potential = potential
        self._poisson = None
        self._joint = None

    def local_update(self, i, theta_i, x):
        xi = int(x[i])
        return self.G[i][xi] @ theta_i + self.g[i][xi]

    def _gather(self, x):
        if self._uniform:
            return self._Gs[self._agent_idx, x], self._gs[self._agent_idx, x]
        Gx = np.stack([self.G[i][x[i]] for i in range(self.n_agents)])
        gx = np.stack([self.g[i][x[i]] for i in range(self.n_agents)])
        return Gx, gx

    def update_all(self, Theta, x):
        Gx, gx = self._gather(x)
        return np.einsum("nij,nj->ni", Gx, Theta) + gx

    def update_at(self, theta, x):
        Gx, gx = self._gather(x)
        return Gx @ theta + gx

    def update_stack_batch(self, Thetas, x):
        Gx, gx = self._gather(x)
        return np.einsum("nij,mnj->mni", Gx, Thetas) + gx

    def update_common_batch(self, thetas, x):
        Gx, gx = self._gather(x)
        return np.einsum("nij,mj->mni", Gx, thetas) + gx[None, :, :]

    def mean_field(self, i, theta):
        return self._Mi[i] @ theta + self._mi[i]

    def averaged_mean_field(self, theta):
        return self._Mbar @ theta + self._mbar

    def mean_field_matrices(self):
        return self._Mbar, self._mbar

    def make_stream(self, seed):
        return _ProductStream(self.models, seed)

    def stationary_support(self):
        total = int(np.prod(self._sizes))
        if total > self.cap:
            raise CapacityError(f"product support has {total} states (cap {self.cap})")
        samples = [np.array(tup, dtype=np.int64)
                   for tup in itertools.product(*(range(s) for s in self._sizes))]
        weights = np.ones(total)
        for k, m in enumerate(self.models):
            reps = int(np.prod(self._sizes[k + 1:], initial=1))
            tiles = total // (m.n_states * reps)
            weights *= np.tile(np.repeat(m.mu, reps), tiles)
        return weights, samples

    def joint_model(self):
        if self._joint is None:
            model = markov.product_kernel(self.models, cap=self.cap)
            decode = [np.array(markov.product_state_decode(k, self._sizes), dtype=np.int64)
                      for k in range(model.n_states)]
            self._joint = (model, decode)
        return self._joint

    def affine_tables(self):
        return self.models, self.G, self.g

    def poisson_tables(self):
        """Per-agent Poisson tails w.r.t. each agent's own chain.

        Agent i's update reads only its own chain and the chains are
        independent, so the joint-chain Poisson solution restricted to
        agent i coincides with the per-agent solve. Returned as lists of
        (S_i, d, d) and (S_i, d) arrays.
        """
        if self._poisson is None:
            PG, pg = [], []
            for m, Gi, gi in zip(self.models, self.G, self.g):
                S, d = gi.shape
                Ghat = solve_poisson(m, Gi.reshape(S, d * d)).H_hat
                ghat = solve_poisson(m, gi).H_hat
                PG.append((m.P @ Ghat).reshape(S, d, d))
                pg.append(m.P @ ghat)
            self._poisson = (PG, pg)
        return self._poisson


class CallableProblem(ProblemOracle):
    """Generic oracle from a user callable on a shared finite chain.

    Mean fields are computed exactly by weighting the update over the
    stationary distribution; all constants are estimated by sampling.
    """

    def __init__(self, model: MarkovModel, update_fn, dim: int, n_agents: int,
                 potential=None, label: str = "callable"):
        self.model = model
        self._fn = update_fn
        self.dim = dim
        self.n_agents = n_agents
        self.label = label
        self._potential = potential

    def local_update(self, i, theta_i, x):
        return np.asarray(self._fn(i, theta_i, x), dtype=float)

    def make_stream(self, seed):
        return _SharedStream(self.model, seed)

    def stationary_support(self):
        return self.model.mu, list(range(self.model.n_states))

    def joint_model(self):
        return self.model, list(range(self.model.n_states))


# ---------------------------------------------------------------------------
# built-in problem constructors


def make_ergodic_sgd_problem(features: list, targets: list,
                             models: list[MarkovModel]) -> ProductAffineProblem:
    """Least-squares regression with per-agent ergodic data streams.

    Agent i holds data rows ``features[i]`` (one per chain state) with
    scalar ``targets[i]``; its update is the pointwise gradient
    a_x (a_x^T theta - b_x), so the mean field equals the gradient of the
    stationary risk and the alignment constants are exactly (1, 1).
    """
    if not (len(features) == len(targets) == len(models)):
        raise DimensionError("need one feature table, target vector and chain per agent")
    G, g = [], []
    dim = None
    for A, b, m in zip(features, targets, models):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise DimensionError("features must be (S,d) with matching (S,) targets")
        if A.shape[0] != m.n_states:
            raise DimensionError("data rows do not match the agent's state count")
        if dim is None:
            dim = A.shape[1]
        elif A.shape[1] != dim:
            raise DimensionError("agents disagree on the parameter dimension")
        G.append(np.einsum("si,sj->sij", A, A))
        g.append(-A * b[:, None])
    oracle = ProductAffineProblem(models, G, g, label="sgd-ergodic")

    Mbar, mbar = oracle.mean_field_matrices()
    offset = 0.0  # (1/2n) sum_i E[b^2]: fixes V at the stationary risk level
    for b, m in zip(targets, models):
        offset += 0.5 * float(m.mu @ (np.asarray(b, dtype=float) ** 2))
    offset /= len(models)
    oracle._potential = QuadraticPotential(Mbar, mbar, offset)
    theta_star, *_ = np.linalg.lstsq(Mbar, -mbar, rcond=None)
    oracle.theta_star = theta_star
    oracle.v_star = oracle.potential(theta_star)
    oracle.mean_field_is_gradient = True
    oracle._bias_exact = (1.0, 1.0, "analytic")
    return oracle


@dataclass(frozen=True)
class MdpSpec:
    """Finite MDP under a fixed policy, with linear value-function features.

    ``discount`` is the reward discount (distinct from any step size);
    ``rewards`` holds one row per agent, the global reward being their mean.
    """

    transition: np.ndarray
    features: np.ndarray
    rewards: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        Phi = np.asarray(self.features, dtype=float)
        R = np.atleast_2d(np.asarray(self.rewards, dtype=float))
        markov._check_row_stochastic(P)
        if Phi.ndim != 2 or Phi.shape[0] != P.shape[0]:
            raise DimensionError("feature table must have one row per state")
        if R.shape[1] != P.shape[0]:
            raise DimensionError("reward tables must have one column per state")
        if not (0.0 < self.discount < 1.0):
            raise DimensionError(f"discount must lie in (0,1), got {self.discount}")
        if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
            raise RankError("feature matrix is rank deficient")
        for name, arr in (("transition", P), ("features", Phi), ("rewards", R)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def feature_bound(self) -> float:
        return float(np.linalg.norm(self.features, axis=1).max())

    @property
    def reward_bound(self) -> float:
        return float(np.abs(self.rewards).max())

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "features": self.features.tolist(),
            "rewards": self.rewards.tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MdpSpec":
        return cls(
            np.asarray(data["transition"], dtype=float),
            np.asarray(data["features"], dtype=float),
            np.asarray(data["rewards"], dtype=float),
            float(data["discount"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MdpSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _td_system(mdp: MdpSpec):
    mu = markov.stationary_distribution(mdp.transition)
    Phi = mdp.features
    A = Phi.T @ np.diag(mu) @ (mdp.discount * mdp.transition @ Phi - Phi)
    b = Phi.T @ (mu * mdp.rewards.mean(axis=0))
    return mu, A, b


def bellman_solution(mdp: MdpSpec) -> np.ndarray:
    """Fixed point of the projected Bellman equation for the mean reward.

    Solves E_mu[Phi(x)(discount Phi(x') - Phi(x))^T] theta = -E_mu[Phi(x) R(x)],
    the sign convention under which the averaged mean field vanishes at the
    solution. With indicator features this reproduces (I - discount P)^{-1} R.
    """
    _, A, b = _td_system(mdp)
    if np.linalg.cond(A) > 1e12:
        raise RankError("projected Bellman system is singular")
    return np.linalg.solve(A, -b)


def make_td0_problem(mdp: MdpSpec, n_agents: int | None = None) -> AffineProblem:
    """One-step temporal-difference policy evaluation with local rewards.

    The sample is the transition pair (x, x'); the shared chain is the pair
    chain on the support of P with stationary weight mu(x) P(x, x'). The raw
    temporal-difference direction is an ascent direction, so the update is
    negated to match the recursion's descent convention; the mean field then
    vanishes exactly at the Bellman solution and aligns with the gradient of
    0.5 ||theta - theta_star||^2.
    """
    if n_agents is not None and n_agents != mdp.n_agents:
        raise DimensionError(
            f"reward table has {mdp.n_agents} agents, requested {n_agents}")
    n, d, S = mdp.n_agents, mdp.dim, mdp.n_states
    mu = markov.stationary_distribution(mdp.transition)
    P, Phi = mdp.transition, mdp.features

    pairs = [(x, y) for x in range(S) for y in range(S) if P[x, y] > 0]
    m = len(pairs)
    P_pair = np.zeros((m, m))
    mu_pair = np.empty(m)
    for a, (x, y) in enumerate(pairs):
        mu_pair[a] = mu[x] * P[x, y]
        for c, (u, v) in enumerate(pairs):
            if u == y:
                P_pair[a, c] = P[u, v]
    pair_model = MarkovModel(P_pair, mu_pair)

    G = np.empty((n, m, d, d))
    g = np.empty((n, m, d))
    for a, (x, y) in enumerate(pairs):
        G[:, a] = -np.outer(Phi[x], mdp.discount * Phi[y] - Phi[x])
        for i in range(n):
            g[i, a] = -Phi[x] * mdp.rewards[i, x]

    theta_star = bellman_solution(mdp)
    oracle = AffineProblem(pair_model, G, g,
                           potential=QuadraticPotential.centered(theta_star),
                           label="td0")
    oracle.theta_star = theta_star
    oracle.v_star = 0.0
    oracle.pairs = pairs
    oracle.mdp = mdp

    # Exact alignment constants for the linear mean field -A(theta - theta*):
    # both ratios are 0-homogeneous, so the extrema are generalized
    # eigenvalues of the (symmetric part, A^T A) pencil.
    _, A, _ = _td_system(mdp)
    sym = -0.5 * (A + A.T)
    c0 = float(scipy.linalg.eigh(sym, A.T @ A, eigvals_only=True)[0])
    d0 = float(1.0 / np.linalg.svd(A, compute_uv=False)[-1] ** 2)
    oracle._bias_exact = (c0, d0, "analytic")
    return oracle


def td_operator_norm_expectation(mdp: MdpSpec) -> float:
    """E_mu[||Phi(x)(discount Phi(x') - Phi(x))^T||_2] for the TD update.

    The squared expectation bounds the mean-field operator norm from above,
    which is the opposite direction from what the alignment ratio d0 needs,
    so it is reported for comparison and re-verified numerically rather than
    used directly.
    """
    mu = markov.stationary_distribution(mdp.transition)
    P, Phi = mdp.transition, mdp.features
    total = 0.0
    for x in range(mdp.n_states):
        for y in range(mdp.n_states):
            if P[x, y] > 0:
                # rank-one outer product: spectral norm is the product of norms
                op = np.linalg.norm(Phi[x]) * np.linalg.norm(mdp.discount * Phi[y] - Phi[x])
                total += mu[x] * P[x, y] * op
    return float(total)


# ---------------------------------------------------------------------------
# constants estimation


@dataclass(frozen=True)
class ThetaGrid:
    """Sampling grid for the "for any theta" constants: a seeded ball.

    The origin and the oracle's solution point are always included, plus any
    explicit anchors. Estimates taken on the grid are one-sided (certified
    on the grid, not globally) and flagged as such in provenance.
    """

    radius: float = 10.0
    count: int = 1000
    seed: int = 0
    anchors: tuple = ()


def _ball_points(grid: ThetaGrid, dim: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal((grid.count, dim))
    raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-30)
    radii = grid.radius * rng.random(grid.count) ** (1.0 / dim)
    return raw * radii[:, None]


def sample_thetas(oracle: ProblemOracle, grid: ThetaGrid) -> np.ndarray:
    rng = np.random.default_rng(grid.seed)
    pts = [np.zeros(oracle.dim)]
    if oracle.theta_star is not None:
        pts.append(np.asarray(oracle.theta_star, dtype=float))
    pts.extend(np.asarray(a, dtype=float) for a in grid.anchors)
    return np.vstack([np.stack(pts), _ball_points(grid, oracle.dim, rng)])


def sample_stacked_thetas(oracle: ProblemOracle, grid: ThetaGrid) -> np.ndarray:
    """Stacked (m, n, d) points: ball centers with cycled spread scales.

    Zero-spread (consensual) points are included deliberately: the
    heterogeneity ratio is typically largest there, and trajectories run
    near consensus.
    """
    rng = np.random.default_rng(grid.seed + 1)
    centers = sample_thetas(oracle, grid)
    spreads = np.array([0.0, 0.01, 0.1, 1.0])
    out = np.empty((len(centers), oracle.n_agents, oracle.dim))
    for k, c in enumerate(centers):
        s = spreads[k % len(spreads)]
        noise = rng.standard_normal((oracle.n_agents, oracle.dim))
        noise -= noise.mean(axis=0)   # keep the stack's mean exactly at the center
        out[k] = c + s * noise
    return out


@dataclass(frozen=True)
class BiasEstimate:
    c0: float
    d0: float
    violations: int
    provenance: str = "sampled"


def estimate_bias_constants(oracle: ProblemOracle, grid: ThetaGrid) -> BiasEstimate:
    """Grid extrema of the alignment ratios between h_bar and grad V.

    c0 is the smallest <h_bar, grad V>/||h_bar||^2 over the grid, d0 the
    largest ||grad V||^2/||h_bar||^2; points with vanishing mean field are
    skipped. Nonpositive alignment is reported as a violation count, not an
    exception.
    """
    thetas = sample_thetas(oracle, grid)
    c0, d0, violations = np.inf, 0.0, 0
    for theta in thetas:
        h = oracle.averaged_mean_field(theta)
        gv = oracle.gradient(theta)
        if gv is None:
            raise DimensionError("oracle has no gradient; alignment undefined")
        hsq = float(h @ h)
        if hsq < 1e-24:
            continue
        ratio = float(h @ gv) / hsq
        c0 = min(c0, ratio)
        d0 = max(d0, float(gv @ gv) / hsq)
        if ratio <= 0:
            violations += 1
    if not np.isfinite(c0):
        raise DimensionError("mean field vanished on the whole grid")
    return BiasEstimate(float(c0), float(d0), violations)


@dataclass(frozen=True)
class NoiseEstimate:
    sigma_het: float
    sigma_noise: float
    provenance: dict
    growth_note: str = ""


def estimate_noise_constants(oracle: ProblemOracle, grid: ThetaGrid) -> NoiseEstimate:
    """Heterogeneity and consensual-noise bounds over the finite sample space.

    sigma_het: max over stacked grid points, states x and agents i of
    ||H_i(theta_i;x) - mean_j H_j(theta_j;x)|| divided by
    (1/n + ||h_bar(mean)||/n + ||theta_i - mean||); exact in closed form for
    theta-independent updates (the supremum sits at zero spread).

    sigma_noise: deviation of the agent-averaged update from the mean field
    at consensual points; for affine oracles a ball-certified operator-norm
    bound replaces the grid maximum.
    """
    n = oracle.n_agents
    _, xs = oracle.stationary_support()
    provenance = {"sigma_het": "sampled", "sigma_noise": "sampled"}
    tables = oracle.affine_tables()
    constant_update = tables is not None and all(np.abs(Gi).max() == 0.0 for Gi in tables[1])

    if constant_update:
        h_const = np.linalg.norm(oracle.averaged_mean_field(np.zeros(oracle.dim)))
        best = 0.0
        for x in xs:
            H = oracle.update_at(np.zeros(oracle.dim), x)
            best = max(best, float(np.linalg.norm(H - H.mean(axis=0), axis=1).max()))
        sigma_het = best * n / (1.0 + h_const)
        provenance["sigma_het"] = "analytic"
    else:
        stacked = sample_stacked_thetas(oracle, grid)
        centers = stacked.mean(axis=1)
        hbar_norm = np.array([np.linalg.norm(oracle.averaged_mean_field(c)) for c in centers])
        dev = np.linalg.norm(stacked - centers[:, None, :], axis=2)
        denom = 1.0 / n + hbar_norm[:, None] / n + dev
        sigma_het = 0.0
        for x in xs:
            H = oracle.update_stack_batch(stacked, x)          # (m, n, d)
            diff = np.linalg.norm(H - H.mean(axis=1, keepdims=True), axis=2)
            sigma_het = max(sigma_het, float((diff / denom).max()))

    thetas = sample_thetas(oracle, grid)
    hbar = np.stack([oracle.averaged_mean_field(t) for t in thetas])
    sigma_noise = 0.0
    for x in xs:
        Hc = oracle.update_common_batch(thetas, x).mean(axis=1)
        sigma_noise = max(sigma_noise, float(np.linalg.norm(Hc - hbar, axis=1).max()))
    grid_noise = sigma_noise

    if constant_update:
        provenance["sigma_noise"] = "analytic"   # theta-independent, grid value is exact
    elif tables is not None:
        # certified over the ball: ||(Gbar_x - Mbar) theta + (gbar_x - mbar)||
        Mbar, mbar = oracle.mean_field_matrices()
        _, G, g = tables
        ball = 0.0
        for x in xs:
            if isinstance(oracle, ProductAffineProblem):
                Gx = np.stack([G[i][x[i]] for i in range(n)]).mean(axis=0)
                gx = np.stack([g[i][x[i]] for i in range(n)]).mean(axis=0)
            else:
                Gx, gx = G[0][:, x].mean(axis=0), g[0][:, x].mean(axis=0)
            ball = max(ball, np.linalg.norm(Gx - Mbar, 2) * grid.radius
                       + float(np.linalg.norm(gx - mbar)))
        sigma_noise = max(sigma_noise, float(ball))
        provenance["sigma_noise"] = "ball"

    note = ""
    if not constant_update and sigma_noise > 0:
        # probe radius dependence: affine deviations scale with the ball
        half_thetas = thetas / 2.0
        half_h = np.stack([oracle.averaged_mean_field(t) for t in half_thetas])
        half_noise = 0.0
        for x in xs:
            Hc = oracle.update_common_batch(half_thetas, x).mean(axis=1)
            half_noise = max(half_noise, float(np.linalg.norm(Hc - half_h, axis=1).max()))
        if grid_noise > 1.5 * half_noise > 0:
            note = ("bounds grow with the sampling radius; certification is "
                    "ball-local (expected for updates affine in theta)")
    return NoiseEstimate(float(sigma_het), float(sigma_noise), provenance, note)


@dataclass(frozen=True)
class LipschitzEstimate:
    l_update: float
    l_grad: float
    l_poisson: float
    k_poisson: float
    provenance: dict


def estimate_lipschitz(oracle: ProblemOracle, grid: ThetaGrid) -> LipschitzEstimate:
    """Lipschitz constants of the update, gradient and Poisson tail.

    Affine oracles get exact operator norms for the update and tail slope
    and a ball-certified bound for the stacked tail magnitude; generic
    oracles get sampled difference quotients (one-sided estimates).
    """
    provenance = {}
    tables = oracle.affine_tables()
    thetas = sample_thetas(oracle, grid)
    d = oracle.dim

    if tables is not None:
        _, G, _ = tables
        l_update = max(float(np.linalg.svd(Gi.reshape(-1, d, d),
                                           compute_uv=False)[:, 0].max()) for Gi in G)
        provenance["l_update"] = "analytic"
        PG, pg = oracle.poisson_tables()
        if isinstance(oracle, ProductAffineProblem):
            l_poisson = max(float(np.linalg.svd(PGi, compute_uv=False)[:, 0].max())
                            for PGi in PG)
            # the stacked maximum separates across independent chains
            norm_sq = 0.0
            for PGi, pgi in zip(PG, pg):
                per_state = (np.linalg.norm(PGi, 2, axis=(1, 2)) * grid.radius
                             + np.linalg.norm(pgi, axis=1)) ** 2
                norm_sq += float(per_state.max())
            k_poisson = float(np.sqrt(norm_sq))
        else:
            l_poisson = float(np.linalg.svd(PG.reshape(-1, d, d),
                                            compute_uv=False)[:, 0].max())
            per = (np.linalg.norm(PG, 2, axis=(2, 3)) * grid.radius
                   + np.linalg.norm(pg, axis=2)) ** 2   # (n, S)
            k_poisson = float(np.sqrt(per.sum(axis=0).max()))
        provenance["l_poisson"] = "analytic"
        provenance["k_poisson"] = "ball"
    else:
        _, xs = oracle.stationary_support()
        l_update = 0.0
        for a in range(min(len(thetas) - 1, 64)):
            t1, t2 = thetas[a], thetas[a + 1]
            gap = np.linalg.norm(t1 - t2)
            if gap < 1e-12:
                continue
            for x in xs:
                diff = oracle.update_at(t1, x) - oracle.update_at(t2, x)
                l_update = max(l_update, float(np.linalg.norm(diff, axis=1).max()) / gap)
        provenance["l_update"] = "sampled"
        l_poisson, k_poisson = _sampled_poisson_constants(oracle, thetas[:16])
        provenance["l_poisson"] = provenance["k_poisson"] = "sampled"

    if oracle.l_grad_exact is not None:
        l_grad = float(oracle.l_grad_exact)
        provenance["l_grad"] = "analytic"
    else:
        l_grad = 0.0
        for a in range(min(len(thetas) - 1, 256)):
            g1, g2 = oracle.gradient(thetas[a]), oracle.gradient(thetas[a + 1])
            if g1 is None:
                break
            gap = np.linalg.norm(thetas[a] - thetas[a + 1])
            if gap > 1e-12:
                l_grad = max(l_grad, float(np.linalg.norm(g1 - g2)) / gap)
        provenance["l_grad"] = "sampled"
    return LipschitzEstimate(float(l_update), float(l_grad), float(l_poisson),
                             float(k_poisson), provenance)


def _sampled_poisson_constants(oracle: ProblemOracle, thetas: np.ndarray):
    joint = oracle.joint_model()
    if joint is None:
        raise CapacityError("generic Poisson constants need a materializable joint chain")
    model, decode = joint
    tails = []
    for theta in thetas:
        rows = np.stack([oracle.update_at(theta, x) for x in decode])  # (S, n, d)
        tail = np.empty_like(rows)
        for i in range(oracle.n_agents):
            tail[:, i] = model.apply(solve_poisson(model, rows[:, i]).H_hat)
        tails.append(tail)
    k_p = max(float(np.linalg.norm(t.reshape(len(decode), -1), axis=1).max()) for t in tails)
    l_p = 0.0
    for a in range(len(tails) - 1):
        gap = np.linalg.norm(thetas[a] - thetas[a + 1])
        if gap > 1e-12:
            diff = np.linalg.norm(tails[a] - tails[a + 1], axis=2)
            l_p = max(l_p, float(diff.max()) / gap)
    return l_p, k_p


def assemble_constants(oracle: ProblemOracle, rho_bar: float,
                       grid: ThetaGrid | None = None) -> ConstantsBundle:
    """Full bundle for an oracle on a certified topology.

    Analytic values are preferred wherever the oracle provides them; the
    remaining fields come from the grid estimators. Schedule-derived fields
    (a_hat, a_ratio) are filled in later by the step-size certification.
    """
    grid = grid or ThetaGrid()
    provenance = {}
    exact = oracle.bias_constants()
    if exact is not None:
        c0, d0, tag = exact
        provenance["c0"] = provenance["d0"] = tag
    else:
        est = estimate_bias_constants(oracle, grid)
        c0, d0 = est.c0, est.d0
        provenance["c0"] = provenance["d0"] = est.provenance
    noise = estimate_noise_constants(oracle, grid)
    lip = estimate_lipschitz(oracle, grid)
    provenance["sigma_het"] = noise.provenance["sigma_het"]
    provenance["sigma_noise"] = noise.provenance["sigma_noise"]
    provenance.update(lip.provenance)
    if noise.growth_note:
        provenance["note"] = noise.growth_note
    return ConstantsBundle(
        c0=c0, d0=d0,
        sigma_het=noise.sigma_het, sigma_noise=noise.sigma_noise,
        l_update=lip.l_update, l_grad=lip.l_grad,
        k_poisson=lip.k_poisson, l_poisson=lip.l_poisson,
        n_agents=oracle.n_agents, rho_bar=float(rho_bar),
        v_star=oracle.v_star,
        provenance=provenance,
    )
