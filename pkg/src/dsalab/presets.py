"""Deterministic toy problems used by the demos, the CLI configs and tests.

Each builder is seeded and pure: the same arguments always produce the same
oracle. Sizes are desk scale on purpose (exact enumeration everywhere).
"""

from __future__ import annotations

import numpy as np

from .markov import MarkovModel
from .problems import (
    AffineProblem,
    MdpSpec,
    ProductAffineProblem,
    make_ergodic_sgd_problem,
    make_td0_problem,
)
from .topology import Graph, build_metropolis_weights, make_tv_schedule, static_schedule

__all__ = [
    "random_ergodic_kernel",
    "sgd_toy",
    "td_toy",
    "constant_drift_problem",
    "random_affine_problem",
    "toy_graph",
]


def random_ergodic_kernel(n_states: int, seed: int, concentration: float = 2.0) -> MarkovModel:
    """Strictly positive row-stochastic kernel (hence irreducible, aperiodic)."""
    rng = np.random.default_rng(seed)
    P = rng.gamma(concentration, size=(n_states, n_states)) + 0.05
    P /= P.sum(axis=1, keepdims=True)
    return MarkovModel.from_matrix(P)


def sgd_toy(n_agents: int = 3, dim: int = 2, n_points: int = 4, seed: int = 20,
            target_spread: float = 1.0, label_noise: float = 0.5) -> ProductAffineProblem:
    """Heterogeneous least-squares streams: one small dataset + chain per agent.

    Data rows are unit vectors, per-agent ground truths are spread around a
    common center, and labels carry noise, so both the heterogeneity and the
    consensual-noise bounds are strictly positive and the trajectories hit a
    stochastic floor rather than converging exactly.
    """
    rng = np.random.default_rng(seed)
    center = rng.normal(size=dim)
    features, targets, models = [], [], []
    for i in range(n_agents):
        A = rng.normal(size=(n_points, dim))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        truth = center + target_spread * rng.normal(size=dim)
        b = A @ truth + label_noise * rng.normal(size=n_points)
        features.append(A)
        targets.append(b)
        models.append(random_ergodic_kernel(n_points, seed=seed + 100 + i))
    return make_ergodic_sgd_problem(features, targets, models)


def td_toy(n_states: int = 5, dim: int = 3, n_agents: int = 4,
           discount: float = 0.9, seed: int = 11) -> AffineProblem:
    """Policy-evaluation toy: dense ergodic chain, normalized features.

    Feature rows are scaled to max norm 1, which is the regime where the
    alignment lower bound (1 - discount)/4 is guaranteed.
    """
    rng = np.random.default_rng(seed)
    P = rng.gamma(2.0, size=(n_states, n_states)) + 0.1
    P /= P.sum(axis=1, keepdims=True)
    Phi = rng.normal(size=(n_states, dim))
    Phi /= np.linalg.norm(Phi, axis=1).max()
    base = rng.uniform(0.0, 2.0, size=n_states)
    rewards = base + 0.5 * rng.normal(size=(n_agents, n_states))
    mdp = MdpSpec(P, Phi, rewards, discount)
    return make_td0_problem(mdp)


def constant_drift_problem(n_agents: int, dim: int, n_states: int, seed: int,
                           scale: float = 1.0) -> AffineProblem:
    """Theta-independent updates on one shared chain.

    H_i(theta; x) = g_i[x]: pure consensus plus noise drift. The
    heterogeneity bound is exactly computable for these, which makes them
    the reference family for pathwise bound checks.
    """
    rng = np.random.default_rng(seed)
    model = random_ergodic_kernel(n_states, seed=seed + 1)
    G = np.zeros((n_agents, n_states, dim, dim))
    g = scale * rng.normal(size=(n_agents, n_states, dim))
    return AffineProblem(model, G, g, label="constant-drift")


def random_affine_problem(n_agents: int, dim: int, n_states: int, seed: int,
                          slope_scale: float = 0.4) -> AffineProblem:
    """Generic stable affine updates on a shared chain (recursion tests)."""
    rng = np.random.default_rng(seed)
    model = random_ergodic_kernel(n_states, seed=seed + 1)
    G = slope_scale * rng.normal(size=(n_agents, n_states, dim, dim)) / np.sqrt(dim)
    g = rng.normal(size=(n_agents, n_states, dim))
    return AffineProblem(model, G, g, label="random-affine")


def toy_graph(kind: str, n: int, seed: int = 0, p: float = 0.5) -> Graph:
    builders = {"ring": Graph.ring, "path": Graph.path,
                "complete": Graph.complete, "star": Graph.star}
    if kind in builders:
        return builders[kind](n)
    if kind == "erdos":
        return Graph.random_connected(n, p, seed)
    raise ValueError(f"unknown graph kind {kind!r}")


def toy_mixing(kind: str, n: int, B: int | None = None, seed: int = 0, policy="round_robin"):
    """Static Metropolis schedule, or a B-step time-varying partition."""
    graph = toy_graph(kind, n, seed)
    if B is None or B == 1:
        return static_schedule(build_metropolis_weights(graph))
    return make_tv_schedule(graph, B, policy=policy, seed=seed)
