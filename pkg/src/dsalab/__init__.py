"""Decentralized stochastic approximation over networks, with certificates.

A desk-scale laboratory: build communication topologies and finite Markov
sample streams, run the consensus + stochastic-approximation recursion on
built-in problem families, estimate every constant the convergence theory
needs, and check the resulting bounds against recorded trajectories.
"""

from . import analysis, engine, errors, markov, presets, problems, topology

__all__ = ["analysis", "engine", "errors", "markov", "presets", "problems", "topology"]
__version__ = "0.1.0"
