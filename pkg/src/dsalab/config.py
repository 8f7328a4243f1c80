"""Experiment configuration: strict JSON schema and the build pipeline.

Configs are JSON with a ``schema_version`` field; unknown keys are rejected
so that a snapshot pins the experiment exactly. ``resolve_config`` inlines
every referenced file (datasets, MDPs, graphs), making output directories
self-contained: verification re-simulates from the snapshot alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import markov, topology
from .engine import StepSchedule, make_step_schedule
from .errors import ConfigError, DimensionError
from .problems import (
    ConstantsBundle,
    MdpSpec,
    ProblemOracle,
    ThetaGrid,
    assemble_constants,
    make_ergodic_sgd_problem,
    make_td0_problem,
)
from .topology import Graph, MixingSchedule

__all__ = ["ExperimentConfig", "Prepared", "load_config", "resolve_config",
           "prepare", "build_problem", "build_mixing", "config_hash"]

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "problem", "topology", "schedule", "ensemble",
             "outputs", "constants", "init", "sweep"}
_REQUIRED = {"schema_version", "problem", "topology", "schedule", "ensemble", "outputs"}


def _require_keys(d: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing field(s) {sorted(missing)}")


def _check_seed(value, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not (0 <= value < 2**64):
        raise ConfigError(f"{where}: seed must be a 64-bit unsigned integer")
    return value


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")


def resolve_config(raw: dict, base_dir: Path) -> dict:
    """Validate structure and inline every file reference."""
    _require_keys(raw, _TOP_KEYS, _REQUIRED, "config")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw['schema_version']!r}")
    out = json.loads(json.dumps(raw))  # deep copy, JSON types only

    prob = out["problem"]
    _require_keys(prob, {"kind", "agents", "dataset_file", "mdp", "mdp_file"},
                  {"kind"}, "problem")
    kind = prob["kind"]
    if kind == "sgd-ergodic":
        if "dataset_file" in prob:
            data = _load_json(base_dir / prob.pop("dataset_file"))
            _require_keys(data, {"agents"}, {"agents"}, "dataset")
            prob["agents"] = data["agents"]
        if "agents" not in prob:
            raise ConfigError("problem: sgd-ergodic needs 'agents' or 'dataset_file'")
        for k, agent in enumerate(prob["agents"]):
            _require_keys(agent, {"features", "targets", "kernel"},
                          {"features", "targets", "kernel"}, f"problem.agents[{k}]")
    elif kind == "td0":
        if "mdp_file" in prob:
            prob["mdp"] = _load_json(base_dir / prob.pop("mdp_file"))
        if "mdp" not in prob:
            raise ConfigError("problem: td0 needs 'mdp' or 'mdp_file'")
        _require_keys(prob["mdp"], {"transition", "features", "rewards", "discount"},
                      {"transition", "features", "rewards", "discount"}, "problem.mdp")
    else:
        raise ConfigError(f"problem.kind must be 'sgd-ergodic' or 'td0', got {kind!r}")

    topo = out["topology"]
    _require_keys(topo, {"graph", "matrix_file", "matrix", "time_varying"}, set(), "topology")
    if "matrix_file" in topo:
        topo["matrix"] = topology.load_matrix_csv(base_dir / topo.pop("matrix_file")).tolist()
    if "graph" in topo:
        g = topo["graph"]
        _require_keys(g, {"kind", "n", "seed", "p", "file", "edges"}, set(), "topology.graph")
        if "file" in g:
            loaded = topology.load_edge_list(base_dir / g.pop("file"), g.get("n"))
            g["n"] = loaded.n
            g["edges"] = [list(e) for e in loaded.edges]
            g.pop("kind", None)
    elif "matrix" not in topo:
        raise ConfigError("topology: needs 'graph', 'matrix' or 'matrix_file'")
    tv = topo.get("time_varying")
    if tv is not None:
        _require_keys(tv, {"B", "policy", "seed"}, {"B"}, "topology.time_varying")

    sched = out["schedule"]
    _require_keys(sched, {"a0", "a1", "T", "cap_mode"}, {"a0", "a1", "T"}, "schedule")
    if not isinstance(sched["T"], int) or sched["T"] < 1:
        raise ConfigError("schedule.T must be an integer >= 1")

    ens = out["ensemble"]
    _require_keys(ens, {"n_runs", "master_seed"}, {"n_runs", "master_seed"}, "ensemble")
    if not isinstance(ens["n_runs"], int) or ens["n_runs"] < 1:
        raise ConfigError("ensemble.n_runs must be an integer >= 1")
    _check_seed(ens["master_seed"], "ensemble.master_seed")

    outs = out["outputs"]
    _require_keys(outs, {"directory", "checkpoints", "diagnostics"},
                  {"directory"}, "outputs")
    ck = outs.setdefault("checkpoints", "geometric")
    if not (ck in ("all", "geometric") or isinstance(ck, list)):
        raise ConfigError("outputs.checkpoints must be 'all', 'geometric', or a list")
    outs.setdefault("diagnostics", False)

    cons = out.setdefault("constants", {})
    _require_keys(cons, {"radius", "count", "seed"}, set(), "constants")
    cons.setdefault("radius", 10.0)
    cons.setdefault("count", 1000)
    cons.setdefault("seed", 7)
    _check_seed(cons["seed"], "constants.seed")

    if "init" in out:
        _require_keys(out["init"], {"theta0"}, {"theta0"}, "init")
    if "sweep" in out:
        _require_keys(out["sweep"], {"T_grid"}, {"T_grid"}, "sweep")
        grid = out["sweep"]["T_grid"]
        if not grid or any((not isinstance(T, int)) or T < 1 for T in grid):
            raise ConfigError("sweep.T_grid must be a nonempty list of integers >= 1")
    return out


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated configuration plus its content hash."""

    data: dict
    hash: str

    @property
    def problem(self) -> dict:
        return self.data["problem"]

    @property
    def schedule(self) -> dict:
        return self.data["schedule"]

    @property
    def ensemble(self) -> dict:
        return self.data["ensemble"]

    @property
    def outputs(self) -> dict:
        return self.data["outputs"]

    def theta0(self, dim: int) -> np.ndarray:
        init = self.data.get("init")
        if init is None:
            return np.zeros(dim)
        theta0 = np.asarray(init["theta0"], dtype=float)
        if theta0.shape != (dim,):
            raise ConfigError(f"init.theta0 must have length {dim}")
        return theta0

    def grid(self) -> ThetaGrid:
        c = self.data["constants"]
        return ThetaGrid(radius=float(c["radius"]), count=int(c["count"]),
                         seed=int(c["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    resolved = resolve_config(_load_json(path), path.parent)
    return ExperimentConfig(resolved, config_hash(resolved))


def from_resolved(resolved: dict) -> ExperimentConfig:
    return ExperimentConfig(resolved, config_hash(resolved))


# ---------------------------------------------------------------------------
# builders


def build_problem(cfg: ExperimentConfig) -> ProblemOracle:
    prob = cfg.problem
    if prob["kind"] == "sgd-ergodic":
        features, targets, models = [], [], []
        for agent in prob["agents"]:
            features.append(np.asarray(agent["features"], dtype=float))
            targets.append(np.asarray(agent["targets"], dtype=float))
            models.append(markov.MarkovModel.from_matrix(
                np.asarray(agent["kernel"], dtype=float)))
        return make_ergodic_sgd_problem(features, targets, models)
    return make_td0_problem(MdpSpec.from_dict(prob["mdp"]))


def build_graph(cfg: ExperimentConfig) -> Graph | None:
    topo = cfg.data["topology"]
    g = topo.get("graph")
    if g is None:
        return None
    if "edges" in g:
        return Graph(int(g["n"]), tuple(tuple(e) for e in g["edges"]))
    kind, n = g.get("kind"), g.get("n")
    if kind is None or n is None:
        raise ConfigError("topology.graph needs 'kind' and 'n' (or explicit edges)")
    from .presets import toy_graph

    return toy_graph(kind, int(n), seed=int(g.get("seed", 0)), p=float(g.get("p", 0.5)))


def build_mixing(cfg: ExperimentConfig) -> MixingSchedule:
    topo = cfg.data["topology"]
    if "matrix" in topo:
        M = np.asarray(topo["matrix"], dtype=float)
        return topology.static_schedule(topology.MixingMatrix.from_matrix(M))
    graph = build_graph(cfg)
    tv = topo.get("time_varying")
    if tv:
        return topology.make_tv_schedule(graph, int(tv["B"]),
                                         policy=tv.get("policy", "round_robin"),
                                         seed=int(tv.get("seed", 0)))
    return topology.static_schedule(topology.build_metropolis_weights(graph))


@dataclass(frozen=True)
class Prepared:
    """Everything a run needs, built deterministically from one config."""

    oracle: ProblemOracle
    mixing: MixingSchedule
    steps: StepSchedule
    constants: ConstantsBundle
    theta0: np.ndarray


def prepare(cfg: ExperimentConfig, T: int | None = None,
            constants: ConstantsBundle | None = None) -> Prepared:
    """Build oracle, topology, constants and the certified schedule.

    Order matters: the raw schedule's decrement constants feed the step cap,
    the (possibly clipped) final schedule's constants are what the bundle
    keeps. ``T`` overrides the configured horizon (for sweeps).
    """
    oracle = build_problem(cfg)
    mixing = build_mixing(cfg)
    if mixing.n != oracle.n_agents:
        raise DimensionError(
            f"topology has {mixing.n} nodes but problem has {oracle.n_agents} agents")
    if constants is None:
        constants = assemble_constants(oracle, mixing.rho_bar, cfg.grid())
    sched = cfg.schedule
    horizon = int(T if T is not None else sched["T"])
    a1 = sched["a1"]
    steps = make_step_schedule(float(sched["a0"]),
                               None if a1 is None else float(a1),
                               horizon, constants=constants,
                               rho_bar=mixing.rho_bar,
                               cap_mode=sched.get("cap_mode", "warn"))
    constants = constants.with_schedule(steps.a_hat, steps.a_ratio)
    theta0 = cfg.theta0(oracle.dim)
    if oracle.has_potential:
        v0 = oracle.potential(theta0)
        grad0 = float(np.linalg.norm(oracle.gradient(theta0)))
        constants = constants.with_initial_point(v0, grad0)
    return Prepared(oracle, mixing, steps, constants, theta0)
