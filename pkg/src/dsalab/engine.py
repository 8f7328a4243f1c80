"""Consensus + stochastic-approximation recursion, schedules, and recording.

One iteration mixes neighbor parameters through the current doubly
stochastic matrix and then subtracts the step-weighted local update:

    Theta[t+1] = A^(t) Theta[t] - gamma_{t+1} H(Theta[t]; X^{t+1})

with Theta an (n, d) row-stacked parameter block. The consensual component
is the row mean, the consensus error the projection onto the disagreement
subspace; both are tracked every step together with the mean-field and
gradient norms, so randomized-stopping expectations can be integrated in
closed form per trajectory.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .problems import ConstantsBundle, ProblemOracle
from .topology import MixingSchedule, _empty_basis

__all__ = [
    "StepSchedule",
    "NetworkState",
    "TrajectoryRecord",
    "RecordOptions",
    "RunSummary",
    "EnsembleResult",
    "make_step_schedule",
    "run_dsa",
    "run_ensemble",
    "aggregate_summaries",
    "summarize_run",
    "decompose",
    "recompose",
    "sample_terminating_time",
    "geometric_checkpoints",
    "trajectory_csv_text",
    "export_trajectory_csv",
]

DIVERGENCE_LIMIT = 1e12


# ---------------------------------------------------------------------------
# step-size schedules


@dataclass(frozen=True)
class StepSchedule:
    """Nonincreasing step sizes gamma_t = a0/sqrt(t + a1), certified.

    ``gammas`` holds gamma_0 .. gamma_{T+1}; the recursion at iteration t
    uses gamma_{t+1}. ``a_hat`` certifies the decrement condition
    0 <= gamma_t - gamma_{t+1} <= a_hat gamma_t^2 and ``a_ratio`` the shift
    constant sup_t gamma_t/gamma_{t+1}, both as numerical suprema over the
    horizon. ``cap`` records the step-size ceiling applied at build time
    (None when no constants were available).
    """

    gammas: np.ndarray
    T: int
    a0: float
    a1: float | None
    a_hat: float
    a_ratio: float
    cap: float | None = None
    capped: bool = False

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "gammas", g)
        if g.shape != (self.T + 2,):
            raise DimensionError("schedule must provide gamma_0 .. gamma_{T+1}")
        if g.min() <= 0:
            raise ConfigError("step sizes must be positive")
        if (np.diff(g) > 1e-15).any():
            raise ConfigError("step sizes must be nonincreasing")

    def gamma(self, t: int) -> float:
        return float(self.gammas[t])

    @property
    def sum_gamma(self) -> float:
        """sum_{t=0}^{T} gamma_{t+1}, compensated."""
        return math.fsum(self.gammas[1:])

    @property
    def sum_gamma_sq(self) -> float:
        return math.fsum(g * g for g in self.gammas[1:])

    def masses(self) -> np.ndarray:
        """Stopping-index distribution: Pr(tau = t) proportional to gamma_{t+1}."""
        w = self.gammas[1:]
        return w / w.sum()


def _certify(gammas: np.ndarray) -> tuple[float, float]:
    dec = gammas[:-1] - gammas[1:]
    a_hat = float(np.max(dec / gammas[:-1] ** 2, initial=0.0))
    a_ratio = float(np.max(gammas[:-1] / gammas[1:], initial=1.0))
    return a_hat, a_ratio


def make_step_schedule(a0: float, a1: float | None, T: int,
                       constants: ConstantsBundle | None = None,
                       rho_bar: float | None = None,
                       cap_mode: str = "warn") -> StepSchedule:
    """Build and certify a step schedule, optionally applying the step cap.

    With ``a1=None`` the schedule is the constant gamma = a0 (zero decrement).
    When a constants bundle is supplied, the ceiling
    min{1, rho_bar/(2 sigma_het), c0/(2 margin_const)} is computed;
    ``cap_mode`` decides what to do when the raw schedule exceeds it:
    "off" ignores it, "warn" warns, "enforce" clips the schedule (and warns
    that the cap binds).
    """
    if a0 <= 0:
        raise ConfigError(f"a0 must be positive, got {a0}")
    if a1 is not None and a1 < 1:
        raise ConfigError(f"a1 must be >= 1, got {a1}")
    if T < 0:
        raise ConfigError("horizon must be nonnegative")
    if cap_mode not in ("off", "warn", "enforce"):
        raise ConfigError(f"unknown cap_mode {cap_mode!r}")
    t = np.arange(T + 2, dtype=float)
    gammas = np.full(T + 2, float(a0)) if a1 is None else a0 / np.sqrt(t + a1)
    a_hat, a_ratio = _certify(gammas)

    cap = None
    capped = False
    if constants is not None and cap_mode != "off":
        from .analysis import step_size_cap  # deferred: analysis layers above engine

        cert = constants.with_schedule(a_hat, a_ratio)
        if rho_bar is not None:
            cert = replace(cert, rho_bar=float(rho_bar))
        cap = step_size_cap(cert)
        if cap <= 0:
            raise ConfigError(f"step cap is nonpositive ({cap:g}); check constants")
        if gammas.max() > cap:
            if cap_mode == "enforce":
                gammas = np.minimum(gammas, cap)
                a_hat, a_ratio = _certify(gammas)
                capped = True
                warnings.warn(f"step cap {cap:g} binds; schedule clipped", stacklevel=2)
            else:
                warnings.warn(
                    f"schedule exceeds the certified step cap {cap:g}; "
                    "bound certificates will be non-binding", stacklevel=2)
    return StepSchedule(gammas, T, float(a0), a1, a_hat, a_ratio, cap, capped)


def sample_terminating_time(steps: StepSchedule, T: int, seed) -> int:
    """Randomized stopping index tau in {0..T} with mass proportional to gamma_{t+1}."""
    if T < 0:
        raise ConfigError("T must be nonnegative")
    if T > steps.T:
        raise DimensionError("schedule horizon shorter than requested T")
    w = steps.gammas[1:T + 2]
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(ss))
    return int(rng.choice(T + 1, p=w / w.sum()))


# ---------------------------------------------------------------------------
# decomposition


def decompose(theta: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a stacked (n*d,) vector into (consensual d-vector, error (n-1)d-vector)."""
    U = np.asarray(U, dtype=float)
    n = U.shape[0]
    theta = np.asarray(theta, dtype=float)
    if theta.size % n != 0:
        raise DimensionError(f"stacked size {theta.size} not divisible by n={n}")
    Theta = theta.reshape(n, -1)
    return Theta.mean(axis=0), (U.T @ Theta).ravel()


def recompose(consensual: np.ndarray, error: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decompose`: exact round trip."""
    U = np.asarray(U, dtype=float)
    n = U.shape[0]
    consensual = np.asarray(consensual, dtype=float)
    d = consensual.size
    E = np.asarray(error, dtype=float).reshape(n - 1 if n > 1 else 0, d)
    Theta = np.tile(consensual, (n, 1))
    if n > 1:
        Theta = Theta + U @ E
    return Theta.ravel()


@dataclass
class NetworkState:
    """Stacked parameters with their consensual/error split at iteration t."""

    theta: np.ndarray          # (n, d) row-stacked
    U: np.ndarray              # disagreement basis, (n, n-1)
    t: int = 0

    @property
    def consensual(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    @property
    def error(self) -> np.ndarray:
        return (self.U.T @ self.theta).ravel()

    @property
    def stacked(self) -> np.ndarray:
        return self.theta.ravel()

    def reconstruction_defect(self) -> float:
        back = recompose(self.consensual, self.error, self.U)
        return float(np.abs(back - self.stacked).max())


# ---------------------------------------------------------------------------
# trajectory records


def geometric_checkpoints(T: int, count: int = 64) -> np.ndarray:
    """Roughly log-spaced iteration indices including 0 and T."""
    if T <= count:
        return np.arange(T + 1)
    pts = np.unique(np.round(np.geomspace(1, T, count)).astype(int))
    return np.unique(np.concatenate([[0], pts, [T]]))


@dataclass(frozen=True)
class RecordOptions:
    """What a run records beyond the always-on per-step scalar series.

    ``diagnostics`` adds the perturbation split (e0/e1 norms) and the
    per-step recursion residuals; it costs extra oracle evaluations.
    ``checkpoints`` ("all", "geometric", or an explicit index list) controls
    CSV export granularity only.
    """

    diagnostics: bool = False
    store_states: bool = False
    checkpoints: object = "geometric"
    divergence_limit: float = DIVERGENCE_LIMIT

    def checkpoint_indices(self, T: int) -> np.ndarray:
        if isinstance(self.checkpoints, str):
            if self.checkpoints == "all":
                return np.arange(T + 1)
            if self.checkpoints == "geometric":
                return geometric_checkpoints(T)
            raise ConfigError(f"unknown checkpoint policy {self.checkpoints!r}")
        idx = np.unique(np.asarray(self.checkpoints, dtype=int))
        if idx.size == 0 or idx.min() < 0 or idx.max() > T:
            raise ConfigError("explicit checkpoints outside 0..T")
        return idx


@dataclass
class TrajectoryRecord:
    """Per-iteration metrics of one run plus stopping-index data.

    Row t describes the iterate before step t is applied; ``gamma[t]`` is
    gamma_{t+1}, the weight of iterate t in every stopping-index average.
    ``integrated`` holds those averages (the exact expectation over the
    randomized stopping index given the path); ``tau`` and ``theta_tau``
    record the single drawn index. Diagnostic series are NaN at t = T where
    the transition quantities are undefined.
    """

    T: int
    n: int
    d: int
    gamma: np.ndarray
    h_bar_sq: np.ndarray
    grad_sq: np.ndarray
    cons_err: np.ndarray
    v_pot: np.ndarray
    max_dev: np.ndarray
    tau: int
    theta_tau: np.ndarray
    theta_final: np.ndarray
    integrated: dict
    metadata: dict
    e0_norm: np.ndarray | None = None
    e1_norm: np.ndarray | None = None
    resid_consensual: np.ndarray | None = None
    resid_error: np.ndarray | None = None
    resid_reconstruct: np.ndarray | None = None
    resid_update_split: np.ndarray | None = None
    states: np.ndarray | None = None
    samples: list = field(default_factory=list)

    COLUMNS = ("t", "gamma", "h_bar_sq", "grad_sq", "cons_err", "V")

    def column(self, name: str) -> np.ndarray:
        mapping = {"gamma": self.gamma, "h_bar_sq": self.h_bar_sq,
                   "grad_sq": self.grad_sq, "cons_err": self.cons_err,
                   "V": self.v_pot, "e0": self.e0_norm, "e1": self.e1_norm,
                   "max_dev": self.max_dev}
        col = mapping.get(name)
        if col is None:
            raise KeyError(name)
        return col


def _fmt(x: float) -> str:
    return repr(float(x))


def trajectory_csv_text(record: TrajectoryRecord, options: RecordOptions) -> str:
    """Fixed-order CSV: t, gamma, h_bar_sq, grad_sq, cons_err, V [, e0, e1].

    The diagnostic columns appear iff the export options ask for them (and
    the record carries them), so re-exports under the same options are
    byte-identical.
    """
    idx = options.checkpoint_indices(record.T)
    with_diag = options.diagnostics and record.e0_norm is not None
    cols = list(TrajectoryRecord.COLUMNS) + (["e0", "e1"] if with_diag else [])
    lines = [",".join(cols)]
    for t in idx:
        row = [str(int(t)), _fmt(record.gamma[t]), _fmt(record.h_bar_sq[t]),
               _fmt(record.grad_sq[t]), _fmt(record.cons_err[t]), _fmt(record.v_pot[t])]
        if with_diag:
            row += [_fmt(record.e0_norm[t]), _fmt(record.e1_norm[t])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def export_trajectory_csv(record: TrajectoryRecord, path, options: RecordOptions) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trajectory_csv_text(record, options))


# ---------------------------------------------------------------------------
# the recursion


def run_dsa(oracle: ProblemOracle, mixing: MixingSchedule, steps: StepSchedule,
            T: int, seed, theta0=None, options: RecordOptions | None = None) -> TrajectoryRecord:
    """Run the recursion for T iterations and record the trajectory.

    ``theta0`` is the common initial parameter (d-vector, default zero); an
    (n, d) array is also accepted for deliberately unequal initializations
    (the consensus-error bound then loses its zero-start guarantee, which is
    recorded in the metadata). Mixing is applied before the update is
    subtracted. Divergence (sup-norm beyond the configured limit) raises
    DivergenceError carrying the last finite iteration.
    """
    options = options or RecordOptions()
    n, d = oracle.n_agents, oracle.dim
    if mixing.n != n:
        raise DimensionError(f"mixing is {mixing.n}x{mixing.n} but oracle has n={n}")
    if T > steps.T:
        raise DimensionError("schedule horizon shorter than requested T")

    if theta0 is None:
        theta0 = np.zeros(d)
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape == (d,):
        Theta = np.tile(theta0, (n, 1))
        equal_init = True
    elif theta0.shape == (n, d):
        Theta = theta0.copy()
        equal_init = bool(np.abs(theta0 - theta0[0]).max() == 0.0)
    else:
        raise DimensionError(f"theta0 must be ({d},) or ({n},{d}), got {theta0.shape}")

    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    tau_ss, stream_ss = ss.spawn(2)
    tau = sample_terminating_time(steps, T, tau_ss)
    stream = oracle.make_stream(stream_ss)

    U = _empty_basis(n)
    mats = [np.ascontiguousarray(M) for M in mixing.matrices]
    period = mixing.period
    gammas = steps.gammas
    has_grad = oracle.has_potential
    is_grad = oracle.mean_field_is_gradient
    diag = options.diagnostics

    gamma_col = np.asarray(gammas[1:T + 2], dtype=float).copy()
    h_bar_sq = np.empty(T + 1)
    grad_sq = np.full(T + 1, np.nan)
    cons_err = np.empty(T + 1)
    v_pot = np.full(T + 1, np.nan)
    max_dev = np.empty(T + 1)
    dev_agents = np.zeros((T + 1, n))
    if diag:
        e0_norm = np.full(T + 1, np.nan)
        e1_norm = np.full(T + 1, np.nan)
        r_cons = np.full(T + 1, np.nan)
        r_err = np.full(T + 1, np.nan)
        r_rec = np.full(T + 1, np.nan)
        r_split = np.full(T + 1, np.nan)
        UtAU = [U.T @ M @ U for M in mats]
    states = np.empty((T + 1, n, d)) if options.store_states else None
    samples: list = []
    theta_tau = None
    limit = options.divergence_limit

    for t in range(T + 1):
        theta_bar = Theta.mean(axis=0)
        hbar = oracle.averaged_mean_field(theta_bar)
        h_bar_sq[t] = hbar @ hbar
        if is_grad:
            grad_sq[t] = h_bar_sq[t]
        elif has_grad:
            gv = oracle.gradient(theta_bar)
            grad_sq[t] = gv @ gv
        if has_grad:
            v_pot[t] = oracle.potential(theta_bar)
        E = U.T @ Theta
        cons_err[t] = np.sqrt((E * E).sum())
        devs = np.linalg.norm(Theta - theta_bar, axis=1)
        dev_agents[t] = devs
        max_dev[t] = devs.max()
        if states is not None:
            states[t] = Theta
        if t == tau:
            theta_tau = Theta.copy()
        if t == T:
            break

        x = next(stream)
        H = oracle.update_all(Theta, x)
        g = gammas[t + 1]
        Theta_next = mats[t % period] @ Theta - g * H

        if diag:
            samples.append(x)
            Hmean = H.mean(axis=0)
            Hc = oracle.update_at(theta_bar, x)
            e0 = Hc.mean(axis=0) - hbar
            e1 = Hmean - Hc.mean(axis=0)
            e0_norm[t] = np.linalg.norm(e0)
            e1_norm[t] = np.linalg.norm(e1)
            bar_next = Theta_next.mean(axis=0)
            r_cons[t] = np.abs(bar_next - (theta_bar - g * Hmean)).max()
            E_next = U.T @ Theta_next
            r_err[t] = np.abs(E_next - (UtAU[t % period] @ E - g * (U.T @ H))).max()
            r_rec[t] = np.abs(
                np.tile(theta_bar, (n, 1)) + (U @ E if n > 1 else 0.0) - Theta
            ).max()
            r_split[t] = np.abs(bar_next - (theta_bar - g * (hbar + e0 + e1))).max()

        if np.abs(Theta_next).max() > limit or not np.isfinite(Theta_next).all():
            raise DivergenceError(f"iterates exceeded {limit:g} at step {t}", last_valid_t=t)
        Theta = Theta_next

    w = gamma_col / gamma_col.sum()
    dev_int = w @ dev_agents
    integrated = {
        "h_bar_sq": float(w @ h_bar_sq),
        "grad_sq": float(w @ grad_sq) if has_grad or is_grad else float("nan"),
        "cons_err": float(w @ cons_err),
        "max_dev": float(w @ max_dev),
        "dev_per_agent": dev_int,
    }
    metadata = {
        "seed": repr(ss.entropy),
        "equal_init": equal_init,
        "oracle": oracle.label,
        "tau": tau,
        "T": T,
        "a0": steps.a0,
        "a1": steps.a1,
    }
    return TrajectoryRecord(
        T=T, n=n, d=d, gamma=gamma_col, h_bar_sq=h_bar_sq, grad_sq=grad_sq,
        cons_err=cons_err, v_pot=v_pot, max_dev=max_dev, tau=tau,
        theta_tau=theta_tau, theta_final=Theta, integrated=integrated,
        metadata=metadata,
        e0_norm=e0_norm if diag else None,
        e1_norm=e1_norm if diag else None,
        resid_consensual=r_cons if diag else None,
        resid_error=r_err if diag else None,
        resid_reconstruct=r_rec if diag else None,
        resid_update_split=r_split if diag else None,
        states=states, samples=samples,
    )


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class RunSummary:
    """Per-run scalars kept after the full series is discarded."""

    index: int
    tau: int
    integrated: dict
    at_tau: dict
    final: dict
    checkpoints: dict
    diverged: bool = False
    last_valid_t: int | None = None


def summarize_run(index: int, record: TrajectoryRecord,
                  checkpoint_idx: np.ndarray) -> RunSummary:
    at = lambda arr, t: float(arr[t])
    tau = record.tau
    return RunSummary(
        index=index,
        tau=tau,
        integrated={k: (v.copy() if isinstance(v, np.ndarray) else v)
                    for k, v in record.integrated.items()},
        at_tau={"h_bar_sq": at(record.h_bar_sq, tau),
                "grad_sq": at(record.grad_sq, tau),
                "cons_err": at(record.cons_err, tau),
                "max_dev": at(record.max_dev, tau)},
        final={"h_bar_sq": at(record.h_bar_sq, -1),
               "grad_sq": at(record.grad_sq, -1),
               "cons_err": at(record.cons_err, -1),
               "max_dev": at(record.max_dev, -1)},
        checkpoints={"t": checkpoint_idx.tolist(),
                     "h_bar_sq": record.h_bar_sq[checkpoint_idx].tolist(),
                     "grad_sq": record.grad_sq[checkpoint_idx].tolist(),
                     "cons_err": record.cons_err[checkpoint_idx].tolist(),
                     "max_dev": record.max_dev[checkpoint_idx].tolist()},
    )


@dataclass
class EnsembleResult:
    """Aggregated stopping-index expectations with standard errors."""

    n_runs: int
    T: int
    master_seed: int
    runs: list
    mean: dict
    se: dict
    consensus_lhs: float        # max_i of the ensemble-mean per-agent deviation
    consensus_lhs_se: float
    checkpoint_mean: dict
    divergences: list

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "T": self.T,
            "master_seed": self.master_seed,
            "mean": self.mean,
            "se": self.se,
            "consensus_lhs": self.consensus_lhs,
            "consensus_lhs_se": self.consensus_lhs_se,
            "checkpoint_mean": self.checkpoint_mean,
            "divergences": self.divergences,
            "taus": [r.tau for r in self.runs],
            "at_tau": [r.at_tau for r in self.runs],
            "integrated": [
                {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                 for k, v in r.integrated.items()} for r in self.runs
            ],
        }


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    m = float(values.mean())
    if values.size < 2:
        return m, 0.0
    return m, float(values.std(ddof=1) / np.sqrt(values.size))


def _one_run(oracle, mixing, steps, T, child_ss, theta0, options, index, per_run=None):
    record = run_dsa(oracle, mixing, steps, T, child_ss, theta0, options)
    if per_run is not None:
        per_run(index, record)
    return summarize_run(index, record, options.checkpoint_indices(T))


def run_ensemble(oracle: ProblemOracle, mixing: MixingSchedule, steps: StepSchedule,
                 T: int, n_runs: int, master_seed: int, theta0=None,
                 options: RecordOptions | None = None, jobs: int = 1,
                 per_run=None) -> EnsembleResult:
    """Independent runs with per-run seeds spawned from one master seed.

    Aggregation is a deterministic reduction over run indices, so results
    are identical regardless of ``jobs``. Diverged runs contribute to the
    divergence report and are excluded from the means. ``per_run(k, record)``
    runs in the worker before the full record is discarded (with jobs > 1 it
    must be picklable, e.g. a partial of a module-level function).
    """
    if n_runs < 1:
        raise ConfigError("need at least one run")
    options = options or RecordOptions()
    children = np.random.SeedSequence(master_seed).spawn(n_runs)
    results: list[RunSummary | None] = [None] * n_runs
    divergences = []

    def diverged_summary(k, exc):
        return RunSummary(index=k, tau=-1, integrated={}, at_tau={}, final={},
                          checkpoints={}, diverged=True,
                          last_valid_t=exc.last_valid_t)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_one_run, oracle, mixing, steps, T, child,
                                theta0, options, k, per_run): k
                    for k, child in enumerate(children)}
            for fut, k in futs.items():
                try:
                    results[k] = fut.result()
                except DivergenceError as exc:
                    results[k] = diverged_summary(k, exc)
    else:
        for k, child in enumerate(children):
            try:
                results[k] = _one_run(oracle, mixing, steps, T, child, theta0,
                                      options, k, per_run)
            except DivergenceError as exc:
                results[k] = diverged_summary(k, exc)
    return aggregate_summaries(results, T, master_seed)


def aggregate_summaries(results: list[RunSummary], T: int, master_seed: int) -> EnsembleResult:
    """Deterministic reduction of per-run summaries (independent of run order)."""
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if not r.diverged]
    divergences = [{"run": r.index, "last_valid_t": r.last_valid_t}
                   for r in results if r.diverged]
    mean, se = {}, {}
    consensus_lhs = consensus_se = float("nan")
    checkpoint_mean = {}
    if ok:
        for key in ("h_bar_sq", "grad_sq", "cons_err", "max_dev"):
            m, s = _mean_se([r.integrated[key] for r in ok])
            mean[f"integrated_{key}"], se[f"integrated_{key}"] = m, s
            m, s = _mean_se([r.at_tau[key] for r in ok])
            mean[f"at_tau_{key}"], se[f"at_tau_{key}"] = m, s
            m, s = _mean_se([r.final[key] for r in ok])
            mean[f"final_{key}"], se[f"final_{key}"] = m, s
        dev = np.stack([r.integrated["dev_per_agent"] for r in ok])  # (runs, n)
        agent_means = dev.mean(axis=0)
        worst = int(np.argmax(agent_means))
        consensus_lhs = float(agent_means[worst])
        consensus_se = _mean_se(dev[:, worst])[1]
        ts = ok[0].checkpoints["t"]
        checkpoint_mean = {"t": ts}
        for key in ("h_bar_sq", "grad_sq", "cons_err", "max_dev"):
            stackd = np.stack([np.asarray(r.checkpoints[key]) for r in ok])
            checkpoint_mean[key] = stackd.mean(axis=0).tolist()
            checkpoint_mean[f"{key}_se"] = (
                stackd.std(ddof=1, axis=0) / np.sqrt(len(ok))
            ).tolist() if len(ok) > 1 else [0.0] * len(ts)
    return EnsembleResult(
        n_runs=len(results), T=T, master_seed=master_seed, runs=results,
        mean=mean, se=se, consensus_lhs=consensus_lhs,
        consensus_lhs_se=consensus_se, checkpoint_mean=checkpoint_mean,
        divergences=divergences,
    )
