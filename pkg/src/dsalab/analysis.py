"""Certificates and checks: convolution bounds, constants, rate fits, reports.

Everything here is a pure function of recorded trajectories and a constants
bundle. Certificates are numerically evaluated right-hand sides of the
convergence guarantees; they are stamped NON-BINDING (and their violation is
informational) whenever the step-size rule they presuppose was not met.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import FitError, IncompleteConstantsError, ReportError
from .problems import ConstantsBundle

if TYPE_CHECKING:
    from .engine import EnsembleResult, StepSchedule, TrajectoryRecord

__all__ = [
    "BoundCertificate",
    "RateFit",
    "CheckResult",
    "InequalityCheck",
    "step_size_cap",
    "compute_certificate",
    "consensus_error_bound",
    "geometric_sum_inequality",
    "rate_fit",
    "verify_trajectory",
    "verify_ensemble",
    "render_report",
    "overall_pass",
]

_CERT_FIELDS = ("c0", "d0", "sigma_het", "sigma_noise", "l_update", "l_grad",
                "k_poisson", "l_poisson", "a_hat", "a_ratio", "n_agents",
                "rho_bar", "v_star")


def _margin_terms(c: ConstantsBundle) -> tuple[float, float, float, float]:
    """The four assembled constants (coupling, init, noise, drift).

    coupling  = 12 sigma_het^2 l_update^2 / (rho_bar n^2)
    init      = k_poisson (sqrt(d0)/2 + gamma_1 grad0)   [gamma-dependent part added later]
    noise     = per-gamma^2 constant multiplying sum gamma^2
    drift     = per-gamma^2 constant multiplying sum gamma^2 ||h_bar||^2
    """
    n, rho = c.n_agents, c.rho_bar
    so, sh = c.sigma_het, c.sigma_noise
    lh, lv = c.l_update, c.l_grad
    kp, lp = c.k_poisson, c.l_poisson
    rd0 = math.sqrt(c.d0)
    coupling = 12.0 * so**2 * lh**2 / (rho * n**2)
    noise = (kp * lv * (rho * n * (1.0 + 2.0 * sh) + lh * (1.0 + 4.0 * so**2))
             / (2.0 * rho * n)
             + rd0 * (lp * sh**2 + 4.0 * lp * so**2 / rho + kp * c.a_hat))
    drift = (rd0 * lp * (2.0 + lh / (2.0 * n) + 4.0 * so**2 / rho)
             + kp * rd0 / 2.0
             + kp * (c.a_hat * c.a_ratio**2 * rd0
                     + lv * (rho * n + 4.0 * lh * so**2) / (2.0 * rho * n)))
    margin = drift + coupling + c.d0 / 2.0 + lv
    return coupling, noise, drift, margin


def step_size_cap(constants: ConstantsBundle) -> float:
    """Certified step ceiling min{1, rho/(2 sigma_het), c0/(2 margin_const)}."""
    missing = constants.missing([f for f in _CERT_FIELDS if f != "v_star"])
    if missing:
        raise IncompleteConstantsError(missing)
    *_, margin = _margin_terms(constants)
    cap = min(1.0, constants.c0 / (2.0 * margin))
    if constants.sigma_het > 0:
        cap = min(cap, constants.rho_bar / (2.0 * constants.sigma_het))
    return cap


@dataclass(frozen=True)
class BoundCertificate:
    """Assembled right-hand sides of the stopping-index convergence bounds.

    ``meanfield_bound`` caps E||h_bar(consensual at tau)||^2 and
    ``consensus_bound`` caps max_i E||theta_i - consensual|| at tau, both
    valid when ``binding`` (the step rule held over the horizon).
    """

    coupling: float        # heterogeneity-through-consensus constant
    init_const: float      # Markov-memory offset, horizon independent
    noise_const: float     # multiplies sum gamma^2
    drift_const: float     # multiplies sum gamma^2 ||h_bar||^2
    margin_const: float    # drift_const + coupling + d0/2 + l_grad (step-cap scale)
    noise_total: float     # noise_const + coupling + sigma_noise^2 l_grad
    total_const: float     # v0 - v_star + init_const + noise_total * sum gamma^2
    sum_gamma: float
    sum_gamma_sq: float
    meanfield_bound: float
    consensus_bound: float
    cap: float
    binding: bool
    T: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "coupling", "init_const", "noise_const", "drift_const",
            "margin_const", "noise_total", "total_const", "sum_gamma",
            "sum_gamma_sq", "meanfield_bound", "consensus_bound", "cap",
            "binding", "T")}


def compute_certificate(constants: ConstantsBundle, steps: "StepSchedule", T: int,
                        v0: float | None = None, grad0: float | None = None) -> BoundCertificate:
    """Evaluate the bound constants and both right-hand sides at horizon T.

    ``v0``/``grad0`` are the potential and gradient norm at the common
    initial point (falling back to the bundle's stored values). Sums over
    the horizon use compensated summation. The certificate is marked
    non-binding when the schedule violates the step cap; its values are
    still reported.
    """
    v0 = constants.v0 if v0 is None else float(v0)
    grad0 = constants.grad0 if grad0 is None else float(grad0)
    missing = constants.missing(_CERT_FIELDS)
    if v0 is None:
        missing.append("v0")
    if grad0 is None:
        missing.append("grad0")
    if missing:
        raise IncompleteConstantsError(missing)
    if T > steps.T:
        raise IncompleteConstantsError([f"schedule horizon {steps.T} < T={T}"])

    coupling, noise, drift, margin = _margin_terms(constants)
    c0, d0 = constants.c0, constants.d0
    kp = constants.k_poisson
    init_const = kp * (math.sqrt(d0) / 2.0 + steps.gamma(1) * grad0)
    noise_total = noise + coupling + constants.sigma_noise**2 * constants.l_grad
    sum_g = math.fsum(steps.gammas[1:T + 2])
    sum_g2 = math.fsum(g * g for g in steps.gammas[1:T + 2])
    total = (v0 - constants.v_star) + init_const + noise_total * sum_g2
    meanfield = total / ((c0 / 2.0) * sum_g)
    consensus = (total / c0
                 + 1.5 * constants.sigma_het / constants.rho_bar * sum_g2) / sum_g

    cap = min(1.0, c0 / (2.0 * margin))
    if constants.sigma_het > 0:
        cap = min(cap, constants.rho_bar / (2.0 * constants.sigma_het))
    binding = bool(steps.gammas[:T + 2].max() <= cap * (1 + 1e-12))
    return BoundCertificate(
        coupling=coupling, init_const=init_const, noise_const=noise,
        drift_const=drift, margin_const=margin, noise_total=noise_total,
        total_const=total, sum_gamma=sum_g, sum_gamma_sq=sum_g2,
        meanfield_bound=meanfield, consensus_bound=consensus,
        cap=cap, binding=binding, T=T,
    )


def consensus_error_bound(gammas: np.ndarray, rho_bar: float, sigma_het: float,
                          h_bar_norms: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pathwise convolution bound on the consensus error.

    ``gammas[t]`` is gamma_{t+1} and ``h_bar_norms[t]`` the mean-field norm
    at iterate t. Returns (bound, binding): bound[t] dominates the consensus
    error at iterate t via the O(T) running recursion

        b[t+1] = (1 - rho/2) b[t] + sigma gamma_{t+1} (1 + ||h_bar[t]||),

    valid for equal initialization when every step satisfies
    gamma <= rho/(2 sigma).
    """
    gammas = np.asarray(gammas, dtype=float)
    h = np.asarray(h_bar_norms, dtype=float)
    if gammas.shape != h.shape:
        raise ReportError(["gamma/h_bar length mismatch"])
    binding = sigma_het == 0.0 or bool(gammas.max() <= rho_bar / (2.0 * sigma_het) * (1 + 1e-12))
    bound = np.empty(gammas.size)
    bound[0] = 0.0
    decay = 1.0 - rho_bar / 2.0
    b = 0.0
    for t in range(gammas.size - 1):
        b = decay * b + sigma_het * gammas[t] * (1.0 + h[t])
        bound[t + 1] = b
    return bound, binding


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool


def geometric_sum_inequality(a_seq, rho: float, T: int | None = None) -> InequalityCheck:
    """Check sum_t (sum_{s<=t} a_s (1-rho)^{t-s})^2 <= (2/rho) sum_t a_t^2.

    Holds for every nonnegative sequence and rho in (0,1); a failure
    indicates an implementation bug, not an input problem.
    """
    a = np.asarray(a_seq, dtype=float)
    if T is not None:
        a = a[:T + 1]
    if a.min(initial=0.0) < 0:
        raise FitError("sequence must be nonnegative")
    if not (0.0 < rho < 1.0):
        raise FitError(f"rho must lie in (0,1), got {rho}")
    conv = 0.0
    lhs_terms = []
    for at in a:
        conv = (1.0 - rho) * conv + at
        lhs_terms.append(conv * conv)
    lhs = math.fsum(lhs_terms)
    rhs = 2.0 / rho * math.fsum(x * x for x in a)
    return InequalityCheck(lhs, rhs, bool(lhs <= rhs * (1 + 1e-12)))


@dataclass(frozen=True)
class RateFit:
    """Log-log least-squares slope over a horizon grid."""

    T_grid: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    half_width: float
    sqrt_log_profile: np.ndarray   # value * sqrt(T) / log(T) per grid point

    def predicted(self) -> np.ndarray:
        return np.exp(self.intercept) * self.T_grid.astype(float) ** self.slope


def rate_fit(T_grid, values) -> RateFit:
    """Fit value ~ C T^slope on at least three positive grid points."""
    T_grid = np.asarray(T_grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if T_grid.size < 3:
        raise FitError("need at least three grid points")
    if (values <= 0).any() or not np.isfinite(values).all():
        raise FitError("values must be positive and finite")
    x, y = np.log(T_grid), np.log(values)
    (slope, intercept), cov = np.polyfit(x, y, 1, cov=True)
    half = 2.0 * math.sqrt(max(cov[0, 0], 0.0))
    profile = values * np.sqrt(T_grid) / np.log(T_grid)
    return RateFit(T_grid, values, float(slope), float(intercept), half, profile)


# ---------------------------------------------------------------------------
# verification reports


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    binding: bool
    margin: float
    detail: str = ""

    @property
    def status(self) -> str:
        if not self.binding:
            return "NON-BINDING"
        return "PASS" if self.passed else "FAIL"


def overall_pass(checks: list[CheckResult]) -> bool:
    return all(c.passed for c in checks if c.binding)


def render_report(checks: list[CheckResult], title: str = "verification") -> str:
    lines = [f"== {title} =="]
    for c in checks:
        lines.append(f"[{c.status}] {c.name}: margin={c.margin:.3e} {c.detail}".rstrip())
    lines.append(f"overall: {'PASS' if overall_pass(checks) else 'FAIL'}")
    return "\n".join(lines)


_RESID_TOL = 1e-10


def verify_trajectory(record: "TrajectoryRecord", constants: ConstantsBundle,
                      certificate: BoundCertificate | None = None) -> list[CheckResult]:
    """Pathwise checks of one recorded run against the bundle's constants.

    Requires a diagnostics-enabled record (recursion residuals and the e0/e1
    split); raises ReportError naming what is missing. Checks whose
    precondition fails (step cap, equal initialization) are reported
    NON-BINDING rather than failed.
    """
    missing = [name for name in
               ("resid_consensual", "resid_error", "resid_reconstruct",
                "resid_update_split", "e0_norm", "e1_norm")
               if getattr(record, name) is None]
    need = [f for f in ("sigma_het", "sigma_noise", "l_update", "rho_bar", "n_agents")
            if getattr(constants, f) is None]
    if missing or need:
        raise ReportError(missing + [f"constants.{f}" for f in need])

    checks = []
    trans = slice(0, record.T)   # transition quantities are defined for t < T

    def resid_check(name, series):
        worst = float(np.nanmax(series[trans])) if record.T > 0 else 0.0
        checks.append(CheckResult(name, worst <= _RESID_TOL, True,
                                  _RESID_TOL - worst, f"max residual {worst:.3e}"))

    resid_check("recursion-consensual", record.resid_consensual)
    resid_check("recursion-error", record.resid_error)
    resid_check("reconstruction", record.resid_reconstruct)
    resid_check("update-split", record.resid_update_split)

    bound, step_ok = consensus_error_bound(
        record.gamma, constants.rho_bar, constants.sigma_het, np.sqrt(record.h_bar_sq))
    binding = step_ok and record.metadata.get("equal_init", False)
    tol = 1e-9 * max(1.0, float(bound.max(initial=0.0)))
    gap = float((bound - record.cons_err).min())
    checks.append(CheckResult(
        "consensus-convolution-bound", gap >= -tol, binding, gap,
        f"min(bound - err) = {gap:.3e}" + ("" if step_ok else "; step cap violated")))

    e0_worst = float(np.nanmax(record.e0_norm)) if record.T > 0 else 0.0
    m0 = constants.sigma_noise - e0_worst
    checks.append(CheckResult("e0-noise-bound", m0 >= -1e-9 * max(1.0, constants.sigma_noise),
                              True, m0, f"max ||e0|| = {e0_worst:.3e}"))

    lip = constants.l_update / constants.n_agents
    e1_slack = lip * record.cons_err[trans] - record.e1_norm[trans]
    m1 = float(np.nanmin(e1_slack)) if record.T > 0 else 0.0
    checks.append(CheckResult("e1-dispersion-bound",
                              m1 >= -1e-9 * max(1.0, lip * float(record.cons_err.max(initial=0.0))),
                              True, m1, "||e1|| vs (L/n)||error||"))

    rel = float((record.cons_err - record.max_dev).min())
    checks.append(CheckResult("max-deviation-vs-error-norm", rel >= -1e-10, True, rel,
                              "max_i ||theta_i - mean|| <= ||error||"))

    if certificate is not None and not certificate.binding:
        checks.append(CheckResult("step-cap", False, False, 0.0,
                                  "schedule exceeds the certified cap"))
    return checks


def verify_ensemble(ensemble: "EnsembleResult", certificate: BoundCertificate,
                    n_se: float = 2.0) -> list[CheckResult]:
    """Ensemble means against both certificate right-hand sides.

    Probabilistic acceptance: a bound holds if the ensemble mean is below
    the right-hand side within ``n_se`` standard errors. Checks are
    NON-BINDING when the certificate itself is (step cap not met).
    """
    checks = []
    mean = ensemble.mean.get("integrated_h_bar_sq")
    se = ensemble.se.get("integrated_h_bar_sq", 0.0)
    if mean is None or not ensemble.runs:
        raise ReportError(["integrated_h_bar_sq"])
    slack = certificate.meanfield_bound + n_se * se - mean
    checks.append(CheckResult(
        "meanfield-expectation-bound", slack >= 0.0, certificate.binding, slack,
        f"E||h_bar||^2 = {mean:.3e} vs bound {certificate.meanfield_bound:.3e}"))
    lhs = ensemble.consensus_lhs
    slack_c = certificate.consensus_bound + n_se * ensemble.consensus_lhs_se - lhs
    checks.append(CheckResult(
        "consensus-expectation-bound", slack_c >= 0.0, certificate.binding, slack_c,
        f"max_i E||theta_i - mean|| = {lhs:.3e} vs bound {certificate.consensus_bound:.3e}"))
    if ensemble.divergences:
        checks.append(CheckResult("divergences", False, True,
                                  -float(len(ensemble.divergences)),
                                  f"{len(ensemble.divergences)} run(s) diverged"))
    return checks
