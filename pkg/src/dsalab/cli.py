"""Configuration-driven command line: validate, run, verify, bound, sweep.

Exit codes are a stable contract: 0 success, 1 assumption or certificate
failure, 2 input error, 3 runtime divergence. Every behavior here is a thin
shell over the library; the same calls with the same seeds give identical
results programmatically.
"""

from __future__ import annotations

import argparse
import functools
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analysis, markov
from .analysis import CheckResult
from .config import ExperimentConfig, Prepared, from_resolved, load_config, prepare
from .engine import (
    RecordOptions,
    aggregate_summaries,
    make_step_schedule,
    run_dsa,
    run_ensemble,
    summarize_run,
    trajectory_csv_text,
)
from .errors import (
    ConfigError,
    ConnectivityError,
    DivergenceError,
    DsalabError,
    ErgodicityError,
    IncompleteConstantsError,
    ValidationError,
)
from .markov import solve_poisson
from .problems import ConstantsBundle, ThetaGrid, estimate_bias_constants

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_INPUT = 2
EXIT_DIVERGENCE = 3


def _record_options(cfg: ExperimentConfig, args) -> RecordOptions:
    diagnostics = bool(cfg.outputs.get("diagnostics", False) or getattr(args, "diagnostics", False))
    return RecordOptions(diagnostics=diagnostics, checkpoints=cfg.outputs["checkpoints"])


def _write_run_csv(index, record, runs_dir: str, options: RecordOptions) -> None:
    path = Path(runs_dir) / f"run_{index}.csv"
    path.write_text(trajectory_csv_text(record, options))


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# validate


def _validate_lines(cfg: ExperimentConfig):
    """Assumption report as (tag, status, detail) rows; status in OK/VIOLATION/INFO."""
    rows = []
    ok = True
    tv = cfg.data["topology"].get("time_varying") is not None
    topo_tag = "H8" if tv else "H1"
    from .config import build_mixing, build_problem

    try:
        mixing = build_mixing(cfg)
    except (ConnectivityError, ValidationError) as exc:
        rows.append((f"{topo_tag}-1,2 mixing structure", "VIOLATION", str(exc)))
        return rows, False
    rows.append((f"{topo_tag}-1,2 doubly stochastic on edge set", "OK",
                 f"{mixing.n} nodes, period {mixing.period}"))
    if mixing.rho_bar > 0:
        rows.append((f"{topo_tag}-3 spectral contraction", "OK",
                     f"rho_bar = {mixing.rho_bar:.6g}" + (f", B = {mixing.B}" if tv else "")))
    else:
        rows.append((f"{topo_tag}-3 spectral contraction", "VIOLATION",
                     f"rho_bar = {mixing.rho_bar:.6g} (no contraction)"))
        ok = False

    try:
        oracle = build_problem(cfg)
    except ErgodicityError as exc:
        rows.append(("H2 chain ergodicity", "VIOLATION", str(exc)))
        return rows, False
    models = oracle.affine_tables()[0] if oracle.affine_tables() else [oracle.joint_model()[0]]
    lams = []
    for m in models:
        prof = markov.tv_mixing_profile(m, t_max=50)
        lams.append(prof.lam)
    rows.append(("H2 chain ergodicity", "OK",
                 f"{len(models)} chain(s); fitted mixing lambda <= {max(lams):.4g}"))

    residual = 0.0
    for m in models:
        probe = np.eye(m.n_states)
        residual = max(residual, solve_poisson(m, probe).residual)
    rows.append(("H4 Poisson solvability", "OK", f"max defect {residual:.3e}"))

    grid = cfg.grid()
    from .problems import assemble_constants

    constants = assemble_constants(oracle, mixing.rho_bar, grid)
    bias = estimate_bias_constants(oracle, grid)
    if constants.c0 > 0 and bias.violations == 0:
        rows.append(("H3 mean-field alignment", "OK",
                     f"c0 = {constants.c0:.6g} ({constants.provenance.get('c0')}), "
                     f"d0 = {constants.d0:.6g}; grid c0 = {bias.c0:.6g}"))
    else:
        rows.append(("H3 mean-field alignment", "VIOLATION",
                     f"c0 = {constants.c0:.6g}, {bias.violations} grid violation(s)"))
        ok = False
    rows.append(("H5 update Lipschitz", "OK",
                 f"L = {constants.l_update:.6g} ({constants.provenance.get('l_update')})"))
    rows.append(("H6 heterogeneity bound", "OK",
                 f"sigma = {constants.sigma_het:.6g} ({constants.provenance.get('sigma_het')})"))
    rows.append(("H7 consensual noise bound", "OK",
                 f"sigma = {constants.sigma_noise:.6g} ({constants.provenance.get('sigma_noise')})"))
    if constants.provenance.get("note"):
        rows.append(("H6/H7 growth probe", "INFO", constants.provenance["note"]))

    sched = cfg.schedule
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        steps = make_step_schedule(float(sched["a0"]),
                                   None if sched["a1"] is None else float(sched["a1"]),
                                   int(sched["T"]), constants=constants,
                                   rho_bar=mixing.rho_bar,
                                   cap_mode=sched.get("cap_mode", "warn"))
    for w in caught:
        rows.append(("step-size rule", "INFO", str(w.message)))
    cap = analysis.step_size_cap(constants.with_schedule(steps.a_hat, steps.a_ratio))
    if steps.gammas.max() <= cap * (1 + 1e-12):
        rows.append(("step-size rule", "OK",
                     f"sup gamma = {steps.gammas.max():.6g} <= cap {cap:.6g}"))
    else:
        rows.append(("step-size rule", "VIOLATION",
                     f"sup gamma = {steps.gammas.max():.6g} > cap {cap:.6g}"))
        ok = False
    return rows, ok


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
        rows, ok = _validate_lines(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DsalabError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for tag, status, detail in rows:
        print(f"[{status}] {tag}: {detail}")
    print("assumptions certified on grid" if ok else "assumption violations found")
    return EXIT_OK if ok else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# run / sweep


def _run_to_dir(cfg: ExperimentConfig, prepared: Prepared, outdir: Path, args,
                T: int | None = None) -> tuple[dict, int]:
    options = _record_options(cfg, args)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.save(outdir / "config.json")
    prepared.constants.save(outdir / "constants.json")
    runs_dir = outdir / "runs"
    runs_dir.mkdir(exist_ok=True)
    horizon = int(T if T is not None else cfg.schedule["T"])
    master_seed = args.seed if args.seed is not None else cfg.ensemble["master_seed"]
    ensemble = run_ensemble(
        prepared.oracle, prepared.mixing, prepared.steps, horizon,
        cfg.ensemble["n_runs"], master_seed, theta0=prepared.theta0,
        options=options, jobs=args.jobs,
        per_run=functools.partial(_write_run_csv, runs_dir=str(runs_dir), options=options),
    )
    cert_dict = None
    try:
        cert = analysis.compute_certificate(prepared.constants, prepared.steps, horizon)
        cert_dict = cert.to_dict()
    except IncompleteConstantsError:
        pass
    aggregate = {
        "config_hash": cfg.hash,
        "master_seed": master_seed,
        "ensemble": ensemble.to_dict(),
        "certificate": cert_dict,
        "schedule": {"a0": prepared.steps.a0, "a1": prepared.steps.a1,
                     "T": horizon, "a_hat": prepared.steps.a_hat,
                     "a_ratio": prepared.steps.a_ratio, "cap": prepared.steps.cap,
                     "capped": prepared.steps.capped},
    }
    _json_dump(aggregate, outdir / "aggregate.json")
    lines = [f"config {cfg.hash[:12]}  runs {cfg.ensemble['n_runs']}  T {horizon}",
             f"E||h_bar||^2 (stopping-index integrated) = "
             f"{ensemble.mean.get('integrated_h_bar_sq', float('nan')):.6e}",
             f"max_i E||theta_i - mean|| = {ensemble.consensus_lhs:.6e}"]
    if ensemble.divergences:
        lines.append(f"DIVERGED runs: {ensemble.divergences}")
    (outdir / "report.txt").write_text("\n".join(lines) + "\n")
    code = EXIT_DIVERGENCE if ensemble.divergences else EXIT_OK
    return aggregate, code


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            prepared = prepare(cfg)
        outdir = Path(args.out) if args.out else Path(cfg.outputs["directory"])
        _, code = _run_to_dir(cfg, prepared, outdir, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DsalabError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"outputs written to {outdir}")
    return code


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        sweep = cfg.data.get("sweep")
        if not sweep:
            raise ConfigError("config has no 'sweep.T_grid' section")
        T_grid = sweep["T_grid"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            base = prepare(cfg)   # constants reused across horizons
        outdir = Path(args.out) if args.out else Path(cfg.outputs["directory"])
        grads, conss, code = [], [], EXIT_OK
        for T in T_grid:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                prepared = prepare(cfg, T=T, constants=base.constants)
            agg, c = _run_to_dir(cfg, prepared, outdir / f"T_{T}", args, T=T)
            code = max(code, c)
            grads.append(agg["ensemble"]["mean"].get("integrated_grad_sq"))
            conss.append(agg["ensemble"]["consensus_lhs"])
        result = {"T_grid": T_grid, "grad_sq": grads, "consensus": conss}
        for name, vals in (("grad_sq", grads), ("consensus", conss)):
            if all(v is not None and v > 0 for v in vals) and len(vals) >= 3:
                fit = analysis.rate_fit(T_grid, vals)
                result[f"{name}_slope"] = fit.slope
                result[f"{name}_halfwidth"] = fit.half_width
        outdir.mkdir(parents=True, exist_ok=True)
        _json_dump(result, outdir / "sweep.json")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DsalabError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, indent=2, sort_keys=True))
    return code


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    rundir = Path(args.rundir)
    needed = [rundir / "config.json", rundir / "constants.json",
              rundir / "aggregate.json", rundir / "runs"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        print("missing artifacts: " + ", ".join(missing), file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = from_resolved(json.loads((rundir / "config.json").read_text()))
        constants = ConstantsBundle.load(rundir / "constants.json")
        aggregate = json.loads((rundir / "aggregate.json").read_text())
        horizon = int(aggregate["schedule"]["T"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            prepared = prepare(cfg, T=horizon, constants=constants)
    except (ConfigError, DsalabError, json.JSONDecodeError) as exc:
        print(f"cannot rebuild experiment: {exc}", file=sys.stderr)
        return EXIT_INPUT

    export_options = _record_options(cfg, args)
    diag_options = RecordOptions(diagnostics=True, checkpoints=export_options.checkpoints)
    master_seed = aggregate.get("master_seed", cfg.ensemble["master_seed"])
    children = np.random.SeedSequence(master_seed).spawn(cfg.ensemble["n_runs"])

    checks = []
    all_run_checks = []
    summaries = []
    for k, child in enumerate(children):
        record = run_dsa(prepared.oracle, prepared.mixing, prepared.steps, horizon,
                         child, prepared.theta0, diag_options)
        summaries.append(summarize_run(k, record, diag_options.checkpoint_indices(horizon)))
        stored = rundir / "runs" / f"run_{k}.csv"
        if not stored.exists():
            print(f"missing artifacts: {stored}", file=sys.stderr)
            return EXIT_INPUT
        regenerated = trajectory_csv_text(record, export_options)
        match = regenerated == stored.read_text()
        checks.append(CheckResult(
            f"recomputation-match run_{k}", match, True,
            0.0 if match else -1.0,
            "stored CSV equals deterministic re-simulation" if match
            else "stored CSV differs from deterministic re-simulation"))
        all_run_checks.append(analysis.verify_trajectory(record, constants))

    # worst margin per pathwise check across runs
    by_name = {}
    for run_checks in all_run_checks:
        for c in run_checks:
            prev = by_name.get(c.name)
            if prev is None or c.margin < prev.margin:
                by_name[c.name] = c
    checks.extend(by_name.values())

    certificate = None
    try:
        certificate = analysis.compute_certificate(constants, prepared.steps, horizon)
    except IncompleteConstantsError as exc:
        checks.append(CheckResult("certificate", False, False, 0.0,
                                  f"incomplete constants: {exc.missing}"))
    if certificate is not None:
        ensemble = aggregate_summaries(summaries, horizon, master_seed)
        checks.extend(analysis.verify_ensemble(ensemble, certificate))
        if not certificate.binding:
            print("NON-BINDING: schedule exceeds the certified step cap; "
                  "bound checks are informational")
    print(analysis.render_report(checks, title=f"verify {rundir}"))
    return EXIT_OK if analysis.overall_pass(checks) else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# bound


def cmd_bound(args) -> int:
    try:
        constants = ConstantsBundle.load(args.constants)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read constants: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        steps = make_step_schedule(args.a0, args.a1, args.T, cap_mode="off")
        constants = constants.with_schedule(steps.a_hat, steps.a_ratio)
        cert = analysis.compute_certificate(constants, steps, args.T,
                                            v0=args.v0, grad0=args.grad0)
    except IncompleteConstantsError as exc:
        print("incomplete constants bundle; missing: " + ", ".join(exc.missing),
              file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(cert.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsalab",
        description="simulate and certify decentralized stochastic approximation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs")
        p.add_argument("--diagnostics", action="store_true",
                       help="record perturbation splits and residuals")

    p = sub.add_parser("validate", help="certify the assumptions of a config")
    add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run the configured ensemble")
    add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the ensemble over the configured T grid")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="re-simulate a run directory and check bounds")
    p.add_argument("rundir", help="directory produced by 'run'")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--diagnostics", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bound", help="evaluate the certificate from a constants JSON")
    p.add_argument("--constants", required=True)
    p.add_argument("--a0", type=float, required=True)
    p.add_argument("--a1", type=float, default=None)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--v0", type=float, default=None)
    p.add_argument("--grad0", type=float, default=None)
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
