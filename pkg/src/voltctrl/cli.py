"""Command-line front end.

Subcommands: ``run`` (closed-loop simulation), ``oracle`` (centralized
reference solution with its optimality report), ``certify`` (step-size
certificate and advisory check of the configured steps), ``sweep``
(aggregate a batch of configs into one metrics table) and ``validate``
(network file lint). Exit codes: 0 success, 1 run failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .certificate import CertificateError, certificate_to_dict, step_size_certificate
from .config import CONFIG_SCHEMA_VERSION, ConfigError, emit_config, load_config
from .controller import check_strong_convexity
from .network import TopologyError, load_network, sensitivity_matrices
from .oracle import InfeasibleProblem, OracleError, VoltageProblem, reference_solve
from .powerflow import PowerFlowError, make_vpar
from .sim import run as run_scenario
from .sim import write_trace_csv, write_trace_json

RESULT_SCHEMA_VERSION = 1


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _common_overrides(args):
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        overrides["output_dir"] = args.output_dir
    return overrides


def _problem_from_config(cfg, mats):
    scenario = cfg.scenario
    if not scenario.profiles.static:
        raise ConfigError("the oracle needs a static profile (one loading condition)")
    vpar = make_vpar(cfg.net, mats, *scenario.profiles.at(0))
    if scenario.controllable is not None:
        idx = np.asarray(scenario.controllable, dtype=int) - 1
        d_eff = cfg.params.d if scenario.include_coupling_cost else 0.0
        return VoltageProblem(
            X=mats.X[np.ix_(idx, idx)],
            vpar=vpar[idx],
            limits=cfg.limits.restrict(np.asarray(scenario.controllable)),
            cost=cfg.cost.restrict(np.asarray(scenario.controllable)),
            d=d_eff,
        )
    return VoltageProblem(X=mats.X, vpar=vpar, limits=cfg.limits, cost=cfg.cost, d=cfg.params.d)


def _convergence_tick(trace, tol=1e-6):
    if trace.horizon < 2:
        return None
    step = np.abs(np.diff(trace.q, axis=0)).max(axis=1)
    settled = step < tol
    # last tick after which every recorded step stays below tol
    bad = np.flatnonzero(~settled)
    if bad.size == 0:
        return 0
    if bad[-1] == len(step) - 1:
        return None
    return int(bad[-1] + 1)


def _certificate_block(cfg, mats):
    d_eff = cfg.params.d
    if cfg.scenario.controllable is not None and not cfg.scenario.include_coupling_cost:
        d_eff = 0.0
    if cfg.scenario.controllable is not None:
        idx = np.asarray(cfg.scenario.controllable, dtype=int) - 1
        X = mats.X[np.ix_(idx, idx)]
        cost = cfg.cost.restrict(np.asarray(cfg.scenario.controllable))
        from .network import reduce_controllable

        cset = reduce_controllable(cfg.net, mats, cfg.scenario.controllable)

        class _SubMats:
            def __init__(self, X, Y):
                self.X = X
                self._y = Y

            def y_dense(self):
                return self._y

        sub = _SubMats(X, cset.Y_C)
        mu, ell = check_strong_convexity(cost, d_eff, X)
        cert = step_size_certificate(sub, mu, ell, cfg.params.c, cfg.params.beta / cfg.params.alpha, alpha=cfg.params.alpha)
    else:
        mu, ell = check_strong_convexity(cfg.cost, d_eff, mats.X)
        cert = step_size_certificate(
            mats, mu, ell, cfg.params.c, cfg.params.beta / cfg.params.alpha, alpha=cfg.params.alpha
        )
    block = certificate_to_dict(cert)
    block["user_alpha"] = cfg.params.alpha
    block["user_gamma"] = cfg.params.gamma
    block["alpha_within_bound"] = bool(cfg.params.alpha < cert.alpha_max)
    block["gamma_within_bound"] = bool(
        np.isfinite(cert.gamma_max) and cfg.params.gamma < cert.gamma_max
    )
    if not block["alpha_within_bound"] or not block["gamma_within_bound"]:
        block["advisory"] = (
            "configured step sizes exceed the theoretical bound; the bound is "
            "conservative and larger trial values are routinely used"
        )
    return block


def cmd_run(args):
    cfg = load_config(args.config, overrides=_common_overrides(args))
    mats = sensitivity_matrices(cfg.net)
    os.makedirs(cfg.output_dir, exist_ok=True)
    t0 = time.perf_counter()
    trace = run_scenario(cfg.net, mats, cfg.scenario, cfg.params, cfg.cost, cfg.limits)
    runtime = time.perf_counter() - t0

    write_trace_csv(trace, cfg.limits, os.path.join(cfg.output_dir, "summary.csv"))
    write_trace_json(
        trace, cfg.limits, os.path.join(cfg.output_dir, "trace.json"), full=args.full_trace
    )
    metrics = {
        "final_cost": float(trace.cost[-1]) if trace.horizon else None,
        "max_violation": trace.max_violation(cfg.limits),
        "convergence_tick": _convergence_tick(trace),
        "capacity_ok": trace.capacity_ok(cfg.limits),
        "final_q": trace.final.q.tolist(),
        "runtime_s": runtime,
    }
    result = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "config_schema_version": CONFIG_SCHEMA_VERSION,
        "config": cfg.raw,
        "metrics": metrics,
        "certificate": _certificate_block(cfg, mats),
    }
    with open(os.path.join(cfg.output_dir, "result.yaml"), "w") as fh:
        fh.write(emit_config(result))
    print(f"run complete: {trace.horizon} ticks, final cost {metrics['final_cost']}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_oracle(args):
    cfg = load_config(args.config, overrides=_common_overrides(args))
    mats = sensitivity_matrices(cfg.net)
    os.makedirs(cfg.output_dir, exist_ok=True)
    problem = _problem_from_config(cfg, mats)
    out_path = os.path.join(cfg.output_dir, "oracle.yaml")
    try:
        sol = reference_solve(problem)
    except InfeasibleProblem as exc:
        report = {
            "schema_version": RESULT_SCHEMA_VERSION,
            "feasible": False,
            "margin": float(exc.margin),
            "message": str(exc),
            "config": cfg.raw,
        }
        with open(out_path, "w") as fh:
            fh.write(emit_config(report))
        print(f"instance infeasible: {exc}")
        return 1
    report = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "feasible": True,
        "q_star": sol.q.tolist(),
        "objective": float(sol.objective),
        "multipliers": {
            "lam_low": sol.lam_low.tolist(),
            "lam_up": sol.lam_up.tolist(),
            "xi_up": sol.xi_up.tolist(),
            "xi_low": sol.xi_low.tolist(),
        },
        "kkt": {
            "stationarity": sol.kkt.stationarity,
            "primal": sol.kkt.primal,
            "dual": sol.kkt.dual,
            "slackness": sol.kkt.slackness,
            "total": sol.kkt.total,
        },
        "config": cfg.raw,
    }
    with open(out_path, "w") as fh:
        fh.write(emit_config(report))
    print(f"q_star = {sol.q.tolist()}")
    print(f"KKT total residual {sol.kkt.total:.3e}; report in {out_path}")
    return 0


def cmd_certify(args):
    cfg = load_config(args.config, overrides=_common_overrides(args))
    mats = sensitivity_matrices(cfg.net)
    os.makedirs(cfg.output_dir, exist_ok=True)
    block = _certificate_block(cfg, mats)
    out_path = os.path.join(cfg.output_dir, "certificate.yaml")
    with open(out_path, "w") as fh:
        fh.write(
            emit_config(
                {
                    "schema_version": RESULT_SCHEMA_VERSION,
                    "certificate": block,
                    "config": cfg.raw,
                }
            )
        )
    print(f"alpha_max {block['alpha_max']:.6e}, rho(alpha) {block['rho_at_alpha']:.9f}")
    print(f"gamma_max {block['gamma_max']:.6e}")
    if "advisory" in block:
        print(f"advisory: exceeds theoretical bound ({out_path})")
    else:
        print(f"configured steps sit inside the certified region ({out_path})")
    return 0


def cmd_sweep(args):
    paths = sorted(p for pattern in args.configs for p in glob.glob(pattern))
    if not paths:
        raise ConfigError("sweep needs at least one config (empty glob)")
    rows = []
    failures = 0
    for path in paths:
        row = {"config": path}
        t0 = time.perf_counter()
        try:
            cfg = load_config(path)
            mats = sensitivity_matrices(cfg.net)
            trace = run_scenario(cfg.net, mats, cfg.scenario, cfg.params, cfg.cost, cfg.limits)
            tick = _convergence_tick(trace)
            row.update(
                converged=tick is not None,
                final_gap=float(np.abs(np.diff(trace.q[-2:], axis=0)).max()) if trace.horizon >= 2 else 0.0,
                max_violation=trace.max_violation(cfg.limits),
                runtime_s=time.perf_counter() - t0,
                error="",
            )
        except Exception as exc:  # noqa: BLE001 - per-row failures are data
            failures += 1
            row.update(
                converged=False,
                final_gap=float("nan"),
                max_violation=float("nan"),
                runtime_s=time.perf_counter() - t0,
                error=f"{type(exc).__name__}: {exc}",
            )
        rows.append(row)
    fields = ["config", "converged", "final_gap", "max_violation", "runtime_s", "error"]
    print(",".join(fields))
    for row in rows:
        print(",".join(str(row[f]) for f in fields))
    if args.output:
        import csv

        with open(args.output, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    return 1 if failures else 0


def cmd_validate(args):
    try:
        net = load_network(args.network)
    except (TopologyError, FileNotFoundError) as exc:
        print(f"invalid network: {exc}")
        return 2
    mats = sensitivity_matrices(net)
    eigs = np.linalg.eigvalsh(mats.X)
    print(
        f"ok: {net.n} buses, {len(net.lines)} lines, v0={net.v0}, "
        f"X eigenvalues in [{eigs[0]:.4g}, {eigs[-1]:.4g}]"
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voltctrl",
        description="Distributed feedback voltage control: simulate, certify and verify.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a run config (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output-dir", default=None, help="override the output directory")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override any config key by dotted path (repeatable)",
        )
        p.set_defaults(func=func)
        return p

    p_run = add_config_command("run", cmd_run, "simulate one closed-loop scenario")
    p_run.add_argument("--full-trace", action="store_true", help="embed per-bus series in trace.json")
    add_config_command("oracle", cmd_oracle, "solve the instance centrally and certify it")
    add_config_command("certify", cmd_certify, "emit the step-size certificate")

    p_sweep = sub.add_parser("sweep", help="run a batch of configs and tabulate metrics")
    p_sweep.add_argument("configs", nargs="+", help="config paths or globs")
    p_sweep.add_argument("--output", default=None, help="also write the table as CSV")
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="lint a network description file")
    p_val.add_argument("network", help="path to a network file (YAML)")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TopologyError, yaml.YAMLError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (PowerFlowError, OracleError, CertificateError, InfeasibleProblem) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
