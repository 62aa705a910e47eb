"""Command-line surface: run experiments, inspect constants, verify
invariants, and fit rates on emitted output.

Subcommands
-----------
``run <config.toml>``
    Run the configured experiment, write any configured output files, and
    print an audit digest.  Exits 0 only when every enabled audit passed.
``constants <config.toml>``
    Resolve the schedule and print the derived-constants snapshot as JSON
    without running trials.
``verify <config.toml>``
    Run the invariant and inequality suite against the configured problem
    instance and print one PASS/FAIL line per check.  Exits 0 only when
    every check passed.
``rate <output.csv>``
    Fit a log-log decay rate on a previously emitted curve file.

Thread count for the Monte Carlo backends comes from the
``PLMARKOV_THREADS`` environment variable; no config key controls it.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from plmarkov.chain import stationary
from plmarkov.engine import StepSchedule, run, verify_zeta_bounds
from plmarkov.errors import NonPositiveValues, PlmarkovError
from plmarkov.harness import (
    ExperimentConfig,
    constants_snapshot,
    fit_rate,
    run_experiment,
    _resolve_schedule,
)
from plmarkov.poisson import solve_poisson, verify_v_bounds, verify_v_lipschitz
from plmarkov.problems import build_instance
from plmarkov.reports import CheckResult, all_passed
from plmarkov.theory import abc_verify

__all__ = ["main", "verification_suite"]

_REL_TOL = 1e-9


def _sandwich_checks(problem, trajectory) -> list[CheckResult]:
    """Check the gradient-energy sandwich along a run: the squared gradient
    norm at every iterate must be at least ``2*mu*gap`` (the gradient-
    dominance inequality) and at most ``2*L*gap`` (the smoothness
    corollary), with a small relative tolerance for accumulated rounding.
    """
    mu = problem.constants.mu
    L = problem.constants.L
    gaps = trajectory.suboptimality
    grads = trajectory.grad_norm_sq
    # Absolute floor: at (or numerically below) the minimizer both sides
    # vanish and the computed gap can round a hair negative, so compare
    # with a tolerance tied to the curve's magnitude, not just relatively.
    atol = 1e-12 * max(1.0, float(np.max(np.abs(gaps))))
    scale = np.maximum(np.abs(gaps), atol)
    lower_slack = (grads - 2.0 * mu * gaps + atol) / scale
    upper_slack = (2.0 * L * gaps - grads + atol) / scale
    k_low = int(np.argmin(lower_slack))
    k_up = int(np.argmin(upper_slack))
    return [
        CheckResult(
            name="gradient_dominance_along_run",
            passed=bool((lower_slack >= -_REL_TOL).all()),
            lhs=float(2.0 * mu * gaps[k_low]),
            rhs=float(grads[k_low]),
            detail=f"tightest step k={k_low} of {gaps.shape[0] - 1}",
        ),
        CheckResult(
            name="smoothness_corollary_along_run",
            passed=bool((upper_slack >= -_REL_TOL).all()),
            lhs=float(grads[k_up]),
            rhs=float(2.0 * L * gaps[k_up]),
            detail=f"tightest step k={k_up} of {gaps.shape[0] - 1}",
        ),
    ]


def _stationary_mean_check(problem, generator) -> CheckResult | None:
    if problem.chain is None or problem.grad_field is None:
        return None
    pi = stationary(problem.chain).weights
    worst = 0.0
    for _ in range(8):
        x = problem.x_star + generator.standard_normal(problem.dim)
        mean_grad = pi @ problem.grad_field(x)
        target = problem.gradient(x)
        err = float(np.linalg.norm(mean_grad - target))
        rel = err / max(1.0, float(np.linalg.norm(target)))
        worst = max(worst, rel)
    return CheckResult(
        name="stationary_mean_matches_gradient",
        passed=worst <= _REL_TOL,
        lhs=worst,
        rhs=_REL_TOL,
        detail="max relative error over 8 sampled points",
    )


def _poisson_checks(problem, generator) -> list[CheckResult]:
    if problem.chain is None or problem.grad_field is None:
        return []
    if not problem.tmix_certified:
        return []
    c = problem.constants
    x = problem.x_star + generator.standard_normal(problem.dim)
    sol = solve_poisson(problem.chain, problem.grad_field(x))
    delta_x = float(np.linalg.norm(x - problem.x_star))
    results = verify_v_bounds(sol, problem.tmix, c.A, c.B, c.C, c.L, delta_x)
    y = problem.x_star + 0.5 * generator.standard_normal(problem.dim)
    results.append(
        verify_v_lipschitz(
            problem.chain, problem.grad_field, x, y, problem.tmix, c.lip_g
        )
    )
    return results


def verification_suite(
    config: ExperimentConfig,
    *,
    sample_count: int = 2000,
    path_steps: int = 2000,
    seed: int = 0,
) -> list[CheckResult]:
    """Assemble and run the invariant checks for the configured instance.

    Always included: the product-weight bounds for the resolved schedule,
    the affine growth bounds on the gradient noise, and the gradient-energy
    sandwich along one simulated path.  When the instance carries a finite
    driving chain with a certified mixing window, the stationary-mean
    identity and the balance-equation norm bounds run as well.
    """
    problem = build_instance(config.problem)
    gain, k0 = _resolve_schedule(config, problem)
    schedule = StepSchedule(a=gain, K0=k0)
    results: list[CheckResult] = []
    results.extend(verify_zeta_bounds(schedule, problem.constants.mu, seed=seed))
    generator = np.random.default_rng(seed)
    results.extend(abc_verify(problem, sample_count, generator))
    trajectory = run(problem, schedule, path_steps, seed)
    results.extend(_sandwich_checks(problem, trajectory))
    stationary = _stationary_mean_check(problem, generator)
    if stationary is not None:
        results.append(stationary)
    results.extend(_poisson_checks(problem, generator))
    return results


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    summary = run_experiment(config)
    print(f"problem: {summary.constants['problem_kind']}")
    print(f"schedule: gain={summary.gain:.17g} k0={summary.k0:.17g}")
    print(
        f"trials: {config.trial_count} kept="
        f"{config.trial_count - len(summary.diverged_trials)} "
        f"horizon={config.horizon}"
    )
    if summary.diverged_trials:
        print(f"diverged trials: {list(summary.diverged_trials)}")
    if summary.rate is not None:
        r = summary.rate
        verdict = "pass" if r.passed else "FAIL"
        gate = verdict if config.audit_rate else "info"
        print(
            f"rate [{gate}]: slope={r.slope:.6g} r2={r.r_squared:.6g} "
            f"(fit window k >= {r.k_min})"
        )
    if summary.envelope is not None:
        e = summary.envelope
        verdict = "pass" if e.passed else "FAIL"
        print(
            f"envelope [{verdict}]: {e.violation_count}/{e.trial_count} violations "
            f"(fraction {e.fraction:.4g} <= threshold {e.threshold:.4g})"
        )
    if summary.expected is not None:
        m = summary.expected
        verdict = "pass" if m.passed else "FAIL"
        print(
            f"mean bound [{verdict}]: worst margin {m.worst_margin:.6g} at k={m.worst_k}"
        )
    if config.csv_path:
        print(f"wrote {config.csv_path}")
    if config.json_path:
        print(f"wrote {config.json_path}")
    ok = summary.all_audits_passed()
    print("all audits passed" if ok else "AUDIT FAILURE")
    return 0 if ok else 1


def _cmd_constants(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    print(json.dumps(constants_snapshot(config), indent=2))
    return 0


def _cmd_verify(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    results = verification_suite(
        config,
        sample_count=args.samples,
        path_steps=args.path_steps,
        seed=args.seed,
    )
    for result in results:
        print(result.line())
    ok = all_passed(results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def _cmd_rate(args) -> int:
    try:
        with open(args.csv, newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or args.column not in reader.fieldnames:
                print(
                    f"column {args.column!r} not found in {args.csv}",
                    file=sys.stderr,
                )
                return 2
            values = [float(row[args.column]) for row in reader]
    except OSError as exc:
        print(f"cannot read {args.csv}: {exc}", file=sys.stderr)
        return 2
    curve = np.asarray(values)
    try:
        slope, intercept, r_squared = fit_rate(curve, args.k_min)
    except NonPositiveValues as exc:
        print(f"cannot fit: {exc}", file=sys.stderr)
        return 2
    print(f"slope={slope:.17g}")
    print(f"intercept={intercept:.17g}")
    print(f"r_squared={r_squared:.17g}")
    print(f"fit window: k >= {args.k_min} ({curve.shape[0] - args.k_min} points)")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plmarkov",
        description=(
            "Simulation and verification lab for stochastic gradient descent "
            "with Markovian gradient noise on gradient-dominated objectives."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a TOML config")
    p_run.add_argument("config", help="path to the experiment config")
    p_run.set_defaults(func=_cmd_run)

    p_const = sub.add_parser(
        "constants", help="print the derived-constants snapshot as JSON"
    )
    p_const.add_argument("config", help="path to the experiment config")
    p_const.set_defaults(func=_cmd_constants)

    p_verify = sub.add_parser(
        "verify", help="run the invariant/inequality suite for a config"
    )
    p_verify.add_argument("config", help="path to the experiment config")
    p_verify.add_argument(
        "--samples", type=int, default=2000, help="points for the growth-bound scan"
    )
    p_verify.add_argument(
        "--path-steps", type=int, default=2000, help="steps for the simulated path"
    )
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=_cmd_verify)

    p_rate = sub.add_parser("rate", help="fit a decay rate on an emitted CSV")
    p_rate.add_argument("csv", help="path to a curve file written by `run`")
    p_rate.add_argument(
        "--k-min", type=int, default=100, help="first step of the fit window"
    )
    p_rate.add_argument(
        "--column",
        default="mean_delta",
        help="curve column to fit (default mean_delta)",
    )
    p_rate.set_defaults(func=_cmd_rate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlmarkovError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
