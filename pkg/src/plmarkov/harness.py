"""Monte Carlo experiment runner, rate fitting, and envelope auditing.

An experiment is a declarative config: a problem family, a stepsize
schedule, a trial budget, and a set of audits.  :func:`run_experiment`
materializes the problem, runs the trials through the fast backends,
aggregates mean and quantile curves, and evaluates the enabled audits —
the fitted decay rate of the mean curve, the uniform-in-time
high-probability envelope, and the per-step in-expectation bound.  Every
number in the summary is a pure function of the config (seed included):
trials are split from one counter-based seed sequence and reduced in trial
index order, so thread counts and scheduling cannot change any output
byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from plmarkov.engine import StepSchedule, run
from plmarkov.errors import (
    HypothesisViolated,
    InfeasibleK0,
    InvalidConfig,
    IoFailure,
    NonFinite,
    NonPositiveValues,
    TooFewTrials,
)
from plmarkov.kernels import run_trials, trial_seeds
from plmarkov.problems import ProblemInstance, build_instance
from plmarkov.theory import (
    TheoryConstants,
    TheoryInputs,
    expected_bound,
    expected_bound_floor,
    hp_envelope,
    k0_lower_bound,
)

__all__ = [
    "ExperimentConfig",
    "ExperimentSummary",
    "EnvelopeReport",
    "ExpectedReport",
    "RateReport",
    "run_experiment",
    "fit_rate",
    "envelope_audit",
    "expected_audit",
    "quantile_curve",
    "constants_snapshot",
    "emit",
]

_AUTO_GAIN_MARGIN = 2.1


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment.

    ``gain`` is the schedule's numerator (or ``"auto"`` for a small margin
    above the curvature threshold); ``k0`` is the schedule offset, a
    number or ``"auto"`` (high-probability feasibility floor) or
    ``"auto-expected"`` (in-expectation feasibility floor).  Audits are
    opt-in; the summary always carries whatever curves and fits could be
    computed.
    """

    problem: dict
    gain: float | str = "auto"
    k0: float | str = "auto"
    horizon: int = 1000
    trial_count: int = 1
    delta: float = 0.5
    seed: int = 0
    record_noise: bool = False
    audit_envelope: bool = False
    audit_expected: bool = False
    audit_rate: bool = False
    slope_min: float = -1.25
    slope_max: float = -0.80
    r2_min: float = 0.98
    fit_k_min: int | None = None
    csv_path: str | None = None
    json_path: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.problem, dict) or "kind" not in self.problem:
            raise InvalidConfig("problem section must be a mapping with a 'kind' key")
        if self.horizon < 10:
            raise InvalidConfig(f"horizon must be >= 10, got {self.horizon}")
        if self.trial_count < 1:
            raise InvalidConfig(f"trial_count must be >= 1, got {self.trial_count}")
        if not (0.0 < self.delta < 1.0):
            raise InvalidConfig(f"delta must lie in (0, 1), got {self.delta}")
        if isinstance(self.gain, str) and self.gain != "auto":
            raise InvalidConfig(f"gain must be a number or 'auto', got {self.gain!r}")
        if isinstance(self.k0, str) and self.k0 not in ("auto", "auto-expected"):
            raise InvalidConfig(
                f"k0 must be a number, 'auto', or 'auto-expected', got {self.k0!r}"
            )

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        """Build from a nested mapping with sections ``problem``,
        ``schedule``, ``run``, ``audit``, and ``output``."""
        if "problem" not in raw:
            raise InvalidConfig("config needs a [problem] section")
        schedule = raw.get("schedule", {})
        run_section = raw.get("run", {})
        audit = raw.get("audit", {})
        output = raw.get("output", {})
        gain = schedule.get("a", schedule.get("gain", "auto"))
        k0 = schedule.get("K0", schedule.get("k0", "auto"))
        return cls(
            problem=dict(raw["problem"]),
            gain=gain,
            k0=k0,
            horizon=int(run_section.get("horizon", 1000)),
            trial_count=int(run_section.get("trials", 1)),
            delta=float(run_section.get("delta", 0.5)),
            seed=int(run_section.get("seed", 0)),
            record_noise=bool(run_section.get("record_noise", False)),
            audit_envelope=bool(audit.get("envelope", False)),
            audit_expected=bool(audit.get("expected", False)),
            audit_rate=bool(audit.get("rate", False)),
            slope_min=float(audit.get("slope_min", -1.25)),
            slope_max=float(audit.get("slope_max", -0.80)),
            r2_min=float(audit.get("r2_min", 0.98)),
            fit_k_min=(
                int(audit["fit_k_min"]) if "fit_k_min" in audit else None
            ),
            csv_path=output.get("csv"),
            json_path=output.get("json"),
        )

    @classmethod
    def from_toml(cls, path: str) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        try:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfig(f"malformed config {path}: {exc}") from exc
        return cls.from_mapping(raw)

    def as_dict(self) -> dict:
        record = dataclasses.asdict(self)
        return record


@dataclass(frozen=True)
class RateReport:
    """Log-log fit of the mean curve plus the pass verdict."""

    slope: float
    intercept: float
    r_squared: float
    k_min: int
    passed: bool

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EnvelopeReport:
    """Uniform-in-time envelope audit over a bundle of trajectories."""

    trial_count: int
    violation_count: int
    fraction: float
    threshold: float
    delta: float
    passed: bool
    violating_trials: tuple[int, ...] = ()

    def as_dict(self) -> dict:
        record = dataclasses.asdict(self)
        record["violating_trials"] = list(self.violating_trials)
        return record


@dataclass(frozen=True)
class ExpectedReport:
    """Mean-curve domination audit: mean + 3 SE under the expected bound."""

    worst_margin: float
    worst_k: int
    passed: bool

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ExperimentSummary:
    """Aggregated outcome of one experiment; immutable and serializable."""

    config: dict
    gain: float
    k0: float
    constants: dict
    mean_delta: np.ndarray
    quantile_delta: np.ndarray | None
    hp_envelope: np.ndarray | None
    expected_bound: np.ndarray | None
    rate: RateReport | None
    envelope: EnvelopeReport | None
    expected: ExpectedReport | None
    diverged_trials: tuple[int, ...] = ()

    @property
    def horizon(self) -> int:
        return int(self.mean_delta.shape[0]) - 1

    def all_audits_passed(self) -> bool:
        """True when every audit enabled in the config passed (vacuously
        true when none were enabled; informational reports do not gate)."""
        checks = []
        if self.config.get("audit_rate"):
            checks.append(self.rate)
        if self.config.get("audit_envelope"):
            checks.append(self.envelope)
        if self.config.get("audit_expected"):
            checks.append(self.expected)
        return all(r is not None and r.passed for r in checks)

    def to_json_dict(self) -> dict:
        def curve(arr: np.ndarray | None) -> list | None:
            return None if arr is None else [float(v) for v in arr]

        return {
            "config": self.config,
            "gain": self.gain,
            "k0": self.k0,
            "constants": self.constants,
            "mean_delta": curve(self.mean_delta),
            "quantile_delta": curve(self.quantile_delta),
            "hp_envelope": curve(self.hp_envelope),
            "expected_bound": curve(self.expected_bound),
            "rate": None if self.rate is None else self.rate.as_dict(),
            "envelope": None if self.envelope is None else self.envelope.as_dict(),
            "expected": None if self.expected is None else self.expected.as_dict(),
            "diverged_trials": list(self.diverged_trials),
            "all_audits_passed": self.all_audits_passed(),
        }


def fit_rate(curve, k_min: int) -> tuple[float, float, float]:
    """Ordinary least squares of ``log(curve[k])`` on ``log(k)`` over
    ``k >= k_min``; returns ``(slope, intercept, r_squared)``.

    Raises :class:`~plmarkov.errors.NonPositiveValues` if the fit window
    contains a nonpositive value.
    """
    values = np.asarray(curve, dtype=np.float64)
    if values.ndim != 1:
        raise InvalidConfig("curve must be one-dimensional")
    if k_min < 1:
        raise InvalidConfig(f"k_min must be >= 1, got {k_min}")
    if values.shape[0] - k_min < 2:
        raise InvalidConfig(
            f"need at least 2 points beyond k_min={k_min}, curve has {values.shape[0]}"
        )
    window = values[k_min:]
    if not (np.isfinite(window).all() and (window > 0.0).all()):
        raise NonPositiveValues(
            f"curve must be positive and finite for k >= {k_min}"
        )
    x = np.log(np.arange(k_min, values.shape[0], dtype=np.float64))
    y = np.log(window)
    design = np.column_stack([x, np.ones_like(x)])
    coeffs, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    slope, intercept = float(coeffs[0]), float(coeffs[1])
    predicted = design @ coeffs
    ss_res = float(((y - predicted) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    # A constant window has no variance to explain; in floating point the
    # sums land at rounding-noise scale instead of exactly zero, so gate on
    # a noise floor rather than equality.
    noise_floor = y.size * (16.0 * np.finfo(np.float64).eps * max(1.0, float(np.abs(y).max()))) ** 2
    if ss_tot <= noise_floor:
        r_squared = 1.0 if ss_res <= noise_floor else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return slope, intercept, r_squared


def quantile_curve(trajectories, q: float) -> np.ndarray:
    """Per-step nearest-rank ``q``-quantile across trajectories.

    Requires at least 20 trajectories (order statistics below that carry
    no usable resolution at the deltas this laboratory audits).
    """
    if not (0.0 < q < 1.0):
        raise InvalidConfig(f"quantile level must lie in (0, 1), got {q}")
    curves = np.asarray(trajectories, dtype=np.float64)
    if curves.ndim != 2:
        raise InvalidConfig("trajectories must form a 2-D (trial, step) array")
    n = curves.shape[0]
    if n < 20:
        raise TooFewTrials(f"need at least 20 trajectories, got {n}")
    rank = max(1, math.ceil(q * n))
    ordered = np.sort(curves, axis=0)
    return ordered[rank - 1].copy()


def _envelope_values(constants: TheoryConstants, horizon: int) -> np.ndarray:
    values = np.empty(horizon + 1)
    values[0] = constants.Delta0
    if horizon >= 1:
        values[1:] = hp_envelope(constants, np.arange(1, horizon + 1))
    return values


def envelope_audit(trajectories, constants: TheoryConstants) -> EnvelopeReport:
    """Audit the uniform-in-time high-probability envelope.

    A trajectory violates when its gap exceeds the envelope at ANY step
    ``k >= 1`` (the uniform event, never per-step marginal counting); the
    audit passes when the violating fraction is at most
    ``delta + 2*sqrt(delta*(1-delta)/trials)``.

    Raises :class:`~plmarkov.errors.InfeasibleK0` when the constants sit
    below the feasibility threshold the guarantee needs.
    """
    curves = np.asarray(trajectories, dtype=np.float64)
    if curves.ndim != 2 or curves.shape[1] < 2:
        raise InvalidConfig("trajectories must form a 2-D (trial, step) array")
    horizon = curves.shape[1] - 1
    envelope = _envelope_values(constants, horizon)
    violated = (curves[:, 1:] > envelope[1:]).any(axis=1)
    count = int(violated.sum())
    trials = curves.shape[0]
    fraction = count / trials
    delta = constants.delta
    threshold = delta + 2.0 * math.sqrt(delta * (1.0 - delta) / trials)
    return EnvelopeReport(
        trial_count=trials,
        violation_count=count,
        fraction=fraction,
        threshold=threshold,
        delta=delta,
        passed=fraction <= threshold,
        violating_trials=tuple(int(i) for i in np.flatnonzero(violated)),
    )


def expected_audit(trajectories, constants: TheoryConstants) -> ExpectedReport:
    """Audit mean-curve domination: mean + 3 standard errors at or below
    the in-expectation bound at every step ``k >= 1``."""
    curves = np.asarray(trajectories, dtype=np.float64)
    if curves.ndim != 2 or curves.shape[1] < 2:
        raise InvalidConfig("trajectories must form a 2-D (trial, step) array")
    trials, steps = curves.shape
    horizon = steps - 1
    ks = np.arange(1, horizon + 1)
    bound = expected_bound(constants, ks)
    mean = curves[:, 1:].mean(axis=0)
    if trials > 1:
        stderr = curves[:, 1:].std(axis=0, ddof=1) / math.sqrt(trials)
    else:
        stderr = np.zeros(horizon)
    margin = bound - (mean + 3.0 * stderr)
    worst = int(np.argmin(margin))
    return ExpectedReport(
        worst_margin=float(margin[worst]),
        worst_k=int(ks[worst]),
        passed=bool((margin >= 0.0).all()),
    )


def _resolve_schedule(
    config: ExperimentConfig, problem: ProblemInstance
) -> tuple[float, float]:
    mu = problem.constants.mu
    gain = _AUTO_GAIN_MARGIN / mu if config.gain == "auto" else float(config.gain)
    if isinstance(config.k0, str):
        provisional = TheoryInputs.from_problem(problem, gain, 1.0, config.delta)
        if config.k0 == "auto":
            k0 = float(k0_lower_bound(provisional))
        else:
            k0 = float(expected_bound_floor(provisional))
        k0 = max(k0, 1.0)
    else:
        k0 = float(config.k0)
    return gain, k0


def _snapshot(problem: ProblemInstance, constants: TheoryConstants) -> dict:
    return {
        "problem_kind": str(problem.kind),
        "tmix": int(problem.tmix),
        "tmix_certified": bool(problem.tmix_certified),
        "theory": {
            key: float(val)
            for key, val in constants.as_dict().items()
            if not isinstance(val, dict)
        },
        "hypotheses": {key: bool(val) for key, val in constants.hypotheses().items()},
    }


def constants_snapshot(config: ExperimentConfig) -> dict:
    """Resolve the schedule and return the constants snapshot the summary
    embeds — gain, offset, derived constants, hypothesis flags — without
    running any trials."""
    problem = build_instance(config.problem)
    gain, k0 = _resolve_schedule(config, problem)
    inputs = TheoryInputs.from_problem(problem, gain, k0, config.delta)
    constants = TheoryConstants.from_inputs(inputs)
    return {"gain": gain, "k0": k0, **_snapshot(problem, constants)}


def _run_curves(
    config: ExperimentConfig, problem: ProblemInstance, schedule: StepSchedule
) -> np.ndarray:
    if not config.record_noise:
        return run_trials(
            problem, schedule, config.horizon, config.trial_count, config.seed
        )
    children = trial_seeds(config.seed, config.trial_count)
    out = np.empty((config.trial_count, config.horizon + 1))
    for i in range(config.trial_count):
        try:
            traj = run(problem, schedule, config.horizon, children[i], record_noise=True)
            out[i] = traj.suboptimality
        except NonFinite:
            out[i] = np.nan
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentSummary:
    """Run the configured experiment and aggregate its summary.

    Deterministic given the config.  Diverged trials (non-finite values)
    are excluded from every aggregate and listed in the summary; the run
    aborts with :class:`~plmarkov.errors.NonFinite` when more than 1% of
    trials diverge.
    """
    problem = build_instance(config.problem)
    gain, k0 = _resolve_schedule(config, problem)
    mu = problem.constants.mu
    if gain * mu < 2.0 * (1.0 - 1e-12):
        raise HypothesisViolated(
            f"schedule gain {gain} is below the curvature threshold {2.0 / mu}"
        )
    schedule = StepSchedule(a=gain, K0=k0)

    k_min = (
        config.fit_k_min
        if config.fit_k_min is not None
        else max(100, math.ceil(5 * k0))
    )
    if config.audit_rate and k_min >= config.horizon - 1:
        raise InvalidConfig(
            f"rate audit needs horizon > fit window start {k_min}, got {config.horizon}"
        )

    curves = _run_curves(config, problem, schedule)
    finite = np.isfinite(curves).all(axis=1)
    diverged = tuple(int(i) for i in np.flatnonzero(~finite))
    if diverged:
        fraction = len(diverged) / config.trial_count
        if fraction > 0.01:
            raise NonFinite(
                f"{len(diverged)} of {config.trial_count} trials diverged "
                f"(trials {list(diverged)})"
            )
    kept = curves[finite]
    mean_curve = kept.mean(axis=0)

    quantile = None
    if kept.shape[0] >= 20:
        quantile = quantile_curve(kept, 1.0 - config.delta)

    inputs = TheoryInputs.from_problem(problem, gain, k0, config.delta)
    constants = TheoryConstants.from_inputs(inputs)

    envelope_curve = None
    try:
        envelope_curve = _envelope_values(constants, config.horizon)
    except InfeasibleK0:
        pass
    expected_curve = None
    try:
        expected_curve = np.asarray(
            expected_bound(constants, np.arange(config.horizon + 1)),
            dtype=np.float64,
        )
    except InfeasibleK0:
        pass

    rate_report = None
    if k_min < config.horizon - 1:
        try:
            slope, intercept, r_squared = fit_rate(mean_curve, k_min)
            rate_report = RateReport(
                slope=slope,
                intercept=intercept,
                r_squared=r_squared,
                k_min=k_min,
                passed=(
                    config.slope_min <= slope <= config.slope_max
                    and r_squared >= config.r2_min
                ),
            )
        except NonPositiveValues:
            if config.audit_rate:
                raise

    envelope_report = envelope_audit(kept, constants) if config.audit_envelope else None
    expected_report = expected_audit(kept, constants) if config.audit_expected else None

    snapshot = _snapshot(problem, constants)

    summary = ExperimentSummary(
        config=config.as_dict(),
        gain=gain,
        k0=k0,
        constants=snapshot,
        mean_delta=mean_curve,
        quantile_delta=quantile,
        hp_envelope=envelope_curve,
        expected_bound=expected_curve,
        rate=rate_report,
        envelope=envelope_report,
        expected=expected_report,
        diverged_trials=diverged,
    )

    if config.csv_path:
        emit(summary, "csv", config.csv_path)
    if config.json_path:
        emit(summary, "json", config.json_path)
    return summary


def _format_value(value: float) -> str:
    return f"{value:.17g}"


def emit(summary: ExperimentSummary, format: str, path: str) -> None:
    """Write the summary to ``path`` as ``csv`` (per-step curves) or
    ``json`` (full record with config echo and constants snapshot).

    Output is byte-identical across repeat runs of the same config.
    """
    if format == "csv":
        lines = ["k,mean_delta,q_delta,hp_envelope,expected_bound"]
        mean = summary.mean_delta
        steps = mean.shape[0]

        def column(arr: np.ndarray | None, k: int) -> str:
            return "nan" if arr is None else _format_value(float(arr[k]))

        for k in range(steps):
            lines.append(
                ",".join(
                    (
                        str(k),
                        _format_value(float(mean[k])),
                        column(summary.quantile_delta, k),
                        column(summary.hp_envelope, k),
                        column(summary.expected_bound, k),
                    )
                )
            )
        payload = "\n".join(lines) + "\n"
    elif format == "json":
        payload = json.dumps(summary.to_json_dict(), indent=2, sort_keys=False) + "\n"
    else:
        raise InvalidConfig(f"format must be 'csv' or 'json', got {format!r}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
