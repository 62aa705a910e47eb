"""Stochastic-gradient iteration with inverse-time stepsizes.

The engine runs the raw recursion ``x_{k+1} = x_k - alpha_k * G_k`` where
``G_k`` combines a state-conditional gradient with an optional zero-mean
shock, records the full trajectory, and (optionally) splits each step's
noise into its telescoping-martingale and boundary-correction parts via the
chain's balance equation.  It also houses the product weights
``zeta_{m,n} = prod_{j=m}^{n} (1 - mu * alpha_j)`` and numerical
verification of the inequalities they satisfy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from plmarkov.chain import generator_from
from plmarkov.errors import (
    DimensionMismatch,
    HypothesisViolated,
    InvalidConfig,
    IoFailure,
    NonFinite,
)
from plmarkov.poisson import decompose_step, solve_poisson
from plmarkov.problems.base import ProblemInstance
from plmarkov.reports import CheckResult

__all__ = [
    "StepSchedule",
    "stepsize",
    "zeta",
    "weighted_zeta_sums",
    "verify_zeta_bounds",
    "NoiseDecomposition",
    "Trajectory",
    "run",
    "export_trajectory",
]

_FP_SLACK = 1e-9


@dataclass(frozen=True)
class StepSchedule:
    """Stepsize family ``alpha_k = a / (k + K0)`` with ``a, K0 > 0``."""

    a: float
    K0: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.a) and self.a > 0.0):
            raise InvalidConfig(f"schedule gain a must be positive and finite, got {self.a!r}")
        if not (np.isfinite(self.K0) and self.K0 > 0.0):
            raise InvalidConfig(f"schedule offset K0 must be positive and finite, got {self.K0!r}")

    def stepsize(self, k: int) -> float:
        """Stepsize used at iteration ``k`` (0-based)."""
        return self.a / (k + self.K0)


def stepsize(schedule: StepSchedule, k: int) -> float:
    """Stepsize ``a / (k + K0)`` at iteration ``k``."""
    if k < 0:
        raise InvalidConfig(f"iteration index must be nonnegative, got {k}")
    return schedule.stepsize(k)


def zeta(schedule: StepSchedule, mu: float, m: int, n: int) -> float:
    """Product ``prod_{j=m}^{n} (1 - mu * alpha_j)``; equals 1 when ``n < m``."""
    if n < m:
        return 1.0
    j = np.arange(m, n + 1, dtype=float)
    return float(np.prod(1.0 - mu * schedule.a / (j + schedule.K0)))


def weighted_zeta_sums(schedule: StepSchedule, mu: float, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Running sums ``S1(k) = sum_l alpha_l * zeta_{l+1,k-1}`` and the
    squared-stepsize analogue ``S2(k)``, for ``k = 1 .. k_max``.

    Both satisfy the one-step recursion ``S(k) = (1 - mu*alpha_{k-1}) * S(k-1)
    + w_{k-1}`` with weight ``alpha`` (resp. ``alpha**2``), which evaluates the
    sums exactly without forming any long product.
    """
    if k_max < 1:
        raise InvalidConfig(f"k_max must be >= 1, got {k_max}")
    ks = np.arange(k_max, dtype=float)
    alphas = schedule.a / (ks + schedule.K0)
    shrink = 1.0 - mu * alphas
    s1 = np.empty(k_max)
    s2 = np.empty(k_max)
    acc1 = 0.0
    acc2 = 0.0
    for i in range(k_max):
        acc1 = shrink[i] * acc1 + alphas[i]
        acc2 = shrink[i] * acc2 + alphas[i] * alphas[i]
        s1[i] = acc1
        s2[i] = acc2
    return s1, s2


def _check_pair_bounds(
    schedule: StepSchedule,
    mu: float,
    pairs_m: np.ndarray,
    pairs_n: np.ndarray,
) -> tuple[CheckResult, CheckResult]:
    """Evaluate the two closed-form upper bounds on ``zeta_{m,n}``.

    The plain power bound holds for all ``m <= n``; the shifted variant (with
    the extra factor ``e``) additionally needs ``m >= 1``.
    """
    a, K0 = schedule.a, schedule.K0
    power = mu * a
    worst_plain = (math.inf, -1, -1, 0.0, 0.0)
    worst_shift = (math.inf, -1, -1, 0.0, 0.0)
    for m, n in zip(pairs_m, pairs_n):
        j = np.arange(m, n + 1, dtype=float)
        value = float(np.prod(1.0 - mu * a / (j + K0)))
        rhs_plain = ((m + K0) / (n + K0 + 1.0)) ** power
        slack = rhs_plain - value
        if slack < worst_plain[0]:
            worst_plain = (slack, m, n, value, rhs_plain)
        if m >= 1:
            rhs_shift = math.e * ((m + K0 - 1.0) / (n + K0 + 1.0)) ** power
            slack = rhs_shift - value
            if slack < worst_shift[0]:
                worst_shift = (slack, m, n, value, rhs_shift)
    _, m, n, lhs, rhs = worst_plain
    plain = CheckResult(
        name="zeta_power_bound",
        passed=lhs <= rhs * (1.0 + _FP_SLACK) + 1e-300,
        lhs=lhs,
        rhs=rhs,
        detail=f"tightest pair m={m}, n={n}",
    )
    _, m, n, lhs, rhs = worst_shift
    shifted = CheckResult(
        name="zeta_power_bound_shifted",
        passed=lhs <= rhs * (1.0 + _FP_SLACK) + 1e-300,
        lhs=lhs,
        rhs=rhs,
        detail=f"tightest pair m={m}, n={n}",
    )
    return plain, shifted


def verify_zeta_bounds(
    schedule: StepSchedule,
    mu: float,
    trials: int = 64,
    *,
    pair_limit: int = 200,
    sum_horizon: int = 10_000,
    seed: int = 0,
) -> list[CheckResult]:
    """Numerically check the closed-form bounds on the product weights.

    Exhaustively scans all pairs ``m <= n <= pair_limit`` plus ``trials``
    random pairs with large offsets, then checks the weighted-sum bounds for
    every ``k <= sum_horizon`` and the stepwise difference bound.  Requires
    the hypotheses ``K0 >= mu * a`` and ``mu * a > 1``.
    """
    a, K0 = schedule.a, schedule.K0
    if mu <= 0.0 or not np.isfinite(mu):
        raise HypothesisViolated(f"mu must be positive and finite, got {mu!r}")
    if mu * a <= 1.0:
        raise HypothesisViolated(f"need mu * a > 1, got mu*a = {mu * a!r}")
    if K0 < mu * a:
        raise HypothesisViolated(f"need K0 >= mu * a, got K0 = {K0!r} < {mu * a!r}")
    if trials < 0:
        raise InvalidConfig(f"trials must be nonnegative, got {trials}")

    grid_m, grid_n = np.triu_indices(pair_limit + 1)
    rng = generator_from(seed)
    rand_m = rng.integers(0, 1_000_000, size=trials)
    rand_n = rand_m + rng.integers(0, 5_000, size=trials)
    pairs_m = np.concatenate([grid_m, rand_m])
    pairs_n = np.concatenate([grid_n, rand_n])
    plain, shifted = _check_pair_bounds(schedule, mu, pairs_m, pairs_n)

    s1, s2 = weighted_zeta_sums(schedule, mu, sum_horizon)
    ks = np.arange(1, sum_horizon + 1, dtype=float)
    cap1 = (math.e - 1.0) / mu
    slack1 = cap1 - s1
    i1 = int(np.argmin(slack1))
    sum_linear = CheckResult(
        name="weighted_sum_bound",
        passed=float(s1[i1]) <= cap1 * (1.0 + _FP_SLACK),
        lhs=float(s1[i1]),
        rhs=cap1,
        detail=f"tightest at k={i1 + 1}",
    )
    cap2 = (math.e * a * a / (mu * a - 1.0)) / (ks + K0)
    ratio2 = s2 / cap2
    i2 = int(np.argmax(ratio2))
    sum_square = CheckResult(
        name="weighted_square_sum_bound",
        passed=float(s2[i2]) <= float(cap2[i2]) * (1.0 + _FP_SLACK),
        lhs=float(s2[i2]),
        rhs=float(cap2[i2]),
        detail=f"tightest at k={i2 + 1}",
    )

    # Stepwise difference bound.  Dividing out the common (positive) trailing
    # product zeta_{l+2,k-1} reduces it to a scalar inequality per index l,
    # independent of k.
    ls = np.arange(sum_horizon, dtype=float)
    al = a / (ls + K0)
    al1 = a / (ls + 1.0 + K0)
    lhs_factors = al1 + mu * al * al1 - al
    rhs_factors = 2.0 * (mu * a - 1.0) / a * al1 * al1
    gaps = rhs_factors - lhs_factors
    i3 = int(np.argmin(gaps))
    difference = CheckResult(
        name="stepweight_difference_bound",
        passed=float(lhs_factors[i3]) <= float(rhs_factors[i3]) * (1.0 + _FP_SLACK) + 1e-300,
        lhs=float(lhs_factors[i3]),
        rhs=float(rhs_factors[i3]),
        detail=f"tightest at l={i3}",
    )
    return [plain, shifted, sum_linear, sum_square, difference]


@dataclass(frozen=True, eq=False)
class NoiseDecomposition:
    """Per-step split of the gradient noise, one row per iteration.

    ``martingale`` is the exogenous zero-mean shock added by the noise model,
    ``mixing_martingale`` the telescoping zero-mean part of the Markov
    modulation, and ``correction`` the boundary term whose differences the
    telescoping absorbs; ``mixing_martingale - correction`` reproduces the
    raw Markov deviation ``g(x_k, Z_k) - grad f(x_k)`` exactly.
    """

    martingale: np.ndarray
    mixing_martingale: np.ndarray
    correction: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Immutable record of one run: iterates, gaps, and the driving states."""

    iterates: np.ndarray
    suboptimality: np.ndarray
    grad_norm_sq: np.ndarray
    states: np.ndarray | None
    noise_records: NoiseDecomposition | None
    seed: int
    schedule: StepSchedule

    def __post_init__(self) -> None:
        steps = self.iterates.shape[0]
        if self.suboptimality.shape != (steps,) or self.grad_norm_sq.shape != (steps,):
            raise DimensionMismatch(
                "iterates, suboptimality, and grad_norm_sq must share their leading length"
            )
        if self.states is not None and self.states.shape[0] != steps:
            raise DimensionMismatch("states must record one entry per iterate")
        for arr in (self.iterates, self.suboptimality, self.grad_norm_sq, self.states):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def horizon(self) -> int:
        return self.iterates.shape[0] - 1


def run(
    problem: ProblemInstance,
    schedule: StepSchedule,
    horizon: int,
    seed: int,
    record_noise: bool = False,
) -> Trajectory:
    """Run the stochastic-gradient recursion for ``horizon`` steps.

    Deterministic given ``seed``.  Iterates are never projected or clipped;
    if one leaves the finite floating-point range the run aborts with
    :class:`~plmarkov.errors.NonFinite`.  With ``record_noise`` set and a
    finite driving chain available, each step's noise decomposition is
    computed via one balance-equation solve per step and stored alongside
    the trajectory.
    """
    if horizon < 1:
        raise InvalidConfig(f"horizon must be >= 1, got {horizon}")
    mu = problem.constants.mu
    if schedule.a * mu < 2.0 * (1.0 - 1e-12):
        raise HypothesisViolated(
            f"schedule gain a = {schedule.a!r} is below 2/mu = {2.0 / mu!r}"
        )

    rng = generator_from(seed)
    draws = problem.noise.draws(rng, horizon)
    state = problem.noise.initial(draws)
    x = np.array(problem.x0, dtype=float)
    dim = problem.dim

    iterates = np.empty((horizon + 1, dim))
    subopt = np.empty(horizon + 1)
    grad_sq = np.empty(horizon + 1)
    state_log: list = []

    recording = record_noise and problem.chain is not None and problem.grad_field is not None
    if recording:
        mart = np.zeros((horizon, dim))
        mixing = np.empty((horizon, dim))
        correction = np.empty((horizon, dim))

    for k in range(horizon):
        grad_x = problem.gradient(x)
        iterates[k] = x
        subopt[k] = problem.objective(x) - problem.f_star
        grad_sq[k] = float(grad_x @ grad_x)
        state_log.append(state)

        next_state = problem.noise.advance(state, k, draws)
        g_k = problem.markov_grad(x, state)
        shock = problem.noise.martingale(x, state, next_state)
        total = g_k if shock is None else g_k + shock

        if recording:
            solution = solve_poisson(problem.chain, problem.grad_field(x), grad_x)
            mixing[k], correction[k] = decompose_step(solution, state, next_state)
            if shock is not None:
                mart[k] = shock

        x = x - schedule.stepsize(k) * total
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"iterate became non-finite at step {k} (seed={seed})")
        state = next_state

    iterates[horizon] = x
    subopt[horizon] = problem.objective(x) - problem.f_star
    grad_h = problem.gradient(x)
    grad_sq[horizon] = float(grad_h @ grad_h)
    state_log.append(state)

    if not np.all(np.isfinite(subopt)):
        raise NonFinite(f"suboptimality became non-finite (seed={seed})")

    try:
        states: np.ndarray | None = np.asarray(state_log)
    except ValueError:
        states = None
    records = NoiseDecomposition(mart, mixing, correction) if recording else None
    return Trajectory(
        iterates=iterates,
        suboptimality=subopt,
        grad_norm_sq=grad_sq,
        states=states,
        noise_records=records,
        seed=seed,
        schedule=schedule,
    )


def export_trajectory(trajectory: Trajectory, path: str, trial: int = 0) -> None:
    """Write one trajectory to CSV: columns ``trial,k,delta,grad_norm_sq``.

    When the trajectory carries noise records, three extra columns hold the
    Euclidean norms of the per-step decomposition parts.  Numbers use the
    shortest round-trip-exact decimal form.
    """
    records = trajectory.noise_records
    header = "trial,k,delta,grad_norm_sq"
    if records is not None:
        header += ",martingale_norm,mixing_martingale_norm,correction_norm"
    lines = [header]
    steps = trajectory.suboptimality.shape[0]
    for k in range(steps):
        row = (
            f"{trial},{k},{trajectory.suboptimality[k]:.17g},"
            f"{trajectory.grad_norm_sq[k]:.17g}"
        )
        if records is not None:
            if k < records.martingale.shape[0]:
                norms = (
                    float(np.linalg.norm(records.martingale[k])),
                    float(np.linalg.norm(records.mixing_martingale[k])),
                    float(np.linalg.norm(records.correction[k])),
                )
                row += f",{norms[0]:.17g},{norms[1]:.17g},{norms[2]:.17g}"
            else:
                row += ",nan,nan,nan"
        lines.append(row)
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write trajectory CSV to {path!r}: {exc}") from exc
