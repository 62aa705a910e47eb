"""Closed-form constants of the convergence analysis and their bound curves.

Implements every derived constant of the high-probability and in-expectation
suboptimality bounds for SGD driven by Markovian plus martingale-difference
gradient noise, exactly as stated: the correction-term constants ``m1..m4``,
the drift aggregates ``D1, D2``, the variance proxies ``nu1, nu2``, the
envelope coefficients ``Gamma1, Gamma2``, the feasibility threshold for the
stepsize offset ``K0``, and the resulting curves ``hp_envelope`` (holds for
all iterations simultaneously with probability ``1 - delta``) and
``expected_bound`` (holds for the mean gap).  No constant is tightened or
re-optimized; fidelity to the stated formulas is the point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from plmarkov.chain import generator_from
from plmarkov.errors import (
    DegenerateConstants,
    HypothesisViolated,
    InfeasibleK0,
    InvalidConfig,
)
from plmarkov.problems.base import ProblemInstance
from plmarkov.reports import CheckResult

__all__ = [
    "TheoryInputs",
    "DConstants",
    "GammaConstants",
    "MartingaleConstants",
    "TheoryConstants",
    "d_constants",
    "gamma_constants",
    "martingale_only_constants",
    "k0_lower_bound",
    "expected_bound_floor",
    "hp_envelope",
    "expected_bound",
    "abc_verify",
]

_FP_SLACK = 1e-9


@dataclass(frozen=True)
class TheoryInputs:
    """Raw ingredients of the bound formulas.

    ``mu``: gradient-domination constant; ``L``: smoothness; ``(A, B, C)``:
    affine growth bound on the squared stochastic-gradient norm; ``lip_g``:
    Lipschitz constant of the state-conditional gradient in ``x``; ``tmix``:
    mixing time of the driving chain; ``dim``: ambient dimension; ``a, K0``:
    stepsize schedule; ``delta``: failure probability; ``Delta0``: initial
    suboptimality gap.
    """

    mu: float
    L: float
    A: float
    B: float
    C: float
    lip_g: float
    tmix: int
    dim: int
    a: float
    K0: float
    delta: float
    Delta0: float

    def __post_init__(self) -> None:
        if self.mu <= 0.0 or not np.isfinite(self.mu):
            raise DegenerateConstants(f"mu must be positive, got {self.mu!r}")
        if self.L <= 0.0 or not np.isfinite(self.L):
            raise DegenerateConstants(f"L must be positive, got {self.L!r}")
        if self.A < 0.0 or self.B < 0.0 or self.C < 0.0:
            raise DegenerateConstants("A, B, C must be nonnegative")
        if self.lip_g < 0.0:
            raise DegenerateConstants(f"lip_g must be nonnegative, got {self.lip_g!r}")
        if self.tmix < 1:
            raise DegenerateConstants(f"tmix must be >= 1, got {self.tmix!r}")
        if self.dim < 1:
            raise DegenerateConstants(f"dim must be >= 1, got {self.dim!r}")
        if self.Delta0 < 0.0 or not np.isfinite(self.Delta0):
            raise DegenerateConstants(f"Delta0 must be nonnegative, got {self.Delta0!r}")
        if self.a <= 0.0 or not np.isfinite(self.a):
            raise InvalidConfig(f"a must be positive, got {self.a!r}")
        if self.K0 <= 0.0 or not np.isfinite(self.K0):
            raise InvalidConfig(f"K0 must be positive, got {self.K0!r}")
        if not (0.0 < self.delta < 1.0):
            raise InvalidConfig(f"delta must lie in (0, 1), got {self.delta!r}")

    @classmethod
    def from_problem(
        cls,
        problem: ProblemInstance,
        a: float,
        K0: float,
        delta: float,
        Delta0: float | None = None,
    ) -> "TheoryInputs":
        c = problem.constants
        gap = problem.initial_gap() if Delta0 is None else Delta0
        return cls(
            mu=c.mu,
            L=c.L,
            A=c.A,
            B=c.B,
            C=c.C,
            lip_g=c.lip_g,
            tmix=problem.tmix,
            dim=problem.dim,
            a=a,
            K0=K0,
            delta=delta,
            Delta0=gap,
        )


class DConstants(NamedTuple):
    D1: float
    D2: float
    m1: float
    m2: float
    m3: float
    m4: float


class GammaConstants(NamedTuple):
    nu1: float
    nu2: float
    Gamma1: float
    Gamma2: float


class MartingaleConstants(NamedTuple):
    nu1_hat: float
    nu2_hat: float
    Gamma1_hat: float
    Gamma2_hat: float


def _m_constants(L: float, A: float, B: float, C: float, lip_g: float) -> tuple[float, float, float, float]:
    """Closed forms for the four correction-term constants.

    With ``u = 2AL + B``:

    * ``m1, m2`` bound the inner product of the true gradient with the
      balance-equation correction:  for ``u > 0`` the Cauchy-Schwarz split
      gives ``m1 = 2*sqrt(2u/L)`` and ``m2 = 2*sqrt(L*C^2/(2u))``; when only
      the additive noise power ``C`` survives (``u = 0``) the product of the
      gradient norm and the constant correction norm yields
      ``m1 = sqrt(2LC)/L`` and ``m2 = sqrt(2LC)``; fully noiseless means
      both are zero.
    * ``m3, m4`` bound the per-step increment of that inner product, using
      ``sqrt(u*g + C) <= sqrt(u*g) + sqrt(C)`` and ``sqrt(g) <= (1 + g)/2``
      to reach an affine-in-gap form:
      ``m3 = (2*lip_g*sqrt(2Lu) + lip_g*sqrt(2LC) + 2Lu) / (L*(L + lip_g))``
      and ``m4 = (lip_g*sqrt(2LC) + 2LC) / (L + lip_g)``.
    """
    u = 2.0 * A * L + B
    root_2lc = math.sqrt(2.0 * L * C)
    if u > 0.0:
        m1 = 2.0 * math.sqrt(2.0 * u / L)
        m2 = 2.0 * math.sqrt(L * C * C / (2.0 * u))
    elif C > 0.0:
        m1 = root_2lc / L
        m2 = root_2lc
    else:
        m1 = 0.0
        m2 = 0.0
    m3 = (2.0 * lip_g * math.sqrt(2.0 * L * u) + lip_g * root_2lc + 2.0 * L * u) / (
        L * (L + lip_g)
    )
    m4 = (lip_g * root_2lc + 2.0 * L * C) / (L + lip_g)
    return m1, m2, m3, m4


def d_constants(inputs: TheoryInputs) -> DConstants:
    """Drift aggregates ``D1, D2`` together with ``m1..m4``.

    Requires ``mu * a > 1``.  Fully noiseless inputs (``A = B = C = 0``)
    yield all zeros.
    """
    mu, L, A, B, C = inputs.mu, inputs.L, inputs.A, inputs.B, inputs.C
    a, tmix, lip_g = inputs.a, inputs.tmix, inputs.lip_g
    if mu * a <= 1.0:
        raise HypothesisViolated(f"need mu * a > 1, got mu*a = {mu * a!r}")
    m1, m2, m3, m4 = _m_constants(L, A, B, C, lip_g)
    sqrt_d = math.sqrt(inputs.dim)
    d1 = (
        2.0 * a * m1 * tmix * L * sqrt_d * inputs.Delta0
        + 10.0 * a * m2 * tmix * sqrt_d
        + math.e * a * a * m4 * tmix * (L + lip_g) * sqrt_d / (mu * a - 1.0)
    )
    d2 = 8.0 * a * m1 * tmix * L * sqrt_d + math.e * a * a * m3 * tmix * (
        L + lip_g
    ) * L * sqrt_d / (mu * a - 1.0)
    return DConstants(D1=d1, D2=d2, m1=m1, m2=m2, m3=m3, m4=m4)


def _kbar0(K0: float, delta: float) -> float:
    """Minimal admissible delta-free proxy for ``K0``."""
    return K0 / math.log(2.0 / delta)


def _log_k0_bar(K0: float, delta: float) -> float:
    """Minimal admissible delta-free proxy for ``log(2*K0/delta)``."""
    return math.log(2.0 * K0 / delta) / math.log(2.0 / delta)


def gamma_constants(inputs: TheoryInputs) -> GammaConstants:
    """Variance proxies ``nu1, nu2`` and envelope coefficients ``Gamma1, Gamma2``.

    Requires ``2 * mu * a > 3``.  The ``nu1`` bracket divides by ``D2``;
    whenever its coefficient ``2AL + B`` vanishes the whole term is zero by
    convention (and when additionally ``C = 0`` every output is zero), which
    is the only regime where ``D2`` can vanish.
    """
    mu, L, A, B, C = inputs.mu, inputs.L, inputs.A, inputs.B, inputs.C
    a, tmix, d = inputs.a, inputs.tmix, inputs.dim
    if 2.0 * mu * a <= 3.0:
        raise HypothesisViolated(f"need 2 * mu * a > 3, got mu*a = {mu * a!r}")
    dc = d_constants(inputs)
    u = 2.0 * A * L + B
    scale = (a * math.e) ** 2 * L * (tmix * tmix * d + 1.0)
    if u > 0.0:
        bracket = (u / (2.0 * mu * a - 3.0)) * (
            2.0 * inputs.Delta0
            + dc.D1 / dc.D2
            + math.e * a * a * C * L / dc.D2
        )
    else:
        bracket = 0.0
    nu1 = 32.0 * scale * (bracket + C / (2.0 * mu * a - 2.0))
    nu2 = 64.0 * scale * u / (2.0 * mu * a - 3.0)
    gamma1 = math.e * a * a * C * L + 2.0 * (dc.D1 + dc.D2 * inputs.Delta0)
    gamma2 = 4.0 * nu1 * (1.0 + 3.0 * _log_k0_bar(inputs.K0, inputs.delta)) + 2.0 * math.sqrt(
        nu1 * (_kbar0(inputs.K0, inputs.delta) * inputs.Delta0 + 2.0 * gamma1)
    )
    return GammaConstants(nu1=nu1, nu2=nu2, Gamma1=gamma1, Gamma2=gamma2)


def martingale_only_constants(inputs: TheoryInputs) -> MartingaleConstants:
    """Envelope constants for the regime with no Markov modulation.

    Mirrors :func:`gamma_constants` for runs whose gradient noise is a pure
    martingale difference; requires ``2 * mu * a > 3``.
    """
    mu, L, A, B, C = inputs.mu, inputs.L, inputs.A, inputs.B, inputs.C
    a = inputs.a
    if 2.0 * mu * a <= 3.0:
        raise HypothesisViolated(f"need 2 * mu * a > 3, got mu*a = {mu * a!r}")
    core = 8.0 * L * (a * math.e) ** 2
    nu1_hat = (
        core
        * (
            (2.0 * L * (A + 1.0) + B) / (2.0 * mu * a - 3.0) * inputs.Delta0
            + C / (mu * a - 1.0)
        )
        + math.e * a * a * C * L / 16.0
    )
    nu2_hat = core * (2.0 * L * (A + 1.0) + B) / (2.0 * mu * a - 3.0)
    gamma1_hat = math.e * a * a * C * L / 2.0
    if nu1_hat > 0.0:
        gamma2_hat = 12.0 * nu1_hat * (1.0 + math.log(8.0 * nu1_hat)) + 2.0 * math.sqrt(
            nu1_hat * (_kbar0(inputs.K0, inputs.delta) * inputs.Delta0 + math.e * a * a * C * L)
        )
    else:
        gamma2_hat = 0.0
    return MartingaleConstants(
        nu1_hat=nu1_hat, nu2_hat=nu2_hat, Gamma1_hat=gamma1_hat, Gamma2_hat=gamma2_hat
    )


def _implicit_offset_solution(big_c: float, delta: float) -> float:
    """Closed-form solution ``K = c1 * log(2*c1/delta)`` of the implicit
    offset inequality ``K >= C*log(2K/delta)*(1 + log(2K/delta)/log(2/delta))``
    with ``c1 = 12*C*log(12*C) + 6*C``.  Returns 0 when the closed form is
    not positive (tiny ``C``), in which case the term never binds.
    """
    if big_c <= 0.0:
        return 0.0
    c1 = 12.0 * big_c * math.log(12.0 * big_c) + 6.0 * big_c
    if c1 <= 0.0:
        return 0.0
    return c1 * math.log(2.0 * c1 / delta)


def k0_lower_bound(inputs: TheoryInputs) -> float:
    """Smallest admissible stepsize offset for the high-probability bound.

    Maximum of four terms: the curvature/noise term ``(aL/2)(2A + B/mu)``,
    the product ``mu*a``, twice the drift aggregate ``D2``, and the solution
    of the implicit offset inequality driven by ``nu2``.  The fourth term is
    evaluated both in its stated expanded form and through the closed-form
    solver; they agree identically.
    """
    mu, L, A, B = inputs.mu, inputs.L, inputs.A, inputs.B
    a = inputs.a
    term_noise = (a * L / 2.0) * (2.0 * A + B / mu)
    term_product = mu * a
    dc = d_constants(inputs)
    gc = gamma_constants(inputs)
    term_drift = 2.0 * dc.D2
    nu2 = gc.nu2
    if nu2 > 0.0:
        inner = 2.0 * math.log(48.0 * nu2) + 1.0
        lead = 24.0 * nu2 * inner
        term_implicit = lead * math.log(48.0 * nu2 * inner / inputs.delta) if lead > 0.0 else 0.0
    else:
        term_implicit = 0.0
    return max(term_noise, term_product, term_drift, term_implicit)


def _expected_bound_offset_floor(inputs: TheoryInputs, D2: float) -> float:
    """Offset hypothesis of the in-expectation bound."""
    return max(
        inputs.a * inputs.L * (2.0 * inputs.A + inputs.B / inputs.mu),
        inputs.mu * inputs.a,
        2.0 * D2,
    )


def expected_bound_floor(inputs: TheoryInputs) -> float:
    """Smallest stepsize offset under which the in-expectation bound applies.

    Weaker than :func:`k0_lower_bound` (no high-probability term): the
    maximum of the curvature/noise term, the product ``mu*a``, and twice the
    drift aggregate ``D2``.
    """
    return _expected_bound_offset_floor(inputs, d_constants(inputs).D2)


@dataclass(frozen=True)
class TheoryConstants:
    """All inputs plus every derived constant, ready for curve evaluation."""

    mu: float
    L: float
    A: float
    B: float
    C: float
    lip_g: float
    tmix: int
    dim: int
    a: float
    K0: float
    delta: float
    Delta0: float
    m1: float
    m2: float
    m3: float
    m4: float
    D1: float
    D2: float
    nu1: float
    nu2: float
    Gamma1: float
    Gamma2: float
    K0_required: float
    Kbar0: float
    logKbar0: float

    def __post_init__(self) -> None:
        for name in (
            "m1", "m2", "m3", "m4", "D1", "D2",
            "nu1", "nu2", "Gamma1", "Gamma2", "K0_required",
        ):
            value = getattr(self, name)
            if value < 0.0 or not np.isfinite(value):
                raise DegenerateConstants(f"derived constant {name} = {value!r} is invalid")

    @classmethod
    def from_inputs(cls, inputs: TheoryInputs) -> "TheoryConstants":
        dc = d_constants(inputs)
        gc = gamma_constants(inputs)
        return cls(
            mu=inputs.mu,
            L=inputs.L,
            A=inputs.A,
            B=inputs.B,
            C=inputs.C,
            lip_g=inputs.lip_g,
            tmix=inputs.tmix,
            dim=inputs.dim,
            a=inputs.a,
            K0=inputs.K0,
            delta=inputs.delta,
            Delta0=inputs.Delta0,
            m1=dc.m1,
            m2=dc.m2,
            m3=dc.m3,
            m4=dc.m4,
            D1=dc.D1,
            D2=dc.D2,
            nu1=gc.nu1,
            nu2=gc.nu2,
            Gamma1=gc.Gamma1,
            Gamma2=gc.Gamma2,
            K0_required=k0_lower_bound(inputs),
            Kbar0=_kbar0(inputs.K0, inputs.delta),
            logKbar0=_log_k0_bar(inputs.K0, inputs.delta),
        )

    def hypotheses(self) -> dict[str, bool]:
        """Which structural hypotheses the current inputs satisfy."""
        return {
            "mu_a_gt_1": self.mu * self.a > 1.0,
            "two_mu_a_gt_3": 2.0 * self.mu * self.a > 3.0,
            "gain_ge_two_over_mu": self.a * self.mu >= 2.0 * (1.0 - 1e-12),
            "k0_feasible_hp": self.K0 >= self.K0_required * (1.0 - 1e-12),
            "k0_feasible_expected": self.K0
            >= _expected_bound_offset_floor(self._inputs(), self.D2) * (1.0 - 1e-12),
        }

    def _inputs(self) -> TheoryInputs:
        return TheoryInputs(
            mu=self.mu,
            L=self.L,
            A=self.A,
            B=self.B,
            C=self.C,
            lip_g=self.lip_g,
            tmix=self.tmix,
            dim=self.dim,
            a=self.a,
            K0=self.K0,
            delta=self.delta,
            Delta0=self.Delta0,
        )

    def as_dict(self) -> dict[str, object]:
        record: dict[str, object] = {
            "mu": self.mu,
            "L": self.L,
            "A": self.A,
            "B": self.B,
            "C": self.C,
            "lip_g": self.lip_g,
            "tmix": self.tmix,
            "dim": self.dim,
            "a": self.a,
            "K0": self.K0,
            "delta": self.delta,
            "Delta0": self.Delta0,
            "m1": self.m1,
            "m2": self.m2,
            "m3": self.m3,
            "m4": self.m4,
            "D1": self.D1,
            "D2": self.D2,
            "nu1": self.nu1,
            "nu2": self.nu2,
            "Gamma1": self.Gamma1,
            "Gamma2": self.Gamma2,
            "K0_required": self.K0_required,
            "Kbar0": self.Kbar0,
            "logKbar0": self.logKbar0,
        }
        record["hypotheses"] = self.hypotheses()
        return record


def hp_envelope(constants: TheoryConstants, k):
    """High-probability envelope ``Lambda(k, delta) / (k + K0)`` for ``k >= 1``.

    Refuses to evaluate when ``K0`` is below the feasibility threshold; the
    underlying guarantee is conditional on it.
    """
    if constants.K0 < constants.K0_required * (1.0 - 1e-12):
        raise InfeasibleK0(
            f"K0 = {constants.K0!r} is below the required {constants.K0_required!r}"
        )
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr < 1):
        raise InvalidConfig("the envelope is defined for k >= 1")
    head = (
        constants.K0 * constants.Delta0
        + constants.Gamma1
        + constants.Gamma2 * math.log(2.0 * constants.K0 / constants.delta)
    )
    lam = head + constants.Gamma2 * np.log(2.0 * k_arr / constants.delta)
    out = lam / (k_arr + constants.K0)
    return float(out) if np.isscalar(k) or np.ndim(k) == 0 else out


def expected_bound(constants: TheoryConstants, k):
    """In-expectation bound ``(Delta0*(K0 + 2*D2) + e*a^2*C*L + 2*D1)/(k + K0)``.

    Valid for ``k >= 0`` under its own (milder) offset hypothesis.
    """
    floor = _expected_bound_offset_floor(constants._inputs(), constants.D2)
    if constants.K0 < floor * (1.0 - 1e-12):
        raise InfeasibleK0(
            f"K0 = {constants.K0!r} is below the required {floor!r} for the mean bound"
        )
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr < 0):
        raise InvalidConfig("the mean bound is defined for k >= 0")
    numerator = (
        constants.Delta0 * (constants.K0 + 2.0 * constants.D2)
        + math.e * constants.a * constants.a * constants.C * constants.L
        + 2.0 * constants.D1
    )
    out = numerator / (k_arr + constants.K0)
    return float(out) if np.isscalar(k) or np.ndim(k) == 0 else out


def _head_dominates(c1: float, c2: float, c3: float, delta: float, y: float) -> bool:
    """Predicate behind envelope monotonicity: for positive ``c1, c2``,
    ``c3 >= 2`` and ``delta`` in (0,1), the curve ``(c1 + c2*log(y/delta)) /
    (y + c3)`` never exceeds its value extrapolated from the head,
    ``(c1 + c2*log(c3/delta))/c3``, for any ``y > 0``.
    """
    lhs = (c1 + c2 * math.log(y / delta)) / (y + c3)
    rhs = (c1 + c2 * math.log(c3 / delta)) / c3
    return lhs <= rhs * (1.0 + 1e-12)


def _sample_ball(rng: np.random.Generator, center: np.ndarray, radius: float) -> np.ndarray:
    """Uniform draw from the Euclidean ball of given radius around center."""
    d = center.shape[0]
    direction = rng.standard_normal(d)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return center.copy()
    r = radius * rng.random() ** (1.0 / d)
    return center + (r / norm) * direction


def abc_verify(
    problem: ProblemInstance,
    sample_count: int,
    generator,
    radius: float | None = None,
) -> list[CheckResult]:
    """Empirically stress the affine growth bounds on the gradient noise.

    Walks the noise process for ``sample_count`` steps, pairing each visited
    state with a fresh uniform draw from a ball around the optimum, and
    evaluates both the full stochastic gradient (state-conditional part plus
    shock) and the state-conditional part alone against
    ``A*||grad f(x)||^2 + B*(f(x) - f_star) + C``.  For finite chains the
    state-conditional inequality is additionally checked on every state.
    Violations are reported, never raised.
    """
    if sample_count < 1:
        raise InvalidConfig(f"sample_count must be >= 1, got {sample_count}")
    rng = generator_from(generator)
    c = problem.constants
    x_star = problem.x_star
    if radius is None:
        radius = max(1.0, 2.0 * float(np.linalg.norm(problem.x0 - x_star)))

    worst_full = (-math.inf, 0.0, 0.0)
    worst_markov = (-math.inf, 0.0, 0.0)

    def bound_at(x: np.ndarray) -> float:
        grad = problem.gradient(x)
        gap = problem.suboptimality(x)
        return c.A * float(grad @ grad) + c.B * gap + c.C

    draws = problem.noise.draws(rng, sample_count)
    state = problem.noise.initial(draws)
    for k in range(sample_count):
        next_state = problem.noise.advance(state, k, draws)
        x = _sample_ball(rng, x_star, radius)
        cap = bound_at(x)
        g = problem.markov_grad(x, state)
        markov_sq = float(g @ g)
        if markov_sq - cap > worst_markov[0]:
            worst_markov = (markov_sq - cap, markov_sq, cap)
        shock = problem.noise.martingale(x, state, next_state)
        total = g if shock is None else g + shock
        total_sq = float(total @ total)
        if total_sq - cap > worst_full[0]:
            worst_full = (total_sq - cap, total_sq, cap)
        state = next_state

    if problem.chain is not None:
        per_state = max(1, sample_count // problem.chain.n)
        for _ in range(per_state):
            x = _sample_ball(rng, x_star, radius)
            cap = bound_at(x)
            for z in range(problem.chain.n):
                g = problem.markov_grad(x, z)
                markov_sq = float(g @ g)
                if markov_sq - cap > worst_markov[0]:
                    worst_markov = (markov_sq - cap, markov_sq, cap)

    _, lhs_f, rhs_f = worst_full
    _, lhs_m, rhs_m = worst_markov
    tol = lambda rhs: rhs * (1.0 + _FP_SLACK) + 1e-12
    return [
        CheckResult(
            name="stochastic_grad_growth",
            passed=lhs_f <= tol(rhs_f),
            lhs=lhs_f,
            rhs=rhs_f,
            detail=f"worst of {sample_count} path samples, radius {radius:g}",
        ),
        CheckResult(
            name="markov_grad_growth",
            passed=lhs_m <= tol(rhs_m),
            lhs=lhs_m,
            rhs=rhs_m,
            detail=f"worst over path and state sweep, radius {radius:g}",
        ),
    ]
