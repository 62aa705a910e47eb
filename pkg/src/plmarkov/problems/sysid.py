"""Streaming linear system identification driven by its own state process.

The learner refines a square matrix from one trajectory of the stable
linear system it is trying to identify: the observed state is next_state =
true_matrix @ state + shock, with shocks drawn i.i.d. and uniformly from a
ball, so they are zero-mean and almost surely bounded.  The per-step update
subtracts a rank-one correction built from consecutive observations; it
splits exactly into a state-conditional gradient part plus a
martingale-difference part, which is the decomposition the engine records.

The state process is the Markov noise: it never mixes in the finite-kernel
sense, so the mixing window is a documented estimate derived from the
geometric contraction rate, never a certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from plmarkov.chain import generator_from
from plmarkov.errors import (
    DegenerateCovariance,
    DimensionMismatch,
    InvalidConfig,
)
from plmarkov.problems.base import ProblemConstants, ProblemInstance

__all__ = [
    "SysIdState",
    "sysid_advance",
    "sysid_grad_update",
    "sysid_constants",
    "ball_covariance_scale",
    "lyapunov_solve",
    "build_sysid_instance",
]

#: Calibration factor applied to the contraction-rate doubling time when
#: estimating the mixing window of the (uncertifiable) continuous state
#: process.  Four doubling times keep the window conservative without
#: inflating drift constants by more than a small factor.
MIXING_CALIBRATION = 4


@dataclass(frozen=True)
class SysIdState:
    """Current system state plus the parameters that drive it.

    Attributes:
        z: Current state vector of the driven linear system.
        true_matrix: The stable square matrix being identified.
        noise_bound: Almost-sure bound on the shock norm (ball radius).
    """

    z: np.ndarray
    true_matrix: np.ndarray
    noise_bound: float

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=np.float64)
        mat = np.asarray(self.true_matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] == 0:
            raise DimensionMismatch("true_matrix must be a nonempty square matrix")
        if z.shape != (mat.shape[0],):
            raise DimensionMismatch(
                f"state has shape {z.shape}, expected ({mat.shape[0]},)"
            )
        if not np.isfinite(mat).all() or not np.isfinite(z).all():
            raise InvalidConfig("state and matrix must be finite")
        if self.noise_bound < 0.0:
            raise InvalidConfig(f"noise_bound must be nonnegative, got {self.noise_bound}")
        z = z.copy()
        mat = mat.copy()
        z.setflags(write=False)
        mat.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "true_matrix", mat)

    @property
    def dim(self) -> int:
        return int(self.z.shape[0])

    def contraction(self) -> float:
        """Spectral norm of the true matrix (the decay rate used in bounds)."""
        return float(np.linalg.norm(self.true_matrix, 2))

    def state_radius(self) -> float:
        """Almost-sure bound on all future state norms from this state."""
        lam = self.contraction()
        if lam >= 1.0:
            raise InvalidConfig(
                f"state bounds need spectral norm < 1, got {lam:.6g}"
            )
        return max(float(np.linalg.norm(self.z)), self.noise_bound / (1.0 - lam))


def _ball_point(normal: np.ndarray, radial_u: float, radius: float) -> np.ndarray:
    """Map a standard normal and a uniform variate to a uniform ball point."""
    norm = float(np.linalg.norm(normal))
    if radius == 0.0 or norm == 0.0:
        return np.zeros_like(normal)
    return radius * (radial_u ** (1.0 / normal.shape[0])) * normal / norm


def sysid_advance(state: SysIdState, generator: np.random.Generator) -> SysIdState:
    """One step of the driven system: contract by the true matrix, add a
    shock drawn uniformly from the radius-``noise_bound`` ball."""
    shock = _ball_point(
        generator.standard_normal(state.dim), generator.random(), state.noise_bound
    )
    return SysIdState(
        state.true_matrix @ state.z + shock, state.true_matrix, state.noise_bound
    )


def sysid_grad_update(
    a_matrix: np.ndarray, z_k: np.ndarray, z_k1: np.ndarray, alpha: float
) -> np.ndarray:
    """One streaming identification step: subtract ``alpha`` times the
    rank-one correction ``(a_matrix @ z_k - z_k1) z_k^T``."""
    a = np.asarray(a_matrix, dtype=np.float64)
    z = np.asarray(z_k, dtype=np.float64)
    z_next = np.asarray(z_k1, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch("iterate must be a square matrix")
    if z.shape != (a.shape[0],) or z_next.shape != (a.shape[0],):
        raise DimensionMismatch("state vectors must match the matrix dimension")
    return a - alpha * np.outer(a @ z - z_next, z)


def ball_covariance_scale(dim: int, radius: float) -> float:
    """Scalar ``s`` with ``Cov(shock) = s * I`` for the uniform ball draw."""
    return radius * radius / (dim + 2.0)


def lyapunov_solve(contraction_matrix: np.ndarray, forcing: np.ndarray) -> np.ndarray:
    """Solve ``S = M S M^T + Q`` for the stationary covariance ``S``.

    Uses the Kronecker-product linearization, which is exact and cheap at
    the small dimensions this problem family runs at.
    """
    m = np.asarray(contraction_matrix, dtype=np.float64)
    q = np.asarray(forcing, dtype=np.float64)
    d = m.shape[0]
    if m.shape != (d, d) or q.shape != (d, d):
        raise DimensionMismatch("matrices must be square and same-shaped")
    system = np.eye(d * d) - np.kron(m, m)
    return np.linalg.solve(system, q.ravel()).reshape(d, d)


def sysid_constants(
    state: SysIdState,
    stationary_sample_budget: int,
    generator: np.random.Generator | int | None = None,
) -> tuple[ProblemConstants, dict]:
    """Curvature and growth constants for the identification objective.

    The stationary state covariance is estimated by the long-run average of
    the state outer products over ``stationary_sample_budget`` steps, and —
    because the shock law is known exactly (uniform ball, isotropic
    covariance) — also solved exactly from its fixed-point equation.  The
    exact solution supplies the certified eigenvalue constants; the
    estimate backs the positivity check and is reported alongside.

    The squared gradient of the per-observation loss is bounded pathwise by
    ``2 R^4 / mu`` times the objective, with ``R`` the almost-sure state
    radius and ``mu`` the smallest covariance eigenvalue; folding the
    shock-driven martingale part through the squared triangle inequality
    doubles both that coefficient and the additive shock term, which is how
    the returned growth constants are assembled.

    Raises:
        DegenerateCovariance: If the estimated covariance is not positive
            definite within tolerance.
        InvalidConfig: If the true matrix is not a contraction in spectral
            norm, or the budget is not positive.
    """
    if stationary_sample_budget < 1:
        raise InvalidConfig(
            f"stationary_sample_budget must be >= 1, got {stationary_sample_budget}"
        )
    lam = state.contraction()
    if lam >= 1.0:
        raise InvalidConfig(f"true matrix must contract (spectral norm < 1), got {lam:.6g}")

    d = state.dim
    rng = generator_from(generator if generator is not None else 0)
    z = state.z.copy()
    accumulated = np.zeros((d, d))
    burn_in = min(stationary_sample_budget // 10, 1000)
    kept = 0
    for k in range(stationary_sample_budget + burn_in):
        shock = _ball_point(rng.standard_normal(d), rng.random(), state.noise_bound)
        z = state.true_matrix @ z + shock
        if k >= burn_in:
            accumulated += np.outer(z, z)
            kept += 1
    sigma_estimate = accumulated / kept

    est_eigs = np.linalg.eigvalsh(sigma_estimate)
    tol = d * np.finfo(np.float64).eps * max(float(est_eigs[-1]), 1.0)
    if float(est_eigs[0]) <= tol:
        raise DegenerateCovariance(
            f"estimated state covariance has smallest eigenvalue {est_eigs[0]:.3e}"
        )

    forcing = ball_covariance_scale(d, state.noise_bound) * np.eye(d)
    sigma = lyapunov_solve(state.true_matrix, forcing)
    eigs = np.linalg.eigvalsh(sigma)
    mu = float(eigs[0])
    smooth = float(eigs[-1])

    radius = state.state_radius()
    grad_coeff = 2.0 * radius**4 / mu
    shock_term = (state.noise_bound * radius) ** 2
    constants = ProblemConstants(
        mu=mu,
        L=smooth,
        A=0.0,
        B=2.0 * grad_coeff,
        C=2.0 * shock_term,
        lip_g=radius * radius,
    )
    extras = {
        "sigma": sigma,
        "sigma_estimate": sigma_estimate,
        "contraction": lam,
        "state_radius": radius,
        "shock_cov_scale": ball_covariance_scale(d, state.noise_bound),
        "markov_grad_coeff": grad_coeff,
        "shock_sq_bound": shock_term,
    }
    return constants, extras


class DrivenStateNoise:
    """Noise model replaying the driven linear system from the origin.

    Pre-draws a normal direction and a radial uniform per step so every
    backend consumes identical variates; the initial state is the origin,
    which keeps the almost-sure radius at its stationary value.
    """

    def __init__(self, true_matrix: np.ndarray, noise_bound: float) -> None:
        self.true_matrix = np.asarray(true_matrix, dtype=np.float64)
        self.noise_bound = float(noise_bound)
        self.dim = int(self.true_matrix.shape[0])

    def draws(self, rng: np.random.Generator, horizon: int) -> dict[str, np.ndarray]:
        return {
            "normals": rng.standard_normal((horizon, self.dim)),
            "radii": rng.random(horizon),
        }

    def initial(self, draws: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.zeros(self.dim)

    def advance(
        self, state: np.ndarray, k: int, draws: Mapping[str, np.ndarray]
    ) -> np.ndarray:
        shock = _ball_point(draws["normals"][k], float(draws["radii"][k]), self.noise_bound)
        return self.true_matrix @ state + shock

    def martingale(
        self, x: np.ndarray, state: np.ndarray, next_state: np.ndarray
    ) -> np.ndarray:
        shock = next_state - self.true_matrix @ state
        return -np.outer(shock, state).ravel()


def _haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    gaussian = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gaussian)
    return q * np.sign(np.diag(r))


def estimated_mixing_window(contraction: float) -> int:
    """Documented mixing-window estimate from the geometric decay rate:
    the distance-halving time under contraction ``lam`` times the
    calibration factor.  An estimate, never a certificate."""
    if not (0.0 < contraction < 1.0):
        raise InvalidConfig(f"contraction must lie in (0, 1), got {contraction}")
    halving = math.ceil(math.log(2.0) / math.log(1.0 / contraction))
    return max(1, halving) * MIXING_CALIBRATION


def build_sysid_instance(config: Mapping) -> ProblemInstance:
    """Materialize a system-identification instance from a config.

    Recognized keys (with defaults): ``dim`` (3), ``lam_max`` (0.7),
    ``noise_bound`` (1.0), ``rotation_seed`` (0), ``start_offset`` (1.0),
    and ``stationary_sample_budget`` (20000).

    The true matrix is a Haar-random orthogonal matrix scaled by
    ``lam_max``.  That matrix is normal with spectral norm exactly
    ``lam_max``, so the almost-sure state-radius bound is tight and the
    stationary covariance is isotropic in closed form; general
    non-normal matrices can have spectral norm above their spectral radius,
    which would break the pathwise growth bounds this laboratory certifies.

    The iterate is the flattened matrix (dimension ``dim**2``).  The
    mixing window is the contraction-rate estimate (``tmix_certified``
    false).
    """
    dim = int(config.get("dim", 3))
    lam = float(config.get("lam_max", 0.7))
    bound = float(config.get("noise_bound", 1.0))
    start_offset = float(config.get("start_offset", 1.0))
    budget = int(config.get("stationary_sample_budget", 20_000))
    if dim < 1:
        raise InvalidConfig(f"dim must be positive, got {dim}")
    if not (0.0 < lam < 1.0):
        raise InvalidConfig(f"lam_max must lie in (0, 1), got {lam}")
    if bound <= 0.0:
        raise InvalidConfig(f"noise_bound must be positive, got {bound}")

    rng = generator_from(int(config.get("rotation_seed", 0)))
    true_matrix = lam * _haar_orthogonal(dim, rng)
    anchor = SysIdState(np.zeros(dim), true_matrix, bound)
    constants, extras = sysid_constants(anchor, budget, rng)
    sigma = extras["sigma"]

    x_star = true_matrix.ravel().copy()
    x0 = x_star + start_offset * np.ones(dim * dim) / dim

    def objective(x: np.ndarray) -> float:
        err = x.reshape(dim, dim) - true_matrix
        return 0.5 * float(((err @ sigma) * err).sum())

    def gradient(x: np.ndarray) -> np.ndarray:
        err = x.reshape(dim, dim) - true_matrix
        return (err @ sigma).ravel()

    def markov_grad(x: np.ndarray, z: np.ndarray) -> np.ndarray:
        err = x.reshape(dim, dim) - true_matrix
        return np.outer(err @ z, z).ravel()

    return ProblemInstance(
        kind="sysid",
        dim=dim * dim,
        objective=objective,
        gradient=gradient,
        f_star=0.0,
        x_star=x_star,
        x0=x0,
        markov_grad=markov_grad,
        noise=DrivenStateNoise(true_matrix, bound),
        constants=constants,
        tmix=estimated_mixing_window(lam),
        tmix_certified=False,
        meta={
            "true_matrix": true_matrix,
            "sigma": sigma,
            "sigma_estimate": extras["sigma_estimate"],
            "contraction": extras["contraction"],
            "state_radius": extras["state_radius"],
            "markov_grad_coeff": extras["markov_grad_coeff"],
            "shock_sq_bound": extras["shock_sq_bound"],
            "config": dict(config),
        },
    )
