"""Minibatch SGD with a cooldown: each datapoint sits out after selection.

Every datapoint carries a small countdown state.  Idle points (state 0)
enter the next minibatch independently with a fixed probability, jump to
the top of the countdown, and then tick down one per step, which forbids
any point from appearing twice within a window of ``b`` consecutive steps.
The per-point countdowns are independent and identical Markov chains, so
the whole selection process is a product chain with an explicit stationary
law.

Averaged over that law, the minibatch gradient reproduces the full-data
gradient up to an exact factor: the probability that at least one point is
in the batch.  The instance builder therefore certifies its constants for
the correspondingly rescaled objective, for which the stationary-mean
identity is exact; the raw unrescaled constants are also available from
:func:`subsample_constants`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from plmarkov.chain import Distribution, FiniteChain, generator_from, stationary
from plmarkov.errors import (
    DegenerateConstants,
    DimensionMismatch,
    InvalidConfig,
    UncertifiedModel,
)
from plmarkov.problems.base import ProblemConstants, ProblemInstance

__all__ = [
    "SubsampleState",
    "SubsampleModel",
    "site_kernel",
    "bminsep_step",
    "bminsep_stationary",
    "empty_batch_probability",
    "subsample_grad",
    "subsample_constants",
    "build_subsample_instance",
]


def _validated_phases(phases, b: int) -> np.ndarray:
    arr = np.asarray(phases, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch("phases must be a nonempty 1-D integer array")
    if arr.min() < 0 or arr.max() >= b:
        raise InvalidConfig(f"phases must lie in 0..{b - 1}")
    return arr


@dataclass(frozen=True)
class SubsampleState:
    """Per-datapoint countdown phases plus the scheme parameters.

    Attributes:
        phases: Integer array in ``0..b-1``, one entry per datapoint; a
            point is in the current minibatch exactly when its phase is
            ``b - 1``.
        b: Cooldown window length (``>= 1``).
        rho: Selection probability for idle points, in ``(0, 1]``.
    """

    phases: np.ndarray
    b: int
    rho: float

    def __post_init__(self) -> None:
        if self.b < 1:
            raise InvalidConfig(f"window length b must be >= 1, got {self.b}")
        if not (0.0 < self.rho <= 1.0):
            raise InvalidConfig(f"selection probability must lie in (0, 1], got {self.rho}")
        arr = _validated_phases(self.phases, self.b)
        arr.setflags(write=False)
        object.__setattr__(self, "phases", arr)

    @property
    def size(self) -> int:
        return int(self.phases.size)

    def batch_mask(self) -> np.ndarray:
        """Boolean mask of the datapoints in the current minibatch."""
        return self.phases == self.b - 1


def _advance_phases(
    phases: np.ndarray, uniforms: np.ndarray, b: int, rho: float
) -> tuple[np.ndarray, np.ndarray]:
    """One synchronous countdown step; returns (new phases, flip mask)."""
    idle = phases == 0
    flips = idle & (uniforms < rho)
    new = np.where(phases > 0, phases - 1, np.where(flips, b - 1, 0))
    return new.astype(np.int64), flips


def bminsep_step(
    state: SubsampleState, generator: np.random.Generator
) -> tuple[SubsampleState, np.ndarray]:
    """Advance every countdown one step.

    Idle datapoints flip to phase ``b - 1`` independently with probability
    ``rho``; occupied phases decrement.  Returns the new state and the
    indices that flipped (the incoming minibatch members).
    """
    u = generator.random(state.size)
    new, flips = _advance_phases(state.phases, u, state.b, state.rho)
    return SubsampleState(new, state.b, state.rho), np.flatnonzero(flips)


def site_kernel(b: int, rho: float) -> FiniteChain:
    """Transition matrix of one datapoint's countdown chain."""
    if b < 1:
        raise InvalidConfig(f"window length b must be >= 1, got {b}")
    if not (0.0 < rho <= 1.0):
        raise InvalidConfig(f"selection probability must lie in (0, 1], got {rho}")
    if b == 1:
        return FiniteChain(np.ones((1, 1)))
    kernel = np.zeros((b, b))
    kernel[0, 0] = 1.0 - rho
    kernel[0, b - 1] = rho
    for s in range(1, b):
        kernel[s, s - 1] = 1.0
    return FiniteChain(kernel)


def bminsep_stationary(b: int, rho: float) -> Distribution:
    """Stationary law of one countdown: idle mass ``1/(1+(b-1)rho)``,
    every occupied phase ``rho/(1+(b-1)rho)``."""
    if b < 1:
        raise InvalidConfig(f"window length b must be >= 1, got {b}")
    if not (0.0 < rho <= 1.0):
        raise InvalidConfig(f"selection probability must lie in (0, 1], got {rho}")
    denom = 1.0 + (b - 1) * rho
    weights = np.full(b, rho / denom)
    weights[0] = 1.0 / denom
    return Distribution(weights)


def empty_batch_probability(b: int, rho: float, n_points: int) -> float:
    """Stationary probability that no datapoint is in the minibatch."""
    occupied = bminsep_stationary(b, rho).weights[b - 1]
    return float((1.0 - occupied) ** n_points)


@dataclass(frozen=True, eq=False)
class SubsampleModel:
    """Supervised model whose per-example losses feed the minibatch scheme.

    The default is the linear predictor ``<w, a_i>`` with squared loss; a
    nonlinear predictor may be supplied through ``predict``/``predict_grad``
    but is certifiable only with explicitly supplied curvature constants.

    Attributes:
        features: Design matrix, one row per datapoint.
        targets: Regression targets.
        predict: Optional ``(w, row) -> float`` replacing the inner product.
        predict_grad: Optional ``(w, row) -> array`` gradient of ``predict``.
        kernel_floor: Supplied lower bound on the feature-similarity kernel's
            smallest eigenvalue (required for nonlinear predictors).
        per_example_smoothness: Supplied per-example smoothness bound
            (required for nonlinear predictors).
    """

    features: np.ndarray
    targets: np.ndarray
    predict: Callable[[np.ndarray, np.ndarray], float] | None = None
    predict_grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    kernel_floor: float | None = None
    per_example_smoothness: float | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
            raise DimensionMismatch("features must be a nonempty 2-D matrix")
        if y.shape != (a.shape[0],):
            raise DimensionMismatch(
                f"targets have shape {y.shape}, expected ({a.shape[0]},)"
            )
        if (self.predict is None) != (self.predict_grad is None):
            raise InvalidConfig("predict and predict_grad must be supplied together")
        a = a.copy()
        y = y.copy()
        a.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", a)
        object.__setattr__(self, "targets", y)

    @property
    def linear(self) -> bool:
        return self.predict is None

    @property
    def n_points(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def _batch_gradient(
    model: SubsampleModel, w: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    count = int(mask.sum())
    if count == 0:
        return np.zeros(model.dim)
    rows = model.features[mask]
    ys = model.targets[mask]
    if model.linear:
        return rows.T @ (rows @ w - ys) / count
    grad = np.zeros(model.dim)
    for row, y in zip(rows, ys):
        grad += (model.predict(w, row) - y) * np.asarray(model.predict_grad(w, row))
    return grad / count


def subsample_grad(
    model: SubsampleModel, w: np.ndarray, state: SubsampleState
) -> np.ndarray:
    """Gradient of the minibatch loss at ``w``.

    The minibatch loss averages half the squared residual over the points
    currently at phase ``b - 1`` and is zero (by convention) when that set
    is empty, so the returned gradient is the batch-mean residual gradient
    or the zero vector.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (model.dim,):
        raise DimensionMismatch(f"weights have shape {w.shape}, expected ({model.dim},)")
    if state.size != model.n_points:
        raise DimensionMismatch(
            f"state tracks {state.size} datapoints, model has {model.n_points}"
        )
    return _batch_gradient(model, w, state.batch_mask())


def subsample_constants(model: SubsampleModel) -> dict:
    """Raw curvature/growth constants of the full-data loss.

    For the linear predictor these come from the feature-similarity kernel
    ``F F^T`` (smallest positive eigenvalue; falls back to the smallest
    nonzero one when the kernel is rank-deficient, with the convention
    recorded) and the largest per-example row norm.  Nonlinear predictors
    must supply ``kernel_floor`` and ``per_example_smoothness``.

    Returns a dict with keys ``kernel_floor``, ``pl`` (kernel floor over the
    datapoint count), ``per_example_smoothness``, ``growth_A``,
    ``growth_B`` (``2 L N``: the one-selected-point worst case),
    ``growth_C``, ``lip_g``, and ``kernel_convention``.

    Raises:
        UncertifiedModel: For a nonlinear predictor without supplied
            constants.
    """
    n = model.n_points
    if model.linear:
        gram = model.features @ model.features.T
        eigs = np.linalg.eigvalsh(gram)
        top = float(eigs[-1])
        if not top > 0.0:
            raise DegenerateConstants("feature matrix is identically zero")
        tol = n * np.finfo(np.float64).eps * top
        if float(eigs[0]) > tol:
            kernel_floor = float(eigs[0])
            convention = "smallest kernel eigenvalue"
        else:
            positive = eigs[eigs > tol]
            kernel_floor = float(positive[0])
            convention = "smallest nonzero kernel eigenvalue (rank-deficient kernel)"
        smooth = float((model.features * model.features).sum(axis=1).max())
    else:
        if model.kernel_floor is None or model.per_example_smoothness is None:
            raise UncertifiedModel(
                "nonlinear predictor needs kernel_floor and per_example_smoothness"
            )
        kernel_floor = float(model.kernel_floor)
        smooth = float(model.per_example_smoothness)
        convention = "supplied"
        if kernel_floor <= 0.0 or smooth <= 0.0:
            raise DegenerateConstants("supplied curvature constants must be positive")
    return {
        "kernel_floor": kernel_floor,
        "pl": kernel_floor / n,
        "per_example_smoothness": smooth,
        "growth_A": 0.0,
        "growth_B": 2.0 * smooth * n,
        "growth_C": 0.0,
        "lip_g": smooth,
        "kernel_convention": convention,
    }


class LaggedSelectionNoise:
    """Noise model advancing every countdown synchronously.

    Pre-draws one uniform per datapoint per step plus one row for the
    stationary initial phases, so all backends consume identical variates.
    """

    def __init__(self, b: int, rho: float, n_points: int) -> None:
        self.b = int(b)
        self.rho = float(rho)
        self.n_points = int(n_points)
        self.start_cdf = np.cumsum(bminsep_stationary(b, rho).weights)
        self.start_cdf[-1] = 1.0

    def draws(self, rng: np.random.Generator, horizon: int) -> dict[str, np.ndarray]:
        return {
            "u0": rng.random(self.n_points),
            "u": rng.random((horizon, self.n_points)),
        }

    def initial(self, draws: Mapping[str, np.ndarray]) -> np.ndarray:
        idx = np.searchsorted(self.start_cdf, draws["u0"], side="right")
        return np.minimum(idx, self.b - 1).astype(np.int64)

    def advance(
        self, state: np.ndarray, k: int, draws: Mapping[str, np.ndarray]
    ) -> np.ndarray:
        new, _ = _advance_phases(state, draws["u"][k], self.b, self.rho)
        return new

    def martingale(self, x, state, next_state) -> None:
        return None


def selection_mixing_estimate(
    b: int, rho: float, n_points: int, term_floor: float = 1e-12
) -> int:
    """Estimated mixing window of the product of all countdown chains.

    Half the summed worst-case total-variation series of the product chain,
    bounding the product's distance by one minus the product of per-site
    agreements.  This supports the same drift bounds a certified window
    does, but it is an estimate: the countdown chain moves deterministically
    between selections, so its early-step variation exceeds the certifiable
    range and no window certificate exists for it.
    """
    if n_points < 1:
        raise InvalidConfig(f"need at least one datapoint, got {n_points}")
    site = site_kernel(b, rho)
    if site.n == 1:
        return 1
    pi = stationary(site).weights
    power = np.eye(site.n)
    series = 0.0
    for step in range(100_000):
        tau_half = min(1.0, 0.5 * float(np.abs(power - pi).sum(axis=1).max()))
        term = 2.0 * (1.0 - (1.0 - tau_half) ** n_points)
        series += term
        if term < term_floor and step >= b:
            break
        power = power @ site.kernel
    return max(1, math.ceil(series / 2.0))


def build_subsample_instance(config: Mapping) -> ProblemInstance:
    """Materialize a cooldown-minibatch regression instance from a config.

    Recognized keys (with defaults): ``n_points`` (30), ``dim`` (8), ``b``
    (4), ``rho`` (0.5), ``data_seed`` (0), ``label_noise`` (0.0), and
    ``start_offset`` (1.0).

    The instance objective is the full-data loss rescaled by the stationary
    probability that the minibatch is nonempty; under that scaling the
    stationary mean of the minibatch gradient equals the objective gradient
    exactly, and all certified constants refer to the rescaled objective.
    The raw constants of the unscaled loss sit in ``meta["raw_constants"]``.
    The selection process has no certified mixing window (see
    :func:`selection_mixing_estimate`), so ``tmix_certified`` is false.
    """
    n_points = int(config.get("n_points", 30))
    dim = int(config.get("dim", 8))
    b = int(config.get("b", 4))
    rho = float(config.get("rho", 0.5))
    label_noise = float(config.get("label_noise", 0.0))
    start_offset = float(config.get("start_offset", 1.0))
    if n_points < 1 or dim < 1:
        raise InvalidConfig("n_points and dim must be positive")
    if label_noise < 0.0:
        raise InvalidConfig(f"label_noise must be nonnegative, got {label_noise}")

    rng = generator_from(int(config.get("data_seed", 0)))
    w_true = rng.standard_normal(dim)
    features = rng.standard_normal((n_points, dim))
    targets = features @ w_true
    if label_noise > 0.0:
        targets = targets + label_noise * rng.standard_normal(n_points)
    model = SubsampleModel(features, targets)
    raw = subsample_constants(model)

    scale = 1.0 - empty_batch_probability(b, rho, n_points)
    svals = np.linalg.svd(model.features, compute_uv=False)
    tol = max(model.features.shape) * np.finfo(np.float64).eps * svals[0]
    sigma_min_nz = float(svals[svals > tol][-1])
    sigma_max = float(svals[0])

    w_hat = np.linalg.lstsq(model.features, model.targets, rcond=None)[0]
    residual = model.features @ w_hat - model.targets
    raw_floor = max(0.5 * float(residual @ residual) / n_points, 0.0)
    smooth_pp = raw["per_example_smoothness"]

    constants = ProblemConstants(
        mu=scale * sigma_min_nz * sigma_min_nz / n_points,
        L=scale * sigma_max * sigma_max / n_points,
        A=0.0,
        B=2.0 * smooth_pp * n_points / scale,
        C=2.0 * smooth_pp * n_points * raw_floor,
        lip_g=smooth_pp,
    )

    f_star = scale * raw_floor
    x0 = w_hat + start_offset * np.ones(dim) / np.sqrt(dim)
    feats = model.features
    targs = model.targets

    def objective(x: np.ndarray) -> float:
        r = feats @ x - targs
        return scale * 0.5 * float(r @ r) / n_points

    def gradient(x: np.ndarray) -> np.ndarray:
        return scale * (feats.T @ (feats @ x - targs)) / n_points

    def markov_grad(x: np.ndarray, phases: np.ndarray) -> np.ndarray:
        return _batch_gradient(model, x, phases == b - 1)

    return ProblemInstance(
        kind="subsample",
        dim=dim,
        objective=objective,
        gradient=gradient,
        f_star=f_star,
        x_star=w_hat,
        x0=x0,
        markov_grad=markov_grad,
        noise=LaggedSelectionNoise(b, rho, n_points),
        constants=constants,
        tmix=selection_mixing_estimate(b, rho, n_points),
        tmix_certified=False,
        meta={
            "model": model,
            "b": b,
            "rho": rho,
            "selection_mass": scale,
            "raw_constants": raw,
            "raw_optimal_loss": raw_floor,
            "config": dict(config),
        },
    )
