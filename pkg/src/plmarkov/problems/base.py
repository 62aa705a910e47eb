"""Shared contracts between problem builders, the engine, and the harness.

A problem bundles an objective with a stream of correlated stochastic
gradients.  The engine only sees this interface, so every concrete problem
(graph-token regression, lagged subsampling, linear system identification)
plugs into the same iteration, recording, and verification machinery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from plmarkov.chain import FiniteChain
from plmarkov.errors import DegenerateConstants, DimensionMismatch

__all__ = [
    "ProblemConstants",
    "NoiseModel",
    "ChainPathNoise",
    "ProblemInstance",
]


@dataclass(frozen=True)
class ProblemConstants:
    """Certified scalar constants attached to a problem instance.

    ``mu`` is the quadratic-growth rate of the gradient norm (the
    gradient-domination constant), ``L`` the smoothness constant,
    ``(A, B, C)`` the affine bound on the squared stochastic-gradient
    norm in terms of the squared true-gradient norm and the
    suboptimality gap, and ``lip_g`` the Lipschitz constant of the
    state-conditional gradient map in its first argument.
    """

    mu: float
    L: float
    A: float
    B: float
    C: float
    lip_g: float

    def __post_init__(self) -> None:
        for name in ("mu", "L", "A", "B", "C", "lip_g"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise DegenerateConstants(f"constant {name!r} must be finite, got {value!r}")
        if self.mu <= 0.0:
            raise DegenerateConstants(f"mu must be positive, got {self.mu!r}")
        if self.L <= 0.0:
            raise DegenerateConstants(f"L must be positive, got {self.L!r}")
        if self.mu > self.L * (1.0 + 1e-12):
            raise DegenerateConstants(
                f"mu={self.mu!r} exceeds L={self.L!r}; curvature constants are inconsistent"
            )
        if self.A < 0.0 or self.B < 0.0 or self.C < 0.0:
            raise DegenerateConstants("A, B, C must be nonnegative")
        if self.lip_g < 0.0:
            raise DegenerateConstants("lip_g must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {
            "mu": self.mu,
            "L": self.L,
            "A": self.A,
            "B": self.B,
            "C": self.C,
            "lip_g": self.lip_g,
        }


@runtime_checkable
class NoiseModel(Protocol):
    """Driver of the exogenous state sequence and the per-step shock.

    All randomness is materialized up front by :meth:`draws` so that every
    execution backend consumes the identical random numbers in the identical
    order, which keeps trajectories reproducible across backends.
    """

    def draws(self, rng: np.random.Generator, horizon: int) -> dict[str, np.ndarray]:
        """Pre-draw every random variate needed for ``horizon`` steps."""
        ...

    def initial(self, draws: Mapping[str, np.ndarray]) -> Any:
        """Return the state occupied before the first step."""
        ...

    def advance(self, state: Any, k: int, draws: Mapping[str, np.ndarray]) -> Any:
        """Return the state after step ``k`` given the pre-drawn variates."""
        ...

    def martingale(self, x: np.ndarray, state: Any, next_state: Any) -> np.ndarray | None:
        """Per-step shock with zero mean given the past, or ``None`` if absent."""
        ...


class ChainPathNoise:
    """Noise model that walks a finite chain and adds no extra shock.

    The first uniform draw selects the initial state from ``start`` and draw
    ``k + 1`` drives the transition out of step ``k``, matching the variate
    order of :func:`plmarkov.chain.sample_path` exactly.
    """

    def __init__(self, chain: FiniteChain, start: int | Sequence[float]) -> None:
        self.chain = chain
        if isinstance(start, (int, np.integer)):
            weights = np.zeros(chain.n)
            weights[int(start)] = 1.0
        else:
            weights = np.asarray(start, dtype=float)
            if weights.shape != (chain.n,):
                raise DimensionMismatch(
                    f"start distribution has shape {weights.shape}, chain has {chain.n} states"
                )
        self.start_cdf = np.cumsum(weights)
        self.start_cdf[-1] = 1.0

    def draws(self, rng: np.random.Generator, horizon: int) -> dict[str, np.ndarray]:
        return {"u": rng.random(horizon + 1)}

    def initial(self, draws: Mapping[str, np.ndarray]) -> int:
        idx = int(np.searchsorted(self.start_cdf, draws["u"][0], side="right"))
        return min(idx, self.chain.n - 1)

    def advance(self, state: int, k: int, draws: Mapping[str, np.ndarray]) -> int:
        row_cdf = self.chain.cdf()[state]
        idx = int(np.searchsorted(row_cdf, draws["u"][k + 1], side="right"))
        return min(idx, self.chain.n - 1)

    def martingale(self, x: np.ndarray, state: int, next_state: int) -> None:
        return None


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A fully specified objective plus its stochastic-gradient stream.

    ``markov_grad(x, state)`` is the state-conditional gradient whose
    stationary average equals ``gradient(x)``; the noise model may add a
    zero-mean shock on top.  ``grad_field(x)``, when available, evaluates
    ``markov_grad`` at every chain state at once (rows indexed by state),
    which the engine uses for per-step noise decompositions.
    """

    kind: str
    dim: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    f_star: float
    x_star: np.ndarray
    x0: np.ndarray
    markov_grad: Callable[[np.ndarray, Any], np.ndarray]
    noise: NoiseModel
    constants: ProblemConstants
    tmix: int
    tmix_certified: bool
    chain: FiniteChain | None = None
    grad_field: Callable[[np.ndarray], np.ndarray] | None = None
    state_sampler: Callable[[np.random.Generator, int], Sequence[Any]] | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise DimensionMismatch(f"dim must be >= 1, got {self.dim}")
        x_star = np.asarray(self.x_star, dtype=float)
        x0 = np.asarray(self.x0, dtype=float)
        if x_star.shape != (self.dim,):
            raise DimensionMismatch(f"x_star has shape {x_star.shape}, expected ({self.dim},)")
        if x0.shape != (self.dim,):
            raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({self.dim},)")
        if not np.isfinite(self.f_star):
            raise DegenerateConstants(f"f_star must be finite, got {self.f_star!r}")
        if self.tmix < 1:
            raise DegenerateConstants(f"tmix must be >= 1, got {self.tmix}")
        x_star.flags.writeable = False
        x0.flags.writeable = False
        object.__setattr__(self, "x_star", x_star)
        object.__setattr__(self, "x0", x0)

    def suboptimality(self, x: np.ndarray) -> float:
        """Gap ``f(x) - f_star`` at the point ``x``."""
        return float(self.objective(x)) - self.f_star

    def initial_gap(self) -> float:
        """Gap at the configured starting point."""
        return self.suboptimality(self.x0)

    def constants_json(self) -> str:
        """Serialize the certified constants of this instance to JSON."""
        payload: dict[str, Any] = {
            "kind": self.kind,
            "dim": self.dim,
            "f_star": self.f_star,
            "tmix": self.tmix,
            "tmix_certified": self.tmix_certified,
            "initial_gap": self.initial_gap(),
        }
        payload.update(self.constants.as_dict())
        return json.dumps(payload, sort_keys=True)
