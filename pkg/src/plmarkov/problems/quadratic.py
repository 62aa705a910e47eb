"""Diagnostic quadratic instances with exactly known behavior.

A scaled isotropic quadratic is the simplest member of the gradient-
domination class: curvature and smoothness coincide, the optimum is the
origin, and with the default single-state noise the engine's path is
deterministic gradient descent.  An optional finite-state modulation
multiplies the gradient by a state-dependent factor whose stationary mean
is one, which exercises the purely multiplicative noise regime (relative
growth with no additive floor).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from plmarkov.chain import FiniteChain, mixing_time, stationary
from plmarkov.errors import InvalidConfig
from plmarkov.problems.base import ChainPathNoise, ProblemConstants, ProblemInstance

__all__ = ["build_quadratic_instance"]

_DEFAULT_KERNEL = np.array([[0.9, 0.1], [0.2, 0.8]])


def build_quadratic_instance(config: Mapping) -> ProblemInstance:
    """Materialize a scaled isotropic quadratic from a config.

    Recognized keys (with defaults): ``dim`` (4), ``curvature`` (1.0),
    ``start_offset`` (1.0), ``modulation`` (None), ``kernel`` (a fixed
    two-state kernel when modulation is active), and ``mixing_horizon``
    (None).

    Without modulation the instance is noiseless: the state chain has a
    single state and the per-state gradient equals the full gradient, so a
    single engine trial reproduces deterministic gradient descent exactly.
    With ``modulation`` — one multiplier per chain state — the per-state
    gradient is the full gradient scaled by that state's multiplier; the
    multipliers are renormalized so their stationary mean is exactly one.
    """
    dim = int(config.get("dim", 4))
    curvature = float(config.get("curvature", 1.0))
    start_offset = float(config.get("start_offset", 1.0))
    if dim < 1:
        raise InvalidConfig(f"dim must be positive, got {dim}")
    if curvature <= 0.0:
        raise InvalidConfig(f"curvature must be positive, got {curvature}")

    modulation = config.get("modulation")
    if modulation is None:
        chain = FiniteChain(np.ones((1, 1)))
        scale_by_state = np.ones(1)
    else:
        scale_by_state = np.asarray(modulation, dtype=np.float64)
        kernel = np.asarray(config.get("kernel", _DEFAULT_KERNEL), dtype=np.float64)
        chain = FiniteChain(kernel)
        if scale_by_state.shape != (chain.n,):
            raise InvalidConfig(
                f"modulation must supply one multiplier per state, got shape "
                f"{scale_by_state.shape} for {chain.n} states"
            )

    pi = stationary(chain).weights
    mean = float(pi @ scale_by_state)
    if abs(mean) < 1e-12:
        raise InvalidConfig("modulation multipliers average to zero under the chain")
    scale_by_state = scale_by_state / mean

    x0 = start_offset * np.ones(dim) / np.sqrt(dim)
    growth_a = float(np.max(scale_by_state * scale_by_state))

    constants = ProblemConstants(
        mu=curvature,
        L=curvature,
        A=growth_a,
        B=0.0,
        C=0.0,
        lip_g=curvature * float(np.max(np.abs(scale_by_state))),
    )

    def objective(x: np.ndarray) -> float:
        return 0.5 * curvature * float(x @ x)

    def gradient(x: np.ndarray) -> np.ndarray:
        return curvature * x

    def markov_grad(x: np.ndarray, state: int) -> np.ndarray:
        return scale_by_state[state] * curvature * x

    grad_field = lambda x: np.outer(scale_by_state, curvature * x)

    return ProblemInstance(
        kind="quadratic",
        dim=dim,
        objective=objective,
        gradient=gradient,
        f_star=0.0,
        x_star=np.zeros(dim),
        x0=x0,
        markov_grad=markov_grad,
        noise=ChainPathNoise(chain, pi),
        constants=constants,
        tmix=mixing_time(chain, config.get("mixing_horizon")),
        tmix_certified=True,
        chain=chain,
        grad_field=grad_field,
        meta={
            "curvature": curvature,
            "modulation": scale_by_state.copy(),
            "config": dict(config),
        },
    )
