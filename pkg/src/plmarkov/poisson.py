"""Poisson-equation solver for the Markov gradient noise decomposition.

For a finite chain with kernel ``P`` and stationary law ``pi``, and a gradient
field ``g_at_x`` whose ``pi``-average equals the full gradient, the solution
``V`` of ``(I - P) V = g_at_x - 1 grad_f^T`` with ``pi^T V = 0`` splits each
per-step noise increment into a martingale difference plus a telescoping
correction, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np
import scipy.linalg

from .chain import FiniteChain, poisson_lu, stationary
from .errors import NotCentered, SingularSystem
from .reports import CheckResult

_CENTER_TOL = 1e-8
_RESIDUAL_TOL = 1e-10
# Relative headroom for inequalities that are exact in reals but evaluated in
# floating point.
_FP_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    """Solution of the Poisson equation at one anchor point.

    Attributes:
        chain: The driving chain.
        values: ``(n, d)`` array, row ``z`` holding ``V(x, z)``.
        g_at_x: ``(n, d)`` array of per-state gradient evaluations.
        grad_f: The ``pi``-average of ``g_at_x``.
        pi: Stationary weights of the chain.
    """

    chain: FiniteChain
    values: np.ndarray
    g_at_x: np.ndarray
    grad_f: np.ndarray
    pi: np.ndarray


def solve_poisson(
    chain: FiniteChain, g_at_x: np.ndarray, grad_f: np.ndarray | None = None
) -> PoissonSolution:
    """Solve ``(I - P) V = g - 1 grad^T`` with ``pi^T V = 0``.

    Args:
        chain: Finite chain with a unique stationary law.
        g_at_x: ``(n, d)`` per-state gradient field at the anchor point.
        grad_f: Stationary mean of ``g_at_x``.  Computed when omitted; when
            supplied it must match the ``pi``-average within 1e-8.

    Raises:
        NotCentered: If ``grad_f`` is not the stationary mean of ``g_at_x``.
        SingularSystem: If the solve misses the residual tolerance.
    """
    g = np.asarray(g_at_x, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] != chain.n:
        raise NotCentered(f"g_at_x has {g.shape[0]} rows for a {chain.n}-state chain")
    pi = stationary(chain).weights
    mean = pi @ g
    if grad_f is None:
        grad = mean
    else:
        grad = np.asarray(grad_f, dtype=np.float64).reshape(-1)
        gap = np.abs(mean - grad).max()
        if gap > _CENTER_TOL:
            raise NotCentered(
                f"pi-average of g deviates from grad_f by {gap:.3e} (> {_CENTER_TOL:g})"
            )
    rhs = g - grad[None, :]
    v = scipy.linalg.lu_solve(poisson_lu(chain), rhs)
    scale = max(1.0, float(np.abs(rhs).max()))
    residual = np.abs((np.eye(chain.n) - chain.kernel) @ v - rhs).max()
    if residual > _RESIDUAL_TOL * scale:
        raise SingularSystem(f"Poisson residual {residual:.3e}")
    centering = np.abs(pi @ v).max()
    if centering > _RESIDUAL_TOL * max(1.0, float(np.abs(v).max())):
        raise SingularSystem(f"pi^T V = {centering:.3e}, not centered")
    return PoissonSolution(chain=chain, values=v, g_at_x=g, grad_f=grad, pi=pi)


def series_solution(
    chain: FiniteChain,
    g_at_x: np.ndarray,
    grad_f: np.ndarray | None = None,
    terms: int = 200,
) -> np.ndarray:
    """Truncated series ``sum_{l=0}^{terms} P^l (g - 1 grad^T)``.

    Independent of the linear solve; converges geometrically for chains with
    a spectral gap and shares the ``pi^T V = 0`` normalization.
    """
    g = np.asarray(g_at_x, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    pi = stationary(chain).weights
    grad = pi @ g if grad_f is None else np.asarray(grad_f, dtype=np.float64)
    term = g - grad[None, :]
    acc = term.copy()
    for _ in range(terms):
        term = chain.kernel @ term
        acc += term
    return acc


def decompose_step(
    sol: PoissonSolution, z_from: int, z_to: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split one transition into (martingale part, telescoping part).

    Returns ``(mtilde, d_corr)`` where ``mtilde = V[z_to] - P[z_from] V`` has
    conditional mean zero given ``z_from`` and ``d_corr = V[z_to] - V[z_from]``.
    Their difference reproduces the centered gradient exactly:
    ``mtilde - d_corr = g[z_from] - grad_f``.
    """
    v = sol.values
    predicted = sol.chain.kernel[z_from] @ v
    mtilde = v[z_to] - predicted
    d_corr = v[z_to] - v[z_from]
    return mtilde, d_corr


def verify_v_bounds(
    sol: PoissonSolution,
    tmix: int,
    A: float,
    B: float,
    C: float,
    L: float,
    delta_x: float,
) -> list[CheckResult]:
    """Check the mixing-time norm bounds on ``V`` and its martingale part.

    Three inequalities at the solution's anchor point, with ``u = 2AL + B``:
    ``max_z |V| <= 2 t sqrt(d) max_z |g|``;
    ``max_z |V|^2 <= 4 t^2 d (u delta_x + C)``;
    ``max |V[z'] - P[z]V|^2 <= 16 t^2 d (u delta_x + C)`` over reachable
    transitions.
    """
    v = sol.values
    n, d = v.shape
    u = 2.0 * A * L + B
    v_norms = np.linalg.norm(v, axis=1)
    g_sup = float(np.linalg.norm(sol.g_at_x, axis=1).max())

    out = []
    lhs1 = float(v_norms.max())
    rhs1 = 2.0 * tmix * sqrt(d) * g_sup
    out.append(
        CheckResult("v_sup_bound", lhs1 <= rhs1 * (1 + _FP_SLACK), lhs1, rhs1)
    )

    lhs2 = float((v_norms**2).max())
    rhs2 = 4.0 * tmix * tmix * d * (u * delta_x + C)
    out.append(
        CheckResult("v_sq_bound", lhs2 <= rhs2 * (1 + _FP_SLACK), lhs2, rhs2)
    )

    predicted = sol.chain.kernel @ v
    worst = 0.0
    for z_from in range(n):
        reachable = np.flatnonzero(sol.chain.kernel[z_from] > 0.0)
        gaps = np.linalg.norm(v[reachable] - predicted[z_from], axis=1)
        worst = max(worst, float(gaps.max()))
    lhs3 = worst**2
    rhs3 = 16.0 * tmix * tmix * d * (u * delta_x + C)
    out.append(
        CheckResult("mtilde_sq_bound", lhs3 <= rhs3 * (1 + _FP_SLACK), lhs3, rhs3)
    )
    return out


def verify_v_lipschitz(
    chain: FiniteChain,
    g_map,
    x1: np.ndarray,
    x2: np.ndarray,
    tmix: int,
    L_g: float,
) -> CheckResult:
    """Check ``max_z |V(x1,z) - V(x2,z)| <= 2 t L_g sqrt(d) |x1 - x2|``.

    Args:
        g_map: Callable mapping an iterate ``x`` to its ``(n, d)`` per-state
            gradient field.
    """
    v1 = solve_poisson(chain, g_map(np.asarray(x1))).values
    v2 = solve_poisson(chain, g_map(np.asarray(x2))).values
    d = v1.shape[1]
    lhs = float(np.linalg.norm(v1 - v2, axis=1).max())
    rhs = 2.0 * tmix * L_g * sqrt(d) * float(np.linalg.norm(np.asarray(x1) - np.asarray(x2)))
    return CheckResult("v_lipschitz", lhs <= rhs * (1 + _FP_SLACK), lhs, rhs)


__all__ = [
    "PoissonSolution",
    "decompose_step",
    "series_solution",
    "solve_poisson",
    "verify_v_bounds",
    "verify_v_lipschitz",
]
