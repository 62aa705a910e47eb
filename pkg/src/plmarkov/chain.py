"""Finite Markov chains: stationary laws, total variation, mixing-time certification.

The mixing time certified here is the smallest integer ``t`` such that every
row of the ``k``-step transition matrix is within ``2**-(k // t)`` of the
stationary law in (unnormalized) total variation, for every ``k >= 1``.  The
certificate combines an exact matrix-power scan over a finite window with a
Dobrushin-coefficient tail argument that extends the guarantee to all larger
``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    IoFailure,
    MixingTimeNotFound,
    NonStochasticMatrix,
    NonUniqueStationary,
    SingularSystem,
)

_ROW_SUM_TOL = 1e-12
_EIGEN_TIE_TOL = 1e-10
_RESIDUAL_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Distribution:
    """A probability vector over a finite state space.

    Attributes:
        weights: Nonnegative 1-D array summing to one (within 1e-12).
    """

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DimensionMismatch("distribution weights must be a nonempty 1-D array")
        if np.any(w < 0):
            raise NonStochasticMatrix("distribution weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > _ROW_SUM_TOL * max(1, w.size):
            raise NonStochasticMatrix("distribution weights must sum to one")
        object.__setattr__(self, "weights", _readonly(w))

    @classmethod
    def point_mass(cls, size: int, index: int) -> "Distribution":
        w = np.zeros(size)
        w[index] = 1.0
        return cls(w)

    def __len__(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True, eq=False)
class FiniteChain:
    """An immutable row-stochastic transition matrix.

    Attributes:
        kernel: Square matrix with nonnegative entries and unit row sums
            (within 1e-12).  Stored read-only; derived factorizations are
            cached on first use.
    """

    kernel: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        p = np.asarray(self.kernel, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
            raise NonStochasticMatrix("kernel must be a nonempty square matrix")
        if np.any(p < 0):
            raise NonStochasticMatrix("kernel entries must be nonnegative")
        row_err = np.abs(p.sum(axis=1) - 1.0).max()
        if row_err > _ROW_SUM_TOL * p.shape[0]:
            raise NonStochasticMatrix(f"row sums deviate from one by {row_err:.3e}")
        object.__setattr__(self, "kernel", _readonly(p))

    @property
    def n(self) -> int:
        return int(self.kernel.shape[0])

    def row(self, state: int) -> np.ndarray:
        return self.kernel[state]

    def cdf(self) -> np.ndarray:
        """Row-wise cumulative kernel used for inverse-CDF sampling."""
        if "cdf" not in self._cache:
            c = np.cumsum(self.kernel, axis=1)
            c[:, -1] = 1.0
            self._cache["cdf"] = _readonly(c)
        return self._cache["cdf"]


def tv_distance(p, q) -> float:
    """Unnormalized total variation ``sum_i |p_i - q_i|``, in ``[0, 2]``.

    Args:
        p: A ``Distribution`` or 1-D weight array.
        q: A ``Distribution`` or 1-D weight array of the same length.

    Raises:
        DimensionMismatch: If the two vectors have different lengths.
    """
    pw = p.weights if isinstance(p, Distribution) else np.asarray(p, dtype=np.float64)
    qw = q.weights if isinstance(q, Distribution) else np.asarray(q, dtype=np.float64)
    if pw.shape != qw.shape:
        raise DimensionMismatch(f"length {pw.shape} vs {qw.shape}")
    return float(np.abs(pw - qw).sum())


def stationary(chain: FiniteChain) -> Distribution:
    """Unique stationary distribution of ``chain``.

    The eigenvalue-one multiplicity of the transposed kernel decides
    uniqueness (ties within 1e-10); the returned vector is refined by a
    least-squares solve and satisfies ``max|pi P - pi| <= 1e-10``.

    Raises:
        NonUniqueStationary: If the eigenvalue one is not simple.
        SingularSystem: If the refinement cannot meet the residual bound.
    """
    if "stationary" in chain._cache:
        return chain._cache["stationary"]
    p = chain.kernel
    n = chain.n
    if n == 1:
        pi = Distribution(np.ones(1))
        chain._cache["stationary"] = pi
        return pi
    eigvals = np.linalg.eigvals(p.T)
    ones = int(np.sum(np.abs(eigvals - 1.0) <= _EIGEN_TIE_TOL))
    if ones != 1:
        raise NonUniqueStationary(
            f"eigenvalue one has multiplicity {ones} (tolerance {_EIGEN_TIE_TOL:g})"
        )
    system = np.vstack([p.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi_vec = np.linalg.lstsq(system, rhs, rcond=None)[0]
    if pi_vec.min() < -1e-9:
        raise SingularSystem(f"stationary solve produced weight {pi_vec.min():.3e}")
    pi_vec = np.clip(pi_vec, 0.0, None)
    pi_vec /= pi_vec.sum()
    residual = np.abs(pi_vec @ p - pi_vec).max()
    if residual > _RESIDUAL_TOL:
        raise SingularSystem(f"stationary residual {residual:.3e} exceeds {_RESIDUAL_TOL:g}")
    pi = Distribution(pi_vec)
    chain._cache["stationary"] = pi
    return pi


def dobrushin_coefficient(matrix: np.ndarray) -> float:
    """Normalized Dobrushin contraction coefficient, ``max_ij tv(row_i, row_j)/2``."""
    m = np.asarray(matrix, dtype=np.float64)
    worst = 0.0
    for i in range(m.shape[0] - 1):
        diff = np.abs(m[i + 1 :] - m[i]).sum(axis=1).max()
        worst = max(worst, float(diff))
    return 0.5 * worst


def _worst_row_tv(powers_row_gaps: np.ndarray) -> float:
    return float(powers_row_gaps.max())


def _tau_profile(chain: FiniteChain, pi: np.ndarray, horizon: int) -> np.ndarray:
    """``tau[k] = max_z tv(P^k[z], pi)`` for ``k = 1..horizon`` (index 0 unused)."""
    p = chain.kernel
    taus = np.empty(horizon + 1)
    taus[0] = np.inf
    pk = p.copy()
    for k in range(1, horizon + 1):
        taus[k] = _worst_row_tv(np.abs(pk - pi).sum(axis=1))
        if k < horizon:
            pk = pk @ p
    return taus


def _window_certified(taus: np.ndarray, n: int, t: int, horizon: int) -> bool:
    ks = np.arange(1, horizon + 1)
    # Rows converged to the stationary law up to accumulated matmul round-off
    # count as exact, otherwise thresholds below ~1e-16*k are unmeetable.
    floors = 16.0 * n * np.finfo(np.float64).eps * ks
    thresholds = np.maximum(np.exp2(-(ks // t).astype(np.float64)), floors)
    return bool(np.all(taus[1:] <= thresholds))


def certify_mixing(chain: FiniteChain, t: int, k_max: int) -> bool:
    """Directly re-check the defining inequality for ``k = 1..k_max``.

    Uses exact matrix powers; intended for independent verification of a
    certified mixing time over a finite window.
    """
    if t < 1:
        return False
    pi = stationary(chain).weights
    taus = _tau_profile(chain, pi, k_max)
    return _window_certified(taus, chain.n, t, k_max)


def mixing_time(chain: FiniteChain, horizon: int | None = None) -> int:
    """Smallest certified mixing time of ``chain``.

    A candidate ``t`` is certified when (a) ``tau(k) <= 2**-(k//t)`` holds for
    every ``k`` in the scan window by exact matrix powers, and (b) the
    Dobrushin coefficient of the ``t``-step kernel is at most one half with at
    least two whole ``t``-windows inside the scan, which extends (a) to every
    ``k`` beyond the window.  Both conditions are monotone in ``t``, so the
    smallest certified value is found by bisection.

    Args:
        chain: The chain to certify.
        horizon: Scan-window length.  Defaults to ``max(64, 20 * t_half)``
            where ``t_half`` is the first ``k`` with worst-case total
            variation at most one.

    Raises:
        MixingTimeNotFound: If no ``t <= horizon // 2`` can be certified
            (periodic or reducible-in-practice chains).
        NonUniqueStationary: Propagated from the stationary solve.
    """
    pi = stationary(chain).weights
    p = chain.kernel
    n = chain.n

    if horizon is None:
        cap = 10_000
        pk = p.copy()
        t_half = None
        for k in range(1, cap + 1):
            if _worst_row_tv(np.abs(pk - pi).sum(axis=1)) <= 1.0:
                t_half = k
                break
            pk = pk @ p
        if t_half is None:
            raise MixingTimeNotFound(
                f"worst-case TV stayed above 1 for {cap} steps; chain looks periodic"
            )
        horizon = max(64, 20 * t_half)

    if horizon < 2:
        raise MixingTimeNotFound("horizon too short to certify any mixing time")

    taus = _tau_profile(chain, pi, horizon)
    t_max = horizon // 2

    if not _window_certified(taus, n, t_max, horizon):
        raise MixingTimeNotFound(
            f"no mixing time certified up to t = {t_max} within horizon {horizon}"
        )
    lo, hi = 1, t_max
    while lo < hi:
        mid = (lo + hi) // 2
        if _window_certified(taus, n, mid, horizon):
            hi = mid
        else:
            lo = mid + 1
    t_window = lo

    def beta_ok(t: int) -> bool:
        return dobrushin_coefficient(np.linalg.matrix_power(p, t)) <= 0.5

    if not beta_ok(t_max):
        raise MixingTimeNotFound(
            f"t-step kernel never contracts below 1/2 for t <= {t_max}"
        )
    lo, hi = 1, t_max
    while lo < hi:
        mid = (lo + hi) // 2
        if beta_ok(mid):
            hi = mid
        else:
            lo = mid + 1
    return max(t_window, lo)


def generator_from(seed) -> np.random.Generator:
    """Coerce an int seed, SeedSequence, or Generator into a Generator.

    Integer seeds map to the counter-based Philox bit generator so that
    per-trial streams can be split reproducibly.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def sample_path(chain: FiniteChain, start, length: int, seed) -> np.ndarray:
    """Sample ``length`` states, the first drawn from ``start``.

    Args:
        chain: Transition kernel to walk.
        start: A ``Distribution`` over states, or an int for a point mass.
        length: Number of states returned (``>= 1``).
        seed: Int seed, ``SeedSequence``, or ``Generator``; identical integer
            seeds give identical paths.
    """
    if isinstance(start, (int, np.integer)):
        start = Distribution.point_mass(chain.n, int(start))
    if len(start) != chain.n:
        raise DimensionMismatch("start distribution size does not match the chain")
    if length < 1:
        raise DimensionMismatch("length must be at least 1")
    rng = generator_from(seed)
    u = rng.random(length)
    cdf = chain.cdf()
    start_cdf = np.cumsum(start.weights)
    start_cdf[-1] = 1.0
    path = np.empty(length, dtype=np.int64)
    z = min(int(np.searchsorted(start_cdf, u[0], side="right")), chain.n - 1)
    path[0] = z
    for k in range(1, length):
        z = min(int(np.searchsorted(cdf[z], u[k], side="right")), chain.n - 1)
        path[k] = z
    return path


def fundamental_matrix(chain: FiniteChain) -> np.ndarray:
    """Inverse of ``I - P + 1 pi^T``, cached per chain.

    Raises:
        SingularSystem: If the solve misses the 1e-10 residual bound.
    """
    if "fundamental" in chain._cache:
        return chain._cache["fundamental"]
    pi = stationary(chain).weights
    n = chain.n
    system = np.eye(n) - chain.kernel + np.outer(np.ones(n), pi)
    try:
        lu = scipy.linalg.lu_factor(system)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise SingularSystem(str(exc)) from exc
    f = scipy.linalg.lu_solve(lu, np.eye(n))
    residual = np.abs(system @ f - np.eye(n)).max()
    if residual > _RESIDUAL_TOL:
        raise SingularSystem(f"fundamental-matrix residual {residual:.3e}")
    chain._cache["poisson_lu"] = lu
    chain._cache["fundamental"] = _readonly(f)
    return chain._cache["fundamental"]


def poisson_lu(chain: FiniteChain):
    """LU factorization of ``I - P + 1 pi^T`` (computed once per chain)."""
    if "poisson_lu" not in chain._cache:
        fundamental_matrix(chain)
    return chain._cache["poisson_lu"]


def chain_to_text(chain: FiniteChain) -> str:
    lines = [str(chain.n)]
    for row in chain.kernel:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def chain_from_text(text: str) -> FiniteChain:
    """Parse the plain-text chain format: first token n, then n*n probabilities."""
    tokens = text.split()
    if not tokens:
        raise ValueError("empty chain file")
    try:
        n = int(tokens[0])
        values = [float(tok) for tok in tokens[1 : 1 + n * n]]
    except ValueError as exc:
        raise ValueError(f"malformed chain file: {exc}") from exc
    if n < 1 or len(values) != n * n or len(tokens) != 1 + n * n:
        raise ValueError(f"expected {n}x{n} entries after the size line")
    return FiniteChain(np.array(values).reshape(n, n))


def load_chain(path) -> FiniteChain:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return chain_from_text(fh.read())
    except OSError as exc:
        raise IoFailure(f"cannot read chain file {path}: {exc}") from exc


def save_chain(chain: FiniteChain, path) -> None:
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(chain_to_text(chain))
    except OSError as exc:
        raise IoFailure(f"cannot write chain file {path}: {exc}") from exc


def random_chain(
    n: int, rng: np.random.Generator, smoothing: float = 0.3
) -> FiniteChain:
    """Random aperiodic irreducible chain: Dirichlet rows mixed with uniform."""
    rows = rng.dirichlet(np.ones(n), size=n)
    kernel = (1.0 - smoothing) * rows + smoothing / n
    kernel /= kernel.sum(axis=1, keepdims=True)
    return FiniteChain(kernel)


__all__ = [
    "Distribution",
    "FiniteChain",
    "certify_mixing",
    "chain_from_text",
    "chain_to_text",
    "dobrushin_coefficient",
    "fundamental_matrix",
    "generator_from",
    "load_chain",
    "mixing_time",
    "poisson_lu",
    "random_chain",
    "sample_path",
    "stationary",
    "tv_distance",
]
