"""Multi-trial suboptimality runners with selectable numeric backends.

The generic engine in :mod:`plmarkov.engine` executes one trial with full
recording; experiment-scale runs need only the per-step suboptimality gap
of hundreds of trials over long horizons.  This module provides that fast
path.  Every problem family with a hot loop gets a compiled kernel
(:mod:`numba`) and a vectorized pure-numpy fallback that marches blocks of
trials in lockstep; both consume exactly the variate streams the problem's
noise model pre-draws, so backends agree up to floating-point reordering
and any trial can be replayed through the generic engine for comparison.

Backend selection: the ``PLMARKOV_BACKEND`` environment variable (or the
``backend=`` argument) chooses ``"numba"`` or ``"numpy"``; the default is
numba when importable.  Thread count comes from ``PLMARKOV_THREADS`` (or
the ``threads=`` argument); trials are partitioned by index so results are
bitwise independent of the thread count and scheduling order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np

from plmarkov.chain import generator_from
from plmarkov.engine import StepSchedule, run
from plmarkov.errors import InvalidConfig, NonFinite
from plmarkov.problems.base import ProblemInstance

__all__ = [
    "available_backends",
    "resolve_backend",
    "resolve_threads",
    "run_trials",
    "trial_seeds",
]

_BLOCK_BYTES = 256_000_000

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is installed in CI
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def available_backends() -> tuple[str, ...]:
    """Backends usable in this process, preferred first."""
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def resolve_backend(backend: str | None = None) -> str:
    """Pick the numeric backend: explicit argument, then the
    ``PLMARKOV_BACKEND`` environment variable, then the best available."""
    choice = backend if backend is not None else os.environ.get("PLMARKOV_BACKEND")
    if choice is None:
        return available_backends()[0]
    choice = choice.strip().lower()
    if choice not in ("numba", "numpy"):
        raise InvalidConfig(f"backend must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not _HAVE_NUMBA:
        raise InvalidConfig("numba backend requested but numba is not importable")
    return choice


def resolve_threads(threads: int | None = None) -> int:
    """Pick the worker count: explicit argument, then ``PLMARKOV_THREADS``,
    then one."""
    if threads is None:
        env = os.environ.get("PLMARKOV_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise InvalidConfig(f"thread count must be >= 1, got {threads}")
    return threads


def trial_seeds(seed: int, trial_count: int) -> list[np.random.SeedSequence]:
    """Independent child seed sequences, one per trial, deterministic in
    ``seed`` and indexed by trial."""
    return np.random.SeedSequence(int(seed)).spawn(trial_count)


# ---------------------------------------------------------------------------
# Compiled single-trial kernels.
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _token_trial(u, start_cdf, cdf, gram, shift, quad, lin, c0, f_star, x0, a, k0):
    m = cdf.shape[0]
    horizon = u.shape[0] - 1
    x = x0.copy()
    delta = np.empty(horizon + 1)
    z = np.searchsorted(start_cdf, u[0], side="right")
    if z > m - 1:
        z = m - 1
    delta[0] = 0.5 * np.dot(x, np.dot(quad, x)) - np.dot(lin, x) + c0 - f_star
    for k in range(horizon):
        g = np.dot(gram[z], x) - shift[z]
        alpha = a / (k + k0)
        x = x - alpha * g
        z_next = np.searchsorted(cdf[z], u[k + 1], side="right")
        if z_next > m - 1:
            z_next = m - 1
        z = z_next
        delta[k + 1] = 0.5 * np.dot(x, np.dot(quad, x)) - np.dot(lin, x) + c0 - f_star
    return delta


@njit(cache=True, nogil=True)
def _subsample_trial(u0, u, start_cdf, feats, targs, b, rho, scale, f_star, x0, a, k0):
    n, d = feats.shape
    horizon = u.shape[0]
    phases = np.empty(n, np.int64)
    for i in range(n):
        idx = np.searchsorted(start_cdf, u0[i], side="right")
        phases[i] = idx if idx < b - 1 else b - 1
    x = x0.copy()
    delta = np.empty(horizon + 1)
    ss = 0.0
    for i in range(n):
        r = np.dot(feats[i], x) - targs[i]
        ss += r * r
    delta[0] = scale * (0.5 * ss / n) - f_star
    g = np.empty(d)
    for k in range(horizon):
        count = 0
        for j in range(d):
            g[j] = 0.0
        for i in range(n):
            if phases[i] == b - 1:
                r = np.dot(feats[i], x) - targs[i]
                for j in range(d):
                    g[j] += r * feats[i, j]
                count += 1
        if count > 0:
            step = a / (k + k0) / count
            for j in range(d):
                x[j] -= step * g[j]
        for i in range(n):
            if phases[i] > 0:
                phases[i] -= 1
            elif u[k, i] < rho:
                phases[i] = b - 1
        ss = 0.0
        for i in range(n):
            r = np.dot(feats[i], x) - targs[i]
            ss += r * r
        delta[k + 1] = scale * (0.5 * ss / n) - f_star
    return delta


@njit(cache=True, nogil=True)
def _sysid_gap(amat, true_mat, sigma):
    d = true_mat.shape[0]
    total = 0.0
    for i in range(d):
        for j in range(d):
            es = 0.0
            for l in range(d):
                es += (amat[i, l] - true_mat[i, l]) * sigma[l, j]
            total += es * (amat[i, j] - true_mat[i, j])
    return 0.5 * total


@njit(cache=True, nogil=True)
def _sysid_trial(normals, radii, true_mat, bound, sigma, x0, a, k0):
    d = true_mat.shape[0]
    horizon = radii.shape[0]
    amat = x0.copy().reshape(d, d)
    z = np.zeros(d)
    delta = np.empty(horizon + 1)
    delta[0] = _sysid_gap(amat, true_mat, sigma)
    inv_d = 1.0 / d
    for k in range(horizon):
        z_next = np.dot(true_mat, z)
        nrm = 0.0
        for j in range(d):
            nrm += normals[k, j] * normals[k, j]
        nrm = np.sqrt(nrm)
        if nrm > 0.0 and bound > 0.0:
            radial = radii[k] ** inv_d
            for j in range(d):
                z_next[j] += bound * radial * normals[k, j] / nrm
        alpha = a / (k + k0)
        az = np.dot(amat, z)
        for i in range(d):
            resid = az[i] - z_next[i]
            for j in range(d):
                amat[i, j] -= alpha * resid * z[j]
        z = z_next
        delta[k + 1] = _sysid_gap(amat, true_mat, sigma)
    return delta


# ---------------------------------------------------------------------------
# Per-family packs: everything a kernel needs, extracted once per call.
# ---------------------------------------------------------------------------


def _token_pack(problem: ProblemInstance) -> dict:
    model = problem.meta["model"]
    d = problem.dim
    nodes = len(model.node_features)
    gram = np.empty((nodes, d, d))
    shift = np.empty((nodes, d))
    for i, (feats, targs, rows) in enumerate(
        zip(model.node_features, model.node_targets, model.row_counts)
    ):
        gram[i] = feats.T @ feats / rows
        shift[i] = feats.T @ targs / rows
    total = model.total_rows
    quad = model.features.T @ model.features / total
    lin = model.features.T @ model.targets / total
    c0 = 0.5 * float(model.targets @ model.targets) / total
    return {
        "start_cdf": problem.noise.start_cdf,
        "cdf": problem.chain.cdf(),
        "gram": gram,
        "shift": shift,
        "quad": quad,
        "lin": lin,
        "c0": c0,
        "f_star": float(problem.f_star),
        "x0": np.ascontiguousarray(problem.x0, dtype=np.float64),
    }


def _subsample_pack(problem: ProblemInstance) -> dict:
    model = problem.meta["model"]
    return {
        "start_cdf": problem.noise.start_cdf,
        "feats": np.ascontiguousarray(model.features),
        "targs": np.ascontiguousarray(model.targets),
        "b": int(problem.meta["b"]),
        "rho": float(problem.meta["rho"]),
        "scale": float(problem.meta["selection_mass"]),
        "f_star": float(problem.f_star),
        "x0": np.ascontiguousarray(problem.x0, dtype=np.float64),
    }


def _sysid_pack(problem: ProblemInstance) -> dict:
    return {
        "true_mat": np.ascontiguousarray(problem.meta["true_matrix"]),
        "bound": float(problem.noise.noise_bound),
        "sigma": np.ascontiguousarray(problem.meta["sigma"]),
        "x0": np.ascontiguousarray(problem.x0, dtype=np.float64),
    }


# ---------------------------------------------------------------------------
# Vectorized numpy fallbacks: march a block of trials in lockstep.
# ---------------------------------------------------------------------------


def _token_block_numpy(
    draws: Sequence[Mapping[str, np.ndarray]], pack: dict, a: float, k0: float
) -> np.ndarray:
    u = np.stack([dr["u"] for dr in draws])
    trials, steps = u.shape
    horizon = steps - 1
    m = pack["cdf"].shape[0]
    quad, lin, c0, f_star = pack["quad"], pack["lin"], pack["c0"], pack["f_star"]
    x = np.tile(pack["x0"], (trials, 1))
    states = np.minimum(
        np.searchsorted(pack["start_cdf"], u[:, 0], side="right"), m - 1
    )
    delta = np.empty((trials, horizon + 1))

    def gaps(xs: np.ndarray) -> np.ndarray:
        return (
            0.5 * np.einsum("ti,ij,tj->t", xs, quad, xs) - xs @ lin + c0 - f_star
        )

    delta[:, 0] = gaps(x)
    gram, shift, cdf = pack["gram"], pack["shift"], pack["cdf"]
    for k in range(horizon):
        g = np.einsum("tij,tj->ti", gram[states], x) - shift[states]
        x = x - (a / (k + k0)) * g
        rows = cdf[states]
        states = np.minimum((rows <= u[:, k + 1][:, None]).sum(axis=1), m - 1)
        delta[:, k + 1] = gaps(x)
    return delta


def _subsample_block_numpy(
    draws: Sequence[Mapping[str, np.ndarray]], pack: dict, a: float, k0: float
) -> np.ndarray:
    u0 = np.stack([dr["u0"] for dr in draws])
    u = np.stack([dr["u"] for dr in draws])
    trials, horizon, n = u.shape
    b, rho = pack["b"], pack["rho"]
    feats, targs = pack["feats"], pack["targs"]
    scale, f_star = pack["scale"], pack["f_star"]
    phases = np.minimum(
        np.searchsorted(pack["start_cdf"], u0.ravel(), side="right").reshape(
            trials, n
        ),
        b - 1,
    )
    x = np.tile(pack["x0"], (trials, 1))
    delta = np.empty((trials, horizon + 1))
    residual = x @ feats.T - targs
    delta[:, 0] = scale * (0.5 * (residual * residual).sum(axis=1) / n) - f_star
    for k in range(horizon):
        mask = phases == b - 1
        counts = mask.sum(axis=1)
        g = np.where(mask, residual, 0.0) @ feats
        safe = np.maximum(counts, 1)
        x = x - (a / (k + k0)) * g / safe[:, None]
        flips = (phases == 0) & (u[:, k, :] < rho)
        phases = np.where(phases > 0, phases - 1, np.where(flips, b - 1, 0))
        residual = x @ feats.T - targs
        delta[:, k + 1] = scale * (0.5 * (residual * residual).sum(axis=1) / n) - f_star
    return delta


def _sysid_block_numpy(
    draws: Sequence[Mapping[str, np.ndarray]], pack: dict, a: float, k0: float
) -> np.ndarray:
    normals = np.stack([dr["normals"] for dr in draws])
    radii = np.stack([dr["radii"] for dr in draws])
    trials, horizon, d = normals.shape
    true_mat, bound, sigma = pack["true_mat"], pack["bound"], pack["sigma"]
    amat = np.tile(pack["x0"].reshape(d, d), (trials, 1, 1))
    z = np.zeros((trials, d))
    delta = np.empty((trials, horizon + 1))

    def gaps(mats: np.ndarray) -> np.ndarray:
        err = mats - true_mat
        return 0.5 * np.einsum("til,lj,tij->t", err, sigma, err)

    delta[:, 0] = gaps(amat)
    inv_d = 1.0 / d
    for k in range(horizon):
        z_next = z @ true_mat.T
        if bound > 0.0:
            norms = np.linalg.norm(normals[:, k, :], axis=1)
            nonzero = norms > 0.0
            w = np.zeros((trials, d))
            radial = bound * radii[:, k] ** inv_d
            w[nonzero] = (
                radial[nonzero, None] * normals[nonzero, k, :] / norms[nonzero, None]
            )
            z_next = z_next + w
        alpha = a / (k + k0)
        resid = np.einsum("tij,tj->ti", amat, z) - z_next
        amat = amat - alpha * np.einsum("ti,tj->tij", resid, z)
        z = z_next
        delta[:, k + 1] = gaps(amat)
    return delta


_FAST_FAMILIES = {
    "token": (
        _token_pack,
        lambda dr, p, a, k0: _token_trial(
            dr["u"], p["start_cdf"], p["cdf"], p["gram"], p["shift"], p["quad"],
            p["lin"], p["c0"], p["f_star"], p["x0"], a, k0,
        ),
        _token_block_numpy,
        lambda horizon, problem: (horizon + 1) * 8,
    ),
    "subsample": (
        _subsample_pack,
        lambda dr, p, a, k0: _subsample_trial(
            dr["u0"], dr["u"], p["start_cdf"], p["feats"], p["targs"], p["b"],
            p["rho"], p["scale"], p["f_star"], p["x0"], a, k0,
        ),
        _subsample_block_numpy,
        lambda horizon, problem: horizon * problem.meta["model"].n_points * 8,
    ),
    "sysid": (
        _sysid_pack,
        lambda dr, p, a, k0: _sysid_trial(
            dr["normals"], dr["radii"], p["true_mat"], p["bound"], p["sigma"],
            p["x0"], a, k0,
        ),
        _sysid_block_numpy,
        lambda horizon, problem: horizon * (problem.noise.dim + 1) * 8,
    ),
}


def _map_tasks(tasks, worker, threads: int) -> None:
    if threads == 1 or len(tasks) <= 1:
        for task in tasks:
            worker(task)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(worker, tasks))


def run_trials(
    problem: ProblemInstance,
    schedule: StepSchedule,
    horizon: int,
    trial_count: int,
    seed: int,
    *,
    backend: str | None = None,
    threads: int | None = None,
) -> np.ndarray:
    """Suboptimality curves for ``trial_count`` independent trials.

    Returns a ``(trial_count, horizon + 1)`` array whose row ``i`` is the
    per-step gap of the trial driven by the ``i``-th child of ``seed``.
    Rows are pure functions of ``(problem, schedule, horizon, seed, i)`` —
    thread count and scheduling cannot change them.  A diverged trial
    (non-finite values) keeps its row; callers decide how to treat it.

    Problem families with compiled kernels run on the resolved backend;
    any other family falls back to the generic engine trial by trial.
    """
    if horizon < 1:
        raise InvalidConfig(f"horizon must be >= 1, got {horizon}")
    if trial_count < 1:
        raise InvalidConfig(f"trial_count must be >= 1, got {trial_count}")
    chosen = resolve_backend(backend)
    workers = resolve_threads(threads)
    children = trial_seeds(seed, trial_count)
    out = np.empty((trial_count, horizon + 1))
    a, k0 = schedule.a, schedule.K0

    family = _FAST_FAMILIES.get(problem.kind)
    if family is None:

        def run_one(i: int) -> None:
            try:
                traj = run(problem, schedule, horizon, children[i])
                out[i] = traj.suboptimality
            except NonFinite:
                out[i] = np.nan

        _map_tasks(range(trial_count), run_one, workers)
        return out

    pack_fn, numba_trial, numpy_block, bytes_per_trial = family
    pack = pack_fn(problem)

    if chosen == "numba":

        def run_kernel(i: int) -> None:
            draws = problem.noise.draws(generator_from(children[i]), horizon)
            out[i] = numba_trial(draws, pack, a, k0)

        _map_tasks(range(trial_count), run_kernel, workers)
        return out

    per_trial = max(1, bytes_per_trial(horizon, problem))
    block = max(1, min(trial_count, _BLOCK_BYTES // per_trial))
    starts = list(range(0, trial_count, block))

    def run_block(start: int) -> None:
        stop = min(start + block, trial_count)
        draws = [
            problem.noise.draws(generator_from(children[i]), horizon)
            for i in range(start, stop)
        ]
        out[start:stop] = numpy_block(draws, pack, a, k0)

    _map_tasks(starts, run_block, workers)
    return out
