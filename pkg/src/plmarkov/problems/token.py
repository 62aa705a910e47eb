"""Decentralized least squares driven by a roaming-token random walk.

The data lives in per-node shards of one global regression; a single token
carries the iterate over a communication graph and each step applies the
gradient of the hosting node's local loss.  The walk is a Metropolized
random walk synthesized so that its stationary law equals the data-mass
weights, which makes the stationary average of the local gradients equal
the global gradient exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from plmarkov.chain import (
    Distribution,
    FiniteChain,
    generator_from,
    mixing_time,
    stationary,
)
from plmarkov.errors import (
    DegenerateConstants,
    DimensionMismatch,
    DisconnectedGraph,
    InvalidConfig,
    SingularSystem,
)
from plmarkov.problems.base import ChainPathNoise, ProblemConstants, ProblemInstance

__all__ = [
    "TokenRegression",
    "graph_adjacency",
    "token_build",
    "token_grad",
    "token_constants",
    "build_token_instance",
]

#: Self-loop weight mixed into the synthesized walk so bipartite graphs
#: cannot produce a periodic kernel.
LAZY_WEIGHT = 1e-3

_STATIONARY_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TokenRegression:
    """Sharded least-squares data plus the communication graph.

    Attributes:
        node_features: Per-node design blocks, each of shape ``(N_i, dim)``.
        node_targets: Per-node target blocks, each of shape ``(N_i,)``.
        adjacency: Symmetric 0/1 matrix without self-loops.
        features: All design blocks stacked, shape ``(N, dim)``.
        targets: All targets stacked, shape ``(N,)``.
        row_counts: ``N_i`` per node.
        weights: Data-mass weights ``N_i / N`` (they sum to one).
    """

    node_features: tuple[np.ndarray, ...]
    node_targets: tuple[np.ndarray, ...]
    adjacency: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    row_counts: np.ndarray
    weights: np.ndarray

    @property
    def nodes(self) -> int:
        return len(self.node_features)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def total_rows(self) -> int:
        return int(self.features.shape[0])


def graph_adjacency(
    kind: str, nodes: int, chords: Sequence[Sequence[int]] = ()
) -> np.ndarray:
    """Adjacency matrix for a named graph family plus optional extra edges.

    Supported kinds: ``complete``, ``ring``, ``path``, ``star`` (center 0).
    ``chords`` lists extra undirected edges as ``(i, j)`` pairs.
    """
    if nodes < 1:
        raise InvalidConfig(f"graph needs at least one node, got {nodes}")
    adj = np.zeros((nodes, nodes), dtype=np.int64)

    def connect(i: int, j: int) -> None:
        if not (0 <= i < nodes and 0 <= j < nodes):
            raise InvalidConfig(f"edge ({i}, {j}) leaves the node range 0..{nodes - 1}")
        if i == j:
            raise InvalidConfig(f"self-loop edge ({i}, {j}) is not allowed")
        adj[i, j] = adj[j, i] = 1

    if kind == "complete":
        for i in range(nodes):
            for j in range(i + 1, nodes):
                connect(i, j)
    elif kind == "ring":
        if nodes == 2:
            connect(0, 1)
        elif nodes >= 3:
            for i in range(nodes):
                connect(i, (i + 1) % nodes)
    elif kind == "path":
        for i in range(nodes - 1):
            connect(i, i + 1)
    elif kind == "star":
        for i in range(1, nodes):
            connect(0, i)
    else:
        raise InvalidConfig(f"unknown graph kind {kind!r}")
    for edge in chords:
        if len(edge) != 2:
            raise InvalidConfig(f"chord {edge!r} is not a pair")
        connect(int(edge[0]), int(edge[1]))
    return adj


def _validate_adjacency(graph) -> np.ndarray:
    adj = np.asarray(graph)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] == 0:
        raise DimensionMismatch("adjacency must be a nonempty square matrix")
    if not np.array_equal(adj, adj.T):
        raise InvalidConfig("adjacency must be symmetric")
    if np.any((adj != 0) & (adj != 1)):
        raise InvalidConfig("adjacency entries must be 0 or 1")
    if np.any(np.diag(adj) != 0):
        raise InvalidConfig("adjacency must have an empty diagonal")
    return adj.astype(np.int64)


def _require_connected(adj: np.ndarray) -> None:
    nodes = adj.shape[0]
    seen = np.zeros(nodes, dtype=bool)
    frontier = [0]
    seen[0] = True
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                frontier.append(int(j))
    if not seen.all():
        missing = np.flatnonzero(~seen)
        raise DisconnectedGraph(
            f"graph is disconnected; nodes {missing.tolist()} are unreachable from node 0"
        )


def _metropolized_walk(adj: np.ndarray, target: np.ndarray) -> FiniteChain:
    """Kernel with uniform-over-neighbors proposals accepted toward ``target``.

    Acceptance ``min(1, target_j deg_i / (target_i deg_j))`` gives detailed
    balance with respect to ``target``; a fixed self-loop weight keeps the
    kernel aperiodic on bipartite graphs.
    """
    nodes = adj.shape[0]
    if nodes == 1:
        return FiniteChain(np.ones((1, 1)))
    degrees = adj.sum(axis=1)
    kernel = np.zeros((nodes, nodes))
    for i in range(nodes):
        for j in np.flatnonzero(adj[i]):
            accept = min(1.0, (target[j] * degrees[i]) / (target[i] * degrees[j]))
            kernel[i, j] = accept / degrees[i]
        kernel[i, i] = 1.0 - kernel[i].sum()
    kernel = (1.0 - LAZY_WEIGHT) * kernel + LAZY_WEIGHT * np.eye(nodes)
    return FiniteChain(kernel)


def token_build(data, graph, target_pi) -> tuple[TokenRegression, FiniteChain]:
    """Assemble the sharded regression and synthesize its driving walk.

    Args:
        data: Sequence of ``(features_i, targets_i)`` shards, one per node.
        graph: Symmetric 0/1 adjacency matrix over the nodes.
        target_pi: Desired stationary law of the walk; a ``Distribution`` or
            a strictly positive weight vector.

    Returns:
        The assembled :class:`TokenRegression` and a :class:`FiniteChain`
        whose stationary distribution matches ``target_pi`` within 1e-10.

    Raises:
        DisconnectedGraph: If the graph does not connect all nodes.
        InvalidConfig: On malformed adjacency or nonpositive target weights.
        DimensionMismatch: On inconsistent shard shapes.
    """
    adj = _validate_adjacency(graph)
    nodes = adj.shape[0]
    if len(data) != nodes:
        raise DimensionMismatch(f"{len(data)} data shards for {nodes} graph nodes")
    if nodes > 1:
        _require_connected(adj)

    target = target_pi.weights if isinstance(target_pi, Distribution) else np.asarray(
        target_pi, dtype=np.float64
    )
    if target.shape != (nodes,):
        raise DimensionMismatch(
            f"target weights have shape {target.shape}, expected ({nodes},)"
        )
    if np.any(target <= 0.0):
        raise InvalidConfig("target stationary weights must be strictly positive")
    target = target / target.sum()

    feats: list[np.ndarray] = []
    targs: list[np.ndarray] = []
    dim: int | None = None
    for i, (a_i, b_i) in enumerate(data):
        a_arr = np.asarray(a_i, dtype=np.float64)
        b_arr = np.asarray(b_i, dtype=np.float64)
        if a_arr.ndim != 2 or a_arr.shape[0] < 1:
            raise DimensionMismatch(f"shard {i} features must be a nonempty 2-D block")
        if dim is None:
            dim = a_arr.shape[1]
        if a_arr.shape[1] != dim:
            raise DimensionMismatch(
                f"shard {i} has {a_arr.shape[1]} columns, expected {dim}"
            )
        if b_arr.shape != (a_arr.shape[0],):
            raise DimensionMismatch(
                f"shard {i} targets have shape {b_arr.shape}, expected ({a_arr.shape[0]},)"
            )
        feats.append(_readonly(a_arr))
        targs.append(_readonly(b_arr))

    counts = np.array([a.shape[0] for a in feats], dtype=np.int64)
    problem = TokenRegression(
        node_features=tuple(feats),
        node_targets=tuple(targs),
        adjacency=_readonly(adj).astype(np.int64),
        features=_readonly(np.vstack(feats)),
        targets=_readonly(np.concatenate(targs)),
        row_counts=counts,
        weights=_readonly(counts / counts.sum()),
    )

    chain = _metropolized_walk(adj, target)
    achieved = stationary(chain).weights
    gap = float(np.abs(achieved - target).max())
    if gap > _STATIONARY_TOL:
        raise SingularSystem(
            f"synthesized walk misses its target stationary law by {gap:.3e}"
        )
    return problem, chain


def token_grad(problem: TokenRegression, theta: np.ndarray, node: int) -> np.ndarray:
    """Gradient of node ``node``'s local loss at ``theta``.

    The local loss is half the mean squared residual over the node's shard,
    so the gradient is ``A_i^T (A_i theta - b_i) / N_i``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (problem.dim,):
        raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({problem.dim},)")
    if not (0 <= int(node) < problem.nodes):
        raise DimensionMismatch(f"node {node} outside 0..{problem.nodes - 1}")
    a_i = problem.node_features[int(node)]
    b_i = problem.node_targets[int(node)]
    return a_i.T @ (a_i @ theta - b_i) / a_i.shape[0]


def token_constants(problem: TokenRegression) -> tuple[ProblemConstants, dict]:
    """Certified curvature and noise-growth constants of the global loss.

    The gradient-domination constant uses the squared smallest nonzero
    singular value of the stacked design over the total row count (the
    convention that the sampled gradient-domination check certifies); the
    worst-case local-gradient growth is restated against the gap
    ``loss - min loss`` by folding the optimal loss into the constant term.

    Returns:
        The :class:`ProblemConstants` bundle and a dict of extras:
        ``minimizer`` (least-squares pseudo-solution), ``f_star``,
        ``sigma_max``, ``sigma_min_nonzero``, and ``pl_convention``.
    """
    a = problem.features
    b = problem.targets
    n_total = problem.total_rows
    svals = np.linalg.svd(a, compute_uv=False)
    if not svals[0] > 0.0:
        raise DegenerateConstants("stacked feature matrix is identically zero")
    tol = max(a.shape) * np.finfo(np.float64).eps * svals[0]
    nonzero = svals[svals > tol]
    sigma_min_nz = float(nonzero[-1])
    sigma_max = float(svals[0])

    theta_hat = np.linalg.lstsq(a, b, rcond=None)[0]
    residual = a @ theta_hat - b
    f_star = max(0.5 * float(residual @ residual) / n_total, 0.0)

    growth = 0.0
    lip = 0.0
    for a_i in problem.node_features:
        top = float(np.linalg.norm(a_i, 2))
        n_i = a_i.shape[0]
        growth = max(growth, 2.0 * n_total * top * top / (n_i * n_i))
        lip = max(lip, top * top / n_i)

    constants = ProblemConstants(
        mu=sigma_min_nz * sigma_min_nz / n_total,
        L=sigma_max * sigma_max / n_total,
        A=0.0,
        B=growth,
        C=growth * f_star,
        lip_g=lip,
    )
    extras = {
        "minimizer": theta_hat,
        "f_star": f_star,
        "sigma_max": sigma_max,
        "sigma_min_nonzero": sigma_min_nz,
        "pl_convention": "squared smallest nonzero singular value over total rows",
    }
    return constants, extras


def _as_row_counts(spec, nodes: int) -> list[int]:
    if isinstance(spec, (int, np.integer)):
        counts = [int(spec)] * nodes
    else:
        counts = [int(v) for v in spec]
        if len(counts) != nodes:
            raise InvalidConfig(
                f"rows_per_node lists {len(counts)} entries for {nodes} nodes"
            )
    if any(c < 1 for c in counts):
        raise InvalidConfig("every node needs at least one data row")
    return counts


def build_token_instance(config: Mapping) -> ProblemInstance:
    """Materialize a roaming-token regression instance from a config block.

    Recognized keys (with defaults): ``nodes`` (8), ``dim`` (10),
    ``rows_per_node`` (20; an int or a per-node list), ``graph``
    ("complete"), ``chords`` (empty), ``adjacency`` (explicit matrix,
    overrides ``graph``), ``data_seed`` (0), ``label_noise`` (0.0; standard
    deviation of target perturbations, which lifts the optimal loss above
    zero and with it the constant noise term), ``start_offset`` (1.0;
    distance of the start from the minimizer along the normalized all-ones
    direction), ``mixing_horizon`` (scan window override).

    The walk's mixing window is certified by exact matrix powers, so the
    graph must spread mass fast enough for the one-step rows to sit within
    unnormalized total variation 1 of the target law; dense graphs
    (``complete``) do, sparse rings do not.
    """
    nodes = int(config.get("nodes", 8))
    dim = int(config.get("dim", 10))
    counts = _as_row_counts(config.get("rows_per_node", 20), nodes)
    label_noise = float(config.get("label_noise", 0.0))
    start_offset = float(config.get("start_offset", 1.0))
    if label_noise < 0.0:
        raise InvalidConfig(f"label_noise must be nonnegative, got {label_noise}")
    if dim < 1:
        raise InvalidConfig(f"dim must be >= 1, got {dim}")

    if "adjacency" in config:
        adj = _validate_adjacency(config["adjacency"])
        if adj.shape[0] != nodes:
            raise InvalidConfig(
                f"explicit adjacency is {adj.shape[0]}x{adj.shape[0]} for {nodes} nodes"
            )
    else:
        adj = graph_adjacency(
            str(config.get("graph", "complete")), nodes, config.get("chords", ())
        )

    rng = generator_from(int(config.get("data_seed", 0)))
    w_true = rng.standard_normal(dim)
    data = []
    for n_i in counts:
        a_i = rng.standard_normal((n_i, dim))
        b_i = a_i @ w_true
        if label_noise > 0.0:
            b_i = b_i + label_noise * rng.standard_normal(n_i)
        data.append((a_i, b_i))

    weights = np.array(counts, dtype=np.float64)
    weights /= weights.sum()
    regression, chain = token_build(data, adj, Distribution(weights))
    constants, extras = token_constants(regression)
    tmix = mixing_time(chain, config.get("mixing_horizon"))

    theta_hat = extras["minimizer"]
    direction = np.ones(dim) / np.sqrt(dim)
    x0 = theta_hat + start_offset * direction

    features = regression.features
    targets = regression.targets
    n_total = regression.total_rows
    f_star = extras["f_star"]

    def objective(x: np.ndarray) -> float:
        r = features @ x - targets
        return 0.5 * float(r @ r) / n_total

    def gradient(x: np.ndarray) -> np.ndarray:
        return features.T @ (features @ x - targets) / n_total

    def markov_grad(x: np.ndarray, state: int) -> np.ndarray:
        return token_grad(regression, x, state)

    def grad_field(x: np.ndarray) -> np.ndarray:
        return np.stack([token_grad(regression, x, i) for i in range(regression.nodes)])

    return ProblemInstance(
        kind="token",
        dim=dim,
        objective=objective,
        gradient=gradient,
        f_star=f_star,
        x_star=theta_hat,
        x0=x0,
        markov_grad=markov_grad,
        noise=ChainPathNoise(chain, weights),
        constants=constants,
        tmix=tmix,
        tmix_certified=True,
        chain=chain,
        grad_field=grad_field,
        meta={
            "model": regression,
            "pl_convention": extras["pl_convention"],
            "sigma_max": extras["sigma_max"],
            "sigma_min_nonzero": extras["sigma_min_nonzero"],
            "config": dict(config),
        },
    )
