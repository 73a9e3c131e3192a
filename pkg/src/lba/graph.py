"""Relation graph over LiDAR frames: edge reliability, sparsification, clustering.

Frames become nodes; a pair of frames that shares enough world-voxel overlap
gets an edge carrying a 6x6 information matrix accumulated from point-to-point
registration correspondences. The smallest eigenvalue of the pose-graph
information matrix (anchor removed) scores an edge subset; a seeded
stochastic-greedy search keeps the most informative edges, and a seeded
stochastic variant of greedy modularity agglomeration groups the frames into
bounded-size clusters for the staged solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .geometry import LidarFrame, Pose, hat, log_map


class EdgeUnderconstrained(ValueError):
    """Too few registration correspondences to form an edge."""


@dataclass
class RelationEdge:
    """Undirected edge (i < j) with its registration information matrix.

    omega is ordered rotation-then-translation; lambda_min (its smallest
    eigenvalue) is the edge reliability. rel_pose caches pose_i^-1 * pose_j
    at graph build time for the relative-pose residual.
    """

    i: int
    j: int
    omega: np.ndarray
    lambda_min: float
    overlap_ratio: float
    rel_pose: Pose


@dataclass
class RelationGraph:
    node_ids: list[int]
    edges: list[RelationEdge]
    anchor: int

    @property
    def node_count(self) -> int:
        return len(self.node_ids)


@dataclass
class SparsifyConfig:
    """Stochastic-greedy edge selection parameters."""

    n_keep: int
    epsilon: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.n_keep < 0:
            raise ValueError("n_keep must be non-negative")


@dataclass
class ClusterAssignment:
    cluster_of: dict[int, int]
    centers: dict[int, int]
    rng_seed: int

    def members(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for node, c in sorted(self.cluster_of.items()):
            out.setdefault(c, []).append(node)
        return out


def voxel_sets(frames: list[LidarFrame], poses: dict[int, Pose], gamma: float) -> dict[int, set]:
    """Occupied world-voxel keys of edge gamma, per frame."""
    out = {}
    for f in frames:
        keys = np.floor(poses[f.frame_id].apply(f.points) / gamma).astype(np.int64)
        out[f.frame_id] = set(map(tuple, keys))
    return out


def registration_information(
    frame_i: LidarFrame,
    frame_j: LidarFrame,
    poses: dict[int, Pose],
    gamma: float,
    max_correspondences: int = 500,
) -> tuple[np.ndarray, float]:
    """6x6 information of the relative pose from point-to-point registration.

    Correspondences are mutual nearest neighbors in the world frame with
    distance cutoff gamma / 2, deterministically thinned to at most
    max_correspondences. Each matched point P (frame i coordinates)
    contributes [[ [P]x^T [P]x, 0], [0, I]]; the cross blocks of a single
    point-to-point Jacobian are zero.
    """
    pose_i, pose_j = poses[frame_i.frame_id], poses[frame_j.frame_id]
    wi = pose_i.apply(frame_i.points)
    wj = pose_j.apply(frame_j.points)
    cutoff = gamma / 2.0
    tree_j = cKDTree(wj)
    d_ij, nn_ij = tree_j.query(wi, distance_upper_bound=cutoff)
    tree_i = cKDTree(wi)
    _, nn_ji = tree_i.query(wj, distance_upper_bound=cutoff)
    rows = np.nonzero(np.isfinite(d_ij))[0]
    rows = rows[nn_ji[nn_ij[rows]] == rows]  # mutual pairs only
    if len(rows) > max_correspondences:
        rows = rows[np.linspace(0, len(rows) - 1, max_correspondences).astype(int)]
    if len(rows) < 3:
        raise EdgeUnderconstrained(f"{len(rows)} correspondences")
    P = frame_i.points[rows]
    omega = np.zeros((6, 6))
    # sum_u [P]x^T [P]x = sum_u (|P|^2 I - P P^T)
    sq = np.sum(P * P)
    omega[:3, :3] = sq * np.eye(3) - P.T @ P
    omega[3:, 3:] = len(rows) * np.eye(3)
    return omega, float(scipy.linalg.eigvalsh(omega)[0])


def build_relation_graph(
    frames: list[LidarFrame],
    poses: dict[int, Pose],
    gamma: float,
    overlap_threshold: float = 0.30,
    max_correspondences: int = 500,
) -> RelationGraph:
    """Edges for frame pairs sharing > overlap_threshold of their voxels.

    Overlap ratio uses the permissive denominator min(|V_i|, |V_j|). Pairs
    whose registration is underconstrained are skipped. Anchor is the first
    frame.
    """
    node_ids = [f.frame_id for f in frames]
    by_id = {f.frame_id: f for f in frames}
    vsets = voxel_sets(frames, poses, gamma)
    occupants: dict[tuple, list[int]] = {}
    for fid in node_ids:
        for key in vsets[fid]:
            occupants.setdefault(key, []).append(fid)
    shared: dict[tuple[int, int], int] = {}
    for fids in occupants.values():
        fids = sorted(fids)
        for a in range(len(fids)):
            for b in range(a + 1, len(fids)):
                pair = (fids[a], fids[b])
                shared[pair] = shared.get(pair, 0) + 1
    edges = []
    for (i, j), count in sorted(shared.items()):
        ratio = count / min(len(vsets[i]), len(vsets[j]))
        if ratio <= overlap_threshold:
            continue
        try:
            omega, lam = registration_information(
                by_id[i], by_id[j], poses, gamma, max_correspondences)
        except EdgeUnderconstrained:
            continue
        rel = poses[i].inverse().compose(poses[j])
        edges.append(RelationEdge(i, j, omega, lam, ratio, rel))
    anchor = node_ids[0] if node_ids else -1
    return RelationGraph(node_ids, edges, anchor)


def relative_pose_residual(edge: RelationEdge, poses: dict[int, Pose]) -> np.ndarray:
    """6-vector [log(rel_hat^T R_i^T R_j); -t_hat + R_i^T (t_j - t_i)]."""
    Ri, ti = poses[edge.i].rotation, poses[edge.i].translation
    Rj, tj = poses[edge.j].rotation, poses[edge.j].translation
    rot = log_map(edge.rel_pose.rotation.T @ Ri.T @ Rj)
    trans = -edge.rel_pose.translation + Ri.T @ (tj - ti)
    return np.concatenate([rot, trans])


def _edge_jacobian_blocks(edge: RelationEdge, poses: dict[int, Pose]):
    """First-order 6x6 residual Jacobians w.r.t. pose i and pose j.

    Valid near zero residual: left-multiplicative rotation perturbations and
    additive translations, blocks ordered rotation-then-translation.
    """
    Ri, ti = poses[edge.i].rotation, poses[edge.i].translation
    Rj, tj = poses[edge.j].rotation, poses[edge.j].translation
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Rj.T
    Jj[:3, :3] = Rj.T
    Ji[3:, :3] = Ri.T @ hat(tj - ti)
    Ji[3:, 3:] = -Ri.T
    Jj[3:, 3:] = Ri.T
    return Ji, Jj


def edge_information_terms(edge: RelationEdge, poses: dict[int, Pose]):
    """Blocks of J^T Omega J for one edge, keyed by (frame, frame)."""
    Ji, Jj = _edge_jacobian_blocks(edge, poses)
    return {
        (edge.i, edge.i): Ji.T @ edge.omega @ Ji,
        (edge.i, edge.j): Ji.T @ edge.omega @ Jj,
        (edge.j, edge.i): Jj.T @ edge.omega @ Ji,
        (edge.j, edge.j): Jj.T @ edge.omega @ Jj,
    }


def pose_graph_information(
    graph: RelationGraph,
    edge_subset: list[RelationEdge],
    poses: dict[int, Pose],
) -> np.ndarray:
    """Gauge-fixed information matrix sum_k J_k^T Omega_k J_k.

    The anchor frame's 6 rows/columns are deleted so that the smallest
    eigenvalue is not trivially zero under a global rigid transform.
    """
    free = [n for n in graph.node_ids if n != graph.anchor]
    index = {n: k for k, n in enumerate(free)}
    dim = 6 * len(free)
    lam = np.zeros((dim, dim))
    for edge in edge_subset:
        for (a, b), block in edge_information_terms(edge, poses).items():
            if a in index and b in index:
                ra, rb = 6 * index[a], 6 * index[b]
                lam[ra:ra + 6, rb:rb + 6] += block
    return lam


def optimality(
    graph: RelationGraph,
    edge_subset: list[RelationEdge],
    poses: dict[int, Pose],
) -> float:
    """Smallest eigenvalue of the gauge-fixed information matrix."""
    lam = pose_graph_information(graph, edge_subset, poses)
    if lam.size == 0 or not edge_subset:
        return 0.0
    return float(scipy.linalg.eigvalsh(lam, subset_by_index=(0, 0))[0])


def _smallest_eig(mat: np.ndarray) -> float:
    if mat.size == 0:
        return 0.0
    return float(scipy.linalg.eigvalsh(mat, subset_by_index=(0, 0))[0])


def sparsify(
    graph: RelationGraph,
    cfg: SparsifyConfig,
    poses: dict[int, Pose],
) -> list[RelationEdge]:
    """Stochastic-greedy edge selection maximizing information optimality.

    Rounds sample min(ceil(log(1/eps) * |remaining|), |remaining|) candidate
    edges with the seeded generator and keep the one maximizing the smallest
    eigenvalue of the accumulated information; exact gain ties break toward
    the lexicographically smallest (i, j). Deterministic given rng_seed.
    """
    edges = list(graph.edges)
    if cfg.n_keep >= len(edges):
        return edges
    rng = np.random.default_rng(cfg.rng_seed)
    free = [n for n in graph.node_ids if n != graph.anchor]
    index = {n: k for k, n in enumerate(free)}
    dim = 6 * len(free)

    def scatter(target: np.ndarray, edge: RelationEdge, terms) -> None:
        for (a, b), block in terms.items():
            if a in index and b in index:
                ra, rb = 6 * index[a], 6 * index[b]
                target[ra:ra + 6, rb:rb + 6] += block

    terms_of = [edge_information_terms(e, poses) for e in edges]
    remaining = list(range(len(edges)))
    accumulated = np.zeros((dim, dim))
    selected: list[int] = []
    n_sample_factor = np.log(1.0 / cfg.epsilon)
    tol = 1e-12

    def value_with(idx: int) -> float:
        trial = accumulated.copy()
        scatter(trial, edges[idx], terms_of[idx])
        return _smallest_eig(trial)

    def lex(idx: int) -> tuple[int, int]:
        return edges[idx].i, edges[idx].j

    def subspace_bound(vals_q, U, idx: int) -> float:
        """Rayleigh-Ritz upper bound on lambda_min(accumulated + edge term).

        Restricting the quadratic form to the span of the bottom q
        eigenvectors can only raise the minimum, so the smallest eigenvalue
        of the projected q x q system bounds the true value from above. The
        edge term touches at most two 6-DoF blocks, so its projection is
        assembled from two row slices of U.
        """
        B = np.diag(vals_q).astype(float)
        for (a, b), block in terms_of[idx].items():
            if a in index and b in index:
                Ua = U[6 * index[a]:6 * index[a] + 6]
                Ub = U[6 * index[b]:6 * index[b] + 6]
                B += Ua.T @ block @ Ub
        return float(scipy.linalg.eigvalsh(B)[0])

    while len(selected) < cfg.n_keep and remaining:
        n_sample = min(int(np.ceil(n_sample_factor * len(remaining))), len(remaining))
        sample = rng.choice(len(remaining), size=n_sample, replace=False)
        if n_sample < len(remaining):
            pool = sorted((remaining[s] for s in set(sample.tolist())), key=lex)
        else:
            pool = sorted(remaining, key=lex)
        vals, vecs = scipy.linalg.eigh(accumulated)
        base = float(vals[0])
        nullity = int(np.sum(vals < 1e-9 * max(vals[-1], 1.0)))
        if nullity >= 7:
            # one edge term has rank <= 6 and cannot close a null space of
            # dimension >= 7: every candidate's value stays (numerically)
            # zero, so the lexicographic tie-break decides outright
            idx = pool[0]
        else:
            # upper-bound every candidate via the bottom eigenspace, then
            # evaluate exactly in descending bound order until no unevaluated
            # bound can still beat (or tie) the best exact value
            q = min(8, dim)
            U = vecs[:, :q]
            bounds = {i: subspace_bound(vals[:q], U, i) for i in pool}
            order = sorted(pool, key=lambda i: (-bounds[i],) + lex(i))
            exact: dict[int, float] = {}
            best_val = -np.inf
            for i in order:
                if bounds[i] < best_val - tol:
                    break
                exact[i] = value_with(i)
                best_val = max(best_val, exact[i])
            idx, best = None, -np.inf
            for i in sorted(exact, key=lex):
                if exact[i] > best + tol:
                    idx, best = i, exact[i]
        scatter(accumulated, edges[idx], terms_of[idx])
        selected.append(idx)
        remaining.remove(idx)
    return [edges[i] for i in sorted(selected)]


def modularity(graph: RelationGraph, cluster_of: dict[int, int]) -> float:
    """Weighted modularity with per-edge weights lambda_min, each edge once."""
    s = sum(e.lambda_min for e in graph.edges)
    if s <= 0.0:
        return 0.0
    strength: dict[int, float] = {n: 0.0 for n in graph.node_ids}
    for e in graph.edges:
        strength[e.i] += e.lambda_min
        strength[e.j] += e.lambda_min
    q = 0.0
    for e in graph.edges:
        if cluster_of[e.i] == cluster_of[e.j]:
            q += e.lambda_min - strength[e.i] * strength[e.j] / (2.0 * s)
    return q / (2.0 * s)


def stochastic_cluster(
    graph: RelationGraph,
    t_cluster: int,
    rng_seed: int = 0,
) -> ClusterAssignment:
    """Randomized agglomeration of frames that increases modularity.

    Starting from singletons, every admissible merge (adjacent clusters,
    strictly positive modularity gain, merged size <= t_cluster) is sampled
    with probability proportional to its gain until none remains. Centers
    are the nodes with the largest intra-cluster incident weight sum (lowest
    id on ties). Deterministic given rng_seed.
    """
    rng = np.random.default_rng(rng_seed)
    s = sum(e.lambda_min for e in graph.edges)
    cluster_of = {n: k for k, n in enumerate(sorted(graph.node_ids))}
    sizes = {c: 1 for c in cluster_of.values()}
    if s > 0.0 and t_cluster > 1:
        strength: dict[int, float] = {n: 0.0 for n in graph.node_ids}
        for e in graph.edges:
            strength[e.i] += e.lambda_min
            strength[e.j] += e.lambda_min
        # Per-edge modularity contribution once its endpoints share a cluster.
        q_of = {}
        for k, e in enumerate(graph.edges):
            q_of[k] = (e.lambda_min - strength[e.i] * strength[e.j] / (2.0 * s)) / (2.0 * s)
        while True:
            gains: dict[tuple[int, int], float] = {}
            for k, e in enumerate(graph.edges):
                a, b = cluster_of[e.i], cluster_of[e.j]
                if a == b:
                    continue
                pair = (min(a, b), max(a, b))
                gains[pair] = gains.get(pair, 0.0) + q_of[k]
            admissible = [(pair, g) for pair, g in sorted(gains.items())
                          if g > 0.0 and sizes[pair[0]] + sizes[pair[1]] <= t_cluster]
            if not admissible:
                break
            weights = np.array([g for _, g in admissible])
            pick = admissible[rng.choice(len(admissible), p=weights / weights.sum())][0]
            keep, gone = pick
            for n, c in cluster_of.items():
                if c == gone:
                    cluster_of[n] = keep
            sizes[keep] += sizes.pop(gone)
    # Relabel clusters 0..K-1 by smallest member id.
    first: dict[int, int] = {}
    for n in sorted(cluster_of):
        first.setdefault(cluster_of[n], n)
    relabel = {old: rank for rank, old in
               enumerate(sorted(first, key=lambda c: first[c]))}
    cluster_of = {n: relabel[c] for n, c in cluster_of.items()}

    intra_strength: dict[int, float] = {n: 0.0 for n in graph.node_ids}
    for e in graph.edges:
        if cluster_of[e.i] == cluster_of[e.j]:
            intra_strength[e.i] += e.lambda_min
            intra_strength[e.j] += e.lambda_min
    centers: dict[int, int] = {}
    for n in sorted(graph.node_ids):
        c = cluster_of[n]
        if c not in centers or intra_strength[n] > intra_strength[centers[c]]:
            centers[c] = n
    return ClusterAssignment(cluster_of, centers, rng_seed)


def export_graph(graph: RelationGraph, path) -> None:
    """Line-oriented dump: `# anchor <id>` header, then `i j lambda_min overlap`."""
    with open(path, "w") as fh:
        fh.write(f"# anchor {graph.anchor}\n")
        for e in graph.edges:
            fh.write(f"{e.i} {e.j} {e.lambda_min:.9g} {e.overlap_ratio:.9g}\n")
