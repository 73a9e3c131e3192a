"""Damped block least squares and the staged bundle-adjustment driver.

One 6-DoF block per frame (rotation-then-translation). The normal system
H = J^T J, y = -J^T r over the surface factors supports plain damped solves,
Schur elimination onto a sub-block, and marginalization of a sub-block into
a quadratic prior. On top of that sit the two staged passes: clusters moved
as rigid bodies using only cross-cluster factors, then each cluster adjusted
internally against frozen external frames and the marginal prior anchoring
its center. The outer loop rebuilds the relation graph and the smoothing
kernels at a shrinking kernel size and repeats.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import LidarFrame, Pose, PoseCorrection, exp_map, log_map, perturb_pose
from .graph import (
    ClusterAssignment,
    SparsifyConfig,
    build_relation_graph,
    sparsify,
    stochastic_cluster,
)
from .smoothing import (
    SmoothingConfig,
    SurfaceFactor,
    build_kernels,
    extract_factors,
    factor_residual,
    factor_world_terms,
    _chain_pose_block,
)


class SolveFailed(RuntimeError):
    """Damped factorization failed even after escalation."""


class SchurFailed(RuntimeError):
    """Eliminated block not invertible."""


class MarginalizeFailed(RuntimeError):
    """Retained block not invertible during marginalization."""


@dataclass
class SolverConfig:
    """Pipeline parameters; defaults reproduce the reference operating point."""

    max_outer: int = 5
    gamma0: float = 3.0
    t_decay: float = 1.4
    keep_fraction: float = 0.20
    t_cluster: int = 300
    inner_lm_iters: int = 8
    lm_lambda0: float = 1e-4
    rng_seed: int = 0
    epsilon: float = 0.1
    overlap_threshold: float = 0.30
    mu: float = 0.02
    beta0: float = 0.01
    min_neighbors: int = 8
    max_neighbors: int = 8
    threads: int = 0  # 0 = hardware default; capped by LBA_THREADS
    outer_rel_tol: float = 1e-4

    def __post_init__(self):
        if min(self.max_outer, self.gamma0, self.t_decay, self.t_cluster,
               self.inner_lm_iters, self.lm_lambda0) <= 0:
            raise ValueError("solver parameters must be positive")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")


@dataclass
class BlockNormalSystem:
    """Dense symmetric normal system over an ordered set of 6-DoF blocks."""

    block_order: list[int]
    H: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.index = {b: k for k, b in enumerate(self.block_order)}

    @property
    def dim(self) -> int:
        return 6 * len(self.block_order)

    def rows(self, block_id: int) -> slice:
        k = self.index[block_id]
        return slice(6 * k, 6 * k + 6)

    def damped(self, lam: float) -> np.ndarray:
        """H + lam * (D^T D + beta I) with D = diag(H)^(1/2).

        The isotropic beta term (a fraction of the mean diagonal) keeps the
        step bounded along weakly observed directions, where pure Marquardt
        scaling would barely damp at all.
        """
        d = np.diag(self.H).copy()
        floor = 1e-10 * (d.mean() + 1.0)
        beta = 1e-2 * d.mean()
        return self.H + lam * np.diag(np.maximum(d, floor) + beta)


@dataclass
class MarginalPrior:
    """Quadratic prior on a set of frames around a pose snapshot.

    cost(xi) = 0.5 xi^T information xi - rhs^T xi, where xi stacks the
    6-DoF deviations of the target frames from snapshot (log(R R_snap^T),
    t - t_snap).
    """

    frame_ids: list[int]
    information: np.ndarray
    rhs: np.ndarray
    snapshot: dict[int, Pose]

    def deviation(self, poses: dict[int, Pose]) -> np.ndarray:
        parts = []
        for fid in self.frame_ids:
            cur, snap = poses[fid], self.snapshot[fid]
            parts.append(log_map(cur.rotation @ snap.rotation.T))
            parts.append(cur.translation - snap.translation)
        return np.concatenate(parts)


@dataclass
class StageReport:
    """Per-outer-iteration record, JSON-serializable via __dict__."""

    iteration: int
    gamma: float
    n_edges_raw: int = 0
    n_edges_kept: int = 0
    n_kernels: int = 0
    n_factors: int = 0
    n_clusters: int = 0
    cost_before: float = 0.0
    cost_after: float = 0.0
    wall_ms: float = 0.0
    smooth_ms: float = 0.0
    extract_ms: float = 0.0
    solve_ms: float = 0.0
    errors: list[str] = field(default_factory=list)


def _batched_terms(factors: list[SurfaceFactor], poses: dict[int, Pose]):
    """Residuals and per-pose 1x6 Jacobian blocks for all factors at once.

    Returns (fi, fj, sigma, Ji, Jj, w): frame-id arrays, residuals, Jacobian
    blocks of the kernel and neighbor poses, and factor weights. Matches the
    per-factor factor_residual/factor_jacobian exactly, just vectorized.
    """
    n = len(factors)
    fi = np.fromiter((f.kernel_frame for f in factors), dtype=int, count=n)
    fj = np.fromiter((f.neighbor_frame for f in factors), dtype=int, count=n)
    pk = np.stack([f.kernel_local for f in factors])
    pn = np.stack([f.neighbor_local for f in factors])
    alpha = np.stack([f.alpha for f in factors])
    basis = np.stack([f.basis for f in factors])
    w = np.fromiter((f.weight for f in factors), dtype=float, count=n)

    ids = sorted({*fi.tolist(), *fj.tolist()})
    slot = {fid: k for k, fid in enumerate(ids)}
    R = np.stack([poses[fid].rotation for fid in ids])
    t = np.stack([poses[fid].translation for fid in ids])
    si = np.fromiter((slot[f] for f in fi), dtype=int, count=n)
    sj = np.fromiter((slot[f] for f in fj), dtype=int, count=n)

    pw_i = np.einsum("nab,nb->na", R[si], pk) + t[si]
    pw_j = np.einsum("nab,nb->na", R[sj], pn) + t[sj]
    ps = np.einsum("nab,nb->na", basis, pw_j - pw_i)
    x, y, z = ps[:, 0], ps[:, 1], ps[:, 2]
    a0, a1, a2, a3, a4 = (alpha[:, k] for k in range(5))
    sigma = a0 * x * x + a1 * y * y + a2 * x * y + a3 * x + a4 * y - z
    g_loc = np.stack([2 * a0 * x + a2 * y + a3,
                      2 * a1 * y + a2 * x + a4,
                      -np.ones(n)], axis=1)
    g = np.einsum("na,nab->nb", g_loc, basis)     # d sigma / d pw_j
    # d @ hat(v) == d x v, so the rotational block -d @ hat(pw - t) = -(d x v)
    Ji = np.concatenate([np.cross(g, pw_i - t[si]), -g], axis=1)
    Jj = np.concatenate([-np.cross(g, pw_j - t[sj]), g], axis=1)
    return fi, fj, sigma, Ji, Jj, w


def total_cost(factors: list[SurfaceFactor], poses: dict[int, Pose]) -> float:
    """Weighted squared surface residual, summed over all factors."""
    if not factors:
        return 0.0
    _, _, sigma, _, _, w = _batched_terms(factors, poses)
    return float(np.sum(w * sigma * sigma))


def assemble(
    factors: list[SurfaceFactor],
    priors: list[MarginalPrior],
    poses: dict[int, Pose],
    frame_subset: list[int],
) -> BlockNormalSystem:
    """H = J^T J and y = -J^T r over the subset's blocks.

    Frames outside the subset are treated as constants. Priors contribute
    their information plus a right-hand side shifted by the current deviation
    from their linearization snapshot.
    """
    order = sorted(frame_subset)
    m = len(order)
    system = BlockNormalSystem(order, np.zeros((6 * m, 6 * m)),
                               np.zeros(6 * m))
    if factors:
        fi, fj, sigma, Ji, Jj, w = _batched_terms(factors, poses)
        block = {fid: k for k, fid in enumerate(order)}
        bi = np.fromiter((block.get(f, -1) for f in fi), dtype=int, count=len(fi))
        bj = np.fromiter((block.get(f, -1) for f in fj), dtype=int, count=len(fj))
        # Same-frame factors produce two blocks for one pose; merge them.
        same = fi == fj
        Ji = np.where(same[:, None], Ji + Jj, Ji)
        use_i, use_j = bi >= 0, (bj >= 0) & ~same
        Hd = np.zeros((m, 6, 6))
        Hc = np.zeros((m, m, 6, 6))
        Y = np.zeros((m, 6))
        for mask, b, J in ((use_i, bi, Ji), (use_j, bj, Jj)):
            Jw = J[mask] * w[mask, None]
            np.add.at(Hd, b[mask], np.einsum("na,nb->nab", Jw, J[mask]))
            np.add.at(Y, b[mask], -sigma[mask, None] * Jw)
        cross = use_i & use_j
        Jwc = Ji[cross] * w[cross, None]
        np.add.at(Hc, (bi[cross], bj[cross]),
                  np.einsum("na,nb->nab", Jwc, Jj[cross]))
        H = system.H.reshape(m, 6, m, 6)
        for k in range(m):
            H[k, :, k, :] += Hd[k]
        H += Hc.transpose(0, 2, 1, 3)
        H += Hc.transpose(1, 3, 0, 2)
        system.y[:] = Y.reshape(-1)
    inset = set(order)
    for prior in priors:
        if not set(prior.frame_ids) <= inset:
            raise ValueError("prior frames must all be inside the subset")
        idx = np.concatenate([np.arange(6) + 6 * system.index[fid]
                              for fid in prior.frame_ids])
        d = prior.deviation(poses)
        system.H[np.ix_(idx, idx)] += prior.information
        system.y[idx] += prior.rhs - prior.information @ d
    return system


def lm_solve(system: BlockNormalSystem, lam: float) -> dict[int, PoseCorrection]:
    """Solve (H + lam D^T D) dx = y by Cholesky, escalating lam x10 on failure."""
    if system.dim == 0:
        return {}
    attempt = lam
    for _ in range(6):
        try:
            c = scipy.linalg.cho_factor(system.damped(attempt))
            dx = scipy.linalg.cho_solve(c, system.y)
            break
        except scipy.linalg.LinAlgError:
            attempt *= 10.0
    else:
        raise SolveFailed(f"factorization failed after escalating to lambda={attempt:g}")
    return {fid: PoseCorrection.from_vector(dx[system.rows(fid)])
            for fid in system.block_order}


@dataclass
class SchurContext:
    """Back-substitution state after eliminating block set b."""

    a_ids: list[int]
    b_ids: list[int]
    bb_factor: tuple
    A_ab: np.ndarray
    y_b: np.ndarray


def _partition_indices(system: BlockNormalSystem, a_ids: list[int]):
    a_ids = sorted(a_ids)
    b_ids = sorted(set(system.block_order) - set(a_ids))
    ia = np.concatenate([np.arange(6) + 6 * system.index[f] for f in a_ids]) \
        if a_ids else np.zeros(0, dtype=int)
    ib = np.concatenate([np.arange(6) + 6 * system.index[f] for f in b_ids]) \
        if b_ids else np.zeros(0, dtype=int)
    return a_ids, b_ids, ia, ib


def schur_eliminate(
    system: BlockNormalSystem,
    a_ids: list[int],
    lam: float = 0.0,
) -> tuple[BlockNormalSystem, SchurContext]:
    """Reduce the (damped) system onto blocks a by eliminating the rest.

    Returns the reduced system H_aa - H_ab H_bb^-1 H_ab^T with matching
    right-hand side, plus the context needed by back_substitute.
    """
    A = system.damped(lam) if lam > 0 else system.H
    a_ids, b_ids, ia, ib = _partition_indices(system, a_ids)
    A_aa = A[np.ix_(ia, ia)]
    A_ab = A[np.ix_(ia, ib)]
    A_bb = A[np.ix_(ib, ib)]
    y_a, y_b = system.y[ia], system.y[ib]
    if not b_ids:
        ctx = SchurContext(a_ids, b_ids, (np.zeros((0, 0)), True), A_ab, y_b)
        return BlockNormalSystem(a_ids, A_aa, y_a), ctx
    try:
        bb_factor = scipy.linalg.cho_factor(A_bb)
    except scipy.linalg.LinAlgError as exc:
        raise SchurFailed(f"H_bb singular over blocks {b_ids}") from exc
    HbbInv_Hba = scipy.linalg.cho_solve(bb_factor, A_ab.T)
    reduced_H = A_aa - A_ab @ HbbInv_Hba
    reduced_y = y_a - A_ab @ scipy.linalg.cho_solve(bb_factor, y_b)
    return (BlockNormalSystem(a_ids, reduced_H, reduced_y),
            SchurContext(a_ids, b_ids, bb_factor, A_ab, y_b))


def back_substitute(ctx: SchurContext, delta_a: np.ndarray) -> np.ndarray:
    """delta_b = H_bb^-1 (y_b - H_ab^T delta_a)."""
    if not ctx.b_ids:
        return np.zeros(0)
    return scipy.linalg.cho_solve(ctx.bb_factor, ctx.y_b - ctx.A_ab.T @ delta_a)


def _marginal_blocks(system: BlockNormalSystem, a_ids: list[int], lam: float = 0.0):
    """(information, rhs) of the prior left on blocks b after folding in a."""
    A = system.damped(lam) if lam > 0 else system.H
    a_ids, b_ids, ia, ib = _partition_indices(system, a_ids)
    A_ab = A[np.ix_(ia, ib)]
    A_bb = A[np.ix_(ib, ib)]
    y_b = system.y[ib]
    if a_ids:
        try:
            aa_factor = scipy.linalg.cho_factor(A[np.ix_(ia, ia)])
        except scipy.linalg.LinAlgError as exc:
            raise MarginalizeFailed(f"H_aa singular over blocks {a_ids}") from exc
        info = A_bb - A_ab.T @ scipy.linalg.cho_solve(aa_factor, A_ab)
    else:
        info = A_bb.copy()
    info = 0.5 * (info + info.T)
    try:
        mean = scipy.linalg.solve(A_bb, y_b, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise MarginalizeFailed("H_bb singular in conditional expectation") from exc
    return info, info @ mean


def marginalize(
    system: BlockNormalSystem,
    a_ids: list[int],
    poses: dict[int, Pose],
    lam: float = 0.0,
) -> MarginalPrior:
    """Fold blocks a into a quadratic prior on the remaining blocks b.

    Prior information is H_bb - H_ab^T H_aa^-1 H_ab; the right-hand side is
    chosen so the prior's minimum sits at the conditional expectation
    H_bb^-1 y_b evaluated at delta_a = 0. The linearization snapshot is taken
    from the given poses.
    """
    b_ids = sorted(set(system.block_order) - set(a_ids))
    info, rhs = _marginal_blocks(system, a_ids, lam)
    return MarginalPrior(
        frame_ids=b_ids,
        information=info,
        rhs=rhs,
        snapshot={fid: poses[fid] for fid in b_ids},
    )


def build_cluster_system(
    clusters: ClusterAssignment,
    factors: list[SurfaceFactor],
    poses: dict[int, Pose],
    free: list[int],
) -> tuple[BlockNormalSystem, float]:
    """Normal system over rigid per-cluster corrections applied at the centers.

    Only factors spanning two different clusters contribute; the returned
    cost is their weighted squared residual at the given poses.
    """
    cluster_of = clusters.cluster_of
    index = {c: k for k, c in enumerate(free)}
    dim = 6 * len(free)
    H = np.zeros((dim, dim))
    y = np.zeros(dim)
    cost = 0.0
    for f in factors:
        if cluster_of[f.kernel_frame] == cluster_of[f.neighbor_frame]:
            continue
        sigma, terms = factor_world_terms(f, poses)
        cost += f.weight * sigma * sigma
        j = np.zeros(dim)
        hit = False
        for fid, d_pw, pw in terms:
            c = cluster_of[fid]
            if c not in index:
                continue
            lever = poses[clusters.centers[c]].translation
            j[6 * index[c]:6 * index[c] + 6] += _chain_pose_block(d_pw, pw, lever)
            hit = True
        if not hit:
            continue
        H += f.weight * np.outer(j, j)
        y += -f.weight * sigma * j
    return BlockNormalSystem(free, H, y), cost


def apply_rigid_correction(
    poses: dict[int, Pose],
    members: list[int],
    center: int,
    corr: PoseCorrection,
) -> dict[int, Pose]:
    """Move every member rigidly with the correction applied at the center pose."""
    R = exp_map(corr.dtheta)
    tc = poses[center].translation
    out = dict(poses)
    for fid in members:
        p = poses[fid]
        out[fid] = Pose(R @ p.rotation, R @ (p.translation - tc) + tc + corr.dt)
    return out


def extra_cluster_optimize(
    clusters: ClusterAssignment,
    factors: list[SurfaceFactor],
    poses: dict[int, Pose],
    cfg: SolverConfig,
    anchor: int,
) -> dict[int, Pose]:
    """Rigid-body LM over cluster corrections using cross-cluster factors.

    One 6-DoF unknown per cluster, applied at the cluster center; the
    cluster holding the anchor frame stays fixed. Within-cluster geometry is
    untouched.
    """
    cluster_of = clusters.cluster_of
    members = clusters.members()
    cross = [f for f in factors
             if cluster_of[f.kernel_frame] != cluster_of[f.neighbor_frame]]
    anchor_cluster = cluster_of.get(anchor)
    free = sorted(c for c in members if c != anchor_cluster)
    if not cross or not free:
        return poses

    lam = cfg.lm_lambda0
    cur = poses
    system, cost = build_cluster_system(clusters, cross, cur, free)
    for _ in range(cfg.inner_lm_iters):
        if np.linalg.norm(system.y) < 1e-8:
            break
        try:
            step = lm_solve(system, lam)
        except SolveFailed:
            break
        trial = cur
        for c in free:
            trial = apply_rigid_correction(trial, members[c], clusters.centers[c], step[c])
        trial_system, trial_cost = build_cluster_system(clusters, cross, trial, free)
        if trial_cost <= cost:
            cur, system, cost = trial, trial_system, trial_cost
            lam = max(lam * 0.5, 1e-12)
        else:
            lam *= 10.0
    return cur


def intra_cluster_optimize(
    cluster_id: int,
    clusters: ClusterAssignment,
    factors: list[SurfaceFactor],
    prior: MarginalPrior | None,
    poses: dict[int, Pose],
    cfg: SolverConfig,
    anchor: int,
) -> dict[int, Pose]:
    """LM over one cluster's frames with external frames frozen.

    Uses the cluster's internal factors, the factors linking it outward
    (external endpoints held constant), and the marginal prior anchoring the
    cluster center. Returns updated poses for the cluster only (merged into
    a copy of the input mapping).
    """
    member_set = {n for n, c in clusters.cluster_of.items() if c == cluster_id}
    free = sorted(member_set - {anchor})
    if not free:
        return poses
    touching = [f for f in factors
                if f.kernel_frame in member_set or f.neighbor_frame in member_set]
    priors = [prior] if prior is not None and set(prior.frame_ids) <= set(free) else []
    cur = dict(poses)
    lam = cfg.lm_lambda0

    def cost_of(p):
        c = total_cost(touching, p)
        for pr in priors:
            d = pr.deviation(p)
            c += float(d @ pr.information @ d - 2.0 * pr.rhs @ d)
        return c

    cost = cost_of(cur)
    for _ in range(cfg.inner_lm_iters):
        system = assemble(touching, priors, cur, free)
        if np.linalg.norm(system.y) < 1e-8:
            break
        try:
            step = lm_solve(system, lam)
        except SolveFailed as exc:
            raise SolveFailed(f"cluster {cluster_id}: {exc}") from exc
        trial = dict(cur)
        for fid in free:
            trial[fid] = perturb_pose(cur[fid], step[fid])
        trial_cost = cost_of(trial)
        if trial_cost <= cost:
            cur, cost = trial, trial_cost
            lam = max(lam * 0.5, 1e-12)
        else:
            lam *= 10.0
    return cur


def _cluster_prior(
    clusters: ClusterAssignment,
    cluster_id: int,
    cluster_system: BlockNormalSystem,
    poses: dict[int, Pose],
    cfg: SolverConfig,
    anchor: int,
) -> MarginalPrior | None:
    """Marginalize the other clusters' rigid corrections onto this center.

    cluster_system is the cross-cluster normal system over the free cluster
    blocks at the current poses. The cluster correction is parameterized at
    the center frame, so the resulting prior binds that frame's 6-DoF block
    directly.
    """
    anchor_cluster = clusters.cluster_of.get(anchor)
    center = clusters.centers[cluster_id]
    if cluster_id == anchor_cluster or center == anchor:
        return None
    if cluster_id not in cluster_system.index or len(cluster_system.block_order) < 2:
        return None
    others = [c for c in cluster_system.block_order if c != cluster_id]
    try:
        info, rhs = _marginal_blocks(cluster_system, others, lam=cfg.lm_lambda0)
    except MarginalizeFailed:
        return None
    return MarginalPrior(
        frame_ids=[center],
        information=info,
        rhs=rhs,
        snapshot={center: poses[center]},
    )


def _worker_count(cfg: SolverConfig) -> int:
    env = os.environ.get("LBA_THREADS")
    cap = int(env) if env else 0
    want = cfg.threads or cap or (os.cpu_count() or 1)
    if cap:
        want = min(want, cap)
    return max(want, 1)


def run_pipeline(
    frames: list[LidarFrame],
    initial_poses: dict[int, Pose],
    cfg: SolverConfig,
) -> tuple[dict[int, Pose], dict]:
    """Full refinement loop; returns final poses and a JSON-ready report.

    Per outer iteration: relation graph at the current kernel size, greedy
    sparsification to keep_fraction of the raw edges, smoothing kernels and
    factor extraction restricted to kept edges, stochastic clustering,
    rigid extra-cluster optimization, then per-cluster marginal priors and
    intra-cluster adjustment (parallel across clusters). The kernel size
    shrinks by t_decay after every iteration; the loop stops early when the
    relative cost decrease falls below outer_rel_tol.
    """
    poses = dict(initial_poses)
    frames_by_id = {f.frame_id: f for f in frames}
    anchor = frames[0].frame_id if frames else -1
    gamma = cfg.gamma0
    report: dict = {"iterations": [], "converged": False}
    seed_root = np.random.SeedSequence(cfg.rng_seed)
    workers = _worker_count(cfg)

    for it in range(1, cfg.max_outer + 1):
        rec = StageReport(iteration=it, gamma=gamma)
        t_iter = time.perf_counter()
        iter_seeds = np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(it,))
        seed_sparsify, seed_cluster = [
            int(s.generate_state(1)[0]) for s in iter_seeds.spawn(2)]
        try:
            graph = build_relation_graph(frames, poses, gamma,
                                         overlap_threshold=cfg.overlap_threshold)
            rec.n_edges_raw = len(graph.edges)
            n_keep = int(np.ceil(cfg.keep_fraction * len(graph.edges)))
            kept = sparsify(graph, SparsifyConfig(n_keep, cfg.epsilon, seed_sparsify), poses)
            rec.n_edges_kept = len(kept)

            t0 = time.perf_counter()
            smooth_cfg = SmoothingConfig(gamma=gamma, mu=cfg.mu, beta0=cfg.beta0,
                                         min_neighbors=cfg.min_neighbors,
                                         max_neighbors=cfg.max_neighbors)
            edge_pairs = {(e.i, e.j) for e in kept}
            kernels = build_kernels(frames, poses, smooth_cfg,
                                    allowed_pairs=edge_pairs)
            rec.n_kernels = len(kernels)
            rec.smooth_ms = 1e3 * (time.perf_counter() - t0)
            t0 = time.perf_counter()
            factors = extract_factors(kernels, frames_by_id, poses, edge_pairs,
                                      self_weight=smooth_cfg.self_factor_weight)
            rec.n_factors = len(factors)
            rec.extract_ms = 1e3 * (time.perf_counter() - t0)

            rec.cost_before = total_cost(factors, poses)
            clusters = stochastic_cluster(graph, cfg.t_cluster, seed_cluster)
            rec.n_clusters = len(clusters.members())

            t0 = time.perf_counter()
            poses = extra_cluster_optimize(clusters, factors, poses, cfg, anchor)
            snapshot = dict(poses)
            cluster_ids = sorted(clusters.members())
            anchor_cluster = clusters.cluster_of.get(anchor)
            free_clusters = [c for c in cluster_ids if c != anchor_cluster]
            cluster_system, _ = build_cluster_system(clusters, factors, snapshot,
                                                     free_clusters)
            priors = {c: _cluster_prior(clusters, c, cluster_system, snapshot,
                                        cfg, anchor)
                      for c in cluster_ids}

            def solve_one(c):
                return c, intra_cluster_optimize(c, clusters, factors, priors[c],
                                                 snapshot, cfg, anchor)

            if workers > 1 and len(cluster_ids) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = dict(pool.map(solve_one, cluster_ids))
            else:
                results = dict(solve_one(c) for c in cluster_ids)
            merged = dict(snapshot)
            for c in cluster_ids:  # fixed order keeps reductions deterministic
                for fid, cl in clusters.cluster_of.items():
                    if cl == c:
                        merged[fid] = results[c][fid]
            poses = merged
            rec.solve_ms = 1e3 * (time.perf_counter() - t0)
            rec.cost_after = total_cost(factors, poses)
        except Exception as exc:  # record and stop; poses stay at last good state
            rec.errors.append(f"{type(exc).__name__}: {exc}")
            rec.wall_ms = 1e3 * (time.perf_counter() - t_iter)
            report["iterations"].append(rec.__dict__)
            report["aborted"] = True
            break
        rec.wall_ms = 1e3 * (time.perf_counter() - t_iter)
        report["iterations"].append(rec.__dict__)
        gamma = gamma / cfg.t_decay
        denom = max(rec.cost_before, 1e-300)
        if (rec.cost_before - rec.cost_after) / denom < cfg.outer_rel_tol:
            report["converged"] = True
            break
    return poses, report
