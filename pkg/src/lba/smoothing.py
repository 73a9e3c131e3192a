"""Progressive spatial smoothing: correspondence extraction via polynomial kernels.

The stage turns posed LiDAR frames into *smoothing kernels*: voxel-sampled
world points carrying an outlier-robust normal, a tangent frame whose z-axis
is that normal, and a fitted second-order polynomial surface
z = alpha . [x^2, y^2, xy, x, y] expressed in the tangent frame. The signed
height of a neighboring point above the kernel's surface is the scalar
residual that ties the kernel's frame and the neighbor's frame together in
the bundle adjustment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    LidarFrame,
    Pose,
    hat,
    normal_complement,
    perturb_normal,
    tangent_frame,
)

# Re-exported under the operation name used by this stage.
build_tangent_frame = tangent_frame


class FitUnderdetermined(ValueError):
    """Fewer neighbors than surface coefficients."""


class FitDegenerate(ValueError):
    """All radial weights vanished; the neighborhood cannot support a fit."""


@dataclass
class SmoothingConfig:
    """Knobs of the smoothing stage.

    gamma is both the sampling voxel edge and the neighbor-search radius;
    mu weighs the sparsity term of the normal smoothing objective and beta0
    is the starting penalty of its auxiliary relaxation, doubled each sweep
    until beta_max. Neighborhoods are capped at max_neighbors points per
    contributing frame (nearest first) to bound desk-scale cost.
    """

    gamma: float = 3.0
    mu: float = 0.02
    beta0: float = 0.01
    beta_max: float = 1e4
    min_neighbors: int = 8
    max_neighbors: int = 8
    self_factor_weight: float = 0.1
    fit_gate: float = 3.0

    def __post_init__(self):
        if self.gamma <= 0 or self.mu <= 0 or self.beta0 <= 0:
            raise ValueError("gamma, mu and beta0 must be positive")


@dataclass
class SmoothingKernel:
    """A voxel-sampled world point with its fitted local surface."""

    point: np.ndarray                  # world coordinates
    source: tuple[int, int]            # (frame_id, point_index)
    normal: np.ndarray
    basis: np.ndarray                  # 3x3 row-orthonormal, last row == normal
    alpha: np.ndarray                  # 5 surface coefficients
    neighbors: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class SurfaceFactor:
    """Scalar surface-height residual linking poses i (kernel) and j (neighbor)."""

    kernel_frame: int
    neighbor_frame: int
    kernel_local: np.ndarray           # kernel source point in frame i
    neighbor_local: np.ndarray         # neighbor point in frame j
    alpha: np.ndarray
    basis: np.ndarray
    weight: float = 1.0


def _world_stack(frames: list[LidarFrame], poses: dict[int, Pose]):
    """All points in world coordinates plus parallel (frame_id, index) arrays."""
    pts, fids, idxs = [], [], []
    for f in frames:
        pts.append(poses[f.frame_id].apply(f.points))
        fids.append(np.full(len(f.points), f.frame_id, dtype=int))
        idxs.append(np.arange(len(f.points), dtype=int))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.vstack(pts), np.concatenate(fids), np.concatenate(idxs)


def estimate_point_normals(points: np.ndarray, origins: np.ndarray, k: int = 12) -> np.ndarray:
    """PCA normal for every point, oriented toward its sensor origin.

    origins[i] is the position of the sensor that observed points[i].
    """
    n_pts = len(points)
    normals = np.zeros((n_pts, 3))
    if n_pts == 0:
        return normals
    tree = cKDTree(points)
    k = min(k, n_pts)
    _, nbr = tree.query(points, k=k)
    nbr = np.atleast_2d(nbr)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, origins - points) < 0
    normals[flip] *= -1.0
    return normals


def sample_kernels(
    frames: list[LidarFrame],
    poses: dict[int, Pose],
    gamma: float,
    min_neighbors: int = 8,
    max_neighbors: int = 8,
    allowed_pairs: set[tuple[int, int]] | None = None,
) -> list[SmoothingKernel]:
    """Voxel-sample world points into kernels with PCA-initialized normals.

    One kernel per occupied voxel of edge gamma: the point nearest the
    voxel's point centroid. Neighbors are the world points within gamma,
    capped at max_neighbors per contributing frame (nearest first); kernels
    with fewer than min_neighbors neighbors or a collinear neighborhood are
    discarded. Normal signs point toward the kernel frame's sensor origin.

    The cap is per frame rather than per kernel so the neighbor budget —
    and with it the downstream factor count — scales with the number of
    frames allowed to contribute, which is what edge sparsification prunes.

    When allowed_pairs is given (ordered frame-id pairs, e.g. the surviving
    relation-graph edges), a kernel's neighbors are restricted to its own
    frame and to frames paired with it, so the neighbor budget is spent on
    points that can actually become factors downstream.
    """
    pts, fids, idxs = _world_stack(frames, poses)
    if len(pts) == 0:
        return []
    keys = np.floor(pts / gamma).astype(np.int64)
    order = np.lexsort(keys.T)
    sorted_keys = keys[order]
    boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0), axis=1))[0] + 1
    groups = np.split(order, boundaries)

    tree = cKDTree(pts)
    pair_ok = None
    if allowed_pairs is not None:
        frame_ids = sorted({f.frame_id for f in frames})
        col_of = {fid: k for k, fid in enumerate(frame_ids)}
        pair_ok = np.eye(len(frame_ids), dtype=bool)
        for a, b in allowed_pairs:
            if a in col_of and b in col_of:
                pair_ok[col_of[a], col_of[b]] = True
                pair_ok[col_of[b], col_of[a]] = True
        fid_cols = np.fromiter((col_of[int(f)] for f in fids),
                               dtype=int, count=len(fids))
    kernels = []
    for g in groups:
        centroid = pts[g].mean(axis=0)
        pick = g[np.argmin(np.linalg.norm(pts[g] - centroid, axis=1))]
        center = pts[pick]
        ball = np.asarray(tree.query_ball_point(center, gamma), dtype=int)
        ball = ball[ball != pick]
        if pair_ok is not None and len(ball):
            ball = ball[pair_ok[fid_cols[pick], fid_cols[ball]]]
        if len(ball) < min_neighbors:
            continue
        # cap nearest-first within each contributing frame, so a kernel
        # constrains many relative poses instead of only whichever frame
        # happens to be densest nearby
        d = np.linalg.norm(pts[ball] - center, axis=1)
        ball = ball[np.argsort(d, kind="stable")]
        counts: dict[int, int] = {}
        picked = []
        for n in ball:
            f = int(fids[n])
            c = counts.get(f, 0)
            if c < max_neighbors:
                picked.append(n)
                counts[f] = c + 1
        nbr = np.asarray(picked, dtype=int)
        local = pts[nbr] - pts[nbr].mean(axis=0)
        cov = local.T @ local
        vals, vecs = np.linalg.eigh(cov)
        if vals[1] < 1e-12 * max(vals[2], 1e-32):
            continue  # collinear neighborhood, PCA normal undefined
        normal = vecs[:, 0]
        origin = poses[int(fids[pick])].translation
        if np.dot(normal, origin - center) < 0:
            normal = -normal
        kernels.append(SmoothingKernel(
            point=center.copy(),
            source=(int(fids[pick]), int(idxs[pick])),
            normal=normal,
            basis=tangent_frame(normal),
            alpha=np.zeros(5),
            neighbors=[(int(fids[n]), int(idxs[n])) for n in nbr],
        ))
    return kernels


def smooth_normal(
    initial: np.ndarray,
    neighbor_normals: list[np.ndarray] | np.ndarray,
    cfg: SmoothingConfig,
) -> np.ndarray:
    """Outlier-robust normal refinement by alternating sparse relaxation.

    Alternates between (1) thresholding the per-neighbor deviations
    d_j = 1 - n.nbr_j against mu/beta and (2) a two-DoF linear least-squares
    update of n, doubling beta from beta0 until beta_max. Deviations whose
    square exceeds mu/beta are released (no smoothing pull), which preserves
    sharp structure instead of averaging across it.
    """
    neighbor_normals = np.asarray(neighbor_normals, dtype=float).reshape(-1, 3)
    if len(neighbor_normals) == 0:
        return np.asarray(initial, dtype=float)
    n = np.asarray(initial, dtype=float)
    base = n
    beta = cfg.beta0
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    while beta <= cfg.beta_max:
        d = 1.0 - neighbor_normals @ n
        xi = np.where(cfg.mu / beta > d * d, 0.0, d)
        B = normal_complement(n)
        # Residuals: data (n + B dphi - base)/sqrt(2), smooth sqrt(beta)(d - N B dphi - xi).
        A = np.vstack([inv_sqrt2 * B, -np.sqrt(beta) * (neighbor_normals @ B)])
        r0 = np.concatenate([inv_sqrt2 * (n - base), np.sqrt(beta) * (d - xi)])
        dphi, *_ = np.linalg.lstsq(A, -r0, rcond=None)
        n = perturb_normal(n, dphi)
        beta *= 2.0
    return n


def project_to_kernel(kernel: SmoothingKernel, p_world: np.ndarray) -> np.ndarray:
    """Tangent-frame coordinates M (p_world - kernel_point). Accepts (3,) or (n,3)."""
    return (np.asarray(p_world, dtype=float) - kernel.point) @ kernel.basis.T


def surface_height(alpha: np.ndarray, x, y):
    """Polynomial height alpha . [x^2, y^2, xy, x, y]."""
    return (alpha[0] * x * x + alpha[1] * y * y + alpha[2] * x * y
            + alpha[3] * x + alpha[4] * y)


def fit_surface(tangent_points: np.ndarray, gamma: float) -> np.ndarray:
    """Weighted least-squares surface coefficients from tangent-frame samples.

    Each row (x, y, z) contributes residual (f(x, y) - z) * w with Gaussian
    radial weight w = exp(-|p|^2 / gamma^2). Solved through 5x5 normal
    equations with a 1e-10 * trace ridge for near-collinear neighborhoods.
    """
    tp = np.asarray(tangent_points, dtype=float).reshape(-1, 3)
    if len(tp) < 5:
        raise FitUnderdetermined(f"need >= 5 neighbors, got {len(tp)}")
    x, y, z = tp[:, 0], tp[:, 1], tp[:, 2]
    w = np.exp(-np.sum(tp * tp, axis=1) / (gamma * gamma))
    if np.all(w < 1e-12):
        raise FitDegenerate("all radial weights below 1e-12")
    A = np.column_stack([x * x, y * y, x * y, x, y]) * w[:, None]
    b = z * w
    ata = A.T @ A
    ata[np.diag_indices(5)] += 1e-12 * np.trace(ata)
    return np.linalg.solve(ata, A.T @ b)


def smooth_points(kernel: SmoothingKernel, tangent_points: np.ndarray) -> np.ndarray:
    """Replace each tangent z with the fitted surface height at (x, y)."""
    tp = np.asarray(tangent_points, dtype=float).reshape(-1, 3).copy()
    tp[:, 2] = surface_height(kernel.alpha, tp[:, 0], tp[:, 1])
    return tp


def build_kernels(
    frames: list[LidarFrame],
    poses: dict[int, Pose],
    cfg: SmoothingConfig,
    allowed_pairs: set[tuple[int, int]] | None = None,
) -> list[SmoothingKernel]:
    """Full smoothing pass: sample, refine normals, fit surfaces.

    Kernels whose surface fit is underdetermined or degenerate are dropped.
    Deterministic: output follows kernel sampling order.
    """
    kernels = sample_kernels(frames, poses, cfg.gamma,
                             min_neighbors=cfg.min_neighbors,
                             max_neighbors=cfg.max_neighbors,
                             allowed_pairs=allowed_pairs)
    if not kernels:
        return []
    pts, fids, _ = _world_stack(frames, poses)
    origins = np.stack([poses[int(f)].translation for f in fids])
    point_normals = estimate_point_normals(pts, origins)
    # (frame_id, index) -> stacked row, for neighbor normal lookup
    row_of = {}
    cursor = 0
    for f in frames:
        for i in range(len(f.points)):
            row_of[(f.frame_id, i)] = cursor
            cursor += 1

    fitted = []
    for k in kernels:
        nbr_rows = [row_of[ref] for ref in k.neighbors]
        k.normal = smooth_normal(k.normal, point_normals[nbr_rows], cfg)
        k.basis = tangent_frame(k.normal)
        world_nbrs = pts[nbr_rows]
        tp = project_to_kernel(k, world_nbrs)
        try:
            k.alpha = fit_surface(tp, cfg.gamma)
        except (FitUnderdetermined, FitDegenerate):
            continue
        # weighted fit residual; gated below against the population median
        r = surface_height(k.alpha, tp[:, 0], tp[:, 1]) - tp[:, 2]
        w = np.exp(-np.sum(tp * tp, axis=1) / (cfg.gamma * cfg.gamma))
        rms = np.sqrt(np.sum(w * r * r) / max(np.sum(w), 1e-300))
        fitted.append((k, rms))
    if not fitted:
        return []
    # gate on relative fit quality: misalignment inflates every kernel's
    # residual alike, but a neighborhood straddling two surfaces (e.g. a
    # room corner) yields a meaningless quadric that stands out against the
    # median and whose factors would drag poses toward the blend
    med = float(np.median([rms for _, rms in fitted]))
    gate = cfg.fit_gate * max(med, 1e-12)
    return [k for k, rms in fitted if rms <= gate]


def extract_factors(
    kernels: list[SmoothingKernel],
    frames: dict[int, LidarFrame],
    poses: dict[int, Pose],
    sparse_edges: set[tuple[int, int]],
    self_weight: float = 0.1,
) -> list[SurfaceFactor]:
    """One factor per kernel neighbor whose frame pair survives sparsification.

    A neighbor in frame j of a kernel in frame i contributes iff (i, j) is a
    kept edge (either orientation) or i == j. Same-frame factors are kept but
    down-weighted by self_weight: they regularize against surface noise
    without constraining a relative pose.
    """
    edge_set = set()
    for a, b in sparse_edges:
        edge_set.add((a, b))
        edge_set.add((b, a))
    factors = []
    for k in kernels:
        i, src_idx = k.source
        kernel_local = frames[i].points[src_idx]
        for (j, idx) in k.neighbors:
            if i != j and (i, j) not in edge_set:
                continue
            factors.append(SurfaceFactor(
                kernel_frame=i,
                neighbor_frame=j,
                kernel_local=kernel_local,
                neighbor_local=frames[j].points[idx],
                alpha=k.alpha,
                basis=k.basis,
                weight=self_weight if i == j else 1.0,
            ))
    return factors


def _surface_gradient(factor: SurfaceFactor, p_s: np.ndarray) -> np.ndarray:
    """d sigma / d p_S = [2 a0 x + a2 y + a3, 2 a1 y + a2 x + a4, -1]."""
    a = factor.alpha
    x, y = p_s[0], p_s[1]
    return np.array([2 * a[0] * x + a[2] * y + a[3],
                     2 * a[1] * y + a[2] * x + a[4],
                     -1.0])


def factor_residual(factor: SurfaceFactor, poses: dict[int, Pose]) -> float:
    """sigma = f(x_S, y_S) - z_S with both endpoints re-projected from poses."""
    pw_i = poses[factor.kernel_frame].apply(factor.kernel_local)
    pw_j = poses[factor.neighbor_frame].apply(factor.neighbor_local)
    p_s = factor.basis @ (pw_j - pw_i)
    return float(surface_height(factor.alpha, p_s[0], p_s[1]) - p_s[2])


def factor_world_terms(factor: SurfaceFactor, poses: dict[int, Pose]):
    """Residual plus per-frame world-point derivatives for chain-rule reuse.

    Returns (sigma, [(frame_id, d sigma/d p_W (3,), p_W (3,)), ...]) with one
    entry for the kernel frame and one for the neighbor frame (two entries
    even when the frames coincide).
    """
    pose_i = poses[factor.kernel_frame]
    pose_j = poses[factor.neighbor_frame]
    pw_i = pose_i.apply(factor.kernel_local)
    pw_j = pose_j.apply(factor.neighbor_local)
    p_s = factor.basis @ (pw_j - pw_i)
    sigma = float(surface_height(factor.alpha, p_s[0], p_s[1]) - p_s[2])
    g = _surface_gradient(factor, p_s) @ factor.basis  # d sigma / d p_W_j
    return sigma, [
        (factor.kernel_frame, -g, pw_i),
        (factor.neighbor_frame, g, pw_j),
    ]


def _chain_pose_block(d_pw: np.ndarray, pw: np.ndarray, lever_origin: np.ndarray) -> np.ndarray:
    """(d sigma/d theta, d sigma/d t) for a world point rotating about lever_origin."""
    d_theta = -d_pw @ hat(pw - lever_origin)
    return np.concatenate([d_theta, d_pw])


def factor_jacobian(factor: SurfaceFactor, poses: dict[int, Pose]):
    """Analytic 1x6 blocks (theta, t) for the kernel pose and the neighbor pose."""
    _, terms = factor_world_terms(factor, poses)
    blocks = []
    for fid, d_pw, pw in terms:
        blocks.append(_chain_pose_block(d_pw, pw, poses[fid].translation))
    return blocks[0], blocks[1]
