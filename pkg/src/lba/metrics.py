"""Trajectory accuracy metrics."""

from __future__ import annotations

import numpy as np

from .geometry import Pose


class MetricError(ValueError):
    """Trajectories cannot be compared."""


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form SE(3) fit (no scale) minimizing |R s + t - target|^2."""
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    cov = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def ape(
    estimated: list[Pose] | dict[int, Pose],
    ground_truth: list[Pose] | dict[int, Pose],
) -> tuple[float, np.ndarray]:
    """Absolute position error after best-fit rigid alignment.

    Returns (translation RMSE, per-frame error magnitudes). Dict inputs are
    matched by sorted key; list inputs by index.
    """
    if isinstance(estimated, dict):
        estimated = [estimated[k] for k in sorted(estimated)]
    if isinstance(ground_truth, dict):
        ground_truth = [ground_truth[k] for k in sorted(ground_truth)]
    if len(estimated) != len(ground_truth):
        raise MetricError(f"length mismatch: {len(estimated)} vs {len(ground_truth)}")
    if len(estimated) == 0:
        raise MetricError("empty trajectories")
    est = np.stack([p.translation for p in estimated])
    gt = np.stack([p.translation for p in ground_truth])
    R, t = align_rigid(est, gt)
    residual = est @ R.T + t - gt
    errors = np.linalg.norm(residual, axis=1)
    return float(np.sqrt(np.mean(errors ** 2))), errors
