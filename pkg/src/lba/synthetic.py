"""Seeded synthetic indoor scenes for desk-scale verification.

A scene is a room made of analytic patches (planes plus curved quadric
patches z_local = a . [x^2, y^2, xy, x, y] under an SE(3) placement), scanned
by a trajectory of poses with bounded visibility so consecutive frames share
voxel overlap. Sensor-frame measurements optionally carry Gaussian noise, and
the initial guesses handed to the solver are the true poses under seeded
rotation/translation perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LidarFrame, Pose, exp_map
from .smoothing import surface_height


@dataclass
class SurfacePatch:
    """Quadric patch z = alpha . [x^2,y^2,xy,x,y] over a rectangle, placed in 3D."""

    alpha: np.ndarray
    placement: Pose           # patch frame -> world
    extent: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x0, x1, y0, y1 = self.extent
        x = rng.uniform(x0, x1, n)
        y = rng.uniform(y0, y1, n)
        z = surface_height(np.asarray(self.alpha, dtype=float), x, y)
        return self.placement.apply(np.column_stack([x, y, z]))


@dataclass
class SceneSpec:
    """Everything needed to reproduce a scene from its seed."""

    n_frames: int = 20
    points_per_frame: int = 2000
    noise_sigma: float = 0.005
    perturb_rot_sigma: float = np.deg2rad(2.0)   # radians
    perturb_trans_sigma: float = 0.1             # meters
    visibility_radius: float = 20.0
    room_length: float = 20.0
    room_width: float = 14.0
    room_height: float = 6.0
    rng_seed: int = 0


def _rot_about(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return exp_map(axis / np.linalg.norm(axis) * angle)


def default_room(spec: SceneSpec) -> list[SurfacePatch]:
    """Floor, two walls, and a curved patch; enough orientations to pin 6 DoF."""
    L, W, H = spec.room_length, spec.room_width, spec.room_height
    flat = np.zeros(5)
    patches = [
        # floor z = 0
        SurfacePatch(flat, Pose(np.eye(3), np.zeros(3)), (0.0, L, 0.0, W)),
        # wall y = 0 (patch z-axis -> world +y)
        SurfacePatch(flat, Pose(_rot_about([1, 0, 0], -np.pi / 2), np.zeros(3)),
                     (0.0, L, -H, 0.0)),
        # wall y = W (patch z-axis -> world -y)
        SurfacePatch(flat, Pose(_rot_about([1, 0, 0], np.pi / 2),
                                np.array([0.0, W, 0.0])), (0.0, L, 0.0, H)),
        # wall x = 0 (patch z-axis -> world +x)
        SurfacePatch(flat, Pose(_rot_about([0, 1, 0], np.pi / 2), np.zeros(3)),
                     (-H, 0.0, 0.0, W)),
        # gently curved canopy over the middle of the room
        SurfacePatch(np.array([0.02, 0.015, 0.008, 0.0, 0.0]),
                     Pose(np.eye(3), np.array([L / 2, W / 2, H])),
                     (-L / 4, L / 4, -W / 4, W / 4)),
        # low curved mound on the floor, off-center
        SurfacePatch(np.array([-0.015, -0.02, 0.005, 0.0, 0.0]),
                     Pose(np.eye(3), np.array([L / 4, W / 4, 1.2])),
                     (-L / 8, L / 8, -W / 8, W / 8)),
    ]
    return patches


def true_trajectory(spec: SceneSpec) -> list[Pose]:
    """Closed circuit around the room center with a gentle yaw wobble."""
    poses = []
    L, W = spec.room_length, spec.room_width
    radius = 0.28 * min(L, W)
    for k in range(spec.n_frames):
        theta = 2.0 * np.pi * k / max(spec.n_frames, 1)
        t = np.array([L / 2 + radius * np.cos(theta),
                      W / 2 + radius * np.sin(theta), 1.5])
        yaw = theta + np.pi / 2 + 0.1 * np.sin(3.0 * theta)
        poses.append(Pose(_rot_about([0, 0, 1], yaw), t))
    return poses


def generate_scene(
    spec: SceneSpec,
    patches: list[SurfacePatch] | None = None,
) -> tuple[list[LidarFrame], dict[int, Pose], dict[int, Pose]]:
    """Sample frames, true poses, and seeded perturbed initial poses.

    Each frame draws surface samples until points_per_frame of them fall
    within the visibility radius of the sensor; measurements are expressed
    in the sensor frame through the true pose, then perturbed isotropic
    Gaussian noise of noise_sigma is added.
    """
    rng = np.random.default_rng(spec.rng_seed)
    patches = default_room(spec) if patches is None else patches
    truth = true_trajectory(spec)
    areas = np.array([(p.extent[1] - p.extent[0]) * (p.extent[3] - p.extent[2])
                      for p in patches])
    shares = areas / areas.sum()
    frames = []
    true_poses: dict[int, Pose] = {}
    init_poses: dict[int, Pose] = {}
    for fid, pose in enumerate(truth):
        collected = []
        remaining = spec.points_per_frame
        for _ in range(50):
            if remaining <= 0:
                break
            # sample each patch in proportion to its area so point density
            # is roughly uniform over the scene, then shuffle so the
            # visibility cut does not favour any one patch
            counts = np.maximum(np.ceil(shares * max(remaining, 40)), 8).astype(int)
            batch = np.vstack([p.sample(rng, c) for p, c in zip(patches, counts)])
            batch = batch[rng.permutation(len(batch))]
            visible = batch[np.linalg.norm(batch - pose.translation, axis=1)
                            <= spec.visibility_radius]
            if len(visible) == 0:
                continue
            take = visible[:remaining]
            collected.append(take)
            remaining -= len(take)
        world = np.vstack(collected) if collected else np.zeros((1, 3))
        local = pose.inverse_apply(world)
        if spec.noise_sigma > 0:
            local = local + rng.normal(0.0, spec.noise_sigma, local.shape)
        frames.append(LidarFrame(fid, float(fid), local))
        true_poses[fid] = pose
        dtheta = rng.normal(0.0, spec.perturb_rot_sigma, 3)
        dt = rng.normal(0.0, spec.perturb_trans_sigma, 3)
        init_poses[fid] = Pose(exp_map(dtheta) @ pose.rotation, pose.translation + dt)
    return frames, true_poses, init_poses


_SPEC_FIELDS = {f.name for f in SceneSpec.__dataclass_fields__.values()}


def parse_scene_spec(path) -> SceneSpec:
    """Flat key=value scene description; unknown keys rejected."""
    kwargs = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _SPEC_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = int(value) if key in ("n_frames", "points_per_frame",
                                                "rng_seed") else float(value)
    return SceneSpec(**kwargs)
