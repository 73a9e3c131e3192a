"""Dataset ingestion and serialization: TUM trajectories, PLY clouds, configs.

Trajectory files follow the TUM convention, one pose per line:
`timestamp tx ty tz qx qy qz qw`, whitespace-separated, `#` comments.
Cloud files are a PLY subset (ascii or binary_little_endian) with float32
x, y, z properties, either one file per frame or a single file carrying an
int frame_id property. Run configuration is a flat key=value text file whose
defaults mirror the solver defaults.
"""

from __future__ import annotations

from dataclasses import fields as dataclass_fields

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .geometry import LidarFrame, Pose
from .solver import SolverConfig


class ParseError(ValueError):
    """Malformed trajectory line."""


class OrderError(ValueError):
    """Timestamps not strictly increasing."""


class FormatError(ValueError):
    """PLY header/body mismatch or unsupported layout."""


class ConfigError(ValueError):
    """Unknown or invalid configuration key."""


# --------------------------------------------------------------------------
# TUM trajectories

def read_trajectory(path) -> list[tuple[float, Pose]]:
    """Parse a TUM trajectory file; quaternions are renormalized on read."""
    out: list[tuple[float, Pose]] = []
    prev_ts = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(v) for v in parts]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            ts, tx, ty, tz, qx, qy, qz, qw = values
            if prev_ts is not None and ts <= prev_ts:
                raise OrderError(f"{path}:{lineno}: timestamp {ts} not increasing")
            prev_ts = ts
            q = np.array([qx, qy, qz, qw])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-3:
                raise ParseError(f"{path}:{lineno}: quaternion norm {norm:.6f}")
            R = ScipyRotation.from_quat(q / norm).as_matrix()
            out.append((ts, Pose(R, np.array([tx, ty, tz]))))
    return out


def write_trajectory(path, trajectory: list[tuple[float, Pose]]) -> None:
    """Write TUM lines at 9 decimal digits (round trips within 1e-9)."""
    with open(path, "w") as fh:
        for ts, pose in trajectory:
            q = ScipyRotation.from_matrix(pose.rotation).as_quat()
            t = pose.translation
            fields = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
            fh.write(" ".join(f"{v:.9f}" for v in fields) + "\n")


# --------------------------------------------------------------------------
# PLY clouds

_PLY_FLOAT = {"float", "float32"}
_PLY_INT = {"int", "int32"}
_STRUCT_OF = {"float": ("f", 4), "float32": ("f", 4), "int": ("i", 4),
              "int32": ("i", 4), "uchar": ("B", 1), "uint8": ("B", 1),
              "double": ("d", 8), "float64": ("d", 8), "uint": ("I", 4),
              "uint32": ("I", 4), "short": ("h", 2), "ushort": ("H", 2)}


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError("list properties are not supported")
            props.append((tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise FormatError("no vertex element")
    return fmt, count, props


def read_cloud(path, frame_id: int = 0, timestamp: float = 0.0) -> list[LidarFrame]:
    """Load a PLY cloud; a frame_id property splits the points into frames.

    Requires float32 x, y, z vertex properties. Returns one frame per
    distinct frame_id value (ascending), or a single frame using the given
    frame_id when the property is absent.
    """
    with open(path, "rb") as fh:
        fmt, count, props = _parse_ply_header(fh)
        names = [n for _, n in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise FormatError(f"missing {axis} property")
            if props[names.index(axis)][0] not in _PLY_FLOAT:
                raise FormatError(f"{axis} must be float32")
        has_fid = "frame_id" in names
        if has_fid and props[names.index("frame_id")][0] not in _PLY_INT:
            raise FormatError("frame_id must be int32")
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                line = fh.readline()
                if not line.strip():
                    raise FormatError(f"body ended early: expected {count} vertices")
                rows.append([float(v) for v in line.split()])
            data = np.asarray(rows, dtype=float)
            if data.shape[1] != len(props):
                raise FormatError("vertex line width does not match header")
        else:
            np_types = {"float": "<f4", "float32": "<f4", "double": "<f8",
                        "float64": "<f8", "int": "<i4", "int32": "<i4",
                        "uint": "<u4", "uint32": "<u4", "uchar": "u1",
                        "uint8": "u1", "short": "<i2", "ushort": "<u2"}
            try:
                dtype = np.dtype([(n, np_types[t]) for t, n in props])
            except KeyError as exc:
                raise FormatError(f"unsupported property type {exc}") from exc
            buf = fh.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise FormatError(f"body ended early: expected {count} vertices")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            data = np.column_stack([rec[n].astype(float) for n in names])
    xyz = data[:, [names.index("x"), names.index("y"), names.index("z")]]
    if not has_fid:
        return [LidarFrame(frame_id, timestamp, xyz)]
    fids = data[:, names.index("frame_id")].astype(int)
    return [LidarFrame(int(f), float(f), xyz[fids == f])
            for f in np.unique(fids)]


def write_cloud(path, points: np.ndarray, frame_ids: np.ndarray | None = None,
                binary: bool = True) -> None:
    """Write points (n, 3) as PLY, with an optional int32 frame_id property."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(points)}",
              "property float x", "property float y", "property float z"]
    if frame_ids is not None:
        header.append("property int frame_id")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if frame_ids is None:
                fh.write(points.astype("<f4").tobytes())
            else:
                rec = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"),
                                                   ("z", "<f4"), ("frame_id", "<i4")])
                rec["x"], rec["y"], rec["z"] = points.T
                rec["frame_id"] = np.asarray(frame_ids, dtype=np.int32)
                fh.write(rec.tobytes())
        else:
            for k, p in enumerate(points):
                row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
                if frame_ids is not None:
                    row += f" {int(frame_ids[k])}"
                fh.write((row + "\n").encode("ascii"))


def voxel_downsample(points: np.ndarray, size: float) -> np.ndarray:
    """Keep one point (centroid) per occupied voxel of the given edge."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points
    keys = np.floor(points / size).astype(np.int64)
    order = np.lexsort(keys.T)
    sorted_keys = keys[order]
    boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0), axis=1))[0] + 1
    return np.stack([points[g].mean(axis=0)
                     for g in np.split(order, boundaries)])


# --------------------------------------------------------------------------
# Run configuration

_PATH_KEYS = ("cloud", "trajectory", "out_dir")


def _solver_fields():
    return {f.name: f.type for f in dataclass_fields(SolverConfig)}


def parse_config(path) -> tuple[SolverConfig, dict[str, str]]:
    """Flat key=value config; returns the solver settings and the path keys.

    Unknown keys are rejected. An empty file reproduces the default
    operating point.
    """
    known = _solver_fields()
    solver_kwargs = {}
    paths: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in _PATH_KEYS:
                paths[key] = value
            elif key in known:
                kind = known[key]
                try:
                    solver_kwargs[key] = int(value) if "int" in str(kind) \
                        else float(value)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    try:
        cfg = SolverConfig(**solver_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, paths
