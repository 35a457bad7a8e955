"""Uses of a depth map: coloured point clouds and synthetic depth-of-field."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import CameraIntrinsics
from .errors import ConfigError, DataError, FormatError, ShapeError


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3) metres
    colors: np.ndarray  # (M, 3) uint8

    def __len__(self):
        return len(self.points)


def _to_uint8(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.dtype == np.uint8:
        return rgb
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def backproject(depth, rgb, mask, intrinsics: CameraIntrinsics) -> PointCloud:
    """Lift every valid pixel ``(u, v)`` to ``((u-cx) z/fx, (v-cy) z/fy, z)``."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeError(f"depth must be HxW, got {depth.shape}")
    mask = np.ones(depth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise ShapeError(f"mask {mask.shape} does not match depth {depth.shape}")
    if rgb is None:
        rgb = np.full(depth.shape + (3,), 255, dtype=np.uint8)
    rgb = _to_uint8(rgb)
    if rgb.shape != depth.shape + (3,):
        raise ShapeError(f"rgb {rgb.shape} does not match depth {depth.shape}")
    z = depth[mask]
    if np.any(~(z > 0)):
        raise DataError("non-positive depth on a valid pixel")
    v, u = np.nonzero(mask)
    k = intrinsics
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return PointCloud(np.stack([x, y, z], axis=1), rgb[mask])


def project(points: np.ndarray, intrinsics: CameraIntrinsics):
    """Pinhole projection back to pixel coordinates ``(u, v)``."""
    points = np.asarray(points, dtype=np.float64)
    k = intrinsics
    return k.fx * points[:, 0] / points[:, 2] + k.cx, k.fy * points[:, 1] / points[:, 2] + k.cy


def export_ply(cloud: PointCloud, path):
    """ASCII PLY with float xyz and uchar colours."""
    if len(cloud) == 0:
        raise DataError("refusing to write an empty point cloud")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    pts = np.asarray(cloud.points, dtype=np.float32)
    cols = np.asarray(cloud.colors, dtype=np.uint8)
    body = [
        f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}"
        for (x, y, z), (r, g, b) in zip(pts.tolist(), cols.tolist())
    ]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> PointCloud:
    """Parse the ASCII PLY subset written by :func:`export_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    props = []
    i = 1
    while i < len(text) and text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        elif parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ASCII PLY is supported")
        i += 1
    if count is None or i == len(text):
        raise FormatError(f"{path}: malformed PLY header")
    rows = np.array([line.split() for line in text[i + 1:i + 1 + count]], dtype=np.float64)
    if rows.shape != (count, len(props)):
        raise FormatError(f"{path}: expected {count} vertices with {len(props)} properties")
    col = {name: rows[:, j] for j, name in enumerate(props)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float32)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
    return PointCloud(pts, rgb)


# ---------------------------------------------------------------------------
# bokeh


@dataclass(frozen=True)
class BokehParams:
    focus_depth: float
    aperture: float = 8.0
    max_radius: float = 8.0

    def __post_init__(self):
        if not self.focus_depth > 0:
            raise ConfigError(f"focus_depth must be positive, got {self.focus_depth}")
        if self.aperture < 0 or self.max_radius < 0:
            raise ConfigError("aperture and max_radius must be non-negative")


def blur_radius(depth: np.ndarray, params: BokehParams) -> np.ndarray:
    """Circle-of-confusion radius in pixels, grows with the inverse-depth offset from focus."""
    depth = np.asarray(depth, dtype=np.float64)
    f = params.focus_depth
    coc = params.aperture * np.abs(1.0 / depth - 1.0 / f) * f
    return np.minimum(params.max_radius, coc)


def render_bokeh(rgb, depth, params: BokehParams) -> np.ndarray:
    """Gather blur with a per-pixel disc; in-focus pixels pass through unchanged.

    The disc is renormalised at image borders. Occlusion boundaries are not
    treated specially, so a sharp foreground can pick up background colour.
    """
    rgb = np.asarray(rgb)
    depth = np.asarray(depth, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[:2] != depth.shape:
        raise ShapeError(f"rgb {rgb.shape} and depth {depth.shape} disagree")
    if np.any(~(depth > 0)):
        raise DataError("bokeh needs strictly positive depth")
    radius = blur_radius(depth, params)
    max_r = int(math.floor(params.max_radius))
    out = kernels.disc_gather(rgb.astype(np.float64), radius, max_r)
    return out.astype(rgb.dtype) if np.issubdtype(rgb.dtype, np.floating) else out


def save_bokeh_ppm(path, image: np.ndarray):
    from .data import write_ppm

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_ppm(path, image)


# ---------------------------------------------------------------------------
# colour map

# Five viridis key colours, linearly interpolated; near depths map to the
# first stop, far depths to the last.
PALETTE = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=np.float64)


def colorize_depth(depth, d_min=None, d_max=None, mask=None) -> np.ndarray:
    """Map depth to uint8 RGB with :data:`PALETTE`; masked pixels are black."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) if mask is None else np.asarray(mask, dtype=bool) & np.isfinite(depth)
    if not valid.any():
        return np.zeros(depth.shape + (3,), dtype=np.uint8)
    lo = float(depth[valid].min()) if d_min is None else float(d_min)
    hi = float(depth[valid].max()) if d_max is None else float(d_max)
    t = np.clip((depth - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(depth)
    pos = t * (len(PALETTE) - 1)
    i = np.minimum(pos.astype(np.int64), len(PALETTE) - 2)
    frac = (pos - i)[..., None]
    rgb = PALETTE[i] * (1.0 - frac) + PALETTE[i + 1] * frac
    rgb = np.where(valid[..., None], rgb, 0.0)
    return np.round(rgb).astype(np.uint8)
