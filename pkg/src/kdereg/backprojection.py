"""Depth-map processing that turns masked RGB-D frames into object point clouds.

Pipeline order: ``fill_holes`` -> ``align_depth_to_color`` ->
``rectify_with_mask`` -> ``backproject`` -> ``remove_outliers``.
Segmentation masks are produced elsewhere and come in as images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import InputError
from .geometry import PointCloud, RigidTransform

DEFAULT_WIDTH = 320
DEFAULT_HEIGHT = 240
DEFAULT_DEPTH_SCALE = 0.001
SOR_NEIGHBORS = 20
SOR_SIGMA_MULT = 2.0

_UNSET = np.iinfo(np.int32).max


class EmptyDepthWarning(UserWarning):
    """Raised when an operation receives a depth image with no readings."""


@dataclass(frozen=True)
class DepthImage:
    """Row-major 16-bit depth raster; 0 marks a missing reading."""

    values: np.ndarray
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InputError(f"depth image must be 2D, got shape {v.shape}")
        if np.any(v < 0) or np.any(v > 65535):
            raise InputError("depth values must fit in 16 bits")
        v = np.array(v, dtype=np.uint16, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not self.depth_scale > 0:
            raise InputError("depth_scale must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MaskImage:
    """Segmentation mask; 0 is background, any other value an instance label."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InputError(f"mask must be 2D, got shape {v.shape}")
        v = np.array(v, dtype=np.int64, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.values) if v != 0]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def check(self, width: int | None = None, height: int | None = None) -> None:
        if self.fx == 0 or self.fy == 0:
            raise InputError("focal length must be non-zero")
        if self.fx < 0 or self.fy < 0:
            raise InputError("focal lengths must be positive")
        if width is not None and not 0 < self.cx < width:
            raise InputError(f"cx={self.cx} outside (0, {width})")
        if height is not None and not 0 < self.cy < height:
            raise InputError(f"cy={self.cy} outside (0, {height})")


@dataclass(frozen=True)
class CameraModel:
    """Depth and color pinhole intrinsics plus the depth-to-color extrinsics."""

    depth_intrinsics: Intrinsics
    color_intrinsics: Intrinsics
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)
    depth_scale: float = DEFAULT_DEPTH_SCALE


def fill_holes(depth: DepthImage) -> DepthImage:
    """Fill zero pixels with the nearest-to-camera value among 8-neighbours.

    Each sweep fills, simultaneously, every hole that touches at least one
    reading; sweeps repeat until nothing changes. An image with no readings
    at all comes back unchanged with an ``EmptyDepthWarning``.
    """
    values = depth.values.astype(np.int32)
    if not np.any(values):
        warnings.warn("depth image has no readings; nothing to fill", EmptyDepthWarning)
        return depth
    footprint = np.ones((3, 3), dtype=bool)
    footprint[1, 1] = False
    while True:
        holes = values == 0
        if not np.any(holes):
            break
        probe = np.where(holes, _UNSET, values)
        nearest = ndimage.minimum_filter(
            probe, footprint=footprint, mode="constant", cval=_UNSET
        )
        fillable = holes & (nearest != _UNSET)
        if not np.any(fillable):
            break
        values[fillable] = nearest[fillable]
    return DepthImage(values, depth.depth_scale)


def _pixel_grid(height: int, width: int):
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(np.float64), v.astype(np.float64)


def align_depth_to_color(
    depth: DepthImage,
    camera: CameraModel,
    color_width: int = DEFAULT_WIDTH,
    color_height: int = DEFAULT_HEIGHT,
) -> DepthImage:
    """Re-render a depth image into the color camera's raster.

    Each reading is lifted with the depth intrinsics, moved by the
    extrinsics, and projected with the color intrinsics onto the nearest
    pixel. Where several readings land on one pixel the smallest depth wins;
    pixels that receive nothing stay 0.
    """
    di, ci = camera.depth_intrinsics, camera.color_intrinsics
    if di.fx == 0 or di.fy == 0 or ci.fx == 0 or ci.fy == 0:
        raise InputError("focal length must be non-zero")
    scale = depth.depth_scale
    u, v = _pixel_grid(depth.height, depth.width)
    valid = depth.values > 0
    z = depth.values[valid].astype(np.float64) * scale
    pts = np.column_stack(
        [(u[valid] - di.cx) * z / di.fx, (v[valid] - di.cy) * z / di.fy, z]
    )
    pts = camera.extrinsics.apply(pts)
    zc = pts[:, 2]
    front = zc > 0
    pts, zc = pts[front], zc[front]
    uc = np.rint(pts[:, 0] * ci.fx / zc + ci.cx).astype(np.int64)
    vc = np.rint(pts[:, 1] * ci.fy / zc + ci.cy).astype(np.int64)
    raw = np.rint(zc / scale)
    inside = (
        (uc >= 0) & (uc < color_width) & (vc >= 0) & (vc < color_height)
        & (raw >= 1) & (raw <= 65535)
    )
    out = np.full(color_height * color_width, _UNSET, dtype=np.int64)
    np.minimum.at(out, vc[inside] * color_width + uc[inside], raw[inside].astype(np.int64))
    out[out == _UNSET] = 0
    return DepthImage(out.reshape(color_height, color_width), scale)


def rectify_with_mask(aligned: DepthImage, mask: MaskImage) -> DepthImage:
    """Zero every depth pixel that falls outside the mask."""
    if aligned.values.shape != mask.values.shape:
        raise InputError(
            f"mask is {mask.width}x{mask.height} but depth is "
            f"{aligned.width}x{aligned.height}"
        )
    return DepthImage(np.where(mask.values != 0, aligned.values, 0), aligned.depth_scale)


def _intrinsics_of(camera) -> Intrinsics:
    # the rectified raster lives in the color frame after alignment
    return camera.color_intrinsics if isinstance(camera, CameraModel) else camera


def backproject(masked: DepthImage, camera: CameraModel | Intrinsics) -> PointCloud:
    """Lift every non-zero pixel to a 3D point, in raster scan order."""
    k = _intrinsics_of(camera)
    k.check()
    rows, cols = np.nonzero(masked.values)
    z = masked.values[rows, cols].astype(np.float64) * masked.depth_scale
    x = (cols - k.cx) * z / k.fx
    y = (rows - k.cy) * z / k.fy
    return PointCloud(np.column_stack([x, y, z]))


def project(
    points, camera: CameraModel | Intrinsics, width: int, height: int,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
) -> DepthImage:
    """Render points into a depth raster (nearest pixel, nearest surface)."""
    k = _intrinsics_of(camera)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[pts[:, 2] > 0]
    u = np.rint(pts[:, 0] * k.fx / pts[:, 2] + k.cx).astype(np.int64)
    v = np.rint(pts[:, 1] * k.fy / pts[:, 2] + k.cy).astype(np.int64)
    raw = np.rint(pts[:, 2] / depth_scale)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height) & (raw >= 1) & (raw <= 65535)
    out = np.full(height * width, _UNSET, dtype=np.int64)
    np.minimum.at(out, v[ok] * width + u[ok], raw[ok].astype(np.int64))
    out[out == _UNSET] = 0
    return DepthImage(out.reshape(height, width), depth_scale)


def lift_pixels(pixels, masked: DepthImage, camera: CameraModel | Intrinsics):
    """3D points for matched keypoint pixels ``(u, v)``.

    Coordinates are rounded to the nearest pixel. Returns the points and a
    boolean array marking pixels that had a depth reading.
    """
    k = _intrinsics_of(camera)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u = np.rint(uv[:, 0]).astype(np.int64)
    v = np.rint(uv[:, 1]).astype(np.int64)
    inside = (u >= 0) & (u < masked.width) & (v >= 0) & (v < masked.height)
    raw = np.zeros(len(uv))
    raw[inside] = masked.values[v[inside], u[inside]]
    z = raw * masked.depth_scale
    pts = np.column_stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
    return pts, raw > 0


def remove_outliers(
    cloud: PointCloud, k: int = SOR_NEIGHBORS, sigma_mult: float = SOR_SIGMA_MULT
) -> PointCloud:
    """Statistical outlier removal on mean k-nearest-neighbour distance.

    Points whose mean distance to their ``k`` nearest neighbours exceeds the
    global mean by more than ``sigma_mult`` standard deviations are dropped.
    Clouds with at most ``k`` points are returned unchanged.
    """
    if k < 1:
        raise InputError("k must be at least 1")
    n = len(cloud)
    if n <= k:
        return cloud
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    mean_dist = dist[:, 1:].mean(axis=1)
    limit = mean_dist.mean() + sigma_mult * mean_dist.std()
    return cloud.select(np.flatnonzero(mean_dist <= limit))


def segment_instances(
    masked: DepthImage,
    mask: MaskImage,
    camera: CameraModel | Intrinsics,
    k: int = SOR_NEIGHBORS,
    sigma_mult: float = SOR_SIGMA_MULT,
    clean: bool = True,
) -> dict[int, PointCloud]:
    """One cleaned point cloud per instance label in ``mask``."""
    clouds = {}
    for label in mask.labels():
        only = DepthImage(np.where(mask.values == label, masked.values, 0), masked.depth_scale)
        cloud = backproject(only, camera)
        clouds[label] = remove_outliers(cloud, k, sigma_mult) if clean else cloud
    return clouds


def ego_segment(
    depth: DepthImage,
    mask: MaskImage,
    camera: CameraModel,
    k: int = SOR_NEIGHBORS,
    sigma_mult: float = SOR_SIGMA_MULT,
    clean: bool = True,
):
    """Run the full depth-to-object-cloud chain for one frame.

    Returns the masked color-frame depth image and a dict of per-instance
    clouds.
    """
    camera.color_intrinsics.check(mask.width, mask.height)
    filled = fill_holes(depth)
    aligned = align_depth_to_color(filled, camera, mask.width, mask.height)
    masked = rectify_with_mask(aligned, mask)
    return masked, segment_instances(masked, mask, camera, k, sigma_mult, clean)
