"""Density-based importance weights for 3D correspondences.

Each correspondence starts with a neighbour count inside a radius. The
three coordinate axes are then treated as independent samples: every axis
is linearly binned onto a regular grid, smoothed with a Gaussian kernel by
FFT convolution using an Improved Sheather-Jones bandwidth, and the
per-axis densities at each point are multiplied into its weight.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .exceptions import DegenerateError, InputError
from .geometry import CorrespondenceSet

DEFAULT_GRID_SIZE = 1024
DEFAULT_RADIUS_FRACTION = 0.05
GRID_PAD_SIGMAS = 3.0
MIN_KDE_SAMPLES = 10
ISJ_STAGES = 7

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class BandwidthFallbackWarning(UserWarning):
    """ISJ found no root and the normal-reference rule was used instead."""


@dataclass(frozen=True)
class BinnedData:
    """Grid counts from linear binning; ``degenerate`` marks a single spike."""

    grid: np.ndarray
    counts: np.ndarray
    degenerate: bool = False

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def extent(self) -> float:
        return float(self.grid[-1] - self.grid[0])

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation off the grid; zero outside it."""
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))


@dataclass(frozen=True)
class WeightVector:
    """Output of :func:`weigh_correspondences`.

    ``fallback`` is set when uniform weights were returned instead of
    density weights; ``reason`` says why. ``bandwidths`` and ``densities``
    hold one entry per axis (``None`` for an axis that carried no spread).
    """

    values: np.ndarray
    fallback: bool = False
    reason: str | None = None
    radius: float | None = None
    bandwidths: tuple = (None, None, None)
    densities: tuple = (None, None, None)
    notes: tuple = ()

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def default_radius(points) -> float:
    """Five percent of the bounding-box diagonal."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    return DEFAULT_RADIUS_FRACTION * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def init_weights(points, radius: float) -> np.ndarray:
    """Initial weight per point: number of other points within ``radius``, plus one."""
    if not radius > 0:
        raise InputError(f"neighbour radius must be positive, got {radius}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InputError("no points to weigh")
    tree = cKDTree(pts)
    # the ball around a point contains the point itself, which supplies the +1
    return tree.query_ball_point(pts, radius, return_length=True).astype(np.float64)


def _check_grid_size(grid_size: int) -> None:
    if grid_size < 16 or grid_size & (grid_size - 1):
        raise InputError(f"grid size must be a power of two >= 16, got {grid_size}")


def linear_bin(samples, weights=None, grid_size: int = DEFAULT_GRID_SIZE, bounds=None) -> BinnedData:
    """Split each sample's weight between its two bracketing grid points.

    The grid has ``grid_size`` points spanning the sample range padded by
    three weighted standard deviations on each side, or ``bounds`` when
    given. Identical samples produce a single spike at the grid centre with
    ``degenerate=True``.
    """
    _check_grid_size(grid_size)
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise InputError("no samples to bin")
    if w.shape != x.shape:
        raise InputError(f"{len(w)} weights for {len(x)} samples")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")

    if bounds is None:
        lo, hi = float(x.min()), float(x.max())
        if hi == lo:
            step = 1e-3 * max(1.0, abs(lo))
            grid = lo + step * (np.arange(grid_size) - grid_size // 2)
            counts = np.zeros(grid_size)
            counts[grid_size // 2] = w.sum()
            return BinnedData(grid, counts, degenerate=True)
        wsum = w.sum()
        if wsum > 0:
            mean = np.dot(w, x) / wsum
            sigma = math.sqrt(np.dot(w, (x - mean) ** 2) / wsum)
        else:
            sigma = float(x.std())
        lo -= GRID_PAD_SIGMAS * sigma
        hi += GRID_PAD_SIGMAS * sigma
    else:
        lo, hi = map(float, bounds)
        if not hi > lo:
            raise InputError("grid bounds must be increasing")
        if x.min() < lo or x.max() > hi:
            raise InputError("samples fall outside the grid bounds")

    grid = np.linspace(lo, hi, grid_size)
    delta = (hi - lo) / (grid_size - 1)
    pos = (x - lo) / delta
    left = np.clip(np.floor(pos).astype(np.int64), 0, grid_size - 2)
    frac = np.clip(pos - left, 0.0, 1.0)
    counts = np.bincount(left, weights=w * (1.0 - frac), minlength=grid_size)
    counts += np.bincount(left + 1, weights=w * frac, minlength=grid_size)
    return BinnedData(grid, counts, degenerate=False)


def _binned_std(binned: BinnedData) -> float:
    c, g = binned.counts, binned.grid
    total = c.sum()
    mean = np.dot(c, g) / total
    return math.sqrt(max(np.dot(c, (g - mean) ** 2) / total, 0.0))


def silverman_bandwidth(sigma: float, m: int) -> float:
    """Normal-reference rule ``1.06 * sigma * m**(-1/5)``."""
    return 1.06 * sigma * m ** (-0.2)


def _isj_fixed_point(t: float, m: int, k2: np.ndarray, a2: np.ndarray) -> float:
    """``t - xi * gamma^[l](t)`` with ``l`` plug-in stages."""
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        f = 2.0 * math.pi ** (2 * ISJ_STAGES) * np.sum(
            k2 ** ISJ_STAGES * a2 * np.exp(-k2 * math.pi ** 2 * t)
        )
        for s in range(ISJ_STAGES - 1, 1, -1):
            k0 = np.prod(np.arange(1, 2 * s, 2, dtype=np.float64)) / _SQRT_2PI
            const = (1.0 + 0.5 ** (s + 0.5)) / 3.0
            t_s = (2.0 * const * k0 / m / f) ** (2.0 / (3.0 + 2.0 * s))
            f = 2.0 * math.pi ** (2 * s) * np.sum(k2 ** s * a2 * np.exp(-k2 * math.pi ** 2 * t_s))
        return float(t - (2.0 * m * math.sqrt(math.pi) * f) ** (-0.4))


def _isj(binned: BinnedData, m: int) -> tuple[float, bool]:
    if binned.degenerate:
        raise DegenerateError("ISJ bandwidth is undefined for identical samples")
    if m < 2:
        raise DegenerateError("ISJ bandwidth needs at least two samples")
    rel = binned.counts / binned.total
    a = sfft.dct(rel, type=2)
    k2 = np.arange(1, len(rel), dtype=np.float64) ** 2
    a2 = (a[1:] / 2.0) ** 2

    # scan for the first sign change, then polish with Brent's method
    ts = np.geomspace(1e-12, 0.1, 80)
    vals = np.array([_isj_fixed_point(t, m, k2, a2) for t in ts])
    ok = np.isfinite(vals)
    for i in range(len(ts) - 1):
        if ok[i] and ok[i + 1] and vals[i] < 0 <= vals[i + 1]:
            t_star = brentq(_isj_fixed_point, ts[i], ts[i + 1], args=(m, k2, a2), xtol=1e-15)
            h = math.sqrt(t_star) * binned.extent
            if 0 < h < binned.extent:
                return h, False
            break
    return silverman_bandwidth(_binned_std(binned), m), True


def isj_bandwidth(binned: BinnedData, m: int) -> float:
    """Improved Sheather-Jones bandwidth for binned data of ``m`` samples.

    Solves the seven-stage plug-in fixed-point equation over the discrete
    cosine transform of the normalised grid counts. When no root is
    bracketed the normal-reference rule is returned and a
    ``BandwidthFallbackWarning`` is emitted.
    """
    h, fell_back = _isj(binned, m)
    if fell_back:
        warnings.warn(
            "ISJ fixed point has no root in (0, 0.1]; using the normal-reference rule",
            BandwidthFallbackWarning,
        )
    return h


def fft_kde(binned: BinnedData, bandwidth: float) -> DensityEstimate:
    """Gaussian KDE of binned data evaluated on its grid by FFT convolution.

    The counts are convolved with the kernel sampled at every grid offset
    ``-(M-1)..(M-1)`` and divided by the total mass, so the estimate
    integrates to one whatever the overall weight scale.
    """
    if not bandwidth > 0:
        raise InputError(f"bandwidth must be positive, got {bandwidth}")
    total = binned.total
    if not total > 0:
        raise DegenerateError("binned data carries no mass")
    size = len(binned.counts)
    offsets = np.arange(-(size - 1), size) * (binned.spacing / bandwidth)
    kernel = np.exp(-0.5 * offsets**2) / (_SQRT_2PI * bandwidth)
    n = 2 * size
    conv = sfft.irfft(sfft.rfft(binned.counts, n) * sfft.rfft(kernel, n), n)
    values = np.maximum(conv[size - 1: 2 * size - 1], 0.0) / total
    return DensityEstimate(binned.grid, values, float(bandwidth))


def axis_densities(points, base_weights, grid_size: int = DEFAULT_GRID_SIZE):
    """Per-axis KDE of ``points`` weighted by ``base_weights``.

    Returns a list with one ``DensityEstimate`` per axis, ``None`` for an
    axis whose samples are all identical, and whether ISJ fell back on any
    axis.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    estimates = []
    fell_back = False
    for axis in range(3):
        col = pts[:, axis]
        weighted = linear_bin(col, base_weights, grid_size)
        if weighted.degenerate:
            estimates.append(None)
            continue
        plain = linear_bin(col, None, grid_size, bounds=(weighted.grid[0], weighted.grid[-1]))
        h, fb = _isj(plain, m)
        fell_back |= fb
        estimates.append(fft_kde(weighted, h))
    return estimates, fell_back


def density_update(points, base_weights, grid_size: int = DEFAULT_GRID_SIZE):
    """Multiply each weight by the per-axis densities at its point.

    This is everything after neighbour initialisation; it returns the raw
    (unnormalised) weights and the per-axis estimates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(base_weights, dtype=np.float64).copy()
    estimates, fell_back = axis_densities(pts, w, grid_size)
    for axis, est in enumerate(estimates):
        if est is not None:
            w *= est(pts[:, axis])
    return w, estimates, fell_back


def weigh_correspondences(
    correspondences, radius: float | None = None, grid_size: int = DEFAULT_GRID_SIZE
) -> WeightVector:
    """Density weights for a correspondence set, from its target points only.

    ``correspondences`` may be a :class:`CorrespondenceSet` or an ``(m, 3)``
    array of target points. ``radius`` defaults to five percent of the
    bounding-box diagonal. Output is scaled so the largest weight is 1.
    Sets with fewer than ten points, or whose density product vanishes,
    get uniform weights with ``fallback=True``.
    """
    if isinstance(correspondences, CorrespondenceSet):
        pts = np.asarray(correspondences.target)
    else:
        pts = np.asarray(correspondences, dtype=np.float64).reshape(-1, 3)
    _check_grid_size(grid_size)
    m = len(pts)
    if m == 0:
        raise InputError("no correspondences to weigh")
    if radius is None:
        radius = default_radius(pts)
    elif not radius > 0:
        raise InputError(f"neighbour radius must be positive, got {radius}")

    def uniform(reason):
        return WeightVector(np.ones(m), fallback=True, reason=reason, radius=radius or None)

    if m < MIN_KDE_SAMPLES:
        return uniform(f"only {m} correspondences; need {MIN_KDE_SAMPLES} for density weighting")
    if not radius > 0:
        return uniform("all correspondences coincide")

    base = init_weights(pts, radius)
    w, estimates, fell_back = density_update(pts, base, grid_size)
    notes = []
    if fell_back:
        notes.append("ISJ fell back to the normal-reference bandwidth on at least one axis")
    for axis, est in zip("xyz", estimates):
        if est is None:
            notes.append(f"{axis} axis has no spread; skipped")
    top = w.max()
    if not (np.isfinite(top) and top > 0):
        return uniform("density product vanished for every correspondence")
    return WeightVector(
        w / top,
        radius=float(radius),
        bandwidths=tuple(None if e is None else e.bandwidth for e in estimates),
        densities=tuple(estimates),
        notes=tuple(notes),
    )
