"""Synthetic registration scenes and the experiment drivers built on them.

A scene is a handful of object clusters on a table roughly ``distance``
meters in front of the camera. The view change is a rotation about the
vertical (camera ``y``) axis through the scene centre. Target points get
isotropic Gaussian noise and a fraction of the pairs is replaced by
mismatches drawn uniformly inside the scene bounding box.

With ``partial_overlap`` a share ``OCCLUSION_GAIN * |angle| / 90`` (capped at
one) of the first object turns its back to the new view: those points vanish
from the target cloud and their pairs leave the correspondence set.
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DegenerateError, InputError
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, rmse, rotation_about_axis
from .solver import icp_point_to_point, solve_weighted
from .weighting import DEFAULT_GRID_SIZE, default_radius, density_update, init_weights, weigh_correspondences

SEED_ENV = "KDEREG_SEED"
DEFAULT_ANGLES = (-45.0, -30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0, 45.0)
DEFAULT_NOISE = 0.003
DEFAULT_OUTLIERS = 0.1
DEFAULT_DISTANCE = 2.0
VERTICAL_AXIS = (0.0, 1.0, 0.0)
OCCLUSION_GAIN = 2.0
TABLE_HALF_WIDTH = 0.6
METHODS = ("weighted", "unweighted", "icp")


def base_seed(default: int = 0) -> int:
    """Global seed, overridable through the ``KDEREG_SEED`` environment variable."""
    value = os.environ.get(SEED_ENV)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {value!r}") from None


@dataclass(frozen=True)
class SyntheticScene:
    ground_truth: RigidTransform
    correspondences: CorrespondenceSet
    outliers: np.ndarray  # bool per pair; True for mismatched pairs
    labels: np.ndarray  # object index per pair
    source_cloud: PointCloud
    target_cloud: PointCloud
    angle: float
    noise_sigma: float
    outlier_fraction: float
    seed: int

    @property
    def clean(self) -> CorrespondenceSet:
        return self.correspondences.select(~self.outliers)


def view_change(angle_deg: float, distance: float) -> RigidTransform:
    """Rotation by ``angle_deg`` about the vertical axis through ``(0, 0, distance)``."""
    rot = rotation_about_axis(VERTICAL_AXIS, math.radians(angle_deg))
    if angle_deg == 0:
        rot = np.eye(3)
    centre = np.array([0.0, 0.0, distance])
    return RigidTransform(rot, centre - rot @ centre)


def generate_scene(
    n_objects: int = 4,
    points_per_object: int = 50,
    angle: float = 0.0,
    distance: float = DEFAULT_DISTANCE,
    noise_sigma: float = DEFAULT_NOISE,
    outlier_fraction: float = DEFAULT_OUTLIERS,
    seed: int = 0,
    partial_overlap: bool = False,
) -> SyntheticScene:
    """Build a reproducible two-view scene with known ground truth.

    All random draws happen before anything angle-dependent, so the same
    seed gives the same objects, noise and mismatch positions at every
    angle.
    """
    if n_objects < 1 or points_per_object < 1:
        raise InputError("need at least one object with at least one point")
    if not 0 <= outlier_fraction < 1:
        raise InputError(f"outlier_fraction must lie in [0, 1), got {outlier_fraction}")
    if noise_sigma < 0 or distance <= 0:
        raise InputError("noise_sigma must be >= 0 and distance > 0")
    if abs(angle) > 90:
        raise InputError("angle must lie within [-90, 90] degrees")

    rng = np.random.default_rng(seed)
    m = n_objects * points_per_object
    centres = np.column_stack([
        rng.uniform(-TABLE_HALF_WIDTH, TABLE_HALF_WIDTH, n_objects),
        rng.uniform(-0.15, 0.15, n_objects),
        distance + rng.uniform(-0.4, 0.4, n_objects),
    ])
    spreads = rng.uniform(0.02, 0.07, (n_objects, 3))
    blobs = rng.standard_normal((n_objects, points_per_object, 3))
    source = (centres[:, None, :] + spreads[:, None, :] * blobs).reshape(m, 3)
    labels = np.repeat(np.arange(n_objects), points_per_object)
    noise = rng.standard_normal((m, 3))
    order = rng.permutation(m)
    uniform = rng.random((m, 3))

    truth = view_change(angle, distance)
    true_target = truth.apply(source)
    target = true_target + noise_sigma * noise if noise_sigma > 0 else true_target.copy()
    lo = true_target.min(axis=0)
    hi = true_target.max(axis=0)

    mismatched = np.zeros(m, dtype=bool)
    mismatched[order[: int(round(outlier_fraction * m))]] = True
    visible = np.ones(m, dtype=bool)
    if partial_overlap:
        n_hidden = int(round(min(1.0, OCCLUSION_GAIN * abs(angle) / 90.0) * points_per_object))
        if n_hidden:
            first = np.flatnonzero(labels == 0)
            # the side facing away from the rotation goes first
            side = source[first, 0] * (1.0 if angle >= 0 else -1.0)
            hidden = first[np.argsort(-side, kind="stable")[:n_hidden]]
            visible[hidden] = False
    target[mismatched] = lo + uniform[mismatched] * (hi - lo)

    return SyntheticScene(
        ground_truth=truth,
        correspondences=CorrespondenceSet(source[visible], target[visible]),
        outliers=mismatched[visible],
        labels=labels[visible],
        source_cloud=PointCloud(source),
        target_cloud=PointCloud((true_target + noise_sigma * noise)[visible]),
        angle=float(angle),
        noise_sigma=float(noise_sigma),
        outlier_fraction=float(outlier_fraction),
        seed=int(seed),
    )


@dataclass(frozen=True)
class SweepConfig:
    angles: tuple = DEFAULT_ANGLES
    seeds: int = 20
    seed_offset: int = 0
    n_objects: int = 4
    points_per_object: int = 50
    distance: float = DEFAULT_DISTANCE
    noise_sigma: float = DEFAULT_NOISE
    outlier_fraction: float = DEFAULT_OUTLIERS
    partial_overlap: bool = False
    radius: float | None = None
    grid_size: int = DEFAULT_GRID_SIZE
    icp_max_iter: int = 50
    icp_tol: float = 1e-6

    def seed_list(self) -> list[int]:
        return [self.seed_offset + i for i in range(self.seeds)]


@dataclass
class SweepCell:
    angle: float
    seed: int
    rmse_weighted: float = math.nan
    rmse_unweighted: float = math.nan
    rmse_icp: float = math.nan
    times_ms: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def rmse(self, method: str) -> float:
        return getattr(self, f"rmse_{method}")


@dataclass
class SweepReport:
    config: SweepConfig
    cells: list

    def angles(self) -> list[float]:
        return list(dict.fromkeys(c.angle for c in self.cells))

    def values(self, method: str, angle: float) -> np.ndarray:
        return np.array([c.rmse(method) for c in self.cells if c.angle == angle])

    def summary(self) -> list[dict]:
        """Mean and standard deviation of every method per angle (NaN cells skipped)."""
        rows = []
        for angle in self.angles():
            cells = [c for c in self.cells if c.angle == angle]
            row = {"angle": angle, "seeds": len(cells)}
            for method in METHODS:
                v = self.values(method, angle)
                ok = v[np.isfinite(v)]
                row[f"{method}_mean"] = float(ok.mean()) if len(ok) else math.nan
                row[f"{method}_std"] = float(ok.std()) if len(ok) else math.nan
                row[f"{method}_failures"] = int(len(v) - len(ok))
            for stage in ("weighting", "solve_weighted", "solve_unweighted", "icp"):
                t = [c.times_ms[stage] for c in cells if stage in c.times_ms]
                row[f"{stage}_ms"] = float(np.mean(t)) if t else math.nan
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        rows = self.summary()
        with _csv_out(path) as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell_text(v) for k, v in row.items()})

    def write_cells_csv(self, path) -> None:
        names = ["angle", "seed"] + [f"rmse_{m}" for m in METHODS]
        with _csv_out(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(names + ["errors"])
            for c in self.cells:
                writer.writerow(
                    [_cell_text(c.angle), c.seed]
                    + [_cell_text(c.rmse(m)) for m in METHODS]
                    + ["; ".join(f"{k}: {v}" for k, v in c.errors.items())]
                )


@contextlib.contextmanager
def _csv_out(target):
    """Open ``target`` for CSV writing unless it already is a text stream."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh


def _cell_text(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, 1e3 * (time.perf_counter() - start)


def run_cell(config: SweepConfig, angle: float, seed: int) -> SweepCell:
    """Run all three methods on one (angle, seed) scene."""
    scene = generate_scene(
        config.n_objects, config.points_per_object, angle, config.distance,
        config.noise_sigma, config.outlier_fraction, seed, config.partial_overlap,
    )
    cell = SweepCell(angle=float(angle), seed=seed)
    cs = scene.correspondences
    clean = scene.clean

    try:
        weights, cell.times_ms["weighting"] = _timed(
            weigh_correspondences, cs, config.radius, config.grid_size
        )
        res, cell.times_ms["solve_weighted"] = _timed(solve_weighted, cs.with_weights(weights.values))
        cell.rmse_weighted = rmse(clean, res.transform)
    except (DegenerateError, InputError) as exc:
        cell.errors["weighted"] = str(exc)

    try:
        res, cell.times_ms["solve_unweighted"] = _timed(solve_weighted, cs.with_weights(None))
        cell.rmse_unweighted = rmse(clean, res.transform)
    except (DegenerateError, InputError) as exc:
        cell.errors["unweighted"] = str(exc)

    try:
        res, cell.times_ms["icp"] = _timed(
            icp_point_to_point, scene.source_cloud, scene.target_cloud,
            config.icp_max_iter, config.icp_tol,
        )
        cell.rmse_icp = rmse(clean, res.transform)
    except (DegenerateError, InputError) as exc:
        cell.errors["icp"] = str(exc)
    return cell


def run_angle_sweep(config: SweepConfig = SweepConfig()) -> SweepReport:
    """RMSE of the weighted, uniform and ICP alignments at every angle and seed.

    Cells run in a fixed (angle, seed) order; a solver failure leaves NaN
    in that cell and the sweep carries on.
    """
    cells = [run_cell(config, a, s) for a in config.angles for s in config.seed_list()]
    return SweepReport(config, cells)


@dataclass
class ScalingReport:
    grid_size: int
    repetitions: int
    rows: list  # dicts: m, init_ms, weighting_ms, solve_ms

    def slope(self, stage: str) -> float:
        """Least-squares slope of log(time) against log(m)."""
        m = np.array([r["m"] for r in self.rows], dtype=np.float64)
        t = np.array([r[stage] for r in self.rows], dtype=np.float64)
        return float(np.polyfit(np.log(m), np.log(t), 1)[0])

    def write_csv(self, path) -> None:
        with _csv_out(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(["m", "grid_size", "repetitions", "init_ms", "weighting_ms", "solve_ms"])
            for r in self.rows:
                writer.writerow([
                    r["m"], self.grid_size, self.repetitions,
                    _cell_text(r["init_ms"]), _cell_text(r["weighting_ms"]), _cell_text(r["solve_ms"]),
                ])
            for stage in ("init_ms", "weighting_ms", "solve_ms"):
                writer.writerow([f"# slope {stage}", _cell_text(self.slope(stage))])


def _median_ms(fn, repetitions: int) -> float:
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return 1e3 * float(np.median(samples))


def run_scaling_benchmark(
    m_values=(1000, 2000, 4000, 8000),
    grid_size: int = DEFAULT_GRID_SIZE,
    repetitions: int = 5,
    seed: int = 0,
) -> ScalingReport:
    """Median wall time of each stage as the number of correspondences grows.

    Stages: neighbour initialisation, the density update that follows it,
    and the weighted rigid solve. Runs sequentially.
    """
    m_values = [int(m) for m in m_values]
    if any(b <= a for a, b in zip(m_values, m_values[1:])):
        raise InputError("m values must be strictly ascending")
    if repetitions < 1:
        raise InputError("repetitions must be at least 1")
    rows = []
    for m in m_values:
        per = max(1, m // 4)
        scene = generate_scene(4, per, angle=20.0, seed=seed)
        cs = scene.correspondences
        pts = np.asarray(cs.target)
        r = default_radius(pts)
        base = init_weights(pts, r)
        w = weigh_correspondences(cs, r, grid_size).values
        weighted = cs.with_weights(w)
        # warm-up so first-call overheads do not land in the first row
        density_update(pts, base, grid_size)
        solve_weighted(weighted)
        rows.append({
            "m": len(cs),
            "init_ms": _median_ms(lambda: init_weights(pts, r), repetitions),
            "weighting_ms": _median_ms(lambda: density_update(pts, base, grid_size), repetitions),
            "solve_ms": _median_ms(lambda: solve_weighted(weighted), repetitions),
        })
    return ScalingReport(grid_size, repetitions, rows)


def config_dict(config: SweepConfig) -> dict:
    return asdict(config)
