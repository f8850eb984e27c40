"""Command-line entry point.

Exit codes: 0 on success, 1 for bad input (missing files, parse errors,
inconsistent arguments), 2 when the data is numerically degenerate.
"""

from __future__ import annotations

import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import formats
from .backprojection import (
    SOR_NEIGHBORS,
    SOR_SIGMA_MULT,
    ego_segment,
    lift_pixels,
)
from .bench import (
    DEFAULT_ANGLES,
    DEFAULT_NOISE,
    DEFAULT_OUTLIERS,
    SweepConfig,
    base_seed,
    run_angle_sweep,
    run_scaling_benchmark,
)
from .embedding import EmbeddingConfig, embed, embed_image
from .exceptions import DegenerateError, InputError
from .geometry import CorrespondenceSet, PointCloud
from .solver import align_clouds, icp_point_to_point, solve_weighted
from .weighting import DEFAULT_GRID_SIZE, weigh_correspondences

log = logging.getLogger("kdereg")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DEGENERATE = 2


class StageError(Exception):
    """Wraps a failure with the name of the pipeline stage it came from."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    return EXIT_DEGENERATE if isinstance(exc, DegenerateError) else EXIT_INPUT


class KdeGroup(click.Group):
    """Group that maps library exceptions and usage errors onto exit codes."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as exc:
            exc.exit_code = EXIT_INPUT
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_INPUT
            raise
        except (InputError, DegenerateError, StageError,
                FileNotFoundError, PermissionError, IsADirectoryError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(_exit_code(exc))


def _load_config(ctx, _param, value):
    if value is None:
        return None
    obj = formats._load_json(value)
    if not isinstance(obj, dict):
        raise click.BadParameter("config must be a JSON object keyed by subcommand", param_hint="--config")
    ctx.default_map = {**(ctx.default_map or {}), **obj}
    return value


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.WARNING if quiet else (logging.DEBUG if verbose > 1 else logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    # only our own logger and captured warnings; library chatter stays quiet
    for name in ("kdereg", "py.warnings"):
        logger = logging.getLogger(name)
        logger.handlers[:] = [handler]
        logger.setLevel(level)
        logger.propagate = False
    logging.captureWarnings(True)


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"{what} must be comma-separated numbers, got {text!r}") from None


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        click.echo(text, nl=False)
    else:
        Path(path).write_text(text)


@click.group(cls=KdeGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
              is_eager=True, expose_value=False,
              help="JSON file of option defaults, one section per subcommand.")
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
@click.option("-q", "--quiet", is_flag=True, help="Only warnings and errors.")
def cli(verbose: int, quiet: bool) -> None:
    """Density-weighted rigid registration of RGB-D keypoint correspondences."""
    _setup_logging(verbose, quiet)


# -- backproject -------------------------------------------------------------

@cli.command()
@click.option("--depth", type=click.Path(exists=True, dir_okay=False), required=True,
              help="16-bit depth image (PGM or PNG).")
@click.option("--mask", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Instance mask; 0 is background, every other value one instance.")
@click.option("--camera", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Camera model JSON.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--k", "k", type=click.IntRange(min=1), default=SOR_NEIGHBORS, show_default=True,
              help="Neighbours for statistical outlier removal.")
@click.option("--sigma-mult", type=float, default=SOR_SIGMA_MULT, show_default=True)
@click.option("--no-clean", is_flag=True, help="Skip statistical outlier removal.")
@click.option("--ascii", "ascii_", is_flag=True, help="Write ASCII PLY instead of binary.")
def backproject(depth, mask, camera, out_dir, k, sigma_mult, no_clean, ascii_):
    """Turn one depth frame and its instance mask into per-object PLY clouds.

    Writes ``instance_<label>.ply`` per instance and ``all.ply`` holding
    every instance, then prints the point count of each.
    """
    cam = formats.read_camera(camera)
    depth_img = formats.read_depth(depth, cam.depth_scale)
    mask_img = formats.read_mask(mask)
    _, clouds = ego_segment(depth_img, mask_img, cam, k, sigma_mult, clean=not no_clean)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not clouds:
        log.warning("mask has no instances; writing an empty cloud")
    click.echo("instance,points")
    for label, cloud in clouds.items():
        formats.write_ply(out / f"instance_{label}.ply", cloud, binary=not ascii_)
        click.echo(f"{label},{len(cloud)}")
    merged = PointCloud.concatenate(list(clouds.values())) if clouds else PointCloud.empty()
    formats.write_ply(out / "all.ply", merged, binary=not ascii_)
    click.echo(f"all,{len(merged)}")


# -- embed ------------------------------------------------------------------

@cli.command("embed")
@click.option("--pixels", type=click.Path(exists=True, dir_okay=False),
              help="CSV of u,v pixel coordinates, one per row.")
@click.option("--at", "at", type=(float, float), multiple=True, metavar="U V",
              help="A single pixel coordinate (repeatable).")
@click.option("--image", type=(int, int), metavar="W H",
              help="Embed the full W x H pixel grid into a .npy file given by --out.")
@click.option("--dimension", type=int, default=128, show_default=True)
@click.option("--base", type=float, default=10000.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True)
def embed_cmd(pixels, at, image, dimension, base, out):
    """Sinusoidal 2D positional embeddings of pixel coordinates."""
    config = EmbeddingConfig(dimension, base)
    if image is not None:
        if out == "-":
            raise click.UsageError("--image needs --out FILE.npy")
        np.save(out, embed_image(image[0], image[1], config))
        log.info("wrote %s embedding grid of shape (%d, %d, %d)", out, image[1], image[0], dimension)
        return
    coords = [list(p) for p in at]
    if pixels is not None:
        coords += formats._numeric_table(pixels, (2,)).tolist()
    if not coords:
        raise click.UsageError("give --pixels, --at or --image")
    uv = np.asarray(coords, dtype=np.float64)
    vectors = embed(uv[:, 0], uv[:, 1], config)
    lines = [",".join(formats.fmt(v) for v in row) for row in vectors]
    _write_text(out, "\n".join(lines) + "\n")


# -- weigh ------------------------------------------------------------------

@cli.command()
@click.argument("correspondences", type=click.Path(exists=True, dir_okay=False))
@click.option("--radius", type=float, default=None,
              help="Neighbour radius in meters (default: 5% of the bounding-box diagonal).")
@click.option("--grid-size", type=int, default=DEFAULT_GRID_SIZE, show_default=True,
              help="KDE grid points per axis (power of two).")
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True,
              help="Weight CSV, one value per correspondence.")
@click.option("--plot", type=click.Path(dir_okay=False), default=None,
              help="Write per-axis density plots to this file (SVG, PNG or PDF).")
def weigh(correspondences, radius, grid_size, out, plot):
    """Density weights for a correspondence CSV."""
    cs, _ = formats.read_correspondences(correspondences)
    weights = weigh_correspondences(cs, radius, grid_size)
    _report_weights(weights)
    formats.write_weights(out, weights.values)
    if plot:
        if weights.densities is None:
            log.warning("no density estimates to plot (%s)", weights.reason)
        else:
            from .plotting import plot_densities

            plot_densities(weights, cs.target, plot)


def _report_weights(weights) -> None:
    if weights.fallback:
        log.warning("uniform weights: %s", weights.reason)
    for note in weights.notes:
        log.warning(note)
    if weights.bandwidths:
        text = ", ".join("none" if h is None else formats.fmt(h) for h in weights.bandwidths)
        log.info("radius %s, bandwidths (x, y, z) %s", formats.fmt(weights.radius), text)


# -- align ------------------------------------------------------------------

def _print_fit(result) -> None:
    click.echo(f"weighted_residual,{formats.fmt(result.weighted_residual)}")
    click.echo(f"rmse,{formats.fmt(result.rmse)}")


@cli.command()
@click.argument("correspondences", type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Weight CSV; overrides a seventh column in the correspondence file.")
@click.option("--kde", is_flag=True, help="Compute density weights instead of reading them.")
@click.option("--radius", type=float, default=None)
@click.option("--grid-size", type=int, default=DEFAULT_GRID_SIZE, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Transform JSON (16 row-major numbers) mapping previous onto current view.")
def align(correspondences, weights, kde, radius, grid_size, out):
    """Closed-form weighted rigid alignment of a correspondence CSV.

    Weights come from --weights, else the file's seventh column, else
    --kde, else uniform.
    """
    cs, has_weights = formats.read_correspondences(correspondences)
    if weights is not None:
        w = formats.read_weights(weights)
        if len(w) != len(cs):
            raise InputError(f"{weights}: {len(w)} weights for {len(cs)} correspondences")
        cs = cs.with_weights(w)
    elif kde:
        wv = weigh_correspondences(cs, radius, grid_size)
        _report_weights(wv)
        cs = cs.with_weights(wv.values)
    elif not has_weights:
        log.info("no weights given; solving with uniform weights")
    result = solve_weighted(cs)
    formats.write_transform(out, result.transform)
    _print_fit(result)


# -- icp --------------------------------------------------------------------

@cli.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("target", type=click.Path(exists=True, dir_okay=False))
@click.option("--max-iter", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--init", "init", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Initial transform JSON (identity by default).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def icp(source, target, max_iter, tol, init, out):
    """Point-to-point ICP moving SOURCE onto TARGET (both PLY)."""
    src = formats.read_ply(source)
    tgt = formats.read_ply(target)
    start = formats.read_transform(init) if init else None
    result = icp_point_to_point(src, tgt, max_iter, tol, start)
    formats.write_transform(out, result.transform)
    _print_fit(result)
    click.echo(f"iterations,{result.iterations}")


# -- pipeline ---------------------------------------------------------------

class _Stages:
    """Runs named stages, recording wall time and tagging failures."""

    def __init__(self):
        self.times: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except (InputError, DegenerateError) as exc:
            raise StageError(name, exc) from exc
        self.times[name] = self.times.get(name, 0.0) + 1e3 * (time.perf_counter() - start)
        return out


def _lift_matches(matches_path, masked_prev, masked_cur, camera) -> CorrespondenceSet:
    uv_cur, uv_prev = formats.read_pixel_matches(matches_path)
    p_cur, ok_cur = lift_pixels(uv_cur, masked_cur, camera)
    p_prev, ok_prev = lift_pixels(uv_prev, masked_prev, camera)
    keep = ok_cur & ok_prev
    if not keep.all():
        log.info("dropped %d of %d matches without depth in both frames", int((~keep).sum()), len(keep))
    return CorrespondenceSet(p_prev[keep], p_cur[keep])


@cli.command()
@click.option("--depth", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Current-frame depth image.")
@click.option("--mask", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Current-frame instance mask.")
@click.option("--prev-depth", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--prev-mask", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--camera", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--correspondences", type=click.Path(exists=True, dir_okay=False), default=None,
              help="3D correspondence CSV (current point, previous point, optional weight).")
@click.option("--matches", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Pixel match CSV (u_t, v_t, u_prev, v_prev), lifted through the depth images.")
@click.option("--radius", type=float, default=None)
@click.option("--grid-size", type=int, default=DEFAULT_GRID_SIZE, show_default=True)
@click.option("--k", "k", type=click.IntRange(min=1), default=SOR_NEIGHBORS, show_default=True)
@click.option("--sigma-mult", type=float, default=SOR_SIGMA_MULT, show_default=True)
@click.option("--out-transform", type=click.Path(dir_okay=False), required=True)
@click.option("--out-cloud", type=click.Path(dir_okay=False), required=True,
              help="Merged PLY: current frame plus the previous frame moved into it.")
@click.option("--timings", type=click.Path(dir_okay=False), default="-", show_default=True,
              help="Stage timing CSV.")
def pipeline(depth, mask, prev_depth, prev_mask, camera, correspondences, matches,
             radius, grid_size, k, sigma_mult, out_transform, out_cloud, timings):
    """Register two RGB-D frames and merge their object clouds."""
    if (correspondences is None) == (matches is None):
        raise click.UsageError("give exactly one of --correspondences or --matches")
    # parse everything up front so a bad file fails before any stage runs
    cam = formats.read_camera(camera)
    frames = [
        (formats.read_depth(prev_depth, cam.depth_scale), formats.read_mask(prev_mask)),
        (formats.read_depth(depth, cam.depth_scale), formats.read_mask(mask)),
    ]
    cs, has_weights = (formats.read_correspondences(correspondences)
                       if correspondences else (None, False))

    stages = _Stages()
    segmented = [stages.run("segmentation", ego_segment, d, mk, cam, k, sigma_mult)
                 for d, mk in frames]
    (masked_prev, clouds_prev), (masked_cur, clouds_cur) = segmented
    if matches is not None:
        cs = stages.run("keypoint lifting", _lift_matches, matches, masked_prev, masked_cur, cam)

    if has_weights:
        log.info("using the weight column from %s", correspondences)
    else:
        log.info("no weight column; computing density weights")
        wv = stages.run("keypoint weighting", weigh_correspondences, cs, radius, grid_size)
        _report_weights(wv)
        cs = cs.with_weights(wv.values)

    def alignment():
        result = solve_weighted(cs)
        prev_cloud = PointCloud.concatenate(list(clouds_prev.values())) if clouds_prev else PointCloud.empty()
        cur_cloud = PointCloud.concatenate(list(clouds_cur.values())) if clouds_cur else PointCloud.empty()
        return result, align_clouds(cur_cloud, prev_cloud, result.transform)

    result, merged = stages.run("point cloud alignment", alignment)
    formats.write_transform(out_transform, result.transform)
    formats.write_ply(out_cloud, merged)
    lines = ["stage,ms"] + [f"{name},{formats.fmt(ms)}" for name, ms in stages.times.items()]
    _write_text(timings, "\n".join(lines) + "\n")
    log.info("rmse %s over %d correspondences", formats.fmt(result.rmse), len(cs))


# -- bench ------------------------------------------------------------------

@cli.group(cls=KdeGroup)
def bench():
    """Synthetic benchmarks."""


@bench.command("sweep")
@click.option("--angles", default=",".join(f"{a:g}" for a in DEFAULT_ANGLES), show_default=True,
              help="Comma-separated view angles in degrees.")
@click.option("--seeds", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--seed-offset", type=int, default=None,
              help="First seed (default: $KDEREG_SEED or 0).")
@click.option("--noise", type=float, default=DEFAULT_NOISE, show_default=True,
              help="Target noise sigma in meters.")
@click.option("--outliers", type=float, default=DEFAULT_OUTLIERS, show_default=True,
              help="Fraction of mismatched correspondences.")
@click.option("--objects", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--points", type=click.IntRange(min=1), default=50, show_default=True,
              help="Correspondences per object.")
@click.option("--partial-overlap", is_flag=True, help="Hide part of one object as the angle grows.")
@click.option("--radius", type=float, default=None)
@click.option("--grid-size", type=int, default=DEFAULT_GRID_SIZE, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True,
              help="Per-angle summary CSV.")
@click.option("--cells", type=click.Path(dir_okay=False), default=None,
              help="Per-(angle, seed) CSV.")
@click.option("--plot", type=click.Path(dir_okay=False), default=None,
              help="RMSE against angle figure (SVG by extension).")
def bench_sweep(angles, seeds, seed_offset, noise, outliers, objects, points, partial_overlap,
                radius, grid_size, out, cells, plot):
    """RMSE of weighted, unweighted and ICP alignment across view angles."""
    config = SweepConfig(
        angles=tuple(_floats(angles, "--angles")),
        seeds=seeds,
        seed_offset=base_seed() if seed_offset is None else seed_offset,
        n_objects=objects,
        points_per_object=points,
        noise_sigma=noise,
        outlier_fraction=outliers,
        partial_overlap=partial_overlap,
        radius=radius,
        grid_size=grid_size,
    )
    if not config.angles:
        raise click.BadParameter("no angles given", param_hint="--angles")
    log.info("sweep over %d angles x %d seeds from seed %d",
             len(config.angles), seeds, config.seed_offset)
    report = run_angle_sweep(config)
    for c in report.cells:
        for method, msg in c.errors.items():
            log.warning("angle %g seed %d: %s failed: %s", c.angle, c.seed, method, msg)
    report.write_csv(sys.stdout if out == "-" else out)
    if cells:
        report.write_cells_csv(cells)
    if plot:
        from .plotting import plot_sweep

        plot_sweep(report, plot)


@bench.command("scaling")
@click.option("--m", "m_values", default="1000,2000,4000,8000", show_default=True,
              help="Comma-separated correspondence counts, ascending.")
@click.option("--grid-size", type=int, default=DEFAULT_GRID_SIZE, show_default=True)
@click.option("--repetitions", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=int, default=None, help="Scene seed (default: $KDEREG_SEED or 0).")
@click.option("--out", type=click.Path(dir_okay=False), default="-", show_default=True)
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def bench_scaling(m_values, grid_size, repetitions, seed, out, plot):
    """Stage timings against the number of correspondences."""
    ms = [int(v) for v in _floats(m_values, "--m")]
    report = run_scaling_benchmark(ms, grid_size, repetitions, base_seed() if seed is None else seed)
    report.write_csv(sys.stdout if out == "-" else out)
    if plot:
        from .plotting import plot_scaling

        plot_scaling(report, plot)


# -- convert ----------------------------------------------------------------

@cli.command()
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--ascii", "encoding", flag_value="ascii", help="Write ASCII PLY.")
@click.option("--binary", "encoding", flag_value="binary", default=True,
              help="Write binary little-endian PLY (default).")
def convert(src, dst, encoding):
    """Re-encode a PLY file as ASCII or binary."""
    cloud = formats.read_ply(src)
    formats.write_ply(dst, cloud, binary=encoding != "ascii")
    click.echo(f"points,{len(cloud)}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="kdereg", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
