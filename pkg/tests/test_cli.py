import json
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from kdereg import formats
from kdereg.cli import cli, main
from kdereg.geometry import CorrespondenceSet, PointCloud, RigidTransform, rotation_about_axis, rotation_angle


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def write_pair(tmp_path, rng, m=60, weights=False):
    truth = RigidTransform(rotation_about_axis([0, 1, 0], 0.3), [0.1, 0.0, -0.05])
    src = rng.normal(size=(m, 3))
    cs = CorrespondenceSet(src, truth.apply(src), rng.uniform(0.5, 1, m) if weights else None)
    path = tmp_path / "corr.csv"
    formats.write_correspondences(path, cs, with_weights=weights)
    return path, truth


def frame_args(fixtures, prefix, scene=True):
    if scene:
        return ["--depth", fixtures / "scene20_cur_depth.pgm", "--mask", fixtures / "scene20_cur_mask.pgm",
                "--prev-depth", fixtures / "scene20_prev_depth.pgm",
                "--prev-mask", fixtures / "scene20_prev_mask.pgm",
                "--camera", fixtures / "scene20_camera.json"]
    f = fixtures
    return ["--depth", f / "frame_depth.pgm", "--mask", f / "frame_mask.pgm",
            "--prev-depth", f / "frame_depth.pgm", "--prev-mask", f / "frame_mask.pgm",
            "--camera", f / "frame_camera.json"]


def test_help_lists_subcommands(runner):
    out = run(runner, "--help").output
    for name in ("backproject", "embed", "weigh", "align", "icp", "pipeline", "bench", "convert"):
        assert name in out


def test_backproject_matches_golden_fixture(runner, fixtures, tmp_path):
    for out in ("a", "b"):
        res = run(runner, "backproject", "--depth", fixtures / "frame_depth.pgm",
                  "--mask", fixtures / "frame_mask.pgm", "--camera", fixtures / "frame_camera.json",
                  "--out-dir", tmp_path / out, "--no-clean")
        assert res.exit_code == 0
        assert (tmp_path / out / "all.ply").read_bytes() == (fixtures / "frame_golden.ply").read_bytes()
    assert "1,1040" in res.output and "2,400" in res.output


def test_backproject_empty_mask(runner, fixtures, tmp_path):
    formats.write_pgm(tmp_path / "m.pgm", np.zeros((60, 80), dtype=np.uint8))
    res = runner.invoke(cli, ["backproject", "--depth", str(fixtures / "frame_depth.pgm"),
                              "--mask", str(tmp_path / "m.pgm"), "--camera",
                              str(fixtures / "frame_camera.json"), "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 0
    assert len(formats.read_ply(tmp_path / "o" / "all.ply")) == 0
    assert "no instances" in res.output


def test_backproject_dimension_mismatch(runner, fixtures, tmp_path):
    formats.write_pgm(tmp_path / "m.pgm", np.ones((10, 10), dtype=np.uint8))
    res = runner.invoke(cli, ["backproject", "--depth", str(fixtures / "frame_depth.pgm"),
                              "--mask", str(tmp_path / "m.pgm"), "--camera",
                              str(fixtures / "frame_camera.json"), "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 1 and "outside" in res.output


def test_parse_error_reports_byte_offset(runner, tmp_path):
    bad = tmp_path / "c.csv"
    bad.write_text("1,2,3,4,5,6\n1,2,x,4,5,6\n")
    res = runner.invoke(cli, ["align", str(bad), "--out", str(tmp_path / "t.json")])
    assert res.exit_code == 1
    assert f"{bad}: byte 12" in res.output


def test_usage_errors_exit_one(runner, tmp_path):
    assert runner.invoke(cli, ["align", str(tmp_path / "missing.csv"), "--out", "x"]).exit_code == 1
    assert runner.invoke(cli, ["nosuchcommand"]).exit_code == 1


def test_align_recovers_transform(runner, tmp_path, rng):
    path, truth = write_pair(tmp_path, rng)
    res = run(runner, "align", path, "--out", tmp_path / "t.json")
    assert res.exit_code == 0 and "rmse," in res.output
    got = formats.read_transform(tmp_path / "t.json")
    np.testing.assert_allclose(got.matrix, truth.matrix, atol=1e-12)
    text = (tmp_path / "t.json").read_text()
    assert len(json.loads(text)) == 16


def test_align_with_weight_sources(runner, tmp_path, rng):
    path, truth = write_pair(tmp_path, rng, weights=True)
    assert run(runner, "align", path, "--out", tmp_path / "a.json").exit_code == 0
    formats.write_weights(tmp_path / "w.csv", np.ones(60))
    assert run(runner, "align", path, "--weights", tmp_path / "w.csv", "--out", tmp_path / "b.json").exit_code == 0
    assert run(runner, "align", path, "--kde", "--out", tmp_path / "c.json").exit_code == 0
    for name in "abc":
        np.testing.assert_allclose(formats.read_transform(tmp_path / f"{name}.json").matrix, truth.matrix, atol=1e-10)
    formats.write_weights(tmp_path / "w.csv", np.ones(3))
    assert runner.invoke(cli, ["align", str(path), "--weights", str(tmp_path / "w.csv"),
                               "--out", str(tmp_path / "d.json")]).exit_code == 1


def test_degenerate_exit_code(runner, tmp_path):
    pts = np.outer(np.arange(5.0), [1.0, 1.0, 1.0])
    formats.write_correspondences(tmp_path / "c.csv", CorrespondenceSet(pts, pts))
    res = runner.invoke(cli, ["align", str(tmp_path / "c.csv"), "--out", str(tmp_path / "t.json")])
    assert res.exit_code == 2 and "collinear" in res.output


def test_weigh_writes_weights_and_plot(runner, tmp_path, rng):
    path, _ = write_pair(tmp_path, rng)
    res = run(runner, "weigh", path, "--out", tmp_path / "w.csv", "--plot", tmp_path / "d.svg")
    assert res.exit_code == 0
    w = formats.read_weights(tmp_path / "w.csv")
    assert len(w) == 60 and w.max() == 1.0
    assert (tmp_path / "d.svg").exists()


def test_icp_command(runner, tmp_path, rng):
    pts = rng.uniform(-1, 1, (300, 3))
    truth = RigidTransform(rotation_about_axis([0, 0, 1], 0.05), [0.01, 0, 0])
    formats.write_ply(tmp_path / "s.ply", PointCloud(pts), binary=False)
    formats.write_ply(tmp_path / "t.ply", PointCloud(truth.apply(pts)))
    res = run(runner, "icp", tmp_path / "s.ply", tmp_path / "t.ply", "--tol", "1e-12",
              "--max-iter", "100", "--out", tmp_path / "x.json")
    assert res.exit_code == 0 and "iterations," in res.output
    np.testing.assert_allclose(formats.read_transform(tmp_path / "x.json").matrix, truth.matrix, atol=1e-5)


def test_convert_round_trip(runner, tmp_path, fixtures):
    run(runner, "convert", fixtures / "frame_golden.ply", tmp_path / "a.ply", "--ascii")
    assert (tmp_path / "a.ply").read_bytes().startswith(b"ply\nformat ascii")
    run(runner, "convert", tmp_path / "a.ply", tmp_path / "b.ply", "--binary")
    assert (tmp_path / "b.ply").read_bytes() == (fixtures / "frame_golden.ply").read_bytes()


def test_embed_command(runner, tmp_path):
    res = run(runner, "embed", "--at", "3", "4", "--dimension", "8")
    values = [float(v) for v in res.output.strip().split(",")]
    assert len(values) == 8 and values[0] == pytest.approx(np.sin(3.0))
    run(runner, "embed", "--image", "5", "4", "--dimension", "8", "--out", tmp_path / "e.npy")
    assert np.load(tmp_path / "e.npy").shape == (4, 5, 8)
    assert runner.invoke(cli, ["embed"]).exit_code == 1


def test_pipeline_identity_on_identical_frames(runner, fixtures, tmp_path):
    cloud = formats.read_ply(fixtures / "frame_golden.ply").points[::7]
    formats.write_correspondences(tmp_path / "c.csv", CorrespondenceSet(cloud, cloud))
    res = run(runner, "pipeline", *frame_args(fixtures, "", scene=False), "--correspondences", tmp_path / "c.csv",
              "--out-transform", tmp_path / "t.json", "--out-cloud", tmp_path / "m.ply")
    assert res.exit_code == 0
    np.testing.assert_allclose(formats.read_transform(tmp_path / "t.json").matrix, np.eye(4), atol=1e-9)


def test_pipeline_recovers_fixture_scene(runner, fixtures, tmp_path):
    res = run(runner, "pipeline", *frame_args(fixtures, ""), "--correspondences", fixtures / "scene20_corr.csv",
              "--out-transform", tmp_path / "t.json", "--out-cloud", tmp_path / "m.ply",
              "--timings", tmp_path / "times.csv")
    assert res.exit_code == 0
    assert "computing density weights" in res.output
    got = formats.read_transform(tmp_path / "t.json")
    truth = formats.read_transform(fixtures / "scene20_truth.json")
    assert rotation_angle(got.rotation.T @ truth.rotation) < 1e-3
    assert np.linalg.norm(got.translation - truth.translation) < 1e-3
    stages = (tmp_path / "times.csv").read_text()
    assert "keypoint weighting," in stages and "point cloud alignment," in stages
    assert len(formats.read_ply(tmp_path / "m.ply")) > 0


def test_pipeline_from_pixel_matches(runner, fixtures, tmp_path):
    cam = formats.read_camera(fixtures / "scene20_camera.json")
    k = cam.color_intrinsics
    corr, _ = formats.read_correspondences(fixtures / "scene20_corr.csv")

    def pix(p):
        return np.column_stack([p[:, 0] * k.fx / p[:, 2] + k.cx, p[:, 1] * k.fy / p[:, 2] + k.cy])

    rows = np.hstack([pix(corr.target), pix(corr.source)])
    (tmp_path / "m.csv").write_text("u_t,v_t,u_prev,v_prev\n" + "\n".join(",".join(map(str, r)) for r in rows))
    res = run(runner, "pipeline", *frame_args(fixtures, ""), "--matches", tmp_path / "m.csv",
              "--out-transform", tmp_path / "t.json", "--out-cloud", tmp_path / "m.ply")
    assert res.exit_code == 0 and "keypoint lifting" in res.output
    got = formats.read_transform(tmp_path / "t.json")
    truth = formats.read_transform(fixtures / "scene20_truth.json")
    # pixels are ~7 mm wide at 2 m and occluded keypoints lift onto the front surface
    assert rotation_angle(got.rotation.T @ truth.rotation) < 0.05


def test_pipeline_names_failing_stage(runner, fixtures, tmp_path):
    pts = np.outer(np.arange(12.0), [1.0, 1.0, 1.0])
    formats.write_correspondences(tmp_path / "c.csv", CorrespondenceSet(pts, pts))
    res = runner.invoke(cli, [str(a) for a in ["pipeline", *frame_args(fixtures, ""),
                              "--correspondences", tmp_path / "c.csv",
                              "--out-transform", tmp_path / "t.json", "--out-cloud", tmp_path / "m.ply"]])
    assert res.exit_code == 2
    assert "stage 'point cloud alignment' failed" in res.output


def test_pipeline_needs_one_correspondence_source(runner, fixtures, tmp_path):
    res = runner.invoke(cli, [str(a) for a in ["pipeline", *frame_args(fixtures, ""),
                              "--out-transform", tmp_path / "t.json", "--out-cloud", tmp_path / "m.ply"]])
    assert res.exit_code == 1


def test_bench_sweep_writes_csv_and_svg(runner, tmp_path):
    res = run(runner, "bench", "sweep", "--angles", "0,20", "--seeds", "2", "--points", "20",
              "--out", tmp_path / "s.csv", "--cells", tmp_path / "c.csv", "--plot", tmp_path / "s.svg")
    assert res.exit_code == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("angle,seeds,weighted_mean") and len(lines) == 3
    assert "with KDE" in (tmp_path / "s.svg").read_text()


def test_bench_sweep_honours_seed_env(runner, monkeypatch):
    args = ["bench", "sweep", "--angles", "10", "--seeds", "1", "--points", "20"]
    monkeypatch.setenv("KDEREG_SEED", "5")
    a = run(runner, *args).output
    b = run(runner, *args, "--seed-offset", "5").output
    monkeypatch.setenv("KDEREG_SEED", "6")
    c = run(runner, *args).output
    first = lambda text: text.strip().splitlines()[-1].split(",")[2]  # noqa: E731
    assert first(a) == first(b) != first(c)


def test_bench_scaling(runner, tmp_path):
    res = run(runner, "bench", "scaling", "--m", "400,800", "--grid-size", "256",
              "--repetitions", "1", "--plot", tmp_path / "s.svg")
    assert res.exit_code == 0 and "# slope solve_ms" in res.output
    assert (tmp_path / "s.svg").exists()


def test_config_file_supplies_defaults(runner, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bench": {"sweep": {"angles": "15", "seeds": 1, "points": 20}}}))
    res = run(runner, "--config", cfg, "bench", "sweep")
    rows = res.stdout.strip().splitlines()
    assert len(rows) == 2 and rows[1].startswith("15,1,")


def test_main_returns_exit_codes(tmp_path, capsys):
    assert main(["--help"]) == 0
    assert main(["align", str(tmp_path / "nope.csv"), "--out", "x"]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kdereg.cli", "embed", "--at", "0", "0", "--dimension", "4"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0,1,0,1"
