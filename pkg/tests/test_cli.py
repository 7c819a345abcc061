import json
import re

import numpy as np
import pytest

from jointvo.cli import dispatch, plot_svg
from jointvo.errors import EmptyTrajectory
from jointvo.evaluation import Trajectory, read_trajectory, write_trajectory
from jointvo.geometry import Motion, Rotation


def line_traj(n=6):
    return Trajectory(np.arange(float(n)), [Motion(translation=[0.5 * i, 0.0, 0.1 * i]) for i in range(n)])


def curve_traj(n=8):
    return Trajectory(np.arange(float(n)),
                      [Motion(Rotation.from_rotvec([0, 0.1 * i, 0]), [np.sin(i), 0.0, np.cos(i)]) for i in range(n)])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert dispatch(["run", "--seed", "7", "--frames", "4", "--out", str(out / "a")]) == 0
    assert dispatch(["run", "--seed", "7", "--frames", "4", "--out", str(out / "b")]) == 0
    return out


def test_run_is_bytewise_reproducible(run_dir):
    for name in ("trajectory.txt", "manifest.json", "traces.jsonl", "masks/000000.pgm"):
        assert (run_dir / "a" / name).read_bytes() == (run_dir / "b" / name).read_bytes()


def test_manifest_replays(run_dir, tmp_path):
    manifest = json.loads((run_dir / "a" / "manifest.json").read_text())
    assert manifest["seeds"]["scene"] == 7 and len(manifest["frames"]) == 3
    assert dispatch(["run", "--config", str(run_dir / "a" / "manifest.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trajectory.txt").read_bytes() == (run_dir / "a" / "trajectory.txt").read_bytes()


def test_toml_config_and_override(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[scene]\nframes = 3\nn_bodies = 0\ndynamic_fraction_target = 0.0\n'
                   '[pipeline]\nmax_iters = 3\n[run]\nseed = 2\nscale_mode = "unit"\n')
    assert dispatch(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["run"]["seed"] == 5 and m["config"]["pipeline"]["max_iters"] == 3
    assert len(read_trajectory(tmp_path / "o" / "trajectory.txt")) == 3


def test_eval_identical_is_zero(tmp_path, capsys):
    p = tmp_path / "t.txt"
    write_trajectory(p, curve_traj())
    assert dispatch(["eval", str(p), str(p), "--json", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["ate_rmse"] == pytest.approx(0.0, abs=1e-12)
    assert "ate_rmse" in capsys.readouterr().out


def test_eval_truncated_file(tmp_path, capsys):
    good = tmp_path / "g.txt"
    write_trajectory(good, curve_traj())
    text = good.read_text()
    bad = tmp_path / "bad.txt"
    bad.write_text(text[: text.index("\n", 10) + 20])
    assert dispatch(["eval", str(bad), str(good)]) == 2
    err = capsys.readouterr().err
    assert "ParseError" in err and re.search(r"bad\.txt:2:", err)


def test_usage_errors(capsys):
    assert dispatch([]) == 1
    assert dispatch(["eval"]) == 1
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_file_is_data_error(tmp_path):
    assert dispatch(["eval", str(tmp_path / "nope.txt"), str(tmp_path / "nope.txt")]) == 2


def test_simulate_bundle_and_run(tmp_path):
    b = tmp_path / "bundle"
    assert dispatch(["simulate", "--seed", "3", "--frames", "3", "--dynamic", "0", "--out", str(b)]) == 0
    assert sorted(p.name for p in (b / "flow").iterdir()) == ["000000.flo", "000001.flo"]
    assert len(list((b / "depth").iterdir())) == 3
    assert dispatch(["run", "--bundle", str(b), "--out", str(tmp_path / "r"), "--format", "kitti"]) == 0
    est = read_trajectory(tmp_path / "r" / "trajectory.txt", "kitti")
    gt = read_trajectory(tmp_path / "r" / "groundtruth.txt", "kitti")
    from jointvo.evaluation import ate_rmse
    assert ate_rmse(est, gt) < 1e-6


def test_inspect(run_dir, capsys):
    assert dispatch(["inspect", str(run_dir / "a" / "manifest.json")]) == 0
    out = capsys.readouterr().out
    assert "z_thr" in out and "inliers" in out


def test_plot_single_line(tmp_path):
    path = tmp_path / "one.svg"
    plot_svg([line_traj()], ["est"], path)
    svg = path.read_text()
    polys = re.findall(r'points="([^"]+)"', svg)
    assert len(polys) == 1
    xs = [float(p.split(",")[0]) for p in polys[0].split()]
    assert all(a < b for a, b in zip(xs, xs[1:]))


def test_plot_two_and_deterministic(tmp_path):
    for name in ("a.svg", "b.svg"):
        plot_svg([line_traj(), curve_traj(6)], ["est", "gt"], tmp_path / name)
    svg = (tmp_path / "a.svg").read_text()
    assert svg.count("<polyline") == 2 and svg.count("<text") == 3   # two legend entries + scale note
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    with pytest.raises(EmptyTrajectory):
        plot_svg([], [], tmp_path / "c.svg")


def test_plot_command(tmp_path):
    p = tmp_path / "t.txt"
    write_trajectory(p, curve_traj())
    assert dispatch(["plot", str(p), "--out", str(tmp_path / "p.svg"), "--labels", "mine"]) == 0
    assert "mine" in (tmp_path / "p.svg").read_text()
    assert dispatch(["plot", str(p), "--out", str(tmp_path / "p.svg"), "--labels", "a", "b"]) == 1
