import subprocess
import sys

import numpy as np
import pytest

from rigidflow import io as rio
from rigidflow.cli import build_parser, main, parse_args
from rigidflow.metrics import rpe


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(d), "--count", "3", "--seed", "5",
                 "--objects-mean", "3", "--objects-sigma", "1"]) == 0
    return d


def test_documented_defaults():
    a = parse_args(["estimate", "x"])
    assert (a.fb_threshold, a.dilation, a.stride, a.max_points) == (0.75, 10, 4, 10000)
    assert a.depth_range == (0.1, 8.0)
    assert parse_args(["evaluate", "x"]).failure_threshold == 100
    g = parse_args(["generate", "--out", "x"])
    assert g.intervals == (1, 2, 5, 10, 20)
    assert (g.objects_mean, g.objects_sigma) == (15, 5)


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    for cmd in ("generate", "estimate", "evaluate", "visualize"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        out = capsys.readouterr().out
        for flag in ("--out",) if cmd != "evaluate" else ("--jobs", "--report"):
            assert flag in out


def test_generate_is_deterministic(gen_dir, tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--count", "3", "--seed", "5",
                 "--objects-mean", "3", "--objects-sigma", "1"]) == 0
    for pair in ("pair_0000", "pair_0002"):
        for f in ("flow_fwd.flo", "depth0.png", "pose01.txt", "scene.txt"):
            assert (gen_dir / pair / f).read_bytes() == (tmp_path / pair / f).read_bytes()


def test_estimate_noiseless_gt(gen_dir, tmp_path, capsys):
    out = tmp_path / "est"
    assert main(["estimate", str(gen_dir / "pair_0000"), "--rigidity", "gt", "--depth-sampling", "registered",
                 "--out", str(out), "--images"]) == 0
    text = capsys.readouterr().out
    assert "rpe_t" in text
    gt = rio.read_bundle(gen_dir / "pair_0000").pose01
    (_, est), = rio.read_trajectory(out / "pose01.txt")
    assert rpe(est, gt)[0] <= 1e-5
    for f in ("egomotion_flow.flo", "projected_scene_flow.flo", "scene_flow.sfl", "rigidity.png",
              "flow_fwd.png", "egomotion_flow.png", "projected_scene_flow.png"):
        assert (out / f).is_file()


def test_estimate_from_files(gen_dir, tmp_path):
    b = gen_dir / "pair_0001"
    args = ["estimate", "--intrinsics", str(b / "intrinsics.txt"), "--depth0", str(b / "depth0.png"),
            "--depth1", str(b / "depth1.png"), "--flow-fwd", str(b / "flow_fwd.flo"),
            "--flow-bwd", str(b / "flow_bwd.flo"), "--rigidity", "external", "--mask", str(b / "rigidity.png"),
            "--out", str(tmp_path)]
    assert main(args) == 0
    assert main(args[:-2] + ["--init", "ransac", "--rigidity", "all"]) == 0
    assert main(args[:-4] + ["--rigidity", "gt"]) == 2  # no ground truth without a bundle


def test_evaluate_jobs_order_stable(gen_dir, tmp_path, capsys):
    r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
    assert main(["evaluate", str(gen_dir), "--report", str(r1)]) == 0
    table = capsys.readouterr().out
    assert "failures (EPE > 100)" in table and "pair_0002" in table
    assert main(["evaluate", str(gen_dir), "--jobs", "2", "--report", str(r2)]) == 0
    assert r1.read_text() == r2.read_text()
    assert "failure_count = 0" in r1.read_text()


def test_visualize(gen_dir, tmp_path):
    f = gen_dir / "pair_0000" / "flow_fwd.flo"
    assert main(["visualize", str(f), "--out", str(tmp_path / "c.png")]) == 0
    assert main(["visualize", str(f), "--gt", str(f), "--out", str(tmp_path / "h.png")]) == 0
    from PIL import Image
    assert np.all(np.asarray(Image.open(tmp_path / "h.png")) == 0)


def test_config_precedence(gen_dir, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("# comment\nrigidity = all\n--stride = 8\ndepth-range = none\n")
    a = parse_args(["--config", str(cfg), "estimate", "x"])
    assert (a.rigidity, a.stride, a.depth_range) == ("all", 8, None)
    b = parse_args(["--config", str(cfg), "estimate", "x", "--stride", "2", "--rigidity", "gt"])
    assert (b.rigidity, b.stride) == ("gt", 2)
    assert parse_args(["estimate", "x"]).stride == 4
    cfg.write_text("[rigidflow]\nbogus_key = 1\n")
    assert main(["--config", str(cfg), "estimate", "x"]) == 2
    cfg.write_text("stride = many\n")
    with pytest.raises(SystemExit) as exc:
        main(["--config", str(cfg), "estimate", "x"])
    assert exc.value.code == 2
    cfg.write_text("rigidity = learned\n")
    assert main(["--config", str(cfg), "estimate", "x"]) == 2
    assert main(["--config", str(tmp_path / "missing.ini"), "estimate", "x"]) == 3


def test_exit_codes(gen_dir, tmp_path):
    b = str(gen_dir / "pair_0000")
    # usage
    assert main(["estimate", b, "--rigidity", "external"]) == 2
    assert main(["evaluate", b, "--jobs", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["estimate", b, "--no-such-flag"])
    assert exc.value.code == 2
    # format
    assert main(["estimate", str(tmp_path)]) == 3
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"nope")
    assert main(["visualize", str(bad), "--out", str(tmp_path / "x.png")]) == 3
    # insufficient data: nothing rigid survives
    empty = tmp_path / "empty.png"
    rio.write_mask(empty, np.zeros((120, 160), bool))
    assert main(["estimate", b, "--rigidity", "external", "--mask", str(empty)]) == 4
    # estimation failure: RANSAC cannot find three inliers at an absurd threshold
    assert main(["estimate", b, "--rigidity", "all", "--init", "ransac", "--ransac-threshold", "1e-15",
                 "--ransac-iterations", "3", "--depth-sampling", "nearest"]) == 5


def test_module_entry_point(gen_dir):
    p = subprocess.run([sys.executable, "-m", "rigidflow", "evaluate", str(gen_dir / "pair_0000")],
                       capture_output=True, text=True)
    assert p.returncode == 0 and "overall" in p.stdout
