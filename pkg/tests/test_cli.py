import json
import math

import numpy as np
import pytest

from sphoxel import fileio
from sphoxel.binoctree import Binoctree
from sphoxel.cli import main


def write_sphere_dataset(root, n_points=3000, radius=5.0, n_cams=16, seed=0):
    """Points on a metric sphere around a small circle of cameras."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n_points, 3))
    pts = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    fileio.write_ply_ascii(root / "pts.ply", pts)
    a = np.linspace(0, 2 * math.pi, n_cams, endpoint=False)
    cams = np.stack([0.5 * np.cos(a), 0.5 * np.sin(a), np.zeros_like(a)], axis=1)
    fileio.write_cameras_csv(root / "cams.csv", cams)
    # normalised coordinates: far_margin 2 maps the radius-5 surface to 0.5
    (root / "scene_norm.json").write_text(json.dumps({"primitives": [{"type": "hollow_sphere", "radius": 0.5}]}))
    (root / "scene.json").write_text(json.dumps({"far": 10.0, "primitives": [{"type": "hollow_sphere", "radius": radius}]}))
    (root / "cfg.json").write_text(json.dumps({"far_margin": 2.0, "alpha_min": 0.01}))
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lines = ["ox,oy,oz,dx,dy,dz"] + [f"0,0,0,{x!r},{y!r},{z!r}" for x, y, z in d.tolist()]
    (root / "rays.csv").write_text("\n".join(lines) + "\n")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data(tmp_path):
    return write_sphere_dataset(tmp_path)


def test_stats_fresh_root_tree(tmp_path, capsys):
    fileio.save_tree(Binoctree(0.01, 1.0), tmp_path / "t.tree")
    code, out, _ = run(capsys, "stats", "--tree", tmp_path / "t.tree")
    assert code == 0
    stats = json.loads(out)
    assert stats["leaf_count"] == 8
    assert "cartesian_equivalent" in stats


def test_eval_identical(tmp_path, capsys):
    depth = np.linspace(1, 3, 32).reshape(4, 8)
    fileio.write_pfm(tmp_path / "a.pfm", fileio.DepthImage.from_depth(depth))
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "a.pfm", "--gt", tmp_path / "a.pfm")
    assert code == 0
    assert json.loads(out) == {"mse": 0, "rmse": 0, "mae": 0}


def test_pipeline(data, capsys):
    t = data / "t.tree"
    code, out, _ = run(capsys, "build", "--points", data / "pts.ply", "--cameras", data / "cams.csv",
                       "--config", data / "cfg.json", "--out", t)
    assert code == 0
    built = json.loads(out)
    assert built["points"] == 3000 and built["coarse"] > 0
    assert built["scale_coeff"] == pytest.approx(10.0, rel=1e-9)

    code, out, _ = run(capsys, "trace", "--tree", t, "--ray", "0,0,0,1,0,0", "--filter", "coarse")
    assert code == 0
    iv = json.loads(out)["intervals"]
    assert iv and all(a <= b for a, b in zip([i["t_entry"] for i in iv], [i["t_entry"] for i in iv][1:]))
    assert any(i["t_entry"] <= 0.5 <= i["t_exit"] for i in iv)

    code, out, _ = run(capsys, "refine", "--tree", t, "--scene", data / "scene_norm.json", "--min-angle", "2e-3")
    assert code == 0
    ref = json.loads(out)
    assert ref["fine"] > 0 and ref["nodes_after"] > ref["nodes_before"]
    # a second auto run is a fixed point
    code, out, _ = run(capsys, "refine", "--tree", t, "--scene", data / "scene_norm.json", "--min-angle", "2e-3")
    assert json.loads(out)["nodes_after"] == ref["nodes_after"]

    code, out, _ = run(capsys, "sample", "--tree", t, "--scene", data / "scene_norm.json", "--counts", "32,32,32,32",
                       "--rays", data / "rays.csv", "--seed", 3, "--out", data / "b.json")
    assert code == 0
    batch = json.loads((data / "b.json").read_text())
    assert batch["seed"] == 3 and len(batch["rays"]) == 6

    code, out, _ = run(capsys, "render", "--scene", data / "scene.json", "--size", "16x8", "--out", data / "d.pfm")
    assert code == 0
    img = fileio.read_pfm(data / "d.pfm")
    assert img.depth.shape == (8, 16)
    assert np.allclose(img.depth, 5.0, atol=1e-3)

    code, out, _ = run(capsys, "export", "--tree", t, "--filter", "fine", "--out", data / "w.obj")
    assert code == 0
    cells = json.loads(out)["cells"]
    assert (data / "w.obj").read_text().count("\no sphoxel_") == cells == ref["fine"]


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["stats"],
        ["trace", "--tree", "x", "--ray", "1,2,3"],
        ["trace", "--tree", "x", "--ray", "0,0,0,0,0,0"],
        ["render", "--scene", "s.json", "--size", "wide", "--out", "d.pfm"],
        ["refine", "--tree", "x", "--scene", "s", "--rounds", "often"],
        ["export", "--tree", "x", "--filter", "some", "--out", "w.obj"],
    ],
)
def test_usage_errors(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_data_errors_leave_no_output(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("x,y,z\n")
    (tmp_path / "cams.csv").write_text("frame,x,y,z\n0,0,0,0\n")
    out = tmp_path / "t.tree"
    code, _, err = run(capsys, "build", "--points", tmp_path / "empty.csv", "--cameras", tmp_path / "cams.csv", "--out", out)
    assert code == 2 and "error" in err
    assert not out.exists()
    code, _, _ = run(capsys, "stats", "--tree", tmp_path / "missing.tree")
    assert code == 2
    (tmp_path / "bad.json").write_text('{"alpha_min": -1}')
    (tmp_path / "p.csv").write_text("1,2,3\n")
    code, _, _ = run(capsys, "build", "--points", tmp_path / "p.csv", "--cameras", tmp_path / "cams.csv",
                     "--config", tmp_path / "bad.json", "--out", out)
    assert code == 2 and not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.json", "cams.csv", "empty.csv", "p.csv"]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "build" in capsys.readouterr().out
