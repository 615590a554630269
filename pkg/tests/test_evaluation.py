import math

import numpy as np
import pytest

from sphoxel.binoctree import Binoctree, subdivide
from sphoxel.errors import NoValidOverlap, SphoxelError
from sphoxel.evaluation import (
    DepthImage,
    _cartesian_count,
    cartesian_equivalent_count,
    depth_report,
    equirect_directions,
    inv_depth_metrics,
    render_depth_equirect,
    sphere_trace,
    tree_stats,
)
from sphoxel.sdf import Plane, Sphere, box_room, hollow_sphere


def test_pixel_mapping():
    d = equirect_directions(4, 2)
    th, ph = math.pi / 4, math.pi / 4
    np.testing.assert_allclose(d[0, 0], [math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)])
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0)


def test_render_hollow_sphere():
    img = render_depth_equirect(hollow_sphere(5.0), (0, 0, 0), 32, 16, trace_tol=1e-5, far=10.0)
    assert img.mask.all()
    assert np.all(np.abs(img.depth - 5.0) <= 1e-5)


def test_render_plane_closed_form():
    far = 100.0
    img = render_depth_equirect(Plane((0, 0, 1), 2.0), (0, 0, 0), 64, 32, trace_tol=1e-5, far=far)
    theta = math.pi * (np.arange(32) + 0.5) / 32
    expected = np.where(np.cos(theta) < 0, 2.0 / np.abs(np.cos(theta)), np.inf)
    top = theta < math.pi / 2
    assert not img.mask[top].any()
    rows = (~top) & (expected < far * 0.99)
    assert img.mask[rows].all()
    err = img.depth[rows] - expected[rows, None]
    # stopping at |d| < tol leaves the ray short by at most tol / |cos theta|
    assert np.all(err <= 1e-12 * far)
    assert np.all(-err <= 1e-5 / np.abs(np.cos(theta[rows]))[:, None] * (1 + 1e-6))


@pytest.mark.parametrize(
    "field, oracle",
    [
        (Sphere((3.0, 0.5, 0.0), 1.0), "sphere"),
        (box_room((-2, -3, -1), (4, 2, 5)), "box"),
    ],
)
def test_trace_never_overshoots(field, oracle, rng):
    dirs = rng.normal(size=(2000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tol = 1e-5
    t, hit = sphere_trace(field, np.zeros((2000, 3)), dirs, tol, 20.0)
    if oracle == "sphere":
        c = np.array([3.0, 0.5, 0.0])
        b = dirs @ c
        disc = b * b - (c @ c - 1.0)
        true = np.where(disc >= 0, b - np.sqrt(np.maximum(disc, 0)), np.inf)
        true = np.where(true > 0, true, np.inf)
    else:
        lo, hi = np.array([-2, -3, -1.0]), np.array([4, 2, 5.0])
        with np.errstate(divide="ignore"):
            tt = np.where(dirs > 0, hi / dirs, lo / dirs)
        true = tt.min(axis=1)
    assert np.all(t[hit] <= true[hit] + 10 * tol)
    np.testing.assert_array_equal(hit, np.isfinite(true))


def test_metrics_examples():
    gt = DepthImage.from_depth(np.full((4, 8), 2.0))
    assert inv_depth_metrics(gt, gt) == (0.0, 0.0)
    pred = DepthImage.from_depth(np.full((4, 8), 4.0))
    rmse, mae = inv_depth_metrics(pred, gt)
    assert rmse == pytest.approx(0.25) and mae == pytest.approx(0.25)
    rep = depth_report(pred, gt)
    assert rep == {"mse": pytest.approx(0.0625), "rmse": pytest.approx(0.25), "mae": pytest.approx(0.25)}
    with pytest.raises(NoValidOverlap):
        inv_depth_metrics(DepthImage.from_depth(np.zeros((4, 8))), gt)
    with pytest.raises(SphoxelError):
        inv_depth_metrics(DepthImage.from_depth(np.ones((2, 2))), gt)


def test_metrics_symmetric_and_masked(rng):
    a = rng.uniform(1, 5, size=(16, 32))
    b = rng.uniform(1, 5, size=(16, 32))
    b[:3] = np.inf
    a[5, :4] = 0
    A, B = DepthImage.from_depth(a), DepthImage.from_depth(b)
    assert inv_depth_metrics(A, B) == inv_depth_metrics(B, A)
    joint = A.mask & B.mask
    e = 1 / a[joint] - 1 / b[joint]
    assert inv_depth_metrics(A, B)[0] == pytest.approx(math.sqrt(np.mean(e**2)), rel=1e-14)


def test_cartesian_equivalent_examples():
    whole = Binoctree(0.0, 1.0, root_theta_divs=1, root_phi_divs=1)
    assert cartesian_equivalent_count(whole) == 1
    assert _cartesian_count(1.0, 1e-3) == 4189


def test_tree_stats_fresh_and_additivity():
    tree = Binoctree(0.1, 1.0)
    s = tree_stats(tree)
    assert s.leaf_count == 8 and s.node_count == 8 and s.coarse_count == 0 and s.max_depth == 0
    for _ in range(3):
        tree.subdivide_many(np.flatnonzero(tree.is_leaf))
    from sphoxel.geom import cell_volume_array

    vol = cell_volume_array(tree.bounds[tree.is_leaf]).sum()
    assert vol == pytest.approx(4 * math.pi / 3 * (1 - 0.1**3), rel=1e-9)
    d = tree_stats(tree).to_dict()
    assert set(d) >= {"node_count", "leaf_count", "cartesian_equivalent", "min_leaf_volume", "min_leaf_solid_angle"}


def test_min_solid_angle_after_one_subdivision():
    tree = Binoctree(0.1, 1.0)
    for r in range(8):
        subdivide(tree, r)
    # the polar quarter of a root is the smallest; theta halving at the midpoint is not equal-area
    expected = (math.pi / 4) * (1 - math.cos(math.pi / 4))
    assert tree_stats(tree).min_leaf_solid_angle == pytest.approx(expected, rel=1e-14)


def test_cartesian_equivalent_monotone():
    tree = Binoctree(0.1, 1.0)
    prev = cartesian_equivalent_count(tree)
    from sphoxel.geom import cell_volume_array

    for _ in range(6):
        lf = np.flatnonzero(tree.is_leaf)
        smallest = lf[np.argmin(cell_volume_array(tree.bounds[lf]))]
        subdivide(tree, smallest)
        cur = cartesian_equivalent_count(tree)
        assert cur >= prev
        prev = cur
    s = tree_stats(tree)
    if s.min_leaf_volume < (4 * math.pi / 3) / s.leaf_count:
        assert s.cartesian_equivalent >= s.leaf_count


def test_render_rejects_bad_size():
    with pytest.raises(SphoxelError):
        render_depth_equirect(hollow_sphere(1), (0, 0, 0), 0, 4)
