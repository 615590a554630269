import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sphoxel.binoctree import (
    FLAG_COARSE,
    Binoctree,
    BuildConfig,
    bfs_intersect,
    build_initial,
    leaves,
    normalize_scene,
    subdivide,
    traverse,
)
from sphoxel.errors import DegenerateScene, EmptyCameraSet, InvalidConfig, NotALeaf, SphoxelError
from sphoxel.geom import Ray, cart_to_sph_array, cell_volume_array, solid_angle_array, sph_to_cart
from sphoxel.intersect import intersect_pairs

import oracles


def uniform_tree(depth, near=0.1, far=1.0):
    tree = Binoctree(near, far)
    for _ in range(depth):
        tree.subdivide_many(np.flatnonzero(tree.is_leaf))
    return tree


def test_root_tiling():
    tree = Binoctree(0.1, 1.0)
    assert list(leaves(tree)) == list(range(8))
    assert tree.solid_angles().sum() == pytest.approx(4 * math.pi, rel=1e-14)
    assert np.all(tree.solid_angles() == pytest.approx(math.pi / 2))
    assert list(leaves(tree, "fine")) == []


def test_subdivide_examples():
    # emulate a cell r in [0.5, 1], theta span 0.1: 0.5 > 0.75 * 0.05
    t = Binoctree(0.5, 1.0, _empty=True)
    t._append(np.array([[0.5, 1.0, 1.0, 1.1, 0.0, 0.1]]), parent=-1, depth=0)
    t._roots = np.array([0])
    assert len(subdivide(t, 0)) == 8
    t2 = Binoctree(0.9, 1.0, _empty=True)
    t2._append(np.array([[0.9, 1.0, 1.0, 1.5, 0.0, 0.5]]), parent=-1, depth=0)
    t2._roots = np.array([0])
    assert len(subdivide(t2, 0)) == 4
    # one 8-way root subdivision: 7 + 8 leaves
    tree = Binoctree(0.1, 1.0)
    assert len(subdivide(tree, 0)) == 8
    assert len(list(leaves(tree))) == 15
    with pytest.raises(NotALeaf):
        subdivide(tree, 0)


def test_children_tile_parent():
    tree = uniform_tree(2)
    for nid in range(len(tree)):
        kids = tree.children(nid)
        if not kids:
            continue
        pb = tree.bounds[nid]
        kb = tree.bounds[kids]
        assert cell_volume_array(kb).sum() == pytest.approx(cell_volume_array(pb), rel=1e-12)
        assert solid_angle_array(kb).sum() == pytest.approx(len(kids) / 4 * solid_angle_array(pb), rel=1e-12)
        ext = kb[:, 1] - kb[:, 0]
        assert set(np.round(ext / (pb[1] - pb[0]), 12)) <= {1.0, 0.5}
        # theta and phi spans are halved
        np.testing.assert_allclose(kb[:, 3] - kb[:, 2], (pb[3] - pb[2]) / 2)
        np.testing.assert_allclose(kb[:, 5] - kb[:, 4], (pb[5] - pb[4]) / 2)


def test_two_levels_leaf_solid_angles_sum_to_parent():
    tree = Binoctree(0.1, 1.0)
    first = subdivide(tree, 3)
    for k in first:
        subdivide(tree, k)
    lf = np.flatnonzero(tree.is_leaf & (tree.depth == 2))
    # every radial layer of the grandchildren covers the root's solid angle once
    for r0 in np.unique(tree.bounds[lf, 0]):
        layer = lf[tree.bounds[lf, 0] == r0]
        assert tree.solid_angles()[layer].sum() == pytest.approx(tree.solid_angles()[3], rel=1e-12)


def test_split_rule_holds_for_every_child():
    tree = uniform_tree(4, near=0.05)
    for nid in np.flatnonzero(~tree.is_leaf):
        pb = tree.bounds[nid]
        rm = 0.5 * (pb[0] + pb[1])
        need = (pb[1] - pb[0]) > rm * (pb[3] - pb[2]) / 2
        assert tree.child_count[nid] == (8 if need else 4)


@pytest.mark.parametrize("near", [0.001, 0.01, 0.1, 0.5])
def test_elongation_never_exceeds_root(near):
    # Delta r / Delta theta is inherited on a radial split and bounded by r_mid otherwise.
    tree = uniform_tree(6, near=near)
    b = tree.bounds[tree.is_leaf]
    bound = max((1.0 - near) / (math.pi / 2), 1.0)
    assert np.all((b[:, 1] - b[:, 0]) / (b[:, 3] - b[:, 2]) <= bound * (1 + 1e-12))
    # the doubled-elongation bound holds wherever r_mid is large enough
    rm = 0.5 * (b[:, 0] + b[:, 1])
    far_cells = rm >= bound / 2
    assert np.all((b[far_cells, 1] - b[far_cells, 0]) <= 2 * rm[far_cells] * (b[far_cells, 3] - b[far_cells, 2]))


def _random_shell_points(rng, n, near, far):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = near + (far - near) * rng.random(n)
    s = cart_to_sph_array(v * r[:, None])
    # include exact boundary values
    s[:4, 0] = [near, far, near, far]
    s[4:8, 1] = [0.0, math.pi, math.pi / 2, math.pi / 4]
    s[8:12, 2] = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    return s


def test_partition_property(rng):
    tree = build_initial(rng.normal(size=(300, 3)) * 0.3, BuildConfig(alpha_min=0.02), 0.05, 1.0)
    pts = _random_shell_points(rng, 500, 0.05, 1.0)
    loc = tree.locate(pts)
    leaf_ids = np.flatnonzero(tree.is_leaf)
    for p, lid in zip(pts, loc):
        owners = [i for i in leaf_ids if oracles.contains_half_open(tree.bounds[i], p, 0.05, 1.0)]
        assert owners == [lid]
    assert np.all(tree.locate(np.array([[0.01, 1, 1], [1.5, 1, 1]])) == -1)


def test_point_count_conservation(rng):
    tree = Binoctree(0.05, 1.0)
    pts = _random_shell_points(rng, 1000, 0.05, 1.0)
    tree.add_points(pts)
    for _ in range(3):
        tree.subdivide_many(np.flatnonzero(tree.is_leaf & (tree.point_count > 0)))
    for nid in np.flatnonzero(~tree.is_leaf):
        assert tree.point_count[tree.children(nid)].sum() == tree.point_count[nid]
    assert tree.point_count[tree.roots].sum() == 1000
    np.testing.assert_array_equal(np.bincount(tree.locate(pts), minlength=len(tree))[tree.is_leaf],
                                  tree.point_count[tree.is_leaf])


def test_normalize_scene_examples():
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    cams = np.c_[0.5 * np.cos(ang), 0.5 * np.sin(ang), np.zeros(12)]
    pts = np.array([[50.0, 0, 0], [0, 10, 0]])
    p, near, far, scale = normalize_scene(pts, cams, 1.0)
    assert scale == pytest.approx(50.0) and near == pytest.approx(0.01) and far == 1.0
    assert np.linalg.norm(p, axis=1).max() <= 1.0
    _, near, far, _ = normalize_scene(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
    assert near == 1e-3 and far == 1.0
    # points inside the camera circle: far bound from the cameras
    p, near, far, scale = normalize_scene(np.array([[0.1, 0, 0]]), cams, 1.0)
    assert scale == pytest.approx(1.0) and near < far
    with pytest.raises(EmptyCameraSet):
        normalize_scene(pts, np.zeros((0, 3)))
    with pytest.raises(DegenerateScene):
        normalize_scene(np.zeros((3, 3)), cams)
    with pytest.raises(InvalidConfig):
        normalize_scene(pts, cams, 0.5)


def test_build_initial_examples():
    tree = build_initial(np.zeros((0, 3)), BuildConfig(), 0.1, 1.0)
    assert len(tree) == 8
    single = BuildConfig(alpha_min=4 * math.pi, root_theta_divs=1, root_phi_divs=1)
    assert len(build_initial(np.array([[0.5, 0, 0]]), single, 0.1, 1.0)) == 1
    with pytest.raises(InvalidConfig):
        build_initial(np.zeros((0, 3)), BuildConfig(alpha_min=0), 0.1, 1.0)


def test_single_point_build_matches_recursive_oracle():
    p = (0.5, 1.0, 0.7)
    tree = build_initial(np.array([sph_to_cart(p)]), BuildConfig(alpha_min=5e-4), 0.01, 1.0)
    # frozen from oracles.recursive_build_leaves([p], 5e-4, 0.01, 1.0)
    assert int(tree.is_leaf.sum()) == 57
    leaf = tree.locate([p])[0]
    assert tree.depth[leaf] == 7
    assert tree.solid_angles()[leaf] <= 5e-4 < tree.solid_angles()[tree.parent[leaf]]


@given(st.integers(0, 2**31), st.floats(0.005, 0.5))
def test_build_matches_recursive_oracle(seed, alpha):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(12, 3)) * 0.4
    tree = build_initial(pts, BuildConfig(alpha_min=alpha), 0.05, 1.0)
    s = [tuple(p) for p in cart_to_sph_array(pts) if 0.05 <= p[0] <= 1.0]
    assert int(tree.is_leaf.sum()) == oracles.recursive_build_leaves(s, alpha, 0.05, 1.0)
    sa = tree.solid_angles()
    assert np.all(sa[tree.is_leaf & (tree.point_count > 0)] <= alpha)


def test_max_depth_cap():
    tree = build_initial(np.array([[0.5, 0.1, 0.2]]), BuildConfig(alpha_min=1e-300, max_depth=5), 0.1, 1.0)
    assert tree.depth.max() == 5


def test_radial_ray_hits_angular_column():
    tree = uniform_tree(2)
    d = sph_to_cart((1.0, 1.0, 0.7))
    hits = bfs_intersect(tree, Ray((0, 0, 0), d))
    assert hits == sorted(hits, key=lambda h: (h[1], h[0]))
    assert all(0.1 * 0.9 < a < b <= 1.0 for _, a, b in hits)
    col = tree.locate(np.array([[r, 1.0, 0.7] for r in np.linspace(0.1, 1.0, 200)]))
    assert set(col) <= {h[0] for h in hits}


def test_filter_with_no_members_is_empty():
    tree = uniform_tree(2)
    assert bfs_intersect(tree, Ray((0, 0, 0), (0, 0, 1)), "coarse") == []
    tree.set_flag(FLAG_COARSE, [20])
    up = Ray((0, 0, 0), sph_to_cart((1.0, 0.5 * (tree.bounds[20, 2] + tree.bounds[20, 3]), 0.5 * (tree.bounds[20, 4] + tree.bounds[20, 5]))))
    assert [h[0] for h in bfs_intersect(tree, up, "coarse")] == [20]
    with pytest.raises(SphoxelError):
        tree.member_mask("bogus")


def _exhaustive(tree, o, d):
    lf = np.flatnonzero(tree.is_leaf)
    out = []
    for i in range(len(o)):
        h, a, b = intersect_pairs(np.tile(o[i], (len(lf), 1)), np.tile(d[i], (len(lf), 1)), tree.bounds[lf])
        out.append({(int(n), float(x), float(y)) for n, x, y in zip(lf[h], a[h], b[h])})
    return out


@pytest.mark.parametrize("depth", [3, 4])
def test_bfs_equals_exhaustive_scan(rng, depth):
    tree = uniform_tree(depth, near=0.05)
    o = rng.normal(size=(150, 3)) * 0.02
    d = rng.normal(size=(150, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    got = traverse(tree, o, d)
    assert [set(g) for g in got] == _exhaustive(tree, o, d)


def test_serialization_round_trip(tmp_path, rng):
    tree = build_initial(rng.normal(size=(200, 3)) * 0.3, BuildConfig(alpha_min=0.01), 0.05, 1.0)
    tree.set_flag(FLAG_COARSE, [3, 9])
    data = tree.to_bytes()
    back = Binoctree.from_bytes(data)
    assert back.to_bytes() == data
    np.testing.assert_array_equal(back.bounds, tree.bounds)
    np.testing.assert_array_equal(back.point_count, tree.point_count)
    assert back.to_json() == tree.to_json()
    js = tree.to_json_dict()
    assert js["node_count"] == len(tree) and js["version"] == 1
    with pytest.raises(SphoxelError):
        Binoctree.from_bytes(data[:-1])
    with pytest.raises(SphoxelError):
        Binoctree.from_bytes(b"XXXX" + data[4:])


def test_node_view():
    tree = uniform_tree(1)
    n = tree.node(0)
    assert n.parent is None and len(n.children) == 8 and not n.is_leaf
    k = tree.node(n.children[0])
    assert k.parent == 0 and k.depth == 1 and k.bounds.is_polar
