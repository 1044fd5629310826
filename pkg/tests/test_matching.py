import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xseason.geometry import project
from xseason.matching import (
    CameraPairMatches, MatchSet, generate_correspondences, mutual_nearest_neighbors,
    project_matches_to_pixels, prune_matches, select_camera_pairs,
)
from xseason.pointcloud import PointCloud
from xseason.synth import SceneConfig, generate_scene

from conftest import make_view


def brute_mnn(A, B):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    fwd = np.argmin(d2, axis=1)  # argmin returns the first (lowest) index on ties
    bwd = np.argmin(d2, axis=0)
    return [(i, int(fwd[i])) for i in range(len(A)) if bwd[fwd[i]] == i]


def cloud(points, tid, vis=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    vis = vis if vis is not None else tuple(("v",) for _ in range(len(points)))
    return PointCloud(tid, points, vis)


def test_mnn_identical_clouds():
    pts = np.random.default_rng(1).normal(size=(100, 3))
    m = mutual_nearest_neighbors(cloud(pts, "a"), cloud(pts, "b"))
    assert m.ref_idx.tolist() == list(range(100)) == m.tgt_idx.tolist()
    assert np.all(m.distance == 0)


def test_mnn_small_example():
    m = mutual_nearest_neighbors(cloud([[0, 0, 0]], "a"), cloud([[0, 0, 1], [0, 0, 2]], "b"))
    assert m.pairs() == [(0, 0, 1.0)]


def test_mnn_matches_quadratic_oracle(rng):
    for _ in range(3):
        A = rng.uniform(0, 10, (1500, 3))
        B = rng.uniform(0, 10, (1500, 3))
        m = mutual_nearest_neighbors(cloud(A, "a"), cloud(B, "b"))
        assert [(i, j) for i, j, _ in m.pairs()] == brute_mnn(A, B)


def test_mnn_tied_lattice_matches_oracle(rng):
    A = rng.integers(0, 5, (400, 3)).astype(float)
    B = rng.integers(0, 10, (400, 3)) / 2.0
    m = mutual_nearest_neighbors(cloud(A, "a"), cloud(B, "b"))
    assert [(i, j) for i, j, _ in m.pairs()] == brute_mnn(A, B)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 200), k=st.integers(1, 200))
def test_mnn_symmetric_and_injective(seed, n, k):
    r = np.random.default_rng(seed)
    A = r.integers(0, 6, (n, 3)).astype(float)  # coarse lattice forces ties
    B = r.integers(0, 6, (k, 3)).astype(float) + r.choice([0, 0.5], (k, 3))
    ab = mutual_nearest_neighbors(cloud(A, "a"), cloud(B, "b"))
    ba = mutual_nearest_neighbors(cloud(B, "b"), cloud(A, "a"))
    assert sorted(zip(ab.ref_idx.tolist(), ab.tgt_idx.tolist())) == \
        sorted(zip(ba.tgt_idx.tolist(), ba.ref_idx.tolist()))
    assert len(set(ab.ref_idx.tolist())) == len(ab) == len(set(ab.tgt_idx.tolist()))
    assert np.all(np.diff(ab.ref_idx) > 0)


# -- camera pairs -----------------------------------------------------------------

def _one_match_setup():
    a = cloud([[0, 0, 5]], "ref", (("r0",),))
    b = cloud([[0, 0, 5]], "tgt", (("t0",),))
    views = [make_view("r0", "ref"), make_view("t0", "tgt")]
    return a, b, views, mutual_nearest_neighbors(a, b)


def test_select_single_pair():
    a, b, views, m = _one_match_setup()
    pairs = select_camera_pairs(m, a, b, views, min_common=1)
    assert len(pairs) == 1
    assert (pairs[0].ref_view_id, pairs[0].target_view_id) == ("r0", "t0")
    assert pairs[0].match_indices.tolist() == [0]


def test_select_min_common_too_high():
    a, b, views, m = _one_match_setup()
    assert select_camera_pairs(m, a, b, views, min_common=2) == []


def _random_visibility_setup(rng, n=400):
    ref_views = [make_view(f"r{i}", "ref", t=(-0.3 * i, 0, 0)) for i in range(3)]
    tgt_views = [make_view(f"t{i}", "tgt", t=(-0.3 * i - 0.1, 0, 0)) for i in range(3)]
    A = rng.uniform(0, 10, (n, 3))
    B = A + rng.normal(scale=0.01, size=A.shape)

    def vis(prefix):
        return tuple(tuple(f"{prefix}{k}" for k in range(3) if rng.uniform() < 0.6) or (f"{prefix}0",)
                     for _ in range(n))

    return cloud(A, "ref", vis("r")), cloud(B, "tgt", vis("t")), ref_views + tgt_views


def enumerate_pairs(m, a, b, views, min_common, max_cam_dist):
    by = {v.view_id: v for v in views}
    out = []
    for rv in sorted(v.view_id for v in views if v.traversal_id == "ref"):
        for tv in sorted(v.view_id for v in views if v.traversal_id == "tgt"):
            idx = [k for k, (i, j) in enumerate(zip(m.ref_idx, m.tgt_idx))
                   if rv in a.visibility[i] and tv in b.visibility[j]]
            d = np.linalg.norm(by[rv].center - by[tv].center)
            if len(idx) >= min_common and d < max_cam_dist:
                out.append((rv, tv, idx))
    return out


@pytest.mark.parametrize("min_common,max_dist", [(1, 0.5), (60, 0.5), (100, 0.35), (1, 10.0)])
def test_select_matches_enumeration_oracle(rng, min_common, max_dist):
    a, b, views = _random_visibility_setup(rng)
    m = mutual_nearest_neighbors(a, b)
    got = [(p.ref_view_id, p.target_view_id, p.match_indices.tolist())
           for p in select_camera_pairs(m, a, b, views, min_common, max_dist)]
    assert got == enumerate_pairs(m, a, b, views, min_common, max_dist)


def test_select_monotone_in_thresholds(rng):
    a, b, views = _random_visibility_setup(rng)
    m = mutual_nearest_neighbors(a, b)

    def keys(mc, md):
        return {(p.ref_view_id, p.target_view_id) for p in select_camera_pairs(m, a, b, views, mc, md)}

    for mc in (1, 50, 100, 150):
        assert keys(mc + 20, 0.5) <= keys(mc, 0.5)
    for md in (0.05, 0.2, 0.4, 0.7):
        assert keys(1, md) <= keys(1, md + 0.2)


# -- pruning ------------------------------------------------------------------------

def _prune_setup(sep):
    ref_view = make_view("r0", "ref")
    a = cloud([[0, 0, 10]], "ref", (("r0",),))
    b = cloud([[sep, 0, 10]], "tgt", (("t0",),))
    m = MatchSet("ref", "tgt", [0], [0], [sep])
    pair = CameraPairMatches("r0", "t0", 0.0, [0])
    return pair, m, a, b, ref_view


@pytest.mark.parametrize("sep,kept", [(0.09, True), (0.11, False), (0.0, True)])
def test_prune_ten_meter_example(sep, kept):
    pair, m, a, b, rv = _prune_setup(sep)
    assert len(prune_matches(pair, m, a, b, rv, 0.01).match_indices) == int(kept)


def scalar_prune(m_idx, matches, a, b, center, kappa):
    out = []
    for k in m_idx:
        x1 = a.positions[matches.ref_idx[k]]
        x2 = b.positions[matches.tgt_idx[k]]
        sep = sum((float(x1[c]) - float(x2[c])) ** 2 for c in range(3)) ** 0.5
        depth = sum((float(x1[c]) - float(center[c])) ** 2 for c in range(3)) ** 0.5
        if sep < kappa * depth:
            out.append(int(k))
    return out


def _random_prune_setup(rng, n=2000):
    A = rng.uniform(-20, 20, (n, 3))
    B = A + rng.normal(scale=0.1, size=(n, 3))
    a, b = cloud(A, "ref"), cloud(B, "tgt")
    m = MatchSet("ref", "tgt", np.arange(n), np.arange(n), np.linalg.norm(A - B, axis=1))
    pair = CameraPairMatches("r", "t", 0.1, np.arange(0, n, 2))
    return pair, m, a, b, make_view("r", t=rng.uniform(-3, 3, 3))


def test_prune_matches_scalar_oracle(rng):
    pair, m, a, b, rv = _random_prune_setup(rng)
    for kappa in (0.001, 0.01, 0.05):
        got = prune_matches(pair, m, a, b, rv, kappa).match_indices.tolist()
        assert got == scalar_prune(pair.match_indices, m, a, b, rv.center, kappa)


def test_prune_monotone_in_kappa(rng):
    pair, m, a, b, rv = _random_prune_setup(rng)
    prev = set()
    for kappa in (0.0005, 0.002, 0.005, 0.01, 0.02, 0.1):
        cur = set(prune_matches(pair, m, a, b, rv, kappa).match_indices.tolist())
        assert prev <= cur
        prev = cur


# -- projection -----------------------------------------------------------------------

def test_project_optical_axes():
    rv = make_view("r0", "ref", cx=40.0, cy=30.0)
    tv = make_view("t0", "tgt", t=(0, 0, 1), cx=60.0, cy=20.0)
    a = cloud([[0, 0, 5]], "ref", (("r0",),))
    b = cloud([[0, 0, 5]], "tgt", (("t0",),))
    m = mutual_nearest_neighbors(a, b)
    s = project_matches_to_pixels(CameraPairMatches("r0", "t0", 1.0, [0]), m, a, b, rv, tv)
    np.testing.assert_allclose(s.x_ref, [[40, 30]])
    np.testing.assert_allclose(s.x_tgt, [[60, 20]])
    assert s.condition_tag == "tgt"


def test_project_behind_target_dropped():
    rv = make_view("r0", "ref")
    tv = make_view("t0", "tgt", t=(0, 0, -10))
    a = cloud([[0, 0, 5]], "ref", (("r0",),))
    b = cloud([[0, 0, 5]], "tgt", (("t0",),))
    m = mutual_nearest_neighbors(a, b)
    s = project_matches_to_pixels(CameraPairMatches("r0", "t0", 10.0, [0]), m, a, b, rv, tv)
    assert s.n == 0


def test_project_duplicate_cell_keeps_nearest():
    rv = make_view("r0", "ref")
    tv = make_view("t0", "tgt")
    A = np.array([[0, 0, 8.0], [0, 0, 4.0]])  # same ray, same reference cell
    a = cloud(A, "ref", (("r0",),) * 2)
    b = cloud(A + [0.5, 0, 0], "tgt", (("t0",),) * 2)
    m = MatchSet("ref", "tgt", [0, 1], [0, 1], [0.5, 0.5])
    s = project_matches_to_pixels(CameraPairMatches("r0", "t0", 0.0, [0, 1]), m, a, b, rv, tv)
    assert s.n == 1
    np.testing.assert_allclose(s.x_tgt[0], project(b.positions[1], tv)[0])


def test_noiseless_pipeline_pixels_agree_with_ground_truth():
    scene = generate_scene(SceneConfig(stops=6), seed=2, render=False)
    ref, tgt = scene.traversal_ids[:2]
    samples = generate_correspondences(scene.clouds[ref], scene.clouds[tgt], scene.views,
                                       min_common=1, max_cam_dist=0.5)
    assert samples
    vidx = scene.view_index
    for s in samples:
        ri, ti = vidx[s.ref_view_id], vidx[s.target_view_id]
        both = np.nonzero(scene.visible[ri] & scene.visible[ti])[0]
        gr, gt = scene.pixels[ri, both], scene.pixels[ti, both]
        for xr, xt in zip(s.x_ref, s.x_tgt):
            ok = (np.linalg.norm(gr - xr, axis=1) < 0.5) & (np.linalg.norm(gt - xt, axis=1) < 0.5)
            assert ok.any()


def test_generate_identical_clouds_coincident_cameras():
    v = make_view("r0", "ref")
    w = make_view("t0", "tgt")
    pts = np.random.default_rng(0).uniform([-1, -1, 3], [1, 1, 6], (50, 3))
    a = cloud(pts, "ref", (("r0",),) * 50)
    b = cloud(pts, "tgt", (("t0",),) * 50)
    out = generate_correspondences(a, b, [v, w], min_common=1)
    assert len(out) == 1 and out[0].n > 0


def test_generate_thread_count_does_not_change_output():
    scene = generate_scene(SceneConfig(stops=6), seed=1, render=False)
    a, b = (scene.clouds[t] for t in scene.traversal_ids[:2])
    one = generate_correspondences(a, b, scene.views, min_common=1, threads=1)
    many = generate_correspondences(a, b, scene.views, min_common=1, threads=8)
    assert one == many
