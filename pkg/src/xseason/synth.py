"""Deterministic synthetic street scenes with ground-truth correspondences.

A scene is a ground plane plus axis-aligned boxes (buildings, a pole and a
parked car), all decomposed into planar rectangles and sampled on a regular
grid. Each traversal drives a straight path with two side-looking cameras per
stop; traversals differ by a small lateral/longitudinal offset. Occlusion is
exact ray casting against the rectangles.

World frame: x along the street, y to the left, z up.

Random numbers come from a keyed SplitMix64 stream so that every value is a
pure function of ``(seed, stream, counter)``::

    key      = mix(mix(seed) ^ stream)
    word(i)  = mix(key + (i + 1) * 0x9E3779B97F4A7C15)      (mod 2**64)
    uniform  = (word >> 11) * 2**-53                          in [0, 1)
    normal   = Box-Muller on (1 - uniform(2i), uniform(2i + 1))

with ``mix`` the SplitMix64 finalizer (shifts 30/27/31, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .dataset_io import CorrespondenceSample
from .geometry import CameraView, project_points
from .pointcloud import DepthMap, PointCloud

# -- keyed SplitMix64 ---------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

STREAM_LAYOUT = 1
STREAM_NOISE = 2
STREAM_DROPOUT = 3


def _mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, stream: int) -> np.uint64:
    s = _mix(np.array([seed & _MASK], dtype=np.uint64))[0]
    return _mix(np.array([int(s) ^ (stream & _MASK)], dtype=np.uint64))[0]


def random_words(seed: int, stream: int, counters) -> np.ndarray:
    key = stream_key(seed, stream)
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(key + (c + np.uint64(1)) * _GOLDEN)


def random_uniform(seed: int, stream: int, counters) -> np.ndarray:
    w = random_words(seed, stream, counters)
    return (w >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def random_normal(seed: int, stream: int, counters) -> np.ndarray:
    c = np.asarray(counters, dtype=np.uint64)
    u1 = 1.0 - random_uniform(seed, stream, c * np.uint64(2))
    u2 = random_uniform(seed, stream, c * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _stream(kind: int, traversal: int) -> int:
    return (kind << 32) | traversal


# -- geometry primitives --------------------------------------------------------

CLASS_ROAD, CLASS_SIDEWALK, CLASS_BUILDING, CLASS_POLE, CLASS_VEGETATION, CLASS_CAR = 0, 1, 2, 5, 8, 13


@dataclass(frozen=True)
class Rect:
    """Planar patch ``origin + a * edge_u + b * edge_v`` for ``a, b`` in [0, 1]."""

    origin: Tuple[float, float, float]
    edge_u: Tuple[float, float, float]
    edge_v: Tuple[float, float, float]
    class_id: int
    movable: bool = False

    def shifted(self, offset) -> "Rect":
        o = tuple(float(a + b) for a, b in zip(self.origin, offset))
        return Rect(o, self.edge_u, self.edge_v, self.class_id, self.movable)


def box_faces(lo, hi, class_id, movable=False) -> List[Rect]:
    """Four walls and the roof of an axis-aligned box (no floor)."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    return [
        Rect((x0, y0, z0), (dx, 0, 0), (0, 0, dz), class_id, movable),
        Rect((x0, y1, z0), (dx, 0, 0), (0, 0, dz), class_id, movable),
        Rect((x0, y0, z0), (0, dy, 0), (0, 0, dz), class_id, movable),
        Rect((x1, y0, z0), (0, dy, 0), (0, 0, dz), class_id, movable),
        Rect((x0, y0, z1), (dx, 0, 0), (0, dy, 0), class_id, movable),
    ]


class _RectSet:
    """Vectorized ray/rectangle intersection over a fixed list of rectangles."""

    def __init__(self, rects: Sequence[Rect]):
        self.rects = list(rects)
        self.o = np.array([r.origin for r in rects], dtype=np.float64)
        self.u = np.array([r.edge_u for r in rects], dtype=np.float64)
        self.v = np.array([r.edge_v for r in rects], dtype=np.float64)
        n = np.cross(self.u, self.v)
        self.n = n / np.linalg.norm(n, axis=1, keepdims=True)
        self.uu = np.einsum("ij,ij->i", self.u, self.u)
        self.vv = np.einsum("ij,ij->i", self.v, self.v)
        self.cls = np.array([r.class_id for r in rects], dtype=np.int64)

    def _hit_t(self, k, origin, dirs):
        """Ray parameters of hits with rectangle ``k`` (inf where missed)."""
        nk = self.n[k]
        denom = dirs @ nk
        # misses carry t = inf; the nan they produce below fails the inside test
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.o[k] - origin) @ nk) / denom
            t = np.where(np.abs(denom) > 1e-15, t, np.inf)
            rel = origin + t[:, None] * dirs - self.o[k]
            a = (rel @ self.u[k]) / self.uu[k]
            b = (rel @ self.v[k]) / self.vv[k]
        inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & np.isfinite(t)
        return np.where(inside, t, np.inf)

    def first_hit(self, origin, dirs, t_min=1e-9):
        best_t = np.full(len(dirs), np.inf)
        best_k = np.full(len(dirs), -1, dtype=np.int64)
        for k in range(len(self.rects)):
            t = self._hit_t(k, origin, dirs)
            t = np.where(t > t_min, t, np.inf)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_k[closer] = k
        return best_t, best_k

    def occluded(self, origin, points, rel_eps=1e-6):
        """True where the open segment origin -> point crosses a rectangle."""
        dirs = points - origin
        occ = np.zeros(len(points), dtype=bool)
        for k in range(len(self.rects)):
            t = self._hit_t(k, origin, dirs)
            occ |= (t > 1e-9) & (t < 1.0 - rel_eps)
        return occ


def sample_rect(rect: Rect, spacing: float) -> np.ndarray:
    lu = math.sqrt(sum(c * c for c in rect.edge_u))
    lv = math.sqrt(sum(c * c for c in rect.edge_v))
    na = max(1, int(round(lu / spacing)))
    nb = max(1, int(round(lv / spacing)))
    a = (np.arange(na) + 0.5) / na
    b = (np.arange(nb) + 0.5) / nb
    A, B = np.meshgrid(a, b, indexing="ij")
    return (np.asarray(rect.origin) + A.reshape(-1, 1) * np.asarray(rect.edge_u)
            + B.reshape(-1, 1) * np.asarray(rect.edge_v))


def look_rotation(yaw_deg: float, pitch_deg: float = 0.0) -> np.ndarray:
    """Camera-from-world rotation for a camera with the given heading (z up world)."""
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), -math.sin(pitch)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


# -- scene ------------------------------------------------------------------------

DEFAULT_CONDITIONS = ("Sunny + Foliage", "Overcast + Mixed Foliage", "Low Sun + No Foliage + Snow",
                      "Cloudy + Foliage", "Night", "Rain")


@dataclass(frozen=True)
class SceneConfig:
    n_traversals: int = 2
    stops: int = 12
    stop_spacing: float = 1.0
    camera_yaws: Tuple[float, ...] = (70.0, -70.0)
    camera_pitch: float = -5.0
    camera_height: float = 1.6
    width: int = 200
    height: int = 150
    focal: float = 110.0
    sample_spacing: float = 0.4
    street_half_width: float = 7.0
    sigma: float = 0.0
    dropout: float = 0.0
    movable_shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_surfaces: Optional[int] = None
    conditions: Tuple[str, ...] = DEFAULT_CONDITIONS

    def __post_init__(self):
        if self.n_traversals < 2:
            raise ValueError("need at least two traversals")
        if self.stops * len(self.camera_yaws) < 2:
            raise ValueError("need at least two views per traversal")
        if self.sigma < 0 or not 0 <= self.dropout < 1:
            raise ValueError("sigma must be >= 0 and dropout in [0, 1)")
        if self.sample_spacing <= 0:
            raise ValueError("sample_spacing must be positive")
        if self.n_surfaces is not None and self.n_surfaces <= 0:
            raise ValueError("scene needs at least one surface")

    def to_json(self) -> dict:
        d = asdict(self)
        d["camera_yaws"] = list(self.camera_yaws)
        d["movable_shift"] = list(self.movable_shift)
        d["conditions"] = list(self.conditions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for k in ("camera_yaws", "movable_shift", "conditions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def traversal_id(k: int) -> str:
    return "ref" if k == 0 else f"t{k}"


def traversal_offset(k: int) -> Tuple[float, float]:
    """(dx, dy) of traversal ``k``'s path relative to the reference path."""
    if k == 0:
        return 0.0, 0.0
    return (0.2 if k % 2 else -0.2), 0.1 * min(k, 4)


def layout_surfaces(cfg: SceneConfig, seed: int) -> List[Rect]:
    """Ground, two rows of buildings with gaps, a pole and a parked car."""
    L = (cfg.stops - 1) * cfg.stop_spacing
    x_lo, x_hi = -12.0, L + 12.0
    hw = cfg.street_half_width
    rects = [
        Rect((x_lo, -hw / 2, 0.0), (x_hi - x_lo, 0, 0), (0, hw, 0), CLASS_ROAD),
        Rect((x_lo, hw / 2, 0.0), (x_hi - x_lo, 0, 0), (0, hw / 2, 0), CLASS_SIDEWALK),
        Rect((x_lo, -hw, 0.0), (x_hi - x_lo, 0, 0), (0, hw / 2, 0), CLASS_SIDEWALK),
    ]
    counter = 0

    def uni(lo, hi):
        nonlocal counter
        u = float(random_uniform(seed, STREAM_LAYOUT, [counter])[0])
        counter += 1
        return lo + (hi - lo) * u

    for side in (1, -1):
        x = x_lo + uni(0.0, 2.0)
        while x < x_hi - 3.0:
            w = uni(4.0, 8.0)
            setback = hw + uni(0.0, 1.5)
            h = uni(6.0, 12.0)
            x1 = min(x + w, x_hi)
            if side > 0:
                rects += box_faces((x, setback, 0.0), (x1, setback + 5.0, h), CLASS_BUILDING)
            else:
                rects += box_faces((x, -setback - 5.0, 0.0), (x1, -setback, h), CLASS_BUILDING)
            x = x1 + uni(1.0, 3.0)

    px = uni(0.3, 0.7) * L
    rects += box_faces((px, hw / 2 + 0.8, 0.0), (px + 0.4, hw / 2 + 1.2, 4.0), CLASS_POLE)
    cx = uni(0.2, 0.6) * L
    rects += box_faces((cx, -hw / 2 + 0.3, 0.0), (cx + 4.2, -hw / 2 + 2.1, 1.5), CLASS_CAR, movable=True)
    if cfg.n_surfaces is not None:
        rects = rects[: cfg.n_surfaces]
    return rects


def make_views(cfg: SceneConfig, k: int) -> List[CameraView]:
    dx, dy = traversal_offset(k)
    tid = traversal_id(k)
    views = []
    for s in range(cfg.stops):
        center = (s * cfg.stop_spacing + dx, dy, cfg.camera_height)
        for c, yaw in enumerate(cfg.camera_yaws):
            R = look_rotation(yaw, cfg.camera_pitch)
            vid = f"{tid}-s{s:03d}-c{c}"
            views.append(CameraView.from_center(
                vid, tid, R, center, cfg.focal, cfg.focal, cfg.width / 2, cfg.height / 2,
                cfg.width, cfg.height, image_path=f"{tid}/{vid}.png"))
    return views


@dataclass(eq=False)
class SyntheticScene:
    """Generated scene plus all ground truth.

    ``true_positions[k, s]`` is surface sample ``s`` as placed in traversal
    ``k`` (movable surfaces may shift); ``pixels[v, s]`` its projection into
    view ``v`` where ``visible[v, s]``. Only samples seen by at least one view
    of every traversal are kept.
    """

    seed: int
    config: SceneConfig
    surfaces: List[Rect]
    traversal_ids: List[str]
    views: List[CameraView]
    view_traversal: np.ndarray
    sample_surface: np.ndarray
    sample_class: np.ndarray
    true_positions: np.ndarray
    visible: np.ndarray
    pixels: np.ndarray
    clouds: Dict[str, PointCloud] = field(default_factory=dict)
    cloud_sample_ids: Dict[str, np.ndarray] = field(default_factory=dict)
    depth_maps: Dict[str, DepthMap] = field(default_factory=dict)
    label_maps: Dict[str, np.ndarray] = field(default_factory=dict)
    noise: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def view_index(self) -> Dict[str, int]:
        return {v.view_id: i for i, v in enumerate(self.views)}

    @property
    def views_by_id(self) -> Dict[str, CameraView]:
        return {v.view_id: v for v in self.views}

    def condition(self, traversal: str) -> str:
        k = self.traversal_ids.index(traversal)
        return self.config.conditions[k % len(self.config.conditions)]


def _surfaces_for(surfaces: Sequence[Rect], shift) -> List[Rect]:
    return [r.shifted(shift) if r.movable else r for r in surfaces]


def _render(view: CameraView, rset: _RectSet):
    """Depth (camera z) and class id at every integer pixel center."""
    vv, uu = np.mgrid[0:view.height, 0:view.width]
    d_cam = np.stack([(uu.ravel() - view.cx) / view.fx, (vv.ravel() - view.cy) / view.fy,
                      np.ones(uu.size)], axis=1)
    dirs = d_cam @ view.R  # R^T d per row
    t, k = rset.first_hit(view.center, dirs)
    depth = np.where(np.isfinite(t), t, 0.0)
    labels = np.where(k >= 0, rset.cls[np.maximum(k, 0)], 255)
    return depth.reshape(view.height, view.width), labels.reshape(view.height, view.width)


def generate_scene(config: SceneConfig = SceneConfig(), seed: int = 0,
                   render: bool = True) -> SyntheticScene:
    """Build a scene, its per-traversal clouds and (optionally) per-view depth maps."""
    surfaces = layout_surfaces(config, seed)
    if not surfaces:
        raise ValueError("scene has no surfaces")
    T = config.n_traversals
    tids = [traversal_id(k) for k in range(T)]
    views: List[CameraView] = []
    view_trav = []
    for k in range(T):
        vs = make_views(config, k)
        views += vs
        view_trav += [k] * len(vs)
    view_trav = np.asarray(view_trav)

    base, surf_of = [], []
    for i, r in enumerate(surfaces):
        pts = sample_rect(r, config.sample_spacing)
        base.append(pts)
        surf_of.append(np.full(len(pts), i))
    base = np.concatenate(base)
    surf_of = np.concatenate(surf_of)
    movable = np.array([surfaces[i].movable for i in surf_of])

    shifts = [np.zeros(3) if k == 0 else np.asarray(config.movable_shift, dtype=np.float64) * k
              for k in range(T)]
    true_pos = np.stack([base + movable[:, None] * shifts[k] for k in range(T)])
    rsets = [_RectSet(_surfaces_for(surfaces, shifts[k])) for k in range(T)]

    V, S = len(views), len(base)
    visible = np.zeros((V, S), dtype=bool)
    pixels = np.zeros((V, S, 2))
    for vi, view in enumerate(views):
        k = view_trav[vi]
        uv, _, ok = project_points(true_pos[k], view)
        idx = np.nonzero(ok)[0]
        occ = rsets[k].occluded(view.center, true_pos[k][idx])
        idx = idx[~occ]
        visible[vi, idx] = True
        pixels[vi] = uv

    support = np.ones(S, dtype=bool)
    for k in range(T):
        support &= visible[view_trav == k].any(axis=0)
    keep = np.nonzero(support)[0]
    scene = SyntheticScene(
        seed, config, surfaces, tids, views, view_trav, surf_of[keep],
        np.array([surfaces[i].class_id for i in surf_of[keep]], dtype=np.int64),
        true_pos[:, keep], visible[:, keep], pixels[:, keep],
    )
    n = len(keep)
    sample_ids = np.arange(n, dtype=np.uint64)
    for k, tid in enumerate(tids):
        counters = sample_ids[:, None] * np.uint64(3) + np.arange(3, dtype=np.uint64)[None, :]
        eps = random_normal(seed, _stream(STREAM_NOISE, k), counters.ravel()).reshape(n, 3)
        scene.noise[tid] = eps
        noisy = scene.true_positions[k] + config.sigma * eps
        kept = random_uniform(seed, _stream(STREAM_DROPOUT, k), sample_ids) >= config.dropout
        ids = np.nonzero(kept)[0]
        tv = np.nonzero(view_trav == k)[0]
        vis_sets = tuple(tuple(views[v].view_id for v in tv[scene.visible[tv, s]]) for s in ids)
        scene.clouds[tid] = PointCloud(tid, noisy[ids], vis_sets)
        scene.cloud_sample_ids[tid] = ids
    if render:
        for vi, view in enumerate(views):
            depth, labels = _render(view, rsets[view_trav[vi]])
            scene.depth_maps[view.view_id] = DepthMap(view.view_id, view.width, view.height, depth)
            scene.label_maps[view.view_id] = labels
    return scene


# -- ground truth and evaluation -------------------------------------------------

def ground_truth_correspondences(scene: SyntheticScene, max_cam_dist: float = 0.5,
                                 min_common: int = 1) -> List[CorrespondenceSample]:
    """Exact correspondences between the reference traversal and every other one.

    One sample per (reference view, target view) pair whose centers are
    closer than ``max_cam_dist`` and which share at least ``min_common``
    co-visible samples.
    """
    ref_views = [i for i, k in enumerate(scene.view_traversal) if k == 0]
    out = []
    for ri in ref_views:
        rv = scene.views[ri]
        for ti, tv in enumerate(scene.views):
            if scene.view_traversal[ti] == 0:
                continue
            if not np.linalg.norm(rv.center - tv.center) < max_cam_dist:
                continue
            common = np.nonzero(scene.visible[ri] & scene.visible[ti])[0]
            if len(common) < min_common:
                continue
            out.append(CorrespondenceSample(
                rv.view_id, tv.view_id, scene.condition(tv.traversal_id),
                scene.pixels[ri, common], scene.pixels[ti, common],
                rv.image_path, tv.image_path, (rv.width, rv.height), (tv.width, tv.height)))
    out.sort(key=lambda s: (s.ref_view_id, s.target_view_id))
    return out


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    n_emitted: int
    n_correct: int
    n_ground_truth: int
    n_recalled: int
    precision_defined: bool


def evaluate_correspondences(generated: Sequence[CorrespondenceSample], scene: SyntheticScene,
                             pixel_tol: float = 1.0) -> EvalResult:
    """Precision and recall of generated correspondences against ground truth.

    A pair is correct iff both endpoints are within ``pixel_tol`` of the two
    projections of one surface sample visible in both views. Recall counts,
    over the camera pairs present in ``generated``, the co-visible samples
    that are the closest match of at least one correct pair. With nothing emitted precision is
    reported as 1.0 and ``precision_defined`` is False.
    """
    if not pixel_tol > 0:
        raise ValueError("pixel_tol must be positive")
    vidx = scene.view_index
    emitted = correct = total_gt = recalled = 0
    seen_pairs = set()
    for sample in generated:
        ri, ti = vidx[sample.ref_view_id], vidx[sample.target_view_id]
        common = np.nonzero(scene.visible[ri] & scene.visible[ti])[0]
        key = (ri, ti)
        hit = np.zeros(len(common), dtype=bool)
        emitted += sample.n
        if sample.n and len(common):
            gt4 = np.concatenate([scene.pixels[ri, common], scene.pixels[ti, common]], axis=1)
            q4 = np.concatenate([sample.x_ref, sample.x_tgt], axis=1)
            cands = cKDTree(gt4).query_ball_point(q4, pixel_tol * math.sqrt(2) * (1 + 1e-12))
            for q, cand in zip(q4, cands):
                if not cand:
                    continue
                cand = np.asarray(cand)
                dr = np.linalg.norm(gt4[cand, :2] - q[:2], axis=1)
                dt = np.linalg.norm(gt4[cand, 2:] - q[2:], axis=1)
                ok = (dr <= pixel_tol) & (dt <= pixel_tol)
                if ok.any():
                    correct += 1
                    # credit only the closest ground-truth sample
                    best = np.lexsort((cand[ok], (dr + dt)[ok]))[0]
                    hit[cand[ok][best]] = True
        if key not in seen_pairs:
            seen_pairs.add(key)
            total_gt += len(common)
            recalled += int(hit.sum())
    defined = emitted > 0
    return EvalResult(
        precision=correct / emitted if defined else 1.0,
        recall=recalled / total_gt if total_gt else 0.0,
        n_emitted=emitted, n_correct=correct, n_ground_truth=total_gt,
        n_recalled=recalled, precision_defined=defined,
    )


def scene_metadata(scene: SyntheticScene) -> dict:
    return {"seed": scene.seed, "config": scene.config.to_json()}


def scene_from_metadata(meta: dict, render: bool = False) -> SyntheticScene:
    return generate_scene(SceneConfig.from_json(meta["config"]), int(meta["seed"]), render=render)


def dump_metadata(scene: SyntheticScene) -> str:
    return json.dumps(scene_metadata(scene), indent=2, sort_keys=True) + "\n"
