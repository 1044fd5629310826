"""Geometric matching of two traversals' clouds into 2D-2D correspondences.

The pipeline is: mutual nearest neighbors over the whole clouds, grouping of
the matches by (reference view, target view) co-visibility, per-pair pruning
with a depth-proportional distance threshold, and projection to pixels.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .dataset_io import CorrespondenceSample
from .geometry import CameraView, pixel_cell, project_points
from .pointcloud import PointCloud, build_spatial_index

CMU_MAX_CAM_DIST = 0.5
ROBOTCAR_MAX_CAM_DIST = 2.0
DEFAULT_MIN_COMMON = 500
DEFAULT_KAPPA = 0.01


@dataclass(frozen=True)
class MatchSet:
    """Mutual-NN pairs ``(i, j)`` between a reference and a target cloud, sorted by ``i``."""

    ref_traversal_id: str
    target_traversal_id: str
    ref_idx: np.ndarray
    tgt_idx: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        for name in ("ref_idx", "tgt_idx"):
            a = np.asarray(getattr(self, name), dtype=np.int64).ravel()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        d = np.asarray(self.distance, dtype=np.float64).ravel()
        d.setflags(write=False)
        object.__setattr__(self, "distance", d)
        if not (len(self.ref_idx) == len(self.tgt_idx) == len(d)):
            raise ValueError("match arrays differ in length")

    def __len__(self):
        return len(self.ref_idx)

    def pairs(self):
        return list(zip(self.ref_idx.tolist(), self.tgt_idx.tolist(), self.distance.tolist()))


@dataclass(frozen=True)
class CameraPairMatches:
    ref_view_id: str
    target_view_id: str
    camera_distance: float
    match_indices: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.match_indices, dtype=np.int64).ravel()
        m.setflags(write=False)
        object.__setattr__(self, "match_indices", m)


def mutual_nearest_neighbors(cloud_ref: PointCloud, cloud_tgt: PointCloud) -> MatchSet:
    if len(cloud_ref) == 0 or len(cloud_tgt) == 0:
        raise ValueError("mutual nearest neighbors needs two nonempty clouds")
    fwd, dist = build_spatial_index(cloud_tgt).query_many(cloud_ref.positions)
    bwd, _ = build_spatial_index(cloud_ref).query_many(cloud_tgt.positions)
    i = np.nonzero(bwd[fwd] == np.arange(len(cloud_ref)))[0]
    return MatchSet(cloud_ref.traversal_id, cloud_tgt.traversal_id, i, fwd[i], dist[i])


def select_camera_pairs(matches: MatchSet, cloud_ref: PointCloud, cloud_tgt: PointCloud,
                        views: Sequence[CameraView], min_common: int = DEFAULT_MIN_COMMON,
                        max_cam_dist: float = CMU_MAX_CAM_DIST) -> List[CameraPairMatches]:
    """Camera pairs that share at least ``min_common`` matched points and whose
    centers are strictly closer than ``max_cam_dist``.

    Output is sorted by (ref_view_id, target_view_id).
    """
    if min_common < 1:
        raise ValueError("min_common must be >= 1")
    if not max_cam_dist > 0:
        raise ValueError("max_cam_dist must be positive")
    by_id = {v.view_id: v for v in views}
    groups: Dict[tuple, List[int]] = {}
    # visit matches in order so per-pair index lists come out sorted
    for m, (i, j) in enumerate(zip(matches.ref_idx.tolist(), matches.tgt_idx.tolist())):
        tvis = cloud_tgt.visibility[j]
        for r in cloud_ref.visibility[i]:
            for t in tvis:
                groups.setdefault((r, t), []).append(m)
    out = []
    for (r, t) in sorted(groups):
        idx = groups[(r, t)]
        if len(idx) < min_common:
            continue
        if r not in by_id or t not in by_id:
            raise ValueError(f"visibility references unknown view {r if r not in by_id else t!r}")
        dist = float(np.linalg.norm(by_id[r].center - by_id[t].center))
        if dist < max_cam_dist:
            out.append(CameraPairMatches(r, t, dist, np.asarray(idx, dtype=np.int64)))
    return out


def prune_matches(pair: CameraPairMatches, matches: MatchSet, cloud_ref: PointCloud,
                  cloud_tgt: PointCloud, ref_view: CameraView,
                  kappa: float = DEFAULT_KAPPA) -> CameraPairMatches:
    """Keep matches with ``|X1 - X2| < kappa * |X1 - C_ref|``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    m = pair.match_indices
    x1 = cloud_ref.positions[matches.ref_idx[m]]
    x2 = cloud_tgt.positions[matches.tgt_idx[m]]
    sep = np.linalg.norm(x1 - x2, axis=1)
    depth = np.linalg.norm(x1 - ref_view.center, axis=1)
    keep = sep < kappa * depth
    return CameraPairMatches(pair.ref_view_id, pair.target_view_id, pair.camera_distance, m[keep])


def project_matches_to_pixels(pair: CameraPairMatches, matches: MatchSet, cloud_ref: PointCloud,
                              cloud_tgt: PointCloud, ref_view: CameraView, tgt_view: CameraView,
                              condition_tag: Optional[str] = None) -> CorrespondenceSample:
    """Pixel positions of the pair's matches in both images.

    Matches that do not project into both images are dropped. When several
    land on the same reference pixel cell, the one nearest to the reference
    camera wins (lower match index on equal depth). Order follows the pair's
    match indices.
    """
    m = pair.match_indices
    uv_r, z_r, ok_r = project_points(cloud_ref.positions[matches.ref_idx[m]], ref_view)
    uv_t, _, ok_t = project_points(cloud_tgt.positions[matches.tgt_idx[m]], tgt_view)
    ok = np.nonzero(ok_r & ok_t)[0]
    if ok.size:
        cells = pixel_cell(uv_r[ok], ref_view.width, ref_view.height)
        flat = cells[:, 1] * ref_view.width + cells[:, 0]
        # sort by (cell, depth, position); first of each cell survives
        order = np.lexsort((ok, z_r[ok], flat))
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat[order][1:] != flat[order][:-1]
        ok = np.sort(ok[order[first]])
    tag = condition_tag if condition_tag is not None else tgt_view.traversal_id
    return CorrespondenceSample(
        ref_view.view_id, tgt_view.view_id, tag, uv_r[ok], uv_t[ok],
        ref_view.image_path, tgt_view.image_path,
        (ref_view.width, ref_view.height), (tgt_view.width, tgt_view.height),
    )


def generate_correspondences(cloud_ref: PointCloud, cloud_tgt: PointCloud,
                             views: Sequence[CameraView], *, kappa: float = DEFAULT_KAPPA,
                             min_common: int = DEFAULT_MIN_COMMON,
                             max_cam_dist: float = CMU_MAX_CAM_DIST,
                             condition_tag: Optional[str] = None, threads: int = 1,
                             keep_empty: bool = False) -> List[CorrespondenceSample]:
    """Full matching pipeline from two clouds to correspondence samples.

    Camera pairs are processed independently (optionally on ``threads``
    workers); results keep the sorted (ref_view_id, target_view_id) order.
    Samples with N = 0 are discarded unless ``keep_empty``.
    """
    by_id: Mapping[str, CameraView] = {v.view_id: v for v in views}
    matches = mutual_nearest_neighbors(cloud_ref, cloud_tgt)
    pairs = select_camera_pairs(matches, cloud_ref, cloud_tgt, views, min_common, max_cam_dist)

    def work(pair: CameraPairMatches) -> CorrespondenceSample:
        rv, tv = by_id[pair.ref_view_id], by_id[pair.target_view_id]
        pruned = prune_matches(pair, matches, cloud_ref, cloud_tgt, rv, kappa)
        return project_matches_to_pixels(pruned, matches, cloud_ref, cloud_tgt, rv, tv, condition_tag)

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(work, pairs))
    else:
        samples = [work(p) for p in pairs]
    return [s for s in samples if keep_empty or s.n > 0]
