"""Per-traversal point clouds, depth-map fusion, z-buffer visibility, exact NN."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError
from .geometry import CameraView, pixel_cell, project_points, unproject

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PointCloud:
    """World-frame points of one traversal with per-point visibility sets.

    ``visibility[i]`` is a sorted tuple of the view_ids that see point ``i``.
    """

    traversal_id: str
    positions: np.ndarray
    visibility: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        pos.setflags(write=False)
        vis = tuple(tuple(sorted(set(v))) for v in self.visibility)
        if len(vis) != len(pos):
            raise ValueError(f"{len(pos)} positions but {len(vis)} visibility sets")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "visibility", vis)

    def __len__(self):
        return len(self.positions)

    def points_by_view(self) -> Dict[str, np.ndarray]:
        """view_id -> ascending array of point indices visible in it."""
        out: Dict[str, List[int]] = {}
        for i, vs in enumerate(self.visibility):
            for v in vs:
                out.setdefault(v, []).append(i)
        return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}


@dataclass(frozen=True)
class DepthMap:
    """Row-major depth grid in meters; values <= 0 are invalid."""

    view_id: str
    width: int
    height: int
    depths: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        if d.size != self.width * self.height:
            raise ValueError(
                f"depth map {self.view_id}: {d.size} values for {self.width}x{self.height}"
            )
        d = d.reshape(self.height, self.width)
        d.setflags(write=False)
        object.__setattr__(self, "depths", d)


@dataclass(frozen=True)
class FusionConfig:
    pixel_stride: int = 4
    merge_radius: float = 0.05
    min_views: int = 1

    def __post_init__(self):
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if self.merge_radius < 0:
            raise ValueError("merge_radius must be >= 0")
        if self.min_views < 1:
            raise ValueError("min_views must be >= 1")


def fuse_depth_maps(views: Sequence[CameraView], depths: Sequence[DepthMap],
                    cfg: FusionConfig = FusionConfig()) -> PointCloud:
    """Unproject depth maps and merge nearby points from different views.

    Views are processed in view_id order and pixels in row-major order over
    the ``pixel_stride`` subgrid. Each new point joins the earliest-created,
    nearest cluster whose seed (its first point) lies strictly within
    ``merge_radius`` and which has no point from the same view yet; otherwise
    it seeds a new cluster. Clusters become points at the centroid of their
    members with the union of contributing views. Seeds never move, so
    merging does not chain along a surface.
    """
    if len(views) != len(depths):
        raise ValueError(f"{len(views)} views but {len(depths)} depth maps")
    by_id = {v.view_id: v for v in views}
    if len(by_id) != len(views):
        raise ValueError("duplicate view_id among fused views")
    dmaps = {}
    for dm in depths:
        view = by_id.get(dm.view_id)
        if view is None:
            raise ValueError(f"depth map for unknown view {dm.view_id!r}")
        if (dm.width, dm.height) != (view.width, view.height):
            raise ValueError(
                f"depth map {dm.view_id} is {dm.width}x{dm.height}, "
                f"view is {view.width}x{view.height}"
            )
        if dm.view_id in dmaps:
            raise ValueError(f"two depth maps for view {dm.view_id!r}")
        dmaps[dm.view_id] = dm
    traversals = {v.traversal_id for v in views}
    if len(traversals) > 1:
        raise ValueError(f"views span several traversals: {sorted(traversals)}")
    traversal_id = next(iter(traversals)) if traversals else ""

    s = cfg.pixel_stride
    r = cfg.merge_radius
    seeds: List[np.ndarray] = []
    sums: List[np.ndarray] = []
    counts: List[int] = []
    members: List[set] = []

    for vid in sorted(by_id):
        view = by_id[vid]
        grid = dmaps[vid].depths[::s, ::s]
        rows, cols = np.nonzero(grid > 0)  # row-major order
        if rows.size == 0:
            continue
        uv = np.stack([cols * s, rows * s], axis=1).astype(np.float64)
        pts = unproject(uv, grid[rows, cols], view)

        candidates: Optional[list] = None
        n_before = len(seeds)
        if r > 0 and n_before:
            seed_arr = np.asarray(seeds)
            candidates = cKDTree(seed_arr).query_ball_point(pts, r)
        for k, p in enumerate(pts):
            target = -1
            if candidates is not None and candidates[k]:
                cand = np.asarray(candidates[k], dtype=np.int64)
                diff = seed_arr[cand] - p
                d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
                for j in np.lexsort((cand, d2)):
                    cid = int(cand[j])
                    if d2[j] < r * r and vid not in members[cid]:
                        target = cid
                        break
            if target < 0:
                seeds.append(p)
                sums.append(p.copy())
                counts.append(1)
                members.append({vid})
            else:
                sums[target] = sums[target] + p
                counts[target] += 1
                members[target].add(vid)

    keep = [c for c in range(len(seeds)) if len(members[c]) >= cfg.min_views]
    positions = np.array([sums[c] / counts[c] for c in keep]).reshape(-1, 3)
    visibility = tuple(tuple(sorted(members[c])) for c in keep)
    logger.debug("fused %d clusters into %d points", len(seeds), len(keep))
    return PointCloud(traversal_id, positions, visibility)


def compute_visibility(cloud: PointCloud, view: CameraView, rel_depth_tol: float = 0.02) -> np.ndarray:
    """Indices of points that survive a per-pixel z-buffer test in ``view``.

    Points are bucketed by the integer pixel cell they project to; a point is
    visible iff its depth is within ``(1 + rel_depth_tol)`` of the smallest
    depth in its cell.
    """
    if not rel_depth_tol > 0:
        raise ValueError("rel_depth_tol must be positive")
    if len(cloud) == 0:
        return np.empty(0, dtype=np.int64)
    uv, depth, ok = project_points(cloud.positions, view)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return idx
    cells = pixel_cell(uv[idx], view.width, view.height)
    flat = cells[:, 1] * view.width + cells[:, 0]
    zbuf = np.full(view.width * view.height, np.inf)
    np.minimum.at(zbuf, flat, depth[idx])
    vis = depth[idx] <= zbuf[flat] * (1.0 + rel_depth_tol)
    return np.sort(idx[vis])


def annotate_visibility(cloud: PointCloud, views: Iterable[CameraView], rel_depth_tol: float = 0.02,
                        drop_unseen: bool = True) -> PointCloud:
    """Add every view in ``views`` to the visibility sets of the points it sees.

    Existing visibility entries are kept. With ``drop_unseen`` the points whose
    set stays empty are removed, so every returned point has a nonempty set.
    """
    vis = [set(v) for v in cloud.visibility]
    for view in views:
        if view.traversal_id != cloud.traversal_id:
            raise ValueError(
                f"view {view.view_id} belongs to traversal {view.traversal_id}, "
                f"cloud to {cloud.traversal_id}"
            )
        for i in compute_visibility(cloud, view, rel_depth_tol):
            vis[i].add(view.view_id)
    keep = [i for i, v in enumerate(vis) if v or not drop_unseen]
    return PointCloud(cloud.traversal_id, cloud.positions[keep], tuple(vis[i] for i in keep))


def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


class SpatialIndex:
    """Exact Euclidean nearest-neighbor search over a fixed point set.

    Candidates come from a k-d tree; the winner is then chosen by exact
    squared distance with ties going to the smallest point index, so results
    agree with a linear scan bit for bit.
    """

    _K = 8

    def __init__(self, positions: np.ndarray):
        pts = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, q) -> Tuple[int, float]:
        idx, dist = self.query_many(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def query_many(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        k = min(self._K, n)
        _, cand = self._tree.query(Q, k=k)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(Q), k)
        d2 = _sqdist(self.points[cand], Q[:, None, :])
        # lexicographic (d2, index) minimum per row
        order = np.lexsort((cand, d2), axis=1)
        best_col = order[:, 0]
        rows = np.arange(len(Q))
        best = cand[rows, best_col]
        best_d2 = d2[rows, best_col]
        if k < n:
            # rows whose whole candidate set is (nearly) tied may hide an
            # equidistant point with a smaller index outside the set
            far = d2.max(axis=1)
            unsure = np.nonzero(far <= best_d2 * (1 + 1e-9) + 1e-300)[0]
            for r in unsure:
                radius = np.sqrt(best_d2[r]) * (1 + 1e-9) + 1e-12
                ball = np.asarray(self._tree.query_ball_point(Q[r], radius), dtype=np.int64)
                bd2 = _sqdist(self.points[ball], Q[r])
                j = np.lexsort((ball, bd2))[0]
                best[r], best_d2[r] = ball[j], bd2[j]
        return best, np.sqrt(best_d2)


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    if len(cloud) == 0:
        raise ValueError("cannot index an empty cloud")
    return SpatialIndex(cloud.positions)


def nearest_neighbor(index: SpatialIndex, query) -> Tuple[int, float]:
    return index.query(query)


# -- file formats -------------------------------------------------------------

def write_cloud(cloud: PointCloud, path) -> None:
    """PLYLITE text: ``PLYLITE <n>`` then ``x y z k v1 .. vk`` per point."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"PLYLITE {len(cloud)}\n")
        for p, vis in zip(cloud.positions, cloud.visibility):
            fh.write(" ".join([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])),
                               str(len(vis)), *vis]) + "\n")


def read_cloud(path, traversal_id: Optional[str] = None) -> PointCloud:
    """Read a PLYLITE file.

    The format carries no traversal id; it defaults to the file stem.
    """
    path = Path(path)
    src = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1, src)
    head = lines[0].split()
    if len(head) != 2 or head[0] != "PLYLITE":
        raise ParseError("expected header 'PLYLITE <n_points>'", 1, src)
    try:
        n = int(head[1])
    except ValueError:
        raise ParseError("point count is not an integer", 1, src) from None
    if n < 0:
        raise ParseError("negative point count", 1, src)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise ParseError(f"header says {n} points, found {len(body)} lines", len(lines), src)
    pos = np.empty((n, 3))
    vis = []
    for i, line in enumerate(body):
        lineno = i + 2
        tok = line.split()
        try:
            pos[i] = [float(t) for t in tok[:3]]
            k = int(tok[3])
        except (ValueError, IndexError):
            raise ParseError("expected 'x y z k v1 .. vk'", lineno, src) from None
        if k < 0 or len(tok) != 4 + k:
            raise ParseError(f"visibility count {k} does not match {len(tok) - 4} ids", lineno, src)
        if not np.all(np.isfinite(pos[i])):
            raise ParseError("non-finite coordinate", lineno, src)
        vis.append(tuple(tok[4:]))
    return PointCloud(traversal_id if traversal_id is not None else path.stem, pos, tuple(vis))


def write_depth_map(dm: DepthMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"DEPTH {dm.view_id} {dm.width} {dm.height}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(dm.depths, dtype="<f4").tobytes())


def read_depth_map(path) -> DepthMap:
    src = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", 1, src)
    tok = data[:nl].decode("ascii", errors="replace").split()
    if len(tok) != 4 or tok[0] != "DEPTH":
        raise ParseError("expected header 'DEPTH <view_id> <width> <height>'", 1, src)
    try:
        w, h = int(tok[2]), int(tok[3])
    except ValueError:
        raise ParseError("width/height are not integers", 1, src) from None
    if w <= 0 or h <= 0:
        raise ParseError("width/height must be positive", 1, src)
    payload = data[nl + 1:]
    if len(payload) != 4 * w * h:
        raise ParseError(f"expected {4 * w * h} payload bytes, got {len(payload)}", 2, src)
    depths = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    depths = np.where(np.isfinite(depths), depths, 0.0)
    return DepthMap(tok[1], w, h, depths)
