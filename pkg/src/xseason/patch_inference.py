"""Sliding-window tiling and weighted fusion of per-patch class scores."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ParseError

PATCH_SIZE = 713
PATCH_STRIDE = 476
CENTER_SIZE = 236
W_FLOOR = 1e-6


def axis_origins(extent: int, patch_size: int, stride: int) -> List[int]:
    """0, stride, 2*stride, ... plus a final origin clamped to ``extent - patch_size``."""
    if extent < patch_size:
        raise ValueError(f"extent {extent} smaller than patch {patch_size}; pad the image first")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = list(range(0, extent - patch_size + 1, stride))
    if out[-1] != extent - patch_size:
        out.append(extent - patch_size)
    return out


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    patch_size: int
    stride: int
    origins: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        p = self.patch_size
        for x, y in self.origins:
            if not (0 <= x <= self.width - p and 0 <= y <= self.height - p):
                raise ValueError(f"patch at ({x}, {y}) leaves the {self.width}x{self.height} image")
        cover = np.zeros((self.height, self.width), dtype=bool)
        for x, y in self.origins:
            cover[y:y + p, x:x + p] = True
        if not cover.all():
            raise ValueError("planned patches do not cover the image")


def plan_tiles(width: int, height: int, patch_size: int = PATCH_SIZE,
               stride: int = PATCH_STRIDE) -> TilePlan:
    xs = axis_origins(width, patch_size, stride)
    ys = axis_origins(height, patch_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return TilePlan(width, height, patch_size, stride, origins)


@dataclass(frozen=True, eq=False)
class WeightMap:
    patch_size: int
    center_size: int
    w_floor: float
    weights: np.ndarray


def axis_ramp(patch_size: int, center_size: int) -> np.ndarray:
    """Per-axis ramp: 0 at the outermost pixel, 1 from the center-region border inward.

    The ramp is linear in the distance of the pixel index to the nearer edge
    pixel, reaching 1 at distance ``(patch_size - center_size - 1) / 2``. For
    713/236 that is 238, which gives a 237-pixel plateau.
    """
    p = np.arange(patch_size, dtype=np.float64)
    dist = np.minimum(p, patch_size - 1 - p)
    half = (patch_size - center_size - 1) / 2.0
    if half <= 0:
        return np.ones(patch_size)
    return np.minimum(1.0, dist / half)


def make_weight_map(patch_size: int = PATCH_SIZE, center_size: int = CENTER_SIZE,
                    w_floor: float = W_FLOOR) -> WeightMap:
    if not 0 < center_size <= patch_size:
        raise ValueError("need 0 < center_size <= patch_size")
    if not 0 < w_floor <= 1:
        raise ValueError("w_floor must lie in (0, 1]")
    ramp = axis_ramp(patch_size, center_size)
    w = np.maximum(w_floor, np.minimum(1.0, np.outer(ramp, ramp)))
    w.setflags(write=False)
    return WeightMap(patch_size, center_size, w_floor, w)


def fuse_patch_scores(plan: TilePlan, weight_map: WeightMap, scores: Sequence[np.ndarray]) -> np.ndarray:
    """Weighted mean of overlapping patch scores, per pixel and channel.

    ``scores[k]`` is the (patch, patch, F) grid of the patch at
    ``plan.origins[k]``. Patches are accumulated in sorted origin order, so
    the result does not depend on the order they are listed in.
    """
    if len(scores) != len(plan.origins):
        raise ValueError(f"{len(plan.origins)} planned patches but {len(scores)} score grids")
    p = plan.patch_size
    if weight_map.patch_size != p:
        raise ValueError("weight map and plan disagree on patch size")
    grids = [np.asarray(s, dtype=np.float64) for s in scores]
    if not grids:
        raise ValueError("no patches")
    F = grids[0].shape[-1] if grids[0].ndim == 3 else None
    for g in grids:
        if g.shape != (p, p, F):
            raise ValueError(f"score grid of shape {g.shape}, expected {(p, p, F)}")
        if not np.all(np.isfinite(g)):
            raise ValueError("score grids must be finite")
    w = weight_map.weights
    order = sorted(range(len(grids)), key=lambda k: (plan.origins[k][1], plan.origins[k][0]))
    # Offsets from the first covering patch's score keep the mean exact when
    # all contributors agree (in particular for pixels under a single patch).
    base = np.full((plan.height, plan.width, F), np.nan)
    for k in order:
        x, y = plan.origins[k]
        view = base[y:y + p, x:x + p]
        unset = np.isnan(view[:, :, 0])
        view[unset] = grids[k][unset]
    num = np.zeros((plan.height, plan.width, F))
    den = np.zeros((plan.height, plan.width))
    for k in order:
        x, y = plan.origins[k]
        num[y:y + p, x:x + p] += w[:, :, None] * (grids[k] - base[y:y + p, x:x + p])
        den[y:y + p, x:x + p] += w
    return base + num / den[:, :, None]


# -- score files --------------------------------------------------------------

def write_patch_scores(path, x: int, y: int, scores: np.ndarray) -> None:
    s = np.asarray(scores)
    p, p2, F = s.shape
    if p != p2:
        raise ValueError("patch scores must be square")
    with open(path, "wb") as fh:
        fh.write(f"SCORES {x} {y} {p} {F}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def read_patch_scores(path):
    """Returns ``((x, y), scores)`` with scores shaped (patch, patch, F)."""
    src = str(path)
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", 1, src)
    tok = data[:nl].decode("ascii", errors="replace").split()
    if len(tok) != 5 or tok[0] != "SCORES":
        raise ParseError("expected header 'SCORES <x> <y> <patch> <F>'", 1, src)
    try:
        x, y, p, F = (int(t) for t in tok[1:])
    except ValueError:
        raise ParseError("non-integer header field", 1, src) from None
    if p <= 0 or F <= 0 or x < 0 or y < 0:
        raise ParseError("invalid header values", 1, src)
    payload = data[nl + 1:]
    if len(payload) != 4 * p * p * F:
        raise ParseError(f"expected {4 * p * p * F} payload bytes, got {len(payload)}", 2, src)
    return (x, y), np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(p, p, F)


def write_score_map(path, scores: np.ndarray) -> None:
    """Full-image scores: header ``SCOREMAP <width> <height> <F>`` then float32 LE."""
    h, w, F = scores.shape
    with open(path, "wb") as fh:
        fh.write(f"SCOREMAP {w} {h} {F}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(scores, dtype="<f4").tobytes())


def read_score_map(path) -> np.ndarray:
    src = str(path)
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    tok = data[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
    if len(tok) != 4 or tok[0] != "SCOREMAP":
        raise ParseError("expected header 'SCOREMAP <width> <height> <F>'", 1, src)
    w, h, F = (int(t) for t in tok[1:])
    payload = data[nl + 1:]
    if len(payload) != 4 * w * h * F:
        raise ParseError("payload size mismatch", 2, src)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, F)
