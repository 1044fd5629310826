"""Correspondence losses, supervised cross-entropy and evaluation helpers.

All kernels are plain numpy and return analytic gradients with the same
shape as the feature grids they consume. Pixel positions are mapped to grid
cells with ``floor((coord + 0.5) / stride)`` clamped to the grid (nearest
cell, no interpolation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple

import numpy as np

from .dataset_io import CorrespondenceSample

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
NONSTATIONARY_NAMES = ("person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle")
CITYSCAPES_NONSTATIONARY: FrozenSet[int] = frozenset(
    CITYSCAPES_CLASSES.index(n) for n in NONSTATIONARY_NAMES
)
IGNORE_LABEL = 255
FEATURE_KINDS = ("logits", "probabilities", "features")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense H x W x F grid; image pixel p falls in cell floor((p + 0.5) / stride)."""

    values: np.ndarray
    kind: str = "features"
    stride: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("feature map values must be H x W x F")
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if int(self.stride) < 1:
            raise ValueError("stride must be >= 1")
        if self.kind == "probabilities":
            if np.any(v < 0) or np.any(np.abs(v.sum(axis=2) - 1.0) > 1e-9):
                raise ValueError("probability maps must be nonnegative and sum to 1 per pixel")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    def cells(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of the grid cells holding continuous pixels ``xy``."""
        return grid_cells(xy, self.stride, self.width, self.height)


def grid_cells(xy, stride: int, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    c = np.floor((xy + 0.5) / stride).astype(np.int64)
    return np.clip(c[:, 1], 0, height - 1), np.clip(c[:, 0], 0, width - 1)


@dataclass(frozen=True)
class CorrLossConfig:
    margin: float = 0.8
    lam: float = 1.0
    warmup_iters: int = 500
    nonstationary_classes: FrozenSet[int] = field(default=CITYSCAPES_NONSTATIONARY)
    epsilon_norm: float = 1e-12
    epsilon_log: float = 1e-12

    def __post_init__(self):
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [-1, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be nonnegative")


# Parameter-study optima: 1.0 for CE and hinge on the final layer,
# 0.1 for hinge on the second-to-last features.
CE_CONFIG = CorrLossConfig(lam=1.0)
HINGE_FINAL_CONFIG = CorrLossConfig(lam=1.0)
HINGE_FEATURE_CONFIG = CorrLossConfig(lam=0.1)


def _check_pair(ref: FeatureMap, tgt: FeatureMap, sample: CorrespondenceSample):
    if ref.depth != tgt.depth:
        raise ValueError(f"feature depth mismatch: {ref.depth} vs {tgt.depth}")
    if sample.n == 0:
        raise ValueError("sample has no correspondences")


def margin_angle_deg(margin: float) -> float:
    """Angle between feature vectors at which the hinge switches off."""
    if not -1.0 <= margin <= 1.0:
        raise ValueError("margin must lie in [-1, 1]")
    return math.degrees(math.acos(margin))


def _cosines(a, b, eps):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    degenerate = (na < eps) | (nb < eps)
    denom = np.where(degenerate, 1.0, na * nb)
    cos = np.where(degenerate, 0.0, np.einsum("ij,ij->i", a, b) / denom)
    return cos, na, nb, degenerate


def hinge_corr_loss(ref: FeatureMap, tgt: FeatureMap, sample: CorrespondenceSample,
                    m: float = 0.8, epsilon_norm: float = 1e-12):
    """Mean over pairs of ``max(0, m - cos(d_ref, d_tgt))``.

    A pair with a (near) zero feature vector contributes ``max(0, m)`` and no
    gradient. At exactly ``cos == m`` the hinge is treated as inactive.

    Returns:
        ``(loss, grad_ref, grad_tgt)``; gradients have the shape of the
        respective ``values`` arrays.
    """
    _check_pair(ref, tgt, sample)
    n = sample.n
    rr, rc = ref.cells(sample.x_ref)
    tr, tc = tgt.cells(sample.x_tgt)
    a = ref.values[rr, rc]
    b = tgt.values[tr, tc]
    cos, na, nb, degenerate = _cosines(a, b, epsilon_norm)
    terms = np.where(degenerate, max(0.0, m), np.maximum(0.0, m - cos))
    loss = float(np.sum(terms) / n)

    active = (~degenerate) & (m - cos > 0)
    grad_ref = np.zeros_like(ref.values)
    grad_tgt = np.zeros_like(tgt.values)
    if np.any(active):
        a, b = a[active], b[active]
        cos, na, nb = cos[active, None], na[active, None], nb[active, None]
        dcos_da = b / (na * nb) - cos * a / (na * na)
        dcos_db = a / (na * nb) - cos * b / (nb * nb)
        np.add.at(grad_ref, (rr[active], rc[active]), -dcos_da / n)
        np.add.at(grad_tgt, (tr[active], tc[active]), -dcos_db / n)
    return loss, grad_ref, grad_tgt


def hinge_diagnostics(ref: FeatureMap, tgt: FeatureMap, sample: CorrespondenceSample,
                      m: float = 0.8, epsilon_norm: float = 1e-12) -> dict:
    _check_pair(ref, tgt, sample)
    rr, rc = ref.cells(sample.x_ref)
    tr, tc = tgt.cells(sample.x_tgt)
    cos, _, _, degenerate = _cosines(ref.values[rr, rc], tgt.values[tr, tc], epsilon_norm)
    valid = cos[~degenerate]
    return {
        "margin": m,
        "margin_angle_deg": margin_angle_deg(m),
        "n_pairs": sample.n,
        "n_degenerate": int(degenerate.sum()),
        "n_active": int(np.sum(m - valid > 0)),
        "mean_cos": float(valid.mean()) if valid.size else float("nan"),
    }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_corr_loss(ref_final: FeatureMap, tgt_final: FeatureMap, sample: CorrespondenceSample,
                 epsilon_log: float = 1e-12):
    """Cross-entropy of the target softmax against the reference argmax class.

    The argmax (ties to the lowest class) is a constant, so only the target
    logits receive a gradient. Where the target probability falls below
    ``epsilon_log`` the clamped term is flat and its gradient is zero.

    Returns:
        ``(loss, grad_tgt_logits)``.
    """
    _check_pair(ref_final, tgt_final, sample)
    n = sample.n
    rr, rc = ref_final.cells(sample.x_ref)
    tr, tc = tgt_final.cells(sample.x_tgt)
    cls = np.argmax(ref_final.values[rr, rc], axis=1)
    ls = log_softmax(tgt_final.values[tr, tc])
    log_p = ls[np.arange(n), cls]
    log_eps = math.log(epsilon_log)
    clamped = log_p < log_eps
    loss = float(-np.sum(np.maximum(log_p, log_eps)) / n)

    g = np.exp(ls)
    g[np.arange(n), cls] -= 1.0
    g[clamped] = 0.0
    grad = np.zeros_like(tgt_final.values)
    np.add.at(grad, (tr, tc), g / n)
    return loss, grad


def supervised_ce_loss(pred: FeatureMap, labels: np.ndarray, ignore_index: int = IGNORE_LABEL):
    """Pixel-averaged softmax cross-entropy against an image-resolution label map.

    Each labelled pixel reads the logits of its grid cell. If every pixel is
    ignored the loss is 0 with a zero gradient.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D grid")
    s = pred.stride
    h, w = labels.shape
    if (-(-h // s), -(-w // s)) != (pred.height, pred.width):
        raise ValueError(f"{h}x{w} labels at stride {s} do not match a "
                         f"{pred.height}x{pred.width} prediction grid")
    grad = np.zeros_like(pred.values)
    vv, uu = np.nonzero(labels != ignore_index)
    if vv.size == 0:
        return 0.0, grad
    lab = labels[vv, uu].astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= pred.depth):
        raise ValueError("label outside [0, n_classes) that is not the ignore index")
    rows, cols = grid_cells(np.stack([uu, vv], axis=1), s, pred.width, pred.height)
    ls = log_softmax(pred.values[rows, cols])
    k = len(lab)
    loss = float(-np.sum(ls[np.arange(k), lab]) / k)
    g = np.exp(ls)
    g[np.arange(k), lab] -= 1.0
    np.add.at(grad, (rows, cols), g / k)
    return loss, grad


def total_loss(l_sup: float, l_corr: float, lam: float) -> float:
    """``(L_sup + lam * L_corr) / (1 + lam)``: total weight stays at one."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return l_sup
    return (l_sup + lam * l_corr) / (1.0 + lam)


def warmup_gate(iteration: int, cfg: CorrLossConfig = CorrLossConfig()) -> float:
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return 0.0 if iteration < cfg.warmup_iters else cfg.lam


def filter_nonstationary(sample: CorrespondenceSample, ref_pred: np.ndarray,
                         forbidden: Iterable[int] = CITYSCAPES_NONSTATIONARY,
                         stride: int = 1) -> CorrespondenceSample:
    """Drop pairs whose reference pixel is predicted as a movable class.

    ``ref_pred`` is the per-cell argmax class grid of the reference image.
    """
    ref_pred = np.asarray(ref_pred)
    if sample.n == 0:
        return sample
    rows, cols = grid_cells(sample.x_ref, stride, ref_pred.shape[1], ref_pred.shape[0])
    bad = np.isin(ref_pred[rows, cols], np.fromiter(forbidden, dtype=np.int64))
    return sample.subset(np.nonzero(~bad)[0])


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n_classes: int,
                     ignore_index: int = IGNORE_LABEL) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    keep = gt != ignore_index
    gt, pred = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes)


def mean_iou(confusion: np.ndarray, present: Optional[Iterable[int]] = None) -> float:
    """Mean IoU over the ``present`` classes only (all classes by default).

    A present class with an empty union scores 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion counts must be nonnegative")
    cls = np.arange(cm.shape[0]) if present is None else np.array(sorted(set(present)), dtype=np.int64)
    if cls.size == 0:
        raise ValueError("no present classes")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    return float(iou[cls].mean())
