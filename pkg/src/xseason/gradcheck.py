"""Central finite-difference checks for the loss kernels.

Relative error of a gradient is ``max|g_analytic - g_numeric|`` over the
checked entries divided by the largest magnitude of either gradient on those
entries (absolute error when both vanish).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .dataset_io import CorrespondenceSample
from .losses import FeatureMap, ce_corr_loss, hinge_corr_loss, supervised_ce_loss

FD_STEP = 1e-6
FEATURE_DEPTHS = (3, 19, 64)
PAIR_COUNTS = (1, 7, 50)
MAX_ENTRIES = 256


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    return err / scale if scale > 0 else err


def numeric_gradient(f: Callable[[], float], values: np.ndarray, entries, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``values[entries]``, perturbing in place."""
    out = np.empty(len(entries))
    for k, e in enumerate(entries):
        old = values[e]
        values[e] = old + h
        fp = f()
        values[e] = old - h
        fm = f()
        values[e] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def _entries(values: np.ndarray, touched_cells, rng, limit=MAX_ENTRIES):
    """Entries to probe: a sample of touched cells' channels plus a few untouched ones."""
    h, w, f = values.shape
    touched = [(r, c, k) for (r, c) in sorted(set(touched_cells)) for k in range(f)]
    if len(touched) > limit:
        pick = rng.choice(len(touched), size=limit, replace=False)
        touched = [touched[i] for i in np.sort(pick)]
    others = [tuple(int(x) for x in rng.integers((h, w, f))) for _ in range(8)]
    return touched + others


@dataclass
class CheckResult:
    kernel: str
    instances: int
    max_rel_error: float

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def _random_sample(rng, n, w, h, stride):
    size = (w * stride, h * stride)
    xr = rng.uniform(0, 1, (n, 2)) * np.array(size) * 0.999
    xt = rng.uniform(0, 1, (n, 2)) * np.array(size) * 0.999
    return CorrespondenceSample("r", "t", "check", xr, xt, ref_size=size, tgt_size=size)


def _hinge_instance(rng, F, n, margin=0.8):
    while True:
        h, w, stride = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 3))
        ref = FeatureMap(rng.normal(size=(h, w, F)), stride=stride)
        tgt = FeatureMap(rng.normal(size=(h, w, F)), stride=stride)
        if F <= 3:
            # small F makes cos ~ m common; bias toward mixed activity
            tgt = FeatureMap(tgt.values + 0.8 * ref.values, stride=stride)
        sample = _random_sample(rng, n, w, h, stride)
        rr, rc = ref.cells(sample.x_ref)
        tr, tc = tgt.cells(sample.x_tgt)
        a, b = ref.values[rr, rc], tgt.values[tr, tc]
        cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        if np.all(np.abs(cos - margin) > 1e-4):
            return ref, tgt, sample


def check_hinge(rng, F, n, margin=0.8) -> float:
    ref, tgt, sample = _hinge_instance(rng, F, n, margin)
    _, g_ref, g_tgt = hinge_corr_loss(ref, tgt, sample, margin)
    loss = lambda: hinge_corr_loss(ref, tgt, sample, margin)[0]  # noqa: E731
    errs = []
    for fm, g, xy in ((ref, g_ref, sample.x_ref), (tgt, g_tgt, sample.x_tgt)):
        rows, cols = fm.cells(xy)
        ent = _entries(fm.values, zip(rows.tolist(), cols.tolist()), rng)
        num = numeric_gradient(loss, fm.values, ent)
        errs.append(relative_error(np.array([g[e] for e in ent]), num))
    return max(errs)


def check_ce_corr(rng, F, n) -> float:
    h, w, stride = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 3))
    ref = FeatureMap(rng.normal(scale=2.0, size=(h, w, F)), kind="logits", stride=stride)
    tgt = FeatureMap(rng.normal(scale=2.0, size=(h, w, F)), kind="logits", stride=stride)
    sample = _random_sample(rng, n, w, h, stride)
    _, g = ce_corr_loss(ref, tgt, sample)
    loss = lambda: ce_corr_loss(ref, tgt, sample)[0]  # noqa: E731
    rows, cols = tgt.cells(sample.x_tgt)
    ent = _entries(tgt.values, zip(rows.tolist(), cols.tolist()), rng)
    num = numeric_gradient(loss, tgt.values, ent)
    return relative_error(np.array([g[e] for e in ent]), num)


def check_supervised_ce(rng, F, n) -> float:
    """``n`` sets the number of labelled pixels."""
    stride = int(rng.integers(1, 3))
    gh, gw = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    pred = FeatureMap(rng.normal(scale=2.0, size=(gh, gw, F)), kind="logits", stride=stride)
    labels = np.full((gh * stride, gw * stride), 255, dtype=np.int64)
    flat = rng.choice(labels.size, size=min(n, labels.size), replace=False)
    labels.ravel()[flat] = rng.integers(0, F, size=flat.size)
    _, g = supervised_ce_loss(pred, labels)
    loss = lambda: supervised_ce_loss(pred, labels)[0]  # noqa: E731
    vv, uu = np.unravel_index(flat, labels.shape)
    cells = zip((np.floor((vv + 0.5) / stride)).astype(int).tolist(),
                (np.floor((uu + 0.5) / stride)).astype(int).tolist())
    ent = _entries(pred.values, [(min(r, gh - 1), min(c, gw - 1)) for r, c in cells], rng)
    num = numeric_gradient(loss, pred.values, ent)
    return relative_error(np.array([g[e] for e in ent]), num)


KERNEL_CHECKS = {
    "hinge_corr_loss": check_hinge,
    "ce_corr_loss": check_ce_corr,
    "supervised_ce_loss": check_supervised_ce,
}


def run_suite(seed: int = 0, reps: int = 12, kernels=None) -> List[CheckResult]:
    """Check every kernel on ``reps`` instances per (F, N) combination."""
    results = []
    for name in kernels or KERNEL_CHECKS:
        check = KERNEL_CHECKS[name]
        rng = np.random.default_rng([seed, list(KERNEL_CHECKS).index(name)])
        worst, count = 0.0, 0
        for (F, n), _ in itertools.product(itertools.product(FEATURE_DEPTHS, PAIR_COUNTS), range(reps)):
            worst = max(worst, check(rng, F, n))
            count += 1
        results.append(CheckResult(name, count, worst))
    return results
