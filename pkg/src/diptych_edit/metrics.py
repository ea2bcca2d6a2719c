"""Image metrics and the procedural success criterion.

``feat_sim`` stands in for CLIP-I/DINO similarity: images are average-pooled
4x, flattened, mean-centered and pushed through a fixed random orthogonal
projection (seed :data:`FEATURE_SEED`, half the pooled dimension), then
compared by cosine. ``sc_score``/``pq_score`` are deterministic desk-scale
analogs of the VIE semantic-consistency and perceptual-quality scores on a
0-10 scale.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .data.palette import BACKGROUNDS, COLORS, luminance
from .data.scenes import EditPair

FEATURE_SEED = 20240501
POOL = 4
TASK_TOL = 0.1
KEEP_TOL = 0.05
# Inclusive bounds get this much slack so float32 storage of a value sitting
# exactly on the tolerance still counts as inside.
_SLACK = 1e-6


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1(a, b, region=None) -> float:
    """Mean absolute difference, optionally over a boolean (H, W) region (0.0 if empty)."""
    a, b = _check_pair(a, b)
    d = np.abs(a - b)
    if region is None:
        return float(d.mean())
    region = np.asarray(region, dtype=bool)
    if region.shape != a.shape[:2]:
        raise ValueError(f"region {region.shape} does not match image {a.shape[:2]}")
    if not region.any():
        return 0.0
    return float(d[region].mean())


@lru_cache(maxsize=None)
def _projection(dim: int) -> np.ndarray:
    rng = np.random.default_rng(FEATURE_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[: max(1, dim // 2)]


def features(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    pooled = img.reshape(h // POOL, POOL, w // POOL, POOL, c).mean(axis=(1, 3)).ravel()
    pooled = pooled - pooled.mean()
    return _projection(pooled.size) @ pooled


def feat_sim(a, b) -> float:
    a, b = _check_pair(a, b)
    fa, fb = features(a), features(b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(fa @ fb / (na * nb), -1.0, 1.0))


def keep_region(pair: EditPair) -> np.ndarray:
    return ~np.asarray(pair.edit_region_mask, dtype=bool)


def task_error(result, pair: EditPair) -> float:
    """Deviation measured by the task predicate (compared against ``TASK_TOL``)."""
    result = np.asarray(result, dtype=np.float64)
    focus = pair.focus_mask if pair.focus_mask is not None else pair.edit_region_mask
    focus = np.asarray(focus, dtype=bool)
    t = pair.task_type
    if t == "attribute_mod":
        # Mean color over the object's footprint, worst channel.
        want = np.asarray(pair.target, dtype=np.float64)[focus].mean(axis=0)
        got = result[focus].mean(axis=0)
        return float(np.abs(got - want).max())
    if t in ("removal", "addition", "swap", "style"):
        return l1(result, pair.target, focus)
    raise ValueError(f"unknown task type {t!r}")


def edit_success(result, pair: EditPair, tol: float = TASK_TOL, keep_tol: float = KEEP_TOL) -> bool:
    """Task predicate met (<= tol) and region outside the edit preserved (<= keep_tol)."""
    if pair.target is None:
        raise ValueError("pair has no ground truth")
    ok_task = task_error(result, pair) <= tol + _SLACK
    ok_keep = l1(result, pair.source, keep_region(pair)) <= keep_tol + _SLACK
    return bool(ok_task and ok_keep)


def vie_overall(sc: float, pq: float) -> float:
    if not (0.0 <= sc <= 10.0 and 0.0 <= pq <= 10.0):
        raise ValueError(f"scores must lie in [0, 10], got sc={sc}, pq={pq}")
    return math.sqrt(sc * pq)


def binarize_sc(sc: float, threshold: float = 5.0) -> float:
    if not 0.0 < threshold <= 10.0:
        raise ValueError(f"threshold {threshold} outside (0, 10]")
    return 1.0 if sc >= threshold else 0.0


def sc_score(result, pair: EditPair) -> float:
    edit_err = l1(result, pair.target, pair.edit_region_mask)
    keep_err = l1(result, pair.source, keep_region(pair))
    return 10.0 * max(0.0, 1.0 - 2.0 * edit_err) * max(0.0, 1.0 - 2.0 * keep_err)


@lru_cache(maxsize=1)
def _palette() -> np.ndarray:
    base = np.array(list(COLORS.values()) + list(BACKGROUNDS.values()), dtype=np.float64)
    gray = np.repeat(luminance(base)[:, None], 3, axis=1)
    return np.concatenate([base, gray, 1.0 - base])


def pq_score(result) -> float:
    """10 when every pixel sits on a palette color, falling with mean off-palette distance."""
    px = np.asarray(result, dtype=np.float64).reshape(-1, 3)
    dist = np.abs(px[:, None, :] - _palette()[None]).mean(-1).min(-1)
    return 10.0 * max(0.0, 1.0 - 4.0 * float(dist.mean()))
