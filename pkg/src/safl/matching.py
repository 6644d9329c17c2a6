"""Sequence matching of feature streams against a reference bank.

A query frame is matched by sweeping straight trajectories through the
feature difference matrix: for each candidate reference index j and relative
velocity v, the score is the mean of dm[i + s, round(j + v * s)] over the
in-bounds offsets s in [-ds, ds].  The best-scoring reference wins; match
quality is the ratio of the best score to the best score outside an exclusion
window around the winner (lower is better).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


class DimensionMismatch(ValueError):
    """Raised when feature vectors of different dimensions are compared."""


class InsufficientContext(ValueError):
    """Raised when a query lacks the sequence context needed for matching."""


def feature_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between two feature vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature dims {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


def sad_feature(image: np.ndarray, downsample: int = 2,
                patch: int = 8) -> np.ndarray:
    """Classic appearance descriptor of a top-view image.

    The image is block-mean downsampled, split into patch x patch tiles, and
    each tile is standardized (zero mean, unit variance; all-constant tiles
    become zero).  Distances between these descriptors use the sum of
    absolute differences.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got {img.shape}")
    h, w = img.shape
    if h % downsample or w % downsample:
        raise ValueError(f"{img.shape} not divisible by downsample {downsample}")
    small = img.reshape(
        h // downsample, downsample, w // downsample, downsample
    ).mean(axis=(1, 3))
    sh, sw = small.shape
    if sh % patch or sw % patch:
        raise ValueError(f"downsampled {small.shape} not divisible by {patch}")
    tiles = small.reshape(sh // patch, patch, sw // patch, patch)
    mean = tiles.mean(axis=(1, 3), keepdims=True)
    std = tiles.std(axis=(1, 3), keepdims=True)
    # constant tiles are detected by exact peak-to-peak: rounding noise in the
    # block means can leave std at ~1e-16, which must not be standardized by
    spread = (tiles.max(axis=(1, 3), keepdims=True)
              - tiles.min(axis=(1, 3), keepdims=True))
    normed = np.where(
        spread > 0, (tiles - mean) / np.where(std > 0, std, 1.0), 0.0
    )
    return normed.reshape(sh, sw).astype(np.float32).ravel()


def sad_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of absolute differences between two descriptors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature dims {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def difference_matrix(queries: np.ndarray, references: np.ndarray,
                      metric: str = "sqeuclidean") -> np.ndarray:
    """All pairwise feature differences, queries down the rows."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    r = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if q.shape[1] != r.shape[1]:
        raise DimensionMismatch(f"feature dims {q.shape[1]} vs {r.shape[1]}")
    if metric == "sqeuclidean":
        dm = cdist(q, r, "sqeuclidean")
    elif metric == "sad":
        dm = cdist(q, r, "cityblock")
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return dm.astype(np.float32)


def enhance_contrast(dm: np.ndarray, r_window: int = 10) -> np.ndarray:
    """Standardize each entry against its local window along the reference axis."""
    dm = np.asarray(dm, dtype=np.float64)
    out = np.empty_like(dm)
    half = r_window // 2
    cols = dm.shape[1]
    for j in range(cols):
        lo, hi = max(0, j - half), min(cols, j + half + 1)
        window = dm[:, lo:hi]
        mu = window.mean(axis=1)
        sd = window.std(axis=1)
        out[:, j] = (dm[:, j] - mu) / np.where(sd > 0, sd, 1.0)
    return out.astype(np.float32)


@dataclass(frozen=True)
class SeqMatchConfig:
    """Sequence-sweep parameters."""

    ds: int = 10
    v_min: float = 0.8
    v_max: float = 1.2
    v_step: float = 0.1
    exclusion_window: int = 20
    contrast_enhance: bool = False
    r_window: int = 10

    def velocities(self) -> np.ndarray:
        count = int(round((self.v_max - self.v_min) / self.v_step)) + 1
        return self.v_min + self.v_step * np.arange(count)


@dataclass(frozen=True)
class MatchResult:
    """Best reference for one query; valid is False when context was missing."""

    query_id: int
    match_id: int
    score: float
    ratio: float
    valid: bool = True


def _sweep_scores(dm: np.ndarray, i: int, cfg: SeqMatchConfig) -> np.ndarray:
    """Best trajectory score per reference index for query row i."""
    rows, cols = dm.shape
    j = np.arange(cols)
    offsets = np.arange(-cfg.ds, cfg.ds + 1)
    velocities = cfg.velocities()
    best = np.full(cols, np.inf)
    for v in velocities:
        total = np.zeros(cols)
        count = np.zeros(cols)
        for s in offsets:
            row = i + s
            if row < 0 or row >= rows:
                continue
            ref = np.round(j + v * s).astype(np.int64)
            ok = (ref >= 0) & (ref < cols)
            total[ok] += dm[row, ref[ok]]
            count[ok] += 1
        score = np.where(count > 0, total / np.maximum(count, 1), np.inf)
        best = np.minimum(best, score)
    return best


def sequence_match(dm: np.ndarray, config: SeqMatchConfig = SeqMatchConfig(),
                   query_ids=None) -> list[MatchResult]:
    """Match every query row of a difference matrix against the references.

    Queries closer than ds to either end of the stream lack sequence context
    and come back with valid=False instead of a match.  Ties prefer the
    smallest reference index, then the smallest velocity.  The ratio
    denominator is the best score at least exclusion_window away from the
    winner (a lone-candidate query gets ratio 1).
    """
    dm = np.asarray(dm, dtype=np.float64)
    if dm.ndim != 2:
        raise ValueError(f"difference matrix must be 2-D, got {dm.shape}")
    rows, cols = dm.shape
    if rows < 2 * config.ds + 1:
        raise InsufficientContext(
            f"{rows} query rows cannot support ds={config.ds}"
        )
    if config.contrast_enhance:
        dm = enhance_contrast(dm, config.r_window).astype(np.float64)
    ids = np.arange(rows) if query_ids is None else np.asarray(query_ids)

    results = []
    for i in range(rows):
        if i < config.ds or i >= rows - config.ds:
            results.append(
                MatchResult(int(ids[i]), -1, np.nan, np.nan, valid=False)
            )
            continue
        scores = _sweep_scores(dm, i, config)
        best_j = int(np.argmin(scores))
        best = float(scores[best_j])
        outside = np.abs(np.arange(cols) - best_j) > config.exclusion_window
        if outside.any():
            second = float(scores[outside].min())
        else:
            second = best
        if second > 0:
            ratio = best / second
        else:
            ratio = 1.0 if best == 0 else np.inf
        results.append(MatchResult(int(ids[i]), best_j, best, float(ratio)))
    return results
