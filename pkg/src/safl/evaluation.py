"""Precision/recall evaluation of loop-closure proposals against ground truth.

A proposal is accepted at threshold theta when its match score is at most
theta (lower scores mean more confident matches).  Ground truth is planar:
a query truly revisits a reference when their poses lie within d_thresh
meters in the x-y plane.

Counting convention: the positive population P is the set of in-context
queries that have at least one reference within d_thresh; the negative
population N is the set of queries whose proposal is false.  At a threshold,
TP are accepted true proposals, FP accepted false proposals, FN = |P| - TP
and TN = |N| - FP, so TP + FN is constant across thresholds.  Precision is
TP / (TP + FP), defined as 1 when nothing is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Pose
from .matching import MatchResult


class MissingPose(KeyError):
    """Raised when a match references a frame with no pose."""


class NoPositives(ValueError):
    """Raised when the ground truth contains no true loop closures."""


class DegenerateLabels(ValueError):
    """Raised when ROC analysis gets only one label class."""


@dataclass(frozen=True)
class EvalConfig:
    d_thresh: float = 10.0
    n_thresholds: int = 200  # exported curve density cap


@dataclass(eq=False)
class LabeledMatches:
    """Scored proposals with ground-truth labels and population sizes."""

    query_ids: np.ndarray
    scores: np.ndarray
    is_true: np.ndarray
    n_positive: int  # queries with some true reference within d_thresh
    n_negative: int  # queries whose proposal is false


def label_matches(matches: list[MatchResult], query_poses: list[Pose],
                  reference_poses: list[Pose],
                  config: EvalConfig = EvalConfig()) -> LabeledMatches:
    """Label each valid proposal and count the ground-truth populations.

    Poses are indexed by position: query i of a MatchResult uses
    query_poses[i], reference j uses reference_poses[j].
    """
    ref_xy = np.array([p.translation[:2] for p in reference_poses])
    ids, scores, is_true = [], [], []
    n_positive = 0
    for m in matches:
        if not m.valid:
            continue
        if not 0 <= m.query_id < len(query_poses):
            raise MissingPose(f"no pose for query {m.query_id}")
        if not 0 <= m.match_id < len(reference_poses):
            raise MissingPose(f"no pose for reference {m.match_id}")
        q_xy = query_poses[m.query_id].translation[:2]
        dists = np.linalg.norm(ref_xy - q_xy, axis=1)
        if dists.min() <= config.d_thresh:
            n_positive += 1
        ids.append(m.query_id)
        scores.append(m.ratio)
        is_true.append(dists[m.match_id] <= config.d_thresh)
    is_true = np.asarray(is_true, dtype=bool)
    return LabeledMatches(
        query_ids=np.asarray(ids),
        scores=np.asarray(scores, dtype=np.float64),
        is_true=is_true,
        n_positive=n_positive,
        n_negative=int((~is_true).sum()),
    )


def _cumulative_counts(scores: np.ndarray, is_true: np.ndarray):
    """TP and FP counts at each distinct score threshold (ascending)."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    t = is_true[order].astype(np.int64)
    tp = np.cumsum(t)
    fp = np.cumsum(1 - t)
    last = np.r_[s[1:] != s[:-1], True]  # last index of each distinct score
    return s[last], tp[last], fp[last]


def pr_curve(labeled: LabeledMatches, config: EvalConfig = EvalConfig()):
    """Precision/recall sweep over the proposal scores.

    Returns (points, recall_at_full_precision) where points is a list of
    (threshold, precision, recall) at each distinct score, subsampled down to
    config.n_thresholds points for export if needed.
    """
    if labeled.n_positive == 0:
        raise NoPositives("ground truth contains no loop closures")
    thresholds, tp, fp = _cumulative_counts(labeled.scores, labeled.is_true)
    precision = tp / np.maximum(tp + fp, 1)
    precision[tp + fp == 0] = 1.0
    recall = tp / labeled.n_positive
    full = precision >= 1.0
    recall_at_full_precision = float(recall[full].max()) if full.any() else 0.0
    idx = np.arange(len(thresholds))
    if len(idx) > config.n_thresholds:
        idx = np.unique(
            np.linspace(0, len(idx) - 1, config.n_thresholds).round().astype(int)
        )
    points = [
        (float(thresholds[i]), float(precision[i]), float(recall[i]))
        for i in idx
    ]
    return points, recall_at_full_precision


def roc_curve(labeled: LabeledMatches, config: EvalConfig = EvalConfig()):
    """ROC sweep and its trapezoidal area.

    TPR uses the positive population, FPR the negative one.  Returns
    (points, auc) with points of (threshold, fpr, tpr); the curve is anchored
    at (0, 0) and (1, 1).
    """
    if labeled.n_positive == 0 or labeled.n_negative == 0:
        raise DegenerateLabels(
            f"need both populations, got P={labeled.n_positive} "
            f"N={labeled.n_negative}"
        )
    thresholds, tp, fp = _cumulative_counts(labeled.scores, labeled.is_true)
    tpr = tp / labeled.n_positive
    fpr = fp / labeled.n_negative
    fpr_full = np.r_[0.0, fpr, 1.0]
    tpr_full = np.r_[0.0, tpr, 1.0]
    auc = float(np.trapezoid(tpr_full, fpr_full))
    idx = np.arange(len(thresholds))
    if len(idx) > config.n_thresholds:
        idx = np.unique(
            np.linspace(0, len(idx) - 1, config.n_thresholds).round().astype(int)
        )
    points = [
        (float(thresholds[i]), float(fpr[i]), float(tpr[i])) for i in idx
    ]
    return points, auc


@dataclass(eq=False)
class EvalReport:
    """Evaluation summary for one method under one noise setting."""

    pr_points: list
    roc_points: list
    auc: float
    recall_at_full_precision: float
    n_positive: int
    n_negative: int
    n_proposals: int
    metadata: dict = field(default_factory=dict)


def evaluate(matches: list[MatchResult], query_poses, reference_poses,
             config: EvalConfig = EvalConfig(), **metadata) -> EvalReport:
    """Label proposals and compute both curves in one go."""
    labeled = label_matches(matches, query_poses, reference_poses, config)
    pr_points, recall_full = pr_curve(labeled, config)
    roc_points, auc = roc_curve(labeled, config)
    meta = {"d_thresh": config.d_thresh, **metadata}
    return EvalReport(
        pr_points=pr_points, roc_points=roc_points, auc=auc,
        recall_at_full_precision=recall_full, n_positive=labeled.n_positive,
        n_negative=labeled.n_negative, n_proposals=len(labeled.scores),
        metadata=meta,
    )


def compare_methods(reports: dict, baseline: str) -> list[dict]:
    """Tabulate AUC and recall-at-full-precision per method and setting.

    reports maps method name -> {setting name -> EvalReport}.  Each row also
    carries the AUC ratio against the named baseline in the same setting.
    """
    if baseline not in reports:
        raise KeyError(f"baseline {baseline!r} not among {sorted(reports)}")
    rows = []
    for method in sorted(reports):
        for setting in sorted(reports[method]):
            report = reports[method][setting]
            base = reports[baseline].get(setting)
            rows.append({
                "method": method,
                "setting": setting,
                "auc": report.auc,
                "recall_at_full_precision": report.recall_at_full_precision,
                "auc_vs_baseline": (
                    report.auc / base.auc if base and base.auc > 0 else np.inf
                ),
            })
    return rows


def storage_projection(rate_hz: float = 5.0, hours: float = 24.0,
                       bytes_per_frame: int = 4096) -> dict:
    """Feature-bank size projection for continuous operation."""
    frames = int(round(rate_hz * hours * 3600))
    total = frames * bytes_per_frame
    return {
        "frames": frames,
        "bytes_per_frame": bytes_per_frame,
        "total_bytes": total,
        "gib": total / 2 ** 30,
    }
