"""Trial scoring and verification metrics: cosine scores, EER, AUC and DET points."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata


def cosine_score(z1: np.ndarray, z2: np.ndarray) -> float:
    z1 = np.asarray(z1, dtype=np.float64).ravel()
    z2 = np.asarray(z2, dtype=np.float64).ravel()
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine score is undefined for a zero-norm embedding")
    return float(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0))


def _split(scores, targets) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=bool)
    if scores.shape != targets.shape:
        raise ValueError("scores and targets differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos, neg = scores[targets], scores[~targets]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one target and one non-target trial")
    return pos, neg


def det_curve(scores, targets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) for accept-iff-score>=threshold.

    Thresholds are -inf, every distinct score in increasing order, then +inf,
    so the curve runs from (FAR 1, FRR 0) to (FAR 0, FRR 1).
    """
    pos, neg = _split(scores, targets)
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]])
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    frr = np.searchsorted(pos_sorted, thr, side="left") / pos.size
    far = (neg.size - np.searchsorted(neg_sorted, thr, side="left")) / neg.size
    return thr, far, frr


def compute_eer(scores, targets) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The ROC is stepped through the distinct thresholds; where FRR - FAR
    changes sign the two neighbouring points are joined linearly.
    """
    thr, far, frr = det_curve(scores, targets)
    diff = frr - far
    i = int(np.argmax(diff >= 0))  # diff ends at +1, so a crossing always exists
    if i == 0 or diff[i] == 0:
        t = thr[i] if np.isfinite(thr[i]) else thr[min(max(i, 1), thr.size - 2)]
        return float(far[i]), float(t)
    a = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + a * (far[i] - far[i - 1])
    lo = thr[i - 1] if np.isfinite(thr[i - 1]) else thr[i]
    hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    return float(eer), float(lo + a * (hi - lo))


def compute_auc(scores, targets) -> float:
    """Mann-Whitney estimate: P(target score > non-target score) + P(tie) / 2."""
    pos, neg = _split(scores, targets)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def det_curve_export(scores, targets, path: Union[str, Path]) -> None:
    """CSV ``threshold,far,frr``, one row per distinct threshold plus both endpoints."""
    thr, far, frr = det_curve(scores, targets)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thr, far, frr):
            writer.writerow([repr(float(t)), repr(float(a)), repr(float(r))])


def score_trials(
    trials: Sequence[tuple[str, str, bool]],
    embeddings: Mapping[str, np.ndarray],
    enroll_sets: Optional[Mapping[str, Sequence[str]]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-score each (enroll, test, target) row.

    Scoring is pairwise by default. With ``enroll_sets`` the enrollment side
    becomes the mean of the length-normalized embeddings listed for that
    enrollment id.
    """
    scores = np.empty(len(trials))
    targets = np.empty(len(trials), dtype=bool)
    for i, (enroll, test, target) in enumerate(trials):
        if enroll_sets is not None and enroll in enroll_sets:
            vecs = [embeddings[u] / np.linalg.norm(embeddings[u]) for u in enroll_sets[enroll]]
            e = np.mean(vecs, axis=0)
        else:
            e = embeddings[enroll]
        scores[i] = cosine_score(e, embeddings[test])
        targets[i] = bool(target)
    return scores, targets


def metrics_report(scores, targets) -> dict:
    eer, threshold = compute_eer(scores, targets)
    return {
        "eer": eer,
        "eer_threshold": threshold,
        "auc": compute_auc(scores, targets),
        "n_trials": int(len(scores)),
    }


def write_metrics_json(path: Union[str, Path], report: Mapping) -> None:
    Path(path).write_text(json.dumps(dict(report), sort_keys=True, indent=2) + "\n")
