"""Semantic IoU and a simplified instance AP.

IoU is accumulated over the whole evaluation set (sum of intersections over
sum of unions per class).  Instance AP treats each 4-connected component of a
binarised class map as one predicted instance, scored by its mean
probability, and greedily matches predictions to ground-truth instances by
mask IoU.  This AP is only comparable within this package; it is not the
vectorised Chamfer AP used for published HD-map benchmarks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..scenegen import CLASSES

AP_THRESHOLDS = (0.25, 0.5, 0.75)
SHORT = ("ped", "div", "bou")
REPORT_COLUMNS = (["name"] + [f"iou_{c}" for c in SHORT] + ["miou"]
                  + [f"ap_{c}" for c in SHORT] + ["map", "fps"])


def sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def iou(pred_logits: np.ndarray, gt_sem: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-class IoU over all samples in the arrays; an empty union scores 1."""
    if pred_logits.shape != gt_sem.shape:
        raise ValueError(f"iou: shapes {pred_logits.shape} and {gt_sem.shape} differ")
    pred = sigmoid(pred_logits) >= threshold
    gt = gt_sem > 0.5
    axes = (0, 2, 3)
    inter = (pred & gt).sum(axis=axes)
    union = (pred | gt).sum(axis=axes)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def match_instances(pred_labels: np.ndarray, n_pred: int, scores: np.ndarray,
                    gt_labels: np.ndarray, n_gt: int, thr: float) -> np.ndarray:
    """Greedy matching by descending score; returns a TP flag per prediction.

    Predictions are labelled 1..n_pred and ground-truth instances 1..n_gt.
    Each prediction takes the unmatched ground-truth instance with the
    highest mask IoU, provided that IoU reaches ``thr``.
    """
    ious = instance_ious(pred_labels, n_pred, gt_labels, n_gt)
    tp = np.zeros(n_pred, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand)) if n_gt else -1
        if j >= 0 and cand[j] >= thr:
            tp[i] = True
            taken[j] = True
    return tp


def instance_ious(pred_labels, n_pred, gt_labels, n_gt) -> np.ndarray:
    joint = pred_labels.astype(np.int64) * (n_gt + 1) + gt_labels
    counts = np.bincount(joint.ravel(), minlength=(n_pred + 1) * (n_gt + 1)).reshape(n_pred + 1, n_gt + 1)
    inter = counts[1:, 1:]
    area_p = counts[1:, :].sum(axis=1)
    area_g = counts[:, 1:].sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    return inter / np.maximum(union, 1)


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = tp[order].astype(np.float64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class MetricsReport:
    name: str
    iou: tuple
    miou: float
    ap: tuple        # per class, per AP threshold
    ap_class: tuple  # per class, mean over thresholds
    map: float
    fps: float | None = None
    seed: int | None = None
    config: str = ""

    def row(self) -> list[str]:
        vals = [self.name] + [f"{v:.6f}" for v in self.iou] + [f"{self.miou:.6f}"]
        vals += [f"{v:.6f}" for v in self.ap_class] + [f"{self.map:.6f}"]
        vals.append("" if self.fps is None else f"{self.fps:.2f}")
        return vals


@dataclass
class MetricAccumulator:
    thresholds: tuple = AP_THRESHOLDS
    prob_threshold: float = 0.5
    inter: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES), np.int64))
    union: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES), np.int64))
    n_gt: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES), np.int64))
    scores: list = field(default_factory=lambda: [[] for _ in CLASSES])
    hits: list = field(default_factory=lambda: [[] for _ in CLASSES])

    def update(self, logits: np.ndarray, gt_sem: np.ndarray, gt_inst: np.ndarray) -> None:
        if logits.shape != gt_sem.shape or gt_inst.shape != gt_sem.shape:
            raise ValueError(f"shape mismatch: logits {logits.shape}, gt {gt_sem.shape}, inst {gt_inst.shape}")
        prob = sigmoid(logits)
        pred = prob >= self.prob_threshold
        gt = gt_sem > 0.5
        self.inter += (pred & gt).sum(axis=(0, 2, 3))
        self.union += (pred | gt).sum(axis=(0, 2, 3))
        for b in range(logits.shape[0]):
            for c in range(logits.shape[1]):
                labels, n_pred = ndimage.label(pred[b, c])
                gl = gt_inst[b, c]
                n_gt = int(gl.max())
                self.n_gt[c] += n_gt
                if n_pred == 0:
                    continue
                sc = np.asarray(ndimage.mean(prob[b, c], labels, np.arange(1, n_pred + 1)))
                self.scores[c].append(sc)
                self.hits[c].append(np.stack(
                    [match_instances(labels, n_pred, sc, gl, n_gt, t) for t in self.thresholds], 1))

    def report(self, name: str = "", fps: float | None = None, seed: int | None = None,
               config: str = "") -> MetricsReport:
        ious = np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 1.0)
        ap = np.zeros((len(CLASSES), len(self.thresholds)))
        for c in range(len(CLASSES)):
            sc = np.concatenate(self.scores[c]) if self.scores[c] else np.zeros(0)
            hits = np.concatenate(self.hits[c]) if self.hits[c] else np.zeros((0, len(self.thresholds)), bool)
            for k in range(len(self.thresholds)):
                ap[c, k] = average_precision(sc, hits[:, k], int(self.n_gt[c]))
        ap_class = ap.mean(axis=1)
        return MetricsReport(
            name=name,
            iou=tuple(float(v) for v in ious),
            miou=float(np.mean(ious)),
            ap=tuple(tuple(float(v) for v in r) for r in ap),
            ap_class=tuple(float(v) for v in ap_class),
            map=float(np.mean(ap_class)),
            fps=fps, seed=seed, config=config,
        )


def instance_map(pred_logits: np.ndarray, gt_sem: np.ndarray, gt_inst: np.ndarray,
                 thresholds=AP_THRESHOLDS) -> np.ndarray:
    """Per-class AP (classes x thresholds) for a batch of predictions."""
    acc = MetricAccumulator(thresholds=tuple(thresholds))
    acc.update(pred_logits, gt_sem, gt_inst)
    return np.array(acc.report().ap)


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
