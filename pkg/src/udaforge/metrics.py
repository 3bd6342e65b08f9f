"""Multi-class metrics, grouped k-fold splitting, prediction containers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 5


@dataclass
class PredictionSet:
    """Per-sample model outputs alongside ground truth and grouping tags."""

    y_true: np.ndarray
    y_pred: np.ndarray
    probs: np.ndarray
    patients: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = len(self.y_true)
        if self.probs.shape != (n, N_CLASSES):
            raise ValueError(f"probs must be (N, {N_CLASSES}), got {self.probs.shape}")
        if self.probs.min() < -1e-12:
            raise ValueError("probabilities must be non-negative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("probability rows must sum to 1")

    def __len__(self):
        return len(self.y_true)


def confusion_matrix(y_true, y_pred, n_classes=N_CLASSES):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("no predictions")
    if y_true.min() < 0 or y_true.max() >= n_classes:
        raise ValueError("true label out of range")
    if y_pred.min() < 0 or y_pred.max() >= n_classes:
        raise ValueError("predicted label out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(cm):
    return float(np.trace(cm) / np.sum(cm))


def macro_prf1(cm):
    """Macro precision/recall/F1 with the 0/0 -> 0 convention per class."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(pred_tot > 0, tp / np.where(pred_tot > 0, pred_tot, 1), 0.0)
        r = np.where(true_tot > 0, tp / np.where(true_tot > 0, true_tot, 1), 0.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    return float(p.mean()), float(r.mean()), float(f.mean())


def _rank_with_ties(x):
    """Average ranks (1-based), ties share their mean rank."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positives):
    """Tie-corrected Mann-Whitney AUC of scores against a binary mask."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int(len(positives) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    ranks = _rank_with_ties(np.asarray(scores, dtype=np.float64))
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_per_class(y_true, probs, n_classes=N_CLASSES):
    """One-vs-rest AUC per class; classes without both positives and
    negatives come back as None (skipped)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    out = {}
    for c in range(n_classes):
        pos = y_true == c
        if pos.all() or not pos.any():
            out[c] = None
            continue
        out[c] = binary_auc(probs[:, c], pos)
    return out


def auc_ovr_macro(y_true, probs, n_classes=N_CLASSES):
    """Unweighted mean of the valid per-class one-vs-rest AUCs."""
    if len(np.unique(np.asarray(y_true))) < 2:
        raise ValueError("AUC needs at least two classes present")
    per = auc_per_class(y_true, probs, n_classes)
    vals = [v for v in per.values() if v is not None]
    return float(np.mean(vals))


METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


def summarize(preds):
    """The five headline metrics of a PredictionSet."""
    cm = confusion_matrix(preds.y_true, preds.y_pred)
    p, r, f = macro_prf1(cm)
    return {
        "accuracy": accuracy(cm),
        "precision": p,
        "recall": r,
        "f1": f,
        "auc": auc_ovr_macro(preds.y_true, preds.probs),
    }


def grouped_kfold(patient_ids, k, seed):
    """Seeded shuffle + round-robin: every patient lands in exactly one
    fold and fold sizes differ by at most one patient."""
    if k < 2:
        raise ValueError("k must be >= 2")
    patients = sorted({int(p) for p in patient_ids})
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    return {patients[idx]: i % k for i, idx in enumerate(order)}


def fold_patients(plan, fold):
    return sorted(p for p, f in plan.items() if f == fold)
