"""Open-world losses, unknown-sample selection, agent threshold and metrics.

Labels live in {0..K-1}; rejected samples are reported as UNKNOWN (-1).
All probability inputs are row-stochastic N x K matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix

UNKNOWN = -1

LOG_CLAMP = 1e-12


def _clamped_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def known_loss(z_hat, labels, labeled_mask) -> float:
    """Mean cross-entropy over labeled known samples (log clamped at 1e-12)."""
    z_hat = as_matrix(z_hat, "z_hat")
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(labeled_mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("known_loss: no labeled samples")
    p = z_hat[idx, labels[idx]]
    return float(-np.mean(_clamped_log(p)))


def rank_and_discard(z_hat, unlabeled_mask, frac: float = 0.1) -> np.ndarray:
    """Keep the middle of the unlabeled pool, ranked by per-row max probability.

    Drops floor(frac * N_u) rows from each extreme; ties break toward the
    lower sample index. Returns a boolean mask over all N samples.
    """
    if not 0.0 <= frac < 0.5:
        raise ValueError(f"rank_and_discard: need 0 <= frac < 0.5, got {frac}")
    z_hat = as_matrix(z_hat, "z_hat")
    mask = np.asarray(unlabeled_mask, dtype=bool)
    idx = np.flatnonzero(mask)
    out = np.zeros(z_hat.shape[0], dtype=bool)
    if idx.size == 0:
        return out
    keys = z_hat[idx].max(axis=1)
    order = np.argsort(keys, kind="stable")
    n_drop = int(np.floor(frac * idx.size))
    kept = order[n_drop: idx.size - n_drop] if n_drop > 0 else order
    out[idx[kept]] = True
    return out


def unknown_loss(z_hat, selected_mask) -> float:
    """Positive-sign pseudo-label term: mean log of each selected row's max prob.

    Pseudo-labels are the per-row argmax, so the summand collapses to
    log(max prob). Minimizing this pushes selected rows toward uniformity.
    Empty selection returns 0.0; the caller decides whether to warn.
    """
    z_hat = as_matrix(z_hat, "z_hat")
    mask = np.asarray(selected_mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0.0
    return float(np.mean(_clamped_log(z_hat[idx].max(axis=1))))


def total_loss(l_k: float, l_u: float, lam1: float, lam2: float) -> float:
    if lam1 < 0 or lam2 < 0:
        raise ValueError("trade-off weights must be >= 0")
    return lam1 * l_k + lam2 * l_u


@dataclass(frozen=True)
class LossReport:
    l_k: float
    l_u: float
    l_total: float
    n_labeled: int
    n_unlabeled_used: int
    discarded_low: int
    discarded_high: int
    empty_selection: bool = False


def row_entropy(p) -> np.ndarray:
    p = as_matrix(p, "p")
    return -np.sum(p * _clamped_log(p), axis=1)


@dataclass(frozen=True)
class AgentThreshold:
    """Rejection threshold a = (a_k + a_u)/2 with its components."""

    a: float
    a_k: float
    a_u: float
    entropy_cutoff: float

    def as_dict(self) -> dict:
        return {"a": self.a, "a_k": self.a_k, "a_u": self.a_u,
                "entropy_cutoff": self.entropy_cutoff}


def select_agent(z_hat_val) -> AgentThreshold:
    """Agent from validation probabilities.

    a_k averages every row's max probability; a_u averages the max
    probability of the ceil(10%) highest-entropy rows (entropy ties break
    toward the lower index); a is their midpoint.
    """
    z = as_matrix(z_hat_val, "z_hat_val")
    n = z.shape[0]
    if n == 0:
        raise ValueError("select_agent: validation set is empty")
    maxp = z.max(axis=1)
    a_k = float(np.mean(maxp))
    ent = row_entropy(z)
    n_top = int(np.ceil(0.1 * n))
    order = np.argsort(-ent, kind="stable")
    top = order[:n_top]
    a_u = float(np.mean(maxp[top]))
    return AgentThreshold(a=(a_k + a_u) / 2.0, a_k=a_k, a_u=a_u,
                          entropy_cutoff=float(ent[order[n_top - 1]]))


def predict(z_hat, agent: AgentThreshold) -> np.ndarray:
    """Per row: UNKNOWN when max prob <= a, else the argmax class."""
    z = as_matrix(z_hat, "z_hat")
    labels = np.argmax(z, axis=1).astype(np.int64)   # ties: lowest class index
    labels[z.max(axis=1) <= agent.a] = UNKNOWN
    return labels


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float
    per_class_recall: dict = field(default_factory=dict)
    unknown_recall: float | None = None

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy,
                "per_class_recall": {str(k): v for k, v in self.per_class_recall.items()},
                "unknown_recall": self.unknown_recall}


def open_world_accuracy(pred, truth, known_classes) -> AccuracyReport:
    """Exact-match accuracy after remapping non-known truth labels to UNKNOWN."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(
            f"open_world_accuracy: {pred.shape[0]} predictions vs {truth.shape[0]} labels")
    known = set(int(c) for c in known_classes)
    mapped = np.where(np.isin(truth, sorted(known)), truth, UNKNOWN)
    acc = float(np.mean(pred == mapped))
    per_class = {}
    for c in sorted(known):
        sel = mapped == c
        if np.any(sel):
            per_class[c] = float(np.mean(pred[sel] == c))
    unk = mapped == UNKNOWN
    unknown_recall = float(np.mean(pred[unk] == UNKNOWN)) if np.any(unk) else None
    return AccuracyReport(accuracy=acc, per_class_recall=per_class,
                          unknown_recall=unknown_recall)
