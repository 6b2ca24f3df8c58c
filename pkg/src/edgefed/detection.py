"""Windowing, normalization, fault scoring, POT thresholding and metrics."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

POT_MIN_OBS = 20
POT_MIN_EXCESS = 5


class SlidingWindowBuffer:
    """Keeps the last ``k`` states; pads by replicating the first state."""

    def __init__(self, k: int):
        if k < 1:
            raise ContractError("window length must be >= 1")
        self.k = k
        self._states = deque(maxlen=k)
        self._first = None

    def push(self, x):
        x = np.asarray(x, dtype=float)
        if self._first is None:
            self._first = x.copy()
        self._states.append(x.copy())
        return self.window()

    def window(self):
        """Window with time on the last axis: ``x.shape + (k,)``."""
        if self._first is None:
            raise ContractError("no states pushed yet")
        pad = [self._first] * (self.k - len(self._states))
        return np.stack(pad + list(self._states), axis=-1)

    def __len__(self):
        return len(self._states)


def sliding_windows(series, k):
    """All windows of a ``(T, ...)`` series, replication-padded at the start.

    Returns an array of shape ``(T,) + series.shape[1:] + (k,)``.
    """
    series = np.asarray(series, dtype=float)
    T = series.shape[0]
    idx = np.arange(T)[:, None] + np.arange(-k + 1, 1)[None, :]
    idx = np.clip(idx, 0, None)
    win = series[idx]  # (T, k, ...)
    return np.moveaxis(win, 1, -1)


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, data, axis=0):
        """Per-feature min/max over all axes except the last (feature) axis."""
        data = np.asarray(data, dtype=float)
        red = tuple(range(data.ndim - 1))
        return cls(data.min(axis=red), data.max(axis=red))

    @property
    def span(self):
        s = self.hi - self.lo
        return np.where(s > 0, s, 1.0)

    def normalize(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / self.span, 0.0, 1.0)

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.span + self.lo


def fault_score(W_true, W_hat, m=None):
    """Norm of the upward deviation of the true window over the reconstruction.

    Returns ``(f, per_host)``; ``per_host`` covers the first ``m`` rows
    (all rows when ``m`` is None).
    """
    W_true = np.asarray(W_true, dtype=float)
    W_hat = np.asarray(W_hat, dtype=float)
    if W_true.shape != W_hat.shape:
        raise ContractError(f"shape mismatch {W_true.shape} vs {W_hat.shape}")
    up = np.maximum(W_true - W_hat, 0.0)
    f = float(np.sqrt(np.sum(up * up)))
    rows = up.reshape(up.shape[0], -1)
    per = np.sqrt(np.sum(rows * rows, axis=1))
    return f, per if m is None else per[:m]


@dataclass
class PotState:
    u: float
    gamma_hat: float
    sigma_hat: float
    n_total: int
    n_excess: int
    q_risk: float = 1e-4
    q_low: float = 0.07
    threshold: float = math.nan
    method: str = "moments"


def gpd_quantile(u, gamma, sigma, q_risk, n_total, n_excess):
    r = q_risk * n_total / n_excess
    if abs(gamma) < 1e-8:
        return u - sigma * math.log(r)
    return u + (sigma / gamma) * (r ** (-gamma) - 1.0)


def _moments(y):
    mean = float(np.mean(y))
    var = float(np.var(y, ddof=1)) if y.size > 1 else 0.0
    if var <= 0 or mean <= 0:
        return 0.0, max(mean, 1e-12)
    ratio = mean * mean / var
    return 0.5 * (1.0 - ratio), 0.5 * mean * (ratio + 1.0)


def pot_fit(scores, q_low=0.07, q_risk=1e-4, method="moments"):
    """Fit a peaks-over-threshold model and derive the alarm threshold."""
    s = np.asarray(scores, dtype=float).ravel()
    s = s[np.isfinite(s)]
    n = s.size
    if n == 0:
        raise ContractError("pot_fit needs at least one score")
    u = float(np.quantile(s, 1.0 - q_low))
    y = s[s > u] - u
    if n < POT_MIN_OBS or y.size < POT_MIN_EXCESS:
        # cold start: mean + 3 std
        thr = float(np.mean(s) + 3.0 * np.std(s))
        return PotState(u, 0.0, max(float(np.mean(y)) if y.size else 1e-12, 1e-12), n, int(y.size),
                        q_risk, q_low, thr, "warmup")
    if np.ptp(y) == 0:
        gamma, sigma, used = 0.0, float(np.mean(y)), "exponential"
    else:
        gamma, sigma = _moments(y)
        used = "moments"
        if method == "grimshaw":
            from scipy.stats import genpareto

            c, _, scale = genpareto.fit(y, floc=0.0)
            if np.isfinite(c) and scale > 0:
                gamma, sigma, used = float(c), float(scale), "grimshaw"
    thr = gpd_quantile(u, gamma, sigma, q_risk, n, y.size)
    return PotState(u, gamma, sigma, n, int(y.size), q_risk, q_low, float(thr), used)


def label(f, pot: PotState):
    return bool(f >= pot.threshold)


def label_hosts(per_host, pot: PotState):
    return np.asarray(per_host) >= pot.threshold


def point_adjust(pred, truth):
    """Mark a whole true segment detected if any of its points is flagged."""
    pred = np.asarray(pred, dtype=bool).copy()
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ContractError("pred and truth must have the same length")
    T = truth.size
    i = 0
    while i < T:
        if not truth[i]:
            i += 1
            continue
        j = i
        while j < T and truth[j]:
            j += 1
        if pred[i:j].any():
            pred[i:j] = True
        i = j
    return pred


def auroc(scores, truth):
    """Area under the ROC curve by sweeping every distinct threshold."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    P, N = truth.sum(), (~truth).sum()
    if P == 0 or N == 0:
        return math.nan
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    tps = np.cumsum(t)
    fps = np.cumsum(~t)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[last] / P]
    fpr = np.r_[0.0, fps[last] / N]
    trap = getattr(np, "trapezoid", None) or np.trapz
    return float(trap(tpr, fpr))


def _confusion(pred, truth):
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return tp, fp, fn, tn


def _prf(pred, truth):
    tp, fp, fn, tn = _confusion(pred, truth)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = (tp + tn) / max(tp + fp + fn + tn, 1)
    return acc, precision, recall, f1, tp + fp == 0


def detection_metrics(pred, truth, scores=None, adjust=True):
    """Accuracy/precision/recall/F1 (point-adjusted by default) and AUROC.

    AUROC is computed on the raw ``scores``; when no scores are given the
    labels themselves are used.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    adj = point_adjust(pred, truth) if adjust else pred
    acc, precision, recall, f1, undefined = _prf(adj, truth)
    raw = _prf(pred, truth)
    sc = pred.astype(float) if scores is None else scores
    return {
        "accuracy": acc,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "f1_raw": raw[3],
        "auroc": auroc(sc, truth),
        "precision_undefined": bool(undefined),
    }


def diagnosis_metrics(per_host_scores, truth_hosts):
    """HitRate@100% and NDCG@100% for one timestep (ties ranked by index)."""
    scores = np.asarray(per_host_scores, dtype=float)
    truth = {int(h) for h in truth_hosts}
    g = len(truth)
    if g == 0:
        return {"hitrate_100": math.nan, "ndcg_100": math.nan}
    ranking = np.argsort(-scores, kind="mergesort")[:g]
    hits = [1.0 if int(h) in truth else 0.0 for h in ranking]
    discounts = 1.0 / np.log2(np.arange(2, g + 2))
    dcg = float(np.dot(hits, discounts[: len(hits)]))
    idcg = float(discounts.sum())
    return {"hitrate_100": sum(hits) / g, "ndcg_100": dcg / idcg}


def diagnosis_series(per_host_scores, truth_matrix):
    """Average diagnosis metrics over timesteps with at least one faulty host."""
    per_host_scores = np.asarray(per_host_scores, dtype=float)
    truth_matrix = np.asarray(truth_matrix, dtype=bool)
    hr, nd = [], []
    for sc, tr in zip(per_host_scores, truth_matrix):
        if tr.any():
            d = diagnosis_metrics(sc, np.nonzero(tr)[0])
            hr.append(d["hitrate_100"])
            nd.append(d["ndcg_100"])
    if not hr:
        return {"hitrate_100": math.nan, "ndcg_100": math.nan}
    return {"hitrate_100": float(np.mean(hr)), "ndcg_100": float(np.mean(nd))}


class PotTracker:
    """Refits POT on a sliding history of scores (one per broker)."""

    def __init__(self, q_low=0.07, q_risk=1e-4, history=500):
        self.q_low, self.q_risk = q_low, q_risk
        self.scores = deque(maxlen=history)
        self.state = None

    def threshold(self):
        if not self.scores:
            return math.inf
        if self.state is None:
            self.state = pot_fit(np.fromiter(self.scores, float), self.q_low, self.q_risk)
        return self.state.threshold

    def observe(self, f, flagged=False):
        # alarms stay out of the tail model, as in streaming POT
        if flagged:
            return
        self.scores.append(float(f))
        self.state = None

    def copy(self):
        other = PotTracker(self.q_low, self.q_risk, self.scores.maxlen)
        other.scores.extend(self.scores)
        other.state = self.state
        return other
