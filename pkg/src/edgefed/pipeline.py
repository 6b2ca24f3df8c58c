"""Offline train / detect on FTSAD-style CSV datasets.

Rows are grouped into hosts of ``n_per_host`` consecutive columns; each
host is one window row. Hosts are chained into LEIs of up to four for the
topology graph. The score of row ``t`` compares the true window ``W_t``
with the window generated from ``W_{t-1}``, as a broker does online.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gon
from .autodiff import ContractError, NumericalError
from .detection import (
    Normalizer,
    detection_metrics,
    diagnosis_series,
    pot_fit,
    sliding_windows,
)
from .federation import adjacency, from_groups
from .gon import GenerationConfig, GonConfig, GonNetwork, TopologyGraph, TrainConfig
from .metrics_io import FtsadDataset, split_train_test

log = logging.getLogger(__name__)

LEI_SIZE = 4


@dataclass
class DetectorConfig:
    k: int = 10
    n_per_host: int | None = None  # None: from the dataset sidecar, else 1
    hidden: int = 128
    tau: float = 0.05
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4, weight_decay=1e-5, m_batch=10))
    epochs: int = 3
    patience: int = 2
    min_delta: float = 1e-4
    split_ratio: float = 0.8
    split_seed: int = 0
    train_on_normal: bool = True  # drop labeled-anomalous training rows
    q_low: float = 0.07
    q_risk: float = 1e-4
    pot_method: str = "moments"
    score_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("window length k must be >= 1")
        if self.epochs < 0 or self.patience < 1:
            raise ContractError("need epochs >= 0 and patience >= 1")
        if isinstance(self.generation, dict):
            self.generation = GenerationConfig(**self.generation)
        if isinstance(self.train, dict):
            gen = self.train.pop("generation", None)
            self.train = TrainConfig(**self.train)
            if gen:
                self.train.generation = GenerationConfig(**gen)


@dataclass
class Prepared:
    windows: np.ndarray  # (T, m, n, k) normalized
    graph: TopologyGraph  # template, features filled per batch
    norm: Normalizer
    n_per_host: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    fit_idx: np.ndarray  # rows used for training and POT


def host_layout(d, n_per_host):
    if n_per_host is None:
        n_per_host = 1
    if n_per_host < 1 or d % n_per_host:
        raise ContractError(f"{d} columns do not split into hosts of {n_per_host}")
    return d // n_per_host, n_per_host


def dataset_graph(m, n, k):
    sizes = [LEI_SIZE] * (m // LEI_SIZE) + ([m % LEI_SIZE] if m % LEI_SIZE else [])
    spec = from_groups(sizes, [[4096] * s for s in sizes])
    wb, bb = adjacency(spec)
    return TopologyGraph(np.zeros((m, n * k)), wb, bb, spec.lei_of(), np.arange(m))


def prepare(ds: FtsadDataset, cfg: DetectorConfig, norm: Normalizer | None = None) -> Prepared:
    n_per = cfg.n_per_host or ds.meta.get("n_per_host") or 1
    m, n = host_layout(ds.d, int(n_per))
    train_idx, test_idx = split_train_test(ds, cfg.split_ratio, np.random.default_rng(cfg.split_seed))
    if norm is None:
        if train_idx.size == 0:
            raise ContractError("empty training split")
        norm = Normalizer.fit(ds.values[train_idx])
    X = norm.normalize(ds.values).reshape(ds.T, m, n)
    W = sliding_windows(X, cfg.k)
    fit_idx = train_idx
    if cfg.train_on_normal and ds.labels is not None:
        fit_idx = train_idx[~ds.labels[train_idx]]
    return Prepared(W, dataset_graph(m, n, cfg.k), norm, n, train_idx, test_idx, fit_idx)


def new_network(prep: Prepared, cfg: DetectorConfig):
    m = prep.windows.shape[1]
    return GonNetwork(GonConfig(n=prep.n_per_host, k=cfg.k, m_max=m, hidden=cfg.hidden, tau=cfg.tau,
                                seed=cfg.seed))


def _batch(prep: Prepared, idx):
    W = prep.windows[idx]
    G = prep.graph.with_features(W.reshape(len(idx), W.shape[1], -1))
    S = np.zeros((len(idx), 0, W.shape[1]))
    return G, W, S


def score_rows(net, prep: Prepared, idx, cfg: DetectorConfig, rng=None):
    """Fault score and per-host scores of rows ``idx``: true ``W_t`` against the generation from ``W_{t-1}``."""
    idx = np.asarray(idx, dtype=int)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    f = np.zeros(idx.size)
    per = np.zeros((idx.size, prep.windows.shape[1]))
    for lo in range(0, idx.size, cfg.score_batch):
        j = idx[lo : lo + cfg.score_batch]
        G, Wp, S = _batch(prep, np.maximum(j - 1, 0))
        W_hat = gon.generate(net, G, Wp, S, cfg.generation, rng)
        up = np.maximum(prep.windows[j] - W_hat, 0.0)
        per[lo : lo + j.size] = np.sqrt(np.sum(up.reshape(j.size, up.shape[1], -1) ** 2, axis=2))
        f[lo : lo + j.size] = np.sqrt(np.sum(up.reshape(j.size, -1) ** 2, axis=1))
    return f, per


def evaluate(net, prep: Prepared, ds: FtsadDataset, cfg: DetectorConfig):
    """POT fitted on the training-row scores, labels on the test rows."""
    f_fit, _ = score_rows(net, prep, prep.fit_idx, cfg)
    pot = pot_fit(f_fit, cfg.q_low, cfg.q_risk, cfg.pot_method)
    f, per = score_rows(net, prep, prep.test_idx, cfg)
    pred = f >= pot.threshold
    out = {"threshold": pot.threshold, "pot_method": pot.method, "n_test": int(prep.test_idx.size)}
    if ds.labels is not None:
        truth = ds.labels[prep.test_idx]
        out.update(detection_metrics(pred, truth, f))
        if not truth.any():
            out["degenerate"] = "no labeled anomalies in the test split"
    if ds.host_labels is not None:
        out.update(diagnosis_series(per, ds.host_labels[prep.test_idx]))
    return out, f, pred


@dataclass
class TrainResult:
    net: GonNetwork
    prep: Prepared
    curve: list  # dicts: epoch, loss, test_f1, seconds
    stopped_early: bool = False


def train_detector(ds: FtsadDataset, cfg: DetectorConfig, net: GonNetwork | None = None, curve=None,
                   norm: Normalizer | None = None, eval_each_epoch=True, progress=None) -> TrainResult:
    """Minibatch GAN training over windows of the normal training rows, with early stopping on the epoch loss."""
    prep = prepare(ds, cfg, norm)
    if prep.fit_idx.size == 0:
        raise ContractError("no training rows left after dropping labeled anomalies")
    net = net or new_network(prep, cfg)
    curve = list(curve or [])
    start = (curve[-1]["epoch"] + 1) if curve else 0
    rng = np.random.default_rng([cfg.seed, start])
    tc = TrainConfig(cfg.train.lr, cfg.train.weight_decay, cfg.train.m_batch, cfg.generation)
    best, bad, stopped = math.inf, 0, False
    for c in curve:
        best = min(best, c["loss"])
    for epoch in range(start, start + cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(prep.fit_idx)
        losses = []
        for lo in range(0, order.size, tc.m_batch):
            G, W, S = _batch(prep, order[lo : lo + tc.m_batch])
            Zf = gon.generate(net, G, W, S, tc.generation, rng)
            losses.append(gon.train_step(net, G, W, S, Zf, tc))
        loss = float(np.mean(losses))
        if not math.isfinite(loss):
            raise NumericalError("training loss diverged")
        row = {"epoch": epoch, "loss": loss, "test_f1": math.nan, "seconds": time.perf_counter() - t0}
        if eval_each_epoch and ds.labels is not None and prep.test_idx.size:
            row["test_f1"] = evaluate(net, prep, ds, cfg)[0]["f1"]
        curve.append(row)
        log.info("epoch %d loss %.5f test F1 %.4f", epoch, loss, row["test_f1"])
        if progress:
            progress(row)
        if loss < best - cfg.min_delta:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped = True
                break
    return TrainResult(net, prep, curve, stopped)


# ---------------------------------------------------------------- persistence


def save_model(res: TrainResult, cfg: DetectorConfig, path):
    extra = {
        "lo": res.prep.norm.lo,
        "hi": res.prep.norm.hi,
        "n_per_host": np.array(res.prep.n_per_host),
        "curve": np.array([[c["epoch"], c["loss"], c["test_f1"], c["seconds"]] for c in res.curve]).reshape(-1, 4),
    }
    gon.save_checkpoint(res.net, path, extra)


def load_model(path):
    """Returns ``(net, norm, n_per_host, curve)``."""
    net, extra = gon.load_checkpoint(path)
    curve = [{"epoch": int(r[0]), "loss": float(r[1]), "test_f1": float(r[2]), "seconds": float(r[3])}
             for r in np.asarray(extra["curve"]).reshape(-1, 4)]
    return net, Normalizer(extra["lo"], extra["hi"]), int(extra["n_per_host"]), curve


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "test_f1", "seconds"])
        for c in curve:
            w.writerow([c["epoch"], f"{c['loss']:.6f}", f"{c['test_f1']:.6f}", f"{c['seconds']:.3f}"])


def config_dict(cfg: DetectorConfig):
    return asdict(cfg)
