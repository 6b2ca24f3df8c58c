"""Dataset CSV handling, synthetic data, QoS/SLO/fairness accounting and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

log = logging.getLogger(__name__)

# reference dataset statistics: (train rows, test rows, dims, anomaly fraction)
FTSAD_STATS = {
    "FTSAD-1": (600, 5000, 1, 0.1288),
    "FTSAD-25": (574, 1700, 25, 0.3223),
    "FTSAD-55": (2158, 2264, 55, 0.1369),
}


class DataError(ValueError):
    """Malformed input file."""


@dataclass
class FtsadDataset:
    values: np.ndarray  # (T, d)
    labels: np.ndarray | None = None  # (T,) bool
    timestamps: np.ndarray | None = None
    host_labels: np.ndarray | None = None  # (T, n_hosts) bool, diagnosis ground truth
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ContractError("dataset values must be (T, d)")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.values))
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(bool)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return FtsadDataset(
            self.values[idx],
            None if self.labels is None else self.labels[idx],
            self.timestamps[idx],
            None if self.host_labels is None else self.host_labels[idx],
            dict(self.meta),
        )


def _parse_float(cell, lineno, col):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"line {lineno}, column {col!r}: non-numeric cell {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {lineno}, column {col!r}: non-finite value {cell!r}")
    return v


def load_csv(path, require_labels=False):
    """Read ``timestamp,<features...>[,label]``; errors name the offending line."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp":
            raise DataError(f"{path}: header must start with 'timestamp'")
        has_label = header[-1] == "label"
        feat_cols = header[1:-1] if has_label else header[1:]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        if require_labels and not has_label:
            raise DataError(f"{path}: missing label column")
        ts, rows, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
            ts.append(_parse_float(row[0], lineno, "timestamp"))
            rows.append([_parse_float(c, lineno, name) for c, name in zip(row[1 : 1 + len(feat_cols)], feat_cols)])
            if has_label:
                lab = _parse_float(row[-1], lineno, "label")
                if lab not in (0.0, 1.0):
                    raise DataError(f"line {lineno}, column 'label': label must be 0 or 1, got {row[-1]!r}")
                labels.append(lab)
    values = np.array(rows, dtype=float).reshape(len(rows), len(feat_cols))
    ds = FtsadDataset(values, np.array(labels, dtype=bool) if has_label else None, np.array(ts))
    ds.meta["columns"] = feat_cols
    ds.meta["path"] = str(path)
    side = diagnosis_sidecar_path(path)
    if os.path.exists(side):
        with open(side) as fh:
            d = json.load(fh)
        hl = np.zeros((ds.T, d["n_hosts"]), dtype=bool)
        for t, hosts in d["rows"].items():
            hl[int(t), hosts] = True
        ds.host_labels = hl
        ds.meta["n_per_host"] = d.get("n_per_host")
    return ds


def diagnosis_sidecar_path(path):
    root, _ = os.path.splitext(str(path))
    return root + ".diagnosis.json"


def format_float(x):
    return repr(float(x))


def save_csv(ds: FtsadDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f"feature_{i}" for i in range(ds.d)]
        w.writerow(["timestamp"] + cols + (["label"] if ds.labels is not None else []))
        for i in range(ds.T):
            row = [str(int(ds.timestamps[i])) if float(ds.timestamps[i]).is_integer() else format_float(ds.timestamps[i])]
            row += [f"{v:.6f}" for v in ds.values[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)
    if ds.host_labels is not None:
        rows = {str(t): np.nonzero(r)[0].tolist() for t, r in enumerate(ds.host_labels) if r.any()}
        with open(diagnosis_sidecar_path(path), "w") as fh:
            json.dump({"n_hosts": int(ds.host_labels.shape[1]), "n_per_host": ds.meta.get("n_per_host"),
                       "rows": rows}, fh, sort_keys=True)


def split_train_test(ds: FtsadDataset, ratio=0.8, rng=None):
    """Random row split; both parts keep time order. Returns index arrays."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError("split ratio must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_train = int(math.floor(ratio * ds.T + 1e-9))
    perm = rng.permutation(ds.T)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    if test.size == 0:
        log.warning("split ratio %.3f leaves an empty test split", ratio)
    return train, test


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    rows: int = 4422
    n_hosts: int = 11
    n_per_host: int = 5
    anomaly_fraction: float = 0.1369
    seg_len: tuple = (20, 60)
    max_hosts_per_segment: int = 2
    noise: float = 0.02
    seed: int = 0

    @property
    def d(self):
        return self.n_hosts * self.n_per_host


def _feature_groups(n_per_host):
    """Feature indices per attack type inside one host block."""
    if n_per_host >= 5:
        return [[0], [1, 2], [3], [4]]
    return [[i] for i in range(n_per_host)]


def _segments(rng, rows, n_target, seg_len):
    """Non-touching segments covering exactly ``n_target`` rows."""
    labels = np.zeros(rows, dtype=bool)
    segs = []
    remaining = n_target
    attempts = 0
    while remaining > 0:
        attempts += 1
        if attempts > 100000:
            raise ContractError("could not place anomaly segments; lower the fraction")
        L = min(int(rng.integers(seg_len[0], seg_len[1] + 1)), remaining)
        s = int(rng.integers(0, rows - L + 1))
        lo, hi = max(s - 1, 0), min(s + L + 1, rows)
        if labels[lo:hi].any():
            continue
        labels[s : s + L] = True
        segs.append((s, L))
        remaining -= L
    return labels, sorted(segs)


def make_synthetic(spec: SyntheticSpec) -> FtsadDataset:
    """Seeded multivariate utilization-like series with upward anomaly segments."""
    if not 0.0 <= spec.anomaly_fraction < 0.6:
        raise ContractError("anomaly fraction must lie in [0, 0.6)")
    rng = np.random.default_rng(spec.seed)
    T, Hn, n = spec.rows, spec.n_hosts, spec.n_per_host
    t = np.arange(T)[:, None]
    base = rng.uniform(0.1, 0.35, size=spec.d)
    amp = rng.uniform(0.03, 0.12, size=spec.d)
    period = rng.uniform(20, 200, size=spec.d)
    phase = rng.uniform(0, 2 * np.pi, size=spec.d)
    x = base + amp * np.sin(2 * np.pi * t / period + phase)
    # shared per-host load swings couple the features of one host
    host_load = np.zeros((T, Hn))
    e = rng.normal(0, spec.noise, size=(T, Hn))
    for i in range(1, T):
        host_load[i] = 0.95 * host_load[i - 1] + e[i]
    x = x + np.repeat(host_load, n, axis=1)
    x = x + rng.normal(0, spec.noise, size=x.shape)
    n_target = int(round(spec.anomaly_fraction * T))
    labels, segs = _segments(rng, T, n_target, spec.seg_len)
    host_labels = np.zeros((T, Hn), dtype=bool)
    groups = _feature_groups(n)
    for s, L in segs:
        k = int(rng.integers(1, min(spec.max_hosts_per_segment, Hn) + 1))
        hosts = rng.choice(Hn, size=k, replace=False)
        for h in hosts:
            g = groups[int(rng.integers(len(groups)))]
            cols = [h * n + j for j in g]
            x[s : s + L, cols] = rng.uniform(0.9, 1.0, size=(L, len(cols)))
            host_labels[s : s + L, h] = True
    x = np.clip(x, 0.0, 1.0)
    ds = FtsadDataset(x, labels, np.arange(T), host_labels)
    ds.meta.update({"n_per_host": n, "n_hosts": Hn, "seed": spec.seed, "anomaly_fraction": spec.anomaly_fraction})
    return ds


# ---------------------------------------------------------------- accounting


def jain_fairness(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ContractError("fairness of an empty allocation")
    s2 = float(np.sum(x * x))
    if s2 == 0:
        return 1.0
    return float(np.sum(x) ** 2 / (x.size * s2))


def reference_percentiles(responses_by_app, q=90.0):
    return {str(a): float(np.percentile(v, q)) for a, v in sorted(responses_by_app.items()) if len(v)}


def save_reference(ref, path):
    with open(path, "w") as fh:
        json.dump({"percentile": 90, "reference_s": ref}, fh, indent=2, sort_keys=True)


def load_reference(path):
    with open(path) as fh:
        return json.load(fh)["reference_s"]


def slo_report(apps, responses, reference):
    """Violation iff response > the app's reference percentile (strict)."""
    apps = [str(a) for a in apps]
    responses = np.asarray(responses, dtype=float)
    per_app = {}
    viol = np.zeros(len(apps), dtype=bool)
    for i, (a, r) in enumerate(zip(apps, responses)):
        if a not in reference:
            raise ContractError(f"no reference deadline for application {a}")
        viol[i] = r > reference[a]
    for a in sorted(set(apps)):
        m = np.array([x == a for x in apps])
        per_app[a] = float(viol[m].mean())
    overall = float(viol.mean()) if len(apps) else 0.0
    return {"overall": overall, "per_app": per_app, "violations": int(viol.sum()), "completed": len(apps)}


# ---------------------------------------------------------------- traces and reports

# wall-clock decision times live in a timing.csv sidecar so trace.csv stays byte-reproducible
TRACE_COLUMNS = ("t", "art", "aec", "energy_j", "n_migrations", "migration_time_s",
                 "crashed", "truth", "pred", "scores", "features", "power_w", "migrations", "completions")


def _fl(x):
    return repr(float(x))


def _join(vals, fmt=_fl, sep=";"):
    return sep.join(fmt(v) for v in vals)


def _bits(mask):
    return "".join("1" if b else "0" for b in np.asarray(mask, dtype=bool))


@dataclass
class TraceRow:
    t: int
    decision_s: float
    art: float
    aec: float
    energy_j: float
    migration_times: list
    crashed: list
    truth: np.ndarray
    pred: np.ndarray
    scores: np.ndarray
    features: np.ndarray  # (H, n)
    power_w: np.ndarray
    migrations: list  # (task, host)
    completions: list  # (task, app, arrival, response_s, restarts, migrations)


def rows_from_trace(trace):
    """Flatten an engine trace into :class:`TraceRow` records."""
    out = []
    for r in trace.rows:
        comps = [(c.task_id, c.app, c.arrival, c.response_s, c.restarts, c.migrations) for c in r.completions]
        out.append(TraceRow(int(r.t), float(r.decision_s), float(r.art), float(r.aec),
                            float(np.sum(r.power_w)) * trace.interval_s, list(r.migration_times),
                            list(r.crashed), np.asarray(r.truth, bool), np.asarray(r.pred, bool),
                            np.asarray(r.scores, float), np.asarray(r.host_features, float),
                            np.asarray(r.power_w, float), [tuple(m) for m in r.migrations], comps))
    return out


def timing_path(path):
    return os.path.join(os.path.dirname(path), "timing.csv")


def write_trace_csv(rows, path):
    with open(timing_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "decision_s"))
        for r in rows:
            w.writerow([r.t, _fl(r.decision_s)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([
                r.t, _fl(r.art), _fl(r.aec), _fl(r.energy_j), len(r.migrations),
                _join(r.migration_times), _join(r.crashed, str), _bits(r.truth), _bits(r.pred),
                _join(r.scores), "|".join(_join(f) for f in r.features), _join(r.power_w),
                _join(r.migrations, lambda m: f"{m[0]}>{m[1]}"),
                _join(r.completions, lambda c: f"{c[0]}:{c[1]}:{c[2]}:{_fl(c[3])}:{c[4]}:{c[5]}"),
            ])


def _floats(cell):
    return [float(x) for x in cell.split(";")] if cell else []


def _read_timing(path):
    tp = timing_path(path)
    if not os.path.exists(tp):
        return {}
    with open(tp, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        try:
            return {int(t): float(d) for t, d in reader}
        except ValueError as e:
            raise DataError(f"{tp}: malformed timing row ({e})") from None


def read_trace_csv(path):
    """Trace rows; decision times come from the timing sidecar when present (else 0)."""
    timing = _read_timing(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise DataError(f"{path}: not a trace file (unexpected header)")
        for lineno, c in enumerate(reader, start=2):
            try:
                if len(c) != len(TRACE_COLUMNS):
                    raise ValueError(f"expected {len(TRACE_COLUMNS)} cells, got {len(c)}")
                feats = np.array([_floats(x) for x in c[10].split("|")]) if c[10] else np.zeros((0, 0))
                migs = [tuple(int(v) for v in m.split(">")) for m in c[12].split(";")] if c[12] else []
                comps = []
                for item in (c[13].split(";") if c[13] else []):
                    a = item.split(":")
                    comps.append((int(a[0]), int(a[1]), int(a[2]), float(a[3]), int(a[4]), int(a[5])))
                t = int(c[0])
                rows.append(TraceRow(t, timing.get(t, 0.0), float(c[1]), float(c[2]), float(c[3]),
                                     _floats(c[5]), [int(x) for x in c[6].split(";")] if c[6] else [],
                                     np.array([ch == "1" for ch in c[7]], bool),
                                     np.array([ch == "1" for ch in c[8]], bool),
                                     np.array(_floats(c[9])), feats, np.array(_floats(c[11])), migs, comps))
            except (IndexError, ValueError) as e:
                raise DataError(f"{path}: line {lineno}: malformed trace row ({e})") from None
    return rows


def _host_major(mat):
    """Stack per-host series with a gap so segments never join across hosts."""
    mat = np.asarray(mat)
    if mat.size == 0:
        return mat.ravel()
    gap = np.zeros((1, mat.shape[1]), dtype=mat.dtype)
    return np.concatenate([mat, gap]).T.ravel()


def summarize(rows, meta):
    """Every summary number as a pure function of trace rows plus run metadata."""
    apps = list(meta.get("apps", []))
    reference = meta.get("reference") or {}
    out = {
        "mode": meta.get("mode"), "N": meta.get("N"), "seed": meta.get("seed"),
        "topology": meta.get("topology"), "lei_sizes": meta.get("lei_sizes"),
        "intervals": len(rows), "empty": len(rows) == 0,
        "peak_memory_mb": meta.get("peak_memory_mb", 0.0),
    }
    comps = [c for r in rows for c in r.completions]
    resp = np.array([c[3] for c in comps], dtype=float)
    out["energy_kwh"] = float(sum(r.energy_j for r in rows)) / 3.6e6
    out["completed"] = len(comps)
    if resp.size:
        out["response_mean_s"] = float(np.mean(resp))
        for q in (50, 90, 99):
            out[f"response_p{q}_s"] = float(np.percentile(resp, q))
    else:
        out.update({"response_mean_s": 0.0, "response_p50_s": 0.0, "response_p90_s": 0.0, "response_p99_s": 0.0})
    if comps and reference:
        rep = slo_report([apps[c[1]] for c in comps], resp, reference)
        out["slo_violation_rate"] = rep["overall"]
        out["slo_per_app"] = rep["per_app"]
    else:
        out["slo_violation_rate"] = 0.0
        out["slo_per_app"] = {}
    mig_times = [m for r in rows for m in r.migration_times]
    out["migrations"] = int(sum(len(r.migrations) for r in rows))
    out["migration_time_mean_s"] = float(np.mean(mig_times)) if mig_times else 0.0
    out["crashes"] = int(sum(len(r.crashed) for r in rows))
    if rows and rows[0].features.size:
        cpu = np.mean([r.features[:, 0] for r in rows], axis=0)
        out["fairness"] = jain_fairness(cpu)
    else:
        out["fairness"] = 0.0
    out["decision_time_mean_s"] = float(np.mean([r.decision_s for r in rows])) if rows else 0.0
    # detection: point-adjust per host series, pooled over hosts
    from .detection import detection_metrics, diagnosis_series

    if rows:
        truth = np.array([r.truth for r in rows])
        pred = np.array([r.pred for r in rows])
        scores = np.array([r.scores for r in rows])
        det = detection_metrics(_host_major(pred), _host_major(truth), _host_major(scores))
        out.update({k: det[k] for k in ("accuracy", "precision", "recall", "f1", "auroc")})
        out["precision_undefined"] = bool(det.get("precision_undefined", False))
        out.update(diagnosis_series(scores, truth))
    else:
        out.update({"accuracy": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0, "auroc": math.nan,
                    "precision_undefined": True, "hitrate_100": math.nan, "ndcg_100": math.nan})
    return out


def series_rows(rows, meta):
    """Plot-ready per-interval series."""
    apps = list(meta.get("apps", []))
    reference = meta.get("reference") or {}
    out = []
    for r in rows:
        resp = [c[3] for c in r.completions]
        viol = sum(1 for c in r.completions if reference and c[3] > reference[apps[c[1]]])
        out.append({
            "t": r.t, "energy_j": r.energy_j, "completed": len(resp),
            "response_mean_s": float(np.mean(resp)) if resp else 0.0,
            "slo_violations": viol, "migrations": len(r.migrations), "crashes": len(r.crashed),
            "faulty_hosts": int(r.truth.sum()), "flagged_hosts": int(r.pred.sum()),
            "art": r.art, "aec": r.aec, "decision_s": r.decision_s,
        })
    return out


def _json_clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_clean(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_report(trace, out_dir, meta=None):
    """Write ``trace.csv``, ``meta.json``, ``series.csv`` and ``summary.json``; returns the summary.

    ``trace`` is an engine trace or a list of :class:`TraceRow`; the summary
    is computed from the re-read CSV so a later reload reproduces it exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = trace if isinstance(trace, list) else rows_from_trace(trace)
    meta = dict(meta or {})
    if not isinstance(trace, list):
        meta.setdefault("mode", trace.mode)
        meta.setdefault("N", trace.N)
        meta.setdefault("seed", trace.seed)
        meta.setdefault("topology", trace.topology)
        meta.setdefault("lei_sizes", list(trace.lei_sizes))
        meta.setdefault("interval_s", trace.interval_s)
        meta.setdefault("apps", list(trace.apps))
    tpath = os.path.join(out_dir, "trace.csv")
    write_trace_csv(rows, tpath)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(_json_clean(meta), fh, indent=2, sort_keys=True)
    return evaluate_dir(out_dir)


def evaluate_dir(out_dir):
    """Recompute the summary and series from ``trace.csv`` + ``meta.json``."""
    rows = read_trace_csv(os.path.join(out_dir, "trace.csv"))
    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    summary = summarize(rows, meta)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(_json_clean(summary), fh, indent=2, sort_keys=True)
    series = series_rows(rows, meta)
    with open(os.path.join(out_dir, "series.csv"), "w", newline="") as fh:
        cols = ["t", "energy_j", "completed", "response_mean_s", "slo_violations", "migrations", "crashes",
                "faulty_hosts", "flagged_hosts", "art", "aec", "decision_s"]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in series:
            w.writerow([_fl(s[c]) if isinstance(s[c], float) else s[c] for c in cols])
    return summary


def load_summary(out_dir):
    with open(os.path.join(out_dir, "summary.json")) as fh:
        return json.load(fh)
