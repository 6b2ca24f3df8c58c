import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgefed.autodiff import ContractError
from edgefed.detection import (
    Normalizer,
    PotTracker,
    SlidingWindowBuffer,
    auroc,
    detection_metrics,
    diagnosis_metrics,
    diagnosis_series,
    fault_score,
    gpd_quantile,
    label,
    label_hosts,
    point_adjust,
    pot_fit,
    sliding_windows,
)


def test_buffer_pads_with_first_state():
    b = SlidingWindowBuffer(4)
    w = b.push(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(w, [[1, 1, 1, 1], [2, 2, 2, 2]])
    b.push(np.array([3.0, 4.0]))
    np.testing.assert_array_equal(b.window(), [[1, 1, 1, 3], [2, 2, 2, 4]])
    for v in range(5):
        w = b.push(np.array([v, v], dtype=float))
    assert w.shape == (2, 4)
    np.testing.assert_array_equal(w[0], [1, 2, 3, 4])


def test_sliding_windows_matches_buffer(rng):
    X = rng.normal(size=(12, 3))
    W = sliding_windows(X, 5)
    b = SlidingWindowBuffer(5)
    for t in range(12):
        np.testing.assert_array_equal(W[t], b.push(X[t]))


def test_normalizer_round_trip_and_clamp(rng):
    X = rng.uniform(-3, 5, size=(50, 4))
    nm = Normalizer.fit(X)
    assert np.all(nm.hi >= nm.lo)
    np.testing.assert_allclose(nm.denormalize(nm.normalize(X)), X, atol=1e-12)
    out = nm.normalize(np.array([[100.0, -100.0, 0.0, 0.0]]))
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_fault_score_examples():
    W = np.zeros((2, 1, 3))
    assert fault_score(W, W)[0] == 0.0
    assert fault_score(np.array([[0.7]]), np.array([[0.5]]))[0] == pytest.approx(0.2)
    assert fault_score(np.array([[0.5]]), np.array([[0.7]]))[0] == 0.0
    d = np.zeros((3, 1, 1))
    d[:, 0, 0] = [0.3, -0.4, 0.4]
    f, per = fault_score(d, np.zeros_like(d))
    # ReLU drops the negative entry: sqrt(0.09 + 0.16)
    assert f == pytest.approx(0.5)
    np.testing.assert_allclose(per, [0.3, 0.0, 0.4])
    with pytest.raises(ContractError):
        fault_score(np.zeros((2, 2)), np.zeros((2, 3)))


def test_per_host_consistent_with_total(rng):
    Wt, Wh = rng.uniform(size=(6, 2, 3)), rng.uniform(size=(6, 2, 3))
    f, per = fault_score(Wt, Wh)
    assert np.sum(per**2) == pytest.approx(f**2)
    _, per4 = fault_score(Wt, Wh, 4)
    np.testing.assert_array_equal(per4, per[:4])


def test_pot_exponential_oracle():
    s = np.random.default_rng(1).exponential(size=10_000)
    pot = pot_fit(s, 0.07, 1e-4)
    assert abs(pot.threshold - (-math.log(1e-4))) / 9.21 <= 0.10
    assert pot.sigma_hat > 0 and pot.n_excess <= pot.n_total
    assert pot.threshold >= pot.u


def test_pot_constant_scores_collapse():
    pot = pot_fit(np.full(100, 2.5))
    assert pot.u == 2.5 and pot.threshold == pytest.approx(2.5)


def test_pot_fixed_point():
    assert gpd_quantile(1.7, 0.2, 0.5, 0.05, 100, 5) == pytest.approx(1.7)
    assert gpd_quantile(1.7, 0.0, 0.5, 0.05, 100, 5) == pytest.approx(1.7)


def test_pot_warmup_and_grimshaw():
    pot = pot_fit([1.0, 2.0, 3.0])
    assert pot.method == "warmup"
    assert pot.threshold == pytest.approx(2.0 + 3 * np.std([1.0, 2.0, 3.0]))
    s = np.random.default_rng(2).exponential(size=20_000)
    g = pot_fit(s, method="grimshaw")
    assert g.method == "grimshaw"
    assert abs(g.threshold - 9.21) / 9.21 <= 0.10


def test_pot_gpd_tail_oracle():
    from scipy.stats import genpareto

    r = np.random.default_rng(3)
    s = genpareto.rvs(0.1, scale=1.0, size=1_000_000, random_state=r)
    pot = pot_fit(s[:50_000], 0.07, 1e-4)
    brute = float(np.quantile(s, 1 - 1e-4))
    assert abs(pot.threshold - brute) / brute <= 0.10


def test_label_boundaries():
    pot = pot_fit(np.random.default_rng(0).exponential(size=1000))
    assert label(pot.threshold, pot)
    assert not label(0.0, pot)
    np.testing.assert_array_equal(label_hosts([0.0, pot.threshold], pot), [False, True])


def test_injected_spike_detected():
    hits = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        clean = np.abs(r.normal(0.1, 0.03, size=500))
        pot = pot_fit(clean)
        hits += label(10 * clean.mean(), pot)
    assert hits >= 95


def test_point_adjust_examples():
    np.testing.assert_array_equal(point_adjust([0, 0, 1, 0], [0, 1, 1, 0]), [0, 1, 1, 0])
    np.testing.assert_array_equal(point_adjust([0, 0, 0, 0], [0, 1, 1, 0]), [0, 0, 0, 0])
    np.testing.assert_array_equal(point_adjust([1, 0, 1, 0], [0, 0, 0, 0]), [1, 0, 1, 0])


def test_metric_examples():
    t = np.array([0, 1, 1, 0, 1, 0], bool)
    m = detection_metrics(t, t, t.astype(float))
    assert m["accuracy"] == m["precision"] == m["recall"] == m["f1"] == m["auroc"] == 1.0
    bal = np.array([0, 1] * 50, bool)
    assert detection_metrics(~bal, bal, adjust=False)["accuracy"] == 0.0
    r = np.random.default_rng(0)
    a = auroc(r.uniform(size=10_000), r.uniform(size=10_000) < 0.5)
    assert abs(a - 0.5) <= 0.02


def test_degenerate_precision_flagged():
    m = detection_metrics(np.zeros(10, bool), np.zeros(10, bool), np.zeros(10))
    assert m["precision"] == 0.0 and m["precision_undefined"]
    assert math.isnan(m["auroc"])


def test_auroc_ties_half_credit():
    assert auroc([0.5, 0.5], [True, False]) == pytest.approx(0.5)


def test_diagnosis_examples():
    d = diagnosis_metrics([0.9, 0.8, 0.1, 0.0], [0, 1])
    assert d == {"hitrate_100": 1.0, "ndcg_100": 1.0}
    assert diagnosis_metrics([0.9, 0.8], [1])["hitrate_100"] == 0.0
    d = diagnosis_metrics([0.9, 0.5, 0.7, 0.0], [0, 1])
    assert d["hitrate_100"] == 0.5
    assert d["ndcg_100"] == pytest.approx(1 / (1 + 1 / math.log2(3)), abs=1e-3)
    assert d["ndcg_100"] == pytest.approx(0.613, abs=1e-3)


def test_diagnosis_series_skips_clean_rows():
    sc = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.4]])
    tr = np.array([[1, 0], [0, 0], [0, 1]], bool)
    assert diagnosis_series(sc, tr)["hitrate_100"] == 0.5


def test_tracker_ignores_alarms():
    tr = PotTracker(history=50)
    for v in np.random.default_rng(0).exponential(size=40):
        tr.observe(v)
    thr = tr.threshold()
    tr.observe(1e6, flagged=True)
    assert tr.threshold() == thr
    c = tr.copy()
    c.observe(0.1)
    assert len(tr.scores) == 40 and len(c.scores) == 41


@settings(max_examples=200)
@given(hnp.arrays(float, st.integers(30, 300), elements=st.floats(0, 100)), st.floats(0.01, 0.2))
def test_pot_state_invariants(scores, q_low):
    pot = pot_fit(scores, q_low, 1e-4)
    assert pot.sigma_hat > 0
    assert pot.n_excess <= pot.n_total
    if pot.method != "warmup" and 1e-4 < pot.n_excess / pot.n_total:
        assert pot.threshold >= pot.u - 1e-9
