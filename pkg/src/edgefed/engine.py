"""Decentralized detection and remediation loops (DRAGON and DRAGON+).

Every broker co-simulates the next interval of the federation, generates
a data-like version of its LEI window with its GON, scores and labels its
hosts, and, when some are flagged, anneals a set of cross-LEI migrations
against the simulator's fitness. DRAGON+ repeats this on a fictitious
rollout for ``N`` intervals and folds the decisions together.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gon
from .autodiff import ContractError, NumericalError
from .detection import Normalizer, PotTracker, fault_score
from .federation import FederationSpec, topology_graph
from .gon import GenerationConfig, GonConfig, GonNetwork, Sample, TrainConfig
from .simulator import (
    SimConfig,
    SimState,
    begin_interval,
    fitness_value,
    host_window,
    init_state,
    schedule_pending,
    step,
    task_window,
)
from .workload import ground_truth

log = logging.getLogger(__name__)

MODES = ("none", "dragon", "dragon_plus")


# ---------------------------------------------------------------- configs


@dataclass
class AnnealerConfig:
    initial_temp: float = 1.0
    cooling: float = 0.95
    iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cooling < 1.0:
            raise ContractError("cooling factor must lie in (0, 1)")
        if self.iterations < 1:
            raise ContractError("annealer needs at least one iteration")
        if self.initial_temp <= 0:
            raise ContractError("initial temperature must be positive")


@dataclass
class EngineMode:
    variant: str = "dragon"
    N: int = 1

    def __post_init__(self):
        if self.variant not in MODES:
            raise ContractError(f"unknown mode {self.variant!r}")
        if self.N < 1:
            raise ContractError("look-ahead N must be >= 1")
        if self.variant == "dragon" and self.N != 1:
            raise ContractError("dragon is the N = 1 case; use dragon_plus for N > 1")

    @property
    def remediates(self):
        return self.variant != "none"


def default_window(N):
    """Window length: 10 for single-step DRAGON, 5 with look-ahead."""
    return 10 if N == 1 else 5


@dataclass
class EngineConfig:
    mode: EngineMode = field(default_factory=EngineMode)
    k: int | None = None
    annealer: AnnealerConfig = field(default_factory=AnnealerConfig)
    generation: GenerationConfig = field(
        default_factory=lambda: GenerationConfig(gamma=1e-3, max_iters=5, convergence_eps=0.0, hutchinson_samples=1)
    )
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4))
    hidden: int = 128
    tau: float = 0.05
    q_low: float = 0.07
    q_risk: float = 1e-4
    pot_history: int = 500
    init_prob: float = 0.5
    finetune: bool = True
    pretrain_epochs: int = 3
    calibration_intervals: int = 100
    calibration_seed: int = 12345
    threads: int = 1  # >1: broker ticks on a thread pool (same results)

    @property
    def window(self):
        return self.k if self.k is not None else default_window(self.mode.N)


# ---------------------------------------------------------------- migrations


def as_decision(M):
    """Canonical immutable form: sorted tuple of (task_id, host) pairs."""
    if isinstance(M, dict):
        M = M.items()
    return tuple(sorted((int(a), int(b)) for a, b in M))


@dataclass
class NeighborContext:
    """What the annealer may touch.

    ``eligible`` maps task id to its current LEI; ``targets`` maps each
    live LEI to the host that receives migrations into it.
    """

    eligible: dict
    targets: dict
    lei_of: np.ndarray

    def options(self, tid):
        return [l for l in sorted(self.targets) if l != self.eligible[tid]]


def neighbor(M, rng, ctx: NeighborContext):
    """One edit: add a migration for an unmigrated task, or retarget one.

    Retargeting to the task's own LEI cancels the migration. Returns None
    when no move exists.
    """
    cur = dict(M)
    addable = [t for t in sorted(ctx.eligible) if t not in cur and ctx.options(t)]
    movable = []
    for t in sorted(cur):
        now = int(ctx.lei_of[cur[t]])
        alts = [l for l in sorted(ctx.targets) if l != now]
        if alts:
            movable.append((t, alts))
    kinds = [k for k, ok in (("add", addable), ("move", movable)) if ok]
    if not kinds:
        return None
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "add":
        t = addable[int(rng.integers(len(addable)))]
        opts = ctx.options(t)
        cur[t] = ctx.targets[opts[int(rng.integers(len(opts)))]]
    else:
        t, alts = movable[int(rng.integers(len(movable)))]
        lei = alts[int(rng.integers(len(alts)))]
        if lei == ctx.eligible[t]:
            del cur[t]
        else:
            cur[t] = ctx.targets[lei]
    return as_decision(cur)


@dataclass
class AnnealResult:
    decision: tuple
    fitness: float
    initial_fitness: float
    evaluations: int
    skipped: int
    accepted: int


def anneal(M0, fitness_fn, cfg: AnnealerConfig, neighbor_fn, rng=None):
    """Metropolis search minimizing ``fitness_fn``; returns the best decision seen.

    ``neighbor_fn(M, rng)`` proposes a neighbor or None. Candidates whose
    fitness evaluation raises are skipped and counted.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cache = {}

    def f(M):
        if M not in cache:
            cache[M] = float(fitness_fn(M))
        return cache[M]

    cur = as_decision(M0)
    fc = f(cur)
    best, fb = cur, fc
    T = cfg.initial_temp
    skipped = accepted = 0
    for _ in range(cfg.iterations):
        cand = neighbor_fn(cur, rng)
        if cand is None:
            break
        try:
            fn = f(cand)
        except (ContractError, NumericalError, ValueError):
            skipped += 1
            T *= cfg.cooling
            continue
        if not math.isfinite(fn):
            skipped += 1
            T *= cfg.cooling
            continue
        d = fn - fc
        if d <= 0 or rng.random() < math.exp(-d / max(T, 1e-300)):
            cur, fc = cand, fn
            accepted += 1
        if fn < fb:
            best, fb = cand, fn
        T *= cfg.cooling
    return AnnealResult(best, fb, f(as_decision(M0)), len(cache), skipped, accepted)


def merge_lookahead(decisions, live_lei):
    """Fold per-step decisions; a later step's target replaces an earlier one.

    Pairs whose final target lies in the task's live LEI are dropped.
    """
    merged = {}
    for M in decisions:
        for tid, h in M:
            merged[tid] = h
    return {t: h for t, h in merged.items() if live_lei.get(t) is not None and live_lei[t] != -1}


def merge_brokers(per_broker):
    """Set union of broker decisions; a task keeps the lowest broker id's target."""
    out = {}
    for bid in sorted(per_broker):
        for tid, h in per_broker[bid]:
            out.setdefault(tid, h)
    return out


# ---------------------------------------------------------------- windows


def lei_rows(spec: FederationSpec, lei_id):
    return sorted(spec.leis[lei_id].hosts)


def lei_window(state: SimState, lei_id, k, norm: Normalizer, placement=None):
    """Normalized LEI window ``(m+p, n, k)``, schedule ``(p, m)`` and task ids."""
    hosts = lei_rows(state.spec, lei_id)
    hw = host_window(state, k)[hosts]  # (m, n, k)
    placement = placement or {}
    tasks = []
    for x in sorted(state.tasks.values(), key=lambda x: x.id):
        h = x.host if x.host is not None else placement.get(x.id)
        if h is not None and h in hosts:
            tasks.append((x, h))
    rows = [hw] + ([np.stack([task_window(x, k) for x, _ in tasks])] if tasks else [])
    W = np.concatenate(rows, axis=0)
    S = np.zeros((len(tasks), len(hosts)))
    for i, (_, h) in enumerate(tasks):
        S[i, hosts.index(h)] = 1.0
    Wn = np.moveaxis(norm.normalize(np.moveaxis(W, 1, -1)), -1, 1)
    return Wn, S, [x.id for x, _ in tasks]


def global_host_window(state: SimState, k, norm: Normalizer):
    hw = host_window(state, k)  # (H, n, k)
    return np.moveaxis(norm.normalize(np.moveaxis(hw, 1, -1)), -1, 1)


def graph_for(state: SimState, lei_id, k, norm):
    gw = global_host_window(state, k, norm)
    return topology_graph(state.spec, gw.reshape(state.H, -1), lei_id, state.brokers)


@dataclass(frozen=True)
class GlobalWindows:
    """Snapshot exchanged by brokers at interval ``t`` (read-only)."""

    t: int
    W: np.ndarray  # (H, n, k) co-simulated next host window
    W_hat: np.ndarray  # (H, n, k) generated counterpart, per LEI
    thresholds: np.ndarray  # (H,) pooled threshold of each host's broker
    labels: np.ndarray  # (H,) bool

    def count_faulty(self, W_next):
        up = np.maximum(np.asarray(W_next) - self.W_hat, 0.0)
        per = np.sqrt(np.sum(up.reshape(up.shape[0], -1) ** 2, axis=1))
        return int(np.sum(per >= self.thresholds))


# ---------------------------------------------------------------- brokers


@dataclass
class DetectionResult:
    lei: int
    hosts: list
    per_host: np.ndarray
    threshold: float
    labels: np.ndarray
    W_next: np.ndarray
    W_hat: np.ndarray
    S: np.ndarray
    graph: object
    degraded: bool = False


class BrokerAgent:
    """Detection state and model owned by one LEI broker."""

    def __init__(self, lei_id, net: GonNetwork, norm: Normalizer, cfg: EngineConfig, pot_seed=()):
        self.lei_id = lei_id
        self.net = net
        self.norm = norm
        self.cfg = cfg
        self.pot = PotTracker(cfg.q_low, cfg.q_risk, cfg.pot_history)
        for s in pot_seed:
            self.pot.observe(s)

    def detect(self, cur: SimState, placement, nxt: SimState, rng):
        """Generate from the current LEI window and score the co-simulated next one.

        Rows are aligned on the LEI hosts plus the tasks present in both
        windows (completed tasks drop out of the next window).
        """
        k = self.cfg.window
        hosts = lei_rows(cur.spec, self.lei_id)
        m = len(hosts)
        W0, S0, ids0 = lei_window(cur, self.lei_id, k, self.norm, placement)
        res = gon.generate(self.net, graph_for(cur, self.lei_id, k, self.norm), W0, S0,
                           self.cfg.generation, rng, return_info=True)
        W1, S1, ids1 = lei_window(nxt, self.lei_id, k, self.norm)
        pos1 = {tid: i for i, tid in enumerate(ids1)}
        common = [i for i, tid in enumerate(ids0) if tid in pos1]
        rows0 = list(range(m)) + [m + i for i in common]
        rows1 = list(range(m)) + [m + pos1[ids0[i]] for i in common]
        W_next = W1[rows1]
        W_hat = res.window[rows0]
        S = S1[[pos1[ids0[i]] for i in common]].reshape(len(common), m)
        _, per = fault_score(W_next, W_hat, m)
        thr = self.pot.threshold()
        labels = per >= thr
        return DetectionResult(self.lei_id, hosts, per, thr, labels, W_next, W_hat, S,
                               graph_for(nxt, self.lei_id, k, self.norm), res.degraded)

    def observe(self, det: DetectionResult):
        for s, flag in zip(det.per_host, det.labels):
            self.pot.observe(s, bool(flag))

    def finetune(self, det: DetectionResult):
        if det.degraded:
            return math.nan
        try:
            return gon.finetune(self.net, det.graph, det.W_next, det.W_hat, det.S, self.cfg.train)
        except NumericalError:
            return math.nan


def compile_windows(t, nxt: SimState, dets, k, norm, H):
    W = global_host_window(nxt, k, norm)
    W_hat = W.copy()
    thr = np.full(H, np.inf)
    labels = np.zeros(H, dtype=bool)
    for d in dets:
        W_hat[d.hosts] = d.W_hat[: len(d.hosts)]
        thr[d.hosts] = d.threshold
        labels[d.hosts] = d.labels
    return GlobalWindows(t, W, W_hat, thr, labels)


def host_load(state: SimState, placement=None):
    """Tasks per host, counting this interval's placements."""
    placement = placement or {}
    load = np.zeros(state.H)
    for x in state.tasks.values():
        h = x.host if x.host is not None else placement.get(x.id)
        if h is not None:
            load[h] += 1
    return load


def _pick(state: SimState, lei_id, load, util, avoid):
    live = [h for h in state.spec.leis[lei_id].hosts if state.alive[h]]
    pref = [h for h in live if h not in avoid] or live
    return min(pref, key=lambda h: (load[h], util[h], h)) if pref else None


def least_utilized_targets(state: SimState, placement=None, avoid=()):
    """Least-loaded live host per LEI, skipping flagged hosts when the LEI has others."""
    load, util = host_load(state, placement), state.cpu_util()
    out = {}
    for lei in state.spec.leis:
        if state.lei_dead[lei.id]:
            continue
        h = _pick(state, lei.id, load, util, avoid)
        if h is not None:
            out[lei.id] = h
    return out


def spread_targets(state: SimState, M, placement=None, avoid=()):
    """Place migrating tasks inside their target LEI like incoming tasks.

    A decision names a host only to identify the target LEI; tasks are
    assigned in id order to the least-loaded eligible host of that LEI,
    counting the tasks already sent there.
    """
    placement = placement or {}
    load, util = host_load(state, placement), state.cpu_util()
    lei_of = state.spec.lei_of()
    out = {}
    for tid, h in sorted(dict(M).items()):
        x = state.tasks[tid]
        src = x.host if x.host is not None else placement.get(tid)
        if src is not None:
            load[src] -= 1
        g = _pick(state, int(lei_of[h]), load, util, avoid)
        load[g] += 1
        out[tid] = g
    return out


def eligible_tasks(state: SimState, lei_id, placement):
    lei_of = state.spec.lei_of()
    out = {}
    for x in sorted(state.tasks.values(), key=lambda x: x.id):
        h = x.host if x.host is not None else placement.get(x.id)
        if h is not None and lei_of[h] == lei_id:
            out[x.id] = int(lei_of[h])
    return out


def initial_decision(state, omega, placement, targets, lei_id, rng, prob=0.5):
    """Each task on a flagged host migrates w.p. ``prob`` to a random other LEI."""
    M = {}
    for x in sorted(state.tasks.values(), key=lambda x: x.id):
        h = x.host if x.host is not None else placement.get(x.id)
        if h is None or h not in omega:
            continue
        opts = [l for l in sorted(targets) if l != lei_id]
        if opts and rng.random() < prob:
            M[x.id] = targets[opts[int(rng.integers(len(opts)))]]
    return as_decision(M)


def make_fitness(base: SimState, placement, snapshot: GlobalWindows, k, norm, avoid=()):
    def fn(M):
        nxt, out = step(base, placement, spread_targets(base, M, placement, avoid))
        n_pred = snapshot.count_faulty(global_host_window(nxt, k, norm))
        q = out.qos
        return fitness_value(q.qos_projected, n_pred, base.H, q.migration_overhead, base.cfg)

    return fn


def broker_rng(seed, t, lei, stepk, purpose):
    return np.random.default_rng([int(seed), int(t), int(lei), int(stepk), int(purpose)])


def _map(threads, fn, items):
    """Ordered map; broker ticks are independent so a thread pool gives identical results."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def plan_step(base: SimState, placement, agents, cfg: EngineConfig, seed, t, stepk, omega_prev=None):
    """Detection on every broker plus one annealing round per flagged LEI.

    Works on the (fictitious) ``base`` state; returns per-broker decisions,
    the detections and the snapshot.
    """
    k = cfg.window
    nxt, _ = step(base, placement, {})
    live_leis = [lid for lid in sorted(agents) if not base.lei_dead[lid]]
    dets = _map(cfg.threads, lambda lid: agents[lid].detect(base, placement, nxt,
                                                             broker_rng(seed, t, lid, stepk, 0)), live_leis)
    snap = compile_windows(t + stepk, nxt, dets, k, agents[min(agents)].norm, base.H)
    omega_all = set(np.nonzero(snap.labels)[0].tolist())
    if omega_prev:
        omega_all |= set(omega_prev)
    targets = least_utilized_targets(base, placement, omega_all)
    lei_of = base.spec.lei_of()
    fit = make_fitness(base, placement, snap, k, agents[min(agents)].norm, omega_all)

    def tick(d):
        omega = {h for h in omega_all if lei_of[h] == d.lei}
        if not omega:
            return ()
        rng = broker_rng(seed, t, d.lei, stepk, 1)
        M0 = initial_decision(base, omega, placement, targets, d.lei, rng, cfg.init_prob)
        ctx = NeighborContext(eligible_tasks(base, d.lei, placement), targets, lei_of)
        return anneal(M0, fit, cfg.annealer, lambda M, r: neighbor(M, r, ctx), rng).decision

    decisions = dict(zip([d.lei for d in dets], _map(cfg.threads, tick, dets)))
    return decisions, dets, snap, omega_all


# ---------------------------------------------------------------- experiment


@dataclass
class IntervalRow:
    t: int
    truth: np.ndarray
    pred: np.ndarray
    scores: np.ndarray
    host_features: np.ndarray
    power_w: np.ndarray
    completions: list
    migrations: list
    migration_times: list
    crashed: list
    art: float
    aec: float
    decision_s: float


@dataclass
class ExperimentTrace:
    mode: str
    N: int
    seed: int
    topology: str
    lei_sizes: tuple
    interval_s: float
    apps: tuple
    rows: list = field(default_factory=list)


@dataclass
class Calibration:
    norm: Normalizer
    net: GonNetwork
    pot_seed: np.ndarray
    reference: dict


def _calibration_key(spec: FederationSpec, sim_cfg: SimConfig, cfg: EngineConfig):
    d = {
        "spec": [asdict(h) for h in spec.hosts],
        "leis": [lei.hosts for lei in spec.leis],
        "sim": {k: v for k, v in asdict(sim_cfg).items()},
        "k": cfg.window,
        "hidden": cfg.hidden,
        "tau": cfg.tau,
        "epochs": cfg.pretrain_epochs,
        "T": cfg.calibration_intervals,
        "seed": cfg.calibration_seed,
        "gen": asdict(cfg.generation),
        "train": asdict(cfg.train),
    }
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _run_plain(spec, sim_cfg, seed, T):
    st = init_state(spec, sim_cfg, seed)
    states, outs = [], []
    for _ in range(T):
        begin_interval(st)
        S = schedule_pending(st)
        states.append((st, S))
        st, out = step(st, S, {})
        outs.append((st, out))
    return states, outs


def calibrate(spec: FederationSpec, sim_cfg: SimConfig, cfg: EngineConfig, cache_dir=None):
    """Fit the normalizer, pretrain the broker model and seed POT from calibration runs.

    The SLO reference percentiles come from a separate fault-free run.
    Results are cached on disk when ``cache_dir`` is given.
    """
    from dataclasses import replace as dc_replace

    from .metrics_io import reference_percentiles

    key = _calibration_key(spec, sim_cfg, cfg)
    path = os.path.join(cache_dir, f"calib-{key}.npz") if cache_dir else None
    if path and os.path.exists(path):
        net, extra = gon.load_checkpoint(path)
        ref = json.loads(bytes(extra["reference"]).decode())
        return Calibration(Normalizer(extra["lo"], extra["hi"]), net, extra["pot_seed"], ref)

    k = cfg.window
    clean = dc_replace(sim_cfg, fault_model=dc_replace(sim_cfg.fault_model, rate=0.0))
    states, outs = _run_plain(spec, clean, cfg.calibration_seed, cfg.calibration_intervals)
    by_app = {}
    for _, out in outs:
        for c in out.completions:
            by_app.setdefault(sim_cfg.profiles[c.app].name, []).append(c.response_s)
    reference = reference_percentiles(by_app)

    # the faulted run only fixes the normalization range (fault levels must not clip)
    _, fouts = _run_plain(spec, sim_cfg, cfg.calibration_seed + 1, cfg.calibration_intervals)
    rows = []
    for st, out in outs + fouts:
        rows.append(out.host_features)
        rows.extend(x.history[-1][None] for x in st.tasks.values() if x.history)
    norm = Normalizer.fit(np.concatenate(rows, axis=0))

    # the model and the POT tail are fitted on fault-free behaviour
    samples = []
    for st, S in states:
        for lei in spec.leis:
            W, Sm, _ = lei_window(st, lei.id, k, norm, S)
            samples.append(Sample(graph_for(st, lei.id, k, norm), W, Sm))
    m_max = max(spec.lei_sizes)
    net = GonNetwork(GonConfig(n=W.shape[1], k=k, m_max=m_max, hidden=cfg.hidden, tau=cfg.tau,
                               seed=cfg.calibration_seed))
    rng = np.random.default_rng(cfg.calibration_seed)
    tc = dc_replace(cfg.train, generation=cfg.generation)
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(samples))
        for i in range(0, len(order), tc.m_batch):
            gon.train_minibatch(net, [samples[j] for j in order[i : i + tc.m_batch]], tc.m_batch, rng, tc)

    scores = []
    for i, ((st, S), (nxt, _)) in enumerate(zip(states, outs)):
        for lei in spec.leis:
            agent = BrokerAgent(lei.id, net, norm, cfg)
            det = agent.detect(st, S, nxt, np.random.default_rng([cfg.calibration_seed, i, lei.id]))
            scores.extend(det.per_host.tolist())
    pot_seed = np.array(scores[-cfg.pot_history:])
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        gon.save_checkpoint(net, path, {"lo": norm.lo, "hi": norm.hi, "pot_seed": pot_seed,
                                        "reference": np.frombuffer(json.dumps(reference).encode(), dtype=np.uint8)})
    return Calibration(norm, net, pot_seed, reference)


def run_experiment(spec: FederationSpec, sim_cfg: SimConfig, cfg: EngineConfig, seed=0, T=100,
                   calibration: Calibration | None = None, cache_dir=None, progress=None):
    """Drive ``T`` live intervals; returns an :class:`ExperimentTrace`."""
    mode = cfg.mode
    k = cfg.window
    if sim_cfg.history < k:
        raise ContractError("simulator history shorter than the window")
    live = init_state(spec, sim_cfg, seed)
    trace = ExperimentTrace(mode.variant, mode.N, seed, spec.name, spec.lei_sizes, sim_cfg.interval_s,
                            tuple(p.name for p in sim_cfg.profiles))
    agents = {}
    if mode.remediates:
        calibration = calibration or calibrate(spec, sim_cfg, cfg, cache_dir)
        for lei in spec.leis:
            agents[lei.id] = BrokerAgent(lei.id, calibration.net.copy(), calibration.norm, cfg,
                                         calibration.pot_seed)
    future_pred = {}
    for t in range(T):
        begin_interval(live)
        S = schedule_pending(live)
        t0 = time.perf_counter()
        M = {}
        scores = np.zeros(spec.H)
        if mode.remediates:
            M, scores, preds = _decide(live, S, agents, cfg, seed, t)
            for j, p in enumerate(preds):
                future_pred[t + j] = future_pred.get(t + j, np.zeros(spec.H, dtype=bool)) | p
        decision_s = time.perf_counter() - t0
        truth = ground_truth(live.faults, t, spec.H)
        pred = future_pred.pop(t, np.zeros(spec.H, dtype=bool))
        live, out = step(live, S, M)
        trace.rows.append(IntervalRow(t, truth, pred, scores, out.host_features, out.host_power_w,
                                      out.completions, sorted(M.items()), out.migration_times, out.crashed,
                                      out.qos.art, out.qos.aec, decision_s))
        if progress:
            progress(t, out)
    return trace


def _decide(live: SimState, S, agents, cfg: EngineConfig, seed, t):
    """All broker ticks for interval ``t`` (with look-ahead for DRAGON+)."""
    N = cfg.mode.N
    base = live.observed_clone()
    placement = dict(S)
    steps, preds = [], []
    scores = np.zeros(live.H)
    omega = None
    first_dets = None
    for j in range(N):
        decisions, dets, snap, omega = plan_step(base, placement, agents, cfg, seed, t, j, omega)
        preds.append(snap.labels.copy())
        if j == 0:
            first_dets = dets
            for d in dets:
                scores[d.hosts] = d.per_host
        steps.append(as_decision(merge_brokers(decisions)))
        if j + 1 < N:
            base, _ = step(base, placement, spread_targets(base, steps[-1], placement, omega))
            placement = schedule_pending(base)
    lei_of = live.spec.lei_of()
    live_lei = {}
    for x in live.tasks.values():
        h = x.host if x.host is not None else S.get(x.id)
        live_lei[x.id] = -1 if h is None else int(lei_of[h])
    merged = merge_lookahead(steps, live_lei)
    M = {tid: h for tid, h in merged.items() if lei_of[h] != live_lei[tid] and live.alive[h]}
    M = spread_targets(live, M, S, omega)
    for d in first_dets:
        agents[d.lei].observe(d)
        if cfg.finetune:
            agents[d.lei].finetune(d)
    return M, scores, preds
