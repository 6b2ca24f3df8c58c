"""Interval-stepped co-simulator of the edge federation.

One call to :func:`step` advances a 300 s scheduling interval: placements
and migrations are applied, tasks share their host's CPU by processor
sharing (event driven inside the interval), active faults degrade the
attacked resource, and per-host / per-task utilization rows are recorded.
The live state is never touched by :func:`sim_qos` or :func:`fitness`.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractError
from .federation import FederationSpec, reassign_broker
from .workload import (
    DEFAULT_PROFILES,
    FaultModel,
    N_FEATURES,
    Task,
    inject_faults,
    sample_arrivals,
    schedule,
)

CPU, RAM, SWAP, DISK, NET = range(N_FEATURES)


@dataclass
class SimConfig:
    interval_s: float = 300.0
    history: int = 10
    arrival_rate: float = 1.2
    arrival_scope: str = "lei"  # "lei": rate per LEI, "global": rate for the federation
    profiles: tuple = DEFAULT_PROFILES
    fault_model: FaultModel = field(default_factory=FaultModel)
    scheduler: str = "least_util"
    overload_cap: float = 0.5
    swap_slowdown: float = 10.0
    io_slowdown: float = 40.0
    os_ram_frac: float = 0.1
    swap_share: float = 0.5  # swap pressure added by a RAM attack at full intensity
    crash_prob: float = 0.3  # per faulty, busy host and interval (scaled by intensity)
    down_intervals: int = 1
    slo_multiplier: float = 2.0
    alpha: float = 0.5
    beta: float = 0.5
    delta1: float = 0.5
    delta2: float = 0.5
    qos_mode: str = "cost"  # "cost": a*ART + b*AEC, "signed": a*ART - b*AEC

    def __post_init__(self):
        if self.qos_mode not in ("cost", "signed"):
            raise ContractError(f"qos_mode must be 'cost' or 'signed', got {self.qos_mode!r}")
        if self.arrival_scope not in ("lei", "global"):
            raise ContractError("arrival_scope must be 'lei' or 'global'")
        if self.interval_s <= 0 or self.history < 1:
            raise ContractError("interval_s must be > 0 and history >= 1")


@dataclass
class QosRecord:
    art: float
    aec: float
    qos: float
    n_pred_anomalies: int = 0
    migration_overhead: float = 0.0
    fitness: float = math.nan
    art_projected: float = 0.0  # completed plus projected responses of unfinished tasks
    qos_projected: float = 0.0


@dataclass
class Completion:
    task_id: int
    app: int
    arrival: int
    response_s: float
    restarts: int
    migrations: int


@dataclass
class IntervalOutcome:
    """What happened during one interval (consumed by the trace writer)."""

    t: int
    host_features: np.ndarray
    host_power_w: np.ndarray
    work_done: np.ndarray
    completions: list
    migration_times: list
    crashed: list
    qos: QosRecord


@dataclass
class SimState:
    t: int
    spec: FederationSpec
    cfg: SimConfig
    brokers: list
    lei_dead: list
    host_down: np.ndarray  # intervals of downtime left, 0 = alive
    tasks: dict
    faults: list
    host_hist: list  # last ``cfg.history`` host feature rows, oldest first
    max_response_s: float
    max_migration_s: float
    next_task_id: int = 0
    rngs: dict = field(default_factory=dict)
    fictitious: bool = False

    @property
    def H(self):
        return self.spec.H

    @property
    def alive(self):
        return self.host_down == 0

    def clone(self):
        other = copy.copy(self)
        other.brokers = list(self.brokers)
        other.lei_dead = list(self.lei_dead)
        other.host_down = self.host_down.copy()
        other.tasks = {k: v.copy() for k, v in self.tasks.items()}
        other.faults = list(self.faults)
        other.host_hist = list(self.host_hist)
        other.rngs = {k: copy.deepcopy(v) for k, v in self.rngs.items()}
        return other

    def observed_clone(self):
        """Clone for fictitious play.

        Only faults that were visible in the last measured interval are
        kept, and they are assumed to persist; no arrivals, new faults or
        crashes are sampled.
        """
        other = self.clone()
        other.faults = [replace(f, duration=10**9) for f in self.faults if f.start < self.t and f.active(self.t - 1)]
        other.fictitious = True
        return other

    def cpu_util(self):
        return self.host_hist[-1][:, CPU].copy()

    def active_faults(self, t=None):
        t = self.t if t is None else t
        return [f for f in self.faults if f.active(t)]

    def pending(self):
        return [x for x in self.tasks.values() if x.host is None]

    def tasks_on(self, h):
        return [x for x in self.tasks.values() if x.host == h]

    def lei_hosts(self):
        return {lei.id: lei.hosts for lei in self.spec.leis}


def init_state(spec: FederationSpec, cfg: SimConfig, seed: int = 0) -> SimState:
    ss = np.random.SeedSequence(seed)
    names = ("arrivals", "faults", "crash", "sched")
    rngs = {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}
    idle = np.zeros((spec.H, N_FEATURES))
    idle[:, RAM] = cfg.os_ram_frac
    return SimState(
        t=0,
        spec=spec,
        cfg=cfg,
        brokers=list(spec.brokers),
        lei_dead=[False] * len(spec.leis),
        host_down=np.zeros(spec.H, dtype=int),
        tasks={},
        faults=[],
        host_hist=[idle] * cfg.history,
        max_response_s=cfg.interval_s,
        max_migration_s=cfg.interval_s,
        rngs=rngs,
    )


def energy_model(host, cpu_util):
    """Linear power model in watts."""
    return host.power_idle_w + (host.power_max_w - host.power_idle_w) * min(max(cpu_util, 0.0), 1.0)


def begin_interval(state: SimState):
    """Sample arrivals and new faults for interval ``state.t`` (live state only)."""
    if state.fictitious:
        return []
    cfg = state.cfg
    new = []
    rng = state.rngs["arrivals"]
    if cfg.arrival_scope == "lei":
        for lei in state.spec.leis:
            batch = sample_arrivals(rng, state.t, lei.id, cfg.arrival_rate, cfg.profiles,
                                    state.next_task_id, cfg.interval_s, cfg.slo_multiplier)
            state.next_task_id += len(batch)
            new.extend(batch)
    else:
        batch = sample_arrivals(rng, state.t, -1, cfg.arrival_rate, cfg.profiles,
                                state.next_task_id, cfg.interval_s, cfg.slo_multiplier)
        n_lei = len(state.spec.leis)
        for x in batch:
            x.lei = int(rng.integers(n_lei))
        state.next_task_id += len(batch)
        new.extend(batch)
    for x in new:
        state.tasks[x.id] = x
    state.faults.extend(inject_faults(state.rngs["faults"], state.t, np.arange(state.H), cfg.fault_model))
    return new


def schedule_pending(state: SimState, policy=None):
    policy = policy or state.cfg.scheduler
    return schedule(state.pending(), state.lei_hosts(), state.cpu_util(), policy,
                    state.rngs["sched"], state.alive)


def validate_migrations(state: SimState, M, placement=None):
    """Check the migration decision invariants; returns a normalized dict."""
    if isinstance(M, dict):
        pairs = list(M.items())
    else:
        pairs = list(M or ())
    seen = set()
    lei_of = state.spec.lei_of()
    placement = placement or {}
    for tid, h in pairs:
        if tid in seen:
            raise ContractError(f"task {tid} appears twice in the migration decision")
        seen.add(tid)
        if tid not in state.tasks:
            raise ContractError(f"migration of unknown task {tid}")
        if not 0 <= h < state.H or not state.alive[h]:
            raise ContractError(f"migration target {h} is not a live host")
        task = state.tasks[tid]
        src = task.host if task.host is not None else placement.get(tid)
        if src is not None and lei_of[src] == lei_of[h]:
            raise ContractError(f"task {tid} migration target {h} is inside its current LEI")
    return dict(pairs)


def _restart(task: Task):
    task.remaining_work = task.total_work
    task.host = None
    task.status = "failed"
    task.freeze_s = 0.0
    task.restarts += 1


def _fault_levels(faults, H):
    lv = np.zeros((H, 4))  # cpu, ram, disk, net intensities
    col = {"cpu_overload": 0, "ram_contention": 1, "disk_attack": 2, "ddos_attack": 3}
    for f in faults:
        c = col[f.type]
        lv[f.host, c] = max(lv[f.host, c], f.intensity)
    return lv


def _run_host(tasks, capacity, speed, freeze):
    """Processor sharing over one interval (time unit = interval).

    Returns per-task (cpu_time, progress, finish_time or None, runnable time)
    and the busy fraction of the host.
    """
    n = len(tasks)
    rem = np.array([x.remaining_work for x in tasks], dtype=float)
    cpu = np.zeros(n)
    prog = np.zeros(n)
    run = np.zeros(n)
    fin = [None] * n
    tau, busy = 0.0, 0.0
    while tau < 1.0 - 1e-12:
        active = [i for i in range(n) if fin[i] is None and freeze[i] <= tau + 1e-12 and rem[i] > 0]
        pending_freeze = [freeze[i] for i in range(n) if fin[i] is None and freeze[i] > tau + 1e-12]
        horizon = min(pending_freeze + [1.0])
        if not active:
            tau = horizon
            continue
        share = capacity / len(active)
        rates = np.array([share * speed[i] for i in active])
        with np.errstate(divide="ignore"):
            t_done = np.where(rates > 0, rem[active] / np.where(rates > 0, rates, 1.0), np.inf)
        dt = min(horizon - tau, float(t_done.min()))
        for j, i in enumerate(active):
            if t_done[j] <= dt + 1e-12:
                prog[i] += rem[i]
                rem[i] = 0.0
                fin[i] = tau + dt
            else:
                prog[i] += rates[j] * dt
                rem[i] -= rates[j] * dt
            cpu[i] += share * dt
            run[i] += dt
        busy += dt
        tau += dt
    return cpu, prog, fin, run, busy


def step(state: SimState, S=None, M=None):
    """Advance one interval; returns ``(new_state, IntervalOutcome)``.

    The input state is not modified.
    """
    st = state.clone()
    cfg, spec, t = st.cfg, st.spec, st.t
    lei_of = spec.lei_of()
    S = dict(S or {})
    M = validate_migrations(st, M, S)

    # placements
    for tid in sorted(S):
        task = st.tasks.get(tid)
        if task is None or task.host is not None:
            continue
        h = S[tid]
        if lei_of[h] != task.lei:
            raise ContractError(f"placement of task {tid} outside its LEI")
        if not st.alive[h]:
            _restart(task)
            continue
        task.host = h
        task.status = "running"

    # migrations: frozen for the transfer, then resume on the target
    mig_times = []
    for tid in sorted(M):
        task, h = st.tasks[tid], M[tid]
        src = task.host if task.host is not None else h
        dt = spec.transfer_time(task.state_mb, src, h)
        task.lei = int(lei_of[h])
        task.host = h
        task.status = "migrating"
        task.freeze_s = dt
        task.migrations += 1
        mig_times.append(dt)

    faults = st.active_faults(t)
    lv = _fault_levels(faults, st.H)
    feats = np.zeros((st.H, N_FEATURES))
    power = np.zeros(st.H)
    work = np.zeros(st.H)
    completions = []
    projected = []
    busy_hosts = np.zeros(st.H, dtype=bool)
    for hs in spec.hosts:
        h = hs.id
        if not st.alive[h]:
            power[h] = hs.power_idle_w
            continue
        on = sorted(st.tasks_on(h), key=lambda x: x.id)
        i_cpu, i_ram, i_disk, i_net = lv[h]
        avail = hs.ram_mb * max(1.0 - cfg.os_ram_frac - i_ram, 0.0)
        demand = sum(x.ram_mb for x in on)
        overflow = max(demand - avail, 0.0)
        swap_frac = overflow / demand if demand > 0 else 0.0
        speed = [
            1.0 / ((1.0 + (cfg.swap_slowdown - 1.0) * swap_frac)
                   * (1.0 + cfg.io_slowdown * i_disk * x.disk)
                   * (1.0 + cfg.io_slowdown * i_net * x.net))
            for x in on
        ]
        freeze = [x.freeze_s / cfg.interval_s for x in on]
        cap = hs.cpu_capacity * (1.0 - i_cpu)
        cpu_t, prog, fin, run, busy = _run_host(on, cap, speed, freeze)
        work[h] = float(prog.sum())
        busy_hosts[h] = busy > 0
        task_util = float(cpu_t.sum()) / hs.cpu_capacity
        # demand-based: every runnable task asks for a full core, so queueing shows as overload
        feats[h, CPU] = min(1.0 + cfg.overload_cap, i_cpu + float(run.sum()) / hs.cpu_capacity)
        resident = min(demand, avail)
        feats[h, RAM] = min(1.0, cfg.os_ram_frac + i_ram + resident / hs.ram_mb)
        feats[h, SWAP] = min(1.0, overflow / hs.ram_mb + cfg.swap_share * i_ram)
        feats[h, DISK] = min(1.0, i_disk + float(sum(x.disk * r for x, r in zip(on, run))))
        feats[h, NET] = min(1.0, i_net + float(sum(x.net * r for x, r in zip(on, run))))
        power[h] = energy_model(hs, i_cpu + task_util)
        for j, x in enumerate(on):
            x.remaining_work = max(x.remaining_work - prog[j], 0.0)
            x.freeze_s = max(x.freeze_s - cfg.interval_s, 0.0)
            if x.freeze_s == 0.0:
                x.status = "running"
            x.history.append(np.array([cpu_t[j] / hs.cpu_capacity, x.ram_mb / hs.ram_mb, swap_frac,
                                       x.disk * run[j], x.net * run[j]]))
            if len(x.history) > cfg.history:
                del x.history[0]
            if fin[j] is not None:
                x.remaining_work = 0.0
                x.status = "done"
                x.response_s = (t - x.arrival + fin[j]) * cfg.interval_s
                completions.append(Completion(x.id, x.app, x.arrival, x.response_s, x.restarts, x.migrations))
            else:
                left = x.remaining_work / prog[j] if prog[j] > 0 else math.inf
                projected.append((t + 1 - x.arrival + left) * cfg.interval_s)
    for c in completions:
        del st.tasks[c.task_id]

    # crashes of faulty busy hosts (live only)
    crashed = []
    st.host_down = np.maximum(st.host_down - 1, 0)
    if not st.fictitious and cfg.crash_prob > 0:
        rng = st.rngs["crash"]
        for f in sorted(faults, key=lambda f: (f.host, f.type)):
            h = f.host
            if h in crashed or not busy_hosts[h] or not state.alive[h]:
                continue
            if rng.random() < cfg.crash_prob * f.intensity:
                crashed.append(h)
        for h in crashed:
            st.host_down[h] = cfg.down_intervals
            for x in st.tasks_on(h):
                _restart(x)
                x.lei = int(lei_of[h])
            _fix_broker(st, int(lei_of[h]))
    # recovered hosts may revive a dead LEI
    for lid, dead in enumerate(st.lei_dead):
        if dead and any(st.alive[h] for h in spec.leis[lid].hosts):
            st.lei_dead[lid] = False
            st.brokers[lid] = min(h for h in spec.leis[lid].hosts if st.alive[h])

    # QoS accounting
    responses = [c.response_s for c in completions]
    if responses:
        st.max_response_s = max(st.max_response_s, max(responses))
    total_mig = float(sum(mig_times))
    st.max_migration_s = max(st.max_migration_s, total_mig)
    art = float(np.mean(responses)) / st.max_response_s if responses else 0.0
    aec = float(power.sum() / sum(h.power_max_w for h in spec.hosts))
    o_t = total_mig / st.max_migration_s
    rec = QosRecord(art, aec, qos_term(art, aec, cfg), 0, o_t)
    proj = [min(r / st.max_response_s, 1.0) for r in responses + projected]
    rec.art_projected = float(np.mean(proj)) if proj else 0.0
    rec.qos_projected = qos_term(rec.art_projected, aec, cfg)

    st.host_hist = st.host_hist[1:] + [feats]
    st.t = t + 1
    out = IntervalOutcome(t, feats, power, work, completions, mig_times, crashed, rec)
    return st, out


def _fix_broker(st: SimState, lid):
    lei = st.spec.leis[lid]
    b = st.brokers[lid]
    if st.alive[b]:
        return
    cur = replace(lei, broker=b, workers=tuple(h for h in lei.hosts if h != b))
    util = st.cpu_util()
    new = reassign_broker(cur, util, failed=[h for h in lei.hosts if not st.alive[h]])
    if new.dead:
        st.lei_dead[lid] = True
    else:
        st.brokers[lid] = new.broker


def qos_term(art, aec, cfg: SimConfig):
    if cfg.qos_mode == "signed":
        return cfg.alpha * art - cfg.beta * aec
    return cfg.alpha * art + cfg.beta * aec


def sim_qos(state: SimState, M=None, S=None) -> QosRecord:
    """QoS of the next interval under ``M`` on a fictitious clone."""
    _, out = step(state.observed_clone() if not state.fictitious else state, S, M)
    return out.qos


def fitness_value(qos, n_pred, H, overhead, cfg: SimConfig):
    return qos + cfg.delta1 * n_pred / H + cfg.delta2 * overhead


def fitness(state: SimState, M=None, S=None, detector=None):
    """Annealer objective for ``M``; ``detector(next_state, outcome)`` counts predicted faulty hosts.

    Returns ``(value, QosRecord, next_state)``.
    """
    base = state if state.fictitious else state.observed_clone()
    nxt, out = step(base, S, M)
    n_pred = int(detector(nxt, out)) if detector is not None else 0
    rec = out.qos
    rec.n_pred_anomalies = n_pred
    rec.fitness = fitness_value(rec.qos, n_pred, state.H, rec.migration_overhead, state.cfg)
    return rec.fitness, rec, nxt


def host_window(state: SimState, k):
    """Last ``k`` host feature rows as ``(H, n, k)``."""
    rows = state.host_hist[-k:]
    return np.stack(rows, axis=-1)


def task_window(task: Task, k):
    """Task feature rows as ``(n, k)``, replication padded (zeros before any history)."""
    hist = task.history[-k:]
    if not hist:
        return np.zeros((N_FEATURES, k))
    pad = [hist[0]] * (k - len(hist))
    return np.stack(pad + hist, axis=-1)
