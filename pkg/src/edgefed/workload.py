"""Seeded task arrivals, fault injection and placement schedulers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError

FEATURES = ("cpu", "ram", "swap", "disk", "net")
N_FEATURES = len(FEATURES)
FAULT_FEATURES = {
    "cpu_overload": ("cpu",),
    "ram_contention": ("ram", "swap"),
    "disk_attack": ("disk",),
    "ddos_attack": ("net",),
}
FAULT_TYPES = tuple(FAULT_FEATURES)


@dataclass(frozen=True)
class AppProfile:
    name: str
    heavy: bool
    mean_work: float  # host-interval units
    work_cv: float
    ram_mb: float
    state_mb: float
    disk: float  # fraction of a host's disk bandwidth while running
    net: float


DEFAULT_PROFILES = (
    AppProfile("ResNet18", True, 1.5, 0.2, 900, 150, 0.12, 0.06),
    AppProfile("ResNet34", True, 2.0, 0.2, 1100, 200, 0.12, 0.06),
    AppProfile("ResNext32x4d", True, 2.5, 0.2, 1400, 250, 0.15, 0.08),
    AppProfile("SqueezeNet", False, 0.3, 0.2, 200, 40, 0.06, 0.12),
    AppProfile("GoogleNet", False, 0.8, 0.2, 500, 80, 0.06, 0.12),
    AppProfile("MobileNetV2", False, 0.5, 0.2, 300, 50, 0.06, 0.12),
    AppProfile("MnasNet", False, 0.4, 0.2, 250, 45, 0.06, 0.12),
)


def validate_profiles(profiles):
    heavy = [p for p in profiles if p.heavy]
    light = [p for p in profiles if not p.heavy]
    if heavy and light:
        if min(p.mean_work for p in heavy) <= max(p.mean_work for p in light):
            raise ContractError("heavy profiles must have larger mean work than light ones")
        if min(p.ram_mb for p in heavy) <= max(p.ram_mb for p in light):
            raise ContractError("heavy profiles must have larger RAM demand than light ones")
    return tuple(profiles)


@dataclass
class Task:
    id: int
    app: int
    arrival: int
    total_work: float
    remaining_work: float
    ram_mb: float
    state_mb: float
    disk: float
    net: float
    slo_deadline: float
    lei: int
    host: int | None = None
    status: str = "new"  # new | running | migrating | done | failed
    freeze_s: float = 0.0
    restarts: int = 0
    migrations: int = 0
    response_s: float | None = None
    history: list = field(default_factory=list)

    def copy(self):
        t = Task(**{k: getattr(self, k) for k in self.__dataclass_fields__ if k != "history"})
        t.history = list(self.history)
        return t


@dataclass(frozen=True)
class FaultEvent:
    type: str
    host: int
    start: int
    duration: int
    intensity: float

    def active(self, t):
        return self.start <= t < self.start + self.duration

    @property
    def features(self):
        return FAULT_FEATURES[self.type]


def sample_arrivals(rng, t, lei, rate, profiles, next_id, interval_s=300.0, slo_multiplier=2.0):
    """Poisson(rate) new tasks entering ``lei`` at interval ``t``."""
    if rate < 0:
        raise ContractError("arrival rate must be non-negative")
    count = int(rng.poisson(rate)) if rate > 0 else 0
    tasks = []
    for i in range(count):
        a = int(rng.integers(len(profiles)))
        p = profiles[a]
        work = float(p.mean_work * np.clip(rng.normal(1.0, p.work_cv), 0.3, 2.0))
        tasks.append(
            Task(next_id + i, a, t, work, work, p.ram_mb, p.state_mb, p.disk, p.net,
                 slo_multiplier * p.mean_work * interval_s, lei)
        )
    return tasks


@dataclass
class FaultModel:
    rate: float = 5.0
    window: int = 100  # intervals over which ``rate`` events are expected
    duration: tuple = (3, 8)
    intensity: tuple = (0.9, 1.0)
    types: tuple = FAULT_TYPES


def inject_faults(rng, t, hosts, model: FaultModel):
    """New fault events starting at interval ``t`` on uniformly chosen hosts."""
    lam = model.rate / model.window if model.window else 0.0
    count = int(rng.poisson(lam)) if lam > 0 else 0
    events = []
    for _ in range(count):
        ftype = model.types[int(rng.integers(len(model.types)))]
        host = int(hosts[int(rng.integers(len(hosts)))])
        dur = int(rng.integers(model.duration[0], model.duration[1] + 1))
        inten = float(rng.uniform(*model.intensity))
        events.append(FaultEvent(ftype, host, t, dur, inten))
    return events


def ground_truth(events, t, H):
    truth = np.zeros(H, dtype=bool)
    for e in events:
        if e.active(t):
            truth[e.host] = True
    return truth


def schedule(tasks, lei_hosts, cpu_util, policy="least_util", rng=None, alive=None):
    """Place every unplaced task on a host of its LEI.

    ``lei_hosts`` maps LEI id to host ids, ``cpu_util`` is indexed by host.
    Returns ``{task_id: host}``.
    """
    placement = {}
    load = np.array(cpu_util, dtype=float).copy()
    for task in sorted(tasks, key=lambda x: x.id):
        hosts = [h for h in lei_hosts[task.lei] if alive is None or alive[h]]
        if not hosts:
            continue
        if policy == "least_util":
            h = min(hosts, key=lambda x: (load[x], x))
        elif policy == "random":
            if rng is None:
                raise ContractError("random scheduling needs an rng")
            h = hosts[int(rng.integers(len(hosts)))]
        else:
            raise ContractError(f"unknown scheduling policy {policy!r}")
        placement[task.id] = h
        load[h] += 1.0
    return placement


def load_profiles(path):
    with open(path) as fh:
        d = json.load(fh)
    return validate_profiles(tuple(AppProfile(**p) for p in d["profiles"]))


def dump_profiles(profiles, path):
    with open(path, "w") as fh:
        json.dump({"profiles": [asdict(p) for p in profiles]}, fh, indent=2)


def load_fault_model(path):
    with open(path) as fh:
        d = json.load(fh)
    for key in ("duration", "intensity", "types"):
        if key in d:
            d[key] = tuple(d[key])
    return FaultModel(**d)
