"""Static description of the edge federation and its topology graph."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import ContractError
from .gon import TopologyGraph

POWER_DEFAULTS = {4096: (2.5, 7.0), 8192: (3.0, 8.0)}


@dataclass(frozen=True)
class HostSpec:
    id: int
    lei_id: int
    ram_mb: int = 4096
    cpu_capacity: float = 1.0
    power_idle_w: float = 2.5
    power_max_w: float = 7.0
    role: str = "worker"

    def __post_init__(self):
        if self.cpu_capacity <= 0 or self.ram_mb <= 0:
            raise ContractError(f"host {self.id}: capacities must be positive")
        if not 0 <= self.power_idle_w <= self.power_max_w:
            raise ContractError(f"host {self.id}: need 0 <= idle power <= max power")


@dataclass(frozen=True)
class LEI:
    id: int
    broker: int
    workers: tuple = ()
    dead: bool = False

    @property
    def hosts(self):
        return (self.broker,) + tuple(self.workers)


@dataclass(frozen=True)
class Links:
    lan_bandwidth_gbps: float = 1.0
    wan_bandwidth_gbps: float = 1.0
    lan_latency_s: float = 0.001
    wan_latency_s: float = 0.05


@dataclass(frozen=True)
class FederationSpec:
    hosts: tuple
    leis: tuple
    links: Links = field(default_factory=Links)
    name: str = "custom"

    def __post_init__(self):
        ids = [h.id for h in self.hosts]
        if ids != list(range(len(ids))):
            raise ContractError("host ids must be 0..H-1 in order")
        seen = []
        for lei in self.leis:
            seen.extend(lei.hosts)
            for h in lei.hosts:
                if self.hosts[h].lei_id != lei.id:
                    raise ContractError(f"host {h} lei_id disagrees with LEI {lei.id}")
        if sorted(seen) != ids:
            raise ContractError("every host must belong to exactly one LEI")

    @property
    def H(self):
        return len(self.hosts)

    @property
    def lei_sizes(self):
        return tuple(len(lei.hosts) for lei in self.leis)

    @property
    def brokers(self):
        return tuple(lei.broker for lei in self.leis)

    def lei_of(self):
        return np.array([h.lei_id for h in self.hosts])

    def transfer_time(self, size_mb, src, dst):
        """Seconds to move ``size_mb`` between two hosts."""
        same = self.hosts[src].lei_id == self.hosts[dst].lei_id
        bw = self.links.lan_bandwidth_gbps if same else self.links.wan_bandwidth_gbps
        lat = self.links.lan_latency_s if same else self.links.wan_latency_s
        return size_mb * 8.0 / (bw * 1000.0) + lat


def _host(hid, lei, ram, role):
    idle, mx = POWER_DEFAULTS[ram]
    return HostSpec(hid, lei, ram, 1.0, idle, mx, role)


def from_groups(groups, rams, links=None, name="custom"):
    """Build a federation from LEI host counts; the first host of a group brokers."""
    hosts, leis, hid = [], [], 0
    for lid, (size, ram_list) in enumerate(zip(groups, rams)):
        if size < 1 or len(ram_list) != size:
            raise ContractError("each LEI needs >= 1 host and one RAM value per host")
        ids = list(range(hid, hid + size))
        for j, h in enumerate(ids):
            hosts.append(_host(h, lid, ram_list[j], "broker" if j == 0 else "worker"))
        leis.append(LEI(lid, ids[0], tuple(ids[1:])))
        hid += size
    return FederationSpec(tuple(hosts), tuple(leis), links or Links(), name)


def build_config(which, links=None):
    """One of the three 16-host reference federations."""
    if which == 1:
        return from_groups([1] * 16, [[4096 if i % 2 == 0 else 8192] for i in range(16)], links, "config-1")
    if which == 2:
        rams = [[4096] * 4, [8192] * 4, [4096, 4096, 8192, 8192], [8192, 8192, 4096, 4096]]
        return from_groups([4, 4, 4, 4], rams, links, "config-2")
    if which == 3:
        rams = [[4096] * 2, [4096] * 4, [4096] * 4, [8192] * 8]
        return from_groups([2, 4, 4, 8], rams, links, "config-3")
    raise ContractError(f"unknown reference configuration {which!r}")


def reassign_broker(lei: LEI, utilizations, failed=()):
    """Promote the least-utilized live worker (lowest id on ties).

    ``utilizations`` maps host id to CPU utilization. Hosts in ``failed``
    are not eligible. An LEI with no eligible worker is marked dead.
    """
    failed = set(failed) | {lei.broker}
    live = [w for w in lei.workers if w not in failed]
    if not live:
        return replace(lei, dead=True)
    best = min(live, key=lambda w: (utilizations[w], w))
    workers = tuple(sorted([w for w in lei.hosts if w != best]))
    return LEI(lei.id, best, workers, False)


def adjacency(spec: FederationSpec, brokers=None):
    """Worker-broker and broker-broker adjacency matrices (symmetric, no loops)."""
    brokers = list(brokers if brokers is not None else spec.brokers)
    H = spec.H
    wb = np.zeros((H, H))
    bb = np.zeros((H, H))
    lei_of = spec.lei_of()
    for h in range(H):
        b = brokers[lei_of[h]]
        if h != b:
            wb[h, b] = wb[b, h] = 1.0
    for a in brokers:
        for b in brokers:
            if a != b:
                bb[a, b] = 1.0
    return wb, bb


def topology_graph(spec: FederationSpec, features=None, focus_lei=0, brokers=None, n_features=1):
    """Graph over all hosts with per-host feature vectors.

    ``focus_lei`` selects the LEI whose hosts lead the modeled window;
    ``brokers`` overrides the current broker of each LEI.
    """
    wb, bb = adjacency(spec, brokers)
    if features is None:
        features = np.zeros((spec.H, n_features))
    lei_of = spec.lei_of()
    brokers = list(brokers if brokers is not None else spec.brokers)
    focus = [brokers[focus_lei]] + [h for h in spec.leis[focus_lei].hosts if h != brokers[focus_lei]]
    focus = sorted(focus)
    return TopologyGraph(np.asarray(features, dtype=float), wb, bb, lei_of, np.array(focus))


def edge_counts(spec: FederationSpec, brokers=None):
    wb, bb = adjacency(spec, brokers)
    return int(np.triu(wb).sum()), int(np.triu(bb).sum())


# ---------------------------------------------------------------- config file


def to_dict(spec: FederationSpec):
    return {
        "name": spec.name,
        "hosts": [asdict(h) for h in spec.hosts],
        "leis": [{"id": l.id, "broker": l.broker, "workers": list(l.workers)} for l in spec.leis],
        "links": asdict(spec.links),
    }


def from_dict(d):
    hosts = tuple(HostSpec(**h) for h in d["hosts"])
    leis = tuple(LEI(l["id"], l["broker"], tuple(l.get("workers", ()))) for l in d["leis"])
    return FederationSpec(hosts, leis, Links(**d.get("links", {})), d.get("name", "custom"))


def load_federation(path):
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_federation(spec, path):
    with open(path, "w") as fh:
        json.dump(to_dict(spec), fh, indent=2)


def resolve_topology(value):
    """Accept 1/2/3 (int or str) or a path to a federation JSON file."""
    if isinstance(value, FederationSpec):
        return value
    try:
        return build_config(int(value))
    except (TypeError, ValueError):
        return load_federation(value)
