"""How much SLO and energy can remediation win at most?

Runs the simulator without remediation under three conditions on paired
seeds: faults as configured, no faults at all, and an observed-fault
oracle that moves every task off a host whose fault was visible in the
previous interval. The fault-free run bounds what any remediation can
recover; the oracle shows what blunt evacuation with perfect detection
achieves.

    python scripts/fault_headroom.py --seeds 20
"""
import argparse
import json
from dataclasses import replace

import numpy as np

from edgefed.engine import EngineConfig, EngineMode, calibrate, least_utilized_targets, spread_targets
from edgefed.federation import resolve_topology
from edgefed.metrics_io import slo_report
from edgefed.simulator import SimConfig, begin_interval, init_state, schedule_pending, step
from edgefed.workload import FaultModel


def observed_faulty(state):
    return {f.host for f in state.faults if f.start < state.t and f.active(state.t - 1)}


def oracle_decision(state, S):
    bad = observed_faulty(state)
    if not bad:
        return {}
    lei_of = state.spec.lei_of()
    targets = least_utilized_targets(state, S, bad)
    M = {}
    for x in sorted(state.tasks.values(), key=lambda x: x.id):
        h = x.host if x.host is not None else S.get(x.id)
        if h in bad:
            opts = [lid for lid, g in sorted(targets.items()) if lid != lei_of[h] and g not in bad]
            if opts:
                M[x.id] = targets[opts[x.id % len(opts)]]
    return spread_targets(state, M, S, bad)


def run(spec, sim, seed, T, policy, reference):
    st = init_state(spec, sim, seed)
    comps, joules = [], 0.0
    for _ in range(T):
        begin_interval(st)
        S = schedule_pending(st)
        M = oracle_decision(st, S) if policy == "oracle" else {}
        st, out = step(st, S, M)
        comps += out.completions
        joules += float(out.host_power_w.sum()) * sim.interval_s
    apps = [sim.profiles[c.app].name for c in comps]
    return slo_report(apps, [c.response_s for c in comps], reference)["overall"], joules / 3.6e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--topology", default="2")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--intervals", type=int, default=100)
    ap.add_argument("--arrival-rate", type=float, default=1.2)
    ap.add_argument("--fault-rate", type=float, default=5.0)
    ap.add_argument("--cache-dir", default=".edgefed-cache")
    args = ap.parse_args()
    spec = resolve_topology(args.topology)
    sim = SimConfig(arrival_rate=args.arrival_rate, fault_model=FaultModel(rate=args.fault_rate))
    reference = calibrate(spec, sim, EngineConfig(mode=EngineMode("dragon", 1)), args.cache_dir).reference
    clean = replace(sim, fault_model=replace(sim.fault_model, rate=0.0))
    out = {}
    for name, cfg, policy in (("faults", sim, "none"), ("fault_free", clean, "none"), ("oracle", sim, "oracle")):
        r = np.array([run(spec, cfg, s, args.intervals, policy, reference) for s in range(args.seeds)])
        out[name] = {"slo": float(r[:, 0].mean()), "energy_kwh": float(r[:, 1].mean())}
    base = out["faults"]
    for v in out.values():
        v["slo_cut"] = (base["slo"] - v["slo"]) / base["slo"] if base["slo"] else float("nan")
        v["energy_cut"] = (base["energy_kwh"] - v["energy_kwh"]) / base["energy_kwh"]
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
