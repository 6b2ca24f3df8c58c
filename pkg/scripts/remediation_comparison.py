"""Paired-seed comparison of remediation modes on one topology.

For every seed each mode sees the same arrivals and faults. SLO violations
are judged against one shared reference (the fault-free calibration run),
so per-seed differences are paired.

    python scripts/remediation_comparison.py --seeds 20 --out results/remediation
"""
import argparse
import csv
import json
import logging
import os
import time

import numpy as np

from edgefed.engine import EngineConfig, EngineMode, calibrate, run_experiment
from edgefed.federation import resolve_topology
from edgefed.metrics_io import slo_report
from edgefed.simulator import SimConfig
from edgefed.workload import FaultModel


def slo_and_energy(trace, reference):
    comps = [c for r in trace.rows for c in r.completions]
    slo = slo_report([trace.apps[c.app] for c in comps], [c.response_s for c in comps], reference)["overall"]
    energy_kwh = float(sum(np.sum(r.power_w) for r in trace.rows)) * trace.interval_s / 3.6e6
    return slo, energy_kwh, sum(len(r.migrations) for r in trace.rows)


def parse_modes(text):
    out = []
    for item in text.split(","):
        v, _, n = item.partition(":")
        out.append(EngineMode(v, int(n or 1)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--topology", default="2")
    ap.add_argument("--modes", default="none,dragon,dragon_plus:5")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--intervals", type=int, default=100)
    ap.add_argument("--arrival-rate", type=float, default=1.2)
    ap.add_argument("--fault-rate", type=float, default=5.0, help="faults per 100 intervals")
    ap.add_argument("--cache-dir", default=".edgefed-cache")
    ap.add_argument("--out", default="results/remediation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = resolve_topology(args.topology)
    sim = SimConfig(arrival_rate=args.arrival_rate, fault_model=FaultModel(rate=args.fault_rate))
    modes = parse_modes(args.modes)
    cals = {(m.variant, m.N): calibrate(spec, sim, EngineConfig(mode=m), args.cache_dir)
            for m in modes if m.remediates}
    ref_mode = EngineMode("dragon", 1)
    reference = calibrate(spec, sim, EngineConfig(mode=ref_mode), args.cache_dir).reference

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for m in modes:
        for s in range(args.seeds):
            t0 = time.perf_counter()
            tr = run_experiment(spec, sim, EngineConfig(mode=m), seed=s, T=args.intervals,
                                calibration=cals.get((m.variant, m.N)))
            slo, e, n_mig = slo_and_energy(tr, reference)
            rows.append({"mode": f"{m.variant}:{m.N}", "seed": s, "slo": slo, "energy_kwh": e,
                         "migrations": n_mig, "seconds": time.perf_counter() - t0})
            logging.info("%s:%d seed %d  SLO %.4f  energy %.5f kWh  migrations %d", m.variant, m.N, s, slo, e, n_mig)

    with open(os.path.join(args.out, "per_seed.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    by = {}
    for r in rows:
        by.setdefault(r["mode"], []).append(r)
    summary = {k: {c: float(np.mean([r[c] for r in v])) for c in ("slo", "energy_kwh", "migrations", "seconds")}
               for k, v in by.items()}
    base = summary.get("none:1")
    if base:
        for k, v in summary.items():
            v["slo_cut_vs_none"] = (base["slo"] - v["slo"]) / base["slo"] if base["slo"] else float("nan")
            v["energy_cut_vs_none"] = (base["energy_kwh"] - v["energy_kwh"]) / base["energy_kwh"]
    if "dragon:1" in by and any(k.startswith("dragon_plus") for k in by):
        d = np.array([r["slo"] for r in by["dragon:1"]])
        for k in by:
            if k.startswith("dragon_plus"):
                p = np.array([r["slo"] for r in by[k]])
                summary[k]["seeds_at_or_below_dragon"] = int(np.sum(p <= d))
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
