"""Command line entry point: ``edgefed <command> ...``.

Settings resolve as command-line flag > config file > built-in default.
The config file is JSON; its path comes from ``--config`` or the
``EDGEFED_CONFIG`` environment variable. Exit codes: 0 success, 1 usage,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import resource
import sys
import time
from dataclasses import fields, is_dataclass, replace

import numpy as np

from .autodiff import ContractError, NumericalError
from .metrics_io import DataError

log = logging.getLogger("edgefed")

ENV_CONFIG = "EDGEFED_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config resolution


def load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: top level must be an object")
    return cfg


def resolve(args, section: dict, name, default):
    """flag > config > default; records the source for the startup log."""
    val = getattr(args, name, None)
    if val is not None:
        src = "flag"
    elif name in section:
        val, src = section[name], "config"
    else:
        val, src = default, "default"
    args._sources[name] = (src, val)
    return val


def build_dataclass(cls, overrides: dict):
    """Instantiate ``cls`` from defaults plus a (possibly nested) override dict."""
    base = cls()
    kw = {}
    names = {f.name for f in fields(cls)}
    for key, val in overrides.items():
        if key not in names:
            raise UsageError(f"unknown {cls.__name__} setting {key!r}")
        cur = getattr(base, key)
        if is_dataclass(cur) and isinstance(val, dict):
            val = build_dataclass(type(cur), val)
        elif isinstance(cur, tuple) and isinstance(val, list):
            val = tuple(val)
        kw[key] = val
    return replace(base, **kw)


def _log_sources(args):
    for name, (src, val) in sorted(args._sources.items()):
        log.info("setting %s = %r (%s)", name, val, src)


def _peak_memory_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=lambda o: o.item() if isinstance(o, np.generic) else str(o))
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    print(text)


# ---------------------------------------------------------------- commands


def _detector_cfg(args, conf):
    from .pipeline import DetectorConfig

    sec = dict(conf.get("detector", {}))
    cfg = build_dataclass(DetectorConfig, sec)
    over = {}
    for name in ("k", "n_per_host", "epochs", "patience", "seed", "split_ratio", "split_seed"):
        over[name] = resolve(args, sec, name, getattr(cfg, name))
    return replace(cfg, **over)


def cmd_train(args, conf):
    from . import pipeline
    from .metrics_io import load_csv

    cfg = _detector_cfg(args, conf)
    _log_sources(args)
    ds = load_csv(args.data)
    net, curve, norm = None, None, None
    if args.resume:
        net, norm, n_per, curve = pipeline.load_model(args.resume)
        if args.k is not None and args.k != net.cfg.k:
            raise UsageError(f"--k {args.k} differs from the checkpoint window {net.cfg.k}")
        cfg = replace(cfg, n_per_host=n_per, k=net.cfg.k, hidden=net.cfg.hidden, tau=net.cfg.tau)
    res = pipeline.train_detector(ds, cfg, net=net, curve=curve, norm=norm)
    pipeline.save_model(res, cfg, args.out)
    curve_path = args.curve or os.path.splitext(args.out)[0] + ".curve.csv"
    pipeline.write_curve(res.curve, curve_path)
    _dump({"checkpoint": args.out, "curve": curve_path, "epochs": len(res.curve),
           "stopped_early": res.stopped_early, "final_loss": res.curve[-1]["loss"] if res.curve else None})
    return EXIT_OK


def cmd_detect(args, conf):
    from . import pipeline
    from .metrics_io import load_csv

    cfg = _detector_cfg(args, conf)
    _log_sources(args)
    net, norm, n_per, _ = pipeline.load_model(args.checkpoint)
    cfg = replace(cfg, n_per_host=n_per, k=net.cfg.k)
    ds = load_csv(args.data, require_labels=args.require_labels)
    prep = pipeline.prepare(ds, cfg, norm)
    out, scores, pred = pipeline.evaluate(net, prep, ds, cfg)
    out["peak_memory_mb"] = _peak_memory_mb()
    _dump(out, args.out)
    return EXIT_OK


def _sim_setup(args, conf):
    from .engine import EngineConfig, EngineMode
    from .federation import resolve_topology
    from .simulator import SimConfig

    run = dict(conf.get("run", {}))
    sim_cfg = build_dataclass(SimConfig, dict(conf.get("sim", {})))
    eng_sec = dict(conf.get("engine", {}))
    eng_sec.pop("mode", None)
    eng = build_dataclass(EngineConfig, eng_sec)
    topology = resolve(args, run, "topology", 2)
    mode = resolve(args, run, "mode", "dragon")
    N = int(resolve(args, run, "N", 1))
    seed = int(resolve(args, run, "seed", 0))
    T = int(resolve(args, run, "intervals", 100))
    rate = resolve(args, run, "arrival_rate", sim_cfg.arrival_rate)
    frate = resolve(args, run, "fault_rate", sim_cfg.fault_model.rate)
    qos = resolve(args, run, "qos_mode", sim_cfg.qos_mode)
    k = resolve(args, run, "k", eng.k)
    threads = int(resolve(args, run, "threads", eng.threads))
    sim_cfg = replace(sim_cfg, arrival_rate=float(rate), qos_mode=qos,
                      fault_model=replace(sim_cfg.fault_model, rate=float(frate)))
    eng = replace(eng, mode=EngineMode(mode, N), k=k, threads=threads)
    spec = resolve_topology(topology)
    cache = resolve(args, run, "cache_dir", None)
    return spec, sim_cfg, eng, seed, T, cache


def _run_one(spec, sim_cfg, eng, seed, T, cache, out_dir):
    from .engine import EngineMode, calibrate, run_experiment
    from .metrics_io import write_report

    # the SLO reference comes from the fault-free calibration run, shared by all modes
    ref_cfg = eng if eng.mode.remediates else replace(eng, mode=EngineMode("dragon", 1))
    cal = calibrate(spec, sim_cfg, ref_cfg, cache)
    t0 = time.perf_counter()
    trace = run_experiment(spec, sim_cfg, eng, seed=seed, T=T, calibration=cal if eng.mode.remediates else None)
    meta = {"reference": cal.reference, "peak_memory_mb": _peak_memory_mb(),
            "wall_s": time.perf_counter() - t0, "interval_s": sim_cfg.interval_s}
    summary = write_report(trace, out_dir, meta)
    return summary


def cmd_simulate(args, conf):
    spec, sim_cfg, eng, seed, T, cache = _sim_setup(args, conf)
    _log_sources(args)
    log.info("topology %s, LEI sizes %s", spec.name, list(spec.lei_sizes))
    summary = _run_one(spec, sim_cfg, eng, seed, T, cache, args.out)
    _dump(summary)
    return EXIT_OK


def cmd_evaluate(args, conf):
    from .metrics_io import evaluate_dir

    _dump(evaluate_dir(args.trace_dir))
    return EXIT_OK


def cmd_gen_synthetic(args, conf):
    from .metrics_io import FTSAD_STATS, SyntheticSpec, make_synthetic, save_csv

    sec = dict(conf.get("synthetic", {}))
    preset = resolve(args, sec, "preset", "FTSAD-55")
    if preset not in FTSAD_STATS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(FTSAD_STATS)}")
    tr, te, d, frac = FTSAD_STATS[preset]
    n_per_default = 5 if d % 5 == 0 else 1
    rows = int(resolve(args, sec, "rows", tr + te))
    n_per = int(resolve(args, sec, "n_per_host", n_per_default))
    hosts = int(resolve(args, sec, "hosts", d // n_per))
    fraction = float(resolve(args, sec, "fraction", frac))
    seed = int(resolve(args, sec, "seed", 0))
    _log_sources(args)
    spec = SyntheticSpec(rows=rows, n_hosts=hosts, n_per_host=n_per, anomaly_fraction=fraction, seed=seed)
    ds = make_synthetic(spec)
    save_csv(ds, args.out)
    _dump({"path": args.out, "rows": ds.T, "dims": ds.d, "anomalous_rows": int(ds.labels.sum())})
    return EXIT_OK


def cmd_compare(args, conf):
    from .engine import EngineMode

    spec, sim_cfg, eng, _, T, cache = _sim_setup(args, conf)
    _log_sources(args)
    modes = []
    for item in args.modes.split(","):
        v, _, n = item.partition(":")
        modes.append((v, int(n or 1)))
    seeds = list(range(args.seed_from, args.seed_from + args.seeds))
    table = []
    for v, n in modes:
        cfg = replace(eng, mode=EngineMode(v, n))
        for s in seeds:
            out_dir = os.path.join(args.out, f"{v}-N{n}", f"seed{s}")
            summ = _run_one(spec, sim_cfg, cfg, s, T, cache, out_dir)
            table.append({"mode": v, "N": n, "seed": s, "slo": summ["slo_violation_rate"],
                          "energy_kwh": summ["energy_kwh"], "response_mean_s": summ["response_mean_s"],
                          "migrations": summ["migrations"], "f1": summ["f1"]})
            log.info("%s N=%d seed %d: SLO %.4f energy %.4f kWh", v, n, s, summ["slo_violation_rate"],
                     summ["energy_kwh"])
    agg = {}
    for v, n in modes:
        sel = [r for r in table if r["mode"] == v and r["N"] == n]
        agg[f"{v}:{n}"] = {k: float(np.mean([r[k] for r in sel])) for k in ("slo", "energy_kwh", "response_mean_s", "migrations", "f1")}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "compare.csv"), "w") as fh:
        fh.write("mode,N,seed,slo,energy_kwh,response_mean_s,migrations,f1\n")
        for r in table:
            fh.write(f"{r['mode']},{r['N']},{r['seed']},{r['slo']!r},{r['energy_kwh']!r},"
                     f"{r['response_mean_s']!r},{r['migrations']},{r['f1']!r}\n")
    _dump({"modes": agg, "seeds": seeds}, os.path.join(args.out, "compare.json"))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _sim_flags(p):
    p.add_argument("--topology", help="1, 2, 3 or a federation JSON file")
    p.add_argument("--mode", choices=["none", "dragon", "dragon_plus"])
    p.add_argument("--N", type=int, help="look-ahead depth (dragon_plus)")
    p.add_argument("--intervals", type=int, help="scheduling intervals (default 100)")
    p.add_argument("--arrival-rate", dest="arrival_rate", type=float)
    p.add_argument("--fault-rate", dest="fault_rate", type=float, help="expected faults per 100 intervals")
    p.add_argument("--qos-mode", dest="qos_mode", choices=["cost", "signed"])
    p.add_argument("--k", type=int, help="window length (default 10 for N=1, else 5)")
    p.add_argument("--threads", type=int, help="parallel broker ticks (1 = reference mode)")
    p.add_argument("--cache-dir", dest="cache_dir", help="calibration cache directory")


def build_parser():
    p = _Parser(prog="edgefed", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config (default: ${ENV_CONFIG})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train the detector on a dataset CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--curve", help="training-curve CSV (default: next to the checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name, typ in (("epochs", int), ("patience", int), ("k", int), ("seed", int), ("split_seed", int)):
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    t.add_argument("--n-per-host", dest="n_per_host", type=int)
    t.add_argument("--split-ratio", dest="split_ratio", type=float)

    d = sub.add_parser("detect", help="score and label a dataset with a trained checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", help="metrics JSON path")
    d.add_argument("--require-labels", action="store_true")
    d.add_argument("--split-ratio", dest="split_ratio", type=float)
    d.add_argument("--split-seed", dest="split_seed", type=int)
    d.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="run one co-simulated experiment")
    _sim_flags(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="report directory")

    e = sub.add_parser("evaluate", help="recompute the summary from a trace directory")
    e.add_argument("trace_dir")

    g = sub.add_parser("gen-synthetic", help="write a seeded FTSAD-style dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=["FTSAD-1", "FTSAD-25", "FTSAD-55"])
    g.add_argument("--rows", type=int)
    g.add_argument("--hosts", type=int)
    g.add_argument("--n-per-host", dest="n_per_host", type=int)
    g.add_argument("--fraction", type=float, help="anomalous row fraction")
    g.add_argument("--seed", type=int)

    c = sub.add_parser("compare", help="paired-seed comparison of several modes")
    _sim_flags(c)
    c.add_argument("--modes", default="none,dragon,dragon_plus:5", help="comma list of mode[:N]")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--seed-from", dest="seed_from", type=int, default=0)
    c.add_argument("--out", required=True)
    return p


COMMANDS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "gen-synthetic": cmd_gen_synthetic,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing command")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"edgefed: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args._sources = {}
    try:
        conf = load_config(args.config or os.environ.get(ENV_CONFIG))
        return COMMANDS[args.command](args, conf)
    except UsageError as e:
        print(f"edgefed: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as e:
        print(f"edgefed: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"edgefed: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as e:
        print(f"edgefed: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
