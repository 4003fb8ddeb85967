"""Command-line entry point: single runs, sweeps, comparisons and probes."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import engine, probes
from .metrics import final_metric, time_to_target
from .models import to_bytes

log = logging.getLogger("asofed")

SUMMARY_FIELDS = ("strategy", "seed", "sim_time_to_target", "final_metric", "aggregations")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def metric_name(cfg: cf.RunConfig) -> str:
    if cfg.sim.target_metric:
        return cfg.sim.target_metric
    return "smape" if cfg.data.source == "synthetic-regression" else "accuracy"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=_-]+", "_", text).strip("_")


def summarize(cfg: cf.RunConfig, records) -> dict:
    metric = metric_name(cfg)
    ttt = time_to_target(records, cfg.sim.target, metric) if cfg.sim.target is not None else None
    return {"strategy": cfg.label, "seed": cfg.seed,
            "sim_time_to_target": "" if ttt is None else ttt,
            "final_metric": final_metric(records, metric),
            "aggregations": records[-1].global_iter if records else 0}


def write_csv(path: Path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_one(cfg: cf.RunConfig, run_dir: Path, dump_first_layer=False) -> dict:
    """Execute one seeded run and write its artifacts into ``run_dir``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    sim = engine.Simulation(cfg)
    records = sim.run()
    with open(run_dir / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    (run_dir / "final_params.bin").write_bytes(to_bytes(sim.server.w))
    (run_dir / "config.cfg").write_text(cf.to_text(cfg))
    if dump_first_layer:
        np.savetxt(run_dir / "first_layer.csv", sim.server.w.first_layer, delimiter=",", fmt="%.17g")
    row = summarize(cfg, records)
    write_csv(run_dir / "summary.csv", [row], SUMMARY_FIELDS)
    return row


def run_experiment(cfg: cf.RunConfig, out: Path, seeds=None, dump_first_layer=False) -> list[dict]:
    """Runs for each seed; writes ``out/<strategy>-seed<N>/`` and ``out/summary.csv``."""
    cf.validate_files(cfg)
    rows = []
    for seed in seeds if seeds is not None else [cfg.seed]:
        c = cfg.copy()
        c.seed = int(seed)
        log.info("run %s seed %d", c.label, c.seed)
        rows.append(run_one(c, out / _slug(f"{c.label}-seed{c.seed}"), dump_first_layer))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", rows, SUMMARY_FIELDS)
    return rows


def run_sweep(cfg: cf.RunConfig, out: Path, key: str, values, seeds=None,
              dump_first_layer=False) -> list[dict]:
    rows = []
    for raw in values:
        c = cfg.copy()
        cf.set_value(c, key, raw)
        cf.validate(c)
        for row in run_experiment(c, out / _slug(f"{key}={raw}"), seeds, dump_first_layer):
            rows.append({"param": key, "value": raw, **row})
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", rows, ("param", "value") + SUMMARY_FIELDS)
    return rows


def compare_strategies(configs, seeds, target: float, metric: str | None = None) -> dict:
    """Per-seed time-to-target and final metric for each config, plus means.

    Every config runs on the same seeds, so data, partitions and delays match
    across strategies.
    """
    rows = []
    for cfg in configs:
        cf.validate_files(cfg)
        for seed in seeds:
            c = cfg.copy()
            c.seed = int(seed)
            m = metric or metric_name(c)
            recs = engine.run(c)
            ttt = time_to_target(recs, target, m)
            rows.append({"strategy": c.label, "seed": c.seed, "metric": m,
                         "sim_time_to_target": ttt, "final_metric": final_metric(recs, m),
                         "aggregations": recs[-1].global_iter if recs else 0})
    means = {}
    for label in dict.fromkeys(r["strategy"] for r in rows):
        mine = [r for r in rows if r["strategy"] == label]
        reached = [r["sim_time_to_target"] for r in mine if r["sim_time_to_target"] is not None]
        means[label] = {
            "mean_time_to_target": float(np.mean(reached)) if len(reached) == len(mine) else None,
            "reached": len(reached), "runs": len(mine),
            "mean_final_metric": float(np.mean([r["final_metric"] for r in mine]))}
    return {"target": target, "rows": rows, "means": means}


def format_comparison(table: dict) -> str:
    lines = [f"{'strategy':<16}{'seed':>6}{'time_to_target':>18}{'final':>10}{'aggs':>8}"]
    for r in table["rows"]:
        t = "unreached" if r["sim_time_to_target"] is None else f"{r['sim_time_to_target']:.2f}"
        lines.append(f"{r['strategy']:<16}{r['seed']:>6}{t:>18}{r['final_metric']:>10.4f}{r['aggregations']:>8}")
    lines.append("")
    for label, m in table["means"].items():
        t = "unreached" if m["mean_time_to_target"] is None else f"{m['mean_time_to_target']:.2f}"
        lines.append(f"{label:<16}{'mean':>6}{t:>18}{m['mean_final_metric']:>10.4f}"
                     f"   ({m['reached']}/{m['runs']} reached)")
    return "\n".join(lines)


# --- argument handling ----------------------------------------------------

def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _load(path, overrides) -> cf.RunConfig:
    cfg = cf.parse_config(path)
    for item in overrides or []:
        if "=" not in item:
            raise cf.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cf.set_value(cfg, k.strip(), v.strip())
    cf.validate(cfg)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asofed", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi_seed=True):
        sp.add_argument("--config", required=True, help="config file or bundled preset name")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        if multi_seed:
            sp.add_argument("--seeds", type=_int_list, help="several seeds, e.g. 0-9 or 1,4,7")

    r = sub.add_parser("run", help="simulate one configuration")
    common(r)
    r.add_argument("--out", help="output directory (default: the config's output key)")
    r.add_argument("--dump-first-layer", action="store_true", help="write first_layer.csv per run")

    s = sub.add_parser("sweep", help="run a configuration over values of one key")
    common(s)
    s.add_argument("--param", required=True, help="dotted key to vary")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="output directory")
    s.add_argument("--dump-first-layer", action="store_true")

    c = sub.add_parser("compare", help="time-to-target table over several configurations")
    c.add_argument("--config", required=True, action="append", help="repeat once per strategy")
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to every config")
    c.add_argument("--seeds", type=_int_list, default=[0], help="seeds shared by all configs")
    c.add_argument("--target", type=float, help="target metric value (default: sim.target of the first config)")
    c.add_argument("--metric", help="metric name (default: accuracy or smape)")
    c.add_argument("--out", help="write compare.csv and compare.json here")

    pr = sub.add_parser("probe", help="numerical checks of the convergence analysis")
    pr.add_argument("--which", choices=("lemma1", "thm1", "thm2", "dissimilarity"), required=True)
    common(pr, multi_seed=False)
    pr.add_argument("--out", help="write the JSON report to this file as well")

    sub.add_parser("config-reference", help="print every config key with its default")
    return p


def _dispatch(args) -> int:
    if args.command == "config-reference":
        sys.stdout.write(cf.config_reference())
        return EXIT_OK

    if args.command == "compare":
        cfgs = [_load(p, args.set) for p in args.config]
        target = args.target if args.target is not None else cfgs[0].sim.target
        if target is None:
            raise cf.ConfigError("compare needs --target or sim.target in the config")
        table = compare_strategies(cfgs, args.seeds, target, args.metric)
        print(format_comparison(table))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_csv(out / "compare.csv",
                      [{**r, "sim_time_to_target": "" if r["sim_time_to_target"] is None
                        else r["sim_time_to_target"]} for r in table["rows"]],
                      ("strategy", "seed", "metric", "sim_time_to_target", "final_metric", "aggregations"))
            (out / "compare.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    cfg = _load(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed

    if args.command == "probe":
        cfg.probe.which = args.which
        report = probes.run_probe(cfg)
        text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
        print(text)
        if args.out:
            Path(args.out).write_text(text + "\n")
        return EXIT_OK

    out = Path(args.out or cfg.output)
    if args.command == "run":
        rows = run_experiment(cfg, out, args.seeds, args.dump_first_layer)
    else:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise cf.ConfigError("--values is empty")
        rows = run_sweep(cfg, out, args.param, values, args.seeds, args.dump_first_layer)
    for row in rows:
        print(",".join(str(row[k]) for k in row))
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (cf.ConfigError, probes.PreconditionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (engine.SimulationError, FloatingPointError, ArithmeticError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
