"""Command-line entry point: score, search, correlate, stats.

Outputs are canonical JSON (fixed key order, compact separators) so that
reruns with identical config, seed and evaluation budgets are byte-identical.
Every run writes a manifest.  Exit codes: 0 ok, 1 internal error, 2 invalid
input.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, archspace, bench, evolve, metrics

log = logging.getLogger("esnas")

PRESETS = {
    "S0": {"max_params": 3_500_000, "phase_seconds": 300, "total_seconds": 2700},
    "S1": {"max_params": 6_000_000, "phase_seconds": 300, "total_seconds": 2700},
    "S2": {"max_params": 12_500_000, "phase_seconds": 360, "total_seconds": 3300},
}
MULTISTART_SECONDS = 180

# Defaults when --budget-mode evals is selected without explicit budgets.
EVAL_BUDGETS = {"multistart": 30, "phase": 60, "total": 400}


class CliError(Exception):
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or []


def canonical_json(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _load_json_file(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"{what} file {path} is not valid JSON", [str(e)])


def _load_space(path):
    try:
        return archspace.SearchSpaceConfig.from_dict(_load_json_file(path, "config"))
    except (archspace.ConfigError, TypeError) as e:
        raise CliError(f"invalid search-space config {path}", [str(e)])


def _load_genome(path):
    d = _load_json_file(path, "genome")
    try:
        return archspace.ArchGenome.from_dict(d)
    except (KeyError, ValueError) as e:
        raise CliError(f"invalid genome file {path}", [str(e)])


class ManifestWriter:
    def __init__(self, subcommand, config_obj, seed):
        self.data = {
            "tool_version": __version__,
            "config_hash": hashlib.sha256(
                canonical_json(config_obj).encode()).hexdigest(),
            "master_seed": seed,
            "started_at": datetime.now(timezone.utc).isoformat(),
            "ended_at": None,
            "subcommand": subcommand,
            "outputs": [],
        }

    def finish(self, path, outputs):
        self.data["ended_at"] = datetime.now(timezone.utc).isoformat()
        self.data["outputs"] = [str(o) for o in outputs]
        atomic_write(path, json.dumps(self.data, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_score(args):
    space = _load_space(args.config)
    genome = _load_genome(args.arch)
    violations = archspace.validate(genome, space)
    if violations:
        raise CliError("genome fails validation", violations)
    report = metrics.score_genome(genome, space, base_seed=args.seed)
    text = report.to_json()
    if args.out:
        atomic_write(args.out, text + "\n")
    print(text)
    return 0


def cmd_stats(args):
    space = _load_space(args.config)
    genome = _load_genome(args.arch)
    violations = archspace.validate(genome, space)
    if violations:
        raise CliError("genome fails validation", violations)
    out = {
        "params": archspace.count_params(genome, space),
        "macs": archspace.count_macs(genome, space),
    }
    print(canonical_json(out))
    return 0


def _search_config(args):
    """Merge preset defaults, an optional config file and the budget mode."""
    cfg = {"space": {}, "schedule": {}, "entropic": {}}
    if args.preset:
        p = PRESETS[args.preset]
        cfg["space"]["max_params"] = p["max_params"]
        if args.budget_mode == "evals":
            cfg["schedule"] = {
                "multistart_budget": {"kind": "evaluations",
                                      "amount": EVAL_BUDGETS["multistart"]},
                "phase_budget": {"kind": "evaluations",
                                 "amount": EVAL_BUDGETS["phase"]},
                "total_budget": {"kind": "evaluations",
                                 "amount": EVAL_BUDGETS["total"]},
            }
        else:
            cfg["schedule"] = {
                "multistart_budget": {"kind": "wallclock_seconds",
                                      "amount": MULTISTART_SECONDS},
                "phase_budget": {"kind": "wallclock_seconds",
                                 "amount": p["phase_seconds"]},
                "total_budget": {"kind": "wallclock_seconds",
                                 "amount": p["total_seconds"]},
            }
    if args.config:
        cfg = _deep_merge(cfg, _load_json_file(args.config, "config"))
    return cfg


def cmd_search(args):
    cfg = _search_config(args)
    try:
        space = archspace.SearchSpaceConfig.from_dict(cfg.get("space", {}))
        schedule = evolve.SearchSchedule.from_dict(cfg.get("schedule", {}))
        ecfg = metrics.EntropicConfig.from_dict(cfg.get("entropic", {}))
    except (archspace.ConfigError, ValueError, TypeError) as e:
        raise CliError("invalid search configuration", [str(e)])
    if args.budget_mode == "evals":
        for b in (schedule.multistart_budget, schedule.phase_budget,
                  schedule.total_budget):
            if b.kind != "evaluations":
                raise CliError("--budget-mode evals requires evaluation budgets",
                               [f"{b.kind} budget found"])
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter("search", cfg, args.seed)

    log.info("starting search: space=%s schedule=%s", space.ref(),
             schedule.to_dict())
    best, history = evolve.cyclic_search(space, schedule, args.seed, ecfg)

    genome_path = out_dir / "best_genome.json"
    report_path = out_dir / "best_report.json"
    history_path = out_dir / "history.ndjson"
    manifest_path = out_dir / "manifest.json"
    atomic_write(genome_path, best.genome.to_json() + "\n")
    atomic_write(report_path, best.report.to_json() + "\n")
    atomic_write(history_path,
                 "".join(canonical_json(ev) + "\n" for ev in history))
    manifest.finish(manifest_path, [genome_path, report_path, history_path])
    print(canonical_json({
        "best_genome": str(genome_path),
        "params": best.report.params,
        "entropic": best.report.entropic,
        "logsynflow": best.report.logsynflow,
    }))
    return 0


def _score_row(payload):
    arch_json, metric_name, space_dict, seed = payload
    genome = archspace.ArchGenome.from_json(arch_json)
    space = archspace.SearchSpaceConfig.from_dict(space_dict)
    report = metrics.score_genome(genome, space, base_seed=seed)
    return getattr(report, metric_name)


def cmd_correlate(args):
    try:
        entries = bench.load_benchmark_csv(args.bench)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read benchmark file {args.bench}", [str(e)])
    if args.sample:
        entries = bench.sample_entries(entries, args.sample, args.seed)
    space = _load_space(args.config) if args.config else None
    need_scoring = [e for e in entries
                    if args.metric not in e.precomputed_scores]
    if need_scoring and space is None:
        raise CliError(
            f"benchmark rows lack precomputed 'score_{args.metric}' values; "
            f"--config is required to instantiate architectures")
    if need_scoring and args.workers > 1:
        payloads = [(e.arch, args.metric, space.to_dict(), args.seed)
                    for e in need_scoring]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for entry, score in zip(need_scoring, pool.map(_score_row, payloads)):
                entry.precomputed_scores[args.metric] = score
    try:
        report, pairs = bench.correlate_benchmark(
            entries, args.metric, config=space, base_seed=args.seed)
    except bench.CorrelationError as e:
        raise CliError("correlation failed", [str(e)])
    out_path = Path(args.out or "report.json")
    manifest = ManifestWriter("correlate",
                              {"bench": str(args.bench), "metric": args.metric},
                              args.seed)
    atomic_write(out_path, canonical_json(report.to_dict()) + "\n")
    scatter_path = out_path.with_name("scatter.csv")
    atomic_write(scatter_path, "score,accuracy\n" + "".join(
        f"{s!r},{a!r}\n" for s, a in pairs))
    manifest.finish(out_path.with_name("manifest.json"),
                    [out_path, scatter_path])
    print(canonical_json(report.to_dict()))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="esnas",
        description="Training-free NAS: entropy/gradient-flow scoring and "
                    "decoupled evolutionary search.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--workers", type=int, default=1,
                       help="scoring pool size; 1 forces serial execution")

    p = sub.add_parser("score", help="score one genome file")
    common(p)
    p.add_argument("--arch", required=True, help="genome JSON file")
    p.add_argument("--config", required=True, help="search-space JSON file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats", help="print params and MACs for a genome")
    common(p)
    p.add_argument("--arch", required=True, help="genome JSON file")
    p.add_argument("--config", required=True, help="search-space JSON file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("search", help="run the decoupled cyclic search")
    common(p)
    p.add_argument("--config", help="JSON with space/schedule/entropic sections")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="parameter-budget preset")
    p.add_argument("--budget-mode", choices=["wallclock", "evals"],
                   default="wallclock", dest="budget_mode")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("correlate", help="rank-correlate a metric vs accuracy")
    common(p)
    p.add_argument("--bench", required=True, help="benchmark CSV file")
    p.add_argument("--metric", required=True,
                   choices=["entropic", "logsynflow"])
    p.add_argument("--config", help="search-space JSON (needed to score rows)")
    p.add_argument("--sample", type=int, help="uniform row sample size")
    p.set_defaults(func=cmd_correlate)

    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("ESNAS_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(json.dumps({"error": {"message": str(e), "details": e.details}}),
              file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report, keep machine-readable
        log.exception("internal error")
        print(json.dumps({"error": {"message": f"internal error: {e}",
                                    "details": []}}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
