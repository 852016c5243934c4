"""Command-line surface: partition, stats, run, report.

Experiments are described by JSON config files; flags only pick the command
and paths. Every failure prints a machine-parsable error code on its own
stderr line before the human-readable message and exits nonzero. The
FGL_LOG environment variable (DEBUG/INFO/WARNING/ERROR) sets verbosity.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_config, serialize_config
from .engine import partition_graph_collection, partition_subgraph, prepare_run, run_experiment
from .errors import ComparisonError, ConfigError, FglError
from .graph import load_graph_collection, load_subgraph_dataset, union_graph
from .seeding import derive_seed
from .stats import heterogeneity_report

log = logging.getLogger("fglsim.cli")


def _configure_logging():
    level = os.environ.get("FGL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def load_data(cfg: ExperimentConfig):
    if cfg.scenario == "subgraph_fl":
        loader = load_subgraph_dataset
    else:
        loader = load_graph_collection
    if cfg.datasets is not None:
        return [loader(p) for p in cfg.datasets]
    if cfg.dataset is None:
        raise ConfigError("dataset: required")
    return loader(cfg.dataset)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _partition_once(cfg: ExperimentConfig, data):
    """Run the configured strategy exactly as repeat 0 of cmd_run would."""
    master = derive_seed(cfg.seed, "repeat", 0)
    prep = prepare_run(cfg, data, master)
    return prep


def _stats_payload(cfg: ExperimentConfig, prep) -> dict:
    if cfg.scenario == "subgraph_fl":
        graphs = [c.graph for c in prep.clients]
        return heterogeneity_report(graphs, prep.dropped_cross_edges).to_dict()
    # graph scenario: node-level statistics over each client's disjoint union,
    # label histograms over the graph labels
    unions = []
    hists = []
    owner = prep.assignment_owner
    for c in prep.clients:
        coll = c.collection
        unions.append(union_graph(coll))
        if coll.labels is not None:
            h = np.bincount(coll.labels, minlength=coll.num_classes).astype(float)
            hists.append((h / h.sum()).tolist() if h.sum() else h.tolist())
        else:
            hists.append([])
    rep = heterogeneity_report(unions, 0).to_dict()
    rep["label_histograms"] = hists
    rep["dropped_cross_edges"] = 0
    assert owner is not None
    return rep


def cmd_partition(config_path: str, out_dir: str, seed: int | None = None) -> int:
    cfg = parse_config(config_path)
    if seed is not None:
        cfg.seed = seed
    data = load_data(cfg)
    prep = _partition_once(cfg, data)
    out = Path(out_dir)
    payload = {
        "strategy": cfg.partition.strategy,
        "K": cfg.num_clients,
        "seed": cfg.seed,
        "owner": prep.assignment_owner.tolist(),
        "stats_ref": "stats.json",
    }
    if prep.community is not None:
        payload["community"] = prep.community.tolist()
    _dump_json(payload, out / "partition.json")
    _dump_json(_stats_payload(cfg, prep), out / "stats.json")
    print(f"wrote {out / 'partition.json'} and {out / 'stats.json'}")
    return 0


def cmd_stats(config_path: str, out_path: str, seed: int | None = None) -> int:
    cfg = parse_config(config_path)
    if seed is not None:
        cfg.seed = seed
    data = load_data(cfg)
    prep = _partition_once(cfg, data)
    _dump_json(_stats_payload(cfg, prep), Path(out_path))
    print(f"wrote {out_path}")
    return 0


def cmd_run(
    config_path: str,
    out_path: str,
    workers: int | None = None,
    seed: int | None = None,
) -> int:
    cfg = parse_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    report = {
        "config": serialize_config(cfg),
        "environment": {
            "package": "fglsim",
            "version": __version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        },
        "aborted": None,
    }
    t0 = time.perf_counter()
    try:
        data = load_data(cfg)
        result = run_experiment(cfg, data)
    except FglError as exc:
        report["aborted"] = {"code": exc.code, "message": str(exc)}
        report["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        _dump_json(report, Path(out_path))
        raise
    report.update(result)
    report["wall_ms"] = (time.perf_counter() - t0) * 1000.0
    _dump_json(report, Path(out_path))
    print(f"wrote {out_path}")
    return 0


def cmd_report(paths: list[str]) -> int:
    """Render one CSV row per report on stdout, best metric first."""
    rows = []
    metric_name = None
    for p in paths:
        with Path(p).open("r", encoding="utf-8") as fh:
            rep = json.load(fh)
        cfg = rep.get("config", {})
        aborted = rep.get("aborted")
        summary = rep.get("summary") or {}
        this_metric = summary.get("metric")
        if aborted is None:
            if metric_name is None:
                metric_name = this_metric
            elif this_metric != metric_name:
                raise ComparisonError(
                    f"{p}: reports mix metrics {metric_name!r} and {this_metric!r}"
                )
        comm = rep.get("communication") or {}
        rows.append(
            {
                "algorithm": cfg.get("algorithm", "?"),
                "dataset": cfg.get("dataset") or ",".join(cfg.get("datasets", []) or []) or "?",
                "partition": (cfg.get("partition") or {}).get("strategy", "?"),
                "metric": this_metric or "?",
                "mean": summary.get("mean"),
                "std": summary.get("std"),
                "total_bytes": comm.get("total_bytes", 0),
                "wall_ms": rep.get("wall_ms", 0.0),
                "status": "ABORTED" if aborted else "ok",
            }
        )
    ascending = metric_name == "mse"
    live = [r for r in rows if r["status"] == "ok" and r["mean"] is not None]
    dead = [r for r in rows if r not in live]
    live.sort(key=lambda r: r["mean"], reverse=not ascending)
    writer = csv.DictWriter(
        sys.stdout,
        fieldnames=[
            "algorithm", "dataset", "partition", "metric",
            "mean", "std", "total_bytes", "wall_ms", "status",
        ],
    )
    writer.writeheader()
    for r in live + dead:
        writer.writerow(r)
    return 0


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = argparse.ArgumentParser(
        prog="fglsim", description="federated graph learning simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition a dataset and report heterogeneity")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("stats", help="recompute the heterogeneity report only")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output stats.json path")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("run", help="run a federated experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output report.json path")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("report", help="summarize report files as CSV on stdout")
    p.add_argument("paths", nargs="+")

    args = parser.parse_args(argv)
    try:
        if args.command == "partition":
            return cmd_partition(args.config, args.out, args.seed)
        if args.command == "stats":
            return cmd_stats(args.config, args.out, args.seed)
        if args.command == "run":
            return cmd_run(args.config, args.out, args.workers, args.seed)
        return cmd_report(args.paths)
    except FglError as exc:
        print(exc.code, file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
