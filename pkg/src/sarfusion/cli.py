"""Experiment runner: ``sarfusion {synth,pretrain,finetune,evaluate,grid,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import encoders, geosample
from .config import ConfigError, ExperimentConfig, load_config
from .data_model import BAND_STATS_FILE, BandStats, Manifest, compute_band_stats
from .finetune_eval import EvalReport, evaluate_checkpoint, finetune_run
from .pretrain import pretrain_run
from .report import write_grid_table, write_iou_long_csv, write_report
from .synthgen import generate_dataset

log = logging.getLogger("sarfusion")

GRAPH_FILE = "graph.json"
RESOLVED_CONFIG = "config.resolved.json"
DONE_MARKER = "DONE"


def _locations(cfg: ExperimentConfig) -> np.ndarray:
    loc, s = cfg.locations, cfg.synth
    if loc.mode == "uniform":
        return geosample.sample_sphere_uniform(s.seed, s.n_samples)
    if loc.mode == "clustered":
        return geosample.sample_clustered(s.seed, s.n_samples, loc.n_clusters, loc.cluster_radius_deg)
    pts = np.asarray(json.loads(Path(loc.path).read_text()), dtype=np.float64).reshape(-1, 2)
    if len(pts) != s.n_samples:
        raise ConfigError(f"{loc.path}: {len(pts)} locations for n_samples={s.n_samples}")
    return pts


def cmd_synth(cfg: ExperimentConfig, out: Path | None = None) -> Path:
    root = Path(out) if out is not None else Path(cfg.data.root)
    manifest = generate_dataset(cfg.synth, _locations(cfg), root)
    compute_band_stats(manifest).save(root / BAND_STATS_FILE)
    (root / GRAPH_FILE).write_text(geosample.build_neighbor_graph(manifest.locations).to_json())
    cfg.save(root / RESOLVED_CONFIG)
    log.info("wrote %d samples to %s", len(manifest), root)
    return root


def _dataset(root) -> tuple[Manifest, BandStats]:
    root = Path(root)
    manifest = Manifest.load(root)
    stats_path = root / BAND_STATS_FILE
    stats = BandStats.load(stats_path) if stats_path.exists() else compute_band_stats(manifest)
    return manifest, stats


def _graph(root, manifest: Manifest) -> geosample.NeighborGraph:
    path = Path(root) / GRAPH_FILE
    if path.exists():
        g = geosample.NeighborGraph.from_json(path.read_text())
        if len(g) == len(manifest):
            return g
    return geosample.build_neighbor_graph(manifest.locations)


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> Path:
    out = Path(out)
    cfg.save(out / RESOLVED_CONFIG)
    manifest = stats = graph = None
    if cfg.pretrain.objective != "none":
        manifest, stats = _dataset(cfg.data.root)
        if cfg.pretrain.objective == "t2v":
            graph = _graph(cfg.data.root, manifest)
    return pretrain_run(cfg.pretrain, manifest, graph, out / "pretrain", stats).checkpoint


def cmd_finetune(cfg: ExperimentConfig, out: Path, checkpoint=None) -> Path:
    out = Path(out)
    cfg.save(out / RESOLVED_CONFIG)
    if checkpoint is None and (out / "pretrain" / "pretrain.ckpt").exists():
        checkpoint = out / "pretrain" / "pretrain.ckpt"
    manifest, _ = _dataset(cfg.labeled_root)
    return finetune_run(checkpoint, manifest, cfg.finetune, out / "finetune").report_path


def cmd_evaluate(cfg: ExperimentConfig, out: Path, checkpoint=None) -> Path:
    out = Path(out)
    cfg.save(out / RESOLVED_CONFIG)
    checkpoint = checkpoint or out / "finetune" / "finetune.ckpt"
    manifest, _ = _dataset(cfg.labeled_root)
    report = evaluate_checkpoint(checkpoint, manifest, batch_size=cfg.finetune.batch_size)
    (out / "evaluate").mkdir(parents=True, exist_ok=True)
    return report.save(out / "evaluate" / "eval_report.json")


def cell_dir(out: Path, objective: str, encoder: str) -> Path:
    return Path(out) / "cells" / f"{objective}__{encoder}"


def _run_cell(cfg: ExperimentConfig, out: Path, objective: str, encoder: str) -> str:
    d = cell_dir(out, objective, encoder)
    cell_cfg = replace(cfg, pretrain=replace(cfg.pretrain, objective=objective, encoder=encoder),
                       finetune=replace(cfg.finetune, encoder=encoder))
    cmd_pretrain(cell_cfg, d)
    cmd_finetune(cell_cfg, d, d / "pretrain" / "pretrain.ckpt")
    (d / DONE_MARKER).write_text("ok\n")
    return f"{objective}/{encoder}"


def header_plus_encoder_params(encoder: str, nc: int) -> int:
    return sum(encoders.encoder_param_table(encoder).values()) + sum(encoders.header_param_table(nc).values())


def cmd_grid(cfg: ExperimentConfig, out: Path) -> dict:
    """Run every (objective, encoder) cell not already marked done; write the summary tables.

    Returns ``{"executed": [...], "skipped": [...], "complete": bool, ...}``.
    """
    out = Path(out)
    cfg.save(out / RESOLVED_CONFIG)
    encs = [encoders.canonical_variant(e) for e in cfg.grid.encoders]
    cells = [(o, e) for o in cfg.grid.objectives for e in encs]
    todo = [c for c in cells if not (cell_dir(out, *c) / DONE_MARKER).exists()]
    skipped = [f"{o}/{e}" for o, e in cells if (o, e) not in todo]
    if cfg.grid.max_cells is not None:
        todo = todo[: cfg.grid.max_cells]
    executed = []
    if cfg.grid.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.grid.workers) as pool:
            executed = list(pool.map(_run_cell, [cfg] * len(todo), [out] * len(todo),
                                     [o for o, _ in todo], [e for _, e in todo]))
    else:
        for o, e in todo:
            log.info("grid cell %s/%s", o, e)
            executed.append(_run_cell(cfg, out, o, e))

    results, reports = {}, []
    for o, e in cells:
        rp = cell_dir(out, o, e) / "finetune" / "eval_report.json"
        if (cell_dir(out, o, e) / DONE_MARKER).exists() and rp.exists():
            rep = EvalReport.load(rp)
            results[(o, e)] = rep.weighted_miou
            reports.append(json.loads(rp.read_text()))
    params = {e: header_plus_encoder_params(e, cfg.finetune.nc) for e in encs}
    table = write_grid_table(results, cfg.grid.objectives, encs, params, out / "grid_table.csv")
    long_csv = write_iou_long_csv(reports, out / "iou_by_class.csv")
    return {"executed": executed, "skipped": skipped, "complete": len(results) == len(cells),
            "grid_table": table, "iou_by_class": long_csv}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", type=Path, help="output / run directory")
    common.add_argument("--deterministic", action="store_true",
                        help="serial, single-threaded, bit-reproducible execution")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sarfusion", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="segmentation fine-tuning + test report")
    ft.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (default: <out>/pretrain)")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a fine-tuned checkpoint")
    ev.add_argument("--checkpoint", type=Path, help="fine-tuned checkpoint (default: <out>/finetune)")
    sub.add_parser("grid", parents=[common], help="all objective x encoder cells, resumable")
    rp = sub.add_parser("report", parents=[common], help="SVG + CSV of per-class IoU")
    rp.add_argument("runs", nargs="+", type=Path, help="run directories or eval_report.json files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.deterministic or None)
        out = args.out or Path("runs") / args.command
        if args.command == "synth":
            print(cmd_synth(cfg, args.out))
        elif args.command == "pretrain":
            print(cmd_pretrain(cfg, out))
        elif args.command == "finetune":
            print(cmd_finetune(cfg, out, args.checkpoint))
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, out, args.checkpoint))
        elif args.command == "grid":
            res = cmd_grid(cfg, out)
            print(f"executed {len(res['executed'])}, skipped {len(res['skipped'])}, "
                  f"complete={res['complete']} -> {res['grid_table']}")
        elif args.command == "report":
            svg, csv_path = write_report(args.runs, out)
            print(svg)
            print(csv_path)
    except (ConfigError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"sarfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
