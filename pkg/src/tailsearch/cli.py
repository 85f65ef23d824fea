"""Command-line entry point: ``tailsearch <command> [options]``.

Exit status is 0 on success, 1 on invalid input or configuration and 2 when
a run fails at runtime. Verbosity follows ``GARCIA_LOG`` (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

from .config import ARMS, ConfigError, RunConfig, load_config, write_resolved
from .contrastive import write_anchor_pairs
from .graph import Dataset, load_dataset
from .metrics import make_records, slice_report
from .report import metric_rows, render, write_csv
from .synthgen import generate
from .training import (Checkpoint, SearchModel, TrainingError, export_embeddings, finetune,
                       load_checkpoint, load_embeddings, predict_scores, pretrain,
                       retrieve_topk, save_checkpoint)

log = logging.getLogger("tailsearch")

PRETRAIN_COLUMNS = ("step", "epoch", "loss", "ktcl", "ktcl_query", "ktcl_service", "secl", "igcl")
FINETUNE_COLUMNS = ("step", "epoch", "bce", "val_auc")


def _setup_logging() -> None:
    level = os.environ.get("GARCIA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"GARCIA_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def fresh_dir(cfg: RunConfig, command: str, out: str | None) -> Path:
    """An empty output directory: ``--out`` if given, else a timestamped one."""
    if out is not None:
        path = Path(out)
        if path.exists() and any(path.iterdir()):
            raise ConfigError(f"output directory {path} is not empty")
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = Path(cfg.paths.out_root) / f"{command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, path)
    return path


def _write_history(rows: Sequence[dict], columns: Sequence[str], path: Path) -> None:
    if rows:
        write_csv([{c: r.get(c) for c in columns} for r in rows], path)


def _dataset(cfg: RunConfig, data_dir: str) -> Dataset:
    return load_dataset(data_dir, log_clicks=cfg.train_config().log_clicks_feature)


def _checkpoint(path: str) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: expected {p}")
    return load_checkpoint(p)


def _check_hash(cfg: RunConfig, ckpt: Checkpoint) -> None:
    if ckpt.config_hash and ckpt.config_hash != cfg.digest():
        log.warning("checkpoint was produced under a different configuration")


def evaluate(model: SearchModel, params, records, k: int):
    scores = predict_scores(model, params, [(q, s) for q, s, _ in records])
    recs = make_records(records, scores, model.split.side_of)
    sides = {q: model.split.side_of(q) for q in {r.query_id for r in recs}}
    return slice_report(recs, sides, k), recs


def run_arm(data: Dataset, cfg: RunConfig, arm: str, out: Path | None = None) -> dict:
    """Train and evaluate one ablation arm; returns the slice report dict."""
    overrides = {
        "full": {},
        "wo_se": {"hyper": replace(cfg.hyper, alpha=0.0)},
        "wo_ig": {"hyper": replace(cfg.hyper, beta=0.0)},
        "wo_all": {"use_pretrain": False},
        "shared": {"use_pretrain": False, "shared_encoder": True},
    }[arm]
    tcfg = cfg.train_config(**overrides)
    model = SearchModel(data, tcfg)
    params = model.init_params()
    if tcfg.use_pretrain:
        pre = pretrain(model, params, cfg.digest())
        params = pre.params
        if out is not None:
            _write_history(pre.history, PRETRAIN_COLUMNS, out / "pretrain_history.csv")
    ft = finetune(model, params, chash=cfg.digest())
    report, _ = evaluate(model, ft.params, data.test, cfg.eval.k)
    if out is not None:
        _write_history(ft.history, FINETUNE_COLUMNS, out / "finetune_history.csv")
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report.as_dict()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = fresh_dir(cfg, "gen-data", args.out)
    scen = generate(cfg.scenario_config(), out)
    print(f"wrote scenario to {out} (top-1% PV share {scen.pv_share(0.01):.4f})")
    return 0


def cmd_build_graph(args, cfg: RunConfig) -> int:
    data = _dataset(cfg, args.data)
    model = SearchModel(data, cfg.train_config())
    out = fresh_dir(cfg, "build-graph", args.out)
    report = data.report.as_dict()
    report.update(n_head_queries=len(model.split.head_queries),
                  n_tail_queries=len(model.split.tail_queries),
                  n_anchor_pairs=len(model.pairs), n_skipped_tail_queries=model.skipped_tails,
                  n_intentions=len(data.forest))
    (out / "build_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    write_anchor_pairs(model.pairs, out / "anchor_pairs.tsv")
    with open(out / "split.tsv", "w", encoding="utf-8") as fh:
        for q in data.graph.queries:
            fh.write(f"{q}\t{model.split.side_of(q)}\n")
    print(f"graph: {report['n_queries']} queries, {report['n_services']} services, "
          f"{len(model.pairs)} anchor pairs -> {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    data = _dataset(cfg, args.data)
    model = SearchModel(data, cfg.train_config())
    out = fresh_dir(cfg, "pretrain", args.out)
    ckpt = pretrain(model, chash=cfg.digest())
    save_checkpoint(ckpt, out / "checkpoint.grca")
    _write_history(ckpt.history, PRETRAIN_COLUMNS, out / "pretrain_history.csv")
    print(f"pretrained {len(ckpt.history)} steps, final loss {ckpt.history[-1]['loss']:.6f} -> {out}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    data = _dataset(cfg, args.data)
    model = SearchModel(data, cfg.train_config())
    params = None
    if args.checkpoint:
        pre = _checkpoint(args.checkpoint)
        _check_hash(cfg, pre)
        params = pre.params
    out = fresh_dir(cfg, "finetune", args.out)
    ckpt = finetune(model, params, chash=cfg.digest())
    save_checkpoint(ckpt, out / "checkpoint.grca")
    _write_history(ckpt.history, FINETUNE_COLUMNS, out / "finetune_history.csv")
    print(f"fine-tuned to epoch {ckpt.epoch} -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    data = _dataset(cfg, args.data)
    model = SearchModel(data, cfg.train_config())
    ckpt = _checkpoint(args.checkpoint)
    _check_hash(cfg, ckpt)
    records = {"train": data.train, "val": data.val, "test": data.test}[args.split]
    report, recs = evaluate(model, ckpt.params, records, args.k or cfg.eval.k)
    out = fresh_dir(cfg, "eval", args.out)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(f"{r.query_id}\t{r.service_id}\t{r.label}\t{r.score:.9g}\t{r.slice}\n")
    sys.stdout.write(report.to_text())
    return 0


def cmd_export(args, cfg: RunConfig) -> int:
    data = _dataset(cfg, args.data)
    model = SearchModel(data, cfg.train_config())
    ckpt = _checkpoint(args.checkpoint)
    _check_hash(cfg, ckpt)
    out = fresh_dir(cfg, "export", args.out)
    n = export_embeddings(model, ckpt.params, out / "embeddings.tsv")
    print(f"exported {n} embeddings -> {out / 'embeddings.tsv'}")
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    emb = Path(args.embeddings)
    if not emb.exists():
        raise FileNotFoundError(f"embeddings not found: expected {emb}")
    nodes = Path(args.data) / "nodes.jsonl"
    if not nodes.exists():
        raise FileNotFoundError(f"missing input: expected {nodes}")
    with open(nodes, encoding="utf-8") as fh:
        queries = [rec["id"] for rec in map(json.loads, filter(str.strip, fh))
                   if rec.get("kind") == "query"]
    table = load_embeddings(emb, queries)
    if args.query not in table.queries:
        raise ConfigError(f"unknown query {args.query!r}")
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    for rank, (sid, score) in enumerate(retrieve_topk(args.query, args.k, table), 1):
        print(f"{rank}\t{sid}\t{score:.9g}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = fresh_dir(cfg, "ablate", args.out)
    rows = []
    start = time.perf_counter()
    for seed in cfg.ablate.seeds:
        scfg = replace(cfg, seed=seed)
        data_dir = out / f"seed{seed}" / "data"
        generate(scfg.scenario_config(), data_dir)
        data = _dataset(scfg, str(data_dir))
        for arm in cfg.ablate.arms:
            arm_dir = out / f"seed{seed}" / arm
            arm_dir.mkdir(parents=True)
            t0 = time.perf_counter()
            rep = run_arm(data, scfg, arm, arm_dir)
            log.info("seed %d arm %s done in %.1fs", seed, arm, time.perf_counter() - t0)
            rows += metric_rows(rep, arm=arm, seed=seed)
            print(f"seed {seed} {arm:<7} tail auc {rep['slices']['tail']['auc']} "
                  f"overall auc {rep['slices']['overall']['auc']}", flush=True)
    write_csv(rows, out / "metrics.csv")
    summary = {"seconds": round(time.perf_counter() - start, 1),
               "arms": list(cfg.ablate.arms), "seeds": list(cfg.ablate.seeds)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"ablation finished -> {out / 'metrics.csv'}")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: expected {run}")
    out = fresh_dir(cfg, "report", args.out)
    for p in render(run, out):
        print(p)
    return 0


def cmd_show_config(args, cfg: RunConfig) -> int:
    print(json.dumps(cfg.as_dict(), indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic scenario"),
    "build-graph": (cmd_build_graph, "build the graph, split and anchor pairs"),
    "pretrain": (cmd_pretrain, "contrastive pre-training"),
    "finetune": (cmd_finetune, "click-prediction fine-tuning"),
    "eval": (cmd_eval, "sliced AUC/GAUC/NDCG evaluation"),
    "export": (cmd_export, "write embeddings.tsv"),
    "retrieve": (cmd_retrieve, "top-k services for a query"),
    "ablate": (cmd_ablate, "run every ablation arm over several seeds"),
    "report": (cmd_report, "CSV plus SVG charts for a run directory"),
    "show-config": (cmd_show_config, "print the resolved configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. hyper.embed_dim=16")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="output directory (must be empty or absent)")
    parser = argparse.ArgumentParser(prog="tailsearch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=help_)
            for name, (_, help_) in COMMANDS.items()}
    for name in ("build-graph", "pretrain", "finetune", "eval", "export", "retrieve"):
        subs[name].add_argument("--data", required=True, help="scenario directory")
    subs["finetune"].add_argument("--checkpoint", help="pre-trained checkpoint (fresh init if absent)")
    for name in ("eval", "export"):
        subs[name].add_argument("--checkpoint", required=True)
    subs["eval"].add_argument("--split", choices=("train", "val", "test"), default="test")
    subs["eval"].add_argument("--k", type=int, help="NDCG cutoff (default from config)")
    subs["retrieve"].add_argument("--embeddings", required=True)
    subs["retrieve"].add_argument("--query", required=True)
    subs["retrieve"].add_argument("--k", type=int, default=10)
    subs["report"].add_argument("--run", required=True, help="eval or ablate output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config, args.set, args.seed)
        if args.command == "ablate" and not set(cfg.ablate.arms) <= set(ARMS):
            raise ConfigError("unknown ablation arm")
        return COMMANDS[args.command][0](args, cfg)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (TrainingError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
