"""CSV tables and SVG charts for evaluation and ablation runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_COLUMNS = ("auc", "gauc", "ndcg", "n_queries", "n_pairs", "n_skipped_groups")
SLICE_ORDER = ("head", "tail", "overall")

# fixed metadata keeps the SVG bytes stable across runs
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "tailsearch"


def metric_rows(report: dict, **extra) -> list[dict]:
    """Flatten a slice report dict into one row per slice."""
    k = report["k"]
    rows = []
    for name in SLICE_ORDER:
        s = report["slices"][name]
        row = dict(extra, slice=name)
        for col in METRIC_COLUMNS:
            row[col] = s[f"ndcg@{k}"] if col == "ndcg" else s[col]
        rows.append(row)
    return rows


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: "" if r.get(c) is None else r[c] for c in cols})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _float(v) -> float | None:
    return None if v in ("", None) else float(v)


def bar_chart(rows: Sequence[dict], metric: str, path: str | Path, group: str = "arm") -> None:
    """Grouped bars: one cluster per slice, one bar per ``group`` value (mean over seeds)."""
    groups = list(dict.fromkeys(r[group] for r in rows))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    width = 0.8 / max(len(groups), 1)
    for gi, g in enumerate(groups):
        means = []
        for sl in SLICE_ORDER:
            vals = [_float(r[metric]) for r in rows if r[group] == g and r["slice"] == sl]
            vals = [v for v in vals if v is not None]
            means.append(sum(vals) / len(vals) if vals else 0.0)
        xs = [i + gi * width - 0.4 + width / 2 for i in range(len(SLICE_ORDER))]
        ax.bar(xs, means, width=width, label=str(g))
    ax.set_xticks(range(len(SLICE_ORDER)), SLICE_ORDER)
    ax.set_ylabel(metric)
    vals = [_float(r[metric]) for r in rows if _float(r[metric]) is not None]
    if vals:
        lo = min(vals)
        ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(vals) + 0.02))
    ax.legend(fontsize=8, ncol=min(len(groups), 5))
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def loss_chart(histories: dict[str, Sequence[dict]], key: str, path: str | Path) -> None:
    """One line per history: ``key`` against the step index."""
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for name, hist in histories.items():
        pts = [(int(h["step"]), float(h[key])) for h in hist if h.get(key) not in ("", None)]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    if histories:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def render(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Build the CSV and SVG outputs for an ``eval`` or ``ablate`` run directory."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    rows, group = [], "arm"
    if (run_dir / "metrics.csv").exists():
        rows = read_csv(run_dir / "metrics.csv")
    elif (run_dir / "report.json").exists():
        rep = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
        rows = [{k: ("" if v is None else v) for k, v in r.items()}
                for r in metric_rows(rep, run=run_dir.name)]
        group = "run"
    if rows:
        write_csv(rows, out_dir / "metrics.csv")
        written.append(out_dir / "metrics.csv")
        for metric in ("auc", "gauc", "ndcg"):
            p = out_dir / f"{metric}_by_slice.svg"
            bar_chart(rows, metric, p, group)
            written.append(p)
    for stage, key in (("pretrain", "loss"), ("finetune", "bce")):
        hists = {}
        for f in sorted(run_dir.rglob(f"{stage}_history.csv")):
            rel = f.parent.relative_to(run_dir)
            hists[str(rel) if str(rel) != "." else stage] = read_csv(f)
        if hists:
            p = out_dir / f"{stage}_loss.svg"
            loss_chart(hists, key, p)
            written.append(p)
    if not written:
        raise FileNotFoundError(f"nothing to report: expected {run_dir / 'metrics.csv'}, "
                                f"{run_dir / 'report.json'} or *_history.csv files")
    return written
