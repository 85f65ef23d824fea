"""Ranking metrics (AUC, GAUC, NDCG@K) and head/tail/overall slicing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

SLICES = ("head", "tail", "overall")
GAUC_WEIGHTING = "per-query AUC weighted by record count; single-class queries skipped"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    service_id: str
    label: int
    score: float
    slice: str


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """P(random positive outscores random negative), ties counted as one half.

    Rank-sum form: with average ranks r, AUC = (sum r_pos - n_pos(n_pos+1)/2) / (n_pos n_neg).
    The numerator is a multiple of 1/2, so the result is the correctly rounded exact ratio.
    """
    return float(auc_exact(labels, scores))


def auc_exact(labels: Sequence[int], scores: Sequence[float]) -> Fraction:
    """AUC as an exact rational."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise MetricError("labels and scores differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined for single-class input")
    # doubled ranks are integers, keeping the arithmetic exact
    ranks2 = (2 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(ranks2[pos].sum()) - n_pos * (n_pos + 1)
    return Fraction(u2, 2 * n_pos * n_neg)


def _groups(records: Iterable[EvalRecord]) -> dict[str, list[EvalRecord]]:
    out: dict[str, list[EvalRecord]] = {}
    for r in records:
        out.setdefault(r.query_id, []).append(r)
    return out


def gauc(records: Sequence[EvalRecord]) -> tuple[float, int]:
    """Weighted mean of per-query AUC; returns (value, number of skipped groups).

    Accumulated in rationals, so the value is the correctly rounded exact mean.
    """
    num, den, skipped = Fraction(0), 0, 0
    groups = _groups(records)
    for q in sorted(groups):
        g = groups[q]
        labels = [r.label for r in g]
        if min(labels) == max(labels):
            skipped += 1
            continue
        num += len(g) * auc_exact(labels, [r.score for r in g])
        den += len(g)
    if den == 0:
        raise MetricError("GAUC undefined: every query group is single-class")
    return float(num / den), skipped


def dcg(gains: Sequence[float], k: int) -> float:
    return math.fsum(g / math.log2(r + 2) for r, g in enumerate(gains[:k]))


def ndcg_at_k(records: Sequence[EvalRecord], k: int, exponential: bool = False) -> float:
    """Mean NDCG@k over queries having at least one positive.

    Order is score-descending with ties going to the smaller service id.
    Gains are the labels (or 2^label - 1 with ``exponential``).
    """
    if k < 1:
        raise MetricError("K must be >= 1")
    vals = []
    groups = _groups(records)
    for q in sorted(groups):
        g = groups[q]
        if not any(r.label for r in g):
            continue
        ranked = sorted(g, key=lambda r: (-r.score, r.service_id))
        gain = (lambda y: 2.0 ** y - 1.0) if exponential else float
        got = [gain(r.label) for r in ranked]
        ideal = sorted(got, reverse=True)
        vals.append(dcg(got, k) / dcg(ideal, k))
    if not vals:
        raise MetricError("NDCG undefined: no query has a positive")
    return math.fsum(vals) / len(vals)


def _slice_metrics(records: Sequence[EvalRecord], k: int) -> dict:
    out = {"auc": None, "gauc": None, f"ndcg@{k}": None,
           "n_queries": len({r.query_id for r in records}), "n_pairs": len(records),
           "n_skipped_groups": 0}
    if not records:
        return out
    labels = [r.label for r in records]
    if min(labels) != max(labels):
        out["auc"] = auc(labels, [r.score for r in records])
    try:
        out["gauc"], out["n_skipped_groups"] = gauc(records)
    except MetricError:
        out["n_skipped_groups"] = out["n_queries"]
    try:
        out[f"ndcg@{k}"] = ndcg_at_k(records, k)
    except MetricError:
        pass
    return out


@dataclass
class SliceReport:
    k: int
    slices: dict[str, dict]

    def as_dict(self) -> dict:
        return {"k": self.k, "gauc_weighting": GAUC_WEIGHTING, "slices": self.slices}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        cols = ["auc", "gauc", f"ndcg@{self.k}", "n_queries", "n_pairs", "n_skipped_groups"]
        lines = [f"# GAUC: {GAUC_WEIGHTING}",
                 f"{'slice':<8}" + "".join(f"{c:>18}" for c in cols)]
        for name in SLICES:
            row = self.slices[name]
            cells = []
            for c in cols:
                v = row[c]
                cells.append("null" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)))
            lines.append(f"{name:<8}" + "".join(f"{c:>18}" for c in cells))
        return "\n".join(lines) + "\n"


def make_records(pairs: Sequence[tuple[str, str, int]], scores: Sequence[float],
                 side_of) -> list[EvalRecord]:
    """Attach scores and the split-derived slice to labelled pairs."""
    return [EvalRecord(q, s, int(y), float(p), side_of(q))
            for (q, s, y), p in zip(pairs, scores)]


def slice_report(records: Sequence[EvalRecord], split_sides: Mapping[str, str] | None = None,
                 k: int = 10) -> SliceReport:
    """Metrics for the head slice, the tail slice and everything together.

    With ``split_sides`` given, each record's slice is checked against it.
    """
    if split_sides is not None:
        for r in records:
            if r.query_id not in split_sides:
                raise MetricError(f"query {r.query_id!r} is not covered by the split")
            if split_sides[r.query_id] != r.slice:
                raise MetricError(f"record slice for {r.query_id!r} disagrees with the split")
    by_slice = {
        "head": [r for r in records if r.slice == "head"],
        "tail": [r for r in records if r.slice == "tail"],
        "overall": list(records),
    }
    return SliceReport(k, {name: _slice_metrics(recs, k) for name, recs in by_slice.items()})
