"""Ranking, calibration and attention-concentration metrics, bucketed by length.

Metrics that are undefined for the given input (single-class AUC, empty
weight vectors) return ``None`` rather than raising.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import BUCKETS, DEFAULT_BOUNDS, bucket_of

REPORT_ROWS = BUCKETS + ("overall",)
METRIC_FIELDS = ("auc", "gauc", "logloss", "mean_gini", "mean_entropy", "n_samples", "n_users")


def auc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(per_user: Mapping[object, tuple[Sequence[float], Sequence[int]]]) -> float | None:
    """Unweighted mean of per-user AUC over users that have both classes."""
    vals = [a for a in (auc(s, y) for s, y in per_user.values()) if a is not None]
    return float(np.mean(vals)) if vals else None


def logloss(p, y, eps: float = 1e-7) -> float | None:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    if p.size == 0:
        return None
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def gini(weights) -> float | None:
    """Gini coefficient of a nonnegative weight vector (renormalised internally).

    Uses ``sum_i (2i - n - 1) w_(i) / n`` over ascending-sorted weights, which
    is 0 for uniform weights and (n-1)/n for a one-hot vector.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0 or w.sum() <= 0:
        return None
    w = np.sort(w / w.sum())
    n = w.size
    i = np.arange(1, n + 1)
    # rounding can leave a uniform vector a hair below zero
    return max(0.0, float(np.sum((2 * i - n - 1) * w) / n))


def entropy(weights) -> float | None:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0 or w.sum() <= 0:
        return None
    w = w / w.sum()
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def _group_by_user(user_ids, scores, labels) -> dict:
    groups: dict = {}
    for u, s, y in zip(user_ids, scores, labels):
        g = groups.setdefault(u, ([], []))
        g[0].append(s)
        g[1].append(y)
    return groups


def _mean_or_none(vals: list) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def bucketed_report(predictions, labels, user_ids, lengths, traces: Iterable = (),
                    bounds: Sequence[int] = DEFAULT_BOUNDS, config: dict | None = None,
                    digest: str = "") -> dict:
    """AUC / GAUC / logloss / attention Gini and entropy per length bucket and overall.

    ``traces`` are attention traces (anything with ``weights``, ``bucket`` and
    ``degenerate`` attributes); their Gini and entropy are averaged per bucket.
    The report also carries the variance and range of the three bucket mean
    Gini values.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    uids = np.asarray(user_ids)
    buckets = np.asarray([bucket_of(int(L), bounds) for L in lengths])
    trace_stats: dict[str, tuple[list, list]] = {b: ([], []) for b in BUCKETS}
    for tr in traces:
        if getattr(tr, "degenerate", False):
            continue
        trace_stats[tr.bucket][0].append(gini(tr.weights))
        trace_stats[tr.bucket][1].append(entropy(tr.weights))

    rows = {}
    for name in REPORT_ROWS:
        sel = np.ones(p.size, dtype=bool) if name == "overall" else buckets == name
        if name == "overall":
            ginis = [g for b in BUCKETS for g in trace_stats[b][0]]
            ents = [e for b in BUCKETS for e in trace_stats[b][1]]
        else:
            ginis, ents = trace_stats[name]
        n = int(sel.sum())
        rows[name] = {
            "auc": auc(p[sel], y[sel]) if n else None,
            "gauc": gauc(_group_by_user(uids[sel], p[sel], y[sel])) if n else None,
            "logloss": logloss(p[sel], y[sel]) if n else None,
            "mean_gini": _mean_or_none(ginis),
            "mean_entropy": _mean_or_none(ents),
            "n_samples": n,
            "n_users": int(np.unique(uids[sel]).size),
        }
    bucket_ginis = [rows[b]["mean_gini"] for b in BUCKETS if rows[b]["mean_gini"] is not None]
    return {
        "buckets": rows,
        "bucket_bounds": list(bounds),
        "gini_variance": float(np.var(bucket_ginis)) if bucket_ginis else None,
        "gini_range": float(np.ptp(bucket_ginis)) if bucket_ginis else None,
        "config": config or {},
        "dataset_digest": digest,
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("bucket",) + METRIC_FIELDS)
    for name in REPORT_ROWS:
        row = report["buckets"][name]
        writer.writerow([name] + [_fmt(row[f]) for f in METRIC_FIELDS])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
