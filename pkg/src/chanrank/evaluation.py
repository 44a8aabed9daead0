"""Ranking evaluation harness.

Turns per-channel scores into deterministic rankings and aggregates
selection quality across utterances: mean relevance of the selected
channel ("Best"), mean relevance over the top-k ranked channels, selection
accuracy against the oracle, and Pearson/Spearman correlation between
scores and relevance labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.stats

from .base import check_finite
from .selectors import ChannelScores


@dataclass
class RankingResult:
    """Channel ordering for one utterance, best channel first."""

    utt_id: str
    order: list
    scores: np.ndarray
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.order = [int(i) for i in self.order]


def rank_channels(scores: ChannelScores, utt_id: str = "") -> RankingResult:
    """Stable descending ranking; tied scores resolve to the lower index."""
    check_finite("scores", scores.scores)
    order = np.argsort(-scores.scores, kind="stable")
    return RankingResult(utt_id=utt_id, order=list(order),
                         scores=scores.scores, method=scores.method)


def selection_metrics(rankings: Sequence[RankingResult],
                      relevance: dict, k: int = 3) -> tuple[float, float]:
    """(Best, Top-k) mean relevance over utterances.

    Best is the relevance of each top-ranked channel; Top-k averages the
    relevance over the k best-ranked channels before averaging over
    utterances.
    """
    if not rankings:
        raise ValueError("no rankings to evaluate")
    best, topk = [], []
    for r in rankings:
        rel = np.asarray(relevance[r.utt_id], dtype=np.float64)
        if k > len(rel):
            raise ValueError(f"k={k} exceeds the {len(rel)} channels of {r.utt_id}")
        picked = np.asarray(r.order)
        best.append(rel[picked[0]])
        topk.append(rel[picked[:k]].mean())
    return float(np.mean(best)), float(np.mean(topk))


def selection_accuracy(rankings: Sequence[RankingResult], relevance: dict) -> float:
    """Fraction of utterances whose selected channel is relevance-maximal.

    Channels tied with the maximum all count as correct.
    """
    hits = 0
    for r in rankings:
        rel = np.asarray(relevance[r.utt_id], dtype=np.float64)
        if rel[r.order[0]] >= rel.max():
            hits += 1
    return hits / len(rankings)


def correlation(scores_flat, relevance_flat) -> tuple[float, float]:
    """Sample Pearson r plus Spearman rho (average-rank Pearson)."""
    x = np.asarray(scores_flat, dtype=np.float64)
    y = np.asarray(relevance_flat, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("correlation needs two equal-length vectors, n >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("correlation undefined for a constant vector")

    def pearson(a, b):
        a = a - a.mean()
        b = b - b.mean()
        return float(a @ b / np.sqrt((a @ a) * (b @ b)))

    rx = scipy.stats.rankdata(x, method="average")
    ry = scipy.stats.rankdata(y, method="average")
    return pearson(x, y), pearson(rx, ry)


@dataclass
class MethodReport:
    method: str
    best: float
    topk: float
    accuracy: float
    pearson_r: float
    spearman_rho: float


@dataclass
class EvalReport:
    """Multi-method comparison, oracle row included."""

    k: int
    n_utterances: int
    methods: dict = field(default_factory=dict)      # name -> MethodReport
    per_utterance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_utterances": self.n_utterances,
            "methods": {
                name: {
                    "best": m.best, "topk": m.topk, "accuracy": m.accuracy,
                    "pearson_r": m.pearson_r, "spearman_rho": m.spearman_rho,
                }
                for name, m in self.methods.items()
            },
        }


def evaluate_methods(rankings_by_method: dict, relevance: dict,
                     k: int = 3) -> EvalReport:
    """Score every method plus the relevance oracle on the same utterances.

    Raises if a method misses utterances present in ``relevance``, and
    asserts oracle dominance: no method's Best can exceed the oracle's.
    """
    utt_ids = sorted(relevance)
    for method, rankings in rankings_by_method.items():
        have = {r.utt_id for r in rankings}
        missing = [u for u in utt_ids if u not in have]
        if missing:
            raise ValueError(
                f"method {method!r} is missing utterances: {missing[:10]}"
                + ("..." if len(missing) > 10 else "")
            )

    oracle = [
        rank_channels(ChannelScores(scores=np.asarray(relevance[u]),
                                    method="oracle"), utt_id=u)
        for u in utt_ids
    ]
    all_methods = {"oracle": oracle}
    all_methods.update(rankings_by_method)

    report = EvalReport(k=k, n_utterances=len(utt_ids))
    for name, rankings in all_methods.items():
        by_id = {r.utt_id: r for r in rankings}
        ordered = [by_id[u] for u in utt_ids]
        best, topk = selection_metrics(ordered, relevance, k=k)
        acc = selection_accuracy(ordered, relevance)
        flat_scores = np.concatenate([r.scores for r in ordered])
        flat_rel = np.concatenate([np.asarray(relevance[r.utt_id])
                                   for r in ordered])
        try:
            r_p, r_s = correlation(flat_scores, flat_rel)
        except ValueError:
            r_p, r_s = float("nan"), float("nan")
        report.methods[name] = MethodReport(
            method=name, best=best, topk=topk, accuracy=acc,
            pearson_r=r_p, spearman_rho=r_s,
        )
        for r in ordered:
            report.per_utterance.append({
                "method": name, "id": r.utt_id,
                "scores": [float(s) for s in r.scores],
                "relevance": [float(v) for v in relevance[r.utt_id]],
            })

    oracle_best = report.methods["oracle"].best
    for name, m in report.methods.items():
        if m.best > oracle_best + 1e-9:
            raise AssertionError(
                f"oracle dominance violated: {name} Best {m.best} > "
                f"oracle Best {oracle_best}"
            )
    return report


def format_report_table(report: EvalReport, wer_view: bool = False) -> str:
    """Aligned plain-text comparison table.

    ``wer_view`` additionally prints 1 - relevance columns for datasets
    whose labels are word accuracies.
    """
    headers = ["method", "best", f"top{report.k}", "acc", "pearson", "spearman"]
    if wer_view:
        headers += ["best(1-rel)", f"top{report.k}(1-rel)"]
    rows = []
    names = ["oracle"] + sorted(n for n in report.methods if n != "oracle")
    for name in names:
        m = report.methods[name]
        row = [name, f"{m.best:.4f}", f"{m.topk:.4f}", f"{m.accuracy:.4f}",
               f"{m.pearson_r:.4f}", f"{m.spearman_rho:.4f}"]
        if wer_view:
            row += [f"{1.0 - m.best:.4f}", f"{1.0 - m.topk:.4f}"]
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
