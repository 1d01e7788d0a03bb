"""Metrics, threshold tuning and the inference speed/accounting harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import CandidateSet
from .errors import ConfigError


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    n_records: int
    n_empty_predictions: int
    average: str = "macro"
    per_record: list[tuple[str, float, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_records": self.n_records,
            "n_empty_predictions": self.n_empty_predictions,
            "average": self.average,
        }

    def table(self) -> str:
        return (
            f"{self.average:>14}  P {self.precision:6.4f}  R {self.recall:6.4f}  "
            f"F1 {self.f1:6.4f}  ({self.n_records} records, "
            f"{self.n_empty_predictions} empty predictions)"
        )


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)


def macro_prf(
    predictions: dict[str, set[int]],
    golds: dict[str, set[int]],
    average: str = "macro",
) -> EvalReport:
    """Per-record precision/recall averaged over records, F1 as the harmonic
    mean of the two averages. Empty predictions score precision 0 and are
    counted. ``average`` also supports "micro" (corpus-level counts) and
    "per_record_f1" (mean of per-record F1)."""
    if set(predictions) != set(golds):
        raise ConfigError("prediction and gold record ids differ")
    if average not in ("macro", "micro", "per_record_f1"):
        raise ConfigError(f"unknown average {average!r}")
    per_record = []
    n_empty = 0
    hit_total = pred_total = gold_total = 0
    for rid in sorted(golds):
        pred, gold = predictions[rid], golds[rid]
        if not gold:
            raise ConfigError(f"record {rid!r} has an empty gold set")
        hits = len(pred & gold)
        if pred:
            p = hits / len(pred)
        else:
            p = 0.0
            n_empty += 1
        r = hits / len(gold)
        per_record.append((rid, p, r))
        hit_total += hits
        pred_total += len(pred)
        gold_total += len(gold)

    n = len(per_record)
    if average == "micro":
        precision = hit_total / pred_total if pred_total else 0.0
        recall = hit_total / gold_total
        f1 = _f1(precision, recall)
    else:
        precision = sum(p for _, p, _ in per_record) / n
        recall = sum(r for _, _, r in per_record) / n
        if average == "per_record_f1":
            f1 = sum(_f1(p, r) for _, p, r in per_record) / n
        else:
            f1 = _f1(precision, recall)
    return EvalReport(
        precision=precision, recall=recall, f1=f1, n_records=n,
        n_empty_predictions=n_empty, average=average, per_record=per_record,
    )


def recall_at_k(
    candidate_sets: list[CandidateSet], golds: dict[str, set[int]], k: int
) -> float:
    """Mean over records of |top-k candidates intersect gold| / |gold|."""
    if not candidate_sets:
        raise ConfigError("no candidate sets given")
    total = 0.0
    for cs in candidate_sets:
        gold = golds[cs.record_id]
        if not gold:
            raise ConfigError(f"record {cs.record_id!r} has an empty gold set")
        top = set(cs.top(k))  # raises when k exceeds the set size
        total += len(top & gold) / len(gold)
    return total / len(candidate_sets)


def tune_threshold(
    probabilities: dict[str, list[tuple[int, float]]],
    golds: dict[str, set[int]],
) -> float:
    """Sweep every distinct probability (plus 0) as a strict threshold and
    return the one maximizing macro F1; ties pick the larger threshold.
    Exhaustive over the grid, hence optimal on it by construction."""
    if not probabilities:
        raise ConfigError("empty development probabilities")
    grid = {0.0}
    for pairs in probabilities.values():
        grid.update(p for _, p in pairs)
    best_tau = 0.0
    best_f1 = -1.0
    for tau in sorted(grid):
        preds = {
            rid: {tid for tid, p in pairs if p > tau}
            for rid, pairs in probabilities.items()
        }
        f1 = macro_prf(preds, golds).f1
        if f1 >= best_f1:
            best_f1 = f1
            best_tau = tau
    return best_tau


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------


@dataclass
class BenchModel:
    """Adapter handed to the bench harness.

    ``infer`` runs one record end to end; ``counter`` must tally encoder
    passes; ``passes_per_record`` is the analytic count the tally is checked
    against; ``entries_per_record`` the attention score entries per head per
    layer for one record."""

    name: str
    infer: Callable
    counter: object
    passes_per_record: int
    entries_per_record: Callable


@dataclass
class BenchRow:
    name: str
    n_records: int
    repetitions: int
    forward_passes: int
    expected_passes: int
    attention_entries: int
    seconds: float
    sents_per_sec: float

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "name": self.name,
            "n_records": self.n_records,
            "repetitions": self.repetitions,
            "forward_passes": self.forward_passes,
            "expected_passes": self.expected_passes,
            "attention_entries": self.attention_entries,
        }
        if include_timing:
            out["seconds"] = self.seconds
            out["sents_per_sec"] = self.sents_per_sec
        return out


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def table(self) -> str:
        header = (
            f"{'model':<28} {'passes':>8} {'expected':>8} "
            f"{'attn entries':>13} {'sents/sec':>10}"
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.name:<28} {r.forward_passes:>8} {r.expected_passes:>8} "
                f"{r.attention_entries:>13} {r.sents_per_sec:>10.2f}"
            )
        return "\n".join(lines)

    def row(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def bench_inference(
    models: list[BenchModel],
    records,
    repetitions: int = 3,
    warmup: int = 1,
) -> BenchReport:
    """Time per-record inference; warm-up runs are excluded, forward-pass
    tallies are asserted against the analytic counts."""
    records = list(records)
    report = BenchReport()
    for m in models:
        for _ in range(warmup):
            for rec in records:
                m.infer(rec)
        m.counter.reset()
        start = time.perf_counter()
        for _ in range(repetitions):
            for rec in records:
                m.infer(rec)
        elapsed = time.perf_counter() - start
        n = len(records) * repetitions
        expected = m.passes_per_record * n
        if m.counter.count != expected:
            raise ConfigError(
                f"{m.name}: forward-pass counter {m.counter.count} != analytic "
                f"count {expected}"
            )
        entries = sum(m.entries_per_record(rec) for rec in records)
        report.rows.append(
            BenchRow(
                name=m.name,
                n_records=len(records),
                repetitions=repetitions,
                forward_passes=m.counter.count,
                expected_passes=expected,
                attention_entries=entries,
                seconds=elapsed,
                sents_per_sec=n / elapsed if elapsed > 0 else float("inf"),
            )
        )
    return report
