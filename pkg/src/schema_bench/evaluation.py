"""Schema alignment evaluation: similarity matrices, threshold-sweep
precision/recall/F1, trapezoidal AUC, corpus aggregation, paired significance
testing, and Spearman rank correlation.

A generated aspect matches a reference aspect when their fingerprint
similarity strictly exceeds the threshold. Matching is many-to-many: one
generated aspect may recall several references and vice versa. Metrics are
swept over thresholds 0.40..1.00 in steps of 0.01 (61 points) and each series
is integrated with the trapezoidal rule, so AUCs live in [0, 0.60] unless
normalized by the range width.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .errors import (
    EmptyCorpus,
    LengthMismatch,
    NotAPermutation,
    ScorerError,
    TooFewSamples,
)
from .schema import AspectSchema, schema_fingerprints

THRESHOLD_LO = 0.40
THRESHOLD_HI = 1.00
THRESHOLD_STEP = 0.01
AUC_RANGE_WIDTH = THRESHOLD_HI - THRESHOLD_LO

Scorer = Callable[[str, str], float]


def make_thresholds(
    lo: float = THRESHOLD_LO, hi: float = THRESHOLD_HI, step: float = THRESHOLD_STEP
) -> tuple[float, ...]:
    if not (0.0 <= lo < hi <= 1.0) or step <= 0:
        raise ValueError("need 0 <= lo < hi <= 1 and step > 0")
    count = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 12) for i in range(count))


@dataclass(frozen=True)
class SimilarityMatrix:
    """G x R grid of [0,1] scores between generated and reference aspects."""

    scores: tuple[tuple[float, ...], ...]
    gen_names: tuple[str, ...]
    ref_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.scores) != len(self.gen_names):
            raise LengthMismatch("row count does not match generated labels")
        for row in self.scores:
            if len(row) != len(self.ref_names):
                raise LengthMismatch("column count does not match reference labels")
            for v in row:
                if not math.isfinite(v) or not 0.0 <= v <= 1.0:
                    raise ValueError(f"similarity {v} outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.gen_names), len(self.ref_names)

    def transpose(self) -> "SimilarityMatrix":
        g, r = self.shape
        return SimilarityMatrix(
            scores=tuple(tuple(self.scores[i][j] for i in range(g)) for j in range(r)),
            gen_names=self.ref_names,
            ref_names=self.gen_names,
        )


@dataclass(frozen=True)
class EvalCurve:
    thresholds: tuple[float, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    auc_precision: float
    auc_recall: float
    auc_f1: float

    def __post_init__(self):
        k = len(self.thresholds)
        if not (len(self.precision) == len(self.recall) == len(self.f1) == k):
            raise LengthMismatch("metric series must align with thresholds")


def similarity_matrix(gen: AspectSchema, ref: AspectSchema, scorer: Scorer) -> SimilarityMatrix:
    """Score every generated fingerprint against every reference fingerprint,
    clamping into [0, 1]. An empty generation yields a 0 x R matrix."""
    if len(ref) < 1:
        raise ValueError("reference schema must have at least one aspect")
    gen_fps = schema_fingerprints(gen)
    ref_fps = schema_fingerprints(ref)
    rows = []
    for gfp in gen_fps:
        row = []
        for rfp in ref_fps:
            try:
                value = float(scorer(gfp, rfp))
            except Exception as exc:
                raise ScorerError(f"scorer failed on a fingerprint pair: {exc}") from exc
            if not math.isfinite(value):
                raise ScorerError(f"scorer returned non-finite value {value!r}")
            row.append(min(1.0, max(0.0, value)))
        rows.append(tuple(row))
    return SimilarityMatrix(
        scores=tuple(rows),
        gen_names=tuple(a.name for a in gen.aspects),
        ref_names=tuple(a.name for a in ref.aspects),
    )


def metrics_at_threshold(m: SimilarityMatrix, t: float) -> tuple[float, float, float]:
    """(precision, recall, f1) under the strict `similarity > t` match rule.

    A generated aspect counts as matched when any of its row entries exceeds
    t; a reference aspect counts as recalled when any of its column entries
    exceeds t. Precision is 0 for an empty generation; F1 is 0 when both
    components vanish.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    g, r = m.shape
    matched_gen = sum(1 for row in m.scores if any(v > t for v in row))
    recalled_ref = sum(
        1 for j in range(r) if any(m.scores[i][j] > t for i in range(g))
    )
    precision = matched_gen / g if g else 0.0
    recall = recalled_ref / r
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def trapezoid_auc(thresholds: Sequence[float], values: Sequence[float]) -> float:
    """Unnormalized trapezoidal integral of values over thresholds."""
    if len(thresholds) != len(values):
        raise LengthMismatch(
            f"{len(thresholds)} thresholds vs {len(values)} values"
        )
    if len(thresholds) < 2:
        raise LengthMismatch("need at least two points to integrate")
    for a, b in zip(thresholds, thresholds[1:]):
        if b <= a:
            raise ValueError("thresholds must be strictly ascending")
    total = 0.0
    for i in range(len(thresholds) - 1):
        total += 0.5 * (values[i] + values[i + 1]) * (thresholds[i + 1] - thresholds[i])
    return total


def sweep(m: SimilarityMatrix, thresholds: Sequence[float] | None = None) -> EvalCurve:
    """Evaluate metrics at every threshold and integrate each series."""
    ts = tuple(thresholds) if thresholds is not None else make_thresholds()
    precision, recall, f1 = [], [], []
    for t in ts:
        p, r, f = metrics_at_threshold(m, t)
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return EvalCurve(
        thresholds=ts,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        auc_precision=trapezoid_auc(ts, precision),
        auc_recall=trapezoid_auc(ts, recall),
        auc_f1=trapezoid_auc(ts, f1),
    )


def aggregate_corpus(curves: Sequence[EvalCurve]) -> tuple[float, float, float]:
    """Macro means of (recall AUC, precision AUC, f1 AUC) across instances."""
    if not curves:
        raise EmptyCorpus("cannot aggregate an empty curve set")
    n = len(curves)
    return (
        sum(c.auc_recall for c in curves) / n,
        sum(c.auc_precision for c in curves) / n,
        sum(c.auc_f1 for c in curves) / n,
    )


# --- statistics ---------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def _betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t with `dof` degrees of freedom."""
    if dof < 1:
        raise TooFewSamples("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return _betainc_regularized(dof / 2.0, 0.5, x)


def paired_ttest(
    a: Sequence[float], b: Sequence[float], alpha: float = 0.05
) -> tuple[float, float, bool]:
    """Two-tailed paired t-test on per-instance differences a_i - b_i.

    Returns (t statistic, p value, significant at `alpha`). Degenerate inputs
    with all-zero differences return (0, 1, False); zero-variance nonzero
    differences return an infinite statistic with p = 0.
    """
    if len(a) != len(b):
        raise LengthMismatch(f"sample lengths differ: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise TooFewSamples(f"need at least 2 paired samples, got {n}")
    diffs = [float(x) - float(y) for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0, False
        t = math.inf if mean > 0 else -math.inf
        return t, 0.0, True
    t = mean / (sd / math.sqrt(n))
    p = student_t_sf_two_sided(t, n - 1)
    return t, p, p < alpha


def spearman_rho(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Spearman correlation of two rankings given as permutations of 1..n."""
    n = len(rank_a)
    if len(rank_b) != n:
        raise LengthMismatch(f"rankings differ in length: {n} vs {len(rank_b)}")
    if n < 2:
        raise NotAPermutation("rankings need at least two items")
    expected = set(range(1, n + 1))
    if set(rank_a) != expected or set(rank_b) != expected:
        raise NotAPermutation(f"rankings must each be a permutation of 1..{n}")
    d2 = sum((x - y) ** 2 for x, y in zip(rank_a, rank_b))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


# --- report emission ------------------------------------------------------------


def curve_to_record(instance_id: str, curve: EvalCurve, normalize: bool = False) -> dict:
    scale = 1.0 / AUC_RANGE_WIDTH if normalize else 1.0
    return {
        "instance_id": instance_id,
        "thresholds": list(curve.thresholds),
        "precision": list(curve.precision),
        "recall": list(curve.recall),
        "f1": list(curve.f1),
        "recall_auc": curve.auc_recall * scale,
        "precision_auc": curve.auc_precision * scale,
        "f1_auc": curve.auc_f1 * scale,
    }


def write_eval_report(
    path: str | Path,
    results: Sequence[tuple[str, EvalCurve]],
    normalize: bool = False,
) -> dict:
    """Emit the JSON evaluation report (per-instance curves + corpus means)
    and return the report dict."""
    mean_recall, mean_precision, mean_f1 = aggregate_corpus([c for _, c in results])
    scale = 1.0 / AUC_RANGE_WIDTH if normalize else 1.0
    report = {
        "normalized": normalize,
        "instances": [curve_to_record(iid, c, normalize) for iid, c in results],
        "corpus": {
            "count": len(results),
            "mean_recall_auc": mean_recall * scale,
            "mean_precision_auc": mean_precision * scale,
            "mean_f1_auc": mean_f1 * scale,
        },
    }
    Path(path).write_text(
        json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return report


def write_eval_csv(
    path: str | Path,
    results: Sequence[tuple[str, EvalCurve]],
    normalize: bool = False,
) -> None:
    scale = 1.0 / AUC_RANGE_WIDTH if normalize else 1.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_id", "recall_auc", "precision_auc", "f1_auc"])
        for iid, curve in results:
            writer.writerow(
                [
                    iid,
                    repr(curve.auc_recall * scale),
                    repr(curve.auc_precision * scale),
                    repr(curve.auc_f1 * scale),
                ]
            )


def write_significance_report(
    path: str | Path,
    method_a: str,
    method_b: str,
    metric: str,
    a_values: Sequence[float],
    b_values: Sequence[float],
    alpha: float = 0.05,
) -> dict:
    t, p, significant = paired_ttest(a_values, b_values, alpha=alpha)
    report = {
        "method_a": method_a,
        "method_b": method_b,
        "metric": metric,
        "n": len(a_values),
        "t": t,
        "p": p,
        "significant": significant,
        "alpha": alpha,
    }
    Path(path).write_text(
        json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return report
