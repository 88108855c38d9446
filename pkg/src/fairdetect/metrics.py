"""Fairness metrics over binary prediction records, with enumeration oracles.

All four fairness metrics follow the convention that cells with no
supporting samples are excluded from their max/min/sum rather than counted
as zero, since a missing cell carries no disparity evidence. Every report
records that convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXCLUSION_NOTE = (
    "subgroups without negatives are excluded from the false-positive-rate sum; "
    "empty (subgroup, class) cells are excluded from equalized-odds extrema"
)


class MetricsError(ValueError):
    """Raised for record sets that make a metric undefined."""


@dataclass(frozen=True)
class PredictionRecord:
    """One scored test sample: probability, binarized call, truth, subgroup."""

    score: float
    y_hat: int
    y: int
    d: str


def make_records(scores, labels, subgroups, threshold: float = 0.5) -> list[PredictionRecord]:
    """Binarize scores at `threshold` (>= means positive) into records."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not (scores.shape == labels.shape and len(scores) == len(subgroups)):
        raise MetricsError(
            f"make_records: got {scores.shape} scores, {labels.shape} labels, "
            f"{len(subgroups)} subgroups"
        )
    return [
        PredictionRecord(float(s), int(s >= threshold), int(y), str(d))
        for s, y, d in zip(scores, labels, subgroups)
    ]


def _group_order(records) -> list[str]:
    order: list[str] = []
    for r in records:
        if r.d not in order:
            order.append(r.d)
    return order


def f_fpr(records) -> float:
    """Summed absolute deviation of subgroup FPR from the overall FPR."""
    if not records:
        raise MetricsError("f_fpr: empty record set")
    negatives = [r for r in records if r.y == 0]
    if not negatives:
        raise MetricsError("f_fpr: no negative samples")
    overall = sum(r.y_hat for r in negatives) / len(negatives)
    total = 0.0
    for g in _group_order(records):
        group_neg = [r for r in negatives if r.d == g]
        if group_neg:
            total += abs(sum(r.y_hat for r in group_neg) / len(group_neg) - overall)
    return total


def f_oae(records) -> float:
    """Largest accuracy gap between any two subgroups."""
    if not records:
        raise MetricsError("f_oae: empty record set")
    accs = []
    for g in _group_order(records):
        group = [r for r in records if r.d == g]
        accs.append(sum(int(r.y_hat == r.y) for r in group) / len(group))
    return max(accs) - min(accs)


def f_dp(records) -> float:
    """Largest gap in per-class prediction rates between any two subgroups."""
    if not records:
        raise MetricsError("f_dp: empty record set")
    worst = 0.0
    for k in (0, 1):
        rates = []
        for g in _group_order(records):
            group = [r for r in records if r.d == g]
            rates.append(sum(int(r.y_hat == k) for r in group) / len(group))
        worst = max(worst, max(rates) - min(rates))
    return worst


def f_meo(records) -> float:
    """Largest gap across subgroups in P(prediction = k' | truth = k).

    Subgroups without any truth-k sample are excluded from that (k, k')
    comparison.
    """
    if not records:
        raise MetricsError("f_meo: empty record set")
    worst = 0.0
    groups = _group_order(records)
    for k in (0, 1):
        for k_pred in (0, 1):
            rates = []
            for g in groups:
                cell = [r for r in records if r.d == g and r.y == k]
                if cell:
                    rates.append(sum(int(r.y_hat == k_pred) for r in cell) / len(cell))
            if rates:
                worst = max(worst, max(rates) - min(rates))
    return worst


def auc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Computed from tied ranks in O(n log n); `metric_oracle` enumerates the
    pairs directly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(f"auc: need both classes, got {n_pos} positives, {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1 .. j
        i = j
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metric_oracle(records, metric_id: str) -> float:
    """Literal enumeration of each metric definition, loop by loop.

    Deliberately independent of the fast implementations; used as the test
    reference.
    """
    if metric_id == "auc":
        hits = 0.0
        pos = [r for r in records if r.y == 1]
        neg = [r for r in records if r.y == 0]
        if not pos or not neg:
            raise MetricsError("auc oracle: need both classes")
        for p in pos:
            for q in neg:
                if p.score > q.score:
                    hits += 1.0
                elif p.score == q.score:
                    hits += 0.5
        return hits / (len(pos) * len(neg))

    groups: list[str] = []
    for r in records:
        if r.d not in groups:
            groups.append(r.d)
    if not records:
        raise MetricsError(f"{metric_id} oracle: empty record set")

    if metric_id == "f_fpr":
        fp = sum(1 for r in records if r.y_hat == 1 and r.y == 0)
        n0 = sum(1 for r in records if r.y == 0)
        if n0 == 0:
            raise MetricsError("f_fpr oracle: no negative samples")
        overall = fp / n0
        total = 0.0
        for g in groups:
            g_fp = sum(1 for r in records if r.d == g and r.y_hat == 1 and r.y == 0)
            g_n0 = sum(1 for r in records if r.d == g and r.y == 0)
            if g_n0 > 0:
                total += abs(g_fp / g_n0 - overall)
        return total

    if metric_id == "f_oae":
        accs = []
        for g in groups:
            correct = sum(1 for r in records if r.d == g and r.y_hat == r.y)
            count = sum(1 for r in records if r.d == g)
            accs.append(correct / count)
        return max(accs) - min(accs)

    if metric_id == "f_dp":
        worst = 0.0
        for k in (0, 1):
            rates = []
            for g in groups:
                hits = sum(1 for r in records if r.d == g and r.y_hat == k)
                count = sum(1 for r in records if r.d == g)
                rates.append(hits / count)
            gap = max(rates) - min(rates)
            if gap > worst:
                worst = gap
        return worst

    if metric_id == "f_meo":
        worst = 0.0
        for k in (0, 1):
            for k_pred in (0, 1):
                rates = []
                for g in groups:
                    count = sum(1 for r in records if r.d == g and r.y == k)
                    if count == 0:
                        continue
                    hits = sum(1 for r in records if r.d == g and r.y == k and r.y_hat == k_pred)
                    rates.append(hits / count)
                if rates:
                    gap = max(rates) - min(rates)
                    if gap > worst:
                        worst = gap
        return worst

    raise MetricsError(f"unknown metric id {metric_id!r}")


@dataclass(frozen=True)
class SubgroupRow:
    fpr: float | None
    acc: float
    auc: float | None
    count: int


@dataclass(frozen=True)
class MetricsReport:
    """Percentage-scaled metrics plus a per-subgroup diagnostic table."""

    f_fpr: float
    f_meo: float
    f_dp: float
    f_oae: float
    auc: float
    threshold: float
    n_records: int
    per_subgroup: dict[str, SubgroupRow] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def rows(self, dataset: str, method: str) -> list[tuple[str, str, str, float]]:
        """Machine-readable rows: one (dataset, method, metric, value) each."""
        out = []
        for name in ("f_fpr", "f_meo", "f_dp", "f_oae", "auc"):
            out.append((dataset, method, name, getattr(self, name)))
        return out

    def to_text(self) -> str:
        lines = [
            "# fairness evaluation report (metric values in percent)",
            f"f_fpr = {self.f_fpr:.2f}",
            f"f_meo = {self.f_meo:.2f}",
            f"f_dp = {self.f_dp:.2f}",
            f"f_oae = {self.f_oae:.2f}",
            f"auc = {self.auc:.2f}",
            f"threshold = {self.threshold!r}",
            f"n_records = {self.n_records}",
        ]
        for note in self.notes:
            lines.append(f"note = {note}")
        lines.append("")
        lines.append("subgroup\tfpr\tacc\tauc\tcount")
        for g, row in self.per_subgroup.items():
            fpr = "n/a" if row.fpr is None else f"{row.fpr:.4f}"
            sub_auc = "n/a" if row.auc is None else f"{row.auc:.4f}"
            lines.append(f"{g}\t{fpr}\t{row.acc:.4f}\t{sub_auc}\t{row.count}")
        return "\n".join(lines) + "\n"


def build_report(records, threshold: float, expected_subgroups=()) -> MetricsReport:
    """Compute all metrics (as percentages) and per-subgroup diagnostics."""
    if not records:
        raise MetricsError("build_report: empty record set")
    scores = [r.score for r in records]
    labels = [r.y for r in records]
    per_subgroup: dict[str, SubgroupRow] = {}
    for g in _group_order(records):
        group = [r for r in records if r.d == g]
        g_neg = [r for r in group if r.y == 0]
        fpr = sum(r.y_hat for r in g_neg) / len(g_neg) if g_neg else None
        acc = sum(int(r.y_hat == r.y) for r in group) / len(group)
        try:
            g_auc = auc([r.score for r in group], [r.y for r in group])
        except MetricsError:
            g_auc = None
        per_subgroup[g] = SubgroupRow(fpr=fpr, acc=acc, auc=g_auc, count=len(group))
    notes = [EXCLUSION_NOTE]
    absent = [g for g in expected_subgroups if g not in per_subgroup]
    if absent:
        notes.append(f"subgroup absent from this dataset: {', '.join(absent)}")
    return MetricsReport(
        f_fpr=100.0 * f_fpr(records),
        f_meo=100.0 * f_meo(records),
        f_dp=100.0 * f_dp(records),
        f_oae=100.0 * f_oae(records),
        auc=100.0 * auc(scores, labels),
        threshold=threshold,
        n_records=len(records),
        per_subgroup=per_subgroup,
        notes=tuple(notes),
    )
