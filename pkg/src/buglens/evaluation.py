"""Metrics and reports over annotation records.

Pure functions on in-memory lists: per-category macro-F1, Cohen's kappa
and its agreement curve over growing prefixes, human-match rates, label
confusion matrices, and count/percentage distribution tables. Root-cause
scores use the nine top-level classes; subclass agreement is reported
separately as a conditional accuracy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Sequence

from .corpus import PostRecord
from .taxonomy import CATEGORIES, AnnotationRecord

# Categories with closed label sets, eligible for kappa and confusion.
LABEL_CATEGORIES = ("bug_type", "root_cause", "effect", "component")
# Everything a human-match check compares.
MATCH_CATEGORIES = LABEL_CATEGORIES + ("language", "framework")

DEFAULT_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class AlignmentError(ValueError):
    def __init__(self, message: str, orphans: tuple[str, ...] = ()):
        super().__init__(message)
        self.orphans = orphans


class MatchCondition(str, Enum):
    WITH_REPLIES = "with_replies"
    WITHOUT_REPLIES = "without_replies"


def label_text(record: AnnotationRecord, category: str) -> str:
    """The comparison string for one category of one record."""
    if category == "bug_type":
        return record.bug_type.abbrev
    if category == "root_cause":
        return record.root_cause.abbrev
    if category == "root_cause_subclass":
        return record.root_cause_subclass.abbrev if record.root_cause_subclass else ""
    if category == "effect":
        return record.effect.abbrev
    if category == "component":
        return record.component.abbrev
    if category == "language":
        return record.language
    if category == "framework":
        return record.framework
    raise ValueError(f"no such category: {category!r}")


@dataclass(frozen=True)
class LabeledPair:
    gold: AnnotationRecord
    pred: AnnotationRecord

    def __post_init__(self):
        if self.gold.key() != self.pred.key():
            raise ValueError(
                f"pair mismatch: gold {self.gold.key()} vs pred {self.pred.key()}"
            )


def align_pairs(gold: list[AnnotationRecord], pred: list[AnnotationRecord]) -> list[LabeledPair]:
    """Join two annotation lists on (post_id, bug_index), keeping gold's
    order. Orphans on either side abort with the offending ids listed."""
    def index(records: list[AnnotationRecord], side: str) -> dict:
        table: dict = {}
        for record in records:
            if record.key() in table:
                raise AlignmentError(f"duplicate {side} key {record.key()}")
            table[record.key()] = record
        return table

    gold_by_key = index(gold, "gold")
    pred_by_key = index(pred, "pred")
    orphans = sorted(
        f"gold:{k[0]}#{k[1]}" for k in gold_by_key.keys() - pred_by_key.keys()
    ) + sorted(f"pred:{k[0]}#{k[1]}" for k in pred_by_key.keys() - gold_by_key.keys())
    if orphans:
        raise AlignmentError(
            "unmatched annotations: " + ", ".join(orphans), tuple(orphans)
        )
    return [LabeledPair(g, pred_by_key[g.key()]) for g in gold]


def macro_f1(pairs: Sequence[LabeledPair], category: str) -> float:
    """Unweighted mean of per-class F1 over the classes present in gold or
    prediction. A class with zero precision and recall contributes 0."""
    if not pairs:
        raise EmptyInput("macro_f1 needs at least one pair")
    gold = [label_text(p.gold, category) for p in pairs]
    pred = [label_text(p.pred, category) for p in pairs]
    classes = sorted(set(gold) | set(pred))
    scores = []
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return sum(scores) / len(scores)


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two equally long label lists.
    When chance agreement is already total (both raters constant and
    identical), agreement is perfect: 1.0."""
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} labels")
    if not a:
        raise EmptyInput("cohen_kappa needs at least one item")
    n = len(a)
    observed = sum(1 for x, y in zip(a, b) if x == y) / n
    expected = 0.0
    for cls in set(a) | set(b):
        count_a = sum(1 for x in a if x == cls)
        count_b = sum(1 for y in b if y == cls)
        expected += (count_a / n) * (count_b / n)
    if expected == 1.0:
        return 1.0
    return (observed - expected) / (1.0 - expected)


@dataclass(frozen=True)
class KappaPoint:
    fraction: float
    items: int
    kappas: dict[str, float]


def kappa_curve(
    gold_a: list[AnnotationRecord],
    gold_b: list[AnnotationRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> tuple[KappaPoint, ...]:
    """Per-category kappa over the first ceil(f*N) items, in dataset order,
    for each requested fraction."""
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction out of range: {f}")
    pairs = align_pairs(gold_a, gold_b)
    if not pairs:
        raise EmptyInput("kappa_curve needs at least one aligned item")
    n = len(pairs)
    points = []
    for f in fractions:
        take = math.ceil(f * n)
        prefix = pairs[:take]
        kappas = {
            category: cohen_kappa(
                [label_text(p.gold, category) for p in prefix],
                [label_text(p.pred, category) for p in prefix],
            )
            for category in LABEL_CATEGORIES
        }
        points.append(KappaPoint(f, take, kappas))
    return tuple(points)


def match_rate(
    pairs: Sequence[LabeledPair],
    categories: Sequence[str] = MATCH_CATEGORIES,
    condition: MatchCondition = MatchCondition.WITH_REPLIES,
) -> dict[str, float]:
    """Per-category agreement fractions plus "overall", the fraction of
    pairs agreeing on every requested category at once. Root cause counts
    as matching on its top-level class; subclasses are scored separately
    by subclass_conditional_accuracy."""
    if not pairs:
        raise EmptyInput("match_rate needs at least one pair")
    condition = MatchCondition(condition)
    rates: dict[str, float] = {}
    for category in categories:
        hits = sum(
            1 for p in pairs if label_text(p.gold, category) == label_text(p.pred, category)
        )
        rates[category] = hits / len(pairs)
    full = sum(
        1
        for p in pairs
        if all(label_text(p.gold, c) == label_text(p.pred, c) for c in categories)
    )
    rates["overall"] = full / len(pairs)
    return rates


def subclass_conditional_accuracy(pairs: Sequence[LabeledPair]) -> float | None:
    """Among pairs where gold carries a subclass and the predicted top-level
    root cause is right, the fraction with the right subclass. None when no
    pair qualifies."""
    eligible = [
        p
        for p in pairs
        if p.gold.root_cause_subclass is not None
        and p.gold.root_cause is p.pred.root_cause
    ]
    if not eligible:
        return None
    hits = sum(
        1 for p in eligible if p.gold.root_cause_subclass is p.pred.root_cause_subclass
    )
    return hits / len(eligible)


@dataclass(frozen=True)
class ConfusionMatrix:
    category: str
    labels: tuple[str, ...]  # row/column order
    cells: dict[tuple[str, str], int]  # (gold, pred) -> count

    def count(self, gold: str, pred: str) -> int:
        return self.cells.get((gold, pred), 0)

    def row_sum(self, gold: str) -> int:
        return sum(v for (g, _), v in self.cells.items() if g == gold)

    def total(self) -> int:
        return sum(self.cells.values())


def confusion_matrix(pairs: Sequence[LabeledPair], category: str) -> ConfusionMatrix:
    """Gold rows, prediction columns, full taxonomy in declaration order."""
    if category not in LABEL_CATEGORIES:
        raise ValueError(f"confusion matrix needs a label category, got {category!r}")
    labels = tuple(m.abbrev for m in CATEGORIES[category])
    cells: dict[tuple[str, str], int] = {}
    for pair in pairs:
        key = (label_text(pair.gold, category), label_text(pair.pred, category))
        cells[key] = cells.get(key, 0) + 1
    return ConfusionMatrix(category, labels, cells)


@dataclass(frozen=True)
class DistributionRow:
    group: str
    cross_value: str | None
    count: int
    pct: float


@dataclass(frozen=True)
class DistributionTable:
    group_by: str
    cross: str | None
    rows: tuple[DistributionRow, ...]


_GROUP_AXES = ("bug_type", "root_cause", "effect", "component", "language", "framework", "year")


def _group_value(
    record: AnnotationRecord, axis: str, posts_by_id: dict[str, PostRecord] | None
) -> str:
    if axis == "year":
        if posts_by_id is None or record.post_id not in posts_by_id:
            raise ValueError(f"year grouping needs the post for {record.post_id}")
        return str(posts_by_id[record.post_id].created_at.year)
    return label_text(record, axis)


def distribution_report(
    annotations: Sequence[AnnotationRecord],
    group_by: str,
    cross: str | None = None,
    posts: Sequence[PostRecord] | None = None,
) -> DistributionTable:
    """Counts and percentages per group, optionally split by a second axis.

    Single-axis percentages are of the grand total; crossed percentages are
    within each primary group, so they sum to 100 per group. The year axis
    needs the posts for their dates.
    """
    for axis in (group_by, cross) if cross else (group_by,):
        if axis not in _GROUP_AXES:
            raise ValueError(f"cannot group by {axis!r}")
    if not annotations:
        return DistributionTable(group_by, cross, ())
    posts_by_id = {p.post_id: p for p in posts} if posts is not None else None

    if cross is None:
        counts: dict[str, int] = {}
        for record in annotations:
            key = _group_value(record, group_by, posts_by_id)
            counts[key] = counts.get(key, 0) + 1
        total = len(annotations)
        rows = tuple(
            DistributionRow(group, None, count, 100.0 * count / total)
            for group, count in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        )
        return DistributionTable(group_by, None, rows)

    cell_counts: dict[tuple[str, str], int] = {}
    group_totals: dict[str, int] = {}
    for record in annotations:
        group = _group_value(record, group_by, posts_by_id)
        sub = _group_value(record, cross, posts_by_id)
        cell_counts[(group, sub)] = cell_counts.get((group, sub), 0) + 1
        group_totals[group] = group_totals.get(group, 0) + 1
    group_order = sorted(group_totals, key=lambda g: (-group_totals[g], g))
    rows = []
    for group in group_order:
        in_group = sorted(
            ((sub, c) for (g, sub), c in cell_counts.items() if g == group),
            key=lambda kv: (-kv[1], kv[0]),
        )
        for sub, count in in_group:
            rows.append(
                DistributionRow(group, sub, count, 100.0 * count / group_totals[group])
            )
    return DistributionTable(group_by, cross, tuple(rows))


@dataclass(frozen=True)
class EvalReport:
    """Everything one evaluation run produced, ready for CSV or console."""

    macro_f1: dict[str, float]
    accuracy: dict[str, float]
    match_rate: float
    confusion: dict[str, ConfusionMatrix]
    subclass_accuracy: float | None = None
    kappa_points: tuple[KappaPoint, ...] = ()
    cost_usd_mean: float = 0.0
    time_s_mean: float = 0.0


def build_eval_report(
    pairs: Sequence[LabeledPair],
    kappa_points: tuple[KappaPoint, ...] = (),
    cost_usd_mean: float = 0.0,
    time_s_mean: float = 0.0,
) -> EvalReport:
    if not pairs:
        raise EmptyInput("build_eval_report needs at least one pair")
    f1 = {category: macro_f1(pairs, category) for category in LABEL_CATEGORIES}
    rates = match_rate(pairs)
    confusion = {category: confusion_matrix(pairs, category) for category in LABEL_CATEGORIES}
    for category, value in {**f1, **rates}.items():
        if not 0.0 <= value <= 1.0:
            raise AssertionError(f"{category} metric out of range: {value}")
    gold_counts: dict[str, dict[str, int]] = {}
    for pair in pairs:
        for category in LABEL_CATEGORIES:
            by_label = gold_counts.setdefault(category, {})
            label = label_text(pair.gold, category)
            by_label[label] = by_label.get(label, 0) + 1
    for category, matrix in confusion.items():
        for label in matrix.labels:
            if matrix.row_sum(label) != gold_counts[category].get(label, 0):
                raise AssertionError(f"confusion row {category}/{label} != gold count")
    return EvalReport(
        macro_f1=f1,
        accuracy={c: rates[c] for c in MATCH_CATEGORIES},
        match_rate=rates["overall"],
        confusion=confusion,
        subclass_accuracy=subclass_conditional_accuracy(pairs),
        kappa_points=kappa_points,
        cost_usd_mean=cost_usd_mean,
        time_s_mean=time_s_mean,
    )


# --- text renderings ---


def _csv(rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    return buffer.getvalue()


def f1_csv(report: EvalReport) -> str:
    rows = [("category", "macro_f1", "accuracy")]
    for category in LABEL_CATEGORIES:
        rows.append(
            (category, f"{report.macro_f1[category]:.6f}", f"{report.accuracy[category]:.6f}")
        )
    return _csv(rows)


def match_csv(rates: dict[str, float], condition: MatchCondition) -> str:
    rows = [("condition", "category", "rate")]
    for category, rate in rates.items():
        rows.append((condition.value, category, f"{rate:.6f}"))
    return _csv(rows)


def confusion_csv(matrix: ConfusionMatrix) -> str:
    rows = [("gold\\pred", *matrix.labels)]
    for gold in matrix.labels:
        rows.append((gold, *(str(matrix.count(gold, pred)) for pred in matrix.labels)))
    return _csv(rows)


def kappa_curve_csv(points: tuple[KappaPoint, ...]) -> str:
    header = "# prefix order: dataset order (gold file order)\n"
    rows = [("fraction", "items", *LABEL_CATEGORIES)]
    for point in points:
        rows.append(
            (
                f"{point.fraction:g}",
                str(point.items),
                *(f"{point.kappas[c]:.6f}" for c in LABEL_CATEGORIES),
            )
        )
    return header + _csv(rows)


def distribution_csv(table: DistributionTable) -> str:
    if table.cross is None:
        rows = [("group", "count", "pct")]
        for row in table.rows:
            rows.append((row.group, str(row.count), f"{row.pct:.2f}"))
    else:
        rows = [("group", "cross", "count", "pct")]
        for row in table.rows:
            rows.append((row.group, row.cross_value, str(row.count), f"{row.pct:.2f}"))
    return _csv(rows)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Fixed-width console table."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(str(cell)))
    def line(cells: Sequence) -> str:
        return "  ".join(str(c).ljust(widths[i]) for i, c in enumerate(cells)).rstrip()
    out = [line(headers), line("-" * w for w in widths)]
    out += [line(row) for row in rows]
    return "\n".join(out)
