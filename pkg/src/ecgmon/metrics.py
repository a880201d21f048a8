"""Binary classification metrics and report rendering.

Rates are computed from exact integer counts. Rendering rounds half up to
two decimals, the layout used by fixed-width classification tables.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInput


@dataclass(frozen=True)
class ConfusionMatrix2:
    """2x2 counts, rows are true classes and columns predicted classes."""

    counts: tuple[tuple[int, int], tuple[int, int]]
    class_names: tuple[str, str] = ("0", "1")

    def __post_init__(self):
        c = tuple(tuple(int(v) for v in row) for row in self.counts)
        if len(c) != 2 or any(len(r) != 2 for r in c):
            raise InvalidInput("confusion matrix must be 2x2")
        if any(v < 0 for r in c for v in r):
            raise InvalidInput("confusion counts must be non-negative")
        if sum(v for r in c for v in r) == 0:
            raise InvalidInput("confusion matrix is empty")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "class_names", tuple(str(n) for n in self.class_names))

    @property
    def total(self) -> int:
        return sum(v for r in self.counts for v in r)

    def swapped(self) -> "ConfusionMatrix2":
        """Same matrix with the class order reversed."""
        (a, b), (c, d) = self.counts
        return ConfusionMatrix2(((d, c), (b, a)), (self.class_names[1], self.class_names[0]))

    def renamed(self, class_names) -> "ConfusionMatrix2":
        return ConfusionMatrix2(self.counts, tuple(class_names))


def confusion(true_labels, predicted_labels, class_names=("0", "1")) -> ConfusionMatrix2:
    y = np.asarray(true_labels).astype(np.int64).ravel()
    p = np.asarray(predicted_labels).astype(np.int64).ravel()
    if y.shape != p.shape:
        raise InvalidInput("label arrays differ in length")
    if np.any((y != 0) & (y != 1)) or np.any((p != 0) & (p != 1)):
        raise InvalidInput("labels must be 0 or 1")
    counts = [[int(np.sum((y == t) & (p == q))) for q in (0, 1)] for t in (0, 1)]
    return ConfusionMatrix2(tuple(map(tuple, counts)), class_names)


@dataclass
class ClassStats:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    flags: list[str] = field(default_factory=list)


@dataclass
class ClassificationReport:
    classes: list[ClassStats]
    accuracy: float
    macro_avg: dict
    weighted_avg: dict
    total: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        return cls(
            classes=[ClassStats(**c) for c in d["classes"]],
            accuracy=d["accuracy"],
            macro_avg=dict(d["macro_avg"]),
            weighted_avg=dict(d["weighted_avg"]),
            total=int(d["total"]),
        )


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def report(matrix: ConfusionMatrix2) -> ClassificationReport:
    """Per-class precision, recall, F1 and support plus accuracy and averages.

    Zero denominators give 0 and add a flag to the affected class.
    """
    c = matrix.counts
    total = matrix.total
    classes = []
    for k in (0, 1):
        tp = c[k][k]
        col = c[0][k] + c[1][k]
        row = c[k][0] + c[k][1]
        flags = []
        precision, z = _ratio(tp, col)
        if z:
            flags.append("no-predictions")
        recall, z = _ratio(tp, row)
        if z:
            flags.append("no-support")
        if precision + recall == 0.0:
            f1 = 0.0
            if not flags:
                flags.append("zero-f1")
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        classes.append(ClassStats(matrix.class_names[k], precision, recall, f1, row, flags))
    accuracy = (c[0][0] + c[1][1]) / total
    macro = {m: (getattr(classes[0], m) + getattr(classes[1], m)) / 2.0 for m in ("precision", "recall", "f1")}
    weighted = {
        m: (getattr(classes[0], m) * classes[0].support + getattr(classes[1], m) * classes[1].support) / total
        for m in ("precision", "recall", "f1")
    }
    return ClassificationReport(classes, accuracy, macro, weighted, total)


def auc(true_labels, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic with midranks."""
    y = np.asarray(true_labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise InvalidInput("labels and scores differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise InvalidInput("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def round2(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_text(rep: ClassificationReport, title: str | None = None) -> str:
    width = max([len("Weighted Average")] + [len(c.label) for c in rep.classes])
    head = f"{'Label':<{width}}  {'Precision':>9}  {'Recall':>6}  {'F1-Score':>8}  {'Support':>7}"
    rule = "-" * len(head)
    lines = [title] if title else []
    lines += [rule, head, rule]
    for c in rep.classes:
        mark = " *" if c.flags else ""
        lines.append(
            f"{c.label:<{width}}  {round2(c.precision):>9}  {round2(c.recall):>6}  {round2(c.f1):>8}  {c.support:>7}{mark}"
        )
    lines.append(rule)
    lines.append(f"{'Accuracy':<{width}}  {'':>9}  {'':>6}  {round2(rep.accuracy):>8}  {rep.total:>7}")
    for name, avg in (("Macro Average", rep.macro_avg), ("Weighted Average", rep.weighted_avg)):
        lines.append(
            f"{name:<{width}}  {round2(avg['precision']):>9}  {round2(avg['recall']):>6}  {round2(avg['f1']):>8}  {rep.total:>7}"
        )
    lines.append(rule)
    flagged = [f"{c.label}: {', '.join(c.flags)}" for c in rep.classes if c.flags]
    if flagged:
        lines.append("* zero denominators reported as 0 (" + "; ".join(flagged) + ")")
    return "\n".join(lines) + "\n"


def render_confusion(matrix: ConfusionMatrix2) -> str:
    names = matrix.class_names
    w = max(9, *(len(n) for n in names), len("Total"))
    c = matrix.counts
    lines = [f"{'':<{w}}  {names[0]:>{w}}  {names[1]:>{w}}  {'Total':>{w}}"]
    for k in (0, 1):
        lines.append(f"{names[k]:<{w}}  {c[k][0]:>{w}}  {c[k][1]:>{w}}  {c[k][0] + c[k][1]:>{w}}")
    lines.append(
        f"{'Total':<{w}}  {c[0][0] + c[1][0]:>{w}}  {c[0][1] + c[1][1]:>{w}}  {matrix.total:>{w}}"
    )
    return "\n".join(lines) + "\n"


def render(rep: ClassificationReport, fmt: str = "text") -> bytes:
    if fmt == "text":
        return render_text(rep).encode()
    if fmt == "json":
        return (json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n").encode()
    raise InvalidInput(f"unknown report format {fmt!r}")
