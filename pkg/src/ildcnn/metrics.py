"""Confusion matrices, one-vs-rest class scores, the macro F-score and
fold aggregation, plus report serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[true class, predicted class]``."""

    counts: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.ndim != 2 or self.counts.shape != (k, k):
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(k))
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != k:
            raise DataError(f"{len(self.class_names)} class names for a {k}-class matrix")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def micro_accuracy(self) -> float:
        """Fraction of samples on the diagonal."""
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise DataError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion(true_labels, predicted_labels, num_classes: int, class_names=()) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise DataError(f"label vectors must be 1-D and equal length, got {t.shape} and {p.shape}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, class_names)


@dataclass
class ClassMetrics:
    name: str
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    # names of scores that hit 0/0 and were reported as 0
    degenerate: tuple = field(default_factory=tuple)

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def predicted(self) -> int:
        return self.tp + self.fp


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    """One-vs-rest TP/TN/FP/FN and scores for every class."""
    c = cm.counts
    total = cm.total
    out = []
    for i, name in enumerate(cm.class_names):
        tp = int(c[i, i])
        fn = int(c[i].sum()) - tp
        fp = int(c[:, i].sum()) - tp
        tn = total - tp - fn - fp
        flags: list[str] = []
        acc = _ratio(tp + tn, total, "accuracy", flags)
        prec = _ratio(tp, tp + fp, "precision", flags)
        rec = _ratio(tp, tp + fn, "recall", flags)
        f1 = _ratio(2 * prec * rec, prec + rec, "f1", flags)
        out.append(ClassMetrics(name, tp, tn, fp, fn, acc, prec, rec, f1, tuple(flags)))
    return out


def f_avg(metrics: list[ClassMetrics]) -> float:
    """Unweighted mean of per-class F1."""
    if not metrics:
        raise DataError("no class metrics to average")
    return float(sum(m.f1 for m in metrics) / len(metrics))


def summarize(metrics: list[ClassMetrics], cm: ConfusionMatrix | None = None) -> dict:
    """Column means of the per-class table plus alternative F aggregates.

    ``f_avg`` is the mean of the per-class F1 column; ``f1_of_means`` is the
    harmonic mean of the mean precision and mean recall.
    """
    n = len(metrics)
    mean = lambda attr: float(sum(getattr(m, attr) for m in metrics) / n)  # noqa: E731
    p, r = mean("precision"), mean("recall")
    out = {
        "accuracy": mean("accuracy"),
        "recall": r,
        "precision": p,
        "f_avg": f_avg(metrics),
        "f1_of_means": 2 * p * r / (p + r) if p + r else 0.0,
    }
    if cm is not None:
        out["micro_accuracy"] = cm.micro_accuracy
    return out


@dataclass
class FoldAggregate:
    pooled: ConfusionMatrix
    pooled_metrics: list
    pooled_summary: dict
    fold_metrics: list
    fold_summaries: list
    mean_summary: dict


def aggregate_folds(cms: list[ConfusionMatrix]) -> FoldAggregate:
    """Pool fold matrices by summation and average the per-fold summaries."""
    if not cms:
        raise DataError("aggregate_folds needs at least one confusion matrix")
    pooled = cms[0]
    for cm in cms[1:]:
        pooled = pooled + cm
    fold_metrics = [class_metrics(cm) for cm in cms]
    fold_summaries = [summarize(m, cm) for m, cm in zip(fold_metrics, cms)]
    keys = fold_summaries[0].keys()
    mean_summary = {k: float(np.mean([s[k] for s in fold_summaries])) for k in keys}
    pm = class_metrics(pooled)
    return FoldAggregate(pooled, pm, summarize(pm, pooled), fold_metrics, fold_summaries, mean_summary)


# -- reports ---------------------------------------------------------------


def report_dict(cm: ConfusionMatrix, title: str = "evaluation", class_titles=None) -> dict:
    metrics = class_metrics(cm)
    titles = list(class_titles) if class_titles else list(cm.class_names)
    return {
        "title": title,
        "class_names": list(cm.class_names),
        "class_titles": titles,
        "confusion_matrix": cm.counts.tolist(),
        "classes": [dict(asdict(m), support=m.support, predicted=m.predicted, degenerate=list(m.degenerate))
                    for m in metrics],
        "summary": summarize(metrics, cm),
        "total": cm.total,
    }


def _pct(x: float) -> str:
    return f"{100 * x:6.2f}"


def format_confusion(cm: ConfusionMatrix) -> str:
    names = cm.class_names
    w = max(6, max(len(n) for n in names) + 1, len(str(cm.counts.max())) + 1)
    lines = ["true\\pred".ljust(10) + "".join(n.rjust(w) for n in names)]
    for name, row in zip(names, cm.counts):
        lines.append(name.ljust(10) + "".join(str(v).rjust(w) for v in row))
    return "\n".join(lines)


def format_report(rep: dict) -> str:
    """Human-readable report: confusion matrix, per-class table, summary row."""
    cm = ConfusionMatrix(np.array(rep["confusion_matrix"]), tuple(rep["class_names"]))
    lines = [f"== {rep['title']} ==", "", "Confusion matrix (rows = true class)", format_confusion(cm), ""]
    header = f"{'Class':<14}{'Truth':>7}{'Pred':>7}{'Acc %':>9}{'Recall %':>10}{'Prec %':>9}{'F1 %':>9}"
    lines += [header, "-" * len(header)]
    for title, c in zip(rep["class_titles"], rep["classes"]):
        flag = " *" if c["degenerate"] else ""
        lines.append(
            f"{title:<14}{c['support']:>7}{c['predicted']:>7}{_pct(c['accuracy']):>9}"
            f"{_pct(c['recall']):>10}{_pct(c['precision']):>9}{_pct(c['f1']):>9}{flag}"
        )
    s = rep["summary"]
    lines += [
        "-" * len(header),
        f"{'Total Average':<28}{_pct(s['accuracy']):>9}{_pct(s['recall']):>10}{_pct(s['precision']):>9}"
        f"{_pct(s['f_avg']):>9} (F_avg)",
        "",
        f"micro accuracy {_pct(s['micro_accuracy']).strip()} %   "
        f"F1 of mean P/R {_pct(s['f1_of_means']).strip()} %   samples {rep['total']}",
    ]
    if any(c["degenerate"] for c in rep["classes"]):
        lines.append("* a score hit 0/0 and is reported as 0")
    return "\n".join(lines) + "\n"


def dumps(obj) -> str:
    """Deterministic JSON used for every machine-readable report."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def validate_report(rep: dict, expected_classes=None) -> None:
    """Structural and internal-consistency checks on a :func:`report_dict` document."""
    cm = ConfusionMatrix(np.array(rep["confusion_matrix"]), tuple(rep["class_names"]))
    if expected_classes is not None and tuple(rep["class_names"]) != tuple(expected_classes):
        raise DataError(f"report classes {rep['class_names']} != {list(expected_classes)}")
    fresh = report_dict(cm, rep["title"], rep["class_titles"])
    for got, want in zip(rep["classes"], fresh["classes"]):
        for k in ("tp", "tn", "fp", "fn"):
            if got[k] != want[k]:
                raise DataError(f"class {got['name']}: {k} {got[k]} inconsistent with matrix ({want[k]})")
        if got["tp"] + got["tn"] + got["fp"] + got["fn"] != cm.total:
            raise DataError(f"class {got['name']}: TP+TN+FP+FN != total")
        for k in ("accuracy", "precision", "recall", "f1"):
            if abs(got[k] - want[k]) > 1e-12 or not 0.0 <= got[k] <= 1.0:
                raise DataError(f"class {got['name']}: {k} inconsistent")
    for k, v in fresh["summary"].items():
        if abs(rep["summary"][k] - v) > 1e-12:
            raise DataError(f"summary {k} inconsistent")
