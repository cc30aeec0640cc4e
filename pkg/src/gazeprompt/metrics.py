"""Binary classification scoring, statistical baselines and tabular reports."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateDistribution, DuplicatePrediction, EmptyMatrix, UnknownSegment
from .segments import ClassDistribution, class_distribution

METRIC_FIELDS = (
    "accuracy",
    "precision_0",
    "precision_1",
    "recall_0",
    "recall_1",
    "f1_0",
    "f1_1",
    "macro_precision",
    "macro_recall",
    "macro_f1",
)
TABLE_COLUMNS = (("Acc.", "accuracy"), ("Prec.(Mac)", "macro_precision"), ("Rec.(Mac)", "macro_recall"), ("F1(Mac)", "macro_f1"))


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[actual][predicted]`` for classes 0 and 1."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self) -> None:
        c = tuple(tuple(int(v) for v in row) for row in self.counts)
        if len(c) != 2 or any(len(r) != 2 for r in c) or any(v < 0 for r in c for v in r):
            raise ValueError("confusion matrix must be 2x2 with non-negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return sum(sum(r) for r in self.counts)

    @property
    def trace(self) -> int:
        return self.counts[0][0] + self.counts[1][1]

    def to_json(self) -> list:
        return [list(r) for r in self.counts]


def confusion(predictions: Iterable[tuple[str, int]], labels: Mapping[str, int]) -> ConfusionMatrix:
    cells = [[0, 0], [0, 0]]
    seen = set()
    for seg_id, pred in predictions:
        if seg_id in seen:
            raise DuplicatePrediction(seg_id)
        seen.add(seg_id)
        if seg_id not in labels:
            raise UnknownSegment(seg_id)
        if pred not in (0, 1):
            raise ValueError(f"prediction for {seg_id!r} is not a class id: {pred!r}")
        cells[labels[seg_id]][pred] += 1
    return ConfusionMatrix((tuple(cells[0]), tuple(cells[1])))


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: tuple[float, float]
    recall: tuple[float, float]
    f1: tuple[float, float]

    @property
    def macro_precision(self) -> float:
        return (self.precision[0] + self.precision[1]) / 2

    @property
    def macro_recall(self) -> float:
        return (self.recall[0] + self.recall[1]) / 2

    @property
    def macro_f1(self) -> float:
        return (self.f1[0] + self.f1[1]) / 2

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision_0": self.precision[0],
            "precision_1": self.precision[1],
            "recall_0": self.recall[0],
            "recall_1": self.recall[1],
            "f1_0": self.f1[0],
            "f1_1": self.f1[1],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "MetricSet":
        return cls(
            accuracy=d["accuracy"],
            precision=(d["precision_0"], d["precision_1"]),
            recall=(d["recall_0"], d["recall_1"]),
            f1=(d["f1_0"], d["f1_1"]),
        )


def _ratio(num: float, den: float, zero_division: float) -> float:
    return num / den if den else zero_division


def metrics(matrix: ConfusionMatrix, zero_division: str = "zero") -> MetricSet:
    """Accuracy and per-class precision/recall/F1.

    A 0/0 precision or recall resolves to 0 under the default policy
    (``"one"`` resolves to 1). Macro values are unweighted means of the
    per-class values; macro F1 is never recomputed from macro P and R.
    """
    if zero_division not in ("zero", "one"):
        raise ValueError(f"unknown zero_division policy {zero_division!r}")
    zd = 0.0 if zero_division == "zero" else 1.0
    total = matrix.total
    if total == 0:
        raise EmptyMatrix("cannot score an empty confusion matrix")
    c = matrix.counts
    prec, rec, f1 = [], [], []
    for k in (0, 1):
        tp = c[k][k]
        predicted = c[0][k] + c[1][k]
        actual = c[k][0] + c[k][1]
        p = _ratio(tp, predicted, zd)
        r = _ratio(tp, actual, zd)
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return MetricSet(matrix.trace / total, (prec[0], prec[1]), (rec[0], rec[1]), (f1[0], f1[1]))


class BaselineKind(str, enum.Enum):
    MAJORITY = "majority"
    UNIFORM = "uniform"
    PROPORTIONAL = "proportional"

    @property
    def title(self) -> str:
        return {
            BaselineKind.MAJORITY: "Majority Class",
            BaselineKind.UNIFORM: "Uniform Random (P=0.5)",
            BaselineKind.PROPORTIONAL: "Proportional Random (P=Freq)",
        }[self]


def expected_baseline_metrics(dist: ClassDistribution, baseline: BaselineKind) -> MetricSet:
    """Closed-form metrics of a label-blind baseline on ``dist``.

    Random baselines use ratio-of-expectations forms; these are the exact
    expectations of accuracy, precision and recall, while simulated F1
    carries an O(1/N) bias.
    """
    baseline = BaselineKind(baseline)
    p = (dist.p0, dist.p1)
    if baseline is BaselineKind.MAJORITY:
        m = dist.majority_class
        prec = [0.0, 0.0]
        rec = [0.0, 0.0]
        f1 = [0.0, 0.0]
        prec[m], rec[m], f1[m] = p[m], 1.0, 2 * p[m] / (1 + p[m])
        return MetricSet(p[m], (prec[0], prec[1]), (rec[0], rec[1]), (f1[0], f1[1]))
    if dist.n0 == 0 or dist.n1 == 0:
        raise DegenerateDistribution("random baselines need both classes present")
    if baseline is BaselineKind.UNIFORM:
        f1 = tuple(pc / (pc + 0.5) for pc in p)
        return MetricSet(0.5, p, (0.5, 0.5), f1)
    return MetricSet(p[0] ** 2 + p[1] ** 2, p, p, p)


# --- simulation ---------------------------------------------------------------------

SIM_BLOCK = 250


def _metric_columns(y: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """Vectorised ``metrics`` for a (trials, N) prediction block; returns (trials, 10)."""
    n = y.shape[0]
    y1 = y.astype(bool)
    p1 = preds.astype(bool)
    tp1 = np.count_nonzero(p1 & y1, axis=1).astype(np.float64)
    tp0 = np.count_nonzero(~p1 & ~y1, axis=1).astype(np.float64)
    pp1 = np.count_nonzero(p1, axis=1).astype(np.float64)
    pp0 = n - pp1
    ap1 = float(np.count_nonzero(y1))
    ap0 = n - ap1

    def ratio(num, den):
        out = np.zeros_like(num)
        np.divide(num, den, out=out, where=den > 0)
        return out

    prec0, prec1 = ratio(tp0, pp0), ratio(tp1, pp1)
    rec0 = tp0 / ap0 if ap0 else np.zeros_like(tp0)
    rec1 = tp1 / ap1 if ap1 else np.zeros_like(tp1)
    f10 = ratio(2 * prec0 * rec0, prec0 + rec0)
    f11 = ratio(2 * prec1 * rec1, prec1 + rec1)
    acc = (tp0 + tp1) / n
    return np.column_stack(
        [acc, prec0, prec1, rec0, rec1, f10, f11, (prec0 + prec1) / 2, (rec0 + rec1) / 2, (f10 + f11) / 2]
    )


@dataclass(frozen=True)
class SimulationResult:
    kind: BaselineKind
    mean: MetricSet
    std: MetricSet
    trials: int
    seed: int

    def stderr(self, name: str) -> float:
        return self.std.as_dict()[name] / math.sqrt(self.trials)


def _from_row(row: Sequence[float]) -> MetricSet:
    return MetricSet(float(row[0]), (float(row[1]), float(row[2])), (float(row[3]), float(row[4])), (float(row[5]), float(row[6])))


def simulate_baseline(
    labels: Sequence[int],
    baseline: BaselineKind,
    seed: int,
    trials: int,
    workers: int = 1,
) -> SimulationResult:
    """Monte Carlo estimate of a baseline's metrics (mean and std over trials).

    Trials are generated in fixed-size blocks with sub-seeds spawned from
    ``seed``, so results are bit-identical for any ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    baseline = BaselineKind(baseline)
    y = np.asarray(labels, dtype=np.int8)
    dist = class_distribution(y.tolist())

    if baseline is BaselineKind.MAJORITY:
        m = dist.majority_class
        row = metrics(ConfusionMatrix(((0, dist.n0), (0, dist.n1)) if m == 1 else ((dist.n0, 0), (dist.n1, 0))))
        zero = MetricSet(0.0, (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
        return SimulationResult(baseline, row, zero, trials, seed)

    q1 = 0.5 if baseline is BaselineKind.UNIFORM else dist.p1
    n_blocks = -(-trials // SIM_BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)

    def block(b: int) -> np.ndarray:
        size = min(SIM_BLOCK, trials - b * SIM_BLOCK)
        rng = np.random.default_rng(children[b])
        preds = rng.random((size, y.shape[0])) < q1
        return _metric_columns(y, preds)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block, range(n_blocks)))
    else:
        parts = [block(b) for b in range(n_blocks)]
    table = np.concatenate(parts, axis=0)
    mean = table.mean(axis=0)
    std = table.std(axis=0, ddof=1) if trials > 1 else np.zeros(table.shape[1])
    return SimulationResult(baseline, _from_row(mean), _from_row(std), trials, seed)


# --- reports --------------------------------------------------------------------------


@dataclass
class MethodRow:
    name: str
    metrics: MetricSet
    metadata: dict = field(default_factory=dict)
    matrix: Optional[ConfusionMatrix] = None
    std: Optional[MetricSet] = None
    abstention_rate: Optional[float] = None

    def to_json(self) -> dict:
        d = {"name": self.name, "metrics": self.metrics.as_dict(), "metadata": self.metadata}
        d["confusion"] = self.matrix.to_json() if self.matrix is not None else None
        d["std"] = self.std.as_dict() if self.std is not None else None
        d["abstention_rate"] = self.abstention_rate
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "MethodRow":
        return cls(
            name=d["name"],
            metrics=MetricSet.from_dict(d["metrics"]),
            metadata=dict(d.get("metadata") or {}),
            matrix=ConfusionMatrix(tuple(tuple(r) for r in d["confusion"])) if d.get("confusion") else None,
            std=MetricSet.from_dict(d["std"]) if d.get("std") else None,
            abstention_rate=d.get("abstention_rate"),
        )


def baseline_rows(
    dist: ClassDistribution,
    labels: Optional[Sequence[int]] = None,
    trials: int = 0,
    seed: int = 0,
    workers: int = 1,
) -> list[MethodRow]:
    """Table-ordered baseline rows; simulated rows are added when ``trials > 0``."""
    rows = []
    for kind in (BaselineKind.MAJORITY, BaselineKind.PROPORTIONAL, BaselineKind.UNIFORM):
        rows.append(MethodRow(kind.title, expected_baseline_metrics(dist, kind), {"baseline": kind.value, "form": "analytic"}))
        if trials > 0 and labels is not None and kind is not BaselineKind.MAJORITY:
            sim = simulate_baseline(labels, kind, seed, trials, workers)
            rows.append(
                MethodRow(
                    f"{kind.title} [sim]",
                    sim.mean,
                    {"baseline": kind.value, "form": "simulated", "trials": trials, "seed": seed},
                    std=sim.std,
                )
            )
    return rows


@dataclass
class Report:
    rows: list[MethodRow]
    distribution: ClassDistribution
    config_hash: str = ""

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "class_distribution": self.distribution.to_json(),
            "methods": [r.to_json() for r in self.rows],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Report":
        d = json.loads(text)
        dist = ClassDistribution(d["class_distribution"]["n0"], d["class_distribution"]["n1"])
        return cls([MethodRow.from_json(r) for r in d["methods"]], dist, d.get("config_hash", ""))

    def table(self) -> str:
        width = max(len("Method"), *(len(r.name) for r in self.rows))
        head = f"{'Method':<{width}}" + "".join(f"  {title:>10}" for title, _ in TABLE_COLUMNS)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            vals = r.metrics.as_dict()
            lines.append(f"{r.name:<{width}}" + "".join(f"  {vals[key]:>10.3f}" for _, key in TABLE_COLUMNS))
        d = self.distribution
        lines.append("")
        lines.append(f"N = {d.total} (class 0: {d.n0} = {d.p0:.1%}, class 1: {d.n1} = {d.p1:.1%})")
        abst = [r for r in self.rows if r.abstention_rate is not None]
        for r in abst:
            lines.append(f"abstention rate {r.name}: {r.abstention_rate:.3f}")
        return "\n".join(lines) + "\n"


def report(rows: Sequence[MethodRow], dist: ClassDistribution, config_hash: str = "") -> Report:
    if not rows:
        raise ValueError("report needs at least one method row")
    return Report(list(rows), dist, config_hash)


def write_report(rep: Report, out_dir: Union[str, Path], figure: bool = True) -> dict[str, Path]:
    """Write ``report.json``, ``report.txt`` and (optionally) ``report.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "table": out / "report.txt"}
    paths["json"].write_text(rep.dumps(), encoding="utf-8")
    paths["table"].write_text(rep.table(), encoding="utf-8")
    if figure:
        from .plotting import plot_report

        paths["figure"] = plot_report(rep, out / "report.png")
    return paths
