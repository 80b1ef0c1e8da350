"""Equal error rates for the three SASV trial groupings and the results table."""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .protocol_io import ScoreSet, TrialClass


class MetricError(ValueError):
    pass


class MetricKind(enum.Enum):
    SV_EER = (frozenset({TrialClass.NONTARGET}),)
    SPF_EER = (frozenset({TrialClass.SPOOF}),)
    SASV_EER = (frozenset({TrialClass.NONTARGET, TrialClass.SPOOF}),)

    @property
    def negative_classes(self) -> frozenset:
        return self.value[0]

    @property
    def positive_class(self) -> TrialClass:
        return TrialClass.TARGET

    @property
    def label(self) -> str:
        return self.name.replace("_", "-")


# column order of the results table
REPORT_KINDS = (MetricKind.SASV_EER, MetricKind.SPF_EER, MetricKind.SV_EER)


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_positive: int
    n_negative: int


def _as_scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise MetricError(f"{name} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise MetricError(f"{name} scores contain non-finite values")
    return arr


def compute_eer(positive_scores, negative_scores) -> EerResult:
    """EER with linear interpolation between adjacent ROC operating points.

    A trial is accepted when ``score >= threshold``. Operating points are taken
    at every distinct score plus ``+inf``; the crossing of FRR and FAR is
    interpolated on the segment where ``FRR - FAR`` first becomes
    non-negative.
    """
    pos = np.sort(_as_scores(positive_scores, "positive"))
    neg = np.sort(_as_scores(negative_scores, "negative"))

    thresholds = np.unique(np.concatenate([pos, neg]))
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    far = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)

    diff = frr - far
    b = int(np.argmax(diff >= 0))  # diff[0] == -1, diff[-1] == 1
    a = b - 1
    lam = -diff[a] / (diff[b] - diff[a])
    eer = far[a] + lam * (far[b] - far[a])
    if b < thresholds.size:
        thr = thresholds[a] + lam * (thresholds[b] - thresholds[a])
    else:
        thr = thresholds[a]
    return EerResult(float(eer), float(thr), int(pos.size), int(neg.size))


def compute_metric(score_set: ScoreSet, kind: MetricKind) -> EerResult:
    pos = score_set.by_class(TrialClass.TARGET)
    if not pos:
        raise MetricError(f"{kind.label}: no {TrialClass.TARGET.value} trials")
    neg: list[float] = []
    for cls in sorted(kind.negative_classes, key=lambda c: c.value):
        scores = score_set.by_class(cls)
        if not scores:
            raise MetricError(f"{kind.label}: no {cls.value} trials")
        neg += scores
    return compute_eer(pos, neg)


def compute_all(score_set: ScoreSet) -> dict[MetricKind, EerResult]:
    return {kind: compute_metric(score_set, kind) for kind in REPORT_KINDS}


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def metric_table(
    systems: Mapping[str, Mapping[str, ScoreSet]],
    partitions: Sequence[str] = ("dev", "eval"),
) -> dict[str, dict[tuple[MetricKind, str], float | None]]:
    """EER fractions per system keyed by (metric, partition); missing partitions map to None."""
    table = {}
    for name, by_part in systems.items():
        row: dict[tuple[MetricKind, str], float | None] = {}
        results = {p: compute_all(by_part[p]) for p in partitions if p in by_part}
        for kind in REPORT_KINDS:
            for p in partitions:
                row[(kind, p)] = results[p][kind].eer if p in results else None
        table[name] = row
    return table


def metric_report(
    systems: Mapping[str, Mapping[str, ScoreSet]] | ScoreSet,
    partitions: Sequence[str] = ("dev", "eval"),
) -> str:
    """Plain-text results table: SASV-EER, SPF-EER, SV-EER, each over dev then eval, in %.

    ``systems`` maps a system name to ``{partition: ScoreSet}``. A bare
    ScoreSet is reported as a single unnamed system under its own partition.
    """
    if isinstance(systems, ScoreSet):
        systems = {"system": {systems.partition: systems}}
    table = metric_table(systems, partitions)
    width = max([len("System")] + [len(n) for n in table])
    group = 7 * len(partitions) - 1

    out = io.StringIO()
    out.write("System".ljust(width))
    for kind in REPORT_KINDS:
        out.write("  " + kind.label.center(group).rstrip().ljust(group))
    out.write("\n")
    out.write(" " * width)
    for _ in REPORT_KINDS:
        out.write("  " + " ".join(p.rjust(6) for p in partitions))
    out.write("\n")
    for name, row in table.items():
        out.write(name.ljust(width))
        for kind in REPORT_KINDS:
            out.write("  " + " ".join(_pct(row[(kind, p)]).rjust(6) for p in partitions))
        out.write("\n")
    return "\n".join(line.rstrip() for line in out.getvalue().split("\n"))


def metric_csv(
    systems: Mapping[str, Mapping[str, ScoreSet]],
    partitions: Sequence[str] = ("dev", "eval"),
) -> str:
    """Delimited form of :func:`metric_report`, one row per system."""
    table = metric_table(systems, partitions)
    cols = [f"{k.name.lower()}_{p}" for k in REPORT_KINDS for p in partitions]
    lines = [",".join(["system"] + cols)]
    for name, row in table.items():
        lines.append(",".join([name] + [_pct(row[(k, p)]) for k in REPORT_KINDS for p in partitions]))
    return "\n".join(lines) + "\n"
