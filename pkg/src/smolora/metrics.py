"""Forgetting metrics over stage-wise accuracy tables and per-sample records.

The accuracy table is lower-triangular: entry (k, j) with j <= k is the score
on task j after training stage k. Average performance (AP) averages the last
row seen so far, MAP averages the APs of all stages, backward transfer (BWT)
averages each task's drop between its own stage and the final stage, and mean
instruction following (MIF) averages per-task format-correctness rates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ContractError, FormatError, MetricUndefinedError


class AccuracyMatrix:
    """Lower-triangular stage x task score table; row k holds k entries."""

    def __init__(self, rows: Sequence[Sequence[float]] | None = None):
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, row: Sequence[float]) -> None:
        row = [float(x) for x in row]
        if len(row) != len(self.rows) + 1:
            raise ContractError(
                f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries, got {len(row)}"
            )
        if any(not math.isfinite(x) for x in row):
            raise ContractError("scores must be finite")
        if any(x < 0 for x in row):
            raise ContractError("scores must be non-negative")
        self.rows.append(row)

    @property
    def stages(self) -> int:
        return len(self.rows)

    def score(self, k: int, j: int) -> float:
        """a[k][j], 1-based stage k and task j <= k."""
        return self.rows[k - 1][j - 1]

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and self.rows == other.rows


def _check_stage(a: AccuracyMatrix, k: int) -> None:
    if not 1 <= k <= a.stages:
        raise ContractError(f"stage {k} out of range for {a.stages} recorded stages")


def ap(a: AccuracyMatrix, k: int) -> float:
    """Average performance after stage k: mean of row k."""
    _check_stage(a, k)
    row = a.rows[k - 1]
    return sum(row) / k


def mean_ap(a: AccuracyMatrix, k: int) -> float:
    """Mean average performance: mean of AP over stages 1..k."""
    _check_stage(a, k)
    return sum(ap(a, i) for i in range(1, k + 1)) / k


def bwt(a: AccuracyMatrix, k: int) -> float:
    """Backward transfer: mean of a[k][j] - a[j][j] over j < k. Negative = forgetting."""
    _check_stage(a, k)
    if k < 2:
        raise MetricUndefinedError("BWT is undefined for a single stage")
    return sum(a.score(k, j) - a.score(j, j) for j in range(1, k)) / (k - 1)


def mif(
    records: Iterable[Mapping],
    stage: int | None = None,
    expected_tasks: Iterable[int] | None = None,
) -> float:
    """Mean instruction following (%) from per-sample records.

    Uses records of one stage (the latest by default): for each task, the
    fraction of samples whose format matched, averaged over tasks, x100.
    Per-task sample counts may differ; each task weighs equally.
    """
    records = list(records)
    if not records:
        raise ContractError("mif requires at least one record")
    if stage is None:
        stage = max(r["stage"] for r in records)
    per_task: dict[int, list[int]] = {}
    for r in records:
        if r["stage"] == stage:
            per_task.setdefault(r["task_id"], []).append(int(r["format_correct"]))
    if not per_task:
        raise ContractError(f"no records for stage {stage}")
    if expected_tasks is not None:
        missing = sorted(set(expected_tasks) - set(per_task))
        if missing:
            raise ContractError(f"tasks with zero records at stage {stage}: {missing}")
    rates = [sum(v) / len(v) for _, v in sorted(per_task.items())]
    return 100.0 * sum(rates) / len(rates)


@dataclass
class MetricReport:
    """Headline metrics of one run; bwt/mif are None when undefined/unavailable."""

    ap: float
    map: float
    bwt: float | None
    mif: float | None
    per_stage_ap: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "map": self.map,
            "bwt": self.bwt,
            "mif": self.mif,
            "per_stage_ap": self.per_stage_ap,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(
            ap=d["ap"],
            map=d["map"],
            bwt=d.get("bwt"),
            mif=d.get("mif"),
            per_stage_ap=list(d.get("per_stage_ap", [])),
        )


def compute_report(a: AccuracyMatrix, records: Iterable[Mapping] | None = None) -> MetricReport:
    """Full MetricReport for the final stage of an accuracy table."""
    k = a.stages
    if k < 1:
        raise ContractError("accuracy matrix is empty")
    return MetricReport(
        ap=ap(a, k),
        map=mean_ap(a, k),
        bwt=bwt(a, k) if k >= 2 else None,
        mif=mif(records) if records else None,
        per_stage_ap=[ap(a, i) for i in range(1, k + 1)],
    )


def round_display(x: float, places: int = 2) -> float:
    """Round half away from zero, the convention used for printed tables."""
    scale = 10**places
    return math.copysign(math.floor(abs(x) * scale + 0.5) / scale, x)


# -- file formats ---------------------------------------------------------------


def write_accuracy_csv(path, a: AccuracyMatrix, task_count: int | None = None) -> None:
    """Header stage,task_1..task_T; row k lists scores for tasks 1..k, then blanks."""
    t = task_count if task_count is not None else a.stages
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage"] + [f"task_{j}" for j in range(1, t + 1)])
        for k, row in enumerate(a.rows, start=1):
            w.writerow([k] + [repr(x) for x in row] + [""] * (t - len(row)))


def read_accuracy_csv(path) -> AccuracyMatrix:
    a = AccuracyMatrix()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "stage":
            raise FormatError(f"{path}: missing 'stage' header", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            cells = [c for c in row[1:] if c != ""]
            scores = []
            for col, cell in enumerate(cells, start=2):
                try:
                    scores.append(float(cell))
                except ValueError:
                    raise FormatError(
                        f"{path}: non-numeric cell {cell!r} in column {col}", line=lineno
                    ) from None
            try:
                a.add_row(scores)
            except ContractError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None
    if a.stages == 0:
        raise FormatError(f"{path}: no data rows", line=2)
    return a


def write_records_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_records_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: bad record: {exc}", line=lineno) from None
    return out
