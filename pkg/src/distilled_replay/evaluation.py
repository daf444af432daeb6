"""Accuracy matrix and Average Accuracy."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

CSV_COLUMNS = ("run_id", "strategy", "seed", "trained_through_experience", "evaluated_experience", "accuracy")


class AccuracyMatrix:
    """``a[t][i]``: accuracy on experience ``i``'s test set after training through ``t`` (both 1-based, i <= t)."""

    def __init__(self, T: int):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T
        self._a = np.full((T, T), np.nan)

    def set(self, t: int, i: int, value: float) -> None:
        if not 1 <= i <= t <= self.T:
            raise IndexError(f"entry ({t}, {i}) outside the lower triangle of a {self.T}x{self.T} matrix")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[t - 1, i - 1] = value

    def get(self, t: int, i: int) -> float:
        return float(self._a[t - 1, i - 1])

    def row(self, t: int) -> np.ndarray:
        return self._a[t - 1, :t].copy()

    def filled(self, t: int) -> int:
        return int(np.count_nonzero(~np.isnan(self._a[t - 1])))

    def is_populated(self, t: int) -> bool:
        return self.filled(t) == t

    def average(self, t: int) -> float:
        return average_accuracy(self, t)

    def to_array(self) -> np.ndarray:
        return self._a.copy()

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[float]]) -> "AccuracyMatrix":
        rows = [list(r) for r in rows]
        m = cls(len(rows))
        for t, r in enumerate(rows, start=1):
            for i, v in enumerate(r[:t], start=1):
                m.set(t, i, float(v))
        return m

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self._a, other._a, equal_nan=True)


def average_accuracy(m: AccuracyMatrix, t: int) -> float:
    """Mean of row ``t``: accuracy averaged over every experience seen so far."""
    if not 1 <= t <= m.T:
        raise IndexError(f"t={t} outside 1..{m.T}")
    if not m.is_populated(t):
        raise ValueError(f"row {t} has {m.filled(t)} of {t} entries")
    return float(np.mean(m.row(t)))


@dataclass
class Summary:
    series: list[float]
    final: float

    def report(self, start: int = 1) -> str:
        return " ".join(f"A{t}={a:.2f}" for t, a in enumerate(self.series, start=1) if t >= start)


def summarize(m: AccuracyMatrix) -> Summary:
    series = [average_accuracy(m, t) for t in range(1, m.T + 1)]
    return Summary(series, series[-1])


def matrix_rows(m: AccuracyMatrix, run_id: str, strategy: str, seed: int) -> list[dict]:
    return [
        {
            "run_id": run_id,
            "strategy": strategy,
            "seed": seed,
            "trained_through_experience": t,
            "evaluated_experience": i,
            "accuracy": repr(m.get(t, i)),
        }
        for t in range(1, m.T + 1)
        for i in range(1, t + 1)
    ]


def write_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> dict[tuple[str, str, int], AccuracyMatrix]:
    """Parse a results CSV back into one matrix per (run_id, strategy, seed)."""
    entries: dict = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        for r in reader:
            key = (r["run_id"], r["strategy"], int(r["seed"]))
            entries.setdefault(key, []).append(
                (int(r["trained_through_experience"]), int(r["evaluated_experience"]), float(r["accuracy"]))
            )
    out = {}
    for key, vals in entries.items():
        m = AccuracyMatrix(max(t for t, _, _ in vals))
        for t, i, a in vals:
            m.set(t, i, a)
        out[key] = m
    return out
