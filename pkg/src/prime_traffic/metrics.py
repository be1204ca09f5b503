"""Continual-learning metrics over the accuracy matrix.

``R[i, j]`` is the accuracy on task j after training stage i (tasks and stages are
1-based). Row 0 holds the accuracies of a randomly initialized model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import polars as pl

from .errors import MetricsError

METRIC_NAMES = ("AA", "BWT", "FWT", "FA")


@dataclass
class Metrics:
    AA: float
    BWT: float
    FWT: float
    FA: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


class AccuracyMatrix:
    """Write-once accuracy cells for T stages.

    Row 0 may hold every task. Row i >= 1 holds tasks j <= i, plus task i + 1 measured
    with a freshly initialized head before stage i + 1 is trained (needed by FWT).
    """

    def __init__(self, tasks: int) -> None:
        if tasks < 1:
            raise MetricsError(f"An accuracy matrix needs at least one task, got {tasks}")
        self.tasks = tasks
        self.cells: dict[tuple[int, int], float] = {}

    def record(self, stage: int, task: int, accuracy: float) -> "AccuracyMatrix":
        if not 0 <= stage <= self.tasks or not 1 <= task <= self.tasks:
            raise MetricsError(f"Cell R[{stage},{task}] is outside a {self.tasks}-task matrix")
        if stage > 0 and task > stage + 1:
            raise MetricsError(f"Cell R[{stage},{task}]: task {task} cannot be evaluated after stage {stage}")
        if not 0.0 <= accuracy <= 1.0:
            raise MetricsError(f"Cell R[{stage},{task}]: accuracy {accuracy} is outside [0, 1]")
        if (stage, task) in self.cells:
            raise MetricsError(f"Cell R[{stage},{task}] was already recorded")
        self.cells[(stage, task)] = float(accuracy)
        return self

    def get(self, stage: int, task: int) -> float:
        try:
            return self.cells[(stage, task)]
        except KeyError:
            raise MetricsError(f"Cell R[{stage},{task}] is missing") from None

    def __contains__(self, cell: tuple[int, int]) -> bool:
        return cell in self.cells

    def to_array(self) -> np.ndarray:
        """(T + 1) x T array with NaN for absent cells."""
        out = np.full((self.tasks + 1, self.tasks), np.nan)
        for (i, j), value in self.cells.items():
            out[i, j - 1] = value
        return out

    def to_frame(self) -> pl.DataFrame:
        """Wide table: one row per stage, one column per task."""
        arr = self.to_array()
        data = {"stage": list(range(self.tasks + 1))}
        for j in range(self.tasks):
            data[f"task_{j + 1}"] = [None if np.isnan(v) else float(v) for v in arr[:, j]]
        return pl.DataFrame(data)

    def to_long(self) -> pl.DataFrame:
        rows = sorted(self.cells.items())
        return pl.DataFrame(
            {"stage": [i for (i, _), _ in rows], "task": [j for (_, j), _ in rows], "accuracy": [v for _, v in rows]},
            schema={"stage": pl.Int64, "task": pl.Int64, "accuracy": pl.Float64},
        )

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "cells": [[i, j, v] for (i, j), v in sorted(self.cells.items())]}

    @classmethod
    def from_dict(cls, data: dict) -> "AccuracyMatrix":
        matrix = cls(data["tasks"])
        for i, j, v in data["cells"]:
            matrix.record(int(i), int(j), float(v))
        return matrix


def compute(matrix: AccuracyMatrix) -> Metrics:
    """AA, BWT, FWT and FA of a complete matrix.

    Raises:
        MetricsError: If T < 2 or a required cell is missing (the message names it).
    """
    T = matrix.tasks
    if T < 2:
        raise MetricsError(f"BWT and FWT need at least 2 tasks, got T = {T}")
    R = matrix.get
    return Metrics(
        AA=float(np.mean([R(i, i) for i in range(1, T + 1)])),
        BWT=float(np.mean([R(T, i) - R(i, i) for i in range(1, T)])),
        FWT=float(np.mean([R(i - 1, i) - R(0, i) for i in range(2, T + 1)])),
        FA=float(np.mean([R(T, j) for j in range(1, T + 1)])),
    )


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean drop from the best accuracy ever reached on a task to its final accuracy."""
    T = matrix.tasks
    if T < 2:
        raise MetricsError(f"Forgetting needs at least 2 tasks, got T = {T}")
    drops = []
    for j in range(1, T):
        best = max(matrix.get(i, j) for i in range(j, T))
        drops.append(best - matrix.get(T, j))
    return float(np.mean(drops))


def aggregate(runs: list[dict[str, float]]) -> pl.DataFrame:
    """Mean and half-range ``(max - min) / 2`` of every metric over runs.

    Returns:
        One row per metric with columns metric, mean, half_range, runs.
    """
    if not runs:
        raise MetricsError("aggregate needs at least one run")
    df = pl.DataFrame(runs)
    return pl.DataFrame(
        {
            "metric": df.columns,
            "mean": [df[c].mean() for c in df.columns],
            "half_range": [(df[c].max() - df[c].min()) / 2 for c in df.columns],
            "runs": [df.height] * df.width,
        }
    )


def polar_frame(matrix: AccuracyMatrix, method: str, seed: int | None = None) -> pl.DataFrame:
    """Per-stage per-task accuracy rings: rows (method, seed, stage, task, accuracy) for trained tasks."""
    rows = [(i, j, v) for (i, j), v in sorted(matrix.cells.items()) if i >= 1 and j <= i]
    return pl.DataFrame(
        {
            "method": [method] * len(rows),
            "seed": [seed] * len(rows),
            "stage": [r[0] for r in rows],
            "task": [r[1] for r in rows],
            "accuracy": [r[2] for r in rows],
        },
        schema={"method": pl.String, "seed": pl.Int64, "stage": pl.Int64, "task": pl.Int64, "accuracy": pl.Float64},
    )
