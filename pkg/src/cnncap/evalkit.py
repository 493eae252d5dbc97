"""Accuracy metrics, scatter export, and inference benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import models, trainer


@dataclass
class ErrorReport:
    task: str
    count: int
    err_avg: float                 # mean |relative error|
    err_max: float                 # max |relative error|
    ratio_over_5pct: float
    ratio_over_10pct: float
    rows: list[tuple[float, float, float]] = field(repr=False, default_factory=list)
    # rows: (predicted, label, relative error)


def relative_errors(preds, labels) -> np.ndarray:
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    if np.any(y == 0):
        raise ValueError("labels must be nonzero")
    return np.abs(p - y) / np.abs(y)


def summarize(preds, labels, task: str = "",
              thresholds: tuple[float, float] = (0.05, 0.10)) -> ErrorReport:
    errors = relative_errors(preds, labels)
    if errors.size == 0:
        raise ValueError("empty input")
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=float)
    return ErrorReport(
        task=task,
        count=int(errors.size),
        err_avg=float(errors.mean()),
        err_max=float(errors.max()),
        ratio_over_5pct=float((errors > thresholds[0]).mean()),
        ratio_over_10pct=float((errors > thresholds[1]).mean()),
        rows=[(float(a), float(b), float(e)) for a, b, e in zip(p, y, errors)],
    )


def save_report(report: ErrorReport, path) -> None:
    lines = [
        f"task {report.task}",
        f"count {report.count}",
        f"err_avg {report.err_avg!r}",
        f"err_max {report.err_max!r}",
        f"ratio_over_5pct {report.ratio_over_5pct!r}",
        f"ratio_over_10pct {report.ratio_over_10pct!r}",
        "predicted label relative_error",
    ]
    for pred, label, err in report.rows:
        lines.append(f"{pred!r} {label!r} {err!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def scatter_export(report: ErrorReport, path) -> None:
    """Two columns: label capacitance (fF/µm) and relative error."""
    lines = [f"{label!r},{err!r}" for _, label, err in report.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class BenchResult:
    n_structures: int
    evals_per_structure: float
    mean_ms_per_structure: float
    median_ms_per_structure: float
    repeats: int
    batch_size: int
    threads: int
    solver_ms_per_structure: float | None = None

    @property
    def speedup(self) -> float | None:
        if self.solver_ms_per_structure is None:
            return None
        return self.solver_ms_per_structure / self.median_ms_per_structure


def bench_inference(model, dataset, repeats: int = 5, batch_size: int = 32,
                    warmup: int = 1, model_kind: str = "cnncap",
                    evals_per_structure: float | None = None,
                    fold: bool = True,
                    solver_seconds_per_structure: float | None = None) -> BenchResult:
    """Time model inference per structure.

    Extracting one structure costs one total evaluation plus one coupling
    evaluation per environmental conductor.  The per-evaluation time comes
    from batched passes over the dataset (median of `repeats`, warm-up
    excluded); `evals_per_structure` defaults to the dataset's own
    samples-per-structure ratio but should be set to the mean conductor
    count n_c when couplings were filtered out of the dataset.
    """
    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    x = trainer._features_array(samples, model_kind)
    n_structures = len({s.structure_id for s in samples})
    if evals_per_structure is None:
        evals_per_structure = len(samples) / n_structures
    threads = torch.get_num_threads()
    if fold:
        model = models.fold_batchnorm(model)

    def one_pass() -> float:
        t0 = time.perf_counter()
        trainer.predict_array(model, x, batch_size=batch_size)
        return time.perf_counter() - t0

    for _ in range(warmup):
        one_pass()
    times = np.array([one_pass() for _ in range(max(repeats, 1))])
    per_structure = times / len(samples) * evals_per_structure * 1e3
    return BenchResult(
        n_structures=n_structures,
        evals_per_structure=float(evals_per_structure),
        mean_ms_per_structure=float(per_structure.mean()),
        median_ms_per_structure=float(np.median(per_structure)),
        repeats=len(times),
        batch_size=batch_size,
        threads=threads,
        solver_ms_per_structure=(None if solver_seconds_per_structure is None
                                 else solver_seconds_per_structure * 1e3),
    )


def bench_solver(tech, structures, resolution: int | None = None) -> float:
    """Median field-solver seconds per structure (full Maxwell extraction)
    at the resolution used for golden labels (the solver default)."""
    from . import fieldsolver
    if resolution is None:
        resolution = fieldsolver.DEFAULT_RESOLUTION
    times = []
    for s in structures:
        t0 = time.perf_counter()
        fieldsolver.extract_capacitances(tech, s, resolution=resolution)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
