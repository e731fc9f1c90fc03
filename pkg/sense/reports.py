"""
Evaluation reports, PGD convergence curves and artifact emission (CSV tables
and the per-run manifest).
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from sense import __version__
from sense.attacks import AttackSpec, pgd_trace, transfer_eval, worst_case_over_restarts
from sense.datasets import LabeledSet
from sense.errors import ArtifactError, InputError, ShapeError
from sense.models import Model, predict
from sense.trainer import partition_labels

log = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"
CSV_LINE_END = "\r\n"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class EvalReport:
    natural_acc: float
    robust_acc: dict[str, float] = field(default_factory=dict)
    worst_case_curve: np.ndarray = field(default_factory=lambda: np.empty(0))
    partition: dict[str, int] | None = None
    n: int = 0

    def __post_init__(self):
        curve = np.asarray(self.worst_case_curve, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "worst_case_curve", curve)
        values = [self.natural_acc, *self.robust_acc.values(), *curve]
        if any(not 0 <= v <= 1 for v in values if not np.isnan(v)):
            raise InputError(f"accuracies must lie in [0, 1], got {values}")
        for name, value in self.robust_acc.items():
            if value > self.natural_acc:
                raise InputError(f"robust accuracy '{name}' = {value} exceeds natural {self.natural_acc}")
        if np.any(np.diff(curve) > 0):
            raise InputError("worst-case curve must be non-increasing")

    def to_frame(self) -> pd.DataFrame:
        """Long table: one (metric, index, value) row per number."""
        rows = [{"metric": "natural_acc", "index": 0, "value": self.natural_acc}]
        rows += [{"metric": f"robust_acc/{name}", "index": 0, "value": v} for name, v in self.robust_acc.items()]
        rows += [{"metric": "worst_case_acc", "index": r + 1, "value": v} for r, v in enumerate(self.worst_case_curve)]
        for part, count in (self.partition or {}).items():
            rows.append({"metric": f"n_{part}", "index": 0, "value": float(count)})
        rows.append({"metric": "n", "index": 0, "value": float(self.n)})
        return pd.DataFrame(rows, columns=["metric", "index", "value"])


@dataclass(frozen=True)
class CurveSeries:
    name: str
    x_label: str
    x: np.ndarray
    series: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        if np.any(np.diff(x) <= 0):
            raise InputError(f"{self.name}: x values must be strictly increasing")
        series = {}
        for key, values in self.series.items():
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if arr.shape != x.shape:
                raise ShapeError(f"{self.name}: series '{key}' has {arr.shape[0]} points, x has {x.shape[0]}")
            series[key] = arr
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "series", series)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({self.x_label: self.x})
        for key, values in self.series.items():
            frame[key] = values
        return frame


def _chunks(n: int, size: int) -> Iterator[np.ndarray]:
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def eval_accuracy(
    model: Model,
    data: LabeledSet,
    attack: AttackSpec | None = None,
    rng: np.random.Generator | None = None,
    c: float | None = None,
    transfer: Mapping[str, Model] | None = None,
    chunk: int = 1000,
) -> EvalReport:
    """Natural accuracy, and with an attack the worst-restart robust accuracy,
    its per-restart curve, transfer accuracies from each generator in
    `transfer` and (when c is given) the A/B/C partition at the worst point.

    A row is robust only if it is classified correctly before the attack and
    after every restart.
    """
    n = len(data)
    if n == 0:
        return EvalReport(float("nan"), n=0)
    if attack is not None and rng is None:
        raise InputError("an attack evaluation needs an rng")

    natural = np.concatenate([predict(model, data.inputs[idx]) == data.labels[idx] for idx in _chunks(n, chunk)])
    if attack is None:
        return EvalReport(float(natural.mean()), n=n)

    survived, partition = [], {"A": 0, "B": 0, "C": 0}
    for idx in _chunks(n, chunk):
        x, y = data.inputs[idx], data.labels[idx]
        wc = worst_case_over_restarts(model, x, y, attack, rng)
        survived.append(np.logical_and.accumulate(wc.correct, axis=0) & natural[idx])
        if c is not None:
            parts = partition_labels(model, x, y, wc.worst, c)
            for key in partition:
                partition[key] += int(np.sum(parts == key))
    curve = np.concatenate(survived, axis=1).mean(axis=1)

    robust = {attack.kind: float(curve[-1])}
    for name, generator in (transfer or {}).items():
        weighted = sum(
            transfer_eval(generator, model, data.take(idx), attack, rng) * idx.shape[0] for idx in _chunks(n, chunk)
        )
        robust[f"transfer/{name}"] = float(weighted / n)

    log.info(f"  → natural {natural.mean():.4f}, {attack.kind} robust {curve[-1]:.4f} on {n} examples")
    return EvalReport(float(natural.mean()), robust, curve, partition if c is not None else None, n)


def convergence_curves(
    model: Model, x, y, spec: AttackSpec, rng: np.random.Generator
) -> tuple[CurveSeries, CurveSeries]:
    """Per-example loss after each PGD step of one restart, and the cumulative
    worst-case accuracy after each of `spec.restarts` restarts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] == 0:
        raise InputError("convergence curves need at least one example")

    _, history = pgd_trace(model, x, y, spec, rng)
    steps = np.arange(history.shape[0])
    per_example = {f"ex{i}": history[:, i] for i in range(y.shape[0])}
    per_example["mean"] = history.mean(axis=1)
    losses = CurveSeries("pgd_loss", "step", steps, per_example)

    wc = worst_case_over_restarts(model, x, y, spec, rng)
    curve = wc.cumulative_accuracy(natural_correct=predict(model, x) == y)
    restarts = CurveSeries("worst_case_acc", "restart", np.arange(1, curve.shape[0] + 1), {"robust_acc": curve})
    return losses, restarts


# ── Artifacts ─────────────────────────────────────────────────────────────────


def emit_csv(table, path) -> Path:
    """Write a DataFrame (or anything with to_frame()) as CRLF CSV with
    17-significant-digit floats."""
    frame = table if isinstance(table, pd.DataFrame) else table.to_frame()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator=CSV_LINE_END)
    except OSError as e:
        raise ArtifactError(path, f"cannot write CSV: {e}") from e
    log.info(f"  → wrote {path} ({len(frame)} rows)")
    return path


def read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except OSError as e:
        raise ArtifactError(path, f"cannot read CSV: {e}") from e


def version_string() -> str:
    """`git describe` of the working tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        out = None
    if out is not None and out.returncode == 0 and out.stdout.strip():
        return out.stdout.strip()
    return f"v{__version__}"


def write_manifest(
    out_dir,
    config: Mapping[str, str],
    seed: int,
    status: str = "ok",
    artifacts: list[str] | None = None,
    checkpoint_hash: str | None = None,
    summary: Mapping | None = None,
) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    manifest = {
        "version": version_string(),
        "created_at": datetime.now().isoformat(timespec="seconds"),
        "status": status,
        "partial": status != "ok",
        "seed": seed,
        "config": dict(config),
        "artifacts": sorted(artifacts or []),
        "checkpoint_hash": checkpoint_hash,
        "summary": dict(summary or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactError(path, f"cannot write manifest: {e}") from e
    return path
