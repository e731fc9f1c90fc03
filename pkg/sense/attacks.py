"""
Gradient attacks: norm-ball projection, FGSM, ℓ∞ / ℓp PGD, multi-restart
worst-case search and transfer evaluation.

All iterations run on the full batch; rows that have finished keep their
value through masking rather than being dropped, so a row's arithmetic never
depends on what its neighbours do.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from sense.datasets import LabeledSet
from sense.errors import ShapeError, SpecError
from sense.models import Model, example_losses, loss_and_input_gradient, predict

log = logging.getLogger(__name__)

INF = math.inf
BALL_SLACK = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    norm: float = INF
    epsilon: float = 0.3
    step_size: float = 0.01
    steps: int = 40
    restarts: int = 1
    random_start: bool = False
    clip_domain: tuple[float, float] | None = None
    kind: str = "pgd"

    def __post_init__(self):
        if not (self.norm == INF or (math.isfinite(self.norm) and self.norm >= 1)):
            raise SpecError(f"norm must be inf or a finite p >= 1, got {self.norm}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise SpecError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise SpecError(f"step_size must be finite and > 0, got {self.step_size}")
        if self.steps < 1 or self.restarts < 1:
            raise SpecError(f"need steps >= 1 and restarts >= 1, got {self.steps}, {self.restarts}")
        if self.kind not in ("pgd", "fgsm"):
            raise SpecError(f"unknown attack kind '{self.kind}' (pgd, fgsm)")
        if self.clip_domain is not None:
            lo, hi = self.clip_domain
            if not lo < hi:
                raise SpecError(f"clip_domain must satisfy lo < hi, got {self.clip_domain}")
            object.__setattr__(self, "clip_domain", (float(lo), float(hi)))

    def with_(self, **changes) -> "AttackSpec":
        return replace(self, **changes)


# ── Geometry ──────────────────────────────────────────────────────────────────


def _row_norms(delta: np.ndarray, norm: float) -> np.ndarray:
    """Per-example norms, keeping dims for broadcasting; 1-D arrays are one example."""
    if delta.ndim == 1:
        return np.array([np.linalg.norm(delta, ord=norm)]).reshape(1)
    flat = delta.reshape(delta.shape[0], -1)
    out = np.linalg.norm(flat, ord=norm, axis=1)
    return out.reshape((-1,) + (1,) * (delta.ndim - 1))


def project(norm: float, candidate, center, epsilon: float, clip_domain=None) -> np.ndarray:
    """Nearest-ball map: ℓ∞ clamps each coordinate, finite p rescales radially when outside."""
    cand = np.asarray(candidate, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if cand.shape != center.shape:
        raise ShapeError(f"project: candidate {cand.shape} vs center {center.shape}")
    if norm == INF:
        out = np.clip(cand, center - epsilon, center + epsilon)
    else:
        delta = cand - center
        size = _row_norms(delta, norm)
        outside = size > epsilon + BALL_SLACK
        scale = np.where(outside, epsilon / np.where(outside, size, 1.0), 1.0)
        out = np.where(outside, center + delta * scale, cand)
    if clip_domain is not None:
        out = np.clip(out, clip_domain[0], clip_domain[1])
    return out


def ball_distance(norm: float, x, center) -> np.ndarray:
    delta = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return _row_norms(delta, norm).reshape(-1)


def _direction(grad: np.ndarray, norm: float) -> np.ndarray:
    if norm == INF:
        return np.sign(grad)
    size = _row_norms(grad, norm)
    return np.where(size > 0, grad / np.where(size > 0, size, 1.0), 0.0)


def random_start(x: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform per coordinate in [−ε, ε] for ℓ∞; uniform in the ball for finite p."""
    if spec.norm == INF:
        delta = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    else:
        g = rng.standard_normal(x.shape)
        dim = int(np.prod(x.shape[1:]))
        radius = spec.epsilon * rng.random(x.shape[0]) ** (1.0 / dim)
        delta = _direction(g, 2.0) * radius.reshape((-1,) + (1,) * (x.ndim - 1))
    return project(spec.norm, x + delta, x, spec.epsilon, spec.clip_domain)


# ── Single attacks ────────────────────────────────────────────────────────────


def fgsm(model: Model, x, y, epsilon: float, clip_domain=None) -> np.ndarray:
    """x + ε·sign(∇ₓℓ), clipped to the domain; sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    _, grad = loss_and_input_gradient(model, x, y)
    return project(INF, x + epsilon * np.sign(grad), x, epsilon, clip_domain)


class AscentTrace(NamedTuple):
    points: np.ndarray
    reverted: np.ndarray
    grad_evals: int
    forward_evals: int
    losses: np.ndarray | None


def ascend(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator,
    threshold: float = INF,
    active: np.ndarray | None = None,
    unchecked: np.ndarray | None = None,
    noise_continue: bool = False,
    record: bool = False,
) -> AscentTrace:
    """PGD iterations with optional loss-threshold reversion.

    `threshold` is the largest loss an accepted iterate may carry; an iterate
    above it is replaced by the last accepted one (break) or by that point
    plus uniform ±η/10 noise (noise_continue). Rows outside `active` are
    returned unchanged; rows in `unchecked` ignore the threshold. With an
    infinite threshold this is plain PGD.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = x.shape[0]
    bshape = (-1,) + (1,) * (x.ndim - 1)
    active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    checked = active if unchecked is None else active & ~np.asarray(unchecked, dtype=bool)
    guarded = math.isfinite(threshold) and bool(checked.any())

    start = random_start(x, spec, rng) if spec.random_start else x
    cur = np.where(active.reshape(bshape), start, x)
    prev = x
    done = ~active
    reverted = np.zeros(n, dtype=bool)
    history = []
    grad_evals = forward_evals = 0

    for _ in range(spec.steps):
        losses, grad = loss_and_input_gradient(model, cur, y)
        grad_evals += 1
        forward_evals += 1
        if record:
            history.append(losses)
        step_rows = ~done
        if guarded:
            over = checked & ~done & (losses > threshold)
            if over.any():
                if noise_continue:
                    noise = rng.uniform(-spec.step_size / 10, spec.step_size / 10, size=x.shape)
                    jitter = project(spec.norm, prev + noise, x, spec.epsilon, spec.clip_domain)
                    cur = np.where(over.reshape(bshape), jitter, cur)
                else:
                    cur = np.where(over.reshape(bshape), prev, cur)
                    done = done | over
                reverted |= over
                step_rows = step_rows & ~over
            prev = np.where((step_rows & checked).reshape(bshape), cur, prev)
        candidate = cur + spec.step_size * _direction(grad, spec.norm)
        moved = project(spec.norm, candidate, x, spec.epsilon, spec.clip_domain)
        cur = np.where(step_rows.reshape(bshape), moved, cur)

    if guarded or record:
        losses = example_losses(model, cur, y)
        forward_evals += 1
        if record:
            history.append(losses)
        if guarded:
            over = checked & ~done & (losses > threshold)
            cur = np.where(over.reshape(bshape), prev, cur)
            reverted |= over

    trace = np.stack(history) if record else None
    return AscentTrace(cur, reverted, grad_evals, forward_evals, trace)


def pgd(model: Model, x, y, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    return ascend(model, np.asarray(x, dtype=np.float64), y, spec, rng).points


def pgd_trace(model: Model, x, y, spec: AttackSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """PGD points and the (steps + 1, n) per-iterate loss history."""
    out = ascend(model, np.asarray(x, dtype=np.float64), y, spec, rng, record=True)
    return out.points, out.losses


def run_attack(model: Model, x, y, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.epsilon, spec.clip_domain)
    return pgd(model, x, y, spec, rng)


# ── Restarts and transfer ─────────────────────────────────────────────────────


class WorstCase(NamedTuple):
    worst: np.ndarray
    losses: np.ndarray
    correct: np.ndarray
    points: np.ndarray

    def cumulative_accuracy(self, natural_correct: np.ndarray | None = None) -> np.ndarray:
        """Fraction of rows that survive every restart up to r, for r = 1..restarts."""
        alive = np.logical_and.accumulate(self.correct, axis=0)
        if natural_correct is not None:
            alive = alive & natural_correct
        return alive.mean(axis=1)


def worst_case_over_restarts(
    model: Model, x, y, spec: AttackSpec, rng: np.random.Generator
) -> WorstCase:
    """Runs `spec.restarts` attacks; per row keeps the point with the largest loss.

    FGSM is deterministic and runs once whatever the restart count.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rounds = 1 if spec.kind == "fgsm" else spec.restarts
    points = np.stack([run_attack(model, x, y, spec, rng) for _ in range(rounds)])
    losses = np.stack([example_losses(model, adv, y) for adv in points])
    correct = np.stack([predict(model, adv) == y for adv in points])
    best = losses.argmax(axis=0)
    worst = points[best, np.arange(x.shape[0])]
    return WorstCase(worst, losses, correct, points)


def transfer_eval(
    generator: Model, victim: Model, dataset: LabeledSet, spec: AttackSpec, rng: np.random.Generator
) -> float:
    """Victim accuracy on attacks built against `generator`.

    A row counts when the victim is right on the clean input and on every
    restart's adversarial point, the same rule white-box robust accuracy uses.
    """
    if generator.spec.input_shape != victim.spec.input_shape or generator.spec.classes != victim.spec.classes:
        raise SpecError(
            f"generator {generator.spec.input_shape}->{generator.spec.classes} and victim "
            f"{victim.spec.input_shape}->{victim.spec.classes} disagree"
        )
    if len(dataset) == 0:
        return float("nan")
    wc = worst_case_over_restarts(generator, dataset.inputs, dataset.labels, spec, rng)
    survive = predict(victim, dataset.inputs) == dataset.labels
    for adv in wc.points:
        survive &= predict(victim, adv) == dataset.labels
    return float(survive.mean())
