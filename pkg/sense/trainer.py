"""
Sensible adversarial training.

A sensible example is a PGD iterate that stops being accepted once its loss
passes log(1/c): the last accepted iterate is kept (sensible reversion).
Training on it with the ordinary cross-entropy is the same as training on
the sum of a truncated natural loss and a truncated adversarial loss.

c = 0 never reverts (regular adversarial training); c = 1 reverts at the
first step for every correctly classified input (natural training).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression

from sense.attacks import INF, AscentTrace, AttackSpec, ascend, pgd
from sense.datasets import LabeledSet, batches, make_rng, sample
from sense.distributions import ThreeClusters
from sense.errors import InputError, NumericInputError, SpecError
from sense.models import (
    Model,
    ModelSpec,
    example_losses,
    loss_and_param_grads,
    predict,
    probabilities,
)
from sense.tensor import sgd_step

log = logging.getLogger(__name__)

REVERSION_MODES = ("break", "noise")


@dataclass(frozen=True)
class SenseSpec:
    c: float = 0.7
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(epsilon=0.3, step_size=0.05, steps=10))
    warmup_epochs: int = 5
    reversion: str = "break"

    def __post_init__(self):
        if not 0 <= self.c <= 1:
            raise SpecError(f"c must lie in [0, 1], got {self.c}")
        if self.warmup_epochs < 0:
            raise SpecError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.reversion not in REVERSION_MODES:
            raise SpecError(f"reversion must be one of {REVERSION_MODES}, got '{self.reversion}'")
        if not 0.5 <= self.c <= 1:
            log.warning(f"c = {self.c} is outside the recommended band [0.5, 1]")

    @property
    def threshold(self) -> float:
        """Loss ceiling log(1/c) for accepted iterates."""
        return INF if self.c == 0 else -math.log(self.c)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    lr_decay_steps: tuple[int, ...] = (80, 140, 170)
    lr_decay_factor: float = 0.1
    weight_decay: float = 2e-4
    seed: int = 0
    pretrain_epochs: int = 0
    monitor_size: int = 1000
    monitor_c: float = 0.5
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_steps", tuple(int(s) for s in self.lr_decay_steps))
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if not self.lr > 0 or self.weight_decay < 0:
            raise SpecError(f"need lr > 0 and weight_decay >= 0, got {self.lr}, {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise SpecError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.pretrain_epochs < 0 or self.monitor_size < 0:
            raise SpecError("pretrain_epochs and monitor_size must be >= 0")
        if not 0 < self.monitor_c <= 1:
            raise SpecError(f"monitor_c must lie in (0, 1], got {self.monitor_c}")
        if self.reduction not in ("mean", "sum"):
            raise SpecError(f"reduction must be 'mean' or 'sum', got '{self.reduction}'")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for step in self.lr_decay_steps if epoch >= step)
        return self.lr * self.lr_decay_factor**passed


# ── Truncated losses and the A/B/C partition ─────────────────────────────────


def _check_prob(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr <= 0):
        raise NumericInputError(f"{name} must be > 0 (got a zero or negative probability)")
    if np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} must lie in (0, 1]")
    return arr


def _ceiling(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0) or np.any(c > 1):
        raise InputError("c must lie in (0, 1]")
    return -np.log(c)


def trunc_nat_loss(p_hat, c):
    """max(0, −log p̂ − log(1/c)); zero exactly when p̂ ≥ c."""
    value = np.maximum(0.0, -np.log(_check_prob(p_hat, "p_hat")) - _ceiling(c))
    return float(value) if value.ndim == 0 else value


def trunc_rob_loss(p_hat_adv, c):
    """min(−log p̂, log(1/c))."""
    value = np.minimum(-np.log(_check_prob(p_hat_adv, "p_hat_adv")), _ceiling(c))
    return float(value) if value.ndim == 0 else value


def partition_from_probs(p_nat, p_adv, c) -> np.ndarray:
    """'A' if p_nat ≤ c, 'B' if p_adv ≤ c < p_nat, otherwise 'C'."""
    p_nat, p_adv = np.asarray(p_nat), np.asarray(p_adv)
    return np.where(p_nat <= c, "A", np.where(p_adv <= c, "B", "C"))


def partition_labels(model: Model, x, y, x_tilde, c: float) -> np.ndarray:
    """Partition of each row given its full-PGD example x_tilde."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(y.shape[0])
    p_nat = np.atleast_2d(probabilities(model, x))[rows, y]
    p_adv = np.atleast_2d(probabilities(model, x_tilde))[rows, y]
    return partition_from_probs(p_nat, p_adv, c)


def partition_point(model: Model, x, y, x_tilde, c: float) -> str:
    return str(partition_labels(model, x, y, x_tilde, c)[0])


class IdentityCheck(NamedTuple):
    lhs: np.ndarray | float
    rhs_decomposed: np.ndarray | float
    rhs_piecewise: np.ndarray | float


def loss_identity_check(p_nat, p_adv, c) -> IdentityCheck:
    """Three forms of the sensible loss from the natural and worst-case confidences.

    lhs is −log p̂_y at the sensible example itself: the adversarial
    confidence, raised to c when the ball crosses the threshold, or the
    natural confidence when the input sits at or below c.
    """
    p_nat = _check_prob(p_nat, "p_nat")
    p_adv = _check_prob(p_adv, "p_adv")
    if np.any(p_adv > p_nat):
        raise InputError("p_adv must not exceed p_nat")
    c = np.asarray(c, dtype=np.float64)
    ceiling = _ceiling(c)

    p_sense = np.where(p_nat > c, np.maximum(c, p_adv), p_nat)
    lhs = -np.log(p_sense)
    decomposed = np.asarray(trunc_nat_loss(p_nat, c)) + np.asarray(trunc_rob_loss(p_adv, c))
    piecewise = np.where(p_nat <= c, -np.log(p_nat), np.where(p_adv <= c, ceiling, -np.log(p_adv)))
    if lhs.ndim == 0:
        return IdentityCheck(float(lhs), float(decomposed), float(piecewise))
    return IdentityCheck(lhs, decomposed, piecewise)


# ── Sensible examples ─────────────────────────────────────────────────────────


def generate_sensible(
    model: Model,
    x,
    y,
    spec: SenseSpec,
    rng: np.random.Generator,
    full_pgd: np.ndarray | None = None,
) -> AscentTrace:
    """Sensible examples for a batch with evaluation counts and the reverted mask.

    For c > 0 only correctly classified rows are perturbed. Rows flagged in
    `full_pgd` skip the reversion check (warmup).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    active = predict(model, x) == y if spec.c > 0 else None
    return ascend(
        model,
        x,
        y,
        spec.attack,
        rng,
        threshold=spec.threshold,
        active=active,
        unchecked=full_pgd,
        noise_continue=spec.reversion == "noise",
    )


def sensible_example(model: Model, x, y, spec: SenseSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.spec.input_shape
    points = generate_sensible(model, x[None] if single else x, y, spec, rng).points
    return points[0] if single else points


def sense_loss(model: Model, x, y, spec: SenseSpec, rng: np.random.Generator):
    """Cross-entropy at the sensible example; a float for one input, per-row otherwise."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.spec.input_shape
    batch = x[None] if single else x
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    losses = example_losses(model, generate_sensible(model, batch, labels, spec, rng).points, labels)
    return float(losses[0]) if single else losses


# ── Training loops ────────────────────────────────────────────────────────────


@dataclass
class TrainLog:
    method: str
    records: list[dict] = field(default_factory=list)
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)

    COLUMNS = ("epoch", "nat_acc", "rob_acc", "n_A", "n_B", "n_C", "mean_sense_loss", "lr", "param_hash")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=list(self.COLUMNS))


Augment = Callable[[Model, np.ndarray, np.ndarray, int, np.random.Generator], np.ndarray]


def _monitor_rows(data: LabeledSet, size: int, seed: int) -> np.ndarray:
    order = make_rng(seed, "monitor/rows").permutation(len(data))
    return np.sort(order[: min(size, len(data))])


def _epoch_record(
    model: Model,
    data: LabeledSet,
    rows: np.ndarray,
    attack: AttackSpec | None,
    c: float,
    rng: np.random.Generator,
) -> dict:
    x, y = data.inputs[rows], data.labels[rows]
    if rows.shape[0] == 0:
        return {"nat_acc": float("nan"), "rob_acc": float("nan"), "n_A": 0, "n_B": 0, "n_C": 0}
    natural = predict(model, x) == y
    x_tilde = pgd(model, x, y, attack, rng) if attack is not None else x
    robust = natural & (predict(model, x_tilde) == y)
    parts = partition_labels(model, x, y, x_tilde, c)
    return {
        "nat_acc": float(natural.mean()),
        "rob_acc": float(robust.mean()) if attack is not None else float("nan"),
        "n_A": int(np.sum(parts == "A")),
        "n_B": int(np.sum(parts == "B")),
        "n_C": int(np.sum(parts == "C")),
    }


def _fit(
    model: Model,
    data: LabeledSet,
    tspec: TrainSpec,
    method: str,
    augment: Augment,
    attack: AttackSpec | None,
    monitor_c: float,
    keep_params: bool,
) -> tuple[Model, TrainLog]:
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    iterator = batches(data, tspec.batch_size, shuffle_seed=tspec.seed)
    attack_rng = make_rng(tspec.seed, "attack")
    monitor_rng = make_rng(tspec.seed, "monitor")
    rows = _monitor_rows(data, tspec.monitor_size, tspec.seed)
    train_log = TrainLog(method)

    def natural(_m, x, _y, _e, _r):
        return x

    total = tspec.pretrain_epochs + tspec.epochs
    log.info(f"  → {method}: {total} epochs on {len(data)} examples, {len(iterator)} batches each")
    for epoch in range(total):
        lr = tspec.lr_at(epoch)
        pretraining = epoch < tspec.pretrain_epochs
        step = natural if pretraining else augment
        loss_sum = 0.0
        for batch in iterator:
            x_aug = step(model, batch.inputs, batch.labels, epoch - tspec.pretrain_epochs, attack_rng)
            loss, grads = loss_and_param_grads(model, x_aug, batch.labels, tspec.reduction)
            model = model.with_params(sgd_step(model.params, grads, lr, tspec.weight_decay))
            loss_sum += loss if tspec.reduction == "sum" else loss * batch.labels.shape[0]

        record = {"epoch": epoch, "mean_sense_loss": loss_sum / len(data), "lr": lr}
        record.update(_epoch_record(model, data, rows, attack, monitor_c, monitor_rng))
        record["param_hash"] = model.content_hash()
        train_log.records.append(record)
        if keep_params:
            train_log.snapshots.append(dict(model.params))
        log.debug(
            f"  → epoch {epoch + 1}/{total} loss={record['mean_sense_loss']:.4f} "
            f"nat={record['nat_acc']:.3f} rob={record['rob_acc']:.3f}"
        )
    return model, train_log


def train_sense(
    model: Model, data: LabeledSet, sense: SenseSpec, tspec: TrainSpec, keep_params: bool = False
) -> tuple[Model, TrainLog]:
    """SENSE-AT. During warmup, correctly classified rows whose natural loss is
    already below log(1/c) get full PGD."""

    def augment(m: Model, x, y, epoch, rng):
        full = None
        if epoch < sense.warmup_epochs and sense.c > 0:
            full = (predict(m, x) == y) & (example_losses(m, x, y) < sense.threshold)
        return generate_sensible(m, x, y, sense, rng, full_pgd=full).points

    monitor_c = sense.c if sense.c > 0 else tspec.monitor_c
    return _fit(model, data, tspec, "sense", augment, sense.attack, monitor_c, keep_params)


def train_rat(
    model: Model, data: LabeledSet, attack: AttackSpec, tspec: TrainSpec, keep_params: bool = False
) -> tuple[Model, TrainLog]:
    """Regular adversarial training on full PGD examples."""

    def augment(m: Model, x, y, epoch, rng):
        return pgd(m, x, y, attack, rng)

    return _fit(model, data, tspec, "rat", augment, attack, tspec.monitor_c, keep_params)


def train_nat(
    model: Model,
    data: LabeledSet,
    tspec: TrainSpec,
    attack: AttackSpec | None = None,
    keep_params: bool = False,
) -> tuple[Model, TrainLog]:
    """Plain cross-entropy minimisation; `attack` only feeds the robust-accuracy column."""

    def augment(m: Model, x, y, epoch, rng):
        return x

    return _fit(model, data, tspec, "nat", augment, attack, tspec.monitor_c, keep_params)


# ── Three Clusters training experiment ───────────────────────────────────────


def logistic_init(data: LabeledSet, seed: int = 0) -> Model:
    """Two-class linear model whose logit gap equals a fitted logistic regression score."""
    if data.feature_shape != (2,) or data.num_classes != 2:
        raise InputError("logistic initialisation needs a 2-D two-class set")
    clf = LogisticRegression(C=1.0, max_iter=1000)
    clf.fit(data.inputs, data.labels)
    w, b = clf.coef_[0], float(clf.intercept_[0])
    spec = ModelSpec.linear(2, 2, seed=seed)
    return Model(spec, {"fc0.weight": np.stack([-w / 2, w / 2]), "fc0.bias": np.array([-b / 2, b / 2])})


def boundary_frame(train_log: TrainLog) -> pd.DataFrame:
    """Per-iteration decision boundary w·x + b = 0 of a two-class linear model."""
    rows = []
    for record, params in zip(train_log.records, train_log.snapshots):
        W, bias = params["fc0.weight"], params["fc0.bias"]
        w, b = W[1] - W[0], bias[1] - bias[0]
        rows.append(
            {
                "iteration": record["epoch"] + 1,
                "method": train_log.method,
                "w1": w[0],
                "w2": w[1],
                "b": b,
                "angle_deg": float(np.degrees(np.arctan2(w[1], w[0]))),
                "slope": float(-w[0] / w[1]) if w[1] != 0 else float("inf"),
                "nat_acc": record["nat_acc"],
                "rob_acc": record["rob_acc"],
                "n_A": record["n_A"],
                "n_B": record["n_B"],
                "n_C": record["n_C"],
            }
        )
    return pd.DataFrame(rows)


def convergence_summary(frame: pd.DataFrame, window: int = 100, flow_window: int = 50) -> dict:
    """Convergence statistics of one boundary trajectory.

    boundary_cov is ‖std‖ / ‖mean‖ of the unit-normalised (w1, w2, b) over the
    trailing window; per-component ratios blow up for components near zero.
    The |C| trend is the Spearman correlation with the iteration over the last
    `flow_window` iterations, NaN when |C| does not move; c_non_decreasing
    holds for a positive trend or a constant count.
    """
    norm = np.hypot(frame["w1"], frame["w2"])
    unit = np.column_stack([frame["w1"] / norm, frame["w2"] / norm, frame["b"] / norm])
    tail = unit[-window:]
    cov = float(np.linalg.norm(tail.std(axis=0)) / np.linalg.norm(tail.mean(axis=0)))
    signs = np.sign(frame["slope"].to_numpy())
    flips = int(np.sum(signs[1:] != signs[:-1]))
    angles = frame["angle_deg"].to_numpy()
    turns = (np.diff(angles) + 180.0) % 360.0 - 180.0
    flow = frame.tail(flow_window)
    if flow["n_C"].nunique() > 1:
        rho, _ = spearmanr(flow["iteration"], flow["n_C"])
        rho = float(rho)
    else:
        rho = float("nan")
    return {
        "boundary_cov": cov,
        "slope_sign_changes": flips,
        "angle_travelled_deg": float(np.abs(turns).sum()),
        "angle_range_tail_deg": float(np.ptp(angles[-window:])),
        "c_trend_spearman": rho,
        "c_non_decreasing": bool(rho > 0 or flow["n_C"].nunique() == 1),
        "final_angle_deg": float(angles[-1]),
        "final_nat_acc": float(frame["nat_acc"].iloc[-1]),
        "final_rob_acc": float(frame["rob_acc"].iloc[-1]),
    }


class ThreeClustersRun(NamedTuple):
    trajectories: pd.DataFrame
    summary: pd.DataFrame
    sense_model: Model
    rat_model: Model


def three_clusters_experiment(
    dist: ThreeClusters = ThreeClusters(p=0.55, sigma=0.2, m=7.0),
    n: int = 1000,
    gamma: float = 8.0,
    c: float = 0.9,
    lr: float = 0.01,
    iterations: int = 300,
    seed: int = 0,
) -> ThreeClustersRun:
    """SENSE-AT and R-AT from the same logistic-regression start.

    Each iteration is one full-batch gradient step on the summed
    cross-entropy, with one ℓ2 attack step of size ε = γσ. R-AT keeps
    swinging between ignoring the top and the bottom cluster; SENSE-AT
    reverts every example that would cross and stays at the standard
    linear boundary.
    """
    epsilon = gamma * dist.sigma
    data = sample(dist, n, seed)
    init = logistic_init(data, seed)
    attack = AttackSpec(norm=2.0, epsilon=epsilon, step_size=epsilon, steps=1)
    tspec = TrainSpec(
        epochs=iterations,
        batch_size=n,
        lr=lr,
        lr_decay_steps=(),
        weight_decay=0.0,
        seed=seed,
        monitor_size=n,
        monitor_c=c,
        reduction="sum",
    )
    log.info(f"  → Three Clusters: p={dist.p} sigma={dist.sigma} m={dist.m} eps={epsilon:g} c={c}")
    sense_model, sense_log = train_sense(init, data, SenseSpec(c, attack, warmup_epochs=0), tspec, keep_params=True)
    rat_model, rat_log = train_rat(init, data, attack, tspec, keep_params=True)

    frames = [boundary_frame(sense_log), boundary_frame(rat_log)]
    summary = pd.DataFrame(
        [{"method": f["method"].iloc[0], **convergence_summary(f)} for f in frames]
    )
    return ThreeClustersRun(pd.concat(frames, ignore_index=True), summary, sense_model, rat_model)
