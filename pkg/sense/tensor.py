"""
Dense numeric core: immutable float64 tensors, a per-computation
differentiation tape, the forward primitives the models are built from,
reverse-mode gradients, a finite-difference gradient checker and plain SGD.

A Tape records one computation. Leaves are registered with `Tape.watch`,
primitives applied to taped tensors append nodes, and `Tape.backward` walks
the nodes once in reverse and freezes the tape. Tensors that are not on a
tape are constants; primitives applied only to constants record nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sense.errors import (
    LabelIndexError,
    NumericInputError,
    NumericOverflowError,
    ShapeError,
    TapeStateError,
)

log = logging.getLogger(__name__)

# smallest probability handed to log(); keeps -log p finite
PROB_FLOOR = np.finfo(np.float64).tiny


class Tensor:
    """Read-only float64 array, optionally attached to a node of a Tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tape_id(self) -> int | None:
        return None if self.tape is None else id(self.tape)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]


class Tape:
    """Ordered record of one computation; frozen after a single backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[str, int] = {}
        self.mode = "recording"

    @property
    def frozen(self) -> bool:
        return self.mode == "frozen"

    @property
    def nodes(self) -> list[_Node]:
        return list(self._nodes)

    def watch(self, value, name: str) -> Tensor:
        """Register `value` as a leaf named `name` and return its taped tensor."""
        self._check_recording()
        if name in self._leaves:
            raise TapeStateError(f"leaf '{name}' is already watched on this tape")
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        _require_finite(data, "leaf " + name)
        self._leaves[name] = len(self._nodes)
        self._nodes.append(_Node("leaf", (), None, data.shape))
        return Tensor(data, self, self._leaves[name])

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        self._check_recording()
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self._nodes.append(_Node(kind, ids, vjp, out.shape))
        return Tensor(out, self, len(self._nodes) - 1)

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Gradient of the scalar `loss` with respect to every watched leaf."""
        if self.frozen:
            raise TapeStateError("backward() already ran on this tape")
        if loss.tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for idx in range(loss.node, -1, -1):
            node = self._nodes[idx]
            g = grads.pop(idx, None) if node.kind != "leaf" else grads.get(idx)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.inputs, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = grads[parent] + pg if parent in grads else pg

        self.mode = "frozen"
        out = {}
        for name, idx in self._leaves.items():
            g = grads.get(idx)
            out[name] = Tensor(np.zeros(self._nodes[idx].shape) if g is None else g)
        return out

    def _check_recording(self):
        if self.frozen:
            raise TapeStateError("tape is frozen; start a new Tape for a new computation")


def _require_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"non-finite values in {what}")


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"{kind} produced non-finite output")
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise TapeStateError(f"{kind} mixes tensors from different tapes")
    return next(iter(tapes.values())).record(kind, inputs, out, vjp)


# ── Primitives ────────────────────────────────────────────────────────────────


def affine(x, weight, bias) -> Tensor:
    """x @ weight.T + bias, weight shaped (out, in); x is (in,) or (n, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, wd, bd = x.data, weight.data, bias.data
    if wd.ndim != 2 or xd.shape[-1:] != wd.shape[1:] or bd.shape != wd.shape[:1]:
        raise ShapeError(
            f"affine: x {xd.shape} incompatible with weight {wd.shape} / bias {bd.shape}"
        )
    out = xd @ wd.T + bd

    def vjp(g):
        g2, x2 = np.atleast_2d(g), np.atleast_2d(xd)
        return (g2 @ wd).reshape(xd.shape), g2.T @ x2, g2.sum(axis=0)

    return _emit("affine", (x, weight, bias), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return _emit("relu", (x,), out, lambda g: (g * mask,))


def conv2d(x, kernels, bias) -> Tensor:
    """Valid (unpadded) stride-1 convolution.

    x: (n, C, H, W); kernels: (O, C, kh, kw); bias: (O,) -> (n, O, H-kh+1, W-kw+1)
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, kd, bd = x.data, kernels.data, bias.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[1] != kd.shape[1] or bd.shape != kd.shape[:1]:
        raise ShapeError(f"conv2d: input {xd.shape} incompatible with kernels {kd.shape}")
    kh, kw = kd.shape[2:]
    if xd.shape[2] < kh or xd.shape[3] < kw:
        raise ShapeError(f"conv2d: input {xd.shape} smaller than kernels {kd.shape}")

    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))  # n, C, H', W', kh, kw
    out = np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bd[None, :, None, None]

    def vjp(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # n, O, H, W, kh, kw
        flipped = kd[:, :, ::-1, ::-1]
        gx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _emit("conv2d", (x, kernels, bias), np.ascontiguousarray(out), vjp)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] < 2 or xd.shape[-2] < 2:
        raise ShapeError(f"maxpool2x2: input {xd.shape} has no 2x2 window")
    lead = xd.shape[:-2]
    h2, w2 = xd.shape[-2] // 2, xd.shape[-1] // 2
    cropped = xd[..., : 2 * h2, : 2 * w2]
    k = len(lead)
    blocks = cropped.reshape(*lead, h2, 2, w2, 2)
    blocks = blocks.transpose(*range(k), k, k + 2, k + 1, k + 3).reshape(*lead, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        routed = np.zeros(blocks.shape)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(*lead, h2, w2, 2, 2)
        routed = routed.transpose(*range(k), k, k + 2, k + 1, k + 3).reshape(*lead, 2 * h2, 2 * w2)
        gx = np.zeros(xd.shape)
        gx[..., : 2 * h2, : 2 * w2] = routed
        return (gx,)

    return _emit("maxpool2x2", (x,), out, vjp)


def flatten(x) -> Tensor:
    """Collapse everything after the leading (batch) axis."""
    x = as_tensor(x)
    shape = x.data.shape
    if len(shape) < 2:
        raise ShapeError(f"flatten: input {shape} has no batch axis")
    out = x.data.reshape(shape[0], -1)
    return _emit("flatten", (x,), out, lambda g: (g.reshape(shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def half_squared_norm(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit("half_sq_norm", (x,), np.array(0.5 * np.sum(xd * xd)), lambda g: (float(g) * xd,))


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels, reduced to a scalar."""
    logits = as_tensor(logits)
    z = np.atleast_2d(logits.data)
    y = np.atleast_1d(np.asarray(labels))
    _check_labels(y, z.shape[-1], z.shape[0])
    losses = row_losses(z, y)
    n = z.shape[0]
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction '{reduction}'")

    def vjp(g):
        p = softmax_probs(z)
        p[np.arange(n), y] -= 1.0
        return ((float(g) * scale) * p).reshape(logits.data.shape)

    return _emit("softmax_ce", (logits,), np.array(losses.sum() * scale), lambda g: (vjp(g),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "affine": affine,
    "relu": relu,
    "conv2d": conv2d,
    "maxpool2x2": maxpool2x2,
    "flatten": flatten,
    "reshape": reshape,
}


def apply_primitive(kind: str, *inputs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{kind}' (known: {sorted(PRIMITIVES)})") from None
    return fn(*inputs)


# ── Probabilities and losses (untaped) ────────────────────────────────────────


def softmax_probs(logits) -> np.ndarray:
    """Softmax along the last axis with max-subtraction; entries floored at PROB_FLOOR."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least 2 classes, got shape {z.shape}")
    _require_finite(z, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return np.maximum(p, PROB_FLOOR)


def cross_entropy(probs, label: int) -> float:
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if not 0 <= int(label) < p.shape[-1]:
        raise LabelIndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[..., int(label)], PROB_FLOOR)))


def row_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row -log p̂_y computed from logits without forming p̂.

    The largest exponential is left out of the log1p sum, so a confident
    correct row keeps a strictly positive loss until the logit gap passes
    roughly 745.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(labels)
    rows = np.arange(z.shape[0])
    top = z.argmax(axis=-1)
    zmax = z[rows, top]
    e = np.exp(z - zmax[:, None])
    e[rows, top] = 0.0
    return (zmax - z[rows, y]) + np.log1p(e.sum(axis=-1))


def _check_labels(y: np.ndarray, num_classes: int, n: int):
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match {n} rows")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelIndexError(f"labels must lie in [0, {num_classes}), got {y.min()}..{y.max()}")


# ── Gradient checking ─────────────────────────────────────────────────────────


class GradReport(NamedTuple):
    max_rel_error: float
    worst_coordinate: tuple[int, ...]


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-6) -> GradReport:
    """Compare reverse-mode gradients of scalar `fn` at `point` with central differences.

    Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as
    denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    tape = Tape()
    loss = fn(tape.watch(x0, "x"))
    analytic = tape.backward(loss)["x"].data

    numeric = np.empty_like(x0)
    shifted = x0.copy()
    for idx in np.ndindex(*x0.shape):
        orig = shifted[idx]
        shifted[idx] = orig + h
        up = fn(Tensor(shifted)).item()
        shifted[idx] = orig - h
        down = fn(Tensor(shifted)).item()
        shifted[idx] = orig
        numeric[idx] = (up - down) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
    return GradReport(float(rel.max()) if rel.size else 0.0, tuple(int(i) for i in worst))


# ── Optimisation ──────────────────────────────────────────────────────────────


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, "np.ndarray | Tensor"],
    lr: float,
    weight_decay: float = 0.0,
) -> dict[str, np.ndarray]:
    """θ ← θ − lr·(g + weight_decay·θ) for every parameter; returns new arrays."""
    if lr <= 0 or weight_decay < 0:
        raise ValueError(f"need lr > 0 and weight_decay >= 0, got {lr}, {weight_decay}")
    updated = {}
    for name, theta in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"sgd_step: parameter '{name}' {theta.shape} vs gradient {g.shape}")
        new = theta - lr * (g + weight_decay * theta)
        new.setflags(write=False)
        updated[name] = new
    return updated
