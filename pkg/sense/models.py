"""
Model construction and evaluation: linear heads, ReLU MLPs and the
capacity-d CNN family (conv 5×5 with 2^(d−1) kernels → 2×2 maxpool → conv
5×5 with 2^d kernels → 2×2 maxpool → 2^(d+4) hidden units → K-way head).

Models are immutable: training produces a new Model through `with_params`.
Batches lead; a single input is treated as a batch of one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from sense.datasets import make_rng
from sense.errors import ArtifactError, ShapeError, SpecError
from sense.tensor import (
    Tape,
    Tensor,
    affine,
    conv2d,
    flatten,
    maxpool2x2,
    relu,
    row_losses,
    softmax_cross_entropy,
    softmax_probs,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SNSM"
CHECKPOINT_VERSION = 1
KERNEL = 5


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    widths: tuple[int, ...] = ()
    capacity: int = 0
    image_size: int = 28
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind in ("linear", "mlp"):
            if len(self.widths) < 2 or min(self.widths) < 1:
                raise SpecError(f"{self.kind} needs at least input and output widths, got {self.widths}")
            if self.kind == "linear" and len(self.widths) != 2:
                raise SpecError(f"linear model takes exactly (in_dim, K), got {self.widths}")
            if self.widths[-1] < 2:
                raise SpecError("a classifier needs at least 2 classes")
        elif self.kind == "cnn":
            if self.capacity < 1:
                raise SpecError(f"CNN capacity must be >= 1, got {self.capacity}")
            if self.num_classes < 2:
                raise SpecError("a classifier needs at least 2 classes")
            if (self.image_size - KERNEL + 1) // 2 - KERNEL + 1 < 2:
                raise SpecError(f"image size {self.image_size} too small for two 5x5 conv stages")
        else:
            raise SpecError(f"unknown model kind '{self.kind}' (linear, mlp, cnn)")

    @classmethod
    def linear(cls, in_dim: int, num_classes: int, seed: int = 0) -> "ModelSpec":
        return cls("linear", widths=(in_dim, num_classes), num_classes=num_classes, seed=seed)

    @classmethod
    def mlp(cls, widths, seed: int = 0) -> "ModelSpec":
        widths = tuple(widths)
        return cls("mlp", widths=widths, num_classes=widths[-1] if widths else 0, seed=seed)

    @classmethod
    def cnn(cls, capacity: int, num_classes: int = 10, seed: int = 0, image_size: int = 28) -> "ModelSpec":
        return cls("cnn", capacity=capacity, num_classes=num_classes, seed=seed, image_size=image_size)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == "cnn":
            return (1, self.image_size, self.image_size)
        return (self.widths[0],)

    @property
    def classes(self) -> int:
        return self.widths[-1] if self.kind != "cnn" else self.num_classes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in declaration (checkpoint) order."""
        if self.kind != "cnn":
            shapes = {}
            for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                shapes[f"fc{i}.weight"] = (fan_out, fan_in)
                shapes[f"fc{i}.bias"] = (fan_out,)
            return shapes
        d = self.capacity
        c1, c2, hidden = 2 ** (d - 1), 2**d, 2 ** (d + 4)
        side = ((self.image_size - KERNEL + 1) // 2 - KERNEL + 1) // 2
        return {
            "conv1.weight": (c1, 1, KERNEL, KERNEL),
            "conv1.bias": (c1,),
            "conv2.weight": (c2, c1, KERNEL, KERNEL),
            "conv2.bias": (c2,),
            "fc1.weight": (hidden, c2 * side * side),
            "fc1.bias": (hidden,),
            "head.weight": (self.num_classes, hidden),
            "head.bias": (self.num_classes,),
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            return cls(**json.loads(text))
        except (TypeError, ValueError) as e:
            raise SpecError(f"unreadable model spec: {e}") from e


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    params: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if list(self.params) != list(expected):
            raise SpecError(f"parameter names {list(self.params)} do not match {list(expected)}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter '{name}' has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.spec, dict(params))

    def content_hash(self) -> str:
        """First 10 hex digits of the md5 of the checkpoint bytes."""
        return hashlib.md5(checkpoint_bytes(self)).hexdigest()[:10]


def build_model(spec: ModelSpec) -> Model:
    """Kaiming-uniform weights (bound √(6/fan_in)), zero biases, seeded by spec.seed."""
    rng = make_rng(spec.seed, "init")
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    model = Model(spec, params)
    log.info(f"  → built {spec.kind} model with {model.num_params} parameters")
    return model


# ── Forward / gradients ───────────────────────────────────────────────────────


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    shape = model.spec.input_shape
    if arr.shape == shape:
        return arr[None], True
    if arr.shape[1:] != shape:
        raise ShapeError(f"input shape {arr.shape} does not match model input {shape}")
    return arr, False


def _forward(spec: ModelSpec, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    if spec.kind == "cnn":
        h = maxpool2x2(relu(conv2d(x, p["conv1.weight"], p["conv1.bias"])))
        h = maxpool2x2(relu(conv2d(h, p["conv2.weight"], p["conv2.bias"])))
        h = relu(affine(flatten(h), p["fc1.weight"], p["fc1.bias"]))
        return affine(h, p["head.weight"], p["head.bias"])
    layers = len(spec.widths) - 1
    h = x
    for i in range(layers):
        h = affine(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i < layers - 1:
            h = relu(h)
    return h


def forward_logits(model: Model, x, tape: Tape | None = None) -> Tensor:
    """Logits for x; shape (K,) for a single input, (n, K) for a batch.

    With a tape, the input and parameters are watched as leaves "x" and
    their parameter names.
    """
    batch, single = _as_batch(model, x)
    if tape is None:
        params = {k: Tensor(v) for k, v in model.params.items()}
        logits = _forward(model.spec, params, Tensor(batch))
    else:
        params = {k: tape.watch(v, k) for k, v in model.params.items()}
        logits = _forward(model.spec, params, tape.watch(batch, "x"))
    return Tensor(logits.data[0]) if single and tape is None else logits


def predict(model: Model, x) -> np.ndarray | int:
    """Argmax of the logits; ties go to the lowest class index."""
    logits = forward_logits(model, x).data
    labels = logits.argmax(axis=-1)
    return int(labels) if logits.ndim == 1 else labels


def probabilities(model: Model, x) -> np.ndarray:
    return softmax_probs(forward_logits(model, x))


def example_losses(model: Model, x, y) -> np.ndarray:
    """Per-row cross-entropy −log p̂_y, without building a tape."""
    batch, _ = _as_batch(model, x)
    logits = _forward(model.spec, {k: Tensor(v) for k, v in model.params.items()}, Tensor(batch))
    return row_losses(logits.data, np.atleast_1d(y))


def loss_and_input_gradient(model: Model, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and ∇_x of their sum (each row's own input gradient)."""
    batch, single = _as_batch(model, x)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    tape = Tape()
    xt = tape.watch(batch, "x")
    params = {k: Tensor(v) for k, v in model.params.items()}
    logits = _forward(model.spec, params, xt)
    losses = row_losses(logits.data, labels)
    grad = tape.backward(softmax_cross_entropy(logits, labels, reduction="sum"))["x"].data
    return losses, (grad[0] if single else grad)


def input_gradient(model: Model, x, y) -> np.ndarray:
    return loss_and_input_gradient(model, x, y)[1]


def loss_and_param_grads(model: Model, x, y, reduction: str = "mean") -> tuple[float, dict[str, np.ndarray]]:
    """Batch cross-entropy ("mean" or "sum") and its gradient for every parameter."""
    batch, _ = _as_batch(model, x)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    tape = Tape()
    params = {k: tape.watch(v, k) for k, v in model.params.items()}
    logits = _forward(model.spec, params, Tensor(batch))
    loss = softmax_cross_entropy(logits, labels, reduction=reduction)
    grads = tape.backward(loss)
    return loss.item(), {k: grads[k].data for k in model.params}


# ── Checkpoints ───────────────────────────────────────────────────────────────


def checkpoint_bytes(model: Model) -> bytes:
    header = model.spec.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params.values()]
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> str:
    """Write the checkpoint and return its content hash."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_bytes(model))
    except OSError as e:
        raise ArtifactError(path, f"cannot write checkpoint: {e}") from e
    return model.content_hash()


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactError(path, f"cannot read checkpoint: {e}") from e
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 12:
        raise ArtifactError(path, "not a checkpoint (bad magic)")
    version, size = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(path, f"unsupported checkpoint version {version}")
    spec = ModelSpec.from_json(raw[12 : 12 + size].decode("utf-8"))
    offset = 12 + size
    params = {}
    for name, shape in spec.param_shapes().items():
        count = int(np.prod(shape))
        if len(raw) < offset + 8 * count:
            raise ArtifactError(path, f"truncated at parameter '{name}'")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ArtifactError(path, f"{len(raw) - offset} trailing bytes")
    return Model(spec, params)
