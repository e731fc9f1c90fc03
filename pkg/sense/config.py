"""
Run configuration.

A config file is a dotenv-format list of `key = value` lines whose dotted
prefixes act as sections (`attack.epsilon = 0.3`, `sense.c = 0.7`). Command
line `--key value` pairs are applied on top, either as full dotted keys or
as one of the short aliases. Every value is validated while the config is
built; errors carry the dotted key of the offending field.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

from dotenv import dotenv_values

from sense.attacks import INF, AttackSpec
from sense.datasets import mnist_paths
from sense.distributions import SETTINGS, SyntheticDist, ThreeClusters
from sense.errors import ConfigError, SenseError
from sense.models import ModelSpec
from sense.oracles import closed_form_risks
from sense.trainer import REVERSION_MODES, SenseSpec, TrainSpec

log = logging.getLogger(__name__)

COMMANDS = ("train", "attack", "eval", "analytic", "synthetic", "convcheck")
METHODS = ("sense", "rat", "nat")
SOURCES = ("mnist", "ex1", "ex2", "three_clusters")
NEEDS_CHECKPOINT = ("attack", "eval", "convcheck")


# ── Field converters ──────────────────────────────────────────────────────────


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not a valid value")
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _norm(text: str) -> float:
    lowered = text.strip().lower()
    if lowered in ("inf", "linf", "infinity"):
        return INF
    return float(lowered.lstrip("l"))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip() == "" else _float(text)


def _choice(options: tuple[str, ...]) -> Callable[[str], str]:
    def convert(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got '{text}'")
        return text

    return convert


def _text(text: str) -> str:
    return text.strip()


# Every accepted key with its converter and default. An empty default means
# "derived from the other fields".
FIELDS: dict[str, tuple[Callable[[str], object], str]] = {
    "seed": (_int, "0"),
    "out": (_text, "runs/latest"),
    "method": (_choice(METHODS), "sense"),
    "checkpoint": (_text, ""),
    "transfer.checkpoint": (_text, ""),
    "data.source": (_choice(SOURCES), "mnist"),
    "data.dir": (_text, ""),
    "data.n": (_int, "10000"),
    "data.test_n": (_int, "10000"),
    "data.p": (_optional_float, ""),
    "data.sigma": (_optional_float, ""),
    "data.m": (_optional_float, ""),
    "model.kind": (_text, ""),
    "model.capacity": (_int, "2"),
    "model.hidden": (_ints, "32"),
    "attack.norm": (_norm, "inf"),
    "attack.epsilon": (_float, "0.3"),
    "attack.step_size": (_float, "0.05"),
    "attack.steps": (_int, "10"),
    "attack.random_start": (_bool, "false"),
    "eval.kind": (_choice(("pgd", "fgsm")), "pgd"),
    "eval.norm": (_norm, "inf"),
    "eval.epsilon": (_float, "0.3"),
    "eval.step_size": (_float, "0.01"),
    "eval.steps": (_int, "500"),
    "eval.restarts": (_int, "5"),
    "eval.random_start": (_bool, "true"),
    "eval.c": (_optional_float, ""),
    "eval.chunk": (_int, "1000"),
    "sense.c": (_float, "0.7"),
    "sense.warmup_epochs": (_int, "5"),
    "sense.reversion": (_choice(REVERSION_MODES), "break"),
    "train.epochs": (_int, "20"),
    "train.batch_size": (_int, "128"),
    "train.lr": (_float, "0.01"),
    "train.lr_decay_steps": (_ints, "80,140,170"),
    "train.lr_decay_factor": (_float, "0.1"),
    "train.weight_decay": (_float, "2e-4"),
    "train.pretrain_epochs": (_int, "0"),
    "train.monitor_size": (_int, "1000"),
    "train.monitor_c": (_float, "0.5"),
    "analytic.setting": (_choice(tuple(SETTINGS)), "ex1"),
    "analytic.p": (_optional_float, ""),
    "analytic.epsilon": (_float, "0.1"),
    "analytic.alpha": (_float, str(1 / 6)),
    "analytic.sigma": (_float, "0.2"),
    "analytic.gamma": (_float, "8"),
    "analytic.m": (_float, "7"),
    "analytic.verify_n": (_int, "0"),
    "analytic.checks": (_bool, "false"),
    "synthetic.p": (_float, "0.55"),
    "synthetic.sigma": (_float, "0.2"),
    "synthetic.m": (_float, "7"),
    "synthetic.n": (_int, "1000"),
    "synthetic.gamma": (_float, "8"),
    "synthetic.c": (_float, "0.9"),
    "synthetic.lr": (_float, "0.01"),
    "synthetic.iterations": (_int, "300"),
    "synthetic.sample_n": (_int, "1000"),
    "convcheck.examples": (_int, "100"),
}

ALIASES = {
    "c": "sense.c",
    "eps": "eval.epsilon",
    "steps": "eval.steps",
    "restarts": "eval.restarts",
    "source": "data.source",
    "setting": "analytic.setting",
    "p": "analytic.p",
    "sigma": "analytic.sigma",
    "gamma": "analytic.gamma",
}

COMMAND_ALIASES = {
    "train": {"eps": "attack.epsilon", "steps": "attack.steps", "epochs": "train.epochs"},
    "analytic": {"eps": "analytic.epsilon"},
    "synthetic": {"c": "synthetic.c", "p": "synthetic.p", "sigma": "synthetic.sigma", "gamma": "synthetic.gamma"},
}


def resolve_key(key: str, command: str) -> str:
    key = key.replace("-", "_")
    key = COMMAND_ALIASES.get(command, {}).get(key) or ALIASES.get(key) or key
    if key not in FIELDS:
        raise ConfigError(key, "unknown configuration key")
    return key


# ── Typed config ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DataSpec:
    source: str
    n: int
    test_n: int
    directory: Path | None
    dist: SyntheticDist | None

    @property
    def num_classes(self) -> int:
        return 10 if self.source == "mnist" else 2

    @property
    def clip_domain(self) -> tuple[float, float] | None:
        return (0.0, 1.0) if self.source == "mnist" else None


@dataclass(frozen=True)
class AnalyticSpec:
    setting: str
    p: float
    epsilon: float
    alpha: float
    sigma: float
    gamma: float
    m: float
    verify_n: int
    checks: bool


@dataclass(frozen=True)
class ExperimentSpec:
    p: float
    sigma: float
    m: float
    n: int
    gamma: float
    c: float
    lr: float
    iterations: int
    sample_n: int


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out_dir: Path
    method: str
    data: DataSpec
    model: ModelSpec
    attack: AttackSpec
    eval_attack: AttackSpec
    eval_c: float | None
    eval_chunk: int
    sense: SenseSpec
    train: TrainSpec
    analytic: AnalyticSpec
    experiment: ExperimentSpec
    checkpoint: Path | None
    transfer_checkpoint: Path | None
    convcheck_examples: int
    values: dict[str, str]

    @property
    def config_hash(self) -> str:
        canonical = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values) if k != "out")
        return hashlib.md5(canonical.encode("utf-8")).hexdigest()[:10]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("command", message)


def _arg_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sense-forge", description="Sensible adversarial training experiments", allow_abbrev=False
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", help="run seed (non-negative integer)")
    parser.add_argument("--out", help="output directory")
    return parser


def parse_overrides(tokens: list[str], command: str) -> dict[str, str]:
    """`--key value` / `--key=value` pairs to resolved dotted keys."""
    out = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(token, "expected --key value")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(key, "missing value")
            i += 1
            value = tokens[i]
        out[resolve_key(key, command)] = value
        i += 1
    return out


def read_config_file(path, command: str) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(key, "missing '= value'")
        values[resolve_key(key, command)] = value
    return values


def parse_args(argv: list[str]) -> RunConfig:
    args, extra = _arg_parser().parse_known_args(argv)
    values = read_config_file(args.config, args.command) if args.config else {}
    overrides = parse_overrides(extra, args.command)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    values.update(overrides)
    return build_config(args.command, values)


def build_config(command: str, values: dict[str, str]) -> RunConfig:
    """Validate raw strings over the defaults and assemble every spec."""
    if command not in COMMANDS:
        raise ConfigError("command", f"expected one of {', '.join(COMMANDS)}, got '{command}'")
    raw = {key: default for key, (_, default) in FIELDS.items()}
    raw.update({key: str(value) for key, value in values.items()})

    v = {}
    for key, text in raw.items():
        convert, _ = FIELDS[key]
        try:
            v[key] = convert(text)
        except ValueError as e:
            raise ConfigError(key, str(e)) from e

    if v["seed"] < 0:
        raise ConfigError("seed", f"must be non-negative, got {v['seed']}")
    for key in ("data.n", "data.test_n", "eval.chunk", "convcheck.examples", "synthetic.sample_n"):
        if v[key] < 1:
            raise ConfigError(key, f"must be >= 1, got {v[key]}")

    data = _data_spec(v)
    model = _model_spec(v, data)
    clip = data.clip_domain
    attack = _section(
        "attack",
        lambda: AttackSpec(
            norm=v["attack.norm"],
            epsilon=v["attack.epsilon"],
            step_size=v["attack.step_size"],
            steps=v["attack.steps"],
            random_start=v["attack.random_start"],
            clip_domain=clip,
        ),
    )
    eval_attack = _section(
        "eval",
        lambda: AttackSpec(
            norm=v["eval.norm"],
            epsilon=v["eval.epsilon"],
            step_size=v["eval.step_size"],
            steps=v["eval.steps"],
            restarts=v["eval.restarts"],
            random_start=v["eval.random_start"],
            clip_domain=clip,
            kind=v["eval.kind"],
        ),
    )
    if v["eval.c"] is not None and not 0 < v["eval.c"] <= 1:
        raise ConfigError("eval.c", f"must lie in (0, 1], got {v['eval.c']}")
    sense = _section(
        "sense",
        lambda: SenseSpec(c=v["sense.c"], attack=attack, warmup_epochs=v["sense.warmup_epochs"], reversion=v["sense.reversion"]),
    )
    train = _section(
        "train",
        lambda: TrainSpec(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            lr=v["train.lr"],
            lr_decay_steps=v["train.lr_decay_steps"],
            lr_decay_factor=v["train.lr_decay_factor"],
            weight_decay=v["train.weight_decay"],
            seed=v["seed"],
            pretrain_epochs=v["train.pretrain_epochs"],
            monitor_size=v["train.monitor_size"],
            monitor_c=v["train.monitor_c"],
        ),
    )
    analytic = _analytic_spec(v)
    experiment = _experiment_spec(v)
    if command == "analytic":
        a = analytic
        _section("analytic", lambda: closed_form_risks(a.setting, a.p, a.epsilon, a.alpha, a.sigma, a.gamma, a.m))
    if command == "synthetic":
        e = experiment
        if e.gamma < 0:
            raise ConfigError("synthetic.gamma", f"must be >= 0, got {e.gamma}")
        _section("synthetic", lambda: ThreeClusters(p=e.p, sigma=e.sigma, m=e.m))

    checkpoint = Path(v["checkpoint"]) if v["checkpoint"] else None
    transfer = Path(v["transfer.checkpoint"]) if v["transfer.checkpoint"] else None
    if command in NEEDS_CHECKPOINT and checkpoint is None:
        raise ConfigError("checkpoint", f"'{command}' needs a trained model checkpoint")
    for key, path in (("checkpoint", checkpoint), ("transfer.checkpoint", transfer)):
        if path is not None and not path.is_file():
            raise ConfigError(key, f"file not found: {path}")
    if data.source == "mnist" and command in ("train", *NEEDS_CHECKPOINT):
        split = "train" if command == "train" else "test"
        for path in mnist_paths(split, data.directory):
            if not path.is_file():
                raise ConfigError("data.dir", f"MNIST file not found: {path}")

    return RunConfig(
        command=command,
        seed=v["seed"],
        out_dir=Path(v["out"]),
        method=v["method"],
        data=data,
        model=model,
        attack=attack,
        eval_attack=eval_attack,
        eval_c=v["eval.c"],
        eval_chunk=v["eval.chunk"],
        sense=sense,
        train=train,
        analytic=analytic,
        experiment=experiment,
        checkpoint=checkpoint,
        transfer_checkpoint=transfer,
        convcheck_examples=v["convcheck.examples"],
        values=raw,
    )


def _section(name: str, build: Callable[[], object]):
    try:
        return build()
    except SenseError as e:
        raise ConfigError(name, str(e)) from e


def _data_spec(v: dict) -> DataSpec:
    source = v["data.source"]
    dist = None
    if source != "mnist":
        given = {name: v[f"data.{name}"] for name in ("p", "sigma", "m") if v[f"data.{name}"] is not None}
        if source != "three_clusters" and set(given) - {"p"}:
            raise ConfigError("data", f"'{source}' takes only data.p")
        dist = _section("data", lambda: SETTINGS[source](**given))
    directory = Path(v["data.dir"]) if v["data.dir"] else None
    return DataSpec(source, v["data.n"], v["data.test_n"], directory, dist)


def _model_spec(v: dict, data: DataSpec) -> ModelSpec:
    kind = v["model.kind"] or ("cnn" if data.source == "mnist" else "mlp")
    if kind == "cnn" and data.source != "mnist":
        raise ConfigError("model.kind", "the CNN family needs image data (data.source = mnist)")
    if kind != "cnn" and data.source == "mnist":
        raise ConfigError("model.kind", "MNIST runs use the CNN family")
    seed = v["seed"]
    if kind == "cnn":
        return _section("model", lambda: ModelSpec.cnn(v["model.capacity"], data.num_classes, seed=seed))
    if kind == "linear":
        return _section("model", lambda: ModelSpec.linear(2, data.num_classes, seed=seed))
    if kind == "mlp":
        widths = (2, *v["model.hidden"], data.num_classes)
        return _section("model", lambda: ModelSpec.mlp(widths, seed=seed))
    raise ConfigError("model.kind", f"expected one of cnn, mlp, linear, got '{kind}'")


def _analytic_spec(v: dict) -> AnalyticSpec:
    setting = v["analytic.setting"]
    p = v["analytic.p"]
    if p is None:
        p = 0.55 if setting == "three_clusters" else 0.75
    if v["analytic.verify_n"] < 0:
        raise ConfigError("analytic.verify_n", "must be >= 0 (0 skips the Monte-Carlo check)")
    return AnalyticSpec(
        setting=setting,
        p=p,
        epsilon=v["analytic.epsilon"],
        alpha=v["analytic.alpha"],
        sigma=v["analytic.sigma"],
        gamma=v["analytic.gamma"],
        m=v["analytic.m"],
        verify_n=v["analytic.verify_n"],
        checks=v["analytic.checks"],
    )


def _experiment_spec(v: dict) -> ExperimentSpec:
    spec = ExperimentSpec(**{name: v[f"synthetic.{name}"] for name in (f.name for f in fields(ExperimentSpec))})
    if spec.n < 2 or spec.iterations < 1:
        raise ConfigError("synthetic", "need n >= 2 and iterations >= 1")
    if not 0 <= spec.c <= 1:
        raise ConfigError("synthetic.c", f"must lie in [0, 1], got {spec.c}")
    if not spec.lr > 0:
        raise ConfigError("synthetic.lr", f"must be positive, got {spec.lr}")
    return spec
