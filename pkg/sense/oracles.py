"""
Closed-form Bayes classifiers and risks for the synthetic settings, and the
brute-force oracles that check them: Monte-Carlo risk estimation, exact
worst cases for linear scores and exhaustive 2-D grid search.

Risks here are 0-1 risks. Class 1 is the positive class; "sign" classifiers
return class indices, not ±1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from sense.attacks import INF
from sense.datasets import sample
from sense.distributions import CheeseHoles, SyntheticDist, ThreeClusters, UniformHalves
from sense.errors import (
    DegenerateModelError,
    InputError,
    SpecError,
    UnsupportedError,
    ValidityError,
)
from sense.models import Model, example_losses, predict, probabilities

log = logging.getLogger(__name__)

Classifier = Callable[[np.ndarray], np.ndarray]
AttackOracle = Callable[[np.ndarray, np.ndarray], np.ndarray]

MC_MIN_SAMPLES = 1000


@dataclass(frozen=True)
class RiskReport:
    setting: str
    p: float
    epsilon: float
    r_std_bayes: float | None = None
    r_rob_bayes: float | None = None
    r_std_frob: float | None = None
    r_rob_frob: float | None = None
    sigma: float | None = None
    m: float | None = None
    extras: dict[str, float] = field(default_factory=dict)
    validity: dict[str, bool] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics().items():
            if not math.isnan(value) and not 0 <= value <= 1:
                raise ValidityError(f"{self.setting}: {name} = {value} lies outside [0, 1]")

    def metrics(self) -> dict[str, float]:
        out = {
            name: getattr(self, name)
            for name in ("r_std_bayes", "r_rob_bayes", "r_std_frob", "r_rob_frob")
            if getattr(self, name) is not None
        }
        out.update(self.extras)
        return out

    def to_frame(self) -> pd.DataFrame:
        """A single wide row: the setting parameters followed by every metric."""
        row = {"setting": self.setting, "p": self.p, "epsilon": self.epsilon, "sigma": self.sigma, "m": self.m}
        row.update(self.metrics())
        return pd.DataFrame([row])


# ── Bayes rules ───────────────────────────────────────────────────────────────


def _log_density(x: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    return -np.sum((x - mean) ** 2, axis=-1) / (2 * sigma**2)


def bayes_classify(dist: SyntheticDist, x):
    """Exact Bayes label; CheeseHoles uses the full-support rule sign(x₁ − 1/2)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != 2:
        raise InputError(f"synthetic settings live in R^2, got points of shape {arr.shape}")
    if isinstance(dist, ThreeClusters):
        mu = dist.means
        positive = np.logaddexp(
            math.log(dist.p) + _log_density(arr, mu["A"], dist.sigma),
            math.log1p(-dist.p) + _log_density(arr, mu["B"], dist.sigma),
        )
        labels = (positive > _log_density(arr, mu["C"], dist.sigma)).astype(np.int64)
    else:
        labels = (arr[:, 0] > 0.5).astype(np.int64)
    return int(labels[0]) if single else labels


def threshold_classifier(t: float) -> Classifier:
    """Class 1 iff x₁ > t."""
    return lambda x: (np.atleast_2d(x)[:, 0] > t).astype(np.int64)


def linear_classifier(w, b: float) -> Classifier:
    w = np.asarray(w, dtype=np.float64)
    return lambda x: (np.atleast_2d(x) @ w + b > 0).astype(np.int64)


def model_classifier(model: Model) -> Classifier:
    return lambda x: np.atleast_1d(predict(model, x))


# ── Closed forms ──────────────────────────────────────────────────────────────


def ex1_risks(p: float, epsilon: float) -> RiskReport:
    """Uniform halves: Bayes rule sign(x₁ − 1/2) against the robust rule sign(x₁ − (1/2 − ε))."""
    if not 0.5 < p < 1:
        raise ValidityError(f"Example 1 needs 0.5 < p < 1, got {p}")
    if not 0 <= epsilon < 0.25:
        raise ValidityError(f"Example 1 closed forms hold for 0 <= epsilon < 1/4, got {epsilon}")
    return RiskReport(
        setting="ex1",
        p=p,
        epsilon=epsilon,
        r_std_bayes=0.0,
        r_rob_bayes=2 * epsilon,
        r_std_frob=2 * (1 - p) * epsilon,
        r_rob_frob=4 * (1 - p) * epsilon,
        extras={"traded_robustness": epsilon * (4 * p - 2)},
        validity={"epsilon_below_quarter": True},
    )


def ex2_risks(p: float, epsilon: float, alpha: float = 1 / 6) -> RiskReport:
    """Worst-case standard risks on the full square of classifiers optimal on the holes.

    The robust branch uses the explicit geometry (everything outside the
    ε-extended holes wrong, plus the ε-wide strip left of x₁ = 1/2 inside the
    middle column). The closed form with an extra factor 2 on that strip is
    reported under `worst_robust_std_formula` and flagged.
    """
    CheeseHoles(p=p, alpha=alpha)
    if epsilon < 0:
        raise ValidityError(f"epsilon must be >= 0, got {epsilon}")
    outside_holes = 1 - 9 * alpha**2
    outside_extended = max(0.0, 1 - 9 * (alpha + 2 * epsilon) ** 2)
    robust_valid = epsilon <= alpha / 4
    if robust_valid:
        strip = 6 * (alpha + 2 * epsilon) * epsilon * (1 - p)
        formula = 3 * min(alpha + 2 * epsilon, 2 * alpha) * (1 - p) * min(2 * epsilon, 0.5) / 0.5
        robust, robust_formula = outside_extended + strip, min(1.0, outside_extended + formula)
    else:
        robust = robust_formula = float("nan")
    return RiskReport(
        setting="ex2",
        p=p,
        epsilon=epsilon,
        r_std_bayes=0.0,
        r_std_frob=robust,
        extras={
            "worst_bayes_std": outside_holes,
            "worst_sensible_std": outside_extended,
            "worst_robust_std": robust,
            "worst_robust_std_formula": robust_formula,
        },
        validity={"robust_branch": robust_valid},
        flags={"worst_robust_std_formula": "closed form disagrees with the explicit geometry; oracle-verified value is worst_robust_std"},
    )


def ignore_bottom_boundary(p: float, sigma: float, m: float) -> tuple[np.ndarray, float]:
    """(w, b) of the line x₂ = −2x₁/m + m/2 − σ² log p / m; class 1 above it."""
    return np.array([2.0 / m, 1.0]), -m / 2 + sigma**2 * math.log(p) / m


def linear_risk(dist: ThreeClusters, w, b: float, epsilon: float = 0.0) -> float:
    """Exact (ℓ2-robust) 0-1 risk of the linear rule w·x + b > 0 on Three Clusters."""
    w = np.asarray(w, dtype=np.float64)
    size = float(np.linalg.norm(w))
    if size == 0:
        raise DegenerateModelError("linear risk needs w != 0")
    mu = dist.means

    def miss(mean: np.ndarray, positive: bool) -> float:
        margin = (float(w @ mean) + b) / size
        margin = margin if positive else -margin
        return float(ndtr((epsilon - margin) / dist.sigma))

    return 0.5 * (dist.p * miss(mu["A"], True) + (1 - dist.p) * miss(mu["B"], True)) + 0.5 * miss(mu["C"], False)


def three_clusters_risks(
    p: float, sigma: float, gamma: float, m: float = 7.0, verify_n: int | None = None, seed: int = 0
) -> RiskReport:
    """Risks of f_std = sign(x₁) and of the ignore-the-bottom-cluster line, at ε = γσ.

    The σ-in-the-exponent variants are kept as flagged extras. With
    `verify_n`, every closed form is checked against mc_risk and a
    disagreement beyond four standard errors raises ValidityError.
    """
    if gamma < 0:
        raise ValidityError(f"gamma must be >= 0, got {gamma}")
    dist = ThreeClusters(p=p, sigma=sigma, m=m)
    epsilon = gamma * sigma
    w, b = ignore_bottom_boundary(p, sigma, m)
    report = RiskReport(
        setting="three_clusters",
        p=p,
        epsilon=epsilon,
        sigma=sigma,
        m=m,
        extras={
            "r_std_fstd": float(ndtr(-1 / sigma)),
            "r_rob_fstd": float(ndtr(gamma - 1 / sigma)),
            "r_std_fstd_formula": float(ndtr(-1 / sigma**2)),
            "r_rob_fstd_formula": float(ndtr(gamma - 1 / sigma**2)),
            "r_std_ignore_bottom": linear_risk(dist, w, b),
            "r_rob_ignore_bottom": linear_risk(dist, w, b, epsilon),
        },
        flags={
            "r_std_fstd_formula": "sigma-squared exponent contradicts the Monte-Carlo oracle",
            "r_rob_fstd_formula": "sigma-squared exponent contradicts the Monte-Carlo oracle",
        },
    )
    if verify_n is not None:
        table = verify_report(report, verify_n, seed)
        checked = table[table["flag"] == ""]
        gap = (checked["closed_form"] - checked["mc_estimate"]).abs()
        band = 4 * np.sqrt(np.maximum(checked["closed_form"] * (1 - checked["closed_form"]), 1 / verify_n) / verify_n)
        if bool((gap > band).any()):
            raise ValidityError(f"closed forms disagree with Monte-Carlo:\n{checked[gap > band]}")
    return report


def closed_form_risks(
    setting: str, p: float, epsilon: float, alpha: float, sigma: float, gamma: float, m: float
) -> RiskReport:
    if setting == "ex1":
        return ex1_risks(p, epsilon)
    if setting == "ex2":
        return ex2_risks(p, epsilon, alpha)
    if setting == "three_clusters":
        return three_clusters_risks(p, sigma, gamma, m)
    raise SpecError(f"unknown analytic setting '{setting}' (ex1, ex2, three_clusters)")


# ── Monte-Carlo ───────────────────────────────────────────────────────────────


class MonteCarloRisk(NamedTuple):
    estimate: float
    std_error: float


def mc_risk(
    dist: SyntheticDist,
    classifier: Classifier | Model,
    attack: AttackOracle | None = None,
    n: int = 10**6,
    seed: int = 0,
) -> MonteCarloRisk:
    """Error frequency of `classifier` on n fresh draws, after `attack` when given."""
    if n < MC_MIN_SAMPLES:
        raise InputError(f"Monte-Carlo estimates need n >= {MC_MIN_SAMPLES}, got {n}")
    if isinstance(classifier, Model):
        classifier = model_classifier(classifier)
    data = sample(dist, n, seed)
    x = data.inputs if attack is None else attack(data.inputs, data.labels)
    wrong = np.asarray(classifier(x)) != data.labels
    r = float(wrong.mean())
    return MonteCarloRisk(r, math.sqrt(r * (1 - r) / n))


def shift_attack(epsilon: float) -> AttackOracle:
    """Moves x₁ by ε towards the other class: the exact worst case (ℓ2 or ℓ∞)
    for any rule that is monotone in x₁."""

    def attack(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64)
        out[:, 0] += np.where(y == 1, -epsilon, epsilon)
        return out

    return attack


def cheese_classifiers(dist: CheeseHoles, epsilon: float) -> dict[str, Classifier]:
    """Worst members of the three optimal classes on the holes, as explicit rules on (0,1)².

    worst_bayes: right on the holes, wrong elsewhere.
    worst_sensible: right on the ε-extended holes, wrong elsewhere.
    worst_robust: sign(x₁ − 1/2 + ε) on the ε-extended holes, wrong elsewhere.
    """

    def bayes(x):
        return (np.atleast_2d(x)[:, 0] > 0.5).astype(np.int64)

    def worst_bayes(x):
        return np.where(dist.in_support(x), bayes(x), 1 - bayes(x))

    def worst_sensible(x):
        return np.where(dist.in_extended_support(x, epsilon), bayes(x), 1 - bayes(x))

    def worst_robust(x):
        shifted = (np.atleast_2d(x)[:, 0] > 0.5 - epsilon).astype(np.int64)
        return np.where(dist.in_extended_support(x, epsilon), shifted, 1 - bayes(x))

    return {"worst_bayes": worst_bayes, "worst_sensible": worst_sensible, "worst_robust": worst_robust}


def verify_report(report: RiskReport, n: int = 10**6, seed: int = 0) -> pd.DataFrame:
    """One row per metric: closed form next to its Monte-Carlo estimate."""
    eps, p = report.epsilon, report.p
    jobs: dict[str, tuple[SyntheticDist, Classifier, AttackOracle | None]] = {}
    if report.setting == "ex1":
        dist = UniformHalves(p)
        bayes, robust = threshold_classifier(0.5), threshold_classifier(0.5 - eps)
        jobs = {
            "r_std_bayes": (dist, bayes, None),
            "r_rob_bayes": (dist, bayes, shift_attack(eps)),
            "r_std_frob": (dist, robust, None),
            "r_rob_frob": (dist, robust, shift_attack(eps)),
        }
    elif report.setting == "ex2":
        full = UniformHalves(p)
        rules = cheese_classifiers(CheeseHoles(p), eps)
        jobs = {
            "r_std_bayes": (full, threshold_classifier(0.5), None),
            "worst_bayes_std": (full, rules["worst_bayes"], None),
            "worst_sensible_std": (full, rules["worst_sensible"], None),
        }
        if report.validity.get("robust_branch"):
            jobs["r_std_frob"] = (full, rules["worst_robust"], None)
            jobs["worst_robust_std"] = (full, rules["worst_robust"], None)
            jobs["worst_robust_std_formula"] = (full, rules["worst_robust"], None)
    elif report.setting == "three_clusters":
        dist = ThreeClusters(p, report.sigma, report.m)
        w, b = ignore_bottom_boundary(p, report.sigma, report.m)
        fstd = threshold_classifier(0.0)
        line = linear_classifier(w, b)

        def line_attack(x, y):
            return linear_worst_case(w, b, x, 2 * y - 1, eps, 2.0)

        jobs = {
            "r_std_fstd": (dist, fstd, None),
            "r_rob_fstd": (dist, fstd, shift_attack(eps)),
            "r_std_fstd_formula": (dist, fstd, None),
            "r_rob_fstd_formula": (dist, fstd, shift_attack(eps)),
            "r_std_ignore_bottom": (dist, line, None),
            "r_rob_ignore_bottom": (dist, line, line_attack),
            "r_std_bayes_mc": (dist, lambda x: bayes_classify(dist, x), None),
        }
    else:
        raise SpecError(f"unknown setting '{report.setting}'")

    metrics = report.metrics()
    rows = []
    for k, (metric, (dist, rule, attack)) in enumerate(jobs.items()):
        est = mc_risk(dist, rule, attack, n=n, seed=seed + k)
        rows.append(
            {
                "setting": report.setting,
                "p": p,
                "sigma": report.sigma,
                "m": report.m,
                "epsilon": eps,
                "metric": metric,
                "closed_form": metrics.get(metric, float("nan")),
                "mc_estimate": est.estimate,
                "mc_stderr": est.std_error,
                "flag": report.flags.get(metric, ""),
            }
        )
    return pd.DataFrame(rows)


# ── Exact and brute-force inner maximisers ───────────────────────────────────


def _dual(norm: float) -> float:
    if norm == INF:
        return 1.0
    if norm == 1:
        return INF
    return norm / (norm - 1)


def linear_worst_case(w, b: float, x, y, epsilon: float, norm: float = 2.0) -> np.ndarray:
    """Point in the ε-ball minimising the signed margin y·(w·x + b), y in {−1, +1}.

    The margin drops by exactly ε‖w‖ in the dual norm.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        raise DegenerateModelError("linear worst case is undefined for w == 0")
    x = np.asarray(x, dtype=np.float64)
    sign = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(sign) != 1):
        raise InputError("linear_worst_case takes labels in {-1, +1}")
    if norm == INF:
        direction = np.sign(w)
    elif norm == 1:
        direction = np.zeros_like(w)
        k = int(np.argmax(np.abs(w)))
        direction[k] = np.sign(w[k])
    else:
        q = _dual(norm)
        direction = np.sign(w) * np.abs(w) ** (q - 1) / np.linalg.norm(w, ord=q) ** (q - 1)
    return x - epsilon * np.multiply.outer(sign, direction) if x.ndim > 1 else x - epsilon * sign * direction


def linear_margin_params(model: Model) -> tuple[np.ndarray, float]:
    """(w, b) with logit gap z₁ − z₀ = w·x + b for a two-class linear model."""
    if model.spec.kind != "linear" or model.spec.classes != 2:
        raise UnsupportedError("margin parameters need a two-class linear model")
    W, bias = model.params["fc0.weight"], model.params["fc0.bias"]
    return W[1] - W[0], float(bias[1] - bias[0])


def _grid_points(model: Model, x, epsilon: float, resolution: int, norm: float, clip_domain) -> np.ndarray:
    if model.spec.input_shape != (2,):
        raise UnsupportedError(f"grid search needs 2-D inputs, model takes {model.spec.input_shape}")
    if resolution < 11:
        raise SpecError(f"resolution must be >= 11, got {resolution}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise UnsupportedError(f"grid search takes one 2-D point, got shape {x.shape}")
    axis = np.linspace(-epsilon, epsilon, resolution)
    offsets = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    if norm != INF:
        offsets = offsets[np.linalg.norm(offsets, ord=norm, axis=1) <= epsilon + 1e-12]
    points = x + offsets
    if clip_domain is not None:
        points = np.clip(points, *clip_domain)
    return points


def grid_worst_case(
    model: Model, x, y: int, epsilon: float, resolution: int = 401, norm: float = INF, clip_domain=None
) -> tuple[np.ndarray, float]:
    """Exhaustive search of the ε-ball on a resolution × resolution grid."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        _grid_points(model, x, 0.0, resolution, norm, clip_domain)
        return x.copy(), float(example_losses(model, x[None], [y])[0])
    points = _grid_points(model, x, epsilon, resolution, norm, clip_domain)
    losses = example_losses(model, points, np.full(points.shape[0], y))
    best = int(np.argmax(losses))
    return points[best], float(losses[best])


def grid_sensible_loss(
    model: Model, x, y: int, epsilon: float, c: float, resolution: int = 401, norm: float = INF, clip_domain=None
) -> tuple[np.ndarray, float]:
    """Largest loss over {x} ∪ {z in the grid ball : p̂_y(z) > c}; x itself when misclassified."""
    x = np.asarray(x, dtype=np.float64)
    points = _grid_points(model, x, epsilon, resolution, norm, clip_domain)
    own = float(example_losses(model, x[None], [y])[0])
    if predict(model, x) != y:
        return x.copy(), own
    probs = probabilities(model, points)[:, y]
    allowed = points[probs > c]
    if allowed.shape[0] == 0:
        return x.copy(), own
    losses = example_losses(model, allowed, np.full(allowed.shape[0], y))
    best = int(np.argmax(losses))
    if losses[best] <= own:
        return x.copy(), own
    return allowed[best], float(losses[best])


# ── Desk checks on threshold classifiers ─────────────────────────────────────


def _reach(x1: np.ndarray, y: np.ndarray, epsilon: float, grid: int, sensible: bool) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest x₁ reachable inside the ball and the open unit interval.

    With `sensible`, moves are limited to points the Bayes rule still labels y;
    the unperturbed point is always reachable.
    """
    delta = np.linspace(-epsilon, epsilon, grid)
    z = x1[:, None] + delta[None, :]
    allowed = (z > 0) & (z < 1)
    if sensible:
        allowed &= (z > 0.5).astype(np.int64) == y[:, None]
    allowed |= delta[None, :] == 0
    zmin = np.where(allowed, z, np.inf).min(axis=1)
    zmax = np.where(allowed, z, -np.inf).max(axis=1)
    return zmin, zmax


def threshold_errors(x1, y, thresholds, epsilon: float, grid: int = 201, sensible: bool = False) -> np.ndarray:
    """(len(thresholds), n) worst-case 0-1 errors of the rules x₁ > t."""
    x1 = np.asarray(x1, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    zmin, zmax = _reach(x1, y, epsilon, grid, sensible)
    t = np.asarray(thresholds, dtype=np.float64)[:, None]
    return np.where(y == 1, zmin <= t, zmax > t)


def threshold_std_risk(p: float, t) -> np.ndarray:
    """Standard risk of x₁ > t under uniform halves."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t < 0.5, 2 * (1 - p) * (0.5 - t), 2 * p * (t - 0.5))


class MinimizerCheck(NamedTuple):
    thresholds: np.ndarray
    risks: np.ndarray
    minimizers: np.ndarray
    holds: bool


def sensible_minimizer_check(
    p: float = 0.75, epsilon: float = 0.1, n: int = 20000, seed: int = 0, count: int = 201
) -> MinimizerCheck:
    """Empirical sensible robust risk over `count` vertical thresholds on [0, 1];
    holds when 0.5 is its unique minimiser."""
    data = sample(UniformHalves(p), n, seed)
    thresholds = np.linspace(0.0, 1.0, count)
    risks = threshold_errors(data.inputs[:, 0], data.labels, thresholds, epsilon, sensible=True).mean(axis=1)
    minimizers = thresholds[risks == risks.min()]
    holds = minimizers.shape[0] == 1 and bool(np.isclose(minimizers[0], 0.5))
    return MinimizerCheck(thresholds, risks, minimizers, holds)


class DominanceCheck(NamedTuple):
    bayes_errors: np.ndarray
    robust_errors: np.ndarray
    holds: bool


def bayes_dominance_check(p: float = 0.75, epsilon: float = 0.1, n: int = 10**4, seed: int = 0) -> DominanceCheck:
    """Away from the ε-band around x₁ = 1/2 the Bayes rule's worst-case error never
    exceeds that of the robust rule x₁ > 1/2 − ε."""
    data = sample(UniformHalves(p), n, seed)
    keep = np.abs(data.inputs[:, 0] - 0.5) > epsilon
    x1, y = data.inputs[keep, 0], data.labels[keep]
    errors = threshold_errors(x1, y, [0.5, 0.5 - epsilon], epsilon)
    return DominanceCheck(errors[0], errors[1], bool(np.all(errors[0] <= errors[1])))


class CorollaryCheck(NamedTuple):
    sensible_minimizers: np.ndarray
    bayes_set: np.ndarray
    worst_minimizer_risk: float
    worst_bayes_set_risk: float
    holds: bool


def restricted_support_check(
    p: float = 0.75, epsilon: float = 0.05, n: int = 10**4, seed: int = 0, count: int = 201
) -> CorollaryCheck:
    """Thresholds fitted on hole-restricted samples: every minimiser of the empirical
    sensible risk has full-square standard risk no worse than the worst rule with
    zero empirical standard risk."""
    data = sample(CheeseHoles(p), n, seed)
    thresholds = np.linspace(0.0, 1.0, count)
    x1, y = data.inputs[:, 0], data.labels
    sensible = threshold_errors(x1, y, thresholds, epsilon, sensible=True).mean(axis=1)
    natural = threshold_errors(x1, y, thresholds, 0.0).mean(axis=1)
    minimizers = thresholds[sensible == sensible.min()]
    bayes_set = thresholds[natural == natural.min()]
    worst_min = float(threshold_std_risk(p, minimizers).max())
    worst_bayes = float(threshold_std_risk(p, bayes_set).max())
    return CorollaryCheck(minimizers, bayes_set, worst_min, worst_bayes, worst_min <= worst_bayes)
