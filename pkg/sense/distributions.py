"""
The three synthetic settings used throughout the analytic checks.

Class indices follow one convention everywhere: 1 is the positive class
(right half for the uniform settings, clusters A and B for Three Clusters),
0 is the negative class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from sense.errors import SpecError


@dataclass(frozen=True)
class UniformHalves:
    """X uniform on (0,1)²; class 1 lives on x₁ > 1/2 and is drawn with probability p."""

    p: float = 0.75

    def __post_init__(self):
        _check_p(self.p)


@dataclass(frozen=True)
class CheeseHoles:
    """UniformHalves restricted to a 3×3 grid of open squares of side alpha.

    Square (i, j) spans ((α/2, 3α/2) + 2α·i) × ((α/2, 3α/2) + 2α·j) for i, j in 0..2.
    """

    p: float = 0.75
    alpha: float = 1 / 6

    def __post_init__(self):
        _check_p(self.p)
        if not 0 < self.alpha <= 1 / 6:
            raise SpecError(f"alpha must lie in (0, 1/6], got {self.alpha}")

    @property
    def hole_starts(self) -> np.ndarray:
        return self.alpha / 2 + 2 * self.alpha * np.arange(3)

    def in_support(self, x) -> np.ndarray:
        """Boolean mask of rows strictly inside one of the nine squares."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lo = self.hole_starts
        inside = [(x[:, k, None] > lo) & (x[:, k, None] < lo + self.alpha) for k in (0, 1)]
        return inside[0].any(axis=1) & inside[1].any(axis=1)

    def in_extended_support(self, x, epsilon: float) -> np.ndarray:
        """Rows within ℓ∞ distance epsilon of the support (closed neighbourhood)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lo = self.hole_starts - epsilon
        hi = self.hole_starts + self.alpha + epsilon
        near = [(x[:, k, None] >= lo) & (x[:, k, None] <= hi) for k in (0, 1)]
        return near[0].any(axis=1) & near[1].any(axis=1)


@dataclass(frozen=True)
class ThreeClusters:
    """Uniform binary label; class 1 is p·N(μ_A, σ²I) + (1−p)·N(μ_B, σ²I), class 0 is N(μ_C, σ²I).

    μ_A = (1, m), μ_B = (1, −m), μ_C = (−1, 0).
    """

    p: float = 0.55
    sigma: float = 0.2
    m: float = 7.0

    def __post_init__(self):
        _check_p(self.p)
        if not self.sigma > 0:
            raise SpecError(f"sigma must be positive, got {self.sigma}")
        if not self.m > 0:
            raise SpecError(f"m must be positive, got {self.m}")

    @property
    def means(self) -> dict[str, np.ndarray]:
        return {
            "A": np.array([1.0, self.m]),
            "B": np.array([1.0, -self.m]),
            "C": np.array([-1.0, 0.0]),
        }


SyntheticDist = Union[UniformHalves, CheeseHoles, ThreeClusters]

SETTINGS = {"ex1": UniformHalves, "ex2": CheeseHoles, "three_clusters": ThreeClusters}


def _check_p(p: float):
    if not 0.5 <= p < 1:
        raise SpecError(f"p must lie in [0.5, 1), got {p}")
