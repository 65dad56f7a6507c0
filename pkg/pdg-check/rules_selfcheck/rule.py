from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from kernel import KernelConfig
from rulebase import CheckRuleBase, Verbosity
from seeding import numpy_stream

MAX_REPORTED = 5

# unbiased estimates can cross zero, so relative errors use at least this scale
ERROR_FLOOR = 1e-3

# passing errors above this fraction of the tolerance are reported as warnings
NEAR_TOLERANCE = 0.1


@dataclass(frozen=True)
class CheckContext:
    """Settings shared by all checks of one run"""

    seed: int = 0
    instances: int = 200

    def rng(self, *keys) -> np.random.Generator:
        return numpy_stream(self.seed, "selfcheck", *keys)


def random_kernel(rng: np.random.Generator) -> KernelConfig:
    return KernelConfig(
        lambda1=float(rng.uniform(0.25, 4.0)), lambda2=float(rng.uniform(0.25, 4.0))
    )


def random_points(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.normal(size=(n, d))


def random_domain(
    rng: np.random.Generator, n: int, d: int, max_t: int = 6, ragged: bool = False
) -> List[np.ndarray]:
    t = int(rng.integers(1, max_t + 1))
    sizes = rng.integers(1, max_t + 1, size=n) if ragged else [t] * n
    return [rng.normal(size=(int(s), d)) for s in sizes]


def shape(rng: np.random.Generator, max_n: int = 8, max_d: int = 4) -> Tuple[int, int]:
    return int(rng.integers(2, max_n + 1)), int(rng.integers(1, max_d + 1))


class SelfCheckRule(CheckRuleBase):
    """A base class to represent a numerical self-check

    Subclasses implement check() and report every observed error through observe().
    """

    verbosity: Verbosity = Verbosity.NONE
    tolerance: float = 1e-10

    def __init__(self, context: CheckContext):
        super().__init__()
        self.context: CheckContext = context
        self.max_error: float = 0.0
        self.observations: int = 0

    def observe(self, error: float, what: str) -> None:
        self.observations += 1
        if not error <= self.tolerance:
            if self.error_count < MAX_REPORTED:
                self.error(f"{what}: error {error:.3g} exceeds {self.tolerance:.0e}")
            else:
                self.error_count += 1
        elif error > NEAR_TOLERANCE * self.tolerance:
            if self.warning_count < MAX_REPORTED:
                self.warning(f"{what}: error {error:.3g} is close to {self.tolerance:.0e}")
            else:
                self.warning_count += 1
        if error > self.max_error or error != error:
            self.max_error = error
