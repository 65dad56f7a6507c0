import torch

from kernel import Estimator, mmd2
from oracles import oracle_mmd2, relative_error
from rules_selfcheck.rule import (
    ERROR_FLOOR,
    SelfCheckRule,
    random_kernel,
    random_points,
    shape,
)


class Rule(SelfCheckRule):
    """Plug-in and unbiased MMD^2 agree with the nested-sum oracle"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(self.context.instances):
            cfg = random_kernel(rng)
            n, d = shape(rng)
            m = int(rng.integers(2, 9))
            X = random_points(rng, n, d)
            Y = random_points(rng, m, d)
            with torch.no_grad():
                biased = float(mmd2(cfg, X, Y, Estimator.BIASED_V_STATISTIC))
                unbiased = float(mmd2(cfg, X, Y, Estimator.UNBIASED_U_STATISTIC))
            self.observe(
                relative_error(biased, oracle_mmd2(cfg, X, Y), ERROR_FLOOR), f"instance {i} (V)"
            )
            self.observe(
                relative_error(unbiased, oracle_mmd2(cfg, X, Y, unbiased=True), ERROR_FLOOR),
                f"instance {i} (U)",
            )
