import torch

from oracles import oracle_level2, relative_error
from prob_embedding import level2_kernel
from rules_selfcheck.rule import SelfCheckRule, random_kernel, random_points


class Rule(SelfCheckRule):
    """Level-2 kernel values agree with the nested-sum oracle"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(self.context.instances):
            cfg = random_kernel(rng)
            d = int(rng.integers(1, 5))
            A = random_points(rng, int(rng.integers(1, 7)), d)
            B = random_points(rng, int(rng.integers(1, 7)), d)
            with torch.no_grad():
                fast = float(level2_kernel(cfg, A, B))
            self.observe(relative_error(fast, oracle_level2(cfg, A, B)), f"instance {i}")
            with torch.no_grad():
                same = float(level2_kernel(cfg, A, A))
            self.observe(abs(same - 1.0), f"instance {i} (self)")
