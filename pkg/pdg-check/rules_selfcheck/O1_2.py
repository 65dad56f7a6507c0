import torch

from oracles import oracle_kme_inner, relative_error
from prob_embedding import ProbEmbedding, kme_inner
from rules_selfcheck.rule import SelfCheckRule, random_kernel, random_points


class Rule(SelfCheckRule):
    """Mean-embedding inner products agree with the nested-sum oracle"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(self.context.instances):
            cfg = random_kernel(rng)
            d = int(rng.integers(1, 5))
            A = random_points(rng, int(rng.integers(1, 7)), d)
            B = random_points(rng, int(rng.integers(1, 7)), d)
            with torch.no_grad():
                fast = float(kme_inner(cfg, ProbEmbedding(torch.as_tensor(A)), B))
            self.observe(relative_error(fast, oracle_kme_inner(cfg, A, B)), f"instance {i}")
