import torch

from oracles import oracle_pmmd2, relative_error
from prob_embedding import ProbEmbedding, pmmd2
from rules_selfcheck.rule import (
    ERROR_FLOOR,
    SelfCheckRule,
    random_domain,
    random_kernel,
    shape,
)


class Rule(SelfCheckRule):
    """Probabilistic MMD^2 agrees with the nested-sum oracle"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(self.context.instances):
            cfg = random_kernel(rng)
            n, d = shape(rng)
            m = int(rng.integers(2, 9))
            # every fourth instance mixes embeddings with different T
            ragged = i % 4 == 3
            Dl = random_domain(rng, n, d, ragged=ragged)
            Dt = random_domain(rng, m, d, ragged=ragged)
            left = [ProbEmbedding(torch.as_tensor(e)) for e in Dl]
            right = [ProbEmbedding(torch.as_tensor(e)) for e in Dt]
            with torch.no_grad():
                biased = float(pmmd2(cfg, left, right))
                unbiased = float(pmmd2(cfg, left, right, unbiased=True))
            self.observe(
                relative_error(biased, oracle_pmmd2(cfg, Dl, Dt), ERROR_FLOOR), f"instance {i} (V)"
            )
            self.observe(
                relative_error(unbiased, oracle_pmmd2(cfg, Dl, Dt, unbiased=True), ERROR_FLOOR),
                f"instance {i} (U)",
            )
