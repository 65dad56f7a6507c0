import torch
from scipy import linalg

from prob_embedding import level2_gram
from rules_selfcheck.rule import SelfCheckRule, random_domain, random_kernel


class Rule(SelfCheckRule):
    """Level-2 Gram matrices are symmetric positive semidefinite"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(min(self.context.instances, 50)):
            cfg = random_kernel(rng)
            n = int(rng.integers(2, 17))
            domain = [torch.as_tensor(e) for e in random_domain(rng, n, int(rng.integers(1, 5)))]
            with torch.no_grad():
                gram = level2_gram(cfg, torch.stack(domain), torch.stack(domain)).numpy()
            if not (gram == gram.T).all():
                self.error(f"instance {i}: level-2 Gram matrix is not symmetric")
            lowest = float(linalg.eigvalsh(gram)[0])
            self.observe(max(0.0, -lowest) / n, f"instance {i} (min eigenvalue {lowest:.3g})")
