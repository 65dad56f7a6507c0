import torch
from scipy import linalg

from kernel import gram_matrix
from rules_selfcheck.rule import SelfCheckRule, random_kernel, random_points


class Rule(SelfCheckRule):
    """Level-1 Gram matrices are symmetric positive semidefinite"""

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(min(self.context.instances, 50)):
            cfg = random_kernel(rng)
            n = int(rng.integers(2, 33))
            X = random_points(rng, n, int(rng.integers(1, 5)))
            with torch.no_grad():
                gram = gram_matrix(cfg, X, X).numpy()
            if not (gram == gram.T).all():
                self.error(f"instance {i}: Gram matrix is not symmetric")
            lowest = float(linalg.eigvalsh(gram)[0])
            # eigenvalues may dip below 0 by rounding only
            self.observe(max(0.0, -lowest) / n, f"instance {i} (min eigenvalue {lowest:.3g})")
