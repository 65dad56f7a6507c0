import torch

from kernel import KernelConfig
from prob_embedding import global_alignment_loss
from rules_selfcheck.rule import SelfCheckRule, random_domain

SHIFT_THRESHOLD = 1e-6


class Rule(SelfCheckRule):
    """Global alignment is exactly 0 for identical domains and positive after a shift"""

    tolerance = 0.0

    def check(self) -> None:
        rng = self.context.rng(self.name)
        cfg = KernelConfig()
        for i in range(min(self.context.instances, 50)):
            n, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
            base = torch.stack([torch.as_tensor(e) for e in random_domain(rng, n, d)])
            with torch.no_grad():
                aligned = float(
                    global_alignment_loss(cfg, [base, base.clone(), base.clone()], "quadratic")
                )
            self.observe(abs(aligned), f"basis {i} (identical domains)")

            unit = torch.zeros(d, dtype=base.dtype)
            unit[int(rng.integers(0, d))] = 1.0
            with torch.no_grad():
                shifted = float(
                    global_alignment_loss(cfg, [base, base.clone(), base + unit], "quadratic")
                )
            if not shifted > SHIFT_THRESHOLD:
                self.error(f"basis {i}: shifted domain gives alignment loss {shifted:.3g}")
