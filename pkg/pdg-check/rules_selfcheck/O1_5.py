import torch

from bayes_net import BayesAffineLayer, gaussian_kl, moped_init
from kernel import DTYPE
from oracles import oracle_kl_gaussian
from rules_selfcheck.rule import SelfCheckRule


class Rule(SelfCheckRule):
    """Closed-form Gaussian KL matches quadrature; MOPED layers start at KL = 0"""

    tolerance = 1e-6

    def check(self) -> None:
        rng = self.context.rng(self.name)
        for i in range(min(self.context.instances, 100)):
            mu_q, mu_p = rng.uniform(-2.0, 2.0, size=2)
            sigma_q, sigma_p = rng.uniform(0.2, 3.0, size=2)
            closed = float(
                gaussian_kl(*(torch.tensor(v, dtype=DTYPE) for v in (mu_q, sigma_q, mu_p, sigma_p)))
            )
            reference = oracle_kl_gaussian(float(mu_q), float(sigma_q), float(mu_p), float(sigma_p))
            self.observe(abs(closed - reference), f"tuple {i}")

        for fan_in, fan_out in ((1, 1), (4, 3), (8, 5)):
            layer = BayesAffineLayer(fan_in, fan_out)
            weight = torch.as_tensor(rng.normal(size=(fan_in, fan_out)))
            weight[0, 0] = 0.0
            moped_init(layer, (weight, torch.as_tensor(rng.normal(size=fan_out))))
            kl = float(layer.kl_to_prior().detach())
            if kl != 0.0:
                self.error(f"MOPED {fan_in}x{fan_out} layer starts at KL {kl!r}, not 0")
            self.observe(abs(kl), f"MOPED layer {fan_in}x{fan_out}")
