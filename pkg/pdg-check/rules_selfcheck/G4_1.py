import numpy as np
import torch

from bayes_net import NetworkStack
from domain_data import DomainData
from kernel import DTYPE
from losses import LossWeights
from prob_embedding import GlobalMode
from rules_selfcheck.rule import SelfCheckRule
from seeding import numpy_stream
from train import LabeledBatch, StepSetup, TrainConfig, draw_step, gradient_check

POSTERIOR_SIGMA = 0.1
BATCH = 6

CASES = (
    ("classification", GlobalMode.QUADRATIC),
    ("kl", GlobalMode.QUADRATIC),
    ("local_positive", GlobalMode.QUADRATIC),
    ("local_negative", GlobalMode.QUADRATIC),
    ("global", GlobalMode.QUADRATIC),
    ("global", GlobalMode.LINEAR),
)


def toy_model(seed: int) -> NetworkStack:
    with torch.random.fork_rng():
        torch.manual_seed(int(numpy_stream(seed, "gradient-model").integers(2**31)))
        model = NetworkStack(3, 2, hidden=(4,), latent=3, metric_hidden=(3,), metric_out=2)
    # away from the MOPED start, so the KL gradient is not trivially 0
    for layer in model.bayes_layers().values():
        for variational in (layer.weights, layer.biases):
            sigma = torch.full(variational.shape, POSTERIOR_SIGMA, dtype=DTYPE)
            variational.set_posterior(variational.mu.detach(), sigma)
    return model


def toy_batches(rng: np.random.Generator):
    batches = []
    for domain_id in range(2):
        labels = rng.permutation(np.arange(BATCH) % 2)
        domain = DomainData(domain_id, rng.normal(size=(BATCH, 3)) + domain_id, labels)
        batches.append(LabeledBatch.from_domain(domain))
    return batches


class Rule(SelfCheckRule):
    """Analytic gradients of every loss component agree with central differences"""

    tolerance = 1e-4

    def check(self) -> None:
        model = toy_model(self.context.seed)
        batches = toy_batches(self.context.rng(self.name))
        for component, mode in CASES:
            config = TrainConfig(
                seed=self.context.seed,
                weights=LossWeights(t_passes=3),
                global_mode=mode,
                n_pairs=4,
            )
            setup = StepSetup(config)
            draws = draw_step(model, batches, config, 0)
            result = gradient_check(model, batches, setup, component, draws=draws)
            label = f"{component} ({mode.value})" if component == "global" else component
            self.observe(result.max_relative_error, f"{label} at {result.worst_parameter}")
            self.info(
                f"{label}: max relative error {result.max_relative_error:.2e} "
                f"over {result.n_parameters} parameters "
                f"({result.narrow_step_error:.2e} at h/10)"
            )
