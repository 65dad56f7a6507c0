"""
Training procedure: per iteration one minibatch per source domain, T stochastic passes,
cross-domain pairs, the weighted objective and one Adam update.

Every random choice of an iteration (batch indices, eps noise, pairs, linear-estimator
pairings) is drawn from a stream keyed by (purpose, iteration, domain id, pass) and
recorded in a StepDraws, so any step can be replayed exactly, e.g. by gradient_check.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parameters_to_vector
from tqdm import tqdm

from bayes_net import (
    BAYES_LAYER_NAMES,
    NetworkStack,
    PassNoise,
    forward_prob_batch,
    predict_expected,
    trainable_parameters,
)
from domain_data import DomainData
from kernel import DTYPE, KernelConfig
from losses import (
    LOSS_LOG_HEADER,
    LossComponents,
    LossKind,
    LossWeights,
    PairSampling,
    classification_losses,
    local_alignment_terms,
    predictive_entropy,
    sample_pairs,
    total_objective,
)
from pdg_errors import DataFormatError, NumericError, ValidationError
from prob_embedding import (
    CloudBatch,
    GlobalMode,
    LinearPairing,
    draw_global_pairings,
    global_alignment_loss,
)
from seeding import numpy_stream, torch_stream

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# gradient_check: |analytic - numeric| / max(|analytic|, |numeric|, GRADIENT_CHECK_FLOOR)
GRADIENT_CHECK_FLOOR = 1e-12

COMPONENTS = (
    "classification",
    "kl_extractor",
    "kl_classifier",
    "kl",
    "local_positive",
    "local_negative",
    "local",
    "global",
    "total",
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_per_domain: int = 16
    iterations: int = 500
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    global_mode: GlobalMode = GlobalMode.QUADRATIC
    n_pairs: int = 32
    kl_scale: float = 1.0
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    focal_gamma: float = 2.0
    per_item_draws: bool = False
    shared_pass_draws: bool = True
    detach_metric_input: bool = False
    pretrain_iterations: int = 300
    pretrain_lr: float = 1e-2
    moped_delta: float = 0.1
    moped: bool = True

    def __post_init__(self):
        object.__setattr__(self, "global_mode", GlobalMode(self.global_mode))
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValidationError(f"must be >= 0, got {self.learning_rate}", field="learning_rate")
        for name in ("batch_per_domain", "n_pairs"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValidationError(f"must be a positive integer, got {value}", field=name)
        for name in ("iterations", "pretrain_iterations"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise ValidationError(f"must be a non-negative integer, got {value}", field=name)
        for name in ("kl_scale", "focal_gamma", "pretrain_lr"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"must be >= 0, got {value}", field=name)
        if not self.moped_delta > 0:
            raise ValidationError(f"must be > 0, got {self.moped_delta}", field="moped_delta")


@dataclass(frozen=True)
class Ablation:
    """Switches of the ablation study; the defaults run the full method"""

    use_pmmd: bool = True
    use_pcsa: bool = True
    disable_local: bool = False
    disable_global: bool = False
    deterministic_mode: bool = False
    deterministic_extractor: bool = False
    deterministic_classifier: bool = False

    def frozen_layers(self) -> Tuple[str, ...]:
        """Bayesian layers that run in deterministic mode"""

        if self.deterministic_mode:
            return BAYES_LAYER_NAMES
        switches = {
            "extractor": self.deterministic_extractor,
            "classifier": self.deterministic_classifier,
        }
        return tuple(name for name in BAYES_LAYER_NAMES if switches[name])


@dataclass(frozen=True)
class StepSetup:
    config: TrainConfig = field(default_factory=TrainConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def effective_weights(self) -> LossWeights:
        w = self.config.weights
        return LossWeights(
            beta1=0.0 if self.ablation.disable_local else w.beta1,
            beta2=0.0 if self.ablation.disable_global else w.beta2,
            margin_xi=w.margin_xi,
            t_passes=w.t_passes,
        )


@dataclass(frozen=True)
class LabeledBatch:
    domain_id: int
    features: torch.Tensor
    labels: torch.Tensor
    indices: Optional[np.ndarray] = None

    @classmethod
    def from_domain(
        cls, domain: DomainData, indices: Optional[np.ndarray] = None
    ) -> "LabeledBatch":
        if indices is None:
            indices = np.arange(domain.n)
        return cls(
            domain.domain_id,
            torch.as_tensor(domain.features[indices], dtype=DTYPE),
            torch.as_tensor(domain.labels[indices], dtype=torch.int64),
            np.asarray(indices),
        )

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class StepDraws:
    """All random choices of one step; noise is indexed [batch position][pass]"""

    noise: List[List[PassNoise]]
    pairs: PairSampling
    global_pairings: Optional[Dict[Tuple[int, int], LinearPairing]] = None


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient in trainable_parameters() order"""

    values: torch.Tensor
    names: Tuple[str, ...]
    sizes: Tuple[int, ...]

    def __len__(self) -> int:
        return self.values.numel()

    def block(self, name: str) -> torch.Tensor:
        offset = 0
        for block_name, size in zip(self.names, self.sizes):
            if block_name == name:
                return self.values[offset : offset + size]
            offset += size
        raise KeyError(name)


@dataclass
class GradientResult:
    components: LossComponents
    gradient: GradientVector
    draws: StepDraws


@dataclass
class AdamState:
    optimizer: torch.optim.Adam
    params: List[torch.Tensor]

    @property
    def step_count(self) -> int:
        state = self.optimizer.state.get(self.params[0], {})
        return int(state.get("step", 0))


@dataclass
class FitResult:
    model: NetworkStack
    loss_log: List[LossComponents]


@dataclass
class LodoMetrics:
    accuracy: float
    per_class_accuracy: Dict[int, Optional[float]]
    mean_predictive_entropy: float
    majority_baseline: float
    n_samples: int


def draw_batch(domain: DomainData, size: int, seed: int, iteration: int) -> LabeledBatch:
    rng = numpy_stream(seed, "batch", iteration, domain.domain_id)
    indices = rng.choice(domain.n, size=min(size, domain.n), replace=False)
    return LabeledBatch.from_domain(domain, indices)


def draw_step(
    model: NetworkStack, batches: Sequence[LabeledBatch], config: TrainConfig, iteration: int
) -> StepDraws:
    noise = []
    for batch in batches:
        passes = []
        for t in range(config.weights.t_passes):
            generator = torch_stream(config.seed, "noise", iteration, batch.domain_id, t)
            classifier_generator = None
            if not config.shared_pass_draws:
                classifier_generator = torch_stream(
                    config.seed, "noise-classifier", iteration, batch.domain_id, t
                )
            passes.append(
                model.draw_noise(
                    generator,
                    batch.n if config.per_item_draws else None,
                    classifier_generator,
                )
            )
        noise.append(passes)

    pairs = sample_pairs(
        [batch.labels.numpy() for batch in batches],
        config.n_pairs,
        numpy_stream(config.seed, "pairs", iteration),
    )
    pairings = None
    if config.global_mode is GlobalMode.LINEAR:
        pairings = draw_global_pairings(
            [batch.n for batch in batches], numpy_stream(config.seed, "global", iteration)
        )
    return StepDraws(noise, pairs, pairings)


def evaluate_objective(
    model: NetworkStack,
    batches: Sequence[LabeledBatch],
    setup: StepSetup,
    draws: StepDraws,
) -> Dict[str, torch.Tensor]:
    """Every loss component of one step as a graph-carrying scalar, keyed by COMPONENTS"""

    config = setup.config
    weights = setup.effective_weights()

    class_terms = []
    latents: List[CloudBatch] = []
    mapped: List[CloudBatch] = []
    for batch, noises in zip(batches, draws.noise):
        z, probs = forward_prob_batch(model, batch.features, noises)
        expected = predict_expected(probs)
        losses = classification_losses(
            expected, batch.labels, config.loss_kind, config.focal_gamma
        )
        class_terms.append(losses.sum())
        latents.append(CloudBatch.from_tensor(z))
        metric_input = z.detach() if config.detach_metric_input else z
        mapped.append(CloudBatch.from_tensor(model.metric(metric_input)))

    kl_extractor, kl_classifier = model.kl_terms()
    positive, negative = local_alignment_terms(
        setup.kernel, draws.pairs.pairs, mapped, weights, setup.ablation.use_pcsa
    )
    global_loss = global_alignment_loss(
        setup.kernel,
        latents,
        config.global_mode,
        use_mean_embedding=not setup.ablation.use_pmmd,
        pairings=draws.global_pairings,
    )
    classification = torch.stack(class_terms).sum()
    local = positive + negative
    total = total_objective(
        classification, kl_extractor, kl_classifier, local, global_loss, weights, config.kl_scale
    )
    return {
        "classification": classification,
        "kl_extractor": kl_extractor,
        "kl_classifier": kl_classifier,
        "kl": kl_extractor + kl_classifier,
        "local_positive": positive,
        "local_negative": negative,
        "local": local,
        "global": global_loss,
        "total": total,
    }


def _components(terms: Dict[str, torch.Tensor]) -> LossComponents:
    return LossComponents(
        classification=float(terms["classification"].detach()),
        kl_extractor=float(terms["kl_extractor"].detach()),
        kl_classifier=float(terms["kl_classifier"].detach()),
        local_alignment=float(terms["local"].detach()),
        global_alignment=float(terms["global"].detach()),
        total=float(terms["total"].detach()),
    )


def compute_gradients(
    model: NetworkStack,
    batches: Sequence[LabeledBatch],
    setup: StepSetup,
    rng: Union[StepDraws, int],
    component: str = "total",
) -> GradientResult:
    """
    Gradient of one loss component (default: the total objective) with respect to every
    trainable parameter. rng is either recorded draws to replay or the iteration number
    whose streams are drawn.
    """

    if component not in COMPONENTS:
        raise ValidationError(f"unknown loss component '{component}'")
    draws = rng if isinstance(rng, StepDraws) else draw_step(model, batches, setup.config, rng)

    terms = evaluate_objective(model, batches, setup, draws)
    named = trainable_parameters(model)
    target = terms[component]
    if target.requires_grad:
        grads = torch.autograd.grad(target, [p for _, p in named], allow_unused=True)
    else:
        grads = [None] * len(named)

    blocks = []
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient in {name}", where=name)
        blocks.append(g)
    gradient = GradientVector(
        parameters_to_vector(blocks).detach(),
        tuple(name for name, _ in named),
        tuple(p.numel() for _, p in named),
    )
    return GradientResult(_components(terms), gradient, draws)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Union[GradientVector, torch.Tensor],
    state: Optional[AdamState] = None,
    lr: float = 5e-5,
) -> AdamState:
    """One bias-corrected Adam update of params in place; returns the carried state"""

    params = list(params)
    flat = grads.values if isinstance(grads, GradientVector) else torch.as_tensor(grads)
    expected = sum(p.numel() for p in params)
    if flat.dim() != 1 or flat.numel() != expected:
        raise ValidationError(
            f"gradient has {flat.numel()} entries but parameters have {expected}"
        )
    if state is None:
        state = AdamState(
            torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS), params
        )
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    offset = 0
    for p in params:
        p.grad = flat[offset : offset + p.numel()].view_as(p).to(p.dtype).clone()
        offset += p.numel()
    state.optimizer.step()
    return state


def _check_sources(sources: Sequence[DomainData]) -> List[DomainData]:
    if len(sources) < 2:
        raise ValidationError(f"training needs at least two source domains, got {len(sources)}")
    for source in sources:
        if source.n == 0:
            raise ValidationError(f"source domain {source.domain_id} is empty")
    ids = [source.domain_id for source in sources]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate source domain ids: {ids}")
    return sorted(sources, key=lambda source: source.domain_id)


def fit(
    config: TrainConfig,
    sources: Sequence[DomainData],
    model: NetworkStack,
    kernel: Optional[KernelConfig] = None,
    ablation: Optional[Ablation] = None,
    progress: bool = False,
) -> FitResult:
    sources = _check_sources(sources)
    setup = StepSetup(config, kernel or KernelConfig(), ablation or Ablation())
    frozen = setup.ablation.frozen_layers()
    if not set(frozen) <= set(model.frozen_layers):
        model.freeze_sigma(frozen)

    log: List[LossComponents] = []
    if config.iterations == 0:
        return FitResult(model, log)

    params = [p for _, p in trainable_parameters(model)]
    state: Optional[AdamState] = None
    for iteration in tqdm(
        range(config.iterations), desc="train", unit="it", disable=not progress, leave=False
    ):
        batches = [
            draw_batch(source, config.batch_per_domain, config.seed, iteration)
            for source in sources
        ]
        result = compute_gradients(model, batches, setup, iteration)
        state = adam_step(params, result.gradient, state, config.learning_rate)
        log.append(result.components)
        if iteration % 50 == 0:
            logger.debug(f"iteration {iteration}: {result.components}")

    logger.info(f"trained {config.iterations} iterations, final total {log[-1].total:.6g}")
    return FitResult(model, log)


def pretrain_deterministic(
    stack: NetworkStack,
    sources: Sequence[DomainData],
    iterations: int = 300,
    lr: float = 1e-2,
    seed: int = 0,
    batch_size: int = 32,
) -> nn.Sequential:
    """Train the point-weight twin on pooled source data; its weights seed MOPED priors"""

    sources = _check_sources(sources)
    features = torch.as_tensor(np.concatenate([s.features for s in sources]), dtype=DTYPE)
    labels = torch.as_tensor(np.concatenate([s.labels for s in sources]), dtype=torch.int64)

    twin = stack.deterministic_twin()
    optimizer = torch.optim.Adam(twin.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    for iteration in range(iterations):
        rng = numpy_stream(seed, "pretrain", iteration)
        index = torch.as_tensor(
            rng.choice(len(labels), size=min(batch_size, len(labels)), replace=False)
        )
        optimizer.zero_grad()
        loss = F.cross_entropy(twin(features[index]), labels[index])
        loss.backward()
        optimizer.step()
    if iterations:
        logger.info(f"pretrained deterministic twin, final loss {float(loss):.4g}")
    return twin


def evaluate_lodo(
    config: TrainConfig,
    all_domains: Sequence[DomainData],
    held_out_index: int,
    model: Optional[NetworkStack] = None,
    kernel: Optional[KernelConfig] = None,
    ablation: Optional[Ablation] = None,
) -> LodoMetrics:
    """
    Held-out metrics from the mean of T per-pass predictions. Without a model, a default
    network is pretrained and fitted on the remaining domains first.
    """

    if isinstance(held_out_index, bool) or not 0 <= held_out_index < len(all_domains):
        raise ValidationError(
            f"held-out index {held_out_index} out of range for {len(all_domains)} domains"
        )
    target = all_domains[held_out_index]
    if model is None:
        sources = [d for i, d in enumerate(all_domains) if i != held_out_index]
        n_classes = int(max(int(d.labels.max()) for d in all_domains)) + 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(numpy_stream(config.seed, "init").integers(2**62)))
            model = NetworkStack(target.d, max(n_classes, 2))
        twin = pretrain_deterministic(
            model, sources, config.pretrain_iterations, config.pretrain_lr, config.seed
        )
        model.adopt_twin(twin, delta=config.moped_delta, standard_prior=not config.moped)
        fit(config, sources, model, kernel, ablation)

    return predict_domain(config, target, model)


def predict_domain(config: TrainConfig, target: DomainData, model: NetworkStack) -> LodoMetrics:
    if target.n == 0:
        raise ValidationError(f"held-out domain {target.domain_id} is empty")
    if target.d != model.d_in:
        raise DataFormatError(f"domain has {target.d} features, network expects {model.d_in}")

    batch = LabeledBatch.from_domain(target)
    noises = [
        model.draw_noise(
            torch_stream(config.seed, "eval", target.domain_id, t),
            batch.n if config.per_item_draws else None,
        )
        for t in range(config.weights.t_passes)
    ]
    with torch.no_grad():
        _, probs = forward_prob_batch(model, batch.features, noises)
        expected = predict_expected(probs)
    predicted = expected.argmax(dim=-1).numpy()
    labels = target.labels

    per_class: Dict[int, Optional[float]] = {}
    for c in range(model.n_classes):
        present = labels == c
        per_class[c] = float((predicted[present] == c).mean()) if present.any() else None

    counts = np.bincount(labels, minlength=model.n_classes)
    return LodoMetrics(
        accuracy=float((predicted == labels).mean()),
        per_class_accuracy=per_class,
        mean_predictive_entropy=float(predictive_entropy(expected).mean()),
        majority_baseline=float(counts.max() / counts.sum()),
        n_samples=int(target.n),
    )


@dataclass
class GradientCheckResult:
    """
    max_relative_error is measured with the step h only. narrow_step_error repeats the
    comparison at the worst entry with h / 10; it is a diagnostic and never part of the
    verdict.
    """

    component: str
    max_relative_error: float
    worst_parameter: str
    n_parameters: int
    narrow_step_error: float = 0.0


def gradient_check(
    model: NetworkStack,
    batches: Sequence[LabeledBatch],
    setup: StepSetup,
    component: str = "total",
    h: float = 1e-5,
    draws: Optional[StepDraws] = None,
) -> GradientCheckResult:
    """Autograd against central differences with all draws held fixed"""

    if draws is None:
        draws = draw_step(model, batches, setup.config, 0)
    analytic = compute_gradients(model, batches, setup, draws, component).gradient

    def value() -> float:
        with torch.no_grad():
            return float(evaluate_objective(model, batches, setup, draws)[component])

    def central(flat: torch.Tensor, i: int, step: float) -> float:
        original = float(flat[i])
        flat[i] = original + step
        upper = value()
        flat[i] = original - step
        lower = value()
        flat[i] = original
        return (upper - lower) / (2.0 * step)

    if not h > 0:
        raise ValidationError(f"finite-difference step must be positive, got {h}")

    worst = 0.0
    worst_name = ""
    worst_entry: Optional[Tuple[torch.Tensor, int, float]] = None
    offset = 0
    for name, p in trainable_parameters(model):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            a = float(analytic.values[offset + i])
            error = relative_gradient_error(a, central(flat, i, h))
            if error > worst:
                worst, worst_name, worst_entry = error, f"{name}[{i}]", (flat, i, a)
        offset += flat.numel()

    narrow = 0.0
    if worst_entry is not None:
        flat, i, a = worst_entry
        narrow = relative_gradient_error(a, central(flat, i, 0.1 * h))
    return GradientCheckResult(component, worst, worst_name, offset, narrow)


def relative_gradient_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_CHECK_FLOOR)


def write_loss_csv(path: Union[str, Path], log: Sequence[LossComponents]) -> None:
    frame = pd.DataFrame(
        [entry.as_row(iteration) for iteration, entry in enumerate(log, start=1)],
        columns=LOSS_LOG_HEADER,
    )
    frame.to_csv(path, index=False)


def read_loss_csv(path: Union[str, Path]) -> List[LossComponents]:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != LOSS_LOG_HEADER:
        raise DataFormatError(f"{path}: unexpected loss log header {list(frame.columns)}")
    return [
        LossComponents(*(float(v) for v in row[1:]))
        for row in frame.itertuples(index=False, name=None)
    ]
