"""
Mean-field variational Bayesian layers and the network stack that turns inputs into
probabilistic embeddings.

Every Bayesian parameter has a factorized Gaussian posterior N(mu, softplus(rho)^2) and a
fixed Gaussian prior. A stochastic pass draws w = mu + sigma * eps once per pass
(reparameterization), so gradients reach mu and rho through the sample.

Checkpoint format (``.npz``, loadable without pickle):
  - one float64 array per entry of ``NetworkStack.state_dict()``, keyed by its dotted
    module path, e.g. ``extractor_bayes.weights.mu``, ``extractor_bayes.weights.rho``,
    ``extractor_bayes.weights.prior_mu``, ``extractor_bayes.weights.prior_sigma``;
  - ``__meta__``: a JSON string ``{"format": "pdg-checkpoint", "format_version": 1,
    "architecture": {...NetworkStack keyword arguments...}, "deterministic": bool,
    "frozen_layers": [...]}``, the last naming the Bayesian layers in deterministic mode.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kernel import DTYPE, as_tensor
from pdg_errors import DataFormatError, InputShapeError, NumericError, ValidationError
from prob_embedding import ProbEmbedding

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
MOPED_DELTA = 0.1
SIMPLEX_TOLERANCE = 1e-6

CHECKPOINT_FORMAT = "pdg-checkpoint"
CHECKPOINT_VERSION = 1

BAYES_LAYER_NAMES = ("extractor", "classifier")


def inverse_softplus(sigma: torch.Tensor) -> torch.Tensor:
    # log(exp(s) - 1) written so that small and large s stay accurate
    return sigma + torch.log(-torch.expm1(-sigma))


def gaussian_kl(
    mu_q: torch.Tensor, sigma_q: torch.Tensor, mu_p: torch.Tensor, sigma_p: torch.Tensor
) -> torch.Tensor:
    """Closed-form KL[N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)] summed over entries"""

    kl = (
        torch.log(sigma_p / sigma_q)
        + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2)
        - 0.5
    )
    return kl.sum()


class GaussianVariational(nn.Module):
    """Factorized Gaussian posterior over one parameter tensor plus its fixed prior"""

    def __init__(
        self,
        shape: Union[int, Tuple[int, ...]],
        prior_mu: float = 0.0,
        prior_sigma: float = 1.0,
        sigma_floor: float = SIGMA_FLOOR,
    ):
        super().__init__()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.sigma_floor: float = sigma_floor

        self.mu = nn.Parameter(torch.zeros(shape, dtype=DTYPE))
        self.rho = nn.Parameter(torch.zeros(shape, dtype=DTYPE))
        self.register_buffer("prior_mu", torch.full(shape, float(prior_mu), dtype=DTYPE))
        self.register_buffer(
            "prior_sigma",
            torch.full(shape, max(float(prior_sigma), sigma_floor), dtype=DTYPE),
        )
        with torch.no_grad():
            self.rho.copy_(inverse_softplus(self.prior_sigma))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.mu.shape)

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.rho)

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mu + self.sigma * eps

    def set_posterior(self, mu: torch.Tensor, sigma: torch.Tensor) -> None:
        with torch.no_grad():
            self.mu.copy_(mu)
            self.rho.copy_(inverse_softplus(sigma))

    def set_prior(self, prior_mu: torch.Tensor, prior_sigma: torch.Tensor) -> None:
        with torch.no_grad():
            self.prior_mu.copy_(prior_mu)
            self.prior_sigma.copy_(prior_sigma.clamp_min(self.sigma_floor))

    def kl_to_prior(self) -> torch.Tensor:
        return kl_to_prior(self)


def kl_to_prior(v: GaussianVariational) -> torch.Tensor:
    """KL between the variational posterior and the prior, summed over all entries"""

    return gaussian_kl(v.mu, v.sigma, v.prior_mu, v.prior_sigma)


@dataclass(frozen=True)
class LayerNoise:
    """The eps draws of one Bayesian layer for one pass"""

    weight: torch.Tensor
    bias: torch.Tensor


@dataclass(frozen=True)
class PassNoise:
    """All eps draws of one stochastic forward pass"""

    extractor: LayerNoise
    classifier: LayerNoise


class BayesAffineLayer(nn.Module):
    """y = x W + b with W (fan_in x fan_out) and b (fan_out) drawn from their posteriors"""

    def __init__(self, fan_in: int, fan_out: int, sigma_floor: float = SIGMA_FLOOR):
        super().__init__()
        if fan_in < 1 or fan_out < 1:
            raise ValidationError(f"invalid layer shape {fan_in} x {fan_out}")
        self.fan_in: int = fan_in
        self.fan_out: int = fan_out
        self.weights = GaussianVariational((fan_in, fan_out), sigma_floor=sigma_floor)
        self.biases = GaussianVariational(fan_out, sigma_floor=sigma_floor)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.mu.uniform_(-bound, bound)

    def draw_noise(
        self, generator: torch.Generator, batch_size: Optional[int] = None
    ) -> LayerNoise:
        lead = () if batch_size is None else (batch_size,)
        weight = torch.randn(
            lead + (self.fan_in, self.fan_out), generator=generator, dtype=DTYPE
        )
        bias = torch.randn(lead + (self.fan_out,), generator=generator, dtype=DTYPE)
        return LayerNoise(weight, bias)

    def forward(self, x: torch.Tensor, noise: Optional[LayerNoise] = None) -> torch.Tensor:
        if noise is None:
            return x @ self.weights.mu + self.biases.mu

        weight = self.weights.sample(noise.weight)
        bias = self.biases.sample(noise.bias)
        if weight.dim() == 3:
            # one weight realization per batch item
            return torch.einsum("bi,bio->bo", x, weight) + bias
        return x @ weight + bias

    def kl_to_prior(self) -> torch.Tensor:
        return kl_to_prior(self.weights) + kl_to_prior(self.biases)


def moped_init(
    layer: BayesAffineLayer,
    w_dnn: Tuple[Any, Any],
    delta: float = MOPED_DELTA,
    sigma_floor: Optional[float] = None,
    standard_prior: bool = False,
) -> BayesAffineLayer:
    """
    Empirical-Bayes initialization from pretrained point weights (weight, bias).

    Prior N(w_dnn, max(delta |w_dnn|, sigma_floor)); the posterior starts at the prior,
    so the KL term is exactly 0 afterwards. With standard_prior the posterior is
    initialized the same way but the prior is N(0, 1).
    """

    if not delta > 0:
        raise ValidationError(f"perturbation factor must be positive, got {delta}")
    weight, bias = (as_tensor(w).detach() for w in w_dnn)
    if tuple(weight.shape) != layer.weights.shape or tuple(bias.shape) != layer.biases.shape:
        raise ValidationError(
            f"pretrained weights {tuple(weight.shape)}/{tuple(bias.shape)} do not match "
            f"layer {layer.weights.shape}/{layer.biases.shape}"
        )

    for variational, point in ((layer.weights, weight), (layer.biases, bias)):
        floor = variational.sigma_floor if sigma_floor is None else sigma_floor
        variational.sigma_floor = floor
        scale = (delta * point.abs()).clamp_min(floor)
        variational.set_posterior(point, scale)
        # the prior scale is the realized softplus(rho), so q == p bit for bit
        realized = variational.sigma.detach()
        if standard_prior:
            variational.set_prior(torch.zeros_like(point), torch.ones_like(point))
        else:
            with torch.no_grad():
                variational.prior_mu.copy_(point)
                variational.prior_sigma.copy_(realized)
    return layer


class MetricNet(nn.Module):
    """Deterministic multilayer perceptron applied to every Monte Carlo sample"""

    def __init__(
        self,
        d_in: int,
        hidden: Sequence[int] = (16,),
        d_out: int = 8,
        final_activation: bool = False,
    ):
        super().__init__()
        widths = [d_in] + list(hidden) + [d_out]
        modules: List[nn.Module] = []
        for i in range(len(widths) - 1):
            modules.append(nn.Linear(widths[i], widths[i + 1], dtype=DTYPE))
            if i < len(widths) - 2 or final_activation:
                modules.append(nn.ReLU())
        self.layers = nn.Sequential(*modules)
        self.d_in: int = d_in
        self.d_out: int = d_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise InputShapeError(
                f"metric network expects dimension {self.d_in}, got {x.shape[-1]}"
            )
        return self.layers(x)


def metric_forward(metric: MetricNet, e: Union[ProbEmbedding, torch.Tensor]) -> Any:
    """Apply the metric network row-wise; T (and any leading batch axes) is preserved"""

    if isinstance(e, ProbEmbedding):
        return ProbEmbedding(metric(e.samples))
    return metric(as_tensor(e))


def _check_finite(tensor: torch.Tensor, layer_index: int) -> None:
    if not bool(torch.isfinite(tensor.detach()).all()):
        raise NumericError(
            f"non-finite activations after layer {layer_index}",
            where=f"layer {layer_index}",
        )


class NetworkStack(nn.Module):
    """
    Extractor Q (deterministic affine+ReLU blocks, then one Bayesian affine + ReLU),
    Bayesian classifier C (latent -> m logits) and metric network M.
    """

    def __init__(
        self,
        d_in: int,
        n_classes: int,
        hidden: Sequence[int] = (32,),
        latent: int = 16,
        metric_hidden: Sequence[int] = (16,),
        metric_out: int = 8,
        metric_final_activation: bool = False,
        sigma_floor: float = SIGMA_FLOOR,
    ):
        super().__init__()
        if d_in < 1 or n_classes < 2 or latent < 1:
            raise ValidationError(
                f"invalid network shape d_in={d_in}, classes={n_classes}, latent={latent}"
            )
        self.architecture: Dict[str, Any] = {
            "d_in": d_in,
            "n_classes": n_classes,
            "hidden": list(hidden),
            "latent": latent,
            "metric_hidden": list(metric_hidden),
            "metric_out": metric_out,
            "metric_final_activation": metric_final_activation,
            "sigma_floor": sigma_floor,
        }

        modules: List[nn.Module] = []
        width = d_in
        for h in hidden:
            modules += [nn.Linear(width, h, dtype=DTYPE), nn.ReLU()]
            width = h
        self.extractor_backbone = nn.Sequential(*modules)
        self.extractor_bayes = BayesAffineLayer(width, latent, sigma_floor=sigma_floor)
        self.classifier = BayesAffineLayer(latent, n_classes, sigma_floor=sigma_floor)
        self.metric = MetricNet(latent, metric_hidden, metric_out, metric_final_activation)
        self.frozen_layers: Tuple[str, ...] = ()

    @property
    def d_in(self) -> int:
        return self.architecture["d_in"]

    @property
    def n_classes(self) -> int:
        return self.architecture["n_classes"]

    @property
    def latent(self) -> int:
        return self.architecture["latent"]

    def bayes_layers(self) -> Dict[str, BayesAffineLayer]:
        return {"extractor": self.extractor_bayes, "classifier": self.classifier}

    @property
    def deterministic(self) -> bool:
        return set(self.frozen_layers) == set(BAYES_LAYER_NAMES)

    def _layer_noise(self, name: str, noise: Optional[LayerNoise]) -> Optional[LayerNoise]:
        return None if name in self.frozen_layers else noise

    def draw_noise(
        self,
        generator: torch.Generator,
        batch_size: Optional[int] = None,
        classifier_generator: Optional[torch.Generator] = None,
    ) -> PassNoise:
        extractor = self.extractor_bayes.draw_noise(generator, batch_size)
        classifier = self.classifier.draw_noise(
            classifier_generator if classifier_generator is not None else generator,
            batch_size,
        )
        return PassNoise(extractor, classifier)

    def extract(self, x: torch.Tensor, noise: Optional[PassNoise]) -> torch.Tensor:
        h = x
        index = 0
        for module in self.extractor_backbone:
            h = module(h)
            if isinstance(module, nn.Linear):
                _check_finite(h, index)
                index += 1
        layer_noise = self._layer_noise("extractor", None if noise is None else noise.extractor)
        z = torch.relu(self.extractor_bayes(h, layer_noise))
        _check_finite(z, index)
        return z

    def classify(self, z: torch.Tensor, noise: Optional[PassNoise]) -> torch.Tensor:
        layer_noise = self._layer_noise("classifier", None if noise is None else noise.classifier)
        logits = self.classifier(z, layer_noise)
        _check_finite(logits, len(self.architecture["hidden"]) + 1)
        return logits

    def forward(
        self, x: torch.Tensor, noise: Optional[PassNoise] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.d_in:
            raise InputShapeError(f"network expects {self.d_in} inputs, got {x.shape[-1]}")
        z = self.extract(x, noise)
        return z, self.classify(z, noise)

    def freeze_sigma(self, layers: Optional[Sequence[str]] = None) -> None:
        """
        Deterministic mode for the named Bayesian layers (default: all of them): their
        forward passes use the means, their rho is not trained and their KL reads 0.
        """

        layers = BAYES_LAYER_NAMES if layers is None else tuple(layers)
        unknown = sorted(set(layers) - set(BAYES_LAYER_NAMES))
        if unknown:
            raise ValidationError(f"unknown Bayesian layer '{unknown[0]}'")
        bayes = self.bayes_layers()
        for name in layers:
            bayes[name].weights.rho.requires_grad_(False)
            bayes[name].biases.rho.requires_grad_(False)
        frozen = set(layers) | set(self.frozen_layers)
        self.frozen_layers = tuple(name for name in BAYES_LAYER_NAMES if name in frozen)

    def kl_terms(self) -> Tuple[torch.Tensor, torch.Tensor]:
        terms = []
        for name, layer in self.bayes_layers().items():
            if name in self.frozen_layers:
                terms.append(torch.zeros((), dtype=DTYPE))
            else:
                terms.append(layer.kl_to_prior())
        return terms[0], terms[1]

    def deterministic_twin(self) -> nn.Sequential:
        """Point-weight copy of Q and C (metric net excluded) used for pretraining"""

        modules: List[nn.Module] = []
        for module in self.extractor_backbone:
            if isinstance(module, nn.Linear):
                copy = nn.Linear(module.in_features, module.out_features, dtype=DTYPE)
                copy.load_state_dict(module.state_dict())
                modules.append(copy)
            else:
                modules.append(nn.ReLU())
        for layer, activation in ((self.extractor_bayes, True), (self.classifier, False)):
            linear = nn.Linear(layer.fan_in, layer.fan_out, dtype=DTYPE)
            with torch.no_grad():
                linear.weight.copy_(layer.weights.mu.t())
                linear.bias.copy_(layer.biases.mu)
            modules.append(linear)
            if activation:
                modules.append(nn.ReLU())
        return nn.Sequential(*modules)

    def adopt_twin(
        self,
        twin: nn.Sequential,
        delta: float = MOPED_DELTA,
        standard_prior: bool = False,
    ) -> None:
        """Copy the twin's backbone and use its other point weights as MOPED priors"""

        linears = [m for m in twin if isinstance(m, nn.Linear)]
        backbone = [m for m in self.extractor_backbone if isinstance(m, nn.Linear)]
        if len(linears) != len(backbone) + 2:
            raise ValidationError("deterministic twin does not match the network layout")
        for target, source in zip(backbone, linears):
            target.load_state_dict(source.state_dict())
        for layer, source in zip((self.extractor_bayes, self.classifier), linears[-2:]):
            moped_init(
                layer,
                (source.weight.detach().t(), source.bias.detach()),
                delta=delta,
                standard_prior=standard_prior,
            )


def trainable_parameters(stack: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    """Canonical parameter ordering shared by gradient vectors and the optimizer"""

    return [(name, p) for name, p in stack.named_parameters() if p.requires_grad]


def _as_generator(rng: Any) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    generator = torch.Generator()
    generator.manual_seed(int(rng))
    return generator


def sample_forward(
    stack: NetworkStack,
    x: Any,
    rng: Any = 0,
    noise: Optional[PassNoise] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One stochastic pass: a single weight draw, returns (z, logits)"""

    x = as_tensor(x)
    if not bool(torch.isfinite(x.detach()).all()):
        raise ValidationError("input contains non-finite values")
    if noise is None:
        noise = stack.draw_noise(_as_generator(rng))
    return stack(x, noise)


def forward_prob_batch(
    stack: NetworkStack, X: torch.Tensor, noises: Sequence[PassNoise]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    T stochastic passes over a batch, one PassNoise per pass.

    Returns the embeddings as n x T x latent and the per-pass class probabilities as
    T x n x m.
    """

    if len(noises) < 1:
        raise ValidationError("at least one stochastic pass is required (T >= 1)")
    X = as_tensor(X)
    embeddings = []
    probabilities = []
    for noise in noises:
        z, logits = stack(X, noise)
        embeddings.append(z)
        probabilities.append(torch.softmax(logits, dim=-1))
    return torch.stack(embeddings, dim=-2), torch.stack(probabilities, dim=0)


def forward_prob(
    stack: NetworkStack, x: Any, T: int, rng: Any = 0
) -> Tuple[ProbEmbedding, List[torch.Tensor]]:
    """T independent weight draws for one input: its probabilistic embedding and the
    per-pass class probabilities"""

    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValidationError(f"number of passes must be a positive integer, got {T}")
    x = as_tensor(x)
    if x.dim() != 1:
        raise InputShapeError(f"forward_prob takes a single input vector, got {tuple(x.shape)}")
    generator = _as_generator(rng)
    noises = [stack.draw_noise(generator) for _ in range(int(T))]
    z, probs = forward_prob_batch(stack, x.unsqueeze(0), noises)
    return ProbEmbedding(z[0]), [probs[t, 0] for t in range(int(T))]


def predict_expected(per_pass_probs: Any) -> torch.Tensor:
    """Mean of the per-pass class probabilities (leading axis = pass)"""

    if isinstance(per_pass_probs, torch.Tensor):
        probs = as_tensor(per_pass_probs)
    else:
        per_pass_probs = list(per_pass_probs)
        if not per_pass_probs:
            raise ValidationError("no per-pass probabilities given")
        probs = torch.stack([as_tensor(p) for p in per_pass_probs])
    if probs.dim() < 2 or probs.shape[0] < 1:
        raise ValidationError("no per-pass probabilities given")
    if bool((probs < -SIMPLEX_TOLERANCE).any()) or bool(
        ((probs.sum(dim=-1) - 1.0).abs() > SIMPLEX_TOLERANCE).any()
    ):
        raise ValidationError("per-pass probabilities are not on the simplex")
    return probs.mean(dim=0)


def save_checkpoint(stack: NetworkStack, path: Union[str, Path]) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "architecture": stack.architecture,
        "deterministic": stack.deterministic,
        "frozen_layers": list(stack.frozen_layers),
    }
    arrays = {
        name: tensor.detach().cpu().numpy() for name, tensor in stack.state_dict().items()
    }
    with open(path, "wb") as archive:
        np.savez(archive, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    logger.info(f"wrote checkpoint {path} ({len(arrays)} arrays)")


def load_checkpoint(path: Union[str, Path]) -> NetworkStack:
    try:
        archive = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise DataFormatError(f"{path}: not a checkpoint archive ({e})") from e

    with archive:
        if "__meta__" not in archive.files:
            raise DataFormatError(f"{path}: checkpoint metadata missing")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataFormatError(f"{path}: unknown archive format {meta.get('format')}")
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}"
            )
        stack = NetworkStack(**meta["architecture"])
        state = {
            name: torch.from_numpy(archive[name].copy())
            for name in archive.files
            if name != "__meta__"
        }
    try:
        stack.load_state_dict(state)
    except RuntimeError as e:
        raise DataFormatError(f"{path}: parameters do not match architecture ({e})") from e
    frozen = meta.get("frozen_layers")
    if frozen is None and meta.get("deterministic"):
        frozen = BAYES_LAYER_NAMES
    if frozen:
        try:
            stack.freeze_sigma(frozen)
        except ValidationError as e:
            raise DataFormatError(f"{path}: {e}") from e
    return stack


def draw_pass_noise(
    stack: NetworkStack,
    generator: torch.Generator,
    batch_size: Optional[int] = None,
    classifier_generator: Optional[torch.Generator] = None,
) -> PassNoise:
    """eps draws for one pass; batch_size gives every batch item its own weight draw"""

    return stack.draw_noise(generator, batch_size, classifier_generator)
