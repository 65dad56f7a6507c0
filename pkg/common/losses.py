"""
Training objectives: classification losses, the probabilistic contrastive semantic
alignment loss over cross-domain pairs, its mean-embedding baseline, pair sampling and
the weighted total objective.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, List, Sequence, Tuple, Union

import numpy as np
import torch

from kernel import (
    DTYPE,
    Estimator,
    KernelConfig,
    as_tensor,
    mmd2,
    rbf_from_sqdist,
    squared_distances,
)
from pdg_errors import InputShapeError, NumericError, ValidationError
from prob_embedding import CloudBatch, DomainEmbeddings, ProbEmbedding

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
SIMPLEX_TOLERANCE = 1e-6
LOSS_LOG_HEADER = ["iteration", "L_c", "KL_Q", "KL_C", "L_local", "L_global", "total"]


class LossKind(Enum):
    CROSS_ENTROPY = "cross_entropy"
    FOCAL = "focal"


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.1
    beta2: float = 0.7
    margin_xi: float = 1.0
    t_passes: int = 10

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"must be >= 0, got {value}", field=name)
        if not math.isfinite(self.margin_xi) or self.margin_xi <= 0:
            raise ValidationError(f"must be > 0, got {self.margin_xi}", field="margin_xi")
        if isinstance(self.t_passes, bool) or int(self.t_passes) != self.t_passes:
            raise ValidationError("must be an integer", field="t_passes")
        if self.t_passes < 1:
            raise ValidationError(f"must be >= 1, got {self.t_passes}", field="t_passes")


@dataclass(frozen=True)
class PairIndex:
    """A cross-domain pair addressed by (domain position, item position)"""

    domain_a: int
    index_a: int
    domain_b: int
    index_b: int
    same_label: bool


@dataclass(frozen=True)
class PairSample:
    a: ProbEmbedding
    b: ProbEmbedding
    same_label: bool
    domain_a: int
    domain_b: int

    def __post_init__(self):
        if self.domain_a == self.domain_b:
            raise ValidationError("pairs must join two different domains")
        if self.a.d != self.b.d:
            raise InputShapeError(f"pair embeddings differ in dimension: {self.a.d} vs {self.b.d}")


@dataclass(frozen=True)
class PairSampling:
    """
    Result of sample_pairs. A category that no cross-domain pair can realize is left
    empty and flagged; one that ran out of draws is returned short.
    """

    positives: Tuple[PairIndex, ...]
    negatives: Tuple[PairIndex, ...]
    positives_unrealizable: bool = False
    negatives_unrealizable: bool = False

    @property
    def pairs(self) -> List[PairIndex]:
        return list(self.positives) + list(self.negatives)

    def materialize(self, domains: Sequence[Any]) -> List[PairSample]:
        clouds = [
            d if isinstance(d, CloudBatch) else CloudBatch.from_members(d.members)
            for d in domains
        ]
        return [
            PairSample(
                clouds[p.domain_a].member(p.index_a),
                clouds[p.domain_b].member(p.index_b),
                p.same_label,
                p.domain_a,
                p.domain_b,
            )
            for p in self.pairs
        ]


@dataclass
class LossComponents:
    classification: float
    kl_extractor: float
    kl_classifier: float
    local_alignment: float
    global_alignment: float
    total: float

    def as_row(self, iteration: int) -> List[Any]:
        return [
            iteration,
            self.classification,
            self.kl_extractor,
            self.kl_classifier,
            self.local_alignment,
            self.global_alignment,
            self.total,
        ]


def _check_simplex(probs: torch.Tensor) -> None:
    if bool((probs < -SIMPLEX_TOLERANCE).any()) or bool(
        ((probs.sum(dim=-1) - 1.0).abs() > SIMPLEX_TOLERANCE).any()
    ):
        raise ValidationError("class probabilities are not on the simplex")


def classification_losses(
    probs: torch.Tensor,
    labels: Any,
    kind: Union[LossKind, str] = LossKind.CROSS_ENTROPY,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Per-item loss for an n x m probability matrix and n labels"""

    kind = LossKind(kind)
    probs = as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if probs.dim() != 2 or labels.dim() != 1 or labels.shape[0] != probs.shape[0]:
        raise InputShapeError(
            f"expected n x m probabilities and n labels, got {tuple(probs.shape)} "
            f"and {tuple(labels.shape)}"
        )
    if bool((labels < 0).any()) or bool((labels >= probs.shape[1]).any()):
        raise ValidationError(f"labels must be in [0, {probs.shape[1]})")
    _check_simplex(probs)

    p_true = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    log_p = torch.log(p_true + LOG_EPS)
    if kind is LossKind.CROSS_ENTROPY:
        return -log_p
    return -((1.0 - p_true) ** gamma) * log_p


def classification_loss(
    probs: Any,
    label: int,
    kind: Union[LossKind, str] = LossKind.CROSS_ENTROPY,
    gamma: float = 2.0,
) -> torch.Tensor:
    probs = as_tensor(probs)
    if probs.dim() != 1:
        raise InputShapeError(f"expected an m-vector of probabilities, got {tuple(probs.shape)}")
    if isinstance(label, bool) or int(label) != label:
        raise ValidationError(f"invalid class label {label}")
    return classification_losses(probs.unsqueeze(0), [int(label)], kind, gamma)[0]


def _contrastive(distance2: torch.Tensor, same_label: Any, margin: float) -> torch.Tensor:
    pull = 0.5 * distance2
    push = 0.5 * (margin - distance2).clamp_min(0.0)
    return torch.where(torch.as_tensor(same_label), pull, push)


def pcsa_loss(cfg: KernelConfig, pair: PairSample, weights: LossWeights) -> torch.Tensor:
    """
    Probabilistic contrastive loss of one (metric-mapped) pair: half the plug-in MMD^2
    between the two sample clouds for same-class pairs, half the hinge
    max(0, xi - MMD^2) otherwise.
    """

    distance2 = mmd2(cfg, pair.a.samples, pair.b.samples, Estimator.BIASED_V_STATISTIC)
    return _contrastive(distance2, pair.same_label, weights.margin_xi)


def mean_csa_loss(pair: PairSample, weights: LossWeights) -> torch.Tensor:
    diff = pair.a.mean() - pair.b.mean()
    return _contrastive((diff * diff).sum(), pair.same_label, weights.margin_xi)


def pair_mmd2(cfg: KernelConfig, A: CloudBatch, B: CloudBatch) -> torch.Tensor:
    """Plug-in MMD^2 between A's i-th and B's i-th cloud, for every i at once"""

    if A.n != B.n:
        raise InputShapeError(f"cannot pair {A.n} clouds with {B.n}")

    def block(x: CloudBatch, y: CloudBatch) -> torch.Tensor:
        k = rbf_from_sqdist(cfg.lambda1, squared_distances(x.samples, y.samples))
        return torch.einsum("pa,pab,pb->p", x.weights, k, y.weights)

    return (block(A, A) + block(B, B) - 2.0 * block(A, B)).clamp_min(0.0)


def local_alignment_terms(
    cfg: KernelConfig,
    pairs: Sequence[PairIndex],
    mapped: Sequence[CloudBatch],
    weights: LossWeights,
    use_pcsa: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean positive-pair loss and mean negative-pair loss (0 for an empty category)"""

    zero = mapped[0].samples.new_zeros(()) if mapped else torch.zeros((), dtype=DTYPE)
    if not pairs:
        return zero, zero

    def gather(side: str) -> CloudBatch:
        samples = []
        cloud_weights = []
        for p in pairs:
            domain = mapped[p.domain_a if side == "a" else p.domain_b]
            index = p.index_a if side == "a" else p.index_b
            samples.append(domain.samples[index])
            cloud_weights.append(domain.weights[index])
        return CloudBatch(torch.stack(samples), torch.stack(cloud_weights))

    a = gather("a")
    b = gather("b")
    if use_pcsa:
        distance2 = pair_mmd2(cfg, a, b)
    else:
        diff = a.means() - b.means()
        distance2 = (diff * diff).sum(dim=-1)

    same = torch.tensor([p.same_label for p in pairs])
    values = _contrastive(distance2, same, weights.margin_xi)
    positive = values[same].mean() if bool(same.any()) else zero
    negative = values[~same].mean() if bool((~same).any()) else zero
    return positive, negative


def local_alignment_loss(
    cfg: KernelConfig,
    pairs: Sequence[PairIndex],
    mapped: Sequence[CloudBatch],
    weights: LossWeights,
    use_pcsa: bool = True,
) -> torch.Tensor:
    positive, negative = local_alignment_terms(cfg, pairs, mapped, weights, use_pcsa)
    return positive + negative


def _labels_of(domain: Any) -> np.ndarray:
    if isinstance(domain, DomainEmbeddings):
        return np.asarray(domain.labels, dtype=np.int64)
    return np.asarray(domain, dtype=np.int64).reshape(-1)


def _as_generator(rng: Any) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def draw_candidate_pairs(label_lists: Sequence[Any], count: int, rng: Any) -> List[PairIndex]:
    """
    Uniform cross-domain candidates: an unordered domain pair uniformly, then one item
    uniformly from each of the two domains.
    """

    labels = [_labels_of(domain) for domain in label_lists]
    if len(labels) < 2:
        raise ValidationError(f"pairs need at least two domains, got {len(labels)}")
    if any(len(domain) == 0 for domain in labels):
        raise ValidationError("cannot draw pairs from an empty domain batch")
    rng = _as_generator(rng)

    domain_pairs = [(i, j) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    choice = rng.integers(0, len(domain_pairs), size=count)
    u_a = rng.random(count)
    u_b = rng.random(count)
    candidates = []
    for c, fa, fb in zip(choice, u_a, u_b):
        da, db = domain_pairs[c]
        ia = int(fa * len(labels[da]))
        ib = int(fb * len(labels[db]))
        same = bool(labels[da][ia] == labels[db][ib])
        candidates.append(PairIndex(da, ia, db, ib, same))
    return candidates


def sample_pairs(batches: Sequence[Any], n_pairs: int, rng: Any) -> PairSampling:
    """
    Draw up to n_pairs positive (same class) and n_pairs negative cross-domain pairs.

    batches holds one entry per domain: its DomainEmbeddings or just its label sequence.
    """

    if isinstance(n_pairs, bool) or int(n_pairs) != n_pairs or n_pairs < 1:
        raise ValidationError(f"n_pairs must be a positive integer, got {n_pairs}")
    labels = [_labels_of(domain) for domain in batches]
    if len(labels) < 2:
        raise ValidationError(f"pairs need at least two domains, got {len(labels)}")
    if any(len(domain) == 0 for domain in labels):
        raise ValidationError("cannot draw pairs from an empty domain batch")
    rng = _as_generator(rng)

    has_positive = False
    has_negative = False
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            classes_i = set(labels[i].tolist())
            classes_j = set(labels[j].tolist())
            has_positive = has_positive or bool(classes_i & classes_j)
            # only two single-class domains of the same class lack negatives
            has_negative = has_negative or len(classes_i | classes_j) > 1

    positives: List[PairIndex] = []
    negatives: List[PairIndex] = []
    want_pos = n_pairs if has_positive else 0
    want_neg = n_pairs if has_negative else 0
    budget = 100 * n_pairs
    while (len(positives) < want_pos or len(negatives) < want_neg) and budget > 0:
        block = min(budget, 4 * n_pairs)
        budget -= block
        for pair in draw_candidate_pairs(labels, block, rng):
            if pair.same_label and len(positives) < want_pos:
                positives.append(pair)
            elif not pair.same_label and len(negatives) < want_neg:
                negatives.append(pair)

    if not has_positive or not has_negative:
        missing = "positive" if not has_positive else "negative"
        logger.warning(f"no cross-domain {missing} pairs can be formed from this batch")
    elif len(positives) < want_pos or len(negatives) < want_neg:
        logger.info(f"pair sampling came up short: {len(positives)}+/{len(negatives)}-")
    return PairSampling(
        tuple(positives),
        tuple(negatives),
        positives_unrealizable=not has_positive,
        negatives_unrealizable=not has_negative,
    )


def _scalar(value: Any) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.sum() if value.dim() > 0 else value
    if isinstance(value, (list, tuple)):
        if not value:
            return torch.zeros((), dtype=DTYPE)
        return torch.stack([_scalar(v) for v in value]).sum()
    return torch.as_tensor(float(value), dtype=DTYPE)


def total_objective(
    class_losses: Any,
    kl_extractor: Any,
    kl_classifier: Any,
    local_loss: Any,
    global_loss: Any,
    weights: LossWeights,
    kl_scale: float = 1.0,
) -> torch.Tensor:
    """sum L_c + kl_scale (KL_Q + KL_C) + beta1 L_local + beta2 L_global"""

    named = {
        "classification": _scalar(class_losses),
        "kl_extractor": _scalar(kl_extractor),
        "kl_classifier": _scalar(kl_classifier),
        "local": _scalar(local_loss),
        "global": _scalar(global_loss),
    }
    for name, value in named.items():
        if not math.isfinite(float(value.detach())):
            raise NumericError(f"loss component {name} is not finite", where=name)

    return (
        named["classification"]
        + kl_scale * (named["kl_extractor"] + named["kl_classifier"])
        + weights.beta1 * named["local"]
        + weights.beta2 * named["global"]
    )


def predictive_entropy(probs: torch.Tensor) -> torch.Tensor:
    probs = as_tensor(probs)
    return -(probs * torch.log(probs + LOG_EPS)).sum(dim=-1)

