"""
Library for probabilistic embeddings and the probabilistic MMD.

A probabilistic embedding is one data point's latent distribution, materialized as
T Monte Carlo samples. A domain is a list of such embeddings, i.e. a distribution over
distributions. Distributions are compared through their empirical kernel mean
embeddings (level-1 kernel) and a Gaussian RBF on the RKHS distance between those mean
embeddings (level-2 kernel).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from kernel import (
    DTYPE,
    Estimator,
    KernelConfig,
    as_tensor,
    floor_at_zero,
    mmd2,
    rbf_from_sqdist,
    squared_distances,
)
from pdg_errors import InputShapeError, ValidationError

logger = logging.getLogger(__name__)


class GlobalMode(Enum):
    QUADRATIC = "quadratic"
    LINEAR = "linear"


@dataclass(frozen=True)
class ProbEmbedding:
    """T x d matrix of Monte Carlo draws from one latent distribution"""

    samples: torch.Tensor

    def __post_init__(self):
        samples = as_tensor(self.samples)
        if samples.dim() != 2:
            raise InputShapeError(
                f"embedding samples must be T x d, got shape {tuple(samples.shape)}"
            )
        if samples.shape[0] < 1:
            raise ValidationError("embedding has no samples (T must be >= 1)")
        if samples.shape[1] < 1:
            raise InputShapeError("embedding has zero dimension")
        if not bool(torch.isfinite(samples.detach()).all()):
            raise ValidationError("embedding contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def t(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> torch.Tensor:
        return self.samples.mean(dim=0)


@dataclass(frozen=True)
class DomainEmbeddings:
    """The embeddings of one domain together with their class labels"""

    members: Tuple[ProbEmbedding, ...]
    labels: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "labels", tuple(int(label) for label in self.labels))
        if len(self.members) < 1:
            raise ValidationError("a domain needs at least one embedding")
        if len(self.members) != len(self.labels):
            raise ValidationError(
                f"{len(self.members)} embeddings but {len(self.labels)} labels"
            )
        if any(label < 0 for label in self.labels):
            raise ValidationError("class labels must be non-negative")
        dims = {member.d for member in self.members}
        if len(dims) != 1:
            raise InputShapeError(f"embeddings of one domain differ in dimension: {dims}")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class CloudBatch:
    """
    Stacked form of a list of embeddings.

    samples is n x T_max x d; weights is n x T_max and holds 1/T_i on the real samples
    of member i and 0 on padding rows, so members may have different T.
    """

    samples: torch.Tensor
    weights: torch.Tensor

    @classmethod
    def from_tensor(cls, samples: torch.Tensor) -> "CloudBatch":
        samples = as_tensor(samples)
        if samples.dim() != 3:
            raise InputShapeError(
                f"stacked embeddings must be n x T x d, got {tuple(samples.shape)}"
            )
        n, t, d = samples.shape
        if n < 1:
            raise ValidationError("domain has no embeddings")
        if t < 1 or d < 1:
            raise InputShapeError(f"invalid embedding shape T={t}, d={d}")
        if not bool(torch.isfinite(samples.detach()).all()):
            raise ValidationError("embeddings contain non-finite samples")
        weights = torch.full((n, t), 1.0 / t, dtype=DTYPE)
        return cls(samples, weights)

    @classmethod
    def from_members(cls, members: Sequence[ProbEmbedding]) -> "CloudBatch":
        members = list(members)
        if not members:
            raise ValidationError("domain has no embeddings")
        dims = {member.d for member in members}
        if len(dims) != 1:
            raise InputShapeError(f"embeddings differ in dimension: {dims}")
        lengths = [member.t for member in members]
        if len(set(lengths)) == 1:
            return cls.from_tensor(torch.stack([member.samples for member in members]))

        t_max = max(lengths)
        padded = []
        weights = torch.zeros((len(members), t_max), dtype=DTYPE)
        for i, member in enumerate(members):
            pad = member.samples.new_zeros((t_max - member.t, member.d))
            padded.append(torch.cat([member.samples, pad], dim=0))
            weights[i, : member.t] = 1.0 / member.t
        return cls(torch.stack(padded), weights)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[2]

    def __len__(self) -> int:
        return self.n

    def means(self) -> torch.Tensor:
        return torch.einsum("it,itd->id", self.weights, self.samples)

    def select(self, index: Union[Sequence[int], np.ndarray, torch.Tensor]) -> "CloudBatch":
        index = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return CloudBatch(self.samples[index], self.weights[index])

    def member(self, i: int) -> ProbEmbedding:
        rows = self.weights[i] > 0
        return ProbEmbedding(self.samples[i][rows])


DomainLike = Union[CloudBatch, DomainEmbeddings, Sequence[ProbEmbedding], torch.Tensor]


def as_cloud_batch(domain: Any) -> CloudBatch:
    if isinstance(domain, CloudBatch):
        return domain
    if isinstance(domain, DomainEmbeddings):
        return CloudBatch.from_members(domain.members)
    if isinstance(domain, ProbEmbedding):
        return CloudBatch.from_members([domain])
    if isinstance(domain, (torch.Tensor, np.ndarray)):
        return CloudBatch.from_tensor(as_tensor(domain))
    return CloudBatch.from_members(list(domain))


def _check_same_dim(a: CloudBatch, b: CloudBatch) -> None:
    if a.d != b.d:
        raise InputShapeError(f"embedding dimension mismatch: {a.d} vs {b.d}")


def kme_gram(cfg: KernelConfig, A: CloudBatch, B: CloudBatch) -> torch.Tensor:
    """Matrix of empirical mean-embedding inner products <mu_A_i, mu_B_j>"""

    _check_same_dim(A, B)
    flat_a = A.samples.reshape(-1, A.d)
    flat_b = B.samples.reshape(-1, B.d)
    k = rbf_from_sqdist(cfg.lambda1, squared_distances(flat_a, flat_b))
    k = k.reshape(A.n, A.samples.shape[1], B.n, B.samples.shape[1])
    return torch.einsum("ia,iajb,jb->ij", A.weights, k, B.weights)


def kme_pairs(
    cfg: KernelConfig,
    A: CloudBatch,
    index_a: torch.Tensor,
    B: CloudBatch,
    index_b: torch.Tensor,
) -> torch.Tensor:
    """Mean-embedding inner products for the listed pairs only (O(pairs) work)"""

    _check_same_dim(A, B)
    k = rbf_from_sqdist(
        cfg.lambda1, squared_distances(A.samples[index_a], B.samples[index_b])
    )
    return torch.einsum("pa,pab,pb->p", A.weights[index_a], k, B.weights[index_b])


def _level2_from_kme(
    cfg: KernelConfig,
    cross: torch.Tensor,
    self_a: torch.Tensor,
    self_b: torch.Tensor,
) -> torch.Tensor:
    # ||mu_A - mu_B||^2 = <A,A> - 2<A,B> + <B,B>, never negative in exact arithmetic
    distance = (self_a.unsqueeze(-1) - 2.0 * cross + self_b.unsqueeze(-2)).clamp_min(0.0)
    return torch.exp((-0.5 * cfg.lambda2) * distance)


def _level2_pairs(
    cfg: KernelConfig, cross: torch.Tensor, self_a: torch.Tensor, self_b: torch.Tensor
) -> torch.Tensor:
    distance = (self_a - 2.0 * cross + self_b).clamp_min(0.0)
    return torch.exp((-0.5 * cfg.lambda2) * distance)


def _single(embedding: Any) -> CloudBatch:
    if not isinstance(embedding, ProbEmbedding):
        embedding = ProbEmbedding(as_tensor(embedding))
    return CloudBatch.from_members([embedding])


def kme_inner(cfg: KernelConfig, A: Any, B: Any) -> torch.Tensor:
    """Empirical <mu_A, mu_B> = 1/(T_A T_B) sum_i sum_j k(a_i, b_j)"""

    return kme_gram(cfg, _single(A), _single(B))[0, 0]


def level2_kernel(cfg: KernelConfig, A: Any, B: Any) -> torch.Tensor:
    """K(A, B) = exp(-lambda2/2 * ||mu_A - mu_B||^2), a kernel between distributions"""

    a = _single(A)
    b = _single(B)
    _check_same_dim(a, b)
    return _level2_from_kme(
        cfg, kme_gram(cfg, a, b), kme_gram(cfg, a, a)[0], kme_gram(cfg, b, b)[0]
    )[0, 0]


def level2_gram(cfg: KernelConfig, Dl: DomainLike, Dt: DomainLike) -> torch.Tensor:
    """|Dl| x |Dt| matrix of level-2 kernel values"""

    a = as_cloud_batch(Dl)
    b = as_cloud_batch(Dt)
    _check_same_dim(a, b)
    self_a = kme_gram(cfg, a, a).diagonal()
    self_b = kme_gram(cfg, b, b).diagonal()
    return _level2_from_kme(cfg, kme_gram(cfg, a, b), self_a, self_b)


def pmmd2(
    cfg: KernelConfig, Dl: DomainLike, Dt: DomainLike, unbiased: bool = False
) -> torch.Tensor:
    """
    Probabilistic MMD between two domains of embeddings.

    Plug-in form: mean K_ll + mean K_tt - 2 mean K_lt over level-2 kernel blocks.
    With unbiased=True the within-domain blocks exclude their diagonal.
    """

    a = as_cloud_batch(Dl)
    b = as_cloud_batch(Dt)
    _check_same_dim(a, b)

    g_ll = kme_gram(cfg, a, a)
    g_tt = kme_gram(cfg, b, b)
    g_lt = kme_gram(cfg, a, b)
    self_l = g_ll.diagonal()
    self_t = g_tt.diagonal()

    k_ll = _level2_from_kme(cfg, g_ll, self_l, self_l)
    k_tt = _level2_from_kme(cfg, g_tt, self_t, self_t)
    k_lt = _level2_from_kme(cfg, g_lt, self_l, self_t)

    if not unbiased:
        return floor_at_zero(k_ll.mean() + k_tt.mean() - 2.0 * k_lt.mean(), "pmmd2")

    n_l, n_t = a.n, b.n
    if n_l < 2 or n_t < 2:
        raise ValidationError(
            f"unbiased P-MMD needs at least two embeddings per domain (got {n_l}, {n_t})"
        )
    within_l = (k_ll.sum() - k_ll.diagonal().sum()) / (n_l * (n_l - 1))
    within_t = (k_tt.sum() - k_tt.diagonal().sum()) / (n_t * (n_t - 1))
    return within_l + within_t - 2.0 * k_lt.mean()


@dataclass(frozen=True)
class LinearPairing:
    """Index quadruples of the linear-time estimator, one entry per term"""

    l_a: np.ndarray
    l_b: np.ndarray
    t_a: np.ndarray
    t_b: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(x, dtype=np.int64) for x in (self.l_a, self.l_b, self.t_a, self.t_b)]
        if len({len(x) for x in arrays}) != 1 or len(arrays[0]) < 1:
            raise ValidationError("linear pairing index arrays must be non-empty and equal length")
        for name, value in zip(("l_a", "l_b", "t_a", "t_b"), arrays):
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.l_a)


def _as_generator(rng: Any) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _distinct_pair(n: int, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    first = rng.integers(0, n, size=size)
    # uniform over ordered pairs with first != second
    second = (first + rng.integers(1, n, size=size)) % n
    return first, second


def draw_linear_pairing(n_l: int, n_t: int, rng: Any) -> LinearPairing:
    """
    Draw min(n_l, n_t) // 2 independent terms; every term uses two distinct members of
    each domain, terms are drawn with replacement.
    """

    if n_l < 2 or n_t < 2:
        raise ValidationError(
            f"linear P-MMD needs at least two embeddings per domain (got {n_l}, {n_t})"
        )
    rng = _as_generator(rng)
    terms = max(1, min(n_l, n_t) // 2)
    l_a, l_b = _distinct_pair(n_l, terms, rng)
    t_a, t_b = _distinct_pair(n_t, terms, rng)
    return LinearPairing(l_a, l_b, t_a, t_b)


def pmmd2_linear(
    cfg: KernelConfig,
    Dl: DomainLike,
    Dt: DomainLike,
    rng: Any = None,
    pairing: Optional[LinearPairing] = None,
) -> torch.Tensor:
    """
    Linear-time P-MMD estimate: the mean over terms of
    K(l_a, l_b) + K(t_a, t_b) - K(l_a, t_b) - K(l_b, t_a).

    Its expectation is the unbiased (U-statistic) P-MMD; single estimates may be negative.
    """

    a = as_cloud_batch(Dl)
    b = as_cloud_batch(Dt)
    _check_same_dim(a, b)
    if pairing is None:
        pairing = draw_linear_pairing(a.n, b.n, rng)
    elif a.n < 2 or b.n < 2:
        raise ValidationError(
            f"linear P-MMD needs at least two embeddings per domain (got {a.n}, {b.n})"
        )
    if max(pairing.l_a.max(), pairing.l_b.max()) >= a.n or max(
        pairing.t_a.max(), pairing.t_b.max()
    ) >= b.n:
        raise ValidationError("linear pairing indexes past the end of a domain")

    l_a, l_b = torch.as_tensor(pairing.l_a), torch.as_tensor(pairing.l_b)
    t_a, t_b = torch.as_tensor(pairing.t_a), torch.as_tensor(pairing.t_b)

    everyone_l = torch.arange(a.n)
    everyone_t = torch.arange(b.n)
    self_l = kme_pairs(cfg, a, everyone_l, a, everyone_l)
    self_t = kme_pairs(cfg, b, everyone_t, b, everyone_t)

    def level2(x: CloudBatch, ix, self_x, y: CloudBatch, iy, self_y) -> torch.Tensor:
        return _level2_pairs(cfg, kme_pairs(cfg, x, ix, y, iy), self_x[ix], self_y[iy])

    terms = (
        level2(a, l_a, self_l, a, l_b, self_l)
        + level2(b, t_a, self_t, b, t_b, self_t)
        - level2(a, l_a, self_l, b, t_b, self_t)
        - level2(a, l_b, self_l, b, t_a, self_t)
    )
    return terms.mean()


def mean_embedding_mmd2(cfg: KernelConfig, Dl: DomainLike, Dt: DomainLike) -> torch.Tensor:
    """Ablation baseline: collapse every cloud to its mean vector, then plug-in MMD"""

    a = as_cloud_batch(Dl)
    b = as_cloud_batch(Dt)
    _check_same_dim(a, b)
    return mmd2(cfg, a.means(), b.means(), estimator=Estimator.BIASED_V_STATISTIC)


def draw_global_pairings(
    sizes: Sequence[int], rng: Any
) -> Dict[Tuple[int, int], LinearPairing]:
    """One frozen linear pairing per unordered domain pair (i < j)"""

    rng = _as_generator(rng)
    pairings = {}
    for i in range(len(sizes)):
        for j in range(i + 1, len(sizes)):
            pairings[(i, j)] = draw_linear_pairing(sizes[i], sizes[j], rng)
    return pairings


def global_alignment_loss(
    cfg: KernelConfig,
    domains: Sequence[DomainLike],
    mode: Union[GlobalMode, str] = GlobalMode.QUADRATIC,
    rng: Any = None,
    use_mean_embedding: bool = False,
    pairings: Optional[Dict[Tuple[int, int], LinearPairing]] = None,
) -> torch.Tensor:
    """
    (1/K^2) * sum over all ordered domain pairs (i, j) of P-MMD(D_i, D_j)^2.

    Self-pairs contribute 0 and (i, j), (j, i) share one evaluation, so the sum is
    2/K^2 times the sum over i < j. The mean-embedding baseline always uses the
    quadratic form.
    """

    mode = GlobalMode(mode)
    batches: List[CloudBatch] = [as_cloud_batch(domain) for domain in domains]
    k = len(batches)
    if k < 2:
        raise ValidationError(f"global alignment needs at least two domains, got {k}")
    if len({batch.d for batch in batches}) != 1:
        raise InputShapeError("domains differ in embedding dimension")

    if mode is GlobalMode.LINEAR and not use_mean_embedding and pairings is None:
        pairings = draw_global_pairings([batch.n for batch in batches], rng)

    total = batches[0].samples.new_zeros(())
    for i in range(k):
        for j in range(i + 1, k):
            if use_mean_embedding:
                term = mean_embedding_mmd2(cfg, batches[i], batches[j])
            elif mode is GlobalMode.QUADRATIC:
                term = pmmd2(cfg, batches[i], batches[j])
            else:
                term = pmmd2_linear(cfg, batches[i], batches[j], pairing=pairings[(i, j)])
            total = total + 2.0 * term
    return total / float(k * k)
