import math

import numpy as np
import pytest
import torch

from kernel import DTYPE, KernelConfig, rbf_kernel
from losses import (
    LossComponents,
    LossKind,
    LossWeights,
    PairSample,
    classification_loss,
    classification_losses,
    draw_candidate_pairs,
    local_alignment_loss,
    local_alignment_terms,
    mean_csa_loss,
    pair_mmd2,
    pcsa_loss,
    predictive_entropy,
    sample_pairs,
    total_objective,
)
from pdg_errors import InputShapeError, NumericError, ValidationError
from prob_embedding import CloudBatch, DomainEmbeddings, ProbEmbedding


def cloud(rows):
    return ProbEmbedding(torch.as_tensor(np.asarray(rows, dtype=np.float64)))


@pytest.mark.parametrize("kind", list(LossKind))
def test_classification_one_hot_is_zero(kind):
    assert float(classification_loss([0.0, 1.0, 0.0], 1, kind)) == pytest.approx(0.0, abs=1e-9)


def test_classification_uniform_cross_entropy():
    value = classification_loss([0.25] * 4, 2, LossKind.CROSS_ENTROPY)
    assert float(value) == pytest.approx(math.log(4.0), abs=1e-9)


def test_focal_without_focusing_is_cross_entropy(rng):
    probs = torch.as_tensor(rng.dirichlet(np.ones(3), size=100))
    labels = rng.integers(0, 3, size=100)
    focal = classification_losses(probs, labels, LossKind.FOCAL, gamma=0.0)
    cross_entropy = classification_losses(probs, labels, "cross_entropy")
    torch.testing.assert_close(focal, cross_entropy)


def test_focal_down_weights_easy_items():
    easy = float(classification_loss([0.1, 0.9], 1, LossKind.FOCAL, gamma=2.0))
    assert easy < float(classification_loss([0.1, 0.9], 1)) * 0.05


def test_classification_validation():
    with pytest.raises(ValidationError):
        classification_loss([0.5, 0.5], 2)
    with pytest.raises(ValidationError):
        classification_loss([0.5, 0.7], 0)
    with pytest.raises(InputShapeError):
        classification_losses(torch.ones(2, 2, dtype=DTYPE) / 2, [0])
    with pytest.raises(ValueError):
        LossKind("hinge")


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(beta1=0.1, beta2=0.7, margin_xi=1.0, t_passes=10)
    for bad in ({"beta1": -0.1}, {"margin_xi": 0.0}, {"t_passes": 0}, {"t_passes": 1.5}):
        with pytest.raises(ValidationError):
            LossWeights(**bad)


def test_pcsa_identical_clouds(cfg, rng):
    rows = rng.normal(size=(4, 2))
    weights = LossWeights()
    same = PairSample(cloud(rows), cloud(rows), True, 0, 1)
    different = PairSample(cloud(rows), cloud(rows), False, 0, 1)
    assert float(pcsa_loss(cfg, same, weights)) == pytest.approx(0.0, abs=1e-12)
    assert float(pcsa_loss(cfg, different, weights)) == pytest.approx(0.5, abs=1e-12)


def test_pcsa_positive_is_half_the_cloud_distance(cfg, rng):
    a, b = cloud(rng.normal(size=(5, 3))), cloud(rng.normal(size=(4, 3)) + 0.4)
    pair = PairSample(a, b, True, 0, 1)
    distance2 = pair_mmd2(cfg, CloudBatch.from_members([a]), CloudBatch.from_members([b]))
    assert float(pcsa_loss(cfg, pair, LossWeights())) == pytest.approx(
        0.5 * float(distance2[0]), rel=1e-12
    )


def test_pcsa_single_pass_is_one_minus_kernel(rng):
    cfg = KernelConfig(lambda1=0.6)
    for _ in range(10):
        x, y = rng.normal(size=(2, 3))
        pair = PairSample(cloud([x]), cloud([y]), True, 0, 1)
        expected = 1.0 - float(rbf_kernel(cfg, x, y))
        assert float(pcsa_loss(cfg, pair, LossWeights())) == pytest.approx(expected, rel=1e-12)


def test_pcsa_negative_pairs_stop_pushing_with_distance(cfg):
    weights = LossWeights(margin_xi=1.0)
    origin = cloud([[0.0, 0.0]])
    losses = [
        float(pcsa_loss(cfg, PairSample(origin, cloud([[s, 0.0]]), False, 0, 1), weights))
        for s in np.linspace(0.0, 3.0, 13)
    ]
    assert losses[0] == pytest.approx(0.5)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    # 2 - 2 exp(-s^2 / 2) passes the margin beyond s = sqrt(2 ln 2)
    assert losses[-1] == 0.0


def test_pcsa_margin_satisfied_far_apart(cfg, rng):
    near = cloud(rng.normal(size=(3, 2)))
    far = cloud(rng.normal(size=(3, 2)) + 100.0)
    pair = PairSample(near, far, False, 0, 1)
    # each cloud alone contributes at least 1/T to the plug-in estimate
    assert float(pcsa_loss(cfg, pair, LossWeights(margin_xi=0.5))) == 0.0


def test_mean_csa(rng):
    rows = rng.normal(size=(3, 2))
    weights = LossWeights(margin_xi=1.0)
    assert float(mean_csa_loss(PairSample(cloud(rows), cloud(rows), True, 0, 1), weights)) == 0.0
    shifted = PairSample(cloud(rows), cloud(rows + np.array([1.0, 0.0])), True, 0, 1)
    assert float(mean_csa_loss(shifted, weights)) == pytest.approx(0.5, rel=1e-12)
    apart = PairSample(cloud(rows), cloud(rows), False, 0, 1)
    assert float(mean_csa_loss(apart, weights)) == 0.5


def test_pair_sample_needs_two_domains(rng):
    with pytest.raises(ValidationError):
        PairSample(cloud(rng.normal(size=(2, 2))), cloud(rng.normal(size=(2, 2))), True, 1, 1)


def test_sample_pairs_single_items():
    sampling = sample_pairs([[2], [2]], n_pairs=1, rng=0)
    assert len(sampling.positives) == 1
    assert sampling.negatives == ()
    assert sampling.negatives_unrealizable and not sampling.positives_unrealizable
    pair = sampling.positives[0]
    assert (pair.domain_a, pair.index_a, pair.domain_b, pair.index_b) == (0, 0, 1, 0)


def test_sample_pairs_deterministic_and_cross_domain(rng):
    labels = [rng.integers(0, 3, size=10) for _ in range(3)]
    first = sample_pairs(labels, 8, 5)
    assert first == sample_pairs(labels, 8, 5)
    assert len(first.positives) == 8 and len(first.negatives) == 8
    for pair in first.pairs:
        assert pair.domain_a < pair.domain_b
        same = labels[pair.domain_a][pair.index_a] == labels[pair.domain_b][pair.index_b]
        assert pair.same_label == bool(same)


def test_sample_pairs_accepts_domain_embeddings(rng):
    domains = [
        DomainEmbeddings([cloud(rng.normal(size=(2, 2))) for _ in range(3)], [0, 1, 1])
        for _ in range(2)
    ]
    sampling = sample_pairs(domains, 2, 0)
    materialized = sampling.materialize(domains)
    assert len(materialized) == len(sampling.pairs)
    assert all(isinstance(p, PairSample) for p in materialized)


def test_sample_pairs_validation():
    with pytest.raises(ValidationError):
        sample_pairs([[0, 1]], 2, 0)
    with pytest.raises(ValidationError):
        sample_pairs([[0], []], 2, 0)
    with pytest.raises(ValidationError):
        sample_pairs([[0], [1]], 0, 0)


def test_candidate_positive_fraction_balanced(rng):
    labels = [rng.permutation(np.arange(30) % 3) for _ in range(2)]
    candidates = draw_candidate_pairs(labels, 1000, rng)
    fraction = np.mean([c.same_label for c in candidates])
    sigma = math.sqrt((1 / 3) * (2 / 3) / 1000)
    assert abs(fraction - 1 / 3) <= 3 * sigma


def test_local_alignment_matches_pair_losses(cfg, rng):
    labels = [rng.integers(0, 2, size=6) for _ in range(2)]
    mapped = [CloudBatch.from_tensor(torch.as_tensor(rng.normal(size=(6, 3, 2)))) for _ in range(2)]
    sampling = sample_pairs(labels, 4, 1)
    weights = LossWeights()
    positive, negative = local_alignment_terms(cfg, sampling.pairs, mapped, weights)

    pairs = sampling.materialize(mapped)
    expected_pos = np.mean([float(pcsa_loss(cfg, p, weights)) for p in pairs if p.same_label])
    expected_neg = np.mean([float(pcsa_loss(cfg, p, weights)) for p in pairs if not p.same_label])
    assert float(positive) == pytest.approx(expected_pos, rel=1e-12, abs=1e-12)
    assert float(negative) == pytest.approx(expected_neg, rel=1e-12, abs=1e-12)
    assert float(local_alignment_loss(cfg, sampling.pairs, mapped, weights)) == pytest.approx(
        expected_pos + expected_neg, rel=1e-12, abs=1e-12
    )


def test_local_alignment_mean_csa_variant(cfg, rng):
    labels = [rng.integers(0, 2, size=5) for _ in range(2)]
    mapped = [CloudBatch.from_tensor(torch.as_tensor(rng.normal(size=(5, 4, 2)))) for _ in range(2)]
    sampling = sample_pairs(labels, 3, 2)
    weights = LossWeights()
    value = local_alignment_loss(cfg, sampling.pairs, mapped, weights, use_pcsa=False)
    pairs = sampling.materialize(mapped)
    expected = sum(
        np.mean([float(mean_csa_loss(p, weights)) for p in pairs if p.same_label == same])
        for same in (True, False)
    )
    assert float(value) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_local_alignment_empty(cfg):
    mapped = [CloudBatch.from_tensor(torch.zeros(1, 1, 2, dtype=DTYPE))] * 2
    positive, negative = local_alignment_terms(cfg, [], mapped, LossWeights())
    assert float(positive) == 0.0 and float(negative) == 0.0


def test_total_objective():
    weights = LossWeights(beta1=0.1, beta2=0.7)
    assert float(total_objective(1.0, 0.2, 0.1, 0.4, 0.3, weights)) == pytest.approx(1.55)
    assert float(total_objective(0.0, 0.0, 0.0, 0.0, 0.0, weights)) == 0.0
    plain = LossWeights(beta1=0.0, beta2=0.0)
    assert float(total_objective([0.5, 0.5], 0.2, 0.1, 9.0, 9.0, plain)) == pytest.approx(1.3)
    assert float(total_objective(1.0, 0.2, 0.1, 0.0, 0.0, weights, kl_scale=0.5)) == (
        pytest.approx(1.15)
    )


def test_total_objective_is_linear_in_its_components(rng):
    weights = LossWeights(beta1=0.3, beta2=1.7)
    u, v = rng.uniform(0.0, 2.0, size=(2, 5))
    combined = float(total_objective(*(u + 2.5 * v), weights, kl_scale=0.4))
    separate = float(total_objective(*u, weights, kl_scale=0.4)) + 2.5 * float(
        total_objective(*v, weights, kl_scale=0.4)
    )
    assert combined == pytest.approx(separate, rel=1e-12)


def test_total_objective_names_non_finite_component():
    with pytest.raises(NumericError, match="global") as info:
        total_objective(1.0, 0.0, 0.0, 0.0, float("nan"), LossWeights())
    assert info.value.where == "global"


def test_predictive_entropy():
    uniform = torch.full((2, 4), 0.25, dtype=DTYPE)
    expected = torch.full((2,), math.log(4.0), dtype=DTYPE)
    torch.testing.assert_close(predictive_entropy(uniform), expected)


def test_loss_components_row():
    row = LossComponents(1.0, 0.1, 0.2, 0.3, 0.4, 2.0).as_row(7)
    assert row == [7, 1.0, 0.1, 0.2, 0.3, 0.4, 2.0]
