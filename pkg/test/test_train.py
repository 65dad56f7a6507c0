import numpy as np
import pytest
import torch
from torch import nn

import train
from bayes_net import NetworkStack
from domain_data import DomainData, SyntheticSpec, generate_domains
from kernel import DTYPE
from losses import LossComponents, LossWeights
from pdg_errors import DataFormatError, ValidationError
from prob_embedding import GlobalMode
from train import (
    Ablation,
    GradientResult,
    GradientVector,
    StepSetup,
    TrainConfig,
    adam_step,
    compute_gradients,
    draw_batch,
    draw_step,
    evaluate_lodo,
    fit,
    gradient_check,
    predict_domain,
    pretrain_deterministic,
    read_loss_csv,
    relative_gradient_error,
    write_loss_csv,
)


def toy_model(seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = NetworkStack(3, 2, hidden=(4,), latent=3, metric_hidden=(3,), metric_out=2)
    with torch.no_grad():
        for layer in model.bayes_layers().values():
            for variational in (layer.weights, layer.biases):
                variational.set_posterior(
                    variational.mu, torch.full(variational.shape, 0.1, dtype=DTYPE)
                )
    return model


def toy_domains(n=8, d=3, count=2, seed=0):
    rng = np.random.default_rng(seed)
    return [
        DomainData(j, rng.normal(size=(n, d)) + j, rng.permutation(np.arange(n) % 2))
        for j in range(count)
    ]


def toy_setup(**overrides):
    defaults = dict(
        weights=LossWeights(t_passes=3),
        n_pairs=4,
        batch_per_domain=6,
        iterations=2,
        pretrain_iterations=5,
    )
    config = TrainConfig(**{**defaults, **overrides})
    return StepSetup(config)


def toy_batches(config, iteration=0):
    return [
        draw_batch(domain, config.batch_per_domain, config.seed, iteration)
        for domain in toy_domains()
    ]


def test_train_config_validation():
    assert TrainConfig().global_mode is GlobalMode.QUADRATIC
    assert TrainConfig(global_mode="linear").global_mode is GlobalMode.LINEAR
    for bad in ({"learning_rate": -1.0}, {"n_pairs": 0}, {"iterations": -1}, {"moped_delta": 0.0}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_disabled_components_get_zero_weight():
    setup = StepSetup(ablation=Ablation(disable_local=True, disable_global=True))
    weights = setup.effective_weights()
    assert weights.beta1 == 0.0 and weights.beta2 == 0.0
    assert weights.t_passes == setup.config.weights.t_passes


def test_adam_zero_gradient_keeps_parameters():
    p = nn.Parameter(torch.tensor([0.5, -1.0], dtype=DTYPE))
    adam_step([p], torch.zeros(2, dtype=DTYPE), lr=0.1)
    torch.testing.assert_close(p.detach(), torch.tensor([0.5, -1.0], dtype=DTYPE))


def test_adam_zero_learning_rate_keeps_parameters_bit_identical():
    p = nn.Parameter(torch.tensor([0.1, -3.7, 1e-20], dtype=DTYPE))
    before = p.detach().clone()
    state = None
    for grad in ([1.0, -2.0, 0.5], [1e3, 1e-8, -4.0]):
        state = adam_step([p], torch.tensor(grad, dtype=DTYPE), state, lr=0.0)
    assert torch.equal(p.detach(), before)


def test_adam_first_step_moves_by_learning_rate():
    p = nn.Parameter(torch.tensor([0.5, -1.0], dtype=DTYPE))
    state = adam_step([p], torch.tensor([3.0, -0.2], dtype=DTYPE), lr=1e-3)
    assert state.step_count == 1
    moved = (p.detach() - torch.tensor([0.5, -1.0], dtype=DTYPE)).numpy()
    assert moved == pytest.approx([-1e-3, 1e-3], rel=1e-4)


def test_adam_descends_quadratic():
    p = nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    state = None
    trajectory = []
    for _ in range(50):
        state = adam_step([p], 2.0 * p.detach(), state, lr=0.01)
        trajectory.append(float(p))
    assert all(b < a for a, b in zip(trajectory, trajectory[1:]))
    assert trajectory[-1] < 0.6


def test_adam_rejects_mismatched_gradient():
    p = nn.Parameter(torch.zeros(3, dtype=DTYPE))
    with pytest.raises(ValidationError):
        adam_step([p], torch.zeros(2, dtype=DTYPE))


def test_draw_step_is_reproducible():
    model = toy_model()
    setup = toy_setup()
    batches = toy_batches(setup.config)
    first = draw_step(model, batches, setup.config, 3)
    second = draw_step(model, batches, setup.config, 3)
    assert first.pairs == second.pairs
    for passes_a, passes_b in zip(first.noise, second.noise):
        for a, b in zip(passes_a, passes_b):
            torch.testing.assert_close(a.extractor.weight, b.extractor.weight, rtol=0, atol=0)
            torch.testing.assert_close(a.classifier.bias, b.classifier.bias, rtol=0, atol=0)
    other = draw_step(model, batches, setup.config, 4)
    assert not torch.equal(first.noise[0][0].extractor.weight, other.noise[0][0].extractor.weight)


def test_draw_batch_without_replacement():
    domain = toy_domains(n=8)[0]
    batch = draw_batch(domain, 20, 0, 0)
    assert batch.n == 8
    assert sorted(batch.indices.tolist()) == list(range(8))


@pytest.mark.parametrize(
    "component, untouched",
    [
        ("classification", ("metric.",)),
        ("kl", ("extractor_backbone.", "metric.")),
        ("global", ("classifier.", "metric.")),
    ],
)
def test_parameters_off_the_path_get_zero_gradient(component, untouched):
    model = toy_model()
    setup = toy_setup()
    result = compute_gradients(model, toy_batches(setup.config), setup, 0, component)
    for name in result.gradient.names:
        block = result.gradient.block(name)
        if name.startswith(untouched):
            assert torch.count_nonzero(block) == 0, name
    assert torch.count_nonzero(result.gradient.values) > 0


def test_detached_metric_input_keeps_local_loss_off_the_extractor():
    model = toy_model()
    setup = toy_setup(detach_metric_input=True)
    result = compute_gradients(model, toy_batches(setup.config), setup, 0, "local")
    for name in result.gradient.names:
        if not name.startswith("metric."):
            assert torch.count_nonzero(result.gradient.block(name)) == 0, name


def test_unknown_component():
    model = toy_model()
    setup = toy_setup()
    with pytest.raises(ValidationError):
        compute_gradients(model, toy_batches(setup.config), setup, 0, "entropy")


@pytest.mark.parametrize("mode", list(GlobalMode))
def test_gradient_check_total(mode):
    model = toy_model()
    setup = toy_setup(global_mode=mode)
    result = gradient_check(model, toy_batches(setup.config), setup)
    assert result.n_parameters == sum(p.numel() for p in model.parameters())
    assert result.max_relative_error < 1e-4, result.worst_parameter


def test_relative_gradient_error_has_no_coarse_floor():
    assert relative_gradient_error(1e-4, 5e-5) == pytest.approx(0.5)
    assert relative_gradient_error(-2e-9, -1e-9) == pytest.approx(0.5)
    assert relative_gradient_error(0.0, 0.0) == 0.0


def shrink_objective(monkeypatch, scale=1e-6):
    evaluate = train.evaluate_objective

    def scaled(*args, **kwargs):
        return {name: scale * term for name, term in evaluate(*args, **kwargs).items()}

    monkeypatch.setattr(train, "evaluate_objective", scaled)


def test_gradient_check_is_scale_free(monkeypatch):
    shrink_objective(monkeypatch)
    model = toy_model()
    setup = toy_setup()
    result = gradient_check(model, toy_batches(setup.config), setup)
    assert result.max_relative_error < 1e-4, result.worst_parameter


def test_gradient_check_catches_small_wrong_gradients(monkeypatch):
    shrink_objective(monkeypatch)
    gradients = train.compute_gradients

    def halved(*args, **kwargs):
        result = gradients(*args, **kwargs)
        g = result.gradient
        return GradientResult(
            result.components, GradientVector(0.5 * g.values, g.names, g.sizes), result.draws
        )

    monkeypatch.setattr(train, "compute_gradients", halved)
    model = toy_model()
    setup = toy_setup()
    result = gradient_check(model, toy_batches(setup.config), setup)
    assert result.max_relative_error > 0.4
    assert result.narrow_step_error == pytest.approx(0.5, abs=0.05)


def test_gradient_check_rejects_bad_step():
    model = toy_model()
    setup = toy_setup()
    with pytest.raises(ValidationError):
        gradient_check(model, toy_batches(setup.config), setup, h=0.0)


def test_fit_without_iterations_returns_model_unchanged():
    model = toy_model()
    before = [p.detach().clone() for p in model.parameters()]
    result = fit(TrainConfig(iterations=0), toy_domains(), model)
    assert result.model is model
    assert result.loss_log == []
    for a, b in zip(before, model.parameters()):
        assert torch.equal(a, b.detach())


def test_fit_logs_every_iteration_and_is_reproducible():
    setup = toy_setup()
    first = fit(setup.config, toy_domains(), toy_model())
    second = fit(setup.config, toy_domains(), toy_model())
    assert len(first.loss_log) == setup.config.iterations
    assert first.loss_log == second.loss_log
    for a, b in zip(first.model.parameters(), second.model.parameters()):
        assert torch.equal(a, b)


def test_fit_deterministic_mode_has_no_kl():
    setup = toy_setup()
    ablation = Ablation(deterministic_mode=True)
    result = fit(setup.config, toy_domains(), toy_model(), ablation=ablation)
    assert result.model.deterministic
    for entry in result.loss_log:
        assert entry.kl_extractor == 0.0 and entry.kl_classifier == 0.0


def test_fit_deterministic_extractor_keeps_classifier_kl():
    setup = toy_setup()
    ablation = Ablation(deterministic_extractor=True)
    result = fit(setup.config, toy_domains(), toy_model(), ablation=ablation)
    assert result.model.frozen_layers == ("extractor",)
    assert not result.model.deterministic
    for entry in result.loss_log:
        assert entry.kl_extractor == 0.0 and entry.kl_classifier > 0.0


def test_fit_deterministic_classifier_keeps_extractor_kl():
    setup = toy_setup()
    ablation = Ablation(deterministic_classifier=True)
    result = fit(setup.config, toy_domains(), toy_model(), ablation=ablation)
    assert result.model.frozen_layers == ("classifier",)
    for entry in result.loss_log:
        assert entry.kl_classifier == 0.0 and entry.kl_extractor > 0.0


def test_ablation_frozen_layers():
    assert Ablation().frozen_layers() == ()
    assert Ablation(deterministic_classifier=True).frozen_layers() == ("classifier",)
    both = Ablation(deterministic_extractor=True, deterministic_classifier=True)
    assert both.frozen_layers() == ("extractor", "classifier")
    assert Ablation(deterministic_mode=True).frozen_layers() == ("extractor", "classifier")


def test_fit_ignores_source_order():
    setup = toy_setup()
    forward = fit(setup.config, toy_domains(), toy_model())
    backward = fit(setup.config, list(reversed(toy_domains())), toy_model())
    assert forward.loss_log == backward.loss_log
    for a, b in zip(forward.model.parameters(), backward.model.parameters()):
        assert torch.equal(a, b)


def test_fit_loss_log_stays_finite_over_long_runs():
    setup = toy_setup(iterations=500, learning_rate=1e-3)
    result = fit(setup.config, toy_domains(), toy_model())
    assert len(result.loss_log) == 500
    for entry in result.loss_log:
        assert all(np.isfinite(entry.as_row(0)))


def test_fit_rejects_bad_sources():
    model = toy_model()
    with pytest.raises(ValidationError):
        fit(TrainConfig(), toy_domains()[:1], model)
    twins = toy_domains()
    with pytest.raises(ValidationError):
        fit(TrainConfig(), [twins[0], twins[0]], model)


def test_loss_csv_round_trip(tmp_path):
    log = [LossComponents(1.0 / 3.0, 0.1, 0.2, 0.0, 1e-17, 2.5), LossComponents(0, 0, 0, 0, 0, 0)]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, log)
    assert path.read_text().splitlines()[0] == "iteration,L_c,KL_Q,KL_C,L_local,L_global,total"
    assert read_loss_csv(path) == log


def test_loss_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "loss.csv"
    path.write_text("step,loss\n1,0.5\n")
    with pytest.raises(DataFormatError):
        read_loss_csv(path)


def test_predict_domain_single_class_target():
    model = toy_model()
    target = DomainData(5, np.random.default_rng(0).normal(size=(7, 3)), np.zeros(7, dtype=int))
    metrics = predict_domain(TrainConfig(weights=LossWeights(t_passes=2)), target, model)
    assert metrics.per_class_accuracy[1] is None
    assert metrics.per_class_accuracy[0] == metrics.accuracy
    assert metrics.majority_baseline == 1.0
    assert metrics.n_samples == 7
    assert 0.0 <= metrics.mean_predictive_entropy <= np.log(2.0) + 1e-9


def test_predict_domain_feature_mismatch():
    target = DomainData(0, np.zeros((2, 4)), np.zeros(2, dtype=int))
    with pytest.raises(DataFormatError):
        predict_domain(TrainConfig(), target, toy_model())


def test_evaluate_lodo_is_deterministic():
    domains = generate_domains(
        SyntheticSpec(n_domains=3, n_classes=2, dim=2, samples_per_domain=12)
    )
    config = toy_setup().config
    first = evaluate_lodo(config, domains, 2)
    second = evaluate_lodo(config, domains, 2)
    assert first == second
    assert first.n_samples == 12


def test_evaluate_lodo_index_out_of_range():
    with pytest.raises(ValidationError):
        evaluate_lodo(TrainConfig(), toy_domains(), 2)


@pytest.mark.slow
def test_target_like_a_source_beats_majority_baseline():
    domains = generate_domains(
        SyntheticSpec(n_domains=3, n_classes=3, dim=4, samples_per_domain=60)
    )
    config = TrainConfig(iterations=60, learning_rate=1e-3, batch_per_domain=16, n_pairs=8)
    metrics = evaluate_lodo(config, domains, 2)
    assert metrics.accuracy > metrics.majority_baseline


@pytest.mark.slow
def test_identical_sources_keep_global_alignment_low():
    domains = generate_domains(
        SyntheticSpec(n_domains=3, n_classes=3, dim=4, samples_per_domain=60)
    )
    sources = domains[:2]
    config = TrainConfig(
        iterations=60, learning_rate=1e-3, batch_per_domain=48, n_pairs=8, per_item_draws=True
    )
    model = NetworkStack(4, 3)
    twin = pretrain_deterministic(model, sources, 200, 1e-2, config.seed)
    model.adopt_twin(twin)
    log = fit(config, sources, model).loss_log
    tail = [entry.global_alignment for entry in log[-len(log) // 10 :]]
    assert np.mean(tail) <= 0.05
