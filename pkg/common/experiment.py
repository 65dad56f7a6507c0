"""
Experiment configuration and orchestration.

An ExperimentConfig is read from YAML (nested mappings mirroring the dataclasses below).
Missing keys take the dataclass defaults, unknown keys and type mismatches raise
ConfigError naming the dotted field path.
"""

import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import yaml

from bayes_net import NetworkStack, forward_prob_batch, save_checkpoint
from domain_data import (
    DomainData,
    Subsampling,
    SyntheticSpec,
    generate_domains,
    read_domains_csv,
    subsample_domain,
)
from kernel import KernelConfig
from losses import LOSS_LOG_HEADER, LossComponents
from pdg_errors import ConfigError, ValidationError
from prob_embedding import CloudBatch, pmmd2
from seeding import numpy_stream, torch_stream
from train import (
    Ablation,
    LodoMetrics,
    TrainConfig,
    fit,
    predict_domain,
    pretrain_deterministic,
    write_loss_csv,
)

logger = logging.getLogger(__name__)

LIBRARY_VERSION = "0.1.0"
REPORT_SCHEMA_VERSION = 1

# names accepted by --ablation and the field each one switches
ABLATION_FLAGS = {
    "mean_embedding": ("use_pmmd", False),
    "mean_csa": ("use_pcsa", False),
    "disable_local": ("disable_local", True),
    "disable_global": ("disable_global", True),
    "deterministic_mode": ("deterministic_mode", True),
    "deterministic_extractor": ("deterministic_extractor", True),
    "deterministic_classifier": ("deterministic_classifier", True),
}


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (32,)
    latent: int = 16
    metric_hidden: Tuple[int, ...] = (16,)
    metric_out: int = 8
    metric_final_activation: bool = False
    sigma_floor: float = 1e-3

    def __post_init__(self):
        for name in ("latent", "metric_out"):
            if getattr(self, name) < 1:
                raise ValidationError("must be >= 1", field=name)
        if any(width < 1 for width in self.hidden + self.metric_hidden):
            raise ValidationError("layer widths must be >= 1", field="hidden")
        if not self.sigma_floor > 0:
            raise ValidationError("must be > 0", field="sigma_floor")


@dataclass(frozen=True)
class DataConfig:
    """Exactly one of synthetic / paths; neither means the shift3 toy task"""

    synthetic: Optional[SyntheticSpec] = None
    paths: Tuple[str, ...] = ()
    train_fraction: float = 1.0
    source_fractions: Dict[int, float] = field(default_factory=dict)
    samples_per_class: Optional[int] = None

    def __post_init__(self):
        if self.synthetic is not None and self.paths:
            raise ValidationError("give either synthetic or paths, not both", field="synthetic")
        if self.synthetic is None and not self.paths:
            object.__setattr__(self, "synthetic", SyntheticSpec.shift3())
        self.subsampling()

    def subsampling(self) -> Subsampling:
        return Subsampling(self.train_fraction, dict(self.source_fractions), self.samples_per_class)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    ablation: Ablation = field(default_factory=Ablation)
    held_out_domain: int = 3

    def __post_init__(self):
        if self.held_out_domain < 0:
            raise ValidationError("must be >= 0", field="held_out_domain")
        spec = self.data.synthetic
        if spec is not None and self.held_out_domain >= spec.n_domains:
            raise ValidationError(
                f"must be < n_domains ({spec.n_domains}), got {self.held_out_domain}",
                field="held_out_domain",
            )

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        ablation: Sequence[str] = (),
        iterations: Optional[int] = None,
        held_out_domain: Optional[int] = None,
        t_passes: Optional[int] = None,
    ) -> "ExperimentConfig":
        data = self.data
        train = self.train
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
            if data.synthetic is not None:
                data = dataclasses.replace(
                    data, synthetic=dataclasses.replace(data.synthetic, seed=seed)
                )
        if iterations is not None:
            train = dataclasses.replace(train, iterations=iterations)
        if t_passes is not None:
            train = dataclasses.replace(
                train, weights=dataclasses.replace(train.weights, t_passes=t_passes)
            )
        switches = {}
        for flag in ablation:
            if flag not in ABLATION_FLAGS:
                raise ConfigError(
                    f"unknown flag '{flag}' (known: {', '.join(sorted(ABLATION_FLAGS))})",
                    field="ablation",
                )
            name, value = ABLATION_FLAGS[flag]
            switches[name] = value
        return dataclasses.replace(
            self,
            data=data,
            train=train,
            ablation=dataclasses.replace(self.ablation, **switches),
            held_out_domain=self.held_out_domain if held_out_domain is None else held_out_domain,
        )


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _coerce(kind: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(kind):
        if kind is SyntheticSpec and value == "shift3":
            return SyntheticSpec.shift3()
        return _build(kind, value, path)
    if isinstance(kind, type) and issubclass(kind, Enum):
        try:
            return kind(value)
        except ValueError:
            known = ", ".join(str(m.value) for m in kind)
            raise ConfigError(f"unknown value '{value}' (known: {known})", field=path) from None
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
        item = args[0] if args else Any
        return tuple(_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", field=path)
        key_kind, value_kind = args
        return {
            _coerce(key_kind, k, f"{path}.{k}"): _coerce(value_kind, v, f"{path}.{k}")
            for k, v in value.items()
        }
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path)
        return value
    if kind is int:
        if isinstance(value, str) and value.lstrip("-").isdigit():
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if kind is float:
        if isinstance(value, str):
            # YAML 1.1 reads 1e-3 (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if kind is str:
        return str(value)
    return value


def _build(cls: type, data: Any, path: str = "") -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {data!r}", field=path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'", field=_join(path, unknown[0]))

    kwargs = {name: _coerce(hints[name], value, _join(path, name)) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValidationError as e:
        inner = e.field
        message = str(e)[len(inner) + 2 :] if inner else str(e)
        raise ConfigError(message, field=_join(path, inner) if inner else path or None) from None


def config_from_dict(data: Any) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as stream:
        try:
            data = yaml.safe_load(stream)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from e
    return config_from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def load_experiment_domains(config: ExperimentConfig) -> List[DomainData]:
    if config.data.synthetic is not None:
        return generate_domains(config.data.synthetic)
    return read_domains_csv(list(config.data.paths))


def split_domains(
    config: ExperimentConfig, domains: Sequence[DomainData]
) -> Tuple[List[DomainData], DomainData]:
    by_id = {d.domain_id: d for d in domains}
    if config.held_out_domain not in by_id:
        raise ConfigError(
            f"no domain with id {config.held_out_domain} (have {sorted(by_id)})",
            field="held_out_domain",
        )
    plan = config.data.subsampling()
    sources = [d for d in domains if d.domain_id != config.held_out_domain]
    if plan.active:
        sources = [subsample_domain(d, plan, config.seed) for d in sources]
    return sources, by_id[config.held_out_domain]


def build_model(config: ExperimentConfig, d_in: int, n_classes: int) -> NetworkStack:
    init_seed = int(numpy_stream(config.seed, "init").integers(2**62))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return NetworkStack(
            d_in,
            n_classes,
            hidden=config.model.hidden,
            latent=config.model.latent,
            metric_hidden=config.model.metric_hidden,
            metric_out=config.model.metric_out,
            metric_final_activation=config.model.metric_final_activation,
            sigma_floor=config.model.sigma_floor,
        )


def prepare_model(
    config: ExperimentConfig, sources: Sequence[DomainData], d_in: int, n_classes: int
) -> NetworkStack:
    """Fresh network whose Bayesian layers start from the pretrained deterministic twin"""

    model = build_model(config, d_in, n_classes)
    twin = pretrain_deterministic(
        model,
        sources,
        config.train.pretrain_iterations,
        config.train.pretrain_lr,
        config.seed,
    )
    model.adopt_twin(twin, delta=config.train.moped_delta, standard_prior=not config.train.moped)
    frozen = config.ablation.frozen_layers()
    if frozen:
        model.freeze_sigma(frozen)
    return model


def loss_summary(log: Sequence[LossComponents]) -> Dict[str, Dict[str, float]]:
    """first/last value and means of the first and last 10 % of iterations per column"""

    if not log:
        return {}
    window = max(1, len(log) // 10)
    columns = list(zip(*[entry.as_row(0)[1:] for entry in log]))
    summary = {}
    for name, values in zip(LOSS_LOG_HEADER[1:], columns):
        summary[name] = {
            "first": values[0],
            "last": values[-1],
            "mean_first_10pct": float(np.mean(values[:window])),
            "mean_last_10pct": float(np.mean(values[-window:])),
        }
    return summary


@dataclass
class MetricsReport:
    accuracy: float
    per_class_accuracy: Dict[str, Optional[float]]
    mean_predictive_entropy: float
    loss_summary: Dict[str, Dict[str, float]]
    config: Dict[str, Any]
    seed: int
    held_out_domain: int
    wall_clock_seconds: float = 0.0
    library_version: str = LIBRARY_VERSION
    schema_version: int = REPORT_SCHEMA_VERSION

    def payload(self) -> Dict[str, Any]:
        """Everything but the wall-clock time"""

        data = dataclasses.asdict(self)
        del data["wall_clock_seconds"]
        return data

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=4, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema {data.get('schema_version')}")
        return cls(**data)

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as stream:
            stream.write(self.to_json())
            stream.write("\n")


def make_report(
    config: ExperimentConfig,
    metrics: LodoMetrics,
    log: Sequence[LossComponents],
    wall_clock: float,
) -> MetricsReport:
    return MetricsReport(
        accuracy=metrics.accuracy,
        per_class_accuracy={str(k): v for k, v in metrics.per_class_accuracy.items()},
        mean_predictive_entropy=metrics.mean_predictive_entropy,
        loss_summary=loss_summary(log),
        # through JSON so the echo has the same key types as a reloaded report
        config=json.loads(json.dumps(config.to_dict())),
        seed=config.seed,
        held_out_domain=config.held_out_domain,
        wall_clock_seconds=wall_clock,
    )


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> MetricsReport:
    """
    Train on every domain except the held-out one, evaluate on it and, with out_dir,
    write losses.csv, metrics.json and model.npz there.
    """

    started = time.perf_counter()
    domains = load_experiment_domains(config)
    sources, target = split_domains(config, domains)
    n_classes = max(2, int(max(int(d.labels.max()) for d in domains)) + 1)

    model = prepare_model(config, sources, target.d, n_classes)
    result = fit(config.train, sources, model, config.kernel, config.ablation, progress)
    metrics = predict_domain(config.train, target, model)
    report = make_report(config, metrics, result.loss_log, time.perf_counter() - started)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out_dir / "losses.csv", result.loss_log)
        report.write(out_dir / "metrics.json")
        save_checkpoint(model, out_dir / "model.npz")
    logger.info(
        f"held-out domain {config.held_out_domain}: accuracy {metrics.accuracy:.4f} "
        f"(majority baseline {metrics.majority_baseline:.4f})"
    )
    return report


def run_lodo_suite(
    config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None
) -> Dict[str, Any]:
    """One run per domain as target; per-target accuracy plus the average"""

    domain_ids = [d.domain_id for d in load_experiment_domains(config)]
    per_target = {}
    for domain_id in domain_ids:
        target_dir = None if out_dir is None else Path(out_dir) / f"target_{domain_id}"
        report = run_experiment(config.with_overrides(held_out_domain=domain_id), target_dir)
        per_target[str(domain_id)] = report.accuracy
    return {
        "per_target_accuracy": per_target,
        "average_accuracy": float(np.mean(list(per_target.values()))),
    }


def run_repeated(
    config: ExperimentConfig,
    seeds: Sequence[int],
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    accuracies = []
    for seed in seeds:
        seed_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        accuracies.append(run_experiment(config.with_overrides(seed=seed), seed_dir).accuracy)
    return {
        "seeds": list(seeds),
        "accuracies": accuracies,
        "mean_accuracy": float(np.mean(accuracies)),
        "std_accuracy": float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0,
    }


def sweep_t(config: ExperimentConfig, t_values: Sequence[int]) -> Dict[str, float]:
    """Held-out accuracy per number of Monte Carlo passes"""

    return {
        str(t): run_experiment(config.with_overrides(t_passes=t)).accuracy for t in t_values
    }


def estimator_spread(
    model: NetworkStack,
    domains: Sequence[DomainData],
    t_values: Sequence[int],
    repeats: int = 30,
    kernel: Optional[KernelConfig] = None,
    seed: int = 0,
    max_items: int = 20,
) -> Dict[int, float]:
    """
    Sample standard deviation of pmmd2 between the first two domains over `repeats`
    independently drawn embedding clouds, for every T in t_values.
    """

    if len(domains) < 2:
        raise ValidationError("estimator spread needs two domains")
    if repeats < 2:
        raise ValidationError("estimator spread needs at least two repeats")
    kernel = kernel or KernelConfig()
    pair = [d.subset(np.arange(min(max_items, d.n))) for d in domains[:2]]
    features = [torch.as_tensor(d.features) for d in pair]

    spread = {}
    for t_passes in t_values:
        values = []
        for r in range(repeats):
            clouds = []
            for domain, x in zip(pair, features):
                noises = [
                    model.draw_noise(torch_stream(seed, "spread", t_passes, r, domain.domain_id, t))
                    for t in range(t_passes)
                ]
                with torch.no_grad():
                    z, _ = forward_prob_batch(model, x, noises)
                clouds.append(CloudBatch.from_tensor(z))
            with torch.no_grad():
                values.append(float(pmmd2(kernel, clouds[0], clouds[1])))
        spread[int(t_passes)] = float(np.std(values, ddof=1))
        logger.debug(f"T={t_passes}: pmmd2 spread {spread[int(t_passes)]:.3g}")
    return spread
