"""
Multi-domain datasets: synthetic shifted-domain generation and the CSV formats.

Dataset CSV: header ``domain,label,f0,...,f{d-1}``, one row per sample. A file may hold
one domain or several (the domain column tells them apart).
Embedding CSV: header ``item,f0,...``; consecutive rows sharing ``item`` are the Monte
Carlo samples of one probabilistic embedding.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from pdg_errors import DataFormatError, ValidationError
from prob_embedding import ProbEmbedding
from seeding import numpy_stream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# default toy task: 4 domains (3 sources + 1 target), rotations in the first two coordinates
SHIFT3_ROTATIONS = (0.0, 0.35, 0.7, 1.05)


@dataclass(frozen=True)
class DomainData:
    domain_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise ValidationError(
                f"domain {self.domain_id}: {features.shape} features for {labels.shape} labels"
            )
        if not np.isfinite(features).all():
            raise ValidationError(f"domain {self.domain_id}: non-finite features")
        if (labels < 0).any():
            raise ValidationError(f"domain {self.domain_id}: negative class labels")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "DomainData":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainData(self.domain_id, self.features[indices], self.labels[indices])


@dataclass(frozen=True)
class DomainTransform:
    """x -> scale * R(rotation) x + translation, R rotating the first two coordinates"""

    rotation: float = 0.0
    translation: Tuple[float, ...] = ()
    scale: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int = 4
    n_classes: int = 3
    dim: int = 8
    samples_per_domain: int = 60
    transforms: Tuple[DomainTransform, ...] = ()
    separation: float = 3.0
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name, minimum in (("n_domains", 2), ("n_classes", 2), ("dim", 2)):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < minimum:
                raise ValidationError(f"must be an integer >= {minimum}, got {value}", field=name)
        if self.samples_per_domain < 2 * self.n_classes:
            raise ValidationError(
                f"must be at least 2 * n_classes = {2 * self.n_classes}",
                field="samples_per_domain",
            )
        if self.samples_per_domain % self.n_classes:
            raise ValidationError(
                f"must be divisible by n_classes ({self.n_classes})", field="samples_per_domain"
            )
        if not self.noise_sigma > 0 or not math.isfinite(self.noise_sigma):
            raise ValidationError(f"must be > 0, got {self.noise_sigma}", field="noise_sigma")
        if not math.isfinite(self.separation) or self.separation < 0:
            raise ValidationError(f"must be >= 0, got {self.separation}", field="separation")

        transforms = tuple(
            t if isinstance(t, DomainTransform) else DomainTransform(**t) for t in self.transforms
        )
        if not transforms:
            transforms = tuple(DomainTransform() for _ in range(self.n_domains))
        if len(transforms) != self.n_domains:
            raise ValidationError(
                f"{len(transforms)} transforms for {self.n_domains} domains", field="transforms"
            )
        for j, t in enumerate(transforms):
            if t.translation and len(t.translation) != self.dim:
                raise ValidationError(
                    f"translation has {len(t.translation)} entries, expected {self.dim}",
                    field=f"transforms[{j}].translation",
                )
            if not t.scale > 0:
                raise ValidationError("scale must be > 0", field=f"transforms[{j}].scale")
        object.__setattr__(self, "transforms", transforms)

    @classmethod
    def shift3(cls, seed: int = 0) -> "SyntheticSpec":
        return cls(
            n_domains=4,
            n_classes=3,
            dim=8,
            samples_per_domain=60,
            transforms=tuple(DomainTransform(rotation=r) for r in SHIFT3_ROTATIONS),
            separation=3.0,
            noise_sigma=0.3,
            seed=seed,
        )


def class_centers(spec: SyntheticSpec) -> np.ndarray:
    """Canonical m x d class centers shared by all domains"""

    if spec.n_classes <= spec.dim:
        return spec.separation * np.eye(spec.n_classes, spec.dim)
    rng = numpy_stream(spec.seed, "centers")
    directions = rng.standard_normal((spec.n_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return spec.separation * directions


def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    rotation = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    rotation[:2, :2] = [[c, -s], [s, c]]
    return rotation


def transform_points(points: np.ndarray, transform: DomainTransform) -> np.ndarray:
    dim = points.shape[1]
    moved = transform.scale * points @ rotation_matrix(dim, transform.rotation).T
    if transform.translation:
        moved = moved + np.asarray(transform.translation, dtype=np.float64)
    return moved


def generate_domains(spec: SyntheticSpec) -> List[DomainData]:
    centers = class_centers(spec)
    per_class = spec.samples_per_domain // spec.n_classes
    domains = []
    for j, transform in enumerate(spec.transforms):
        rng = numpy_stream(spec.seed, "synthetic", j)
        labels = rng.permutation(np.repeat(np.arange(spec.n_classes), per_class))
        moved_centers = transform_points(centers, transform)
        noise = spec.noise_sigma * rng.standard_normal((len(labels), spec.dim))
        domains.append(DomainData(j, moved_centers[labels] + noise, labels))
    return domains


def generate_synthetic(spec: SyntheticSpec, out_dir: PathLike) -> List[Path]:
    """Write one dataset CSV per domain (domain_<j>.csv) and return their paths"""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for domain in generate_domains(spec):
        path = out_dir / f"domain_{domain.domain_id}.csv"
        write_domains_csv(path, [domain])
        paths.append(path)
    logger.info(f"wrote {len(paths)} synthetic domains to {out_dir}")
    return paths


def _feature_columns(d: int) -> List[str]:
    return [f"f{i}" for i in range(d)]


def write_domains_csv(path: PathLike, domains: Sequence[DomainData]) -> None:
    frames = []
    for domain in domains:
        frame = pd.DataFrame(domain.features, columns=_feature_columns(domain.d))
        frame.insert(0, "label", domain.labels)
        frame.insert(0, "domain", domain.domain_id)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def _read_csv(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: {e}") from e


def _check_features(path: PathLike, columns: List[str], leading: List[str]) -> int:
    if columns[: len(leading)] != leading:
        raise DataFormatError(f"{path}: header must start with {','.join(leading)}")
    d = len(columns) - len(leading)
    if d < 1 or columns[len(leading) :] != _feature_columns(d):
        raise DataFormatError(f"{path}: feature columns must be f0..f{{d-1}}, got {columns}")
    return d


def read_domains_csv(paths: Union[PathLike, Sequence[PathLike]]) -> List[DomainData]:
    """Read one or more dataset files; domains are returned sorted by id"""

    if isinstance(paths, (str, Path)):
        paths = [paths]
    collected: Dict[int, DomainData] = {}
    dims = set()
    for path in paths:
        frame = _read_csv(path)
        d = _check_features(path, list(frame.columns), ["domain", "label"])
        dims.add(d)
        for column in ("domain", "label"):
            if not pd.api.types.is_integer_dtype(frame[column]):
                raise DataFormatError(f"{path}: column '{column}' must hold integers")
        features = frame[_feature_columns(d)]
        if not all(pd.api.types.is_numeric_dtype(features[c]) for c in features.columns):
            raise DataFormatError(f"{path}: feature columns must be numeric")
        for domain_id, rows in frame.groupby("domain", sort=True):
            domain_id = int(domain_id)
            if domain_id in collected:
                raise DataFormatError(f"{path}: domain {domain_id} appears in several files")
            try:
                collected[domain_id] = DomainData(
                    domain_id,
                    rows[_feature_columns(d)].to_numpy(dtype=np.float64),
                    rows["label"].to_numpy(dtype=np.int64),
                )
            except ValidationError as e:
                raise DataFormatError(f"{path}: {e}") from e
    if len(dims) > 1:
        raise DataFormatError(f"dataset files disagree on feature dimension: {sorted(dims)}")
    return [collected[k] for k in sorted(collected)]


def read_points_csv(path: PathLike) -> torch.Tensor:
    """Feature columns f0.. of any dataset-like CSV; domain/label columns are ignored"""

    frame = _read_csv(path)
    leading = [c for c in frame.columns if c in ("domain", "label", "item")]
    d = _check_features(path, list(frame.columns), leading)
    return torch.as_tensor(frame[_feature_columns(d)].to_numpy(dtype=np.float64))


def write_embeddings_csv(path: PathLike, embeddings: Sequence[ProbEmbedding]) -> None:
    d = embeddings[0].d
    frames = []
    for item, embedding in enumerate(embeddings):
        frame = pd.DataFrame(embedding.samples.detach().numpy(), columns=_feature_columns(d))
        frame.insert(0, "item", item)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def read_embeddings_csv(path: PathLike) -> List[ProbEmbedding]:
    frame = _read_csv(path)
    d = _check_features(path, list(frame.columns), ["item"])
    if not pd.api.types.is_integer_dtype(frame["item"]):
        raise DataFormatError(f"{path}: column 'item' must hold integers")
    embeddings = []
    for _, rows in frame.groupby("item", sort=False):
        try:
            embeddings.append(
                ProbEmbedding(torch.as_tensor(rows[_feature_columns(d)].to_numpy(dtype=np.float64)))
            )
        except ValidationError as e:
            raise DataFormatError(f"{path}: {e}") from e
    if not embeddings:
        raise DataFormatError(f"{path}: no embeddings")
    return embeddings


@dataclass(frozen=True)
class Subsampling:
    """Small-data regime applied to source domains only"""

    train_fraction: float = 1.0
    source_fractions: Dict[int, float] = field(default_factory=dict)
    samples_per_class: Optional[int] = None

    def __post_init__(self):
        for name, value in [("train_fraction", self.train_fraction)] + [
            (f"source_fractions.{k}", v) for k, v in self.source_fractions.items()
        ]:
            if not 0 < value <= 1:
                raise ValidationError(f"must be in (0, 1], got {value}", field=name)
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ValidationError("must be >= 1", field="samples_per_class")

    @property
    def active(self) -> bool:
        return (
            self.train_fraction < 1
            or any(v < 1 for v in self.source_fractions.values())
            or self.samples_per_class is not None
        )


def subsample_domain(domain: DomainData, plan: Subsampling, seed: int) -> DomainData:
    """Class-stratified subset of one source domain, drawn deterministically from seed"""

    fraction = plan.source_fractions.get(domain.domain_id, plan.train_fraction)
    rng = numpy_stream(seed, "subsample", domain.domain_id)
    keep = []
    for c in np.unique(domain.labels):
        members = np.flatnonzero(domain.labels == c)
        if plan.samples_per_class is not None:
            count = min(plan.samples_per_class, len(members))
        else:
            count = max(1, int(round(fraction * len(members))))
        keep.append(rng.choice(members, size=count, replace=False))
    return domain.subset(np.sort(np.concatenate(keep)))
