"""
Library for level-1 Gaussian RBF kernels and two-sample MMD estimators over point sets.

The kernel is k(x, y) = exp(-lambda1/2 * ||x - y||^2), i.e. the bandwidth is the
precision-like lambda, not a standard deviation. All accumulation is done in float64
torch tensors so gradients flow through every operation.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Union

import numpy as np
import torch

from pdg_errors import InputShapeError, NumericError, ValidationError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# plug-in estimates in [-NUMERIC_FLOOR, 0) are rounding noise and get clamped to 0;
# anything more negative is not a squared norm
NUMERIC_FLOOR = 1e-12


class Estimator(Enum):
    BIASED_V_STATISTIC = "biased_v_statistic"
    UNBIASED_U_STATISTIC = "unbiased_u_statistic"


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidths of the level-1 and level-2 kernels plus the MMD estimator choice"""

    lambda1: float = 1.0
    lambda2: float = 1.0
    estimator: Estimator = Estimator.BIASED_V_STATISTIC

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError("must be a number", field=name)
            if not math.isfinite(value) or value <= 0:
                raise ValidationError(f"must be positive, got {value}", field=name)
        if not isinstance(self.estimator, Estimator):
            try:
                object.__setattr__(self, "estimator", Estimator(self.estimator))
            except ValueError:
                raise ValidationError(
                    f"unknown estimator '{self.estimator}'", field="estimator"
                ) from None


PointLike = Union["PointSet", torch.Tensor, np.ndarray, Any]


@dataclass(frozen=True)
class PointSet:
    """n x d matrix of finite reals (one point per row)"""

    points: torch.Tensor

    @classmethod
    def from_array(cls, data: PointLike) -> "PointSet":
        return cls(as_points(data))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n


def as_tensor(data: Any) -> torch.Tensor:
    if isinstance(data, PointSet):
        return data.points
    if isinstance(data, torch.Tensor):
        return data if data.dtype == DTYPE else data.to(DTYPE)
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)


def _check_finite(tensor: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(tensor.detach()).all()):
        raise ValidationError(f"{what} contains non-finite entries")


def as_points(data: PointLike, what: str = "point set") -> torch.Tensor:
    """Validate and convert anything matrix-like into an n x d float64 tensor"""

    points = as_tensor(data)
    if points.dim() != 2:
        raise InputShapeError(
            f"{what} must be a matrix (n x d), got shape {tuple(points.shape)}"
        )
    if points.shape[0] < 1:
        raise ValidationError(f"{what} is empty")
    if points.shape[1] < 1:
        raise InputShapeError(f"{what} has zero dimension")
    _check_finite(points, what)
    return points


def as_vector(data: Any, what: str = "vector") -> torch.Tensor:
    vector = as_tensor(data)
    if vector.dim() != 1 or vector.shape[0] < 1:
        raise InputShapeError(
            f"{what} must be a non-empty vector, got shape {tuple(vector.shape)}"
        )
    _check_finite(vector, what)
    return vector


def _check_same_dim(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise InputShapeError(
            f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}"
        )


def squared_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # coinciding rows give exactly 0 and d(x, y) == d(y, x) bit for bit
    diff = x.unsqueeze(-2) - y.unsqueeze(-3)
    return (diff * diff).sum(dim=-1)


def rbf_from_sqdist(bandwidth: float, sqdist: torch.Tensor) -> torch.Tensor:
    return torch.exp((-0.5 * bandwidth) * sqdist)


def rbf_kernel(cfg: KernelConfig, x: Any, y: Any) -> torch.Tensor:
    """Level-1 Gaussian RBF kernel between two vectors (0-dim tensor in (0, 1])"""

    x = as_vector(x, "x")
    y = as_vector(y, "y")
    _check_same_dim(x, y)
    diff = x - y
    return rbf_from_sqdist(cfg.lambda1, (diff * diff).sum())


def gram_matrix(cfg: KernelConfig, X: PointLike, Y: PointLike) -> torch.Tensor:
    """|X| x |Y| matrix of level-1 kernel values"""

    x = as_points(X, "X")
    y = as_points(Y, "Y")
    _check_same_dim(x, y)
    return rbf_from_sqdist(cfg.lambda1, squared_distances(x, y))


def floor_at_zero(value: torch.Tensor, where: str = "mmd2") -> torch.Tensor:
    number = float(value.detach())
    if number < -NUMERIC_FLOOR:
        raise NumericError(f"plug-in estimate {number:.3e} is negative", where=where)
    if number < 0.0:
        return value.clamp_min(0.0)
    return value


def mmd2(
    cfg: KernelConfig,
    X: PointLike,
    Y: PointLike,
    estimator: Optional[Estimator] = None,
) -> torch.Tensor:
    """
    Squared MMD between two point sets.

    The biased (plug-in) form is ||mean phi(x) - mean phi(y)||^2 expanded into the
    three kernel-sum blocks; the unbiased form drops the diagonal of the within-set
    blocks and needs at least two points per set.
    """

    estimator = cfg.estimator if estimator is None else Estimator(estimator)
    x = as_points(X, "X")
    y = as_points(Y, "Y")
    _check_same_dim(x, y)

    k_xx = gram_matrix(cfg, x, x)
    k_yy = gram_matrix(cfg, y, y)
    k_xy = gram_matrix(cfg, x, y)

    if estimator is Estimator.BIASED_V_STATISTIC:
        value = k_xx.mean() + k_yy.mean() - 2.0 * k_xy.mean()
        return floor_at_zero(value)

    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValidationError(
            f"unbiased MMD needs at least two points per set (got {n} and {m})"
        )
    within_x = (k_xx.sum() - k_xx.diagonal().sum()) / (n * (n - 1))
    within_y = (k_yy.sum() - k_yy.diagonal().sum()) / (m * (m - 1))
    return within_x + within_y - 2.0 * k_xy.mean()
