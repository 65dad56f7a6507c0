"""
Reference implementations written as literal nested sums over plain Python floats.

They only serve to cross-check the vectorized torch code on tiny instances and share
nothing with it: the scalar kernel below is their own.
"""

import math
from enum import Enum
from typing import Any, Dict, List, Sequence

import numpy as np
from scipy import integrate

from kernel import KernelConfig
from pdg_errors import ValidationError

MAX_POINTS = 8
MAX_SAMPLES = 6
MAX_DIM = 4


class OracleKind(Enum):
    MMD2 = "mmd2"
    KME_INNER = "kme_inner"
    LEVEL2 = "level2"
    PMMD2 = "pmmd2"
    KL_GAUSSIAN = "kl_gaussian"


def _matrix(data: Any, max_rows: int, what: str) -> List[List[float]]:
    rows = np.asarray(data, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
        raise ValidationError(f"{what} must be a non-empty matrix")
    if rows.shape[0] > max_rows or rows.shape[1] > MAX_DIM:
        raise ValidationError(
            f"{what} of shape {rows.shape} exceeds the oracle limit "
            f"({max_rows} rows, {MAX_DIM} dimensions)"
        )
    return rows.tolist()


def _domain(data: Sequence[Any], what: str) -> List[List[List[float]]]:
    members = list(data)
    if not 1 <= len(members) <= MAX_POINTS:
        raise ValidationError(f"{what} must hold 1..{MAX_POINTS} embeddings, got {len(members)}")
    return [_matrix(m, MAX_SAMPLES, f"{what}[{i}]") for i, m in enumerate(members)]


def scalar_rbf(bandwidth: float, x: Sequence[float], y: Sequence[float]) -> float:
    total = 0.0
    for a, b in zip(x, y):
        total += (a - b) * (a - b)
    return math.exp(-0.5 * bandwidth * total)


def oracle_mmd2(cfg: KernelConfig, X: Any, Y: Any, unbiased: bool = False) -> float:
    x = _matrix(X, MAX_POINTS, "X")
    y = _matrix(Y, MAX_POINTS, "Y")
    n, m = len(x), len(y)
    if unbiased and (n < 2 or m < 2):
        raise ValidationError("the unbiased estimate needs at least two points per set")
    xx = yy = xy = 0.0
    for i in range(n):
        for j in range(n):
            if not (unbiased and i == j):
                xx += scalar_rbf(cfg.lambda1, x[i], x[j])
    for i in range(m):
        for j in range(m):
            if not (unbiased and i == j):
                yy += scalar_rbf(cfg.lambda1, y[i], y[j])
    for i in range(n):
        for j in range(m):
            xy += scalar_rbf(cfg.lambda1, x[i], y[j])
    if unbiased:
        return xx / (n * (n - 1)) + yy / (m * (m - 1)) - 2.0 * xy / (n * m)
    return xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)


def oracle_kme_inner(cfg: KernelConfig, A: Any, B: Any) -> float:
    a = _matrix(A, MAX_SAMPLES, "A")
    b = _matrix(B, MAX_SAMPLES, "B")
    total = 0.0
    for u in a:
        for v in b:
            total += scalar_rbf(cfg.lambda1, u, v)
    return total / (len(a) * len(b))


def oracle_level2(cfg: KernelConfig, A: Any, B: Any) -> float:
    distance = (
        oracle_kme_inner(cfg, A, A)
        - 2.0 * oracle_kme_inner(cfg, A, B)
        + oracle_kme_inner(cfg, B, B)
    )
    return math.exp(-0.5 * cfg.lambda2 * max(distance, 0.0))


def oracle_pmmd2(
    cfg: KernelConfig, Dl: Sequence[Any], Dt: Sequence[Any], unbiased: bool = False
) -> float:
    left = _domain(Dl, "Dl")
    right = _domain(Dt, "Dt")
    n, m = len(left), len(right)
    if unbiased and (n < 2 or m < 2):
        raise ValidationError("the unbiased estimate needs at least two embeddings per domain")
    ll = tt = lt = 0.0
    for i in range(n):
        for j in range(n):
            if not (unbiased and i == j):
                ll += oracle_level2(cfg, left[i], left[j])
    for i in range(m):
        for j in range(m):
            if not (unbiased and i == j):
                tt += oracle_level2(cfg, right[i], right[j])
    for i in range(n):
        for j in range(m):
            lt += oracle_level2(cfg, left[i], right[j])
    if unbiased:
        return ll / (n * (n - 1)) + tt / (m * (m - 1)) - 2.0 * lt / (n * m)
    return ll / (n * n) + tt / (m * m) - 2.0 * lt / (n * m)


def _normal_logpdf(x: float, mu: float, sigma: float) -> float:
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2.0 * math.pi)


def oracle_kl_gaussian(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float) -> float:
    """KL[N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)] by adaptive quadrature of q ln(q/p)"""

    if not (sigma_q > 0 and sigma_p > 0):
        raise ValidationError("standard deviations must be positive")

    def integrand(x: float) -> float:
        log_q = _normal_logpdf(x, mu_q, sigma_q)
        return math.exp(log_q) * (log_q - _normal_logpdf(x, mu_p, sigma_p))

    # q is negligible beyond 40 standard deviations
    lower, upper = mu_q - 40.0 * sigma_q, mu_q + 40.0 * sigma_q
    value, _ = integrate.quad(
        integrand, lower, upper, points=[mu_q], epsabs=1e-13, epsrel=1e-12, limit=500
    )
    return value


def oracle_reference(kind: Any, inputs: Dict[str, Any]) -> float:
    """
    Dispatch by kind; inputs are keyword arguments of the matching oracle_* function,
    e.g. oracle_reference("mmd2", {"cfg": cfg, "X": X, "Y": Y}).
    """

    try:
        kind = OracleKind(kind)
    except ValueError:
        raise ValidationError(f"unknown oracle kind '{kind}'") from None
    function = {
        OracleKind.MMD2: oracle_mmd2,
        OracleKind.KME_INNER: oracle_kme_inner,
        OracleKind.LEVEL2: oracle_level2,
        OracleKind.PMMD2: oracle_pmmd2,
        OracleKind.KL_GAUSSIAN: oracle_kl_gaussian,
    }[kind]
    return function(**inputs)


def relative_error(value: float, reference: float, floor: float = 1e-12) -> float:
    return abs(value - reference) / max(abs(value), abs(reference), floor)
