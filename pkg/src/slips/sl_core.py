"""Stochastic-localization mathematics for the standard schedule ``Y_t = tX + sigma B_t``.

Time grids, the discretization constant, posterior densities, Tweedie's
score conversion and the total-variation error bounds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Union

import numpy as np

from .errors import DomainError, InvalidInputError, UnsupportedTargetError
from .targets import _sqnorm


class GridKind(str, enum.Enum):
    LOG_SNR = "log_snr"
    UNIFORM = "uniform"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class Discretization:
    """Strictly increasing time grid ``t_0 < t_1 < ... < t_K`` with ``t_0 > 0``."""

    grid: np.ndarray
    kind: GridKind = GridKind.CUSTOM

    def __post_init__(self):
        g = np.array(self.grid, dtype=float).reshape(-1)
        if g.size < 2:
            raise DomainError("a discretization needs at least two points (K >= 1)")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError("grid points must be finite")
        if g[0] <= 0:
            raise DomainError(f"t_0 must be positive, got {g[0]}")
        if np.any(np.diff(g) <= 0):
            raise DomainError("grid must be strictly increasing")
        kind = GridKind(self.kind)
        if kind is GridKind.LOG_SNR:
            ratios = g[1:] / g[:-1]
            if np.max(np.abs(ratios / ratios[0] - 1.0)) > 1e-10:
                raise DomainError("log-SNR grid must have constant ratios")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "kind", kind)

    @property
    def K(self) -> int:
        return self.grid.size - 1

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def log_snr_increment(self) -> Optional[float]:
        if self.kind is not GridKind.LOG_SNR:
            return None
        return math.log(self.T / self.t0) / self.K

    def __len__(self):
        return self.grid.size


def _check_endpoints(t0, T, K):
    if not (t0 > 0 and T > t0):
        raise DomainError(f"need 0 < t0 < T, got t0={t0}, T={T}")
    if int(K) != K or K < 1:
        raise DomainError(f"K must be an integer >= 1, got {K}")


def log_snr_grid(t0: float, T: float, K: int) -> Discretization:
    """Geometric grid ``t_k = t0 (T/t0)^(k/K)``: equal log-SNR increments."""
    _check_endpoints(t0, T, K)
    k = np.arange(K + 1)
    grid = t0 * (T / t0) ** (k / K)
    grid[0], grid[-1] = t0, T
    return Discretization(grid, GridKind.LOG_SNR)


def uniform_grid(t0: float, T: float, K: int) -> Discretization:
    _check_endpoints(t0, T, K)
    grid = t0 + np.arange(K + 1) * ((T - t0) / K)
    grid[-1] = T
    return Discretization(grid, GridKind.UNIFORM)


def make_grid(kind, t0, T, K) -> Discretization:
    """Grid of the given kind; accepts ``"log-snr"`` as well as ``"log_snr"``."""
    try:
        kind = GridKind(str(getattr(kind, "value", kind)).replace("-", "_"))
    except ValueError:
        raise DomainError(f"unknown grid kind {kind!r}") from None
    if kind is GridKind.LOG_SNR:
        return log_snr_grid(t0, T, K)
    if kind is GridKind.UNIFORM:
        return uniform_grid(t0, T, K)
    raise DomainError("custom grids must be built from explicit points")


def log_snr(t):
    """log SNR_t for the standard schedule with sigma^2 = R^2/d, i.e. log t."""
    return np.log(t)


def c_disc(disc: Discretization) -> float:
    """Discretization constant of the TV bound, by literal summation.

    ``sum_{k=1}^{K-1} max(0, d_k - d_{k-1}) / t_k + (t_1 - t_0) / t_0``
    with ``d_k = t_{k+1} - t_k``.
    """
    t = disc.grid if isinstance(disc, Discretization) else np.asarray(disc, float)
    d = np.diff(t)
    growth = np.maximum(0.0, d[1:] - d[:-1])
    return float(np.sum(growth / t[1:-1]) + d[0] / t[0])


def sigma_default(R2: float, d: int) -> float:
    """sigma = sqrt(R^2 / d), which makes SNR_t = t."""
    if not (R2 > 0) or not (d >= 1):
        raise DomainError(f"need R2 > 0 and d >= 1, got R2={R2}, d={d}")
    return math.sqrt(R2 / d)


def posterior_log_density_unnorm(target, t, sigma, y, x):
    """log q_t(x | y) up to an x-independent constant.

    ``-||y - t x||^2 / (2 t sigma^2) + log pi(x)``
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    resid = y - t * x
    return target.log_density_unnorm(x) - _sqnorm(resid) / (2.0 * t * sigma**2)


def posterior_grad(target, t, sigma, y, x):
    """grad_x log q_t(x | y) = grad log pi(x) + (y - t x) / sigma^2.

    Differentiating the Gaussian factor gives ``t (y - t x) / (t sigma^2)``;
    the ``t`` cancels.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    return target.grad_log_density(x) + (y - t * x) / sigma**2


def posterior_log_density_and_grad(target, t, sigma, y, x):
    """Both of the above; uses the target's fused evaluation when it has one."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if target.log_density_and_grad is not None:
        lp, g = target.log_density_and_grad(x)
    else:
        lp, g = target.log_density_unnorm(x), target.grad_log_density(x)
    resid = y - t * x
    return lp - _sqnorm(resid) / (2.0 * t * sigma**2), g + resid / sigma**2


def tweedie_score(t, sigma, y, u):
    """Score of p_t from a denoiser value: ``(t u - y) / (sigma^2 t)``."""
    if not (t > 0):
        raise DomainError(f"t must be positive, got {t}")
    if not (sigma > 0):
        raise DomainError(f"sigma must be positive, got {sigma}")
    return (t * np.asarray(u, dtype=float) - np.asarray(y, dtype=float)) / (sigma**2 * t)


def tv_information_bound(score_norm, d, sigma, t) -> float:
    """Bound on TV(pi, law of Y_t / t): ``0.5 ||grad log pi||_{L2} sqrt(d sigma^2 / t)``."""
    if score_norm < 0 or d < 1 or sigma <= 0 or t <= 0:
        raise DomainError("tv_information_bound needs nonnegative score norm and positive d, sigma, t")
    return 0.5 * score_norm * math.sqrt(d * sigma**2 / t)


@dataclass(frozen=True)
class TvBoundReport:
    init_term: float
    disc_term: float
    estimation_term: float
    information_term: float
    total: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def tv_total_bound(d, sigma, T, eps0, c_disc, score_norm, init_tv=0.0) -> TvBoundReport:
    """Evaluate the four-term TV bound for a SLIPS run ending at time T.

    ``init_tv`` is the initialization error TV(p~_{t0}, p_{t0}); it cannot be
    computed in general and is taken as given.
    """
    if min(eps0, c_disc, score_norm, init_tv) < 0:
        raise DomainError("bound inputs must be nonnegative")
    if sigma <= 0 or T <= 0:
        raise DomainError("sigma and T must be positive")
    init_term = float(init_tv)
    disc_term = math.sqrt(d * c_disc)
    est_term = math.sqrt(T * eps0**2 / sigma**2)
    info_term = tv_information_bound(score_norm, d, sigma, T)
    total = init_term + disc_term + est_term + info_term
    return TvBoundReport(init_term, disc_term, est_term, info_term, total)


@dataclass(frozen=True)
class SlipsConfig:
    """Run parameters.  Validated at construction.

    ``mala_step`` is a dimensionless multiplier: the MALA step at time t is
    ``mala_step * sigma^2 / (1 + t)``, i.e. a fraction of a proxy for the
    posterior variance (see :mod:`slips.mcmc`).
    """

    t0: float
    T: float
    K: int
    M: int = 50
    N: int = 50
    sigma: Union[float, str] = "auto"
    mala_step: float = 0.5
    mala_adapt: bool = True
    seed: int = 0
    denoiser_mode: str = "mala"
    grid: str = "log_snr"
    burn_in_fraction: float = 0.2
    target_accept: float = 0.574
    reuse_init_chain: bool = True

    def __post_init__(self):
        if not (self.t0 > 0):
            raise DomainError(f"t0 must be positive, got {self.t0}")
        if not (self.T > self.t0):
            raise DomainError(f"T must exceed t0, got T={self.T}, t0={self.t0}")
        for name, lo in (("K", 1), ("M", 1), ("N", 0)):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < lo:
                raise DomainError(f"{name} must be an integer >= {lo}, got {v}")
            object.__setattr__(self, name, int(v))
        if isinstance(self.sigma, str):
            if self.sigma != "auto":
                raise DomainError(f"sigma must be positive or 'auto', got {self.sigma!r}")
        elif not (self.sigma > 0):
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not (self.mala_step > 0):
            raise DomainError("mala_step must be positive")
        if self.denoiser_mode not in ("mala", "oracle"):
            raise DomainError(f"denoiser_mode must be 'mala' or 'oracle', got {self.denoiser_mode!r}")
        grid = str(self.grid).replace("-", "_")
        if grid not in (GridKind.LOG_SNR.value, GridKind.UNIFORM.value):
            raise DomainError(f"grid must be 'log_snr' or 'uniform', got {self.grid!r}")
        object.__setattr__(self, "grid", grid)
        if not (0 <= self.burn_in_fraction < 10):
            raise DomainError("burn_in_fraction must be in [0, 10)")
        if not (0 < self.target_accept < 1):
            raise DomainError("target_accept must be in (0, 1)")
        if int(self.seed) != self.seed or not (0 <= self.seed < 2**64):
            raise DomainError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))

    def with_(self, **changes) -> "SlipsConfig":
        return replace(self, **changes)

    def discretization(self) -> Discretization:
        return make_grid(self.grid, self.t0, self.T, self.K)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def resolve_sigma(target, config: SlipsConfig) -> float:
    """Numeric sigma for a run; 'auto' needs the target's variance proxy."""
    if config.sigma != "auto":
        return float(config.sigma)
    if target.variance_proxy is None:
        raise UnsupportedTargetError(
            "sigma='auto' needs a target with a known variance proxy R^2; pass sigma explicitly")
    return sigma_default(target.variance_proxy, target.dim)


def T_for_snr(snr_target, R2, d, sigma) -> float:
    """Final time whose SNR ``R^2 T / (d sigma^2)`` equals ``snr_target``."""
    if snr_target <= 0:
        raise DomainError("snr_target must be positive")
    return float(snr_target) * d * sigma**2 / R2
