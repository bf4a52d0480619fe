"""Target distributions with log-densities, scores and closed-form oracles.

Every callable here broadcasts over leading axes: a point is an array of
shape ``(..., d)`` and scalar outputs have shape ``(...)``.

Gaussian mixtures are isotropic with one shared component variance ``s2``.
For them the posterior of ``X`` given ``Y_t = t X + sigma B_t`` is again a
mixture, which gives exact denoisers and posterior covariances.  When a
component's updated weight underflows to exactly zero it simply drops out
of the sum; that is intended.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, InvalidInputError

_LOG_2PI = float(np.log(2.0 * np.pi))


def _logsumexp(a, axis=-1):
    # Two- to few-component mixtures live in inner loops, scipy's version is
    # too slow there.  Rows with at least one finite entry are assumed.
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _sqnorm(a):
    # einsum keeps the reduction row-wise (no BLAS), and is much faster than
    # np.sum over a short trailing axis
    return np.einsum("...i,...i->...", a, a)


def _softmax(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True)
class TargetModel:
    """A target distribution pi as seen by the sampler.

    ``log_density_unnorm`` only promises log pi up to an additive constant.
    The optional fields are oracles used for verification; samplers never
    rely on them outside oracle mode.
    """

    dim: int
    log_density_unnorm: Callable[[np.ndarray], np.ndarray]
    grad_log_density: Callable[[np.ndarray], np.ndarray]
    variance_proxy: Optional[float] = None
    oracle_denoiser: Optional[Callable] = None
    oracle_posterior_trace_cov: Optional[Callable] = None
    mean: Optional[np.ndarray] = None
    sample: Optional[Callable] = None
    log_density_and_grad: Optional[Callable] = None
    name: str = "target"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise DomainError(f"dim must be a positive integer, got {self.dim}")
        if self.variance_proxy is not None and self.variance_proxy < 0:
            raise DomainError("variance_proxy must be nonnegative")


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture ``sum_i w_i N(m_i, s2 I)``.

    Attributes:
        weights: Probability vector, shape ``(C,)``.
        means: Component means, shape ``(C, d)``.
        component_variance: Shared per-coordinate variance ``s2 > 0``.
    """

    weights: np.ndarray
    means: np.ndarray
    component_variance: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2:
            raise InvalidInputError("means must be a (components, dim) array")
        if w.shape[0] != m.shape[0]:
            raise InvalidInputError(
                f"{w.shape[0]} weights but {m.shape[0]} means")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m))):
            raise InvalidInputError("weights and means must be finite")
        if np.any(w < 0):
            raise DomainError("mixture weights must be nonnegative")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise DomainError(f"mixture weights sum to {np.sum(w)!r}, not 1")
        s2 = float(self.component_variance)
        if not np.isfinite(s2) or s2 <= 0:
            raise DomainError("component_variance must be positive")
        w.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "component_variance", s2)
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        logw.setflags(write=False)
        object.__setattr__(self, "_log_weights", logw)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return np.sum(self.weights[:, None] * self.means, axis=0)

    @property
    def variance_proxy(self) -> float:
        """R^2 = E||X - E X||^2 by the law of total variance."""
        centred = self.means - self.mean
        spread = np.sum(self.weights * np.sum(centred**2, axis=-1))
        return float(self.dim * self.component_variance + spread)

    def _component_logpdf(self, x, mean_scale=1.0, var=None):
        # log N(x; mean_scale * m_i, var I) for every component, shape (..., C)
        var = self.component_variance if var is None else var
        diff = x[..., None, :] - mean_scale * self.means
        sq = _sqnorm(diff)
        return -0.5 * sq / var - 0.5 * self.dim * (_LOG_2PI + np.log(var))

    def log_density(self, x):
        """Normalized log-density; no input validation (hot path)."""
        x = np.asarray(x, dtype=float)
        return _logsumexp(self._log_weights + self._component_logpdf(x))

    def grad_log_density(self, x):
        x = np.asarray(x, dtype=float)
        r = _softmax(self._log_weights + self._component_logpdf(x))
        pulled = np.einsum("...c,cd->...d", r, self.means)
        return (pulled - x) / self.component_variance

    def log_density_and_grad(self, x):
        """Both at once, sharing the per-component work."""
        x = np.asarray(x, dtype=float)
        a = self._log_weights + self._component_logpdf(x)
        m = np.max(a, axis=-1, keepdims=True)
        e = np.exp(a - m)
        z = np.sum(e, axis=-1)
        logp = np.log(z) + m[..., 0]
        pulled = np.einsum("...c,cd->...d", e, self.means) / z[..., None]
        return logp, (pulled - x) / self.component_variance

    def sample(self, n, rng):
        """Draw ``n`` exact samples: pick a component, add Gaussian noise."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.component_variance) * noise

    def _posterior_parts(self, t, sigma, y):
        if not (t > 0):
            raise DomainError(f"t must be positive, got {t}")
        if not (sigma > 0):
            raise DomainError(f"sigma must be positive, got {sigma}")
        y = np.asarray(y, dtype=float)
        s2 = self.component_variance
        sig2 = float(sigma) ** 2
        # Y_t | component i  ~  N(t m_i, (t sigma^2 + t^2 s^2) I)
        marg_var = t * sig2 + t * t * s2
        logits = self._log_weights + self._component_logpdf(y, t, marg_var)
        post_w = _softmax(logits)
        prec = 1.0 / s2 + t / sig2
        mu = (self.means / s2 + y[..., None, :] / sig2) / prec
        return post_w, mu, 1.0 / prec

    def oracle_denoiser(self, t, sigma, y):
        """Posterior mean E[X | Y_t = y]."""
        post_w, mu, _ = self._posterior_parts(t, sigma, y)
        return np.einsum("...c,...cd->...d", post_w, mu)

    def oracle_posterior_trace_cov(self, t, sigma, y):
        """Tr Cov(X | Y_t = y) via the mixture law of total variance."""
        post_w, mu, var = self._posterior_parts(t, sigma, y)
        u = np.sum(post_w[..., :, None] * mu, axis=-2)
        between = np.sum((mu - u[..., None, :]) ** 2, axis=-1)
        return self.dim * var + np.sum(post_w * between, axis=-1)

    def noised(self, extra_variance):
        """The mixture convolved with N(0, extra_variance I)."""
        return GaussianMixture(self.weights, self.means,
                               self.component_variance + extra_variance)

    def to_target(self, name="gmm") -> TargetModel:
        return TargetModel(
            dim=self.dim,
            log_density_unnorm=self.log_density,
            grad_log_density=self.grad_log_density,
            variance_proxy=self.variance_proxy,
            oracle_denoiser=self.oracle_denoiser,
            oracle_posterior_trace_cov=self.oracle_posterior_trace_cov,
            mean=self.mean,
            sample=self.sample,
            log_density_and_grad=self.log_density_and_grad,
            name=name,
            params={"gmm": self},
        )


def _check_point(gmm, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (gmm.dim,):
        raise InvalidInputError(
            f"point has trailing shape {x.shape[-1:]}, expected ({gmm.dim},)")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite input coordinates")
    return x


def gmm_log_density(gmm: GaussianMixture, x) -> np.ndarray:
    return gmm.log_density(_check_point(gmm, x))


def gmm_grad_log_density(gmm: GaussianMixture, x) -> np.ndarray:
    return gmm.grad_log_density(_check_point(gmm, x))


def gmm_variance_proxy(gmm: GaussianMixture) -> float:
    return gmm.variance_proxy


def gmm_score_norm_sq(gmm: GaussianMixture, n_samples: int, rng):
    """Monte Carlo estimate of E||grad log pi(X)||^2.

    Returns:
        ``(estimate, standard_error)``.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    x = gmm.sample(n_samples, rng)
    sq = np.sum(gmm.grad_log_density(x) ** 2, axis=-1)
    se = float(np.std(sq, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(np.mean(sq)), se


def gmm_oracle_denoiser(gmm: GaussianMixture, t, sigma, y):
    return gmm.oracle_denoiser(t, sigma, _check_point(gmm, y))


def gmm_oracle_posterior_trace_cov(gmm: GaussianMixture, t, sigma, y):
    return gmm.oracle_posterior_trace_cov(t, sigma, _check_point(gmm, y))


# A small zoo of benchmark targets.  Only the bimodal family comes from the
# literature; the rest are our own choices for tests and configs.

def gaussian(dim=1, variance=1.0, mean=None) -> GaussianMixture:
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    return GaussianMixture(np.ones(1), mean[None, :], variance)


def symmetric_bimodal(dim=2, offset=1.0, variance=1.0, weight=0.5) -> GaussianMixture:
    """Two components at ``+offset * 1`` and ``-offset * 1``."""
    ones = np.ones(dim)
    return GaussianMixture(np.array([weight, 1.0 - weight]),
                           np.stack([offset * ones, -offset * ones]), variance)


def bimodal_benchmark() -> GaussianMixture:
    """The standard benchmark: d=2, s2=1, equal weights, means +-(1, 1)."""
    return symmetric_bimodal(dim=2, offset=1.0, variance=1.0, weight=0.5)
