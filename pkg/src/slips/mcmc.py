"""MALA and ULA kernels and the ergodic-average denoiser estimator.

All kernels work on a batch of independent chains: positions have shape
``(..., d)``.  Randomness comes either from one ``numpy.random.Generator``
or from a list of generators, one per chain; in the latter case each chain
consumes only its own stream, so a chain's trajectory does not depend on
which other chains share the batch.

Step-size policy
----------------
The posterior q_t(.|y) has Gaussian likelihood precision t / sigma^2, and
sigma^2 = R^2/d is the per-coordinate variance proxy of the target, so
``sigma^2 / (1 + t)`` tracks the posterior variance along the whole time
grid.  A fresh chain starts at step ``step * sigma^2 / (1 + t)`` and, if
adaptation is on, tunes it by Robbins-Monro on the log step during burn-in
only.  A warm-started chain keeps its tuned multiplier and rescales it by
``(1 + t_prev) / (1 + t)``; no adaptation happens while samples are being
averaged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DomainError, InitializationError, UnsupportedTargetError
from .targets import _sqnorm
from .sl_core import (
    SlipsConfig,
    make_grid,
    posterior_log_density_and_grad,
    resolve_sigma,
)

RngLike = Union[np.random.Generator, Sequence[np.random.Generator]]


@dataclass(frozen=True, eq=False)
class MalaState:
    """State of a batch of MALA chains.

    ``log_density`` and ``grad`` cache the values at ``position`` for the
    density the chain currently targets; :func:`retarget` recomputes them.
    """

    position: np.ndarray
    log_density: np.ndarray
    grad: np.ndarray
    step_size: np.ndarray
    accept_count: np.ndarray
    proposal_count: np.ndarray
    time: Optional[float] = None

    @property
    def acceptance_rate(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.proposal_count > 0,
                            self.accept_count / np.maximum(self.proposal_count, 1), np.nan)


def init_mala_state(log_density, grad_log_density, position, step_size, time=None) -> MalaState:
    x = np.array(position, dtype=float)
    h = np.broadcast_to(np.asarray(step_size, dtype=float), x.shape[:-1]).copy()
    if np.any(h <= 0):
        raise DomainError("MALA step size must be positive")
    zeros = np.zeros(x.shape[:-1], dtype=np.int64)
    return MalaState(x, np.asarray(log_density(x), dtype=float), np.asarray(grad_log_density(x), dtype=float),
                     h, zeros, zeros.copy(), time)


def retarget(state: MalaState, log_density, grad_log_density, *, step_size=None, time=None) -> MalaState:
    """Point an existing chain at a new density, refreshing the caches."""
    x = state.position
    h = state.step_size if step_size is None else np.broadcast_to(step_size, x.shape[:-1]).copy()
    return replace(state, log_density=np.asarray(log_density(x), dtype=float),
                   grad=np.asarray(grad_log_density(x), dtype=float), step_size=h, time=time)


def _transition(log_density, grad_log_density, state: MalaState, xi, log_u):
    """One MALA move from pre-drawn noise.  Returns (state, acceptance prob)."""
    h = state.step_size[..., None]
    x = state.position
    prop = x + h * state.grad + np.sqrt(2.0 * h) * xi
    with np.errstate(over="ignore", invalid="ignore"):
        lp_prop = np.asarray(log_density(prop), dtype=float)
        g_prop = np.asarray(grad_log_density(prop), dtype=float)
        back = x - prop - h * g_prop
        # forward residual is sqrt(2h) xi, so its log density is -|xi|^2 / 2
        log_q_ratio = -_sqnorm(back) / (4.0 * state.step_size) + 0.5 * _sqnorm(xi)
        log_alpha = lp_prop - state.log_density + log_q_ratio
    # non-finite proposal density or gradient counts as a rejection
    ok = np.isfinite(log_alpha) & np.all(np.isfinite(g_prop), axis=-1)
    log_alpha = np.where(ok, log_alpha, -np.inf)
    accept = log_u < log_alpha
    acc_prob = np.exp(np.minimum(log_alpha, 0.0))
    new = replace(
        state,
        position=np.where(accept[..., None], prop, x),
        log_density=np.where(accept, lp_prop, state.log_density),
        grad=np.where(accept[..., None], g_prop, state.grad),
        accept_count=state.accept_count + accept,
        proposal_count=state.proposal_count + 1,
    )
    return new, acc_prob


def mala_step(log_density, grad_log_density, state: MalaState, rng: np.random.Generator) -> MalaState:
    """Single Metropolis-adjusted Langevin move for every chain in ``state``.

    Proposal ``x' = x + h grad log rho(x) + sqrt(2h) xi``, accepted with the
    Metropolis-Hastings ratio using both forward and reverse proposal
    densities.
    """
    xi = rng.standard_normal(state.position.shape)
    log_u = np.log(rng.random(state.position.shape[:-1]))
    new, _ = _transition(log_density, grad_log_density, state, xi, log_u)
    return new


def ula_step(score, position, lam, rng: np.random.Generator, xi=None):
    """Unadjusted Langevin move ``x + lam s(x) + sqrt(2 lam) xi``.

    Raises:
        InitializationError: if the score is not finite.
    """
    if not (lam > 0):
        raise DomainError("ULA step lambda must be positive")
    x = np.asarray(position, dtype=float)
    s = np.asarray(score(x), dtype=float)
    if not np.all(np.isfinite(s)):
        raise InitializationError("non-finite score in ULA step")
    if xi is None:
        xi = rng.standard_normal(x.shape)
    return x + lam * s + math.sqrt(2.0 * lam) * xi


def draw_normal(rng: RngLike, batch_shape, tail):
    """Standard normals of shape ``batch_shape + tail`` (per-chain streams if a list)."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(tuple(batch_shape) + tuple(tail))
    return np.stack([g.standard_normal(tail) for g in rng]).reshape(tuple(batch_shape) + tuple(tail))


def _draw_chain_noise(rng: RngLike, batch_shape, n_steps, d):
    # Per chain: an (n_steps, d) block of normals, then n_steps uniforms.
    if isinstance(rng, np.random.Generator):
        xi = rng.standard_normal((n_steps,) + tuple(batch_shape) + (d,))
        u = rng.random((n_steps,) + tuple(batch_shape))
        return xi, u
    xis, us = [], []
    for g in rng:
        xis.append(g.standard_normal((n_steps, d)))
        us.append(g.random(n_steps))
    xi = np.stack(xis, axis=1).reshape((n_steps,) + tuple(batch_shape) + (d,))
    u = np.stack(us, axis=1).reshape((n_steps,) + tuple(batch_shape))
    return xi, u


def _adapt_gain(j):
    return (j + 1.0) ** -0.6


def run_chain(log_density, grad_log_density, state: MalaState, xi, u, *,
              adapt=False, target_accept=0.574, record=True):
    """Run ``len(xi)`` MALA moves on pre-drawn noise.

    Returns:
        ``(final_state, position_sum, n_accepted)``; the sum covers every
        post-move position when ``record`` is true.
    """
    log_u = np.log(u)
    total = np.zeros_like(state.position) if record else None
    start_acc = state.accept_count
    for j in range(xi.shape[0]):
        state, acc_prob = _transition(log_density, grad_log_density, state, xi[j], log_u[j])
        if adapt:
            log_h = np.log(state.step_size) + _adapt_gain(j) * (acc_prob - target_accept)
            state = replace(state, step_size=np.exp(log_h))
        if record:
            total = total + state.position
    return state, total, state.accept_count - start_acc


@dataclass(frozen=True, eq=False)
class DenoiserEstimate:
    u_hat: np.ndarray
    acceptance_rate: np.ndarray
    final_state: MalaState
    n_averaged: int

    @property
    def all_rejected(self):
        return np.asarray(self.acceptance_rate) == 0.0

    @property
    def warning(self) -> Optional[str]:
        n = int(np.sum(self.all_rejected))
        if n:
            return f"{n} chain(s) rejected every proposal; u_hat is the start point"
        return None


@dataclass(frozen=True)
class MalaSettings:
    step: float = 0.5
    adapt: bool = True
    burn_in_fraction: float = 0.2
    target_accept: float = 0.574

    @classmethod
    def from_config(cls, config: SlipsConfig) -> "MalaSettings":
        return cls(config.mala_step, config.mala_adapt, config.burn_in_fraction, config.target_accept)


def estimate_denoiser(target, t, sigma, y, M, warm_start: Optional[MalaState] = None,
                      rng: RngLike = None, settings: MalaSettings = MalaSettings()) -> DenoiserEstimate:
    """Ergodic-average estimate of E[X | Y_t = y] from one MALA chain per y.

    A warm-started chain averages all ``M`` post-move positions.  A fresh
    chain starts at ``y / (1 + t)``, first runs ``ceil(M * burn_in_fraction)``
    burn-in moves (adapting the step if enabled) and then averages the next
    ``M`` positions.
    """
    est = _estimate(target, t, sigma, y, M, warm_start, rng, settings)
    if est.warning:
        warnings.warn(est.warning, RuntimeWarning, stacklevel=2)
    return est


def _estimate(target, t, sigma, y, M, warm_start, rng, settings) -> DenoiserEstimate:
    if int(M) != M or M < 1:
        raise DomainError(f"M must be an integer >= 1, got {M}")
    if not (t > 0 and sigma > 0):
        raise DomainError("t and sigma must be positive")
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    batch = y.shape[:-1]
    sig2 = sigma**2

    # The kernels always ask for log q(x) and then grad log q(x) at the same
    # array, so one fused evaluation serves both calls.
    cache = [None, None]

    def log_q(x):
        lp, g = posterior_log_density_and_grad(target, t, sigma, y, x)
        cache[0], cache[1] = x, g
        return lp

    def grad_q(x):
        if cache[0] is x:
            return cache[1]
        return posterior_log_density_and_grad(target, t, sigma, y, x)[1]

    if warm_start is None:
        n_burn = int(math.ceil(M * settings.burn_in_fraction))
        h0 = settings.step * sig2 / (1.0 + t)
        state = init_mala_state(log_q, grad_q, y / (1.0 + t), h0, time=t)
    else:
        n_burn = 0
        t_prev = t if warm_start.time is None else warm_start.time
        h = warm_start.step_size * (1.0 + t_prev) / (1.0 + t)
        state = retarget(warm_start, log_q, grad_q, step_size=h, time=t)

    xi, u = _draw_chain_noise(rng, batch, n_burn + M, d)
    if n_burn:
        state, _, _ = run_chain(log_q, grad_q, state, xi[:n_burn], u[:n_burn],
                                adapt=settings.adapt, target_accept=settings.target_accept, record=False)
    state, total, n_acc = run_chain(log_q, grad_q, state, xi[n_burn:], u[n_burn:], record=True)
    return DenoiserEstimate(total / M, n_acc / M, state, int(M))


@dataclass(frozen=True, eq=False)
class Eps0Estimate:
    value: float
    std_error: float
    per_step_l2: np.ndarray
    grid: np.ndarray
    n_paths: int


def simulate_sl_paths(target, grid, sigma, n_paths, rng):
    """Exact observation-process paths ``Y_{t_k} = t_k X + sigma B_{t_k}``.

    Returns:
        ``(X, Y)`` with shapes ``(n, d)`` and ``(len(grid), n, d)``.
    """
    if target.sample is None:
        raise UnsupportedTargetError("exact SL paths need a target that can be sampled")
    grid = np.asarray(grid, dtype=float)
    x = target.sample(n_paths, rng)
    incr = rng.standard_normal((grid.size, n_paths, target.dim))
    dt = np.diff(np.concatenate([[0.0], grid]))
    b = np.cumsum(incr * np.sqrt(dt)[:, None, None], axis=0)
    return x, grid[:, None, None] * x[None] + sigma * b


def estimate_eps0(target, config: SlipsConfig, n_paths: int, rng: np.random.Generator,
                  n_bootstrap: int = 200) -> Eps0Estimate:
    """Weighted L2 error of the denoiser estimates along exact SL paths.

    ``(1 / (t_K - t_0)) sum_k delta_k ||u_hat_{t_k}(Y_{t_k}) - u_{t_k}(Y_{t_k})||_{L2}``
    with the L2 norms estimated over ``n_paths`` paths.  Chains are warm
    started along each path exactly as in a SLIPS run.  The standard error
    is a bootstrap over paths.
    """
    if target.oracle_denoiser is None:
        raise UnsupportedTargetError("estimate_eps0 needs a target with an oracle denoiser")
    sigma = resolve_sigma(target, config)
    disc = make_grid(config.grid, config.t0, config.T, config.K)
    grid = disc.grid
    _, ys = simulate_sl_paths(target, grid, sigma, n_paths, rng)
    settings = MalaSettings.from_config(config)
    sq_err = np.zeros((config.K, n_paths))
    state = None
    for k in range(config.K):
        t = float(grid[k])
        u_true = target.oracle_denoiser(t, sigma, ys[k])
        if config.denoiser_mode == "oracle":
            u_hat = u_true
        else:
            est = _estimate(target, t, sigma, ys[k], config.M, state, rng, settings)
            state = est.final_state
            u_hat = est.u_hat
        sq_err[k] = np.sum((u_hat - u_true) ** 2, axis=-1)
    delta = np.diff(grid)
    span = grid[-1] - grid[0]

    def weighted(se):
        return float(np.sum(delta * np.sqrt(np.mean(se, axis=-1))) / span)

    value = weighted(sq_err)
    boot = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        idx = rng.integers(0, n_paths, n_paths)
        boot[b] = weighted(sq_err[:, idx])
    return Eps0Estimate(value, float(np.std(boot, ddof=1)), np.sqrt(np.mean(sq_err, axis=-1)), grid, n_paths)
