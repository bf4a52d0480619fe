"""The SLIPS driver: Langevin-within-Langevin initialization and the EM loop.

Runs are simulated in blocks that are vectorized over runs, but every run
draws from its own generator in a fixed order:

1. ``Y^(0)`` (d normals);
2. for each of the N initialization steps: the inner MALA noise block
   (mala mode only), then the ULA increment (d normals);
3. for each k = 0..K-1: the inner MALA noise block (mala mode only), then
   the EM increment ``G_k`` (d normals).

A MALA noise block is ``(steps, d)`` normals followed by ``steps`` uniforms;
fresh chains take ``ceil(M * burn_in_fraction)`` extra burn-in steps.
The block size is fixed independently of the worker count, so the batch
output does not depend on how blocks are scheduled.
"""

from __future__ import annotations

import logging
import math
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, SimulationError, UnsupportedTargetError
from .mcmc import MalaSettings, RngLike, _estimate, draw_normal
from .sl_core import SlipsConfig, resolve_sigma, tweedie_score

log = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 256


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Generator for run ``run_index`` of a batch seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(run_index),)))


def _bad_rows(a):
    return np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(a)), axis=-1))


def _denoise(target, t, sigma, y, mode, M, state, rng, settings):
    if mode == "oracle":
        return target.oracle_denoiser(t, sigma, y), state, None
    est = _estimate(target, t, sigma, y, M, state, rng, settings)
    return est.u_hat, est.final_state, est.acceptance_rate


def _initialize(target, t0, sigma, N, M, rng, mode, settings, batch, run_ids=None):
    d = target.dim
    lam = sigma**2 * t0 / 2.0
    y = math.sqrt(sigma**2 * t0) * draw_normal(rng, batch, (d,))
    state = None
    acc = np.full((N,) + tuple(batch), np.nan)
    for n in range(N):
        u, state, a = _denoise(target, t0, sigma, y, mode, M, state, rng, settings)
        if a is not None:
            acc[n] = a
        score = tweedie_score(t0, sigma, y, u)
        bad = _bad_rows(score)
        if bad.size:
            runs = bad if run_ids is None else np.asarray(run_ids)[bad]
            raise SimulationError("non-finite score estimate during initialization",
                                  phase="init", step=n, runs=runs.tolist())
        xi = draw_normal(rng, batch, (d,))
        y = y + lam * score + math.sqrt(2.0 * lam) * xi
    return y, state, acc


def initialize(target, t0, sigma, N, M, rng: RngLike, *, denoiser_mode="mala",
               settings: MalaSettings = MalaSettings()):
    """Langevin-within-Langevin initialization at time ``t0``.

    Starts from ``N(0, sigma^2 t0 I)`` and takes ``N`` ULA steps with step
    ``sigma^2 t0 / 2`` on p_{t0}, whose score comes from the estimated
    denoiser through Tweedie's formula.  Inner chains are warm-started from
    one ULA step to the next.

    Returns:
        ``(Y^(N), final inner-chain state)``; the state is ``None`` in oracle
        mode or when ``N == 0``.
    """
    if not (t0 > 0 and sigma > 0):
        raise DomainError("t0 and sigma must be positive")
    if int(N) != N or N < 0 or int(M) != M or M < 1:
        raise DomainError("need integer N >= 0 and M >= 1")
    batch = () if isinstance(rng, np.random.Generator) else (len(rng),)
    y, state, _ = _initialize(target, t0, sigma, int(N), int(M), rng, denoiser_mode, settings, batch)
    return y, state


def _check_config(target, config: SlipsConfig):
    if config.denoiser_mode == "oracle" and target.oracle_denoiser is None:
        raise UnsupportedTargetError("oracle mode needs a target with an oracle denoiser")
    return resolve_sigma(target, config)


def _simulate(target, config: SlipsConfig, rngs, keep_trace=True, run_ids=None):
    """Simulate one block of runs.  ``rngs`` holds one generator per run."""
    sigma = _check_config(target, config)
    disc = config.discretization()
    grid = disc.grid
    settings = MalaSettings.from_config(config)
    mode = config.denoiser_mode
    n, d, K = len(rngs), target.dim, config.K

    y, state, init_acc = _initialize(target, config.t0, sigma, config.N, config.M, rngs,
                                     mode, settings, (n,), run_ids)
    if not config.reuse_init_chain:
        state = None
    states = np.empty((K + 1, n, d)) if keep_trace else None
    u_hats = np.empty((K, n, d)) if keep_trace else None
    acc = np.full((K, n), np.nan)
    if keep_trace:
        states[0] = y
    for k in range(K):
        t = float(grid[k])
        delta = float(grid[k + 1] - grid[k])
        u, state, a = _denoise(target, t, sigma, y, mode, config.M, state, rngs, settings)
        if a is not None:
            acc[k] = a
        bad = _bad_rows(u)
        if bad.size:
            runs = bad if run_ids is None else np.asarray(run_ids)[bad]
            raise SimulationError("non-finite denoiser estimate", phase="main", step=k, runs=runs.tolist())
        g = draw_normal(rngs, (n,), (d,))
        y = y + delta * u + (sigma * math.sqrt(delta)) * g
        if keep_trace:
            u_hats[k] = u
            states[k + 1] = y
    return {
        "sample": y / grid[-1],
        "states": states,
        "u_hat": u_hats,
        "acceptance": acc,
        "init_acceptance": init_acc,
        "grid": grid,
        "sigma": sigma,
    }


@dataclass(frozen=True, eq=False)
class RunResult:
    """One SLIPS run.  ``sample`` is exactly ``states[-1] / times[-1]``."""

    sample: np.ndarray
    times: np.ndarray
    states: Optional[np.ndarray]
    u_hat: Optional[np.ndarray]
    acceptance: np.ndarray
    init_acceptance: np.ndarray
    config: SlipsConfig
    sigma: float
    seed: Optional[int] = None
    run_index: Optional[int] = None

    def trace_rows(self):
        """One record per grid point; the last row carries no denoiser."""
        if self.states is None:
            raise ValueError("run was simulated without a trace")
        d = self.states.shape[-1]
        rows = []
        for k, t in enumerate(self.times):
            has_u = k < len(self.times) - 1
            rows.append({
                "run_id": self.run_index,
                "k": k,
                "t": float(t),
                "state": self.states[k],
                "u_hat": self.u_hat[k] if has_u else np.full(d, np.nan),
                "acceptance": float(self.acceptance[k]) if has_u else float("nan"),
            })
        return rows


def _result(block, j, config, seed, run_index):
    return RunResult(
        sample=block["sample"][j],
        times=block["grid"],
        states=None if block["states"] is None else block["states"][:, j],
        u_hat=None if block["u_hat"] is None else block["u_hat"][:, j],
        acceptance=block["acceptance"][:, j],
        init_acceptance=block["init_acceptance"][:, j],
        config=config,
        sigma=block["sigma"],
        seed=seed,
        run_index=run_index,
    )


def run_slips(target, config: SlipsConfig, rng: Optional[np.random.Generator] = None,
              keep_trace: bool = True) -> RunResult:
    """One SLIPS run; output ``Y~_{t_K} / t_K`` plus the full trace.

    Without ``rng`` the generator is ``run_rng(config.seed, 0)``, so a lone
    run equals run 0 of :func:`run_batch`.
    """
    if rng is None:
        rng = run_rng(config.seed, 0)
    block = _simulate(target, config, [rng], keep_trace=keep_trace)
    return _result(block, 0, config, config.seed, 0)


@dataclass(eq=False)
class BatchResult:
    """Results of ``n_runs`` independent runs, ordered by run index."""

    config: SlipsConfig
    n_runs: int
    run_ids: np.ndarray
    samples: np.ndarray
    acceptance: np.ndarray
    init_acceptance: np.ndarray
    sigma: float
    times: np.ndarray
    states: Optional[np.ndarray] = None
    u_hat: Optional[np.ndarray] = None
    failures: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures) and self.run_ids.size > 0

    def results(self):
        """Per-run :class:`RunResult` views."""
        out = []
        for j, rid in enumerate(self.run_ids):
            out.append(RunResult(
                sample=self.samples[j], times=self.times,
                states=None if self.states is None else self.states[j],
                u_hat=None if self.u_hat is None else self.u_hat[j],
                acceptance=self.acceptance[j], init_acceptance=self.init_acceptance[j],
                config=self.config, sigma=self.sigma, seed=self.config.seed, run_index=int(rid)))
        return out


def _run_block(args):
    """Simulate one block; returns ``([(ids, block), ...], failures)``."""
    target, config, ids, keep_trace = args
    rngs = [run_rng(config.seed, i) for i in ids]
    try:
        return [(ids, _simulate(target, config, rngs, keep_trace, run_ids=ids))], {}
    except Exception as exc:  # isolate the failing runs
        if len(ids) == 1:
            return [], {int(ids[0]): f"{type(exc).__name__}: {exc}"}
        log.warning("block %d-%d failed (%s); rerunning runs one by one", ids[0], ids[-1], exc)
        parts, failures = [], {}
        for i in ids:
            ok, fail = _run_block((target, config, [i], keep_trace))
            parts.extend(ok)
            failures.update(fail)
        return parts, failures


def run_batch(target, config: SlipsConfig, n_runs: int, workers: int = 1,
              block_size: int = DEFAULT_BLOCK_SIZE, keep_trace: bool = False) -> BatchResult:
    """``n_runs`` independent SLIPS runs seeded from ``(config.seed, run_index)``.

    Output is bit-identical for any ``workers``; failing runs are reported
    in ``failures`` (run index -> message) and the rest are returned.
    """
    if int(n_runs) != n_runs or n_runs < 1:
        raise DomainError("n_runs must be an integer >= 1")
    if workers < 1 or block_size < 1:
        raise DomainError("workers and block_size must be positive")
    sigma = _check_config(target, config)
    ids = list(range(int(n_runs)))
    blocks = [ids[s:s + block_size] for s in range(0, len(ids), block_size)]
    jobs = [(target, config, b, keep_trace) for b in blocks]
    if workers > 1 and len(blocks) > 1:
        try:
            pickle.dumps(target)
        except Exception:
            log.warning("target cannot be pickled; running serially")
            workers = 1
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(blocks))) as pool:
            outputs = list(pool.map(_run_block, jobs))
    else:
        outputs = [_run_block(j) for j in jobs]

    pieces, failures = [], {}
    for ok, fail in outputs:
        pieces.extend(ok)
        failures.update(fail)
    pieces.sort(key=lambda p: p[0][0])
    d, K = target.dim, config.K
    grid = config.discretization().grid
    if not pieces:
        return BatchResult(config, int(n_runs), np.zeros(0, int), np.zeros((0, d)), np.zeros((0, K)),
                           np.zeros((0, config.N)), sigma, grid, failures=failures)
    run_ids = np.concatenate([np.asarray(p[0], dtype=int) for p in pieces])
    cat = lambda key, axis: np.concatenate([p[1][key] for p in pieces], axis=axis)
    states = u_hat = None
    if keep_trace:
        states = np.moveaxis(cat("states", 1), 1, 0)
        u_hat = np.moveaxis(cat("u_hat", 1), 1, 0)
    return BatchResult(
        config=config, n_runs=int(n_runs), run_ids=run_ids,
        samples=cat("sample", 0),
        acceptance=cat("acceptance", 1).T,
        init_acceptance=cat("init_acceptance", 1).T,
        sigma=sigma, times=grid, states=states, u_hat=u_hat, failures=failures)


def recover_em_noise(target, config: SlipsConfig, rng: np.random.Generator) -> np.ndarray:
    """Replay a run's generator and return its EM increments ``G_k``, shape ``(K, d)``.

    ``rng`` must be in the same state as the one handed to :func:`run_slips`.
    """
    d = target.dim
    burn = int(math.ceil(config.M * config.burn_in_fraction))
    mala = config.denoiser_mode == "mala"

    def chain_block(fresh):
        steps = config.M + (burn if fresh else 0)
        rng.standard_normal((steps, d))
        rng.random(steps)

    rng.standard_normal(d)
    for n in range(config.N):
        if mala:
            chain_block(n == 0)
        rng.standard_normal(d)
    fresh_main = config.N == 0 or not config.reuse_init_chain
    out = np.empty((config.K, d))
    for k in range(config.K):
        if mala:
            chain_block(fresh_main and k == 0)
        out[k] = rng.standard_normal(d)
    return out
