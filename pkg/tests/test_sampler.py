import math

import numpy as np
import pytest

from slips.errors import DomainError, UnsupportedTargetError
from slips.metrics import mode_weights
from slips.sampler import initialize, recover_em_noise, run_batch, run_rng, run_slips
from slips.sl_core import SlipsConfig, tv_information_bound, tweedie_score
from slips.targets import TargetModel, bimodal_benchmark, gaussian, symmetric_bimodal
from slips.verify import t0_sweep


def rngs(seed, n):
    return [run_rng(seed, i) for i in range(n)]


# --- initialization ----------------------------------------------------------------

def test_initialize_without_steps_is_gaussian_draw():
    t0, sigma, n = 0.5, 1.5, 10**4
    y, state = initialize(gaussian(2).to_target(), t0, sigma, 0, 10, rngs(1, n))
    assert state is None
    c = np.cov(y.T)
    v = sigma**2 * t0
    se = v * math.sqrt(2.0 / n)
    assert np.all(np.abs(np.diag(c) - v) < 3 * se)
    assert abs(c[0, 1]) < 3 * v / math.sqrt(n)


def test_initialize_uses_half_sigma2_t0_step():
    g = gaussian(1, variance=2.0)
    t0, sigma = 0.3, 1.2
    y, _ = initialize(g.to_target(), t0, sigma, 1, 5, np.random.default_rng(4), denoiser_mode="oracle")
    rng = np.random.default_rng(4)
    y0 = math.sqrt(sigma**2 * t0) * rng.standard_normal(1)
    lam = sigma**2 * t0 / 2
    score = tweedie_score(t0, sigma, y0, g.oracle_denoiser(t0, sigma, y0))
    np.testing.assert_array_equal(y, y0 + lam * score + math.sqrt(2 * lam) * rng.standard_normal(1))


def test_initialize_oracle_gaussian_matches_noised_marginal():
    s2, t0, sigma, n = 1.0, 0.1, 1.0, 8000
    y, _ = initialize(gaussian(1, variance=s2).to_target(), t0, sigma, 500, 1, rngs(2, n),
                      denoiser_mode="oracle")
    v = t0**2 * s2 + t0 * sigma**2
    lam = sigma**2 * t0 / 2
    se_mean = math.sqrt(v / n)
    se_var = v * math.sqrt(2.0 / n)
    assert abs(y.mean()) < 3 * se_mean
    # ULA bias allowance: relative 2 lam / v
    assert abs(y.var() - v) < 3 * se_var + 2 * lam


def test_initialize_symmetric_bimodal_mean():
    n = 600
    y, state = initialize(symmetric_bimodal(2).to_target(), 0.02, math.sqrt(2), 20, 20, rngs(3, n))
    assert state is not None
    se = y.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(y.mean(axis=0)) < 3 * se)


def test_initialize_domain_errors():
    tgt = gaussian(1).to_target()
    with pytest.raises(DomainError):
        initialize(tgt, 0.0, 1.0, 1, 1, np.random.default_rng(0))
    with pytest.raises(DomainError):
        initialize(tgt, 1.0, 1.0, -1, 1, np.random.default_rng(0))


# --- single runs and traces --------------------------------------------------------

SMALL = SlipsConfig(t0=0.05, T=50.0, K=12, M=15, N=5, seed=3)


def test_trace_invariants():
    res = run_slips(symmetric_bimodal(2).to_target(), SMALL)
    assert res.states.shape == (SMALL.K + 1, 2) and res.u_hat.shape == (SMALL.K, 2)
    assert res.times.shape == (SMALL.K + 1,)
    np.testing.assert_array_equal(res.sample, res.states[-1] / res.times[-1])
    assert np.all((0 <= res.acceptance) & (res.acceptance <= 1))
    rows = res.trace_rows()
    assert len(rows) == SMALL.K + 1 and rows[0]["k"] == 0 and np.isnan(rows[-1]["acceptance"])


def test_sigma_auto_on_benchmark():
    res = run_slips(bimodal_benchmark().to_target(), SMALL.with_(denoiser_mode="oracle"))
    assert res.sigma**2 == pytest.approx(2.0, rel=1e-14)


def test_run_is_deterministic():
    tgt = symmetric_bimodal(2).to_target()
    a, b = run_slips(tgt, SMALL), run_slips(tgt, SMALL)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.u_hat, b.u_hat)
    np.testing.assert_array_equal(a.acceptance, b.acceptance)


@pytest.mark.parametrize("mode,reuse", [("mala", True), ("mala", False), ("oracle", True)])
def test_em_update_replays_bitwise(mode, reuse):
    tgt = symmetric_bimodal(2).to_target()
    cfg = SMALL.with_(denoiser_mode=mode, reuse_init_chain=reuse)
    res = run_slips(tgt, cfg, rng=np.random.default_rng(21))
    g = recover_em_noise(tgt, cfg, np.random.default_rng(21))
    delta = np.diff(res.times)
    for k in range(cfg.K):
        fwd = res.states[k] + delta[k] * res.u_hat[k] + (res.sigma * math.sqrt(delta[k])) * g[k]
        np.testing.assert_array_equal(fwd, res.states[k + 1])
        resid = res.states[k + 1] - res.states[k] - delta[k] * res.u_hat[k]
        np.testing.assert_allclose(resid, res.sigma * math.sqrt(delta[k]) * g[k], rtol=1e-12, atol=1e-12)


def test_oracle_mode_needs_oracle():
    bare = TargetModel(1, lambda x: -0.5 * np.sum(x * x, -1), lambda x: -x, variance_proxy=1.0)
    with pytest.raises(UnsupportedTargetError):
        run_slips(bare, SMALL.with_(denoiser_mode="oracle"))
    with pytest.raises(UnsupportedTargetError):
        run_batch(bare, SMALL.with_(denoiser_mode="oracle"), 3)


def test_config_violation_raises_before_simulation():
    with pytest.raises(DomainError):
        SMALL.with_(K=0)


# --- batches -----------------------------------------------------------------------

def test_single_run_batch_equals_run_slips():
    tgt = symmetric_bimodal(2).to_target()
    batch = run_batch(tgt, SMALL, 1, keep_trace=True)
    res = run_slips(tgt, SMALL)
    np.testing.assert_array_equal(batch.samples[0], res.sample)
    np.testing.assert_array_equal(batch.states[0], res.states)


def test_batch_rows_match_individual_runs():
    tgt = symmetric_bimodal(2).to_target()
    batch = run_batch(tgt, SMALL, 5, block_size=2)
    for i in (0, 3, 4):
        np.testing.assert_array_equal(batch.samples[i], run_slips(tgt, SMALL, rng=run_rng(SMALL.seed, i)).sample)


def test_worker_count_does_not_change_results():
    tgt = symmetric_bimodal(2).to_target()
    cfg = SMALL.with_(K=6, M=5, N=2)
    one = run_batch(tgt, cfg, 600, workers=1)
    many = run_batch(tgt, cfg, 600, workers=8)
    np.testing.assert_array_equal(one.run_ids, many.run_ids)
    np.testing.assert_array_equal(one.samples, many.samples)
    np.testing.assert_array_equal(one.acceptance, many.acceptance)


def _flaky_target(threshold):
    g = gaussian(1)

    def denoiser(t, sigma, y):
        u = g.oracle_denoiser(t, sigma, y)
        return np.where(y / t > threshold, np.nan, u)

    base = g.to_target()
    return TargetModel(1, base.log_density_unnorm, base.grad_log_density, variance_proxy=1.0,
                       oracle_denoiser=denoiser)


def test_failures_are_isolated_with_indices():
    cfg = SlipsConfig(t0=0.1, T=10.0, K=10, N=3, denoiser_mode="oracle", seed=5)
    healthy = run_batch(_flaky_target(np.inf), cfg, 40, block_size=16)
    flaky = run_batch(_flaky_target(1.5), cfg, 40, block_size=16)
    assert flaky.partial and flaky.failures
    assert len(flaky.failures) + flaky.run_ids.size == 40
    assert set(flaky.failures).isdisjoint(flaky.run_ids.tolist())
    assert all("SimulationError" in m for m in flaky.failures.values())
    np.testing.assert_array_equal(flaky.samples, healthy.samples[flaky.run_ids])


def test_total_failure_is_not_partial():
    cfg = SlipsConfig(t0=0.1, T=10.0, K=5, N=1, denoiser_mode="oracle", seed=5)
    out = run_batch(_flaky_target(-np.inf), cfg, 4)
    assert not out.partial and len(out.failures) == 4 and out.samples.shape == (0, 1)


def test_batch_rejects_bad_sizes():
    with pytest.raises(DomainError):
        run_batch(gaussian(1).to_target(), SMALL, 0)


# --- ensemble behaviour ------------------------------------------------------------

def _gaussian_T(s2, sigma, bound=0.01):
    T = 1.0
    while tv_information_bound(math.sqrt(1 / s2), 1, sigma, T) >= bound:
        T *= 2
    return T


def test_oracle_gaussian_ensemble_moments():
    s2, sigma, n = 1.0, 1.0, 5000
    cfg = SlipsConfig(t0=0.01, T=_gaussian_T(s2, sigma), K=200, N=50, sigma=sigma,
                      denoiser_mode="oracle", seed=9)
    x = run_batch(gaussian(1, variance=s2).to_target(), cfg, n).samples[:, 0]
    assert abs(x.mean()) < 3 * x.std(ddof=1) / math.sqrt(n)
    assert abs(x.var() / s2 - 1) < 0.05


def test_oracle_em_tracks_exact_variance_at_every_step():
    # N=0 starts from N(0, sigma^2 t0), only t0 s2 / sigma^2 = 1% off the exact marginal,
    # so any drift comes from the EM recursion itself
    s2, sigma = 1.0, 1.0
    cfg = SlipsConfig(t0=0.01, T=_gaussian_T(s2, sigma), K=200, N=0, sigma=sigma,
                      denoiser_mode="oracle", seed=9)
    batch = run_batch(gaussian(1, variance=s2).to_target(), cfg, 5000, keep_trace=True)
    exact = batch.times**2 * s2 + batch.times * sigma**2
    emp = batch.states[:, :, 0].var(axis=0)
    assert np.max(np.abs(emp / exact - 1)) < 0.05


def test_ula_initialization_variance_matches_ula_stationary_law():
    # ULA with step lam on N(0, v) is stationary at v / (1 - lam / (2 v));
    # lam = sigma^2 t0 / 2 is about v / 2 for small t0, a 4/3 inflation
    s2, sigma, t0, n = 1.0, 1.0, 0.01, 5000
    cfg = SlipsConfig(t0=t0, T=1.0, K=1, N=50, sigma=sigma, denoiser_mode="oracle", seed=9)
    batch = run_batch(gaussian(1, variance=s2).to_target(), cfg, n, keep_trace=True)
    v = t0**2 * s2 + t0 * sigma**2
    lam = sigma**2 * t0 / 2
    v_ula = v / (1 - lam / (2 * v))
    emp = batch.states[:, 0, 0].var()
    assert abs(emp - v_ula) < 3 * v_ula * math.sqrt(2.0 / n)


def test_oracle_symmetric_bimodal_weights():
    g = symmetric_bimodal(2)
    cfg = SlipsConfig(t0=0.02, T=1e4, K=200, N=50, denoiser_mode="oracle", seed=1)
    batch = run_batch(g.to_target(), cfg, 5000)
    w = mode_weights(batch.samples, g.means).values
    assert np.all(np.abs(w - 0.5) <= 0.03)


def test_weights_degrade_when_t0_is_far_past_sweet_spot():
    g = symmetric_bimodal(2, weight=0.7)
    base = SlipsConfig(t0=0.02, T=1e3, K=100, N=50, seed=2)
    sweet, far = t0_sweep(g.to_target(), base, [0.02, 2.0], 3000)
    assert far["error"] > sweet["error"]
