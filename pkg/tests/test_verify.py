import json
import math

import numpy as np
import pytest

from slips.errors import DomainError, UnsupportedTargetError
from slips.metrics import sliced_tv
from slips.sampler import run_batch
from slips.sl_core import SlipsConfig, c_disc, log_snr_grid
from slips.targets import GaussianMixture, TargetModel, gaussian, symmetric_bimodal
from slips.verify import (
    CHECKS,
    c_disc_sweep,
    check_covariance_identity,
    check_grid_optimality,
    check_information_bound,
    check_martingale,
    check_trace_cov_decay,
    check_tweedie_identity,
    compare_schedules,
    minimize_c_disc,
    scaling_K,
    scaling_T,
    tv_quadrature,
)

BIMODAL_1D = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], 1.0)


# --- martingale and covariance identities ------------------------------------------

@pytest.mark.parametrize("g", [
    symmetric_bimodal(2),
    gaussian(2, variance=0.5, mean=[1.5, -2.0]),
    GaussianMixture([0.7, 0.3], [[2.0], [-1.0]], 0.8),
])
def test_martingale_mean_is_constant(g):
    rep = check_martingale(g, 1.0, [0.1, 1.0, 10.0], 20000, rng=1)
    assert rep.passed, rep.details
    assert rep.seed == 1
    if g.n_components == 2 and g.dim == 1:
        np.testing.assert_allclose(g.mean, [0.7 * 2.0 - 0.3 * 1.0])


def test_martingale_needs_oracle_and_increasing_times():
    bare = TargetModel(1, lambda x: -0.5 * np.sum(x * x, -1), lambda x: -x)
    with pytest.raises(UnsupportedTargetError):
        check_martingale(bare, 1.0, [1.0], 10)
    with pytest.raises(DomainError):
        check_martingale(BIMODAL_1D, 1.0, [2.0, 1.0], 10)


def test_covariance_identity_equal_times_is_zero():
    rep = check_covariance_identity(BIMODAL_1D, 1.0, 2.0, 2.0, 1000, rng=0)
    assert rep.observed == [0.0, 0.0] and rep.passed


def test_covariance_identity_gaussian_closed_form():
    s2, sigma, d = 0.5, 1.3, 2
    g = gaussian(d, variance=s2)
    v = lambda r: s2 * sigma**2 / (sigma**2 + r * s2)
    y = np.random.default_rng(0).normal(size=(5, d))
    np.testing.assert_allclose(g.oracle_posterior_trace_cov(2.0, sigma, y), d * v(2.0), rtol=1e-13)
    rep = check_covariance_identity(g, sigma, 0.5, 3.0, 100000, rng=2)
    assert rep.passed
    exact = d * (v(0.5) - v(3.0))
    assert rep.observed[1] == pytest.approx(exact, rel=1e-12)
    assert abs(rep.observed[0] - exact) < 3 * rep.details["combined_se"]


def test_covariance_identity_bimodal():
    rep = check_covariance_identity(BIMODAL_1D, 1.0, 1.0, 4.0, 100000, rng=3)
    assert rep.passed and rep.details["trace_bound_ok"]
    assert rep.details["paired_se"] <= rep.details["combined_se"]


def test_covariance_identity_rejects_bad_times():
    with pytest.raises(DomainError):
        check_covariance_identity(BIMODAL_1D, 1.0, 2.0, 1.0, 10)


def test_trace_cov_decay():
    rep = check_trace_cov_decay(symmetric_bimodal(2), math.sqrt(2), [0.05, 0.2, 1.0, 5.0, 25.0], 20000, rng=4)
    assert rep.passed
    assert np.all(np.diff(rep.observed) < 0)


def test_reports_are_reproducible():
    a = check_martingale(BIMODAL_1D, 1.0, [0.5, 2.0], 500, rng=11).as_dict()
    b = check_martingale(BIMODAL_1D, 1.0, [0.5, 2.0], 500, rng=11).as_dict()
    assert json.dumps(a) == json.dumps(b)


# --- grid optimality ---------------------------------------------------------------

def test_grid_optimality_small_example():
    rep = check_grid_optimality(1.0, 16.0, 4, rng=0)
    assert rep.passed
    np.testing.assert_allclose(rep.observed, [2.0, 4.0], rtol=1e-6)
    assert rep.details["c_disc_geometric"] == pytest.approx(2.5, rel=1e-15)
    assert rep.details["stationarity_rel"] < 1e-8


def test_single_free_point_is_geometric_mean():
    rep = check_grid_optimality(0.5, 40.0, 3, rng=1)
    t0, t2 = 0.5, log_snr_grid(0.5, 40.0, 3).grid[2]
    assert rep.passed and rep.observed[0] == pytest.approx(math.sqrt(t0 * t2), rel=1e-6)


@pytest.mark.parametrize("args", [(0.01, 100.0, 6), (0.1, 10.0, 8)])
def test_grid_optimality_random_grids_never_win(args):
    rep = check_grid_optimality(*args, rng=2)
    assert rep.passed
    assert rep.details["random_undercut"] >= -1e-12
    assert rep.details["stationarity_rel"] < 1e-8
    assert rep.details["restarts_at_geometric"] >= 1


def test_coordinate_minimizer_on_brute_force_grid():
    # K = 3 brute force over the free point
    t0, t2, t3 = 1.0, 9.0, 27.0
    xs = np.exp(np.linspace(np.log(t0), np.log(t2), 200001))[1:-1]
    vals = [c_disc(np.array([t0, x, t2, t3])) for x in xs[::50]]
    brute = xs[::50][int(np.argmin(vals))]
    sol, _ = minimize_c_disc(np.array([t0, 5.0, t2, t3]), [1])
    assert sol[1] == pytest.approx(brute, rel=2e-3)
    assert sol[1] == pytest.approx(3.0, rel=1e-9)


def test_grid_optimality_domain_errors():
    with pytest.raises(DomainError):
        check_grid_optimality(1.0, 16.0, 2)
    with pytest.raises(DomainError):
        check_grid_optimality(2.0, 1.0, 4)


# --- quadrature checks -------------------------------------------------------------

def test_information_bound_standard_gaussian():
    rep = check_information_bound(gaussian(1), 1.0, [100.0])
    assert rep.target[0] == pytest.approx(0.05, rel=1e-6)
    assert rep.passed and rep.observed[0] <= 0.05


def test_noised_tv_vanishes_for_large_t():
    g = gaussian(1)
    tvs = [tv_quadrature(g, g.noised(1.0 / t)) for t in (1e2, 1e4, 1e6)]
    assert tvs[0] > tvs[1] > tvs[2] and tvs[2] < 1e-5


def test_information_bound_bimodal():
    g = GaussianMixture([0.5, 0.5], [[3.0], [-3.0]], 1.0)
    assert check_information_bound(g, 1.0, [1.0, 10.0, 100.0]).passed


def test_information_bound_is_one_dimensional():
    with pytest.raises(UnsupportedTargetError):
        check_information_bound(symmetric_bimodal(2), 1.0, [1.0])


def test_tweedie_identity():
    rep = check_tweedie_identity(BIMODAL_1D, 1.0)
    assert rep.passed and np.max(rep.observed) < 1e-6


# --- ensemble comparisons ----------------------------------------------------------

def test_log_snr_schedule_beats_uniform():
    cfg = SlipsConfig(t0=0.02, T=200.0, K=100, N=20, seed=4)
    rep = compare_schedules(symmetric_bimodal(2), cfg, 1500, rng=5, n_reference=10**5)
    assert rep.passed and rep.observed < rep.target
    assert rep.details["c_disc_ratio"] > 10


def test_schedules_agree_for_very_large_K():
    cfg = SlipsConfig(t0=0.02, T=200.0, K=2000, N=20, seed=4)
    rep = compare_schedules(symmetric_bimodal(2), cfg, 1000, rng=6, n_reference=10**5)
    lg, un = rep.details["schedules"]["log_snr"], rep.details["schedules"]["uniform"]
    assert abs(lg["sliced_tv"] - un["sliced_tv"]) < 3 * math.hypot(lg["std_error"], un["std_error"])


def test_c_disc_sweep_log_vs_linear_growth():
    rows = c_disc_sweep(0.01, [1e2, 1e3, 1e4, 1e5], 100)
    logs = np.array([r["log_snr"] for r in rows])
    unis = np.array([r["uniform"] for r in rows])
    np.testing.assert_allclose(unis[1:] / unis[:-1], 10.0, rtol=0.02)
    assert np.all(np.diff(logs) < 1.0)


def test_scaling_formulas():
    assert scaling_K(2, 0.2, 0.02, 1.0) == math.ceil(2 * math.log(4 / (0.02 * 0.04)) ** 2)
    assert scaling_K(2, 0.2, 0.02, 1e-9) == 1
    assert scaling_T(2.0, 4.0, 0.2) == pytest.approx(200.0)


def test_small_fixed_K_hurts_high_dimension():
    eps, t0 = 0.2, 0.02
    tvs = []
    for d in (2, 32):
        g = symmetric_bimodal(d)
        T = scaling_T(d, g.variance_proxy, eps)
        batch = run_batch(g.to_target(), SlipsConfig(t0=t0, T=T, K=10, denoiser_mode="oracle", seed=d), 2000)
        ref = g.sample(10**5, np.random.default_rng(d))
        tvs.append(sliced_tv(batch.samples, ref, rng=np.random.default_rng(d)).value)
    assert tvs[1] > tvs[0]


def test_check_registry():
    assert set(CHECKS) == {"martingale", "covariance-identity", "trace-cov-decay", "grid-optimality",
                           "information-bound", "tweedie", "compare-schedules", "dimension-scaling"}
