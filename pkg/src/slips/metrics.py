"""Empirical sample-quality metrics: sliced TV, mode weights, moment errors.

Sliced TV is a surrogate, not total variation: it averages histogram TV
over random 1-D projections, so it is blind to differences that no
projection sees and it carries a positive finite-sample bias of order
``sqrt(bins / n)``.  Use it to compare ensembles of similar size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UnsupportedTargetError

MIN_BINS, MAX_BINS = 16, 512


@dataclass(frozen=True, eq=False)
class MetricRecord:
    metric: str
    values: np.ndarray
    std_errors: np.ndarray
    n_samples: int
    params: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.values[0])

    @property
    def std_error(self) -> float:
        return float(self.std_errors[0])

    def as_dict(self):
        return {
            "metric": self.metric,
            "values": [float(v) for v in self.values],
            "std_errors": [float(v) for v in self.std_errors],
            "n_samples": int(self.n_samples),
            "params": _jsonable(self.params),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _as_samples(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError(f"{name} must be a nonempty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def random_directions(d, n, rng):
    """``n`` independent uniform unit vectors in R^d."""
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def fd_bin_count(pa, pb):
    """Freedman-Diaconis bin count over the pooled range, clamped to [16, 512].

    The width ``2 IQR n^(-1/3)`` uses the pooled IQR and the smaller sample
    size, which limits the noise of the smaller set's histogram.
    """
    pooled = np.concatenate([pa, pb])
    lo, hi = pooled.min(), pooled.max()
    q75, q25 = np.percentile(pooled, [75, 25])
    iqr = q75 - q25
    n = min(pa.size, pb.size)
    if hi <= lo:
        return MIN_BINS
    if iqr <= 0:
        return MAX_BINS
    width = 2.0 * iqr * n ** (-1.0 / 3.0)
    return int(np.clip(math.ceil((hi - lo) / width), MIN_BINS, MAX_BINS))


def histogram_tv(pa, pb, n_bins=None):
    """Half L1 distance between normalized histograms on the pooled range."""
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    bins = fd_bin_count(pa, pb) if n_bins is None else int(n_bins)
    lo = min(pa.min(), pb.min())
    hi = max(pa.max(), pb.max())
    if hi <= lo:
        return 0.0
    scale = bins / (hi - lo)

    def masses(p):
        idx = np.minimum(((p - lo) * scale).astype(np.int64), bins - 1)
        return np.bincount(idx, minlength=bins) / p.size

    return 0.5 * float(np.sum(np.abs(masses(pa) - masses(pb))))


def sliced_tv(samples_a, samples_b, n_projections=64, n_bins=None, rng=None,
              directions=None) -> MetricRecord:
    """Sliced total variation between two sample sets.

    Args:
        samples_a, samples_b: Arrays of shape ``(n_a, d)`` and ``(n_b, d)``.
        n_projections: Number of random unit directions.
        n_bins: Fixed bin count; Freedman-Diaconis per projection if None.
        rng: Generator for the directions.
        directions: Explicit ``(P, d)`` unit directions, overriding ``rng``.

    Returns:
        Record with the mean histogram TV over directions and its standard
        error across directions.
    """
    a = _as_samples(samples_a, "samples_a")
    b = _as_samples(samples_b, "samples_b")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if directions is None:
        if rng is None:
            rng = np.random.default_rng(0)
        directions = random_directions(d, int(n_projections), rng)
    directions = np.asarray(directions, dtype=float)
    if directions.ndim != 2 or directions.shape[1] != d:
        raise InvalidInputError("directions must have shape (P, d)")
    tvs = np.array([histogram_tv(a @ u, b @ u, n_bins) for u in directions])
    se = float(np.std(tvs, ddof=1) / math.sqrt(tvs.size)) if tvs.size > 1 else 0.0
    return MetricRecord(
        "sliced_tv", np.array([tvs.mean()]), np.array([se]), int(min(a.shape[0], b.shape[0])),
        {"n_projections": int(tvs.size), "bins": "freedman-diaconis" if n_bins is None else int(n_bins),
         "n_a": int(a.shape[0]), "n_b": int(b.shape[0])})


def mode_weights(samples, mode_means) -> MetricRecord:
    """Fraction of samples nearest to each mode mean, with multinomial SEs."""
    x = _as_samples(samples, "samples")
    means = np.asarray(mode_means, dtype=float)
    if means.ndim == 1:
        means = means[:, None]
    if means.ndim != 2 or means.shape[0] < 2:
        raise InvalidInputError("need at least two mode means")
    if means.shape[1] != x.shape[1]:
        raise InvalidInputError("mode means and samples differ in dimension")
    dist = np.sum((x[:, None, :] - means[None]) ** 2, axis=-1)
    counts = np.bincount(np.argmin(dist, axis=1), minlength=means.shape[0])
    n = x.shape[0]
    w = counts / n
    # make the correctly rounded sum exactly one
    j = int(np.argmax(w))
    w[j] = 1.0 - math.fsum(np.delete(w, j))
    while (total := math.fsum(w)) != 1.0:
        w[j] = np.nextafter(w[j], -np.inf if total > 1.0 else np.inf)
    se = np.sqrt(w * (1.0 - w) / n)
    return MetricRecord("mode_weights", w, se, n, {"mode_means": means})


def moment_error(samples, target) -> MetricRecord:
    """Relative errors of the first two moments against exact target values.

    ``values[0] = ||mean_hat - m|| / R`` and
    ``values[1] = |mean ||X - m||^2 - R^2| / R^2`` where ``m`` is the target
    mean and ``R^2 = E||X - m||^2``.  The mean error is scaled by R rather
    than ``||m||``, which may be zero.
    """
    mean = getattr(target, "mean", None)
    r2 = getattr(target, "variance_proxy", None)
    if mean is None or r2 is None:
        raise UnsupportedTargetError("moment_error needs a target with exact mean and R^2")
    x = _as_samples(samples, "samples")
    mean = np.asarray(mean, dtype=float)
    n = x.shape[0]
    r = math.sqrt(r2)
    diff = x.mean(axis=0) - mean
    e1 = float(np.linalg.norm(diff)) / r
    sq = np.sum((x - mean) ** 2, axis=1)
    e2 = abs(float(sq.mean()) - r2) / r2
    if n > 1:
        se1 = math.sqrt(float(np.sum(np.var(x, axis=0, ddof=1))) / n) / r
        se2 = float(np.std(sq, ddof=1)) / math.sqrt(n) / r2
    else:
        se1 = se2 = float("inf")
    return MetricRecord("moment_error", np.array([e1, e2]), np.array([se1, se2]), n,
                        {"components": ["mean", "second_moment"], "R2": float(r2)})
