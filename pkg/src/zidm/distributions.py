"""Seedable sampling and log-density kernels used by the sampler and simulator.

All samplers take an :class:`~zidm.rng.RngStream` and accept scalars or
arrays. Gamma draws are strictly positive: anything that underflows is
clamped to the smallest positive normal double, because a zero latent mass
is reserved to mean "structurally absent".
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr

from .errors import ParameterError
from .rng import RngStream

TINY = float(np.finfo(np.float64).tiny)

# Truncation point of the exponential / inverse-Gaussian proposal split in
# the exact Polya-Gamma sampler. 0.64 keeps both branches' alternating
# series coefficients monotone decreasing.
_PG_TRUNC = 0.64


def _check_positive(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)) or np.any(value <= 0.0):
        raise ParameterError(f"{name} must be finite and strictly positive")


def sample_gamma(shape, rate, rng: RngStream):
    """Draw Gamma(shape, rate) variates with mean shape/rate.

    Shapes below 1 use the shape+1 boost with a uniform power correction,
    which stays accurate where standard rejection samplers lose mass to
    underflow. Draws are clamped to the smallest positive normal.
    """
    shape_a = np.asarray(shape, dtype=np.float64)
    rate_a = np.asarray(rate, dtype=np.float64)
    _check_positive("shape", shape_a)
    _check_positive("rate", rate_a)
    scalar = shape_a.ndim == 0 and rate_a.ndim == 0
    shape_b, rate_b = np.broadcast_arrays(shape_a, rate_a)
    draws = _standard_gamma(shape_b.ravel(), rng.generator).reshape(shape_b.shape)
    out = np.maximum(draws / rate_b, TINY)
    return float(out) if scalar else out


def _standard_gamma(shape: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    small = shape < 1.0
    base = np.where(small, shape + 1.0, shape)
    draws = gen.standard_gamma(base)
    if np.any(small):
        u = gen.random(int(small.sum()))
        draws[small] *= u ** (1.0 / shape[small])
    return draws


def logpdf_gamma(x, shape, rate):
    """Log density of Gamma(shape, rate) at x (rate parameterization)."""
    x_a = np.asarray(x, dtype=np.float64)
    shape_a = np.asarray(shape, dtype=np.float64)
    rate_a = np.asarray(rate, dtype=np.float64)
    _check_positive("x", x_a)
    _check_positive("shape", shape_a)
    _check_positive("rate", rate_a)
    out = shape_a * np.log(rate_a) - gammaln(shape_a) + (shape_a - 1.0) * np.log(x_a) - rate_a * x_a
    return float(out) if out.ndim == 0 else out


def sample_dirichlet(alpha, rng: RngStream) -> np.ndarray:
    """Dirichlet draw as normalized independent Gamma(alpha_j, 1) variates."""
    alpha_a = np.asarray(alpha, dtype=np.float64)
    if alpha_a.ndim != 1 or alpha_a.size < 2:
        raise ParameterError("alpha must be a vector of length >= 2")
    _check_positive("alpha", alpha_a)
    g = sample_gamma(alpha_a, 1.0, rng)
    return g / g.sum()


def sample_multinomial(n: int, probs, rng: RngStream) -> np.ndarray:
    """Multinomial draw of n items over len(probs) categories."""
    p = np.asarray(probs, dtype=np.float64)
    if n < 0:
        raise ParameterError("n must be nonnegative")
    if p.ndim != 1 or np.any(p < 0.0) or not np.all(np.isfinite(p)):
        raise ParameterError("probs must be a nonnegative finite vector")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError("probs must sum to 1 within 1e-9")
    return rng.generator.multinomial(int(n), p / p.sum())


def logpmf_multinomial(z, c) -> float:
    """Multinomial log pmf of counts z under unnormalized masses c.

    Includes the multinomial coefficient; cells with z_j > 0 but c_j = 0
    return -inf (impossible configuration).
    """
    z_a = np.asarray(z, dtype=np.float64)
    c_a = np.asarray(c, dtype=np.float64)
    if z_a.shape != c_a.shape:
        raise ParameterError("z and c must have equal length")
    if np.any(z_a < 0) or np.any(c_a < 0) or not np.all(np.isfinite(c_a)):
        raise ParameterError("z and c must be nonnegative (c finite)")
    total_mass = c_a.sum()
    if total_mass <= 0.0:
        raise ParameterError("sum of c must be positive")
    pos = z_a > 0
    if np.any(c_a[pos] == 0.0):
        return -math.inf
    zdot = z_a.sum()
    coef = gammaln(zdot + 1.0) - gammaln(z_a + 1.0).sum()
    return float(coef + (z_a[pos] * (np.log(c_a[pos]) - math.log(total_mass))).sum())


def log_beta_fn(a, b):
    """log Beta(a, b) = lnG(a) + lnG(b) - lnG(a+b)."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    _check_positive("a", a_arr)
    _check_positive("b", b_arr)
    out = gammaln(a_arr) + gammaln(b_arr) - gammaln(a_arr + b_arr)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Exact Polya-Gamma PG(1, c) sampling (alternating-series accept/reject).
# A PG(1, c) variate is J*(1, |c|/2) / 4, where J* is the tilted Jacobi
# law sampled by proposing from a truncated inverse-Gaussian left of the
# truncation point and an exponential tail right of it, then accepting via
# partial sums of the alternating series expansion of the density.
# ---------------------------------------------------------------------------


def sample_polya_gamma_1(c: float, rng: RngStream) -> float:
    """Exact draw from PG(1, c). Symmetric in the sign of c."""
    if not np.isfinite(c):
        raise ParameterError("c must be finite")
    return float(sample_polya_gamma_1_vec(np.array([c], dtype=np.float64), rng)[0])


def sample_polya_gamma_1_vec(c, rng: RngStream) -> np.ndarray:
    """Vectorized exact PG(1, c) draws, one per entry of c."""
    c_a = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c_a)):
        raise ParameterError("c must be finite")
    gen = rng.generator
    z = 0.5 * np.abs(c_a.ravel())
    out = np.empty_like(z)

    halfk = math.pi ** 2 / 8.0
    rate = halfk + 0.5 * z * z
    # Proposal mass right of the truncation point (exponential tail) ...
    log_p = math.log(math.pi / 2.0) - np.log(rate) - rate * _PG_TRUNC
    # ... and left of it (inverse-Gaussian body), via the IG(1/z, 1) cdf.
    rt = math.sqrt(_PG_TRUNC)
    log_cdf = np.logaddexp(log_ndtr((_PG_TRUNC * z - 1.0) / rt),
                           2.0 * z + log_ndtr(-(_PG_TRUNC * z + 1.0) / rt))
    log_q = math.log(2.0) - z + log_cdf
    p_ratio = np.exp(log_p - np.logaddexp(log_p, log_q))

    todo = np.arange(z.size)
    while todo.size:
        m = todo.size
        zt = z[todo]
        x = np.empty(m)
        tail = gen.random(m) < p_ratio[todo]
        n_tail = int(tail.sum())
        if n_tail:
            x[tail] = _PG_TRUNC + gen.standard_exponential(n_tail) / rate[todo[tail]]
        if n_tail < m:
            x[~tail] = _truncated_inverse_gaussian(zt[~tail], gen)
        accepted = _series_accept(x, gen)
        out[todo[accepted]] = x[accepted]
        todo = todo[~accepted]
    return 0.25 * out.reshape(c_a.shape)


def _series_coef(n: int, x: np.ndarray) -> np.ndarray:
    # n-th alternating-series coefficient of the Jacobi density, piecewise
    # around the truncation point.
    h = n + 0.5
    left = x <= _PG_TRUNC
    out = np.empty_like(x)
    xl = x[left]
    out[left] = math.pi * h * (2.0 / (math.pi * xl)) ** 1.5 * np.exp(-2.0 * h * h / xl)
    xr = x[~left]
    out[~left] = math.pi * h * np.exp(-h * h * math.pi ** 2 * xr / 2.0)
    return out


def _series_accept(x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    # Squeeze acceptance: the density sits between consecutive partial sums,
    # so compare a scaled uniform against them until the bracket decides.
    s = _series_coef(0, x)
    y = gen.random(x.size) * s
    accept = np.zeros(x.size, dtype=bool)
    undecided = np.ones(x.size, dtype=bool)
    n = 0
    while np.any(undecided):
        n += 1
        idx = np.nonzero(undecided)[0]
        term = _series_coef(n, x[idx])
        if n % 2 == 1:
            s[idx] -= term
            hit = y[idx] <= s[idx]
            accept[idx[hit]] = True
            undecided[idx[hit]] = False
        else:
            s[idx] += term
            miss = y[idx] > s[idx]
            undecided[idx[miss]] = False
    return accept


def _truncated_inverse_gaussian(z: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    # IG(mu=1/z, lambda=1) truncated to (0, _PG_TRUNC); z >= 0 entrywise.
    t = _PG_TRUNC
    out = np.empty_like(z)
    big_mu = z < 1.0 / t

    # mu > t: propose from the t-truncated Levy via exponentials, thin by
    # the z-tilt. Handles z == 0 exactly (tilt factor 1).
    idx = np.nonzero(big_mu)[0]
    while idx.size:
        m = idx.size
        e1 = gen.standard_exponential(m)
        e2 = gen.standard_exponential(m)
        ok = e1 * e1 <= 2.0 * e2 / t
        if np.any(ok):
            sel = idx[ok]
            xs = t / (1.0 + t * e1[ok]) ** 2
            keep = gen.random(int(ok.sum())) <= np.exp(-0.5 * z[sel] ** 2 * xs)
            out[sel[keep]] = xs[keep]
            remaining = np.ones(idx.size, dtype=bool)
            remaining[np.nonzero(ok)[0][keep]] = False
            idx = idx[remaining]

    # mu <= t: draw untruncated IG(mu, 1) and retry until inside (0, t).
    idx = np.nonzero(~big_mu)[0]
    while idx.size:
        mu = 1.0 / z[idx]
        w = mu * gen.standard_normal(idx.size) ** 2
        xs = mu + 0.5 * mu * w - 0.5 * mu * np.sqrt(4.0 * w + w * w)
        flip = gen.random(idx.size) > mu / (mu + xs)
        xs[flip] = mu[flip] ** 2 / xs[flip]
        done = xs < t
        out[idx[done]] = xs[done]
        idx = idx[~done]
    return out
