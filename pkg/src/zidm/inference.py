"""Posterior summarization: MPPIs, selection rules, intervals, estimands.

Quantiles are equal-tailed with linear interpolation (numpy's default
rule: the q-th quantile interpolates at fractional index (n-1)q of the
sorted sample). Effective sample sizes use Geyer's initial-positive-
sequence truncation of the autocorrelation function, computed per chain
and summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTraceError, ParameterError
from .model import Trace, theta_from_linpred


@dataclass
class EstimandSummary:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ess: np.ndarray


@dataclass
class PosteriorSummary:
    level: float
    gamma0: EstimandSummary          # population count probabilities, per j
    psi: EstimandSummary | None      # individual count probabilities, (n, j)
    beta_gamma: EstimandSummary      # (j, p) marginal over inclusion
    mppi_gamma: np.ndarray | None
    theta0: EstimandSummary | None = None   # population zero-inflation probs
    beta_theta: EstimandSummary | None = None
    mppi_theta: np.ndarray | None = None


def _require_samples(trace: Trace) -> None:
    if trace.n_samples == 0:
        raise EmptyTraceError("trace holds no samples")


def mppi(trace: Trace) -> dict:
    """Marginal posterior probabilities of inclusion: indicator sample means."""
    _require_samples(trace)
    out = {}
    for block, key in (("varphi", "gamma"), ("zeta", "theta")):
        if trace.has(block):
            out[key] = trace.block(block).mean(axis=0)
    return out


def select_median_model(mppi_values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Median-model rule: include entries with MPPI >= threshold (ties in)."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError("threshold must lie in [0, 1]")
    m = np.asarray(mppi_values, dtype=np.float64)
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ParameterError("MPPIs must lie in [0, 1]")
    return m >= threshold


def select_bfdr(mppi_values: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    """Bayesian false-discovery-rate selection.

    Returns the largest MPPI-thresholded set whose mean posterior exclusion
    probability stays at or below alpha, together with the realized
    threshold (1.0 with an empty selection when nothing qualifies).
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie in (0, 1)")
    m = np.asarray(mppi_values, dtype=np.float64)
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ParameterError("MPPIs must lie in [0, 1]")
    best_sel = np.zeros_like(m, dtype=bool)
    best_kappa = 1.0
    # Mean exclusion grows as the threshold drops, so scan descending and
    # stop at the first infeasible set.
    for kappa in np.unique(m.ravel())[::-1]:
        sel = m >= kappa
        if (1.0 - m[sel]).mean() <= alpha:
            best_sel, best_kappa = sel, float(kappa)
        else:
            break
    return best_sel, best_kappa


def population_estimands(trace: Trace) -> dict:
    """Per-sample population-level estimands derived from the intercepts.

    Returns theta0 (structural-zero probabilities, absent for a plain DM
    fit), gamma0 (softmax of concentration intercepts), and the stored psi
    samples. In regression configurations these are the values at
    covariates equal to zero, i.e. at standardized covariate means.
    """
    _require_samples(trace)
    out = {}
    bg0 = trace.block("beta_gamma")[:, :, 0]
    shifted = bg0 - bg0.max(axis=1, keepdims=True)
    expb = np.exp(shifted)
    out["gamma0"] = expb / expb.sum(axis=1, keepdims=True)
    if trace.meta.get("model") == "zidm" and trace.has("beta_theta"):
        out["theta0"] = 1.0 - theta_from_linpred(trace.block("beta_theta")[:, :, 0])
    else:
        out["theta0"] = None
    out["psi"] = trace.block("psi") if trace.has("psi") else None
    return out


def effective_sample_size(x: np.ndarray, chain_slices=None) -> np.ndarray:
    """Initial-positive-sequence ESS along axis 0; summed over chains.

    Accepts (S,) or (S, ...) arrays and returns a scalar array matching the
    trailing shape. Constant series count every draw as effective.
    """
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.reshape(arr.shape[0], -1)
    if chain_slices is None:
        chain_slices = [slice(0, arr.shape[0])]
    total = np.zeros(flat.shape[1])
    for sl in chain_slices:
        seg = flat[sl]
        total += _ess_single(seg)
    return total.reshape(arr.shape[1:]) if arr.ndim > 1 else float(total[0])


def _ess_single(seg: np.ndarray) -> np.ndarray:
    n = seg.shape[0]
    if n < 4:
        return np.full(seg.shape[1], float(n))
    centered = seg - seg.mean(axis=0)
    nfft = 1 << int(np.ceil(np.log2(2 * n - 1)))
    f = np.fft.rfft(centered, nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=0)[:n].real
    var0 = acov[0].copy()
    constant = var0 <= 0.0
    var0[constant] = 1.0
    rho = acov / var0
    # Geyer pairs: keep consecutive-lag sums while they remain positive.
    k_pairs = n // 2
    pairs = rho[0:2 * k_pairs:2] + rho[1:2 * k_pairs:2]
    positive = np.logical_and.accumulate(pairs > 0.0, axis=0)
    tau = -1.0 + 2.0 * (pairs * positive).sum(axis=0)
    tau = np.maximum(tau, 1.0 / n)
    ess = n / tau
    ess = np.clip(ess, 1.0, float(n))
    ess[constant] = float(n)
    return ess


def _summary_for(samples: np.ndarray, level: float, chain_slices) -> EstimandSummary:
    lo_q = (1.0 - level) / 2.0
    quantiles = np.quantile(samples, [lo_q, 1.0 - lo_q], axis=0, method="linear")
    return EstimandSummary(mean=samples.mean(axis=0), lower=quantiles[0], upper=quantiles[1],
                           ess=np.asarray(effective_sample_size(samples, chain_slices)))


def summarize(trace: Trace, level: float = 0.95) -> PosteriorSummary:
    """Posterior means, equal-tailed intervals, ESS, and MPPI tables."""
    _require_samples(trace)
    if not 0.0 < level < 1.0:
        raise ParameterError("level must lie in (0, 1)")
    slices = trace.chain_slices()
    est = population_estimands(trace)
    probs = mppi(trace) if (trace.has("varphi") or trace.has("zeta")) else {}

    gamma0 = _summary_for(est["gamma0"], level, slices)
    psi = _summary_for(trace.block("psi"), level, slices) if trace.has("psi") else None
    beta_gamma = _summary_for(trace.block("beta_gamma"), level, slices)
    theta0 = _summary_for(est["theta0"], level, slices) if est["theta0"] is not None else None
    beta_theta = None
    if trace.meta.get("model") == "zidm" and trace.has("beta_theta"):
        beta_theta = _summary_for(trace.block("beta_theta"), level, slices)
    return PosteriorSummary(level=level, gamma0=gamma0, psi=psi, beta_gamma=beta_gamma,
                            mppi_gamma=probs.get("gamma"), theta0=theta0,
                            beta_theta=beta_theta, mppi_theta=probs.get("theta"))


def active_term_series(trace: Trace) -> dict:
    """Per-sample counts of active non-intercept terms (trace-plot export)."""
    out = {}
    if trace.has("varphi"):
        out["gamma"] = trace.block("varphi")[:, :, 1:].sum(axis=(1, 2)).astype(int)
    if trace.has("zeta"):
        out["theta"] = trace.block("zeta")[:, :, 1:].sum(axis=(1, 2)).astype(int)
    return out
