"""Data containers, hyperparameters, latent state, links, and initialization.

The latent parameterization follows the gamma-augmented construction: each
cell carries a positive mass c_ij when at risk (eta_ij = 1) and exactly
zero mass when structurally absent, with row compositions psi_ij =
c_ij / T_i, T_i = sum_j c_ij.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import TINY, sample_gamma
from .errors import InvariantError, ParameterError, ShapeError
from .rng import RngStream

GAMMA_FLOOR = 1e-10
GAMMA_CEIL = 1e10
_LOG_GAMMA_FLOOR = np.log(GAMMA_FLOOR)
_LOG_GAMMA_CEIL = np.log(GAMMA_CEIL)
# Largest double strictly below 1; logistic outputs are clamped inside (0, 1).
_ONE_MINUS = float(np.nextafter(1.0, 0.0))


@dataclass
class CountMatrix:
    """N x J nonnegative integer counts with fixed row totals."""

    z: np.ndarray
    row_totals: np.ndarray
    taxon_names: list[str]
    sample_ids: list[str]

    @classmethod
    def from_array(cls, z, taxon_names=None, sample_ids=None) -> "CountMatrix":
        z_arr = np.asarray(z)
        if z_arr.ndim != 2:
            raise ShapeError("counts must be a 2-D array")
        if not np.issubdtype(z_arr.dtype, np.integer):
            z_f = np.asarray(z_arr, dtype=np.float64)
            if not np.all(np.isfinite(z_f)) or np.any(z_f != np.floor(z_f)):
                raise ParameterError("counts must be integers")
            z_arr = z_f.astype(np.int64)
        else:
            z_arr = z_arr.astype(np.int64)
        if np.any(z_arr < 0):
            raise ParameterError("counts must be nonnegative")
        totals = z_arr.sum(axis=1)
        if np.any(totals < 1):
            bad = int(np.nonzero(totals < 1)[0][0])
            raise ParameterError(f"row {bad} has zero total count; all-zero rows are rejected")
        n, j = z_arr.shape
        names = list(taxon_names) if taxon_names is not None else [f"taxon_{k}" for k in range(j)]
        ids = list(sample_ids) if sample_ids is not None else [f"sample_{k}" for k in range(n)]
        if len(names) != j or len(ids) != n:
            raise ShapeError("label lengths do not match the count matrix")
        return cls(z=z_arr, row_totals=totals, taxon_names=names, sample_ids=ids)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def j(self) -> int:
        return self.z.shape[1]


@dataclass
class DesignMatrix:
    """N x P design with a leading intercept column of ones."""

    x: np.ndarray
    covariate_names: list[str]
    standardized: bool

    @classmethod
    def from_covariates(cls, covariates, names=None, standardize=True) -> "DesignMatrix":
        """Build a design from raw covariate columns (intercept prepended).

        ``covariates`` may be None for an intercept-only design. When
        ``standardize`` is set, each covariate column is centered and scaled
        to unit sample standard deviation.
        """
        if covariates is None:
            cov = np.empty((0, 0))
            n_rows = None
        else:
            cov = np.asarray(covariates, dtype=np.float64)
            if cov.ndim == 1:
                cov = cov[:, None]
            if cov.ndim != 2:
                raise ShapeError("covariates must be a 2-D array")
            if not np.all(np.isfinite(cov)):
                raise ParameterError("covariates must be finite")
            n_rows = cov.shape[0]
        if n_rows is None:
            raise ShapeError("intercept-only designs need an explicit row count; "
                             "use DesignMatrix.intercept_only(n)")
        p_minus = cov.shape[1]
        if standardize and p_minus:
            mu = cov.mean(axis=0)
            sd = cov.std(axis=0, ddof=0)
            if np.any(sd == 0.0):
                bad = int(np.nonzero(sd == 0.0)[0][0])
                raise ParameterError(f"covariate column {bad} is constant and cannot be standardized")
            cov = (cov - mu) / sd
        x = np.concatenate([np.ones((n_rows, 1)), cov], axis=1)
        if names is None:
            names = [f"x{k}" for k in range(1, p_minus + 1)]
        names = ["intercept"] + list(names)
        if len(names) != x.shape[1]:
            raise ShapeError("covariate name count does not match the design")
        return cls(x=x, covariate_names=names, standardized=bool(standardize and p_minus))

    @classmethod
    def intercept_only(cls, n: int) -> "DesignMatrix":
        return cls(x=np.ones((n, 1)), covariate_names=["intercept"], standardized=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass
class Hyperparameters:
    """Prior settings shared by both levels of the model."""

    sigma2_beta_gamma: float = 10.0
    sigma2_beta_theta: float = 10.0
    a_varphi: float = 1.0
    b_varphi: float = 1.0
    a_zeta: float = 1.0
    b_zeta: float = 1.0
    rw_step_gamma: float = 0.5

    def validate(self) -> None:
        for name, value in vars(self).items():
            if not np.isfinite(value) or value <= 0.0:
                raise ParameterError(f"hyperparameter {name} must be strictly positive")


@dataclass
class SelectionMask:
    """Which inclusion indicators are pinned to one.

    Intercepts are always forced. With selection disabled every entry is
    forced, recovering the plain (Z)IDM regression without variable
    selection.
    """

    forced_gamma: np.ndarray
    forced_theta: np.ndarray
    selection_enabled: bool

    @classmethod
    def create(cls, j: int, p_gamma: int, p_theta: int, selection_enabled: bool = False,
               forced_gamma=None, forced_theta=None) -> "SelectionMask":
        fg = np.zeros((j, p_gamma), dtype=bool) if forced_gamma is None \
            else np.asarray(forced_gamma, dtype=bool).copy()
        ft = np.zeros((j, p_theta), dtype=bool) if forced_theta is None \
            else np.asarray(forced_theta, dtype=bool).copy()
        if fg.shape != (j, p_gamma) or ft.shape != (j, p_theta):
            raise ShapeError("forced masks must be J x P")
        fg[:, 0] = True
        ft[:, 0] = True
        if not selection_enabled:
            fg[:] = True
            ft[:] = True
        return cls(forced_gamma=fg, forced_theta=ft, selection_enabled=bool(selection_enabled))


def gamma_link(x_row, beta_gamma_row) -> float:
    """Concentration gamma_ij = exp(x'beta), clamped to [1e-10, 1e10]."""
    lp = float(np.dot(np.asarray(x_row, dtype=np.float64), np.asarray(beta_gamma_row, dtype=np.float64)))
    return float(np.exp(np.clip(lp, _LOG_GAMMA_FLOOR, _LOG_GAMMA_CEIL)))


def gamma_from_linpred(linpred: np.ndarray) -> np.ndarray:
    """Vectorized clamped exponential link."""
    return np.exp(np.clip(linpred, _LOG_GAMMA_FLOOR, _LOG_GAMMA_CEIL))


def theta_link(x_row, beta_theta_row) -> float:
    """At-risk probability theta_ij = logistic(x'beta), strictly inside (0,1)."""
    lp = float(np.dot(np.asarray(x_row, dtype=np.float64), np.asarray(beta_theta_row, dtype=np.float64)))
    return float(theta_from_linpred(np.float64(lp)))


def theta_from_linpred(linpred):
    """Numerically stable logistic, clamped inside the open unit interval."""
    lp = np.asarray(linpred, dtype=np.float64)
    e = np.exp(-np.abs(lp))
    out = np.where(lp >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, TINY, _ONE_MINUS)


@dataclass
class ModelState:
    """All latent quantities of one MCMC iteration."""

    c: np.ndarray            # (N, J) masses; exactly 0 iff eta == 0
    u: np.ndarray            # (N,) row auxiliaries
    eta: np.ndarray          # (N, J) bool at-risk indicators
    omega: np.ndarray        # (N, J) Polya-Gamma auxiliaries
    beta_gamma: np.ndarray   # (J, P_gamma)
    varphi: np.ndarray       # (J, P_gamma) bool inclusion
    beta_theta: np.ndarray   # (J, P_theta)
    zeta: np.ndarray         # (J, P_theta) bool inclusion

    def active_totals(self) -> np.ndarray:
        return self.c.sum(axis=1)

    def psi(self) -> np.ndarray:
        return self.c / self.active_totals()[:, None]

    def copy(self) -> "ModelState":
        return ModelState(*(getattr(self, f).copy() for f in
                            ("c", "u", "eta", "omega", "beta_gamma", "varphi", "beta_theta", "zeta")))

    def validate(self, counts: CountMatrix) -> None:
        """Check structural invariants; raises InvariantError on breach."""
        if np.any((counts.z > 0) & ~self.eta):
            raise InvariantError("eta must be 1 wherever z > 0")
        if np.any((self.c > 0) != self.eta):
            raise InvariantError("c > 0 must coincide with eta == 1")
        if np.any(self.active_totals() <= 0.0):
            raise InvariantError("every row needs at least one active component")
        if np.any(self.u <= 0.0):
            raise InvariantError("u must be strictly positive")
        if np.any(self.beta_gamma[~self.varphi] != 0.0):
            raise InvariantError("beta_gamma must be exactly 0 where varphi == 0")
        if np.any(self.beta_theta[~self.zeta] != 0.0):
            raise InvariantError("beta_theta must be exactly 0 where zeta == 0")


@dataclass
class Trace:
    """Thinned post-burn-in samples of the monitored blocks.

    ``samples`` maps block name to an array whose first axis is the kept
    sample index (chains concatenated); ``meta`` records chain settings,
    dimensions, and labels, and is JSON-serializable.
    """

    samples: dict
    meta: dict

    @property
    def n_samples(self) -> int:
        if self.samples:
            return next(iter(self.samples.values())).shape[0]
        return int(sum(self.meta.get("kept_per_chain", [0])))

    def has(self, block: str) -> bool:
        return block in self.samples

    def block(self, name: str) -> np.ndarray:
        if name not in self.samples:
            raise KeyError(f"block '{name}' was not monitored; stored blocks: {sorted(self.samples)}")
        return self.samples[name]

    def chain_slices(self) -> list:
        bounds = np.cumsum([0] + list(self.meta.get("kept_per_chain", [self.n_samples])))
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def initialize_state(counts: CountMatrix, design_gamma: DesignMatrix, hyper: Hyperparameters,
                     mask: SelectionMask, rng: RngStream, design_theta: DesignMatrix | None = None,
                     zero_inflation: bool = True) -> ModelState:
    """Starting state: coefficients at zero except standard-normal intercepts,
    eta set from the data (Bernoulli(0.5) at observed zeros), unit omega,
    masses at max(z, 0.5) on active cells, and row auxiliaries from their
    full conditional.
    """
    if design_theta is None:
        design_theta = design_gamma
    n, j = counts.z.shape
    if design_gamma.n != n or design_theta.n != n:
        raise ShapeError("counts and covariates disagree on the number of rows")
    hyper.validate()
    gen = rng.generator

    beta_gamma = np.zeros((j, design_gamma.p))
    beta_gamma[:, 0] = gen.standard_normal(j)
    varphi = mask.forced_gamma.copy()
    beta_gamma[~varphi] = 0.0

    if zero_inflation:
        beta_theta = np.zeros((j, design_theta.p))
        beta_theta[:, 0] = gen.standard_normal(j)
        zeta = mask.forced_theta.copy()
        beta_theta[~zeta] = 0.0
        eta = counts.z > 0
        eta = eta | ((counts.z == 0) & (gen.random((n, j)) < 0.5))
    else:
        beta_theta = np.zeros((j, design_theta.p))
        zeta = np.ones((j, design_theta.p), dtype=bool)
        eta = np.ones((n, j), dtype=bool)

    omega = np.ones((n, j))
    c = np.where(eta, np.maximum(counts.z, 0.5), 0.0)
    totals = c.sum(axis=1)
    u = sample_gamma(counts.row_totals.astype(np.float64), totals, rng)
    state = ModelState(c=c, u=np.asarray(u, dtype=np.float64), eta=eta, omega=omega,
                       beta_gamma=beta_gamma, varphi=varphi, beta_theta=beta_theta, zeta=zeta)
    state.validate(counts)
    return state
