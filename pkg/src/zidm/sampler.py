"""Metropolis-Hastings-within-Gibbs kernels and the chain driver.

Update order within one iteration:

1. expand/contract sweep over all observed-zero cells (columns ascending,
   rows vectorized), jointly flipping eta_ij and creating/destroying mass;
2. row auxiliaries u_i from Gamma(zdot_i, T_i);
3. active masses c_ij from Gamma(z_ij + gamma_ij, 1 + u_i);
4. concentration coefficients (beta_gamma, varphi) via between/within steps;
5. zero-inflation coefficients (beta_theta, zeta): between steps on the
   marginal Bernoulli likelihood, then a Polya-Gamma refresh, then an exact
   Gaussian draw of each active coefficient block.

The expand/contract acceptance is computed with the row normalizer
marginalized out, so u is redrawn right after the sweep and before anything
conditions on it; likewise omega is redrawn after the between steps and
immediately before the conditional Gaussian draw that uses it. This keeps
every kernel an exact conditional (or marginal-invariant) move.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .distributions import TINY, sample_gamma, sample_polya_gamma_1_vec
from .errors import InvariantError, NumericalError, ParameterError, ShapeError
from .model import (CountMatrix, DesignMatrix, Hyperparameters, ModelState, SelectionMask,
                    gamma_from_linpred, initialize_state)
from .rng import RngStream

DEFAULT_MONITOR = ("beta_gamma", "varphi", "beta_theta", "zeta", "psi", "eta", "u")
ALL_BLOCKS = DEFAULT_MONITOR + ("c", "omega")


@dataclass
class McmcConfig:
    """Chain length and bookkeeping settings."""

    iterations: int = 20000
    burn_in: int | None = None  # defaults to iterations // 2
    thin: int = 10
    seed: int = 0
    chains: int = 1
    monitor: tuple[str, ...] = DEFAULT_MONITOR
    debug_validate: bool = False
    adapt_rw_burnin: bool = False
    # Extra spawn-key components prefixed to each chain's stream; lets
    # replicate studies give every fit its own independent randomness.
    stream: tuple[int, ...] = ()

    def resolved_burn_in(self) -> int:
        return self.iterations // 2 if self.burn_in is None else self.burn_in

    def kept_per_chain(self) -> int:
        return (self.iterations - self.resolved_burn_in()) // self.thin

    def validate(self) -> None:
        burn = self.resolved_burn_in()
        if self.iterations < 0 or burn < 0 or burn > self.iterations:
            raise ParameterError("need 0 <= burn_in <= iterations")
        if self.thin < 1:
            raise ParameterError("thin must be >= 1")
        if (self.iterations - burn) % self.thin != 0:
            raise ParameterError("(iterations - burn_in) must be divisible by thin")
        if self.chains < 1:
            raise ParameterError("chains must be >= 1")
        unknown = set(self.monitor) - set(ALL_BLOCKS)
        if unknown:
            raise ParameterError(f"unknown monitor blocks: {sorted(unknown)}")


@dataclass
class KernelDiagnostics:
    """Acceptance counters per kernel plus wall time."""

    proposed: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    elapsed_seconds: float = 0.0
    iterations: int = 0

    def count(self, kernel: str, n_proposed: int, n_accepted: int) -> None:
        self.proposed[kernel] = self.proposed.get(kernel, 0) + int(n_proposed)
        self.accepted[kernel] = self.accepted.get(kernel, 0) + int(n_accepted)

    def rate(self, kernel: str) -> float:
        prop = self.proposed.get(kernel, 0)
        return self.accepted.get(kernel, 0) / prop if prop else 0.0

    def rates(self) -> dict:
        return {k: self.rate(k) for k in sorted(self.proposed)}

    def merge(self, other: "KernelDiagnostics") -> None:
        for k, v in other.proposed.items():
            self.proposed[k] = self.proposed.get(k, 0) + v
        for k, v in other.accepted.items():
            self.accepted[k] = self.accepted.get(k, 0) + v
        self.elapsed_seconds += other.elapsed_seconds
        self.iterations += other.iterations


# ---------------------------------------------------------------------------
# Kernels. Each mutates the state in place and touches nothing else.
# ---------------------------------------------------------------------------


def update_u(state: ModelState, counts: CountMatrix, rng: RngStream) -> None:
    """Row auxiliaries u_i ~ Gamma(zdot_i, T_i)."""
    totals = state.active_totals()
    if np.any(totals <= 0.0):
        raise InvariantError("active totals must be positive before updating u")
    state.u = sample_gamma(counts.row_totals.astype(np.float64), totals, rng)


def update_omega(state: ModelState, design_theta: DesignMatrix, rng: RngStream) -> None:
    """Polya-Gamma refresh omega_ij ~ PG(1, x_i' beta_theta_j) for every cell."""
    tau = design_theta.x @ state.beta_theta.T
    state.omega = sample_polya_gamma_1_vec(tau, rng)


def update_c(state: ModelState, counts: CountMatrix, design_gamma: DesignMatrix,
             rng: RngStream) -> None:
    """Conjugate mass refresh on active cells: Gamma(z + gamma, 1 + u)."""
    gam = gamma_from_linpred(design_gamma.x @ state.beta_gamma.T)
    active = state.eta
    shape = counts.z[active] + gam[active]
    rate = np.broadcast_to((1.0 + state.u)[:, None], active.shape)[active]
    state.c[active] = sample_gamma(shape, rate, rng)


def expand_contract(state: ModelState, counts: CountMatrix, design_gamma: DesignMatrix,
                    design_theta: DesignMatrix, rng: RngStream,
                    diag: KernelDiagnostics | None = None) -> None:
    """Trans-dimensional sweep over observed-zero cells.

    Contract (eta 1 -> 0): accept with (T/(T - c))^zdot * (1-theta)/theta.
    Expand (eta 0 -> 1): draw c' from Gamma(gamma, 1) and accept with
    (T/(T + c'))^zdot * theta/(1-theta). Both are the closed forms of the
    full proposal ratio after the prior and proposal gamma densities cancel;
    they are evaluated in log space with the exact log odds tau = x'beta.
    Columns are processed in ascending order with all rows in parallel; a
    contract that would empty a row is auto-rejected.
    """
    z = counts.z
    n, j_total = z.shape
    zdot = counts.row_totals.astype(np.float64)
    gen = rng.generator

    gam = gamma_from_linpred(design_gamma.x @ state.beta_gamma.T)
    tau = design_theta.x @ state.beta_theta.T
    zero = z == 0

    prop = np.zeros((n, j_total))
    if zero.any():
        prop[zero] = sample_gamma(gam[zero], 1.0, rng)
    logu = -gen.standard_exponential((n, j_total))

    totals = state.c.sum(axis=1)
    n_active = state.eta.sum(axis=1)

    n_exp_prop = n_exp_acc = n_con_prop = n_con_acc = 0
    for j in range(j_total):
        zj = zero[:, j]
        if not zj.any():
            continue
        eta_col = state.eta[:, j].copy()  # snapshot: one proposal per cell per sweep
        con = zj & eta_col
        exp_ = zj & ~eta_col
        if con.any():
            rows = np.nonzero(con)[0]
            t_row = totals[rows]
            c_row = state.c[rows, j]
            rem = t_row - c_row
            with np.errstate(divide="ignore", invalid="ignore"):
                log_acc = zdot[rows] * (np.log(t_row) - np.log(rem)) - tau[rows, j]
            log_acc[rem <= 0.0] = np.inf  # remainder below fp resolution
            log_acc[n_active[rows] <= 1] = -np.inf  # never empty a row
            acc = logu[rows, j] <= log_acc
            hit = rows[acc]
            if hit.size:
                state.c[hit, j] = 0.0
                state.eta[hit, j] = False
                totals[hit] = state.c[hit, :].sum(axis=1)
                n_active[hit] -= 1
            n_con_prop += rows.size
            n_con_acc += hit.size
        if exp_.any():
            rows = np.nonzero(exp_)[0]
            c_new = prop[rows, j]
            t_row = totals[rows]
            log_acc = zdot[rows] * (np.log(t_row) - np.log(t_row + c_new)) + tau[rows, j]
            acc = logu[rows, j] <= log_acc
            hit = rows[acc]
            if hit.size:
                state.c[hit, j] = c_new[acc]
                state.eta[hit, j] = True
                totals[hit] += c_new[acc]
                n_active[hit] += 1
            n_exp_prop += rows.size
            n_exp_acc += hit.size
    if diag is not None:
        diag.count("expand", n_exp_prop, n_exp_acc)
        diag.count("contract", n_con_prop, n_con_acc)


def update_beta_gamma(state: ModelState, counts: CountMatrix, design_gamma: DesignMatrix,
                      hyper: Hyperparameters, mask: SelectionMask, rng: RngStream,
                      diag: KernelDiagnostics | None = None,
                      rw_step: np.ndarray | None = None) -> np.ndarray | None:
    """Between/within sweep for the concentration coefficients.

    Between: toggle each free indicator, drawing added coefficients from the
    prior so its density cancels the proposal; the integrated beta-binomial
    contributes a_varphi/b_varphi (add) or its inverse (delete). Within:
    random-walk moves on every active coefficient. Likelihood terms run over
    at-risk cells of the affected column only.

    Returns the within-step acceptance indicator matrix (J x P) when the
    caller passed a per-coefficient ``rw_step`` matrix (used for optional
    burn-in adaptation), else None.
    """
    x = design_gamma.x
    n, p_total = x.shape
    beta = state.beta_gamma
    phi = state.varphi
    eta = state.eta
    gen = rng.generator
    sig2 = hyper.sigma2_beta_gamma
    log_ab = np.log(hyper.a_varphi) - np.log(hyper.b_varphi)

    log_c = np.where(eta, np.log(np.maximum(state.c, TINY)), 0.0)
    lam = x @ beta.T
    gam = gamma_from_linpred(lam)
    lgam = gammaln(gam)

    def column_delta_ll(jidx: np.ndarray, delta: np.ndarray, xp: np.ndarray):
        lam_new = lam[:, jidx] + xp[:, None] * delta[None, :]
        gam_new = gamma_from_linpred(lam_new)
        contrib = (gam_new - gam[:, jidx]) * log_c[:, jidx] - gammaln(gam_new) + lgam[:, jidx]
        dll = np.where(eta[:, jidx], contrib, 0.0).sum(axis=0)
        return dll, lam_new, gam_new

    def apply_columns(jidx: np.ndarray, acc: np.ndarray, lam_new, gam_new) -> None:
        hit = jidx[acc]
        lam[:, hit] = lam_new[:, acc]
        gam[:, hit] = gam_new[:, acc]
        lgam[:, hit] = gammaln(gam_new[:, acc])

    if mask.selection_enabled:
        for p in range(1, p_total):
            free = ~mask.forced_gamma[:, p]
            if not free.any():
                continue
            jidx = np.nonzero(free)[0]
            adding = ~phi[jidx, p]
            delta = np.where(adding,
                             gen.standard_normal(jidx.size) * np.sqrt(sig2),
                             -beta[jidx, p])
            dll, lam_new, gam_new = column_delta_ll(jidx, delta, x[:, p])
            log_acc = dll + np.where(adding, log_ab, -log_ab)
            acc = -gen.standard_exponential(jidx.size) <= log_acc
            hit = jidx[acc]
            beta[hit, p] += delta[acc]
            beta[jidx[acc & ~adding], p] = 0.0  # exact zero on delete
            phi[hit, p] = ~phi[hit, p]
            apply_columns(jidx, acc, lam_new, gam_new)
            if diag is not None:
                diag.count("between_gamma_add", int(adding.sum()), int((acc & adding).sum()))
                diag.count("between_gamma_delete", int((~adding).sum()), int((acc & ~adding).sum()))

    within_accept = np.zeros_like(phi, dtype=bool) if rw_step is not None else None
    for p in range(p_total):
        active = phi[:, p]
        if not active.any():
            continue
        jidx = np.nonzero(active)[0]
        step = hyper.rw_step_gamma if rw_step is None else rw_step[jidx, p]
        old = beta[jidx, p]
        delta = gen.standard_normal(jidx.size) * step
        new = old + delta
        dll, lam_new, gam_new = column_delta_ll(jidx, delta, x[:, p])
        log_acc = dll + (old * old - new * new) / (2.0 * sig2)
        acc = -gen.standard_exponential(jidx.size) <= log_acc
        beta[jidx[acc], p] = new[acc]
        apply_columns(jidx, acc, lam_new, gam_new)
        if within_accept is not None:
            within_accept[jidx[acc], p] = True
        if diag is not None:
            diag.count("within_gamma", jidx.size, int(acc.sum()))
    return within_accept


def update_beta_theta(state: ModelState, design_theta: DesignMatrix, hyper: Hyperparameters,
                      mask: SelectionMask, rng: RngStream,
                      diag: KernelDiagnostics | None = None, refresh_omega: bool = True) -> None:
    """Between/within sweep for the zero-inflation coefficients.

    Between steps use the omega-marginal Bernoulli likelihood of eta, so the
    Polya-Gamma auxiliaries are refreshed afterwards (when
    ``refresh_omega``) and the within step then draws each active
    coefficient block from its exact Gaussian conditional.
    """
    x = design_theta.x
    n, p_total = x.shape
    beta = state.beta_theta
    zeta = state.zeta
    eta_f = state.eta.astype(np.float64)
    gen = rng.generator
    sig2 = hyper.sigma2_beta_theta
    log_ab = np.log(hyper.a_zeta) - np.log(hyper.b_zeta)

    tau = x @ beta.T

    if mask.selection_enabled:
        for p in range(1, p_total):
            free = ~mask.forced_theta[:, p]
            if not free.any():
                continue
            jidx = np.nonzero(free)[0]
            adding = ~zeta[jidx, p]
            delta = np.where(adding,
                             gen.standard_normal(jidx.size) * np.sqrt(sig2),
                             -beta[jidx, p])
            tau_new = tau[:, jidx] + x[:, p][:, None] * delta[None, :]
            dll = (eta_f[:, jidx] * (tau_new - tau[:, jidx])
                   - np.logaddexp(0.0, tau_new) + np.logaddexp(0.0, tau[:, jidx])).sum(axis=0)
            log_acc = dll + np.where(adding, log_ab, -log_ab)
            acc = -gen.standard_exponential(jidx.size) <= log_acc
            hit = jidx[acc]
            beta[hit, p] += delta[acc]
            beta[jidx[acc & ~adding], p] = 0.0
            zeta[hit, p] = ~zeta[hit, p]
            tau[:, hit] = tau_new[:, acc]
            if diag is not None:
                diag.count("between_theta_add", int(adding.sum()), int((acc & adding).sum()))
                diag.count("between_theta_delete", int((~adding).sum()), int((acc & ~adding).sum()))

    if refresh_omega:
        state.omega = sample_polya_gamma_1_vec(tau, rng)

    kappa = eta_f - 0.5
    omega = state.omega
    if np.any(omega <= 0.0):
        raise NumericalError("omega must be strictly positive for the Gaussian draw")

    intercept_only = not zeta[:, 1:].any() if p_total > 1 else True
    if intercept_only:
        prec = omega.sum(axis=0) + 1.0 / sig2
        mean = kappa.sum(axis=0) / prec
        beta[:, 0] = mean + gen.standard_normal(beta.shape[0]) / np.sqrt(prec)
    else:
        for j in range(beta.shape[0]):
            cols = np.nonzero(zeta[j])[0]
            xa = x[:, cols]
            prec = xa.T @ (omega[:, j][:, None] * xa)
            prec[np.diag_indices_from(prec)] += 1.0 / sig2
            b = xa.T @ kappa[:, j]
            try:
                chol = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:  # pragma: no cover
                raise NumericalError("non-positive-definite precision in beta_theta update") from exc
            mean = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
            draw = mean + np.linalg.solve(chol.T, gen.standard_normal(cols.size))
            beta[j, cols] = draw


# ---------------------------------------------------------------------------
# Chain driver.
# ---------------------------------------------------------------------------


def _alloc_storage(monitor, kept, n, j, p_gamma, p_theta):
    shapes = {
        "beta_gamma": (kept, j, p_gamma), "varphi": (kept, j, p_gamma),
        "beta_theta": (kept, j, p_theta), "zeta": (kept, j, p_theta),
        "psi": (kept, n, j), "eta": (kept, n, j), "u": (kept, n),
        "c": (kept, n, j), "omega": (kept, n, j),
    }
    dtypes = {"varphi": bool, "zeta": bool, "eta": bool}
    return {b: np.empty(shapes[b], dtype=dtypes.get(b, np.float64)) for b in monitor}


def run_chain(counts: CountMatrix, design_gamma: DesignMatrix, design_theta: DesignMatrix,
              hyper: Hyperparameters, mask: SelectionMask, cfg: McmcConfig, chain_id: int = 0,
              zero_inflation: bool = True, sample_beta_gamma: bool = True,
              sample_beta_theta: bool = True, init_state: ModelState | None = None):
    """Run a single chain; returns (storage dict, diagnostics, truncated flag)."""
    rng = RngStream.from_key(cfg.seed, tuple(cfg.stream) + (chain_id,))
    if init_state is None:
        state = initialize_state(counts, design_gamma, hyper, mask, rng,
                                 design_theta=design_theta, zero_inflation=zero_inflation)
    else:
        state = init_state.copy()
        state.validate(counts)

    burn = cfg.resolved_burn_in()
    kept = cfg.kept_per_chain()
    storage = _alloc_storage(cfg.monitor, kept, counts.n, counts.j,
                             design_gamma.p, design_theta.p)
    diag = KernelDiagnostics()
    rw_step = None
    if cfg.adapt_rw_burnin:
        rw_step = np.full((counts.j, design_gamma.p), hyper.rw_step_gamma)

    filled = 0
    truncated = False
    start = time.perf_counter()
    try:
        for m in range(1, cfg.iterations + 1):
            if zero_inflation:
                expand_contract(state, counts, design_gamma, design_theta, rng, diag)
            update_u(state, counts, rng)
            update_c(state, counts, design_gamma, rng)
            if sample_beta_gamma:
                step_arg = rw_step if (cfg.adapt_rw_burnin and m <= burn) else None
                accepted = update_beta_gamma(state, counts, design_gamma, hyper, mask, rng,
                                             diag, rw_step=step_arg)
                if step_arg is not None and accepted is not None:
                    # Robbins-Monro drift toward 0.44 acceptance, burn-in only.
                    gain = 1.0 / max(m, 10) ** 0.6
                    adj = np.where(accepted[state.varphi], gain * (1.0 - 0.44), -gain * 0.44)
                    rw_step[state.varphi] *= np.exp(adj)
            if zero_inflation and sample_beta_theta:
                update_beta_theta(state, design_theta, hyper, mask, rng, diag)
            if cfg.debug_validate:
                state.validate(counts)
            if m > burn and (m - burn) % cfg.thin == 0:
                _store(storage, filled, state)
                filled += 1
    except KeyboardInterrupt:  # partial trace with truncation flag
        truncated = True
        storage = {b: a[:filled] for b, a in storage.items()}
    diag.elapsed_seconds = time.perf_counter() - start
    diag.iterations = m if truncated else cfg.iterations
    return storage, diag, truncated, filled


def _store(storage, k, state: ModelState) -> None:
    for block, arr in storage.items():
        if block == "psi":
            arr[k] = state.psi()
        else:
            arr[k] = getattr(state, block)


def run_mcmc(counts: CountMatrix, design_gamma: DesignMatrix,
             design_theta: DesignMatrix | None = None,
             hyper: Hyperparameters | None = None, mask: SelectionMask | None = None,
             cfg: McmcConfig | None = None, *, zero_inflation: bool = True,
             sample_beta_gamma: bool = True, sample_beta_theta: bool = True,
             init_state: ModelState | None = None, jobs: int = 1):
    """Fit the model; returns (Trace, KernelDiagnostics).

    ``design_theta`` defaults to ``design_gamma``; the two may differ. With
    ``zero_inflation`` off the sampler is the plain Dirichlet-multinomial
    special case (every cell at risk, no indicator layer).
    """
    from .model import Trace  # local import to keep module load order simple

    if design_theta is None:
        design_theta = design_gamma
    hyper = hyper if hyper is not None else Hyperparameters()
    hyper.validate()
    if mask is None:
        mask = SelectionMask.create(counts.j, design_gamma.p, design_theta.p, False)
    cfg = cfg if cfg is not None else McmcConfig()
    cfg.validate()
    if design_gamma.n != counts.n or design_theta.n != counts.n:
        raise ShapeError("counts and designs disagree on the number of rows")
    if mask.forced_gamma.shape != (counts.j, design_gamma.p) or \
            mask.forced_theta.shape != (counts.j, design_theta.p):
        raise ShapeError("selection mask does not match the model dimensions")

    args = (counts, design_gamma, design_theta, hyper, mask, cfg)
    kwargs = dict(zero_inflation=zero_inflation, sample_beta_gamma=sample_beta_gamma,
                  sample_beta_theta=sample_beta_theta, init_state=init_state)
    if cfg.chains == 1 or jobs == 1:
        results = [run_chain(*args, chain_id=ch, **kwargs) for ch in range(cfg.chains)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(
            delayed(run_chain)(*args, chain_id=ch, **kwargs) for ch in range(cfg.chains))

    storages = [r[0] for r in results]
    diag = KernelDiagnostics()
    for r in results:
        diag.merge(r[1])
    truncated = any(r[2] for r in results)
    samples = {b: np.concatenate([s[b] for s in storages], axis=0) for b in cfg.monitor}
    meta = {
        "iterations": cfg.iterations, "burn_in": cfg.resolved_burn_in(), "thin": cfg.thin,
        "seed": cfg.seed, "chains": cfg.chains,
        "kept_per_chain": [r[3] for r in results],
        "model": "zidm" if zero_inflation else "dm",
        "selection": bool(mask.selection_enabled),
        "n": counts.n, "j": counts.j,
        "p_gamma": design_gamma.p, "p_theta": design_theta.p,
        "taxon_names": counts.taxon_names, "sample_ids": counts.sample_ids,
        "covariate_names_gamma": design_gamma.covariate_names,
        "covariate_names_theta": design_theta.covariate_names,
        "truncated": truncated,
    }
    return Trace(samples=samples, meta=meta), diag
