"""Conjugate Gibbs sampler for the reduced (projected) model.

Every update is a closed-form conditional draw. The sweep order is
theta_beta, alpha, theta_eta, variances, auxiliaries. All work inside
the iteration loop is on L- or L_eta-sized objects: the only inputs are
Y_tilde (N x L), the projected all-ones vector, and Phi_eta, so the
per-iteration cost is O(N L L_eta + L_eta^3) and independent of V.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import ConfigError, NumericalError
from .model import (
    ParameterState,
    PriorConfig,
    TransformedDataset,
    apply_identifiability,
    init_state,
)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 5000
    n_burnin: int = 4000
    thin: int = 1
    n_chains: int = 3
    seed: int = 0
    store_eta: bool = False

    def __post_init__(self):
        if not 0 <= self.n_burnin < self.n_iter:
            raise ConfigError(
                f"need 0 <= n_burnin < n_iter, got {self.n_burnin} / {self.n_iter}"
            )
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if self.n_chains < 1:
            raise ConfigError(f"n_chains must be >= 1, got {self.n_chains}")


@dataclass
class ChainOutput:
    """Post-burn-in draws plus the per-iteration log-likelihood trace."""

    chain_id: int
    draws: list[ParameterState]
    cond_loglik: np.ndarray  # length n_iter, all iterations
    seconds_per_1000_iter: float
    config: GibbsConfig = field(repr=False, default=None)  # type: ignore[assignment]


def _resid(state: ParameterState, tdata: TransformedDataset) -> np.ndarray:
    """Full N x L residual of the projected model at the current state."""
    b = tdata.basis
    fixed = np.outer(tdata.X @ state.alpha, b.ones_phi) + tdata.X @ state.theta_beta
    return tdata.Y_tilde - fixed - state.theta_eta @ b.phi_eta


def alpha_moments(j, state, tdata, resid_j=None):
    """Conditional (mean, variance) of the global effect alpha_j.

    resid_j, if given, is the N x L residual with the alpha_j term
    itself added back (everything else at current values).
    """
    b = tdata.basis
    if resid_j is None:
        resid_j = _resid(state, tdata) + np.outer(
            tdata.X[:, j] * state.alpha[j], b.ones_phi
        )
    ptp = float(b.ones_phi @ b.ones_phi)
    sx = float(tdata.X[:, j] @ tdata.X[:, j])
    var = 1.0 / (sx * ptp / state.sigma2_eps + 1.0 / state.sigma2_alpha)
    mean = var / state.sigma2_eps * float(tdata.X[:, j] @ (resid_j @ b.ones_phi))
    return mean, var


def theta_beta_moments(j, state, tdata, resid_j=None):
    """Conditional (mean vector, scalar variance) of theta_beta row j.

    The conditional covariance is a scalar times the identity, so the L
    coordinates are drawn as independent normals.
    """
    if resid_j is None:
        resid_j = _resid(state, tdata) + np.outer(
            tdata.X[:, j], state.theta_beta[j]
        )
    sx = float(tdata.X[:, j] @ tdata.X[:, j])
    var = 1.0 / (sx / state.sigma2_eps + 1.0 / state.sigma2_beta)
    mean = var / state.sigma2_eps * (tdata.X[:, j] @ resid_j)
    return mean, var


def theta_eta_moments(state, tdata):
    """Conditional means (N x L_eta) and shared covariance of all theta_eta_i."""
    b = tdata.basis
    L_eta = b.L_eta
    prec = b.phi_eta @ b.phi_eta.T / state.sigma2_eps + np.eye(L_eta) / state.sigma2_eta
    cf = cho_factor(prec, lower=True)
    resid = tdata.Y_tilde - np.outer(tdata.X @ state.alpha, b.ones_phi) \
        - tdata.X @ state.theta_beta
    rhs = (resid @ b.phi_eta.T) / state.sigma2_eps  # N x L_eta
    mean = cho_solve(cf, rhs.T).T
    cov = cho_solve(cf, np.eye(L_eta))
    return mean, cov


def variance_conditionals(state, tdata, prior):
    """(shape, rate) of every inverse-gamma variance conditional."""
    N, L = tdata.Y_tilde.shape
    P = tdata.n_covariates
    L_eta = tdata.basis.L_eta
    rss = float(np.sum(_resid(state, tdata) ** 2))
    return {
        "sigma2_eps": ((1 + N * L) / 2.0, 0.5 * rss + 1.0 / state.a_eps),
        "sigma2_eta": (
            (1 + N * L_eta) / 2.0,
            0.5 * float(np.sum(state.theta_eta**2)) + 1.0 / state.a_eta,
        ),
        "sigma2_beta": (
            (1 + P * L) / 2.0,
            0.5 * float(np.sum(state.theta_beta**2)) + 1.0 / state.a_beta,
        ),
        "sigma2_alpha": (
            (1 + P) / 2.0,
            0.5 * float(np.sum(state.alpha**2)) + 1.0 / state.a_alpha,
        ),
    }


def _draw_inverse_gamma(rng, shape, rate):
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def sample_alpha(state, tdata, prior, rng):
    """Draw every alpha_j sequentially from its full conditional."""
    b = tdata.basis
    ptp = float(b.ones_phi @ b.ones_phi)
    # scalar projections of the residual onto ones_phi, alpha terms included
    proj = (
        tdata.Y_tilde @ b.ones_phi
        - (tdata.X @ state.theta_beta) @ b.ones_phi
        - (state.theta_eta @ b.phi_eta) @ b.ones_phi
        - (tdata.X @ state.alpha) * ptp
    )
    for j in range(tdata.n_covariates):
        xj = tdata.X[:, j]
        proj += xj * state.alpha[j] * ptp
        sx = float(xj @ xj)
        var = 1.0 / (sx * ptp / state.sigma2_eps + 1.0 / state.sigma2_alpha)
        mean = var / state.sigma2_eps * float(xj @ proj)
        state.alpha[j] = mean + np.sqrt(var) * rng.standard_normal()
        proj -= xj * state.alpha[j] * ptp
    return state


def sample_theta_beta(state, tdata, prior, rng):
    """Draw every theta_beta row sequentially; coordinates are independent."""
    base = _resid(state, tdata)
    for j in range(tdata.n_covariates):
        xj = tdata.X[:, j]
        resid_j = base + np.outer(xj, state.theta_beta[j])
        mean, var = theta_beta_moments(j, state, tdata, resid_j=resid_j)
        state.theta_beta[j] = mean + np.sqrt(var) * rng.standard_normal(
            tdata.basis.L
        )
        base = resid_j - np.outer(xj, state.theta_beta[j])
    return state


def sample_theta_eta(state, tdata, prior, rng):
    """Draw all participant coefficients; the covariance is shared across i."""
    b = tdata.basis
    L_eta = b.L_eta
    prec = b.phi_eta @ b.phi_eta.T / state.sigma2_eps + np.eye(L_eta) / state.sigma2_eta
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:  # positive variances make this unreachable
        raise NumericalError("theta_eta precision not positive definite") from exc
    resid = tdata.Y_tilde - np.outer(tdata.X @ state.alpha, b.ones_phi) \
        - tdata.X @ state.theta_beta
    rhs = (resid @ b.phi_eta.T) / state.sigma2_eps
    mean = cho_solve((chol, True), rhs.T).T
    z = rng.standard_normal((tdata.n_participants, L_eta))
    # x = C^{-T} z has covariance (C C^T)^{-1} = posterior covariance
    state.theta_eta = mean + solve_triangular(chol.T, z.T, lower=False).T
    return state


def sample_variances(state, tdata, prior, rng):
    """Draw all variances, then their half-Cauchy auxiliaries."""
    cond = variance_conditionals(state, tdata, prior)
    state.sigma2_eps = _draw_inverse_gamma(rng, *cond["sigma2_eps"])
    state.sigma2_eta = _draw_inverse_gamma(rng, *cond["sigma2_eta"])
    state.sigma2_beta = _draw_inverse_gamma(rng, *cond["sigma2_beta"])
    state.sigma2_alpha = _draw_inverse_gamma(rng, *cond["sigma2_alpha"])
    inv_A2 = 1.0 / prior.A**2
    state.a_eps = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / state.sigma2_eps)
    state.a_eta = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / state.sigma2_eta)
    state.a_beta = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / state.sigma2_beta)
    state.a_alpha = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / state.sigma2_alpha)
    return state


def conditional_loglik(state, tdata) -> float:
    """log p(Y_tilde | state) under the reduced model."""
    N, L = tdata.Y_tilde.shape
    rss = float(np.sum(_resid(state, tdata) ** 2))
    return -0.5 * (N * L * (_LOG_2PI + np.log(state.sigma2_eps)) + rss / state.sigma2_eps)


def run_chain(
    tdata: TransformedDataset,
    prior: PriorConfig,
    cfg: GibbsConfig,
    chain_id: int = 0,
    fixed_variances: dict | None = None,
    progress=None,
) -> ChainOutput:
    """Run one chain; draws are post-burn-in, thinned, and centered.

    fixed_variances pins selected variance parameters (useful for
    conjugate-oracle validation). The RNG stream depends only on
    (seed, chain_id), never on scheduling.
    """
    basis = tdata.basis
    rng = np.random.default_rng([cfg.seed, chain_id])
    state = init_state(tdata, prior, seed=cfg.seed * 1000 + chain_id)
    fixed = fixed_variances or {}
    for name, value in fixed.items():
        setattr(state, name, float(value))

    loglik = np.empty(cfg.n_iter)
    draws: list[ParameterState] = []
    t0 = time.perf_counter()
    for t in range(cfg.n_iter):
        sample_theta_beta(state, tdata, prior, rng)
        sample_alpha(state, tdata, prior, rng)
        sample_theta_eta(state, tdata, prior, rng)
        sample_variances(state, tdata, prior, rng)
        for name, value in fixed.items():
            setattr(state, name, float(value))
        ll = conditional_loglik(state, tdata)
        if not np.isfinite(ll):
            raise NumericalError(
                f"chain {chain_id}: non-finite conditional log-likelihood at iteration {t}"
            )
        loglik[t] = ll
        if t >= cfg.n_burnin and (t - cfg.n_burnin) % cfg.thin == 0:
            kept = apply_identifiability(state, basis)
            if not cfg.store_eta:
                kept.theta_eta = np.empty((0, basis.L_eta))
            draws.append(kept)
        if progress is not None and (t + 1) % max(1, cfg.n_iter // 10) == 0:
            progress(chain_id, t + 1, cfg.n_iter)
    elapsed = time.perf_counter() - t0
    return ChainOutput(
        chain_id=chain_id,
        draws=draws,
        cond_loglik=loglik,
        seconds_per_1000_iter=1000.0 * elapsed / cfg.n_iter,
        config=cfg,
    )


def _chain_worker(args):
    tdata, prior, cfg, chain_id = args
    return run_chain(tdata, prior, cfg, chain_id)


def run_gibbs(
    tdata: TransformedDataset,
    prior: PriorConfig,
    cfg: GibbsConfig,
    n_jobs: int = 1,
    progress=None,
) -> list[ChainOutput]:
    """Run all chains; outputs are identical whether serial or parallel."""
    ids = list(range(cfg.n_chains))
    if n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, cfg.n_chains)) as pool:
            outs = list(pool.map(_chain_worker, [(tdata, prior, cfg, c) for c in ids]))
    else:
        outs = [run_chain(tdata, prior, cfg, c, progress=progress) for c in ids]
    return outs
