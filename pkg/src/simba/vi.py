"""Mean-field coordinate-ascent variational inference.

Each Gibbs conditional has a matching closed-form factor update with
unknowns replaced by their current variational expectations; inverse
variances enter as E[1/sigma^2] = shape/rate of the inverse-gamma
factors. Convergence is declared on the maximum absolute change of all
variational means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma

from .errors import ConfigError, NumericalError
from .model import (
    ParameterState,
    PriorConfig,
    TransformedDataset,
    apply_identifiability,
    init_state,
)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class IGFactor:
    """Inverse-gamma variational factor; e_inv is E[1/x] = shape/rate."""

    shape: float = 1.0
    rate: float = 1.0

    @property
    def e_inv(self) -> float:
        return self.shape / self.rate

    @property
    def e_log(self) -> float:
        return float(np.log(self.rate) - digamma(self.shape))


@dataclass
class VariationalState:
    """All factor parameters of the mean-field approximation."""

    alpha_mean: np.ndarray  # (P,)
    alpha_var: np.ndarray  # (P,)
    tb_mean: np.ndarray  # (P, L)
    tb_var: np.ndarray  # (P,) scalar variance per row (covariance is v * I)
    te_mean: np.ndarray  # (N, L_eta)
    te_cov: np.ndarray  # (L_eta, L_eta), shared across participants
    q_sigma2_eps: IGFactor = field(default_factory=IGFactor)
    q_sigma2_eta: IGFactor = field(default_factory=IGFactor)
    q_sigma2_beta: IGFactor = field(default_factory=IGFactor)
    q_sigma2_alpha: IGFactor = field(default_factory=IGFactor)
    q_a_eps: IGFactor = field(default_factory=IGFactor)
    q_a_eta: IGFactor = field(default_factory=IGFactor)
    q_a_beta: IGFactor = field(default_factory=IGFactor)
    q_a_alpha: IGFactor = field(default_factory=IGFactor)

    def validate(self):
        for f in (self.q_sigma2_eps, self.q_sigma2_eta, self.q_sigma2_beta,
                  self.q_sigma2_alpha, self.q_a_eps, self.q_a_eta,
                  self.q_a_beta, self.q_a_alpha):
            if not (f.shape > 0 and f.rate > 0):
                raise NumericalError("inverse-gamma factor parameters must be positive")
        if np.any(self.alpha_var <= 0) or np.any(self.tb_var <= 0):
            raise NumericalError("Gaussian factor variances must be positive")

    def means_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.alpha_mean, self.tb_mean.ravel(), self.te_mean.ravel()]
        )


@dataclass(frozen=True)
class VIConfig:
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not (self.tol > 0):
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class VIResult:
    state: VariationalState
    trace: np.ndarray  # per-sweep max absolute mean change
    iterations: int
    converged: bool
    monitor: np.ndarray | None = None  # optional fit monitor (not the full ELBO)


def _init_vstate(tdata: TransformedDataset, prior: PriorConfig, seed: int) -> VariationalState:
    start = init_state(tdata, prior, seed=seed)
    L_eta = tdata.basis.L_eta
    return VariationalState(
        alpha_mean=start.alpha,
        alpha_var=np.ones(tdata.n_covariates),
        tb_mean=start.theta_beta,
        tb_var=np.ones(tdata.n_covariates),
        te_mean=start.theta_eta,
        te_cov=np.eye(L_eta),
    )


def _mean_resid(vs: VariationalState, tdata: TransformedDataset) -> np.ndarray:
    b = tdata.basis
    return (
        tdata.Y_tilde
        - np.outer(tdata.X @ vs.alpha_mean, b.ones_phi)
        - tdata.X @ vs.tb_mean
        - vs.te_mean @ b.phi_eta
    )


def update_alpha(vs, tdata, prior):
    """Closed-form update of every q(alpha_j)."""
    b = tdata.basis
    ptp = float(b.ones_phi @ b.ones_phi)
    tau_eps = vs.q_sigma2_eps.e_inv
    tau_alpha = vs.q_sigma2_alpha.e_inv
    proj = (
        tdata.Y_tilde @ b.ones_phi
        - (tdata.X @ vs.tb_mean) @ b.ones_phi
        - (vs.te_mean @ b.phi_eta) @ b.ones_phi
        - (tdata.X @ vs.alpha_mean) * ptp
    )
    for j in range(tdata.n_covariates):
        xj = tdata.X[:, j]
        proj += xj * vs.alpha_mean[j] * ptp
        sx = float(xj @ xj)
        var = 1.0 / (sx * ptp * tau_eps + tau_alpha)
        vs.alpha_var[j] = var
        vs.alpha_mean[j] = var * tau_eps * float(xj @ proj)
        proj -= xj * vs.alpha_mean[j] * ptp
    return vs


def update_theta_beta(vs, tdata, prior):
    """Closed-form update of every q(theta_beta_j); covariance is v_j * I."""
    b = tdata.basis
    tau_eps = vs.q_sigma2_eps.e_inv
    tau_beta = vs.q_sigma2_beta.e_inv
    base = _mean_resid(vs, tdata)
    for j in range(tdata.n_covariates):
        xj = tdata.X[:, j]
        resid_j = base + np.outer(xj, vs.tb_mean[j])
        sx = float(xj @ xj)
        var = 1.0 / (sx * tau_eps + tau_beta)
        vs.tb_var[j] = var
        vs.tb_mean[j] = var * tau_eps * (xj @ resid_j)
        base = resid_j - np.outer(xj, vs.tb_mean[j])
    return vs


def update_theta_eta(vs, tdata, prior):
    """Closed-form update of all q(theta_eta_i); covariance shared across i."""
    b = tdata.basis
    L_eta = b.L_eta
    tau_eps = vs.q_sigma2_eps.e_inv
    tau_eta = vs.q_sigma2_eta.e_inv
    prec = b.phi_eta @ b.phi_eta.T * tau_eps + np.eye(L_eta) * tau_eta
    cf = cho_factor(prec, lower=True)
    vs.te_cov = cho_solve(cf, np.eye(L_eta))
    resid = tdata.Y_tilde - np.outer(tdata.X @ vs.alpha_mean, b.ones_phi) \
        - tdata.X @ vs.tb_mean
    vs.te_mean = cho_solve(cf, (resid @ b.phi_eta.T).T).T * tau_eps
    return vs


def expected_rss(vs: VariationalState, tdata: TransformedDataset) -> float:
    """E_q of the squared residual norm, second moments included."""
    b = tdata.basis
    L = b.L
    ptp = float(b.ones_phi @ b.ones_phi)
    sx = np.sum(tdata.X**2, axis=0)
    mean_part = float(np.sum(_mean_resid(vs, tdata) ** 2))
    var_alpha = ptp * float(sx @ vs.alpha_var)
    var_beta = L * float(sx @ vs.tb_var)
    var_eta = tdata.n_participants * float(
        np.trace(vs.te_cov @ (b.phi_eta @ b.phi_eta.T))
    )
    return mean_part + var_alpha + var_beta + var_eta


def update_variances(vs, tdata, prior):
    """Closed-form updates of all inverse-gamma factors."""
    N, L = tdata.Y_tilde.shape
    P = tdata.n_covariates
    L_eta = tdata.basis.L_eta
    inv_A2 = 1.0 / prior.A**2

    vs.q_sigma2_eps = IGFactor(
        (1 + N * L) / 2.0, 0.5 * expected_rss(vs, tdata) + vs.q_a_eps.e_inv
    )
    e_te_sq = float(np.sum(vs.te_mean**2)) + N * float(np.trace(vs.te_cov))
    vs.q_sigma2_eta = IGFactor((1 + N * L_eta) / 2.0, 0.5 * e_te_sq + vs.q_a_eta.e_inv)
    e_tb_sq = float(np.sum(vs.tb_mean**2)) + L * float(np.sum(vs.tb_var))
    vs.q_sigma2_beta = IGFactor((1 + P * L) / 2.0, 0.5 * e_tb_sq + vs.q_a_beta.e_inv)
    e_alpha_sq = float(np.sum(vs.alpha_mean**2) + np.sum(vs.alpha_var))
    vs.q_sigma2_alpha = IGFactor((1 + P) / 2.0, 0.5 * e_alpha_sq + vs.q_a_alpha.e_inv)

    vs.q_a_eps = IGFactor(1.0, inv_A2 + vs.q_sigma2_eps.e_inv)
    vs.q_a_eta = IGFactor(1.0, inv_A2 + vs.q_sigma2_eta.e_inv)
    vs.q_a_beta = IGFactor(1.0, inv_A2 + vs.q_sigma2_beta.e_inv)
    vs.q_a_alpha = IGFactor(1.0, inv_A2 + vs.q_sigma2_alpha.e_inv)
    return vs


def cavi_update(vs, tdata, prior):
    """One full coordinate-ascent sweep over all factors, in fixed order."""
    update_alpha(vs, tdata, prior)
    update_theta_beta(vs, tdata, prior)
    update_theta_eta(vs, tdata, prior)
    update_variances(vs, tdata, prior)
    if not np.all(np.isfinite(vs.means_vector())):
        raise NumericalError("non-finite variational mean after sweep")
    vs.validate()
    return vs


def fit_monitor(vs: VariationalState, tdata: TransformedDataset) -> float:
    """Expected log-likelihood plus Gaussian-factor entropies.

    A cheap convergence monitor for debugging; this is NOT the full
    evidence lower bound (prior and inverse-gamma terms are omitted).
    """
    N, L = tdata.Y_tilde.shape
    L_eta = tdata.basis.L_eta
    e_loglik = -0.5 * (
        N * L * (_LOG_2PI + vs.q_sigma2_eps.e_log)
        + vs.q_sigma2_eps.e_inv * expected_rss(vs, tdata)
    )
    ent = 0.5 * float(np.sum(np.log(2.0 * np.pi * np.e * vs.alpha_var)))
    ent += 0.5 * L * float(np.sum(np.log(2.0 * np.pi * np.e * vs.tb_var)))
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * np.e * vs.te_cov)
    ent += 0.5 * N * float(sign * logdet)
    return e_loglik + ent


def run_vi(
    tdata: TransformedDataset,
    prior: PriorConfig,
    cfg: VIConfig,
    compute_monitor: bool = False,
) -> VIResult:
    """Iterate CAVI sweeps to convergence and center the final means."""
    vs = _init_vstate(tdata, prior, cfg.seed)
    trace = []
    monitor = [] if compute_monitor else None
    converged = False
    iterations = 0
    prev = vs.means_vector()
    for it in range(cfg.max_iter):
        cavi_update(vs, tdata, prior)
        cur = vs.means_vector()
        delta = float(np.max(np.abs(cur - prev)))
        trace.append(delta)
        if compute_monitor:
            monitor.append(fit_monitor(vs, tdata))
        prev = cur
        iterations = it + 1
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"VI did not converge in {cfg.max_iter} sweeps (last change {trace[-1]:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    # center the variational means with the shared identifiability convention
    view = ParameterState(
        alpha=vs.alpha_mean, theta_beta=vs.tb_mean, theta_eta=vs.te_mean
    )
    centered = apply_identifiability(view, tdata.basis)
    vs.alpha_mean = centered.alpha
    vs.tb_mean = centered.theta_beta
    vs.te_mean = centered.theta_eta
    return VIResult(
        state=vs,
        trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
        monitor=np.asarray(monitor) if compute_monitor else None,
    )
