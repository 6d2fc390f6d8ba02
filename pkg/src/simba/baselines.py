"""Comparison methods: massive-univariate GLM and a voxelwise BML.

The GLM fits ordinary least squares independently at every voxel with
Benjamini-Hochberg adjustment across voxels. The Bayesian multilevel
baseline pools voxel effects through an exchangeable hierarchical prior
(no spatial kernel) with a participant intercept that is constant
across voxels, fit by a conjugate Gibbs sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .errors import DataError
from .gibbs import GibbsConfig, _draw_inverse_gamma
from .model import Dataset, PriorConfig
from .summaries import (
    DEFAULT_THRESHOLD,
    EffectMap,
    evidence_score,
    maps_from_draw_matrix,
)


@dataclass
class GLMResult:
    """Per-voxel OLS estimates with BH-adjusted inference."""

    coef: np.ndarray  # (P, V)
    se: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    p_adjusted: np.ndarray
    sign: np.ndarray
    e_s: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    dof: int
    fdr_q: float
    rejected: np.ndarray

    def effect_maps(self, threshold: float = DEFAULT_THRESHOLD, level: float = 0.95):
        """Present GLM output in the shared EffectMap layout.

        p_plus is the pseudo-probability (E_s + 1) / 2 so the
        E_s = 2 (P+ - 0.5) identity holds exactly.
        """
        maps = []
        for j in range(self.coef.shape[0]):
            es = self.e_s[j]
            maps.append(
                EffectMap(
                    covariate=j,
                    mean=self.coef[j],
                    lower=self.ci_lower[j],
                    upper=self.ci_upper[j],
                    p_plus=0.5 * (es + 1.0),
                    e_s=es,
                    active=np.abs(es) > threshold,
                    level=level,
                    threshold=threshold,
                )
            )
        return maps


@dataclass
class BMLResult:
    """Posterior draws of the voxelwise hierarchical baseline."""

    effect_draws: np.ndarray  # (n_draws, P, V)
    gamma_draws: np.ndarray  # (n_draws, P)
    tau2_draws: np.ndarray  # (n_draws, P)
    tau2_u_draws: np.ndarray  # (n_draws,)
    sigma2_draws: np.ndarray  # (n_draws,)

    def effect_maps(self, threshold: float = DEFAULT_THRESHOLD, level: float = 0.95):
        return [
            maps_from_draw_matrix(
                self.effect_draws[:, j, :], j, level=level, threshold=threshold
            )
            for j in range(self.effect_draws.shape[1])
        ]


def bh_adjust(p_values, q: float = 0.05):
    """Benjamini-Hochberg step-up adjustment.

    Returns (adjusted p-values, rejection mask at level q). Adjusted
    values are min_{k >= i} m p_(k) / k clipped at 1, mapped back to the
    input order.
    """
    p = np.asarray(p_values, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(ranked[::-1])[::-1]
    np.clip(adj, 0.0, 1.0, out=adj)
    out = np.empty(m)
    out[order] = adj
    return out, out <= q


def glm_fit(data: Dataset, fdr_q: float = 0.05, level: float = 0.95) -> GLMResult:
    """Voxelwise ordinary least squares with t-based inference."""
    X, Y = data.X, data.Y
    N, P = X.shape
    if N <= P:
        raise DataError(f"GLM needs N > number of covariates, got N={N}, P={P}")
    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < P:
        raise DataError("covariate matrix is rank deficient")
    xtx_inv = np.linalg.inv(xtx)
    coef = xtx_inv @ (X.T @ Y)  # (P, V)
    resid = Y - X @ coef
    dof = N - P
    sigma2 = np.sum(resid**2, axis=0) / dof
    se = np.sqrt(np.outer(np.diag(xtx_inv), sigma2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stat = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.inf * np.sign(coef))
    p_value = 2.0 * student_t.sf(np.abs(t_stat), dof)
    p_adjusted = np.empty_like(p_value)
    rejected = np.empty_like(p_value, dtype=bool)
    for j in range(P):  # adjust across voxels within each covariate map
        p_adjusted[j], rejected[j] = bh_adjust(p_value[j], q=fdr_q)
    sign = np.sign(t_stat)
    tcrit = float(student_t.ppf(0.5 * (1.0 + level), dof))
    return GLMResult(
        coef=coef,
        se=se,
        t_stat=t_stat,
        p_value=p_value,
        p_adjusted=p_adjusted,
        sign=sign,
        e_s=evidence_score(p_adjusted, sign),
        ci_lower=coef - tcrit * se,
        ci_upper=coef + tcrit * se,
        dof=dof,
        fdr_q=fdr_q,
        rejected=rejected,
    )


def bml_fit(
    data: Dataset,
    cfg: GibbsConfig,
    prior: PriorConfig | None = None,
    fixed_tau2: float | None = None,
) -> BMLResult:
    """Fit the voxelwise hierarchical baseline by Gibbs sampling.

    Model: y_iv = sum_j x_ij b_j(v) + u_i + e_iv with b_j(v) ~
    N(gamma_j, tau_j^2) exchangeable over voxels, u_i ~ N(0, tau_u^2)
    constant over voxels, and IG/half-Cauchy hyperpriors on all
    variances. fixed_tau2 pins every tau_j^2 (complete-pooling checks).
    """
    prior = prior or PriorConfig()
    X, Y = data.X, data.Y
    N, V = Y.shape
    P = X.shape[1]
    sx = np.sum(X**2, axis=0)
    inv_A2 = 1.0 / prior.A**2

    n_kept_per_chain = (cfg.n_iter - cfg.n_burnin + cfg.thin - 1) // cfg.thin
    total_kept = n_kept_per_chain * cfg.n_chains
    eff = np.empty((total_kept, P, V))
    gam = np.empty((total_kept, P))
    tau2_tr = np.empty((total_kept, P))
    tau2_u_tr = np.empty(total_kept)
    sig2_tr = np.empty(total_kept)

    k = 0
    for chain in range(cfg.n_chains):
        rng = np.random.default_rng([cfg.seed, 0xB111, chain])
        B = 0.1 * rng.standard_normal((P, V))
        u = np.zeros(N)
        gamma = np.zeros(P)
        tau2 = np.ones(P) if fixed_tau2 is None else np.full(P, fixed_tau2)
        tau2_u = 1.0
        sigma2 = 1.0
        a_tau = np.ones(P)
        a_u = 1.0
        a_sig = 1.0
        R = Y - X @ B - u[:, None]
        for t in range(cfg.n_iter):
            for j in range(P):
                R += np.outer(X[:, j], B[j])
                prec = sx[j] / sigma2 + 1.0 / tau2[j]
                mean = (X[:, j] @ R / sigma2 + gamma[j] / tau2[j]) / prec
                B[j] = mean + rng.standard_normal(V) / np.sqrt(prec)
                R -= np.outer(X[:, j], B[j])
            for j in range(P):
                prec_g = V / tau2[j] + inv_A2
                gamma[j] = B[j].sum() / tau2[j] / prec_g \
                    + rng.standard_normal() / np.sqrt(prec_g)
            R += u[:, None]
            prec_u = V / sigma2 + 1.0 / tau2_u
            u = R.sum(axis=1) / sigma2 / prec_u \
                + rng.standard_normal(N) / np.sqrt(prec_u)
            R -= u[:, None]
            if fixed_tau2 is None:
                for j in range(P):
                    rate = 0.5 * np.sum((B[j] - gamma[j]) ** 2) + 1.0 / a_tau[j]
                    tau2[j] = _draw_inverse_gamma(rng, (1 + V) / 2.0, rate)
                    a_tau[j] = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / tau2[j])
            tau2_u = _draw_inverse_gamma(
                rng, (1 + N) / 2.0, 0.5 * np.sum(u**2) + 1.0 / a_u
            )
            a_u = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / tau2_u)
            sigma2 = _draw_inverse_gamma(
                rng, (1 + N * V) / 2.0, 0.5 * np.sum(R**2) + 1.0 / a_sig
            )
            a_sig = _draw_inverse_gamma(rng, 1.0, inv_A2 + 1.0 / sigma2)
            if t >= cfg.n_burnin and (t - cfg.n_burnin) % cfg.thin == 0:
                eff[k] = B
                gam[k] = gamma
                tau2_tr[k] = tau2
                tau2_u_tr[k] = tau2_u
                sig2_tr[k] = sigma2
                k += 1
    return BMLResult(
        effect_draws=eff[:k],
        gamma_draws=gam[:k],
        tau2_draws=tau2_tr[:k],
        tau2_u_draws=tau2_u_tr[:k],
        sigma2_draws=sig2_tr[:k],
    )
