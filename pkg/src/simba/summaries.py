"""Voxel-level posterior summaries: effect maps, intervals, evidence scores.

The reported quantity is always the combined voxel effect
alpha_j + beta_j(s_v); the evidence score E_s maps posterior positivity
probabilities (or signed p-values for frequentist baselines) onto
[-1, 1] so all methods threshold on the same scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .basis import BasisSystem
from .errors import DataError
from .model import ParameterState
from .vi import VariationalState, VIResult

DEFAULT_THRESHOLD = 0.95


@dataclass
class EffectMap:
    """Per-voxel summary of one covariate's combined effect."""

    covariate: int
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    p_plus: np.ndarray
    e_s: np.ndarray
    active: np.ndarray
    level: float = 0.95
    threshold: float = DEFAULT_THRESHOLD

    FIELDS = ("mean", "lower", "upper", "p_plus", "e_s", "active")


def evidence_score(p_value, sign):
    """Signed frequentist evidence: sign * (1 - p)."""
    p = np.asarray(p_value, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("p-values must lie in [0, 1]")
    out = np.sign(sign) * (1.0 - p)
    return out if out.ndim else float(out)


def evidence_from_pplus(p_plus):
    """Bayesian evidence: 2 * (P+ - 0.5)."""
    p = np.asarray(p_plus, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("posterior probabilities must lie in [0, 1]")
    out = 2.0 * (p - 0.5)
    return out if out.ndim else float(out)


def reconstruct_effect(draw: ParameterState, basis: BasisSystem, j: int) -> np.ndarray:
    """Voxel map of the combined effect for covariate j at one draw."""
    return draw.alpha[j] + basis.psi @ (np.sqrt(basis.lam) * draw.theta_beta[j])


def population_prediction(alpha, theta_beta, basis: BasisSystem, X) -> np.ndarray:
    """Predicted responses (n x V) from population terms only."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    spatial = (X @ theta_beta) * np.sqrt(basis.lam)[None, :]
    return (X @ alpha)[:, None] + spatial @ basis.psi.T


def posterior_mean_coefficients(draws: list[ParameterState]):
    """Average alpha and theta_beta over draws."""
    alpha = np.mean([d.alpha for d in draws], axis=0)
    theta_beta = np.mean([d.theta_beta for d in draws], axis=0)
    return alpha, theta_beta


def nearest_rank_bounds(n: int, level: float) -> tuple[int, int]:
    """1-based order-statistic ranks of the equal-tailed interval."""
    tail = (1.0 - level) / 2.0
    k_lo = max(1, int(np.floor(n * tail)))
    k_hi = min(n, int(np.ceil(n * (1.0 - tail))))
    return k_lo, k_hi


def maps_from_draw_matrix(
    eff: np.ndarray,
    covariate: int,
    level: float = 0.95,
    threshold: float = DEFAULT_THRESHOLD,
) -> EffectMap:
    """Summarize an (n_draws x V) matrix of effect draws into an EffectMap."""
    n = eff.shape[0]
    k_lo, k_hi = nearest_rank_bounds(n, level)
    srt = np.sort(eff, axis=0)
    p_plus = np.mean(eff > 0, axis=0)
    e_s = 2.0 * (p_plus - 0.5)
    return EffectMap(
        covariate=covariate,
        mean=eff.mean(axis=0),
        lower=srt[k_lo - 1],
        upper=srt[k_hi - 1],
        p_plus=p_plus,
        e_s=e_s,
        active=np.abs(e_s) > threshold,
        level=level,
        threshold=threshold,
    )


def summarize_gibbs(
    draws: list[ParameterState],
    basis: BasisSystem,
    level: float = 0.95,
    threshold: float = DEFAULT_THRESHOLD,
    voxel_block: int = 0,
) -> list[EffectMap]:
    """Empirical effect maps from posterior draws, one per covariate.

    Voxels are processed in blocks so the draws-by-voxels buffer stays
    bounded; voxel_block=0 picks a size automatically.
    """
    if len(draws) < 100:
        raise DataError(f"need at least 100 draws to summarize, got {len(draws)}")
    n = len(draws)
    V = basis.n_voxels
    P = draws[0].alpha.shape[0]
    if voxel_block <= 0:
        voxel_block = max(1, min(V, int(2e7 // max(n, 1))))
    alphas = np.stack([d.alpha for d in draws])  # (n, P)
    thetas = np.stack([d.theta_beta for d in draws])  # (n, P, L)
    read = np.sqrt(basis.lam)[:, None] * basis.psi.T  # (L, V) readout
    out = []
    for j in range(P):
        mean = np.empty(V)
        lower = np.empty(V)
        upper = np.empty(V)
        p_plus = np.empty(V)
        k_lo, k_hi = nearest_rank_bounds(n, level)
        for s in range(0, V, voxel_block):
            e = min(V, s + voxel_block)
            eff = alphas[:, j : j + 1] + thetas[:, j, :] @ read[:, s:e]
            srt = np.sort(eff, axis=0)
            mean[s:e] = eff.mean(axis=0)
            lower[s:e] = srt[k_lo - 1]
            upper[s:e] = srt[k_hi - 1]
            p_plus[s:e] = np.mean(eff > 0, axis=0)
        e_s = 2.0 * (p_plus - 0.5)
        out.append(
            EffectMap(
                covariate=j,
                mean=mean,
                lower=lower,
                upper=upper,
                p_plus=p_plus,
                e_s=e_s,
                active=np.abs(e_s) > threshold,
                level=level,
                threshold=threshold,
            )
        )
    return out


def summarize_vi(
    vstate: VariationalState | VIResult,
    basis: BasisSystem,
    level: float = 0.95,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[EffectMap]:
    """Gaussian effect maps from converged variational factors.

    The effect at each voxel is Gaussian with mean alpha_j + readout of
    the mean coefficients and variance var(alpha_j) plus the basis-
    weighted coefficient variance (factors are independent under the
    mean field).
    """
    vs = vstate.state if isinstance(vstate, VIResult) else vstate
    read = np.sqrt(basis.lam)[:, None] * basis.psi.T  # (L, V)
    # sum_l Psi_vl^2 lambda_l, the per-voxel readout energy
    energy = (basis.psi**2) @ basis.lam
    z = float(norm.ppf(0.5 * (1.0 + level)))
    out = []
    for j in range(vs.alpha_mean.shape[0]):
        mean = vs.alpha_mean[j] + vs.tb_mean[j] @ read
        var = vs.alpha_var[j] + vs.tb_var[j] * energy
        sd = np.sqrt(var)
        positive = sd > 0
        p_plus = np.where(
            positive,
            norm.cdf(mean / np.where(positive, sd, 1.0)),
            0.5 * (1.0 + np.sign(mean)),  # degenerate factor: point mass
        )
        e_s = 2.0 * (p_plus - 0.5)
        out.append(
            EffectMap(
                covariate=j,
                mean=mean,
                lower=mean - z * sd,
                upper=mean + z * sd,
                p_plus=p_plus,
                e_s=e_s,
                active=np.abs(e_s) > threshold,
                level=level,
                threshold=threshold,
            )
        )
    return out


def pool_draws(chains) -> list[ParameterState]:
    """Concatenate post-burn-in draws from a list of chain outputs."""
    return [d for ch in chains for d in ch.draws]
