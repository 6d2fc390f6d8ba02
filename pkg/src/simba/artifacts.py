"""Binary fit artifacts (.npz) written by `fit` and reread downstream.

One archive holds the method name, provenance, the domain and basis
needed to reconstruct voxel maps, and the method-specific posterior
objects (draws, variational factors, or baseline results).
"""

from __future__ import annotations

import io as _io
from dataclasses import dataclass

import numpy as np

from .baselines import BMLResult, GLMResult
from .basis import BasisSystem
from .domain import SpatialDomain
from .errors import DataError
from .gibbs import ChainOutput
from .io import atomic_write
from .model import ParameterState
from .vi import IGFactor, VariationalState, VIResult

_IG_NAMES = ("sigma2_eps", "sigma2_eta", "sigma2_beta", "sigma2_alpha",
             "a_eps", "a_eta", "a_beta", "a_alpha")
_SIGMA_FIELDS = ("sigma2_alpha", "sigma2_beta", "sigma2_eta", "sigma2_eps")
_A_FIELDS = ("a_alpha", "a_beta", "a_eta", "a_eps")


@dataclass
class FitArtifact:
    method: str
    domain: SpatialDomain
    config_hash: str
    seed: int
    basis: BasisSystem | None = None
    chains: list[ChainOutput] | None = None
    vi_result: VIResult | None = None
    glm: GLMResult | None = None
    bml: BMLResult | None = None
    seconds_per_1000_iter: float = float("nan")


def _domain_arrays(domain: SpatialDomain) -> dict:
    out = {"domain_coords": domain.coords}
    if domain.mask_shape is not None:
        out["domain_mask_shape"] = np.asarray(domain.mask_shape)
        out["domain_mask_flat_index"] = domain.mask_flat_index
    return out


def _basis_arrays(basis: BasisSystem) -> dict:
    return {
        "basis_psi": basis.psi,
        "basis_lam": basis.lam,
        "basis_psi_eta": basis.psi_eta,
        "basis_lam_eta": basis.lam_eta,
        "basis_inducing": basis.inducing_indices,
        "basis_inducing_eta": basis.inducing_indices_eta,
    }


def _rebuild_basis(z) -> BasisSystem:
    psi = z["basis_psi"]
    lam = z["basis_lam"]
    psi_eta = z["basis_psi_eta"]
    lam_eta = z["basis_lam_eta"]
    phi = psi / np.sqrt(lam)[None, :]
    phi_eta = np.sqrt(lam_eta)[:, None] * (psi_eta.T @ phi)
    return BasisSystem(
        psi=psi,
        lam=lam,
        psi_eta=psi_eta,
        lam_eta=lam_eta,
        phi=phi,
        phi_eta=phi_eta,
        ones_phi=phi.sum(axis=0),
        inducing_indices=z["basis_inducing"],
        inducing_indices_eta=z["basis_inducing_eta"],
    )


def save_fit(path, art: FitArtifact):
    payload = {
        "method": np.array(art.method),
        "config_hash": np.array(art.config_hash),
        "seed": np.array(art.seed),
        "seconds_per_1000_iter": np.array(art.seconds_per_1000_iter),
    }
    payload.update(_domain_arrays(art.domain))
    if art.basis is not None:
        payload.update(_basis_arrays(art.basis))
    if art.chains is not None:
        draws = [d for ch in art.chains for d in ch.draws]
        payload["gibbs_alpha"] = np.stack([d.alpha for d in draws])
        payload["gibbs_theta_beta"] = np.stack([d.theta_beta for d in draws])
        payload["gibbs_sigma2"] = np.array(
            [[getattr(d, f) for f in _SIGMA_FIELDS] for d in draws]
        )
        payload["gibbs_a"] = np.array(
            [[getattr(d, f) for f in _A_FIELDS] for d in draws]
        )
        payload["gibbs_chain_of_draw"] = np.concatenate(
            [np.full(len(ch.draws), ch.chain_id) for ch in art.chains]
        )
        if draws and draws[0].theta_eta.size:
            payload["gibbs_theta_eta"] = np.stack([d.theta_eta for d in draws])
        payload["gibbs_loglik"] = np.stack([ch.cond_loglik for ch in art.chains])
        payload["gibbs_timing"] = np.array(
            [ch.seconds_per_1000_iter for ch in art.chains]
        )
        payload["gibbs_n_burnin"] = np.array(art.chains[0].config.n_burnin)
    if art.vi_result is not None:
        vs = art.vi_result.state
        payload["vi_alpha_mean"] = vs.alpha_mean
        payload["vi_alpha_var"] = vs.alpha_var
        payload["vi_tb_mean"] = vs.tb_mean
        payload["vi_tb_var"] = vs.tb_var
        payload["vi_te_mean"] = vs.te_mean
        payload["vi_te_cov"] = vs.te_cov
        payload["vi_ig"] = np.array(
            [[getattr(vs, "q_" + n).shape, getattr(vs, "q_" + n).rate]
             for n in _IG_NAMES]
        )
        payload["vi_trace"] = art.vi_result.trace
        payload["vi_iterations"] = np.array(art.vi_result.iterations)
        payload["vi_converged"] = np.array(art.vi_result.converged)
    if art.glm is not None:
        g = art.glm
        payload.update(
            glm_coef=g.coef, glm_se=g.se, glm_t=g.t_stat, glm_p=g.p_value,
            glm_p_adj=g.p_adjusted, glm_ci_lower=g.ci_lower,
            glm_ci_upper=g.ci_upper, glm_dof=np.array(g.dof),
            glm_fdr_q=np.array(g.fdr_q), glm_rejected=g.rejected,
        )
    if art.bml is not None:
        b = art.bml
        payload.update(
            bml_effect=b.effect_draws, bml_gamma=b.gamma_draws,
            bml_tau2=b.tau2_draws, bml_tau2_u=b.tau2_u_draws,
            bml_sigma2=b.sigma2_draws,
        )
    buf = _io.BytesIO()
    np.savez_compressed(buf, **payload)
    atomic_write(path, buf.getvalue())


def load_fit(path) -> FitArtifact:
    try:
        z = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise DataError(f"cannot read fit artifact {path}: {exc}") from exc
    if "method" not in z:
        raise DataError(f"{path}: not a fit artifact")
    coords = z["domain_coords"]
    mask_shape = None
    flat = None
    if "domain_mask_shape" in z:
        mask_shape = tuple(int(s) for s in z["domain_mask_shape"])
        flat = z["domain_mask_flat_index"]
    domain = SpatialDomain(coords=coords, mask_shape=mask_shape, mask_flat_index=flat)
    art = FitArtifact(
        method=str(z["method"]),
        domain=domain,
        config_hash=str(z["config_hash"]),
        seed=int(z["seed"]),
        seconds_per_1000_iter=float(z["seconds_per_1000_iter"]),
    )
    if "basis_psi" in z:
        art.basis = _rebuild_basis(z)
    if "gibbs_alpha" in z:
        alphas = z["gibbs_alpha"]
        thetas = z["gibbs_theta_beta"]
        sig = z["gibbs_sigma2"]
        aux = z["gibbs_a"]
        etas = z["gibbs_theta_eta"] if "gibbs_theta_eta" in z else None
        chain_of = z["gibbs_chain_of_draw"]
        loglik = z["gibbs_loglik"]
        timing = z["gibbs_timing"]
        chains = []
        L_eta = art.basis.L_eta if art.basis is not None else 0
        for c in range(loglik.shape[0]):
            idx = np.flatnonzero(chain_of == c)
            draws = []
            for k in idx:
                draws.append(
                    ParameterState(
                        alpha=alphas[k],
                        theta_beta=thetas[k],
                        theta_eta=etas[k] if etas is not None
                        else np.empty((0, L_eta)),
                        **dict(zip(_SIGMA_FIELDS, sig[k])),
                        **dict(zip(_A_FIELDS, aux[k])),
                    )
                )
            chains.append(
                ChainOutput(
                    chain_id=c,
                    draws=draws,
                    cond_loglik=loglik[c],
                    seconds_per_1000_iter=float(timing[c]),
                )
            )
        art.chains = chains
    if "vi_alpha_mean" in z:
        ig = z["vi_ig"]
        vs = VariationalState(
            alpha_mean=z["vi_alpha_mean"],
            alpha_var=z["vi_alpha_var"],
            tb_mean=z["vi_tb_mean"],
            tb_var=z["vi_tb_var"],
            te_mean=z["vi_te_mean"],
            te_cov=z["vi_te_cov"],
            **{
                "q_" + n: IGFactor(shape=float(ig[k, 0]), rate=float(ig[k, 1]))
                for k, n in enumerate(_IG_NAMES)
            },
        )
        art.vi_result = VIResult(
            state=vs,
            trace=z["vi_trace"],
            iterations=int(z["vi_iterations"]),
            converged=bool(z["vi_converged"]),
        )
    if "glm_coef" in z:
        coef = z["glm_coef"]
        p_adj = z["glm_p_adj"]
        sign = np.sign(z["glm_t"])
        art.glm = GLMResult(
            coef=coef, se=z["glm_se"], t_stat=z["glm_t"], p_value=z["glm_p"],
            p_adjusted=p_adj, sign=sign, e_s=sign * (1.0 - p_adj),
            ci_lower=z["glm_ci_lower"], ci_upper=z["glm_ci_upper"],
            dof=int(z["glm_dof"]), fdr_q=float(z["glm_fdr_q"]),
            rejected=z["glm_rejected"],
        )
    if "bml_effect" in z:
        art.bml = BMLResult(
            effect_draws=z["bml_effect"], gamma_draws=z["bml_gamma"],
            tau2_draws=z["bml_tau2"], tau2_u_draws=z["bml_tau2_u"],
            sigma2_draws=z["bml_sigma2"],
        )
    return art
