"""Convergence and model-fit diagnostics.

Covers split-chain Gelman-Rubin on scalar traces, posterior predictive
checks against pooled data densities, leave-one-participant-out
predictive error, predictive selection of the basis size, and
cross-site out-of-sample prediction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import build_basis_system, nystrom_decompose, select_inducing
from .baselines import bml_fit, glm_fit
from .domain import SpatialDomain
from .errors import ConfigError, DataError
from .gibbs import GibbsConfig, run_gibbs
from .kernels import KernelConfig
from .model import Dataset, ParameterState, PriorConfig, transform_dataset
from .summaries import pool_draws, population_prediction, posterior_mean_coefficients
from .vi import VariationalState, VIConfig, VIResult, run_vi


@dataclass(frozen=True)
class GelmanRubinResult:
    rhat: float
    degenerate: bool = False  # zero within-chain variance

    def __float__(self):
        return self.rhat


def gelman_rubin(traces) -> GelmanRubinResult:
    """Split-chain potential scale reduction factor.

    Each chain is halved, so C chains of length T become 2C sequences
    of length T//2; the statistic is sqrt(((T2-1)/T2 * W + B/T2) / W)
    with W the mean within-sequence variance and B the between-sequence
    variance of the sequence means.
    """
    chains = np.asarray(traces, dtype=np.float64)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise DataError("need at least 2 chains of equal length")
    if chains.shape[1] < 10:
        raise DataError("chains must have length >= 10")
    half = chains.shape[1] // 2
    split = np.vstack([chains[:, :half], chains[:, half : 2 * half]])
    n = half
    W = float(np.mean(np.var(split, axis=1, ddof=1)))
    if W == 0.0:
        return GelmanRubinResult(rhat=1.0, degenerate=True)
    B = n * float(np.var(np.mean(split, axis=1), ddof=1))
    var_plus = (n - 1) / n * W + B / n
    return GelmanRubinResult(rhat=float(np.sqrt(var_plus / W)))


@dataclass
class PPCResult:
    """Histogram densities of replicated datasets against the observed one."""

    bin_edges: np.ndarray
    observed_density: np.ndarray
    replicated_density: np.ndarray  # (n_rep, n_bins)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def _states_for_ppc(source, n_rep: int, rng, basis) -> list[ParameterState]:
    """Pick n_rep parameter draws from posterior samples or a VI state."""
    if isinstance(source, VIResult):
        source = source.state
    if isinstance(source, VariationalState):
        states = []
        L_eta = source.te_cov.shape[0]
        chol = np.linalg.cholesky(source.te_cov + 1e-15 * np.eye(L_eta))
        for _ in range(n_rep):
            alpha = source.alpha_mean + np.sqrt(source.alpha_var) * rng.standard_normal(
                source.alpha_mean.shape
            )
            tb = source.tb_mean + np.sqrt(source.tb_var)[:, None] * rng.standard_normal(
                source.tb_mean.shape
            )
            te = source.te_mean + rng.standard_normal(source.te_mean.shape) @ chol.T
            s2e = 1.0 / rng.gamma(
                source.q_sigma2_eps.shape, 1.0 / source.q_sigma2_eps.rate
            )
            s2h = 1.0 / rng.gamma(
                source.q_sigma2_eta.shape, 1.0 / source.q_sigma2_eta.rate
            )
            states.append(
                ParameterState(alpha=alpha, theta_beta=tb, theta_eta=te,
                               sigma2_eps=s2e, sigma2_eta=s2h)
            )
        return states
    draws = list(source)
    if not draws:
        raise DataError("no posterior draws supplied")
    idx = np.linspace(0, len(draws) - 1, num=min(n_rep, len(draws)), dtype=int)
    return [draws[i] for i in idx]


def ppc_draw(
    source,
    basis,
    data,
    n_rep: int = 150,
    n_bins: int = 512,
    seed: int = 0,
) -> PPCResult:
    """Replicated-data density curves for a posterior predictive check.

    source is either a list of posterior draws or a variational state.
    data must still carry voxel-space responses; replicated noise is
    drawn in the basis (Psi Lambda^{1/2} z scaled by sigma_eps). Draws
    without stored participant coefficients get them from their
    sigma_eta prior.
    """
    if isinstance(data, Dataset):
        Y = data.Y
        X = data.X
    else:
        if data.Y_voxel is None:
            raise DataError(
                "voxel-space responses were not retained; re-run "
                "transform_dataset with keep_voxel_data=True"
            )
        Y = data.Y_voxel
        X = data.X
    rng = np.random.default_rng([seed, 0x99C])
    lohi = float(Y.min()), float(Y.max())
    pad = 0.1 * (lohi[1] - lohi[0])
    edges = np.linspace(lohi[0] - pad, lohi[1] + pad, n_bins + 1)
    observed, _ = np.histogram(Y.ravel(), bins=edges, density=True)

    states = _states_for_ppc(source, n_rep, rng, basis) if n_rep > 0 else []
    rep = np.empty((len(states), n_bins))
    read = np.sqrt(basis.lam)[:, None] * basis.psi.T  # (L, V)
    read_eta = np.sqrt(basis.lam_eta)[:, None] * basis.psi_eta.T
    N = Y.shape[0]
    for k, st in enumerate(states):
        mean = (X @ st.alpha)[:, None] + (X @ st.theta_beta) @ read
        if st.theta_eta.shape[0] == N:
            te = st.theta_eta
        else:  # participant coefficients not stored: draw from their prior
            te = np.sqrt(st.sigma2_eta) * rng.standard_normal((N, basis.L_eta))
        mean = mean + te @ read_eta
        z = rng.standard_normal((N, basis.L))
        y_rep = mean + np.sqrt(st.sigma2_eps) * (z @ read)
        rep[k], _ = np.histogram(y_rep.ravel(), bins=edges, density=True)
    return PPCResult(bin_edges=edges, observed_density=observed, replicated_density=rep)


def _fit_population(tdata, prior, inference, seed, gibbs_iters):
    """Population-term estimates (alpha, theta_beta) from a quick fit."""
    if inference == "vi":
        res = run_vi(tdata, prior, VIConfig(seed=seed))
        return res.state.alpha_mean, res.state.tb_mean
    if inference == "gibbs_short":
        cfg = GibbsConfig(
            n_iter=gibbs_iters, n_burnin=gibbs_iters // 2, n_chains=1, seed=seed
        )
        chains = run_gibbs(tdata, prior, cfg)
        return posterior_mean_coefficients(pool_draws(chains))
    raise ConfigError(f"unknown inference backend {inference!r}")


def loocv_pmse(
    data: Dataset,
    basis_builder,
    L: int,
    inference: str = "vi",
    seed: int = 0,
    gibbs_iters: int = 500,
    max_folds: int | None = None,
    prior: PriorConfig | None = None,
) -> float:
    """Leave-one-participant-out predictive mean squared error.

    Predictions use population terms only (the held-out participant's
    deviation is unknowable). max_folds caps the number of held-out
    participants for large N; folds are chosen deterministically.
    """
    if data.n_participants < 3:
        raise DataError("LOOCV needs at least 3 participants")
    prior = prior or PriorConfig()
    basis = basis_builder(L)
    folds = np.arange(data.n_participants)
    if max_folds is not None and max_folds < folds.size:
        folds = np.sort(
            np.random.default_rng([seed, 0xF01D]).choice(
                folds, size=max_folds, replace=False
            )
        )
    total = 0.0
    for i in folds:
        keep = np.arange(data.n_participants) != i
        train = Dataset(Y=data.Y[keep], X=data.X[keep], domain=data.domain)
        tdata = transform_dataset(train, basis)
        alpha, theta_beta = _fit_population(tdata, prior, inference, seed, gibbs_iters)
        pred = population_prediction(alpha, theta_beta, basis, data.X[i])[0]
        total += float(np.mean((data.Y[i] - pred) ** 2))
    return total / folds.size


@dataclass
class BasisSelection:
    chosen_L: int
    candidates: np.ndarray
    pmse: np.ndarray
    cumulative_variance: np.ndarray  # over the full eigenvalue ladder


def candidate_basis_sizes(eigenvalues, lo: float = 0.80, hi: float = 0.98):
    """Basis sizes whose cumulative eigenvalue share lies in [lo, hi]."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    frac = np.cumsum(lam) / np.sum(lam)
    sizes = np.flatnonzero((frac >= lo) & (frac <= hi)) + 1
    return sizes, frac


def select_num_basis(
    data: Dataset,
    domain: SpatialDomain,
    kernel_cfg: KernelConfig,
    L_max: int,
    inference: str = "vi",
    seed: int = 0,
    n_candidates: int = 8,
    lo: float = 0.80,
    hi: float = 0.98,
    max_folds: int | None = None,
) -> BasisSelection:
    """Pick the basis size by eigenvalue share plus LOOCV grid search.

    Candidates are the sizes explaining between lo and hi of the
    rank-L_max spectrum, subsampled to at most n_candidates points; the
    one minimizing the LOOCV predictive MSE wins (first minimum).
    """
    if L_max > domain.n_voxels:
        raise ConfigError("L_max cannot exceed the number of voxels")
    idx = select_inducing(domain, L_max, seed=seed)
    _, lam = nystrom_decompose(domain, idx, kernel_cfg, L_max)
    sizes, frac = candidate_basis_sizes(lam, lo=lo, hi=hi)
    if sizes.size == 0:
        raise ConfigError(
            "no candidate basis sizes in the cumulative-variance window; "
            "increase L_max"
        )
    if sizes.size > n_candidates:
        pick = np.unique(
            np.round(np.linspace(0, sizes.size - 1, n_candidates)).astype(int)
        )
        sizes = sizes[pick]

    def builder(L):
        return build_basis_system(domain, kernel_cfg, int(L), seed=seed)

    pmse = np.array(
        [
            loocv_pmse(
                data, builder, int(L), inference=inference, seed=seed,
                max_folds=max_folds,
            )
            for L in sizes
        ]
    )
    return BasisSelection(
        chosen_L=int(sizes[int(np.argmin(pmse))]),
        candidates=sizes,
        pmse=pmse,
        cumulative_variance=frac,
    )


def cross_site_pmse(
    datasets: list[Dataset],
    methods=("simba-vi", "glm"),
    kernel_cfg: KernelConfig | None = None,
    L: int = 100,
    seed: int = 0,
    gibbs_cfg: GibbsConfig | None = None,
    prior: PriorConfig | None = None,
) -> dict[str, np.ndarray]:
    """Train-on-one-site, predict-all-sites matrices, one per method.

    Entry (a, b) is the voxel PMSE of predictions for site b from the
    model fitted on site a; the diagonal is in-sample. Population terms
    only are used for prediction.
    """
    if len(datasets) < 2:
        raise DataError("need at least 2 sites")
    V = datasets[0].domain.n_voxels
    P = datasets[0].n_covariates
    for d in datasets[1:]:
        if d.domain.n_voxels != V or not np.allclose(
            d.domain.coords, datasets[0].domain.coords
        ):
            raise DataError("sites must share one spatial domain")
        if d.n_covariates != P:
            raise DataError("sites must share the covariate layout")
    prior = prior or PriorConfig()
    kernel_cfg = kernel_cfg or KernelConfig(length_scale=0.3)
    basis = None
    if any(m.startswith("simba") for m in methods):
        basis = build_basis_system(datasets[0].domain, kernel_cfg, L, seed=seed)
    n = len(datasets)
    out = {m: np.empty((n, n)) for m in methods}
    for a, train in enumerate(datasets):
        fitted = {}
        for m in methods:
            if m == "glm":
                res = glm_fit(train)
                fitted[m] = ("matrix", res.coef)
            elif m == "bml":
                cfg = gibbs_cfg or GibbsConfig(
                    n_iter=700, n_burnin=300, n_chains=1, seed=seed
                )
                res = bml_fit(train, cfg, prior)
                fitted[m] = ("matrix", res.effect_draws.mean(axis=0))
            elif m == "simba-vi":
                tdata = transform_dataset(train, basis)
                res = run_vi(tdata, prior, VIConfig(seed=seed))
                fitted[m] = ("basis", (res.state.alpha_mean, res.state.tb_mean))
            elif m == "simba-gibbs":
                tdata = transform_dataset(train, basis)
                cfg = gibbs_cfg or GibbsConfig(
                    n_iter=1200, n_burnin=400, n_chains=1, seed=seed
                )
                chains = run_gibbs(tdata, prior, cfg)
                fitted[m] = ("basis", posterior_mean_coefficients(pool_draws(chains)))
            else:
                raise ConfigError(f"unknown method {m!r}")
        for b, test in enumerate(datasets):
            for m, (kind, est) in fitted.items():
                if kind == "matrix":
                    pred = test.X @ est
                else:
                    alpha, theta_beta = est
                    pred = population_prediction(alpha, theta_beta, basis, test.X)
                out[m][a, b] = float(np.mean((test.Y - pred) ** 2))
    return out
