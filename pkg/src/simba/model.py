"""Datasets, parameter state, priors, and identifiability centering.

The reduced model works entirely on the projected responses
Y_tilde = Y @ Phi, so nothing voxel-sized is touched during inference.
Both inference backends share the ParameterState layout and the
post-hoc centering that makes the global/spatial split identifiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSystem
from .domain import SpatialDomain
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Dataset:
    """Observed images Y (N x V) with covariates X (N x (J+1)).

    The first covariate column must be the all-ones intercept.
    """

    Y: np.ndarray
    X: np.ndarray
    domain: SpatialDomain

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=np.float64)
        X = np.asarray(self.X, dtype=np.float64)
        if Y.ndim != 2 or X.ndim != 2:
            raise DataError("Y and X must be 2-d arrays")
        if Y.shape[0] != X.shape[0]:
            raise DataError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
        if Y.shape[0] < 2:
            raise DataError("need at least 2 participants")
        if Y.shape[1] != self.domain.n_voxels:
            raise DataError(
                f"Y has {Y.shape[1]} voxels but domain has {self.domain.n_voxels}"
            )
        if not np.all(np.isfinite(Y)) or not np.all(np.isfinite(X)):
            raise DataError("non-finite entries in Y or X")
        if not np.allclose(X[:, 0], 1.0):
            raise DataError("first covariate column must be the all-ones intercept")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def n_participants(self) -> int:
        return self.Y.shape[0]

    @property
    def n_covariates(self) -> int:
        """Number of covariate columns including the intercept (J+1)."""
        return self.X.shape[1]


@dataclass(frozen=True)
class TransformedDataset:
    """Projected responses Y_tilde (N x L) plus shared covariates.

    Y_voxel keeps the original voxel-space responses only when the
    caller needs them later (posterior predictive checks, LOOCV in
    voxel space); dropping them preserves the O(VL) memory profile.
    """

    Y_tilde: np.ndarray
    X: np.ndarray
    basis: BasisSystem
    Y_voxel: np.ndarray | None = None

    def __post_init__(self):
        if self.Y_tilde.shape[1] != self.basis.L:
            raise DataError("Y_tilde column count does not match basis size")
        if self.Y_tilde.shape[0] != self.X.shape[0]:
            raise DataError("Y_tilde and X row counts differ")

    @property
    def n_participants(self) -> int:
        return self.Y_tilde.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class PriorConfig:
    """Half-Cauchy scale for all standard deviations, via IG mixtures.

    Every variance gets sigma^2 ~ IG(1/2, 1/a) with a ~ IG(1/2, 1/A^2),
    which matches a half-Cauchy(A) prior on sigma while keeping all
    conditionals conjugate.
    """

    A: float = 100.0

    def __post_init__(self):
        if not (self.A > 0):
            raise ConfigError(f"half-Cauchy scale A must be positive, got {self.A}")


@dataclass
class ParameterState:
    """One full draw (or one set of point values) of all model parameters."""

    alpha: np.ndarray  # (J+1,)
    theta_beta: np.ndarray  # (J+1, L)
    theta_eta: np.ndarray  # (N, L_eta)
    sigma2_alpha: float = 1.0
    sigma2_beta: float = 1.0
    sigma2_eta: float = 1.0
    sigma2_eps: float = 1.0
    a_alpha: float = 1.0
    a_beta: float = 1.0
    a_eta: float = 1.0
    a_eps: float = 1.0

    def validate(self):
        for name in ("sigma2_alpha", "sigma2_beta", "sigma2_eta", "sigma2_eps",
                     "a_alpha", "a_beta", "a_eta", "a_eps"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise DataError(f"{name} must be strictly positive and finite, got {v}")

    def copy(self) -> "ParameterState":
        return ParameterState(
            alpha=self.alpha.copy(),
            theta_beta=self.theta_beta.copy(),
            theta_eta=self.theta_eta.copy(),
            sigma2_alpha=self.sigma2_alpha,
            sigma2_beta=self.sigma2_beta,
            sigma2_eta=self.sigma2_eta,
            sigma2_eps=self.sigma2_eps,
            a_alpha=self.a_alpha,
            a_beta=self.a_beta,
            a_eta=self.a_eta,
            a_eps=self.a_eps,
        )


def transform_dataset(
    data: Dataset, basis: BasisSystem, keep_voxel_data: bool = False
) -> TransformedDataset:
    """Project responses into the reduced basis: row i becomes y_i @ Phi."""
    if data.domain.n_voxels != basis.n_voxels:
        raise DataError("dataset domain and basis voxel counts differ")
    return TransformedDataset(
        Y_tilde=data.Y @ basis.phi,
        X=data.X,
        basis=basis,
        Y_voxel=data.Y if keep_voxel_data else None,
    )


def init_state(tdata: TransformedDataset, prior: PriorConfig, seed: int = 0) -> ParameterState:
    """Random starting point: small-scale normal coefficients, unit variances."""
    rng = np.random.default_rng([seed, 0xA11])
    N = tdata.n_participants
    P = tdata.n_covariates
    L = tdata.basis.L
    L_eta = tdata.basis.L_eta
    return ParameterState(
        alpha=0.1 * rng.standard_normal(P),
        theta_beta=0.1 * rng.standard_normal((P, L)),
        theta_eta=0.1 * rng.standard_normal((N, L_eta)),
    )


def apply_identifiability(state: ParameterState, basis: BasisSystem) -> ParameterState:
    """Center a draw so the global/spatial decomposition is identifiable.

    For each covariate the voxel mean of the reconstructed spatial map
    moves into the global effect, and theta_beta is shifted along the
    projected all-ones direction with the scale chosen so the stored
    coefficients reconstruct an exactly mean-zero map. Participant
    coefficients are centered across participants. The combined effect
    alpha_j + beta_j(s_v) is preserved exactly when the constant vector
    lies in the basis span, and up to the span residual otherwise.

    Works entirely in coefficient space (no V-sized allocations) and is
    idempotent.
    """
    V = basis.n_voxels
    w = basis.ones_phi  # 1_V^T Psi Lambda^{-1/2}
    # 1_V^T Psi Lambda^{1/2} = ones_phi * Lambda ; ||Psi^T 1_V||^2 = sum ones_phi^2 * Lambda
    ones_psi_lam = w * basis.lam
    ones_span_sq = float(np.sum(w * w * basis.lam))

    theta_beta = state.theta_beta.copy()
    alpha = state.alpha.copy()
    m = (theta_beta @ ones_psi_lam) / V  # voxel mean of each beta_j map
    alpha += m
    if ones_span_sq > 0:
        c = m * V / ones_span_sq
        theta_beta -= np.outer(c, w)

    theta_eta = state.theta_eta - state.theta_eta.mean(axis=0, keepdims=True)
    return replace(state, alpha=alpha, theta_beta=theta_beta, theta_eta=theta_eta)
