"""Low-rank spectral basis construction via the Nystrom method.

Pipeline: pick L inducing points, factor the inducing Gram block with a
jittered Cholesky, whiten the cross-covariance, take a thin SVD, and
keep the squared singular values as eigenvalues. The resulting (Psi,
Lambda) pair approximates the full Gram matrix as Psi @ diag(Lambda) @ Psi.T
and feeds the projection matrices used by the reduced model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .domain import SpatialDomain
from .errors import ConfigError, DecompositionError
from .kernels import KernelConfig, gram

_RANK_TOL = 1e-12
_MAX_NUGGET = 1e-4


@dataclass(frozen=True)
class BasisSystem:
    """Spectral objects and projections of the reduced model space.

    Psi (V x L) is orthonormal, Lambda positive nonincreasing. Phi
    projects voxel vectors into the whitened basis; Phi_eta maps the
    participant-effect basis into the main one; ones_phi is the
    projection of the all-ones voxel vector (row vector, length L).
    """

    psi: np.ndarray
    lam: np.ndarray
    psi_eta: np.ndarray
    lam_eta: np.ndarray
    phi: np.ndarray
    phi_eta: np.ndarray
    ones_phi: np.ndarray
    inducing_indices: np.ndarray
    inducing_indices_eta: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.psi.shape[0]

    @property
    def L(self) -> int:
        return self.psi.shape[1]

    @property
    def L_eta(self) -> int:
        return self.psi_eta.shape[1]


def select_inducing(
    domain: SpatialDomain,
    L: int,
    strategy: str = "farthest_point",
    seed: int = 0,
) -> np.ndarray:
    """Choose L distinct voxel indices as inducing points.

    farthest_point starts at the voxel nearest the coordinate centroid
    and greedily adds the voxel maximizing the minimum distance to the
    already-chosen set (ties broken by lowest index), which makes the
    selections nested in L. uniform_random draws without replacement.
    """
    V = domain.n_voxels
    if not 1 <= L <= V:
        raise ConfigError(f"need 1 <= L <= V, got L={L}, V={V}")
    if strategy == "uniform_random":
        rng = np.random.default_rng([seed, 0x1D])
        return np.sort(rng.choice(V, size=L, replace=False))
    if strategy != "farthest_point":
        raise ConfigError(f"unknown inducing strategy: {strategy!r}")

    coords = domain.coords
    centroid = coords.mean(axis=0)
    start = int(np.argmin(np.sum((coords - centroid) ** 2, axis=1)))
    chosen = np.empty(L, dtype=np.int64)
    chosen[0] = start
    # min squared distance from every voxel to the chosen set
    min_d2 = np.sum((coords - coords[start]) ** 2, axis=1)
    for k in range(1, L):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        chosen[k] = nxt
        d2 = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def nystrom_decompose(
    domain: SpatialDomain,
    inducing: np.ndarray,
    cfg: KernelConfig,
    L: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Rank-L spectral approximation (Psi, Lambda) of the domain Gram matrix.

    Directions with eigenvalue below 1e-12 * max are dropped (with a
    warning), so the returned rank can be smaller than L. The inducing
    block gets an escalating diagonal jitter before Cholesky; if it is
    still not positive definite at 1e-4 the decomposition fails.
    """
    inducing = np.asarray(inducing, dtype=np.int64)
    if inducing.shape[0] != L:
        raise ConfigError(f"inducing set size {inducing.shape[0]} != L={L}")
    pts = domain.coords[inducing]
    K_L = gram(pts, pts, cfg)
    K_VL = gram(domain.coords, pts, cfg)

    nugget = max(cfg.nugget, 1e-12)
    R = None
    while nugget <= _MAX_NUGGET:
        try:
            R = cholesky(K_L + nugget * np.eye(L), lower=True)
            break
        except np.linalg.LinAlgError:
            nugget *= 10.0
    if R is None:
        raise DecompositionError(
            f"inducing block not positive definite up to jitter {_MAX_NUGGET}; "
            f"inducing indices: {inducing.tolist()}"
        )

    # K_tilde = K_VL @ R^{-T}; thin SVD gives Psi and singular values
    K_tilde = solve_triangular(R, K_VL.T, lower=True).T
    psi, d, _ = np.linalg.svd(K_tilde, full_matrices=False)
    lam = d * d
    keep = lam >= _RANK_TOL * lam[0]
    if not keep.all():
        kept = int(keep.sum())
        warnings.warn(
            f"nystrom rank reduced from {L} to {kept} (near-zero eigenvalues dropped)",
            RuntimeWarning,
            stacklevel=2,
        )
        psi, lam = psi[:, keep], lam[keep]
    # fix SVD sign ambiguity: largest-magnitude entry of each column positive
    flip = psi[np.argmax(np.abs(psi), axis=0), np.arange(psi.shape[1])] < 0
    psi[:, flip] *= -1.0
    return psi, lam


def build_basis_system(
    domain: SpatialDomain,
    cfg: KernelConfig,
    L: int,
    L_eta: int | None = None,
    seed: int = 0,
    strategy: str = "farthest_point",
) -> BasisSystem:
    """Assemble the full basis system for both spatial scales.

    The participant-effect basis uses its own, independently selected
    set of L_eta inducing points (default L_eta = floor(0.1 L)). Seeds
    for the two selections are derived from the base seed so the pair
    is reproducible as a unit.
    """
    if L_eta is None:
        L_eta = max(1, int(0.1 * L))
    if not 1 <= L_eta <= L <= domain.n_voxels:
        raise ConfigError(
            f"need 1 <= L_eta <= L <= V, got L_eta={L_eta}, L={L}, V={domain.n_voxels}"
        )
    idx = select_inducing(domain, L, strategy=strategy, seed=seed)
    idx_eta = select_inducing(domain, L_eta, strategy=strategy, seed=seed + 1)
    psi, lam = nystrom_decompose(domain, idx, cfg, L)
    psi_eta, lam_eta = nystrom_decompose(domain, idx_eta, cfg, L_eta)

    phi = psi / np.sqrt(lam)[None, :]
    # Phi_eta = Lambda_eta^{1/2} Psi_eta^T Psi Lambda^{-1/2}
    phi_eta = np.sqrt(lam_eta)[:, None] * (psi_eta.T @ phi)
    ones_phi = phi.sum(axis=0)
    return BasisSystem(
        psi=psi,
        lam=lam,
        psi_eta=psi_eta,
        lam_eta=lam_eta,
        phi=phi,
        phi_eta=phi_eta,
        ones_phi=ones_phi,
        inducing_indices=idx,
        inducing_indices_eta=idx_eta,
    )
