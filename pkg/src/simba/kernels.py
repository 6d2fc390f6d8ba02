"""Matern covariance kernels and Gram matrices.

Only the half-integer smoothness values 0.5, 1.5, 2.5 are supported,
which all have closed forms and cover the usual range from rough
(exponential) to fairly smooth fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

_SUPPORTED_NU = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class KernelConfig:
    """Matern kernel parameters.

    length_scale is in normalized coordinate units (domains live in
    [0, 1]^d). The nugget is added to the inducing-block diagonal
    before the Cholesky factorization, not to kernel evaluations.
    """

    length_scale: float
    nu: float = 1.5
    nugget: float = 1e-6
    family: str = "matern"

    def __post_init__(self):
        if self.family != "matern":
            raise ConfigError(f"unsupported kernel family: {self.family!r}")
        if not (self.length_scale > 0):
            raise ConfigError(f"length_scale must be positive, got {self.length_scale}")
        if self.nu not in _SUPPORTED_NU:
            raise ConfigError(
                f"nu must be one of {_SUPPORTED_NU} (closed-form Matern), got {self.nu}"
            )
        if self.nugget < 0:
            raise ConfigError(f"nugget must be nonnegative, got {self.nugget}")


def matern_kernel(r, cfg: KernelConfig):
    """Evaluate the Matern correlation at distance(s) r >= 0.

    k(0) = 1 and k is monotone nonincreasing in r.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise DataError("distances must be nonnegative")
    s = r / cfg.length_scale
    if cfg.nu == 0.5:
        out = np.exp(-s)
    elif cfg.nu == 1.5:
        t = np.sqrt(3.0) * s
        out = (1.0 + t) * np.exp(-t)
    else:  # nu == 2.5
        t = np.sqrt(5.0) * s
        out = (1.0 + t + t * t / 3.0) * np.exp(-t)
    return out if out.ndim else float(out)


def gram(a: np.ndarray, b: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Kernel Gram matrix between two coordinate sets (M x P)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DataError(
            f"coordinate dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    # pairwise Euclidean distances without forming (M, P, d) intermediates
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return matern_kernel(np.sqrt(sq), cfg)
