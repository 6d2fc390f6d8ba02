"""Spatial domains: voxel coordinates, mask geometry, and voxel indexing.

A domain is a flat list of d-dimensional locations. Image-backed domains
additionally remember the integer grid shape and which grid cells are
inside the mask, so flat voxel vectors can be mapped back onto the grid.
Voxel order for image-backed domains is row-major over the mask grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class SpatialDomain:
    """Coordinates and indexing for a set of spatial locations.

    coords are normalized so every component lies in [0, 1]; a single
    scale (the largest extent over dimensions) is used for all axes so
    the geometry keeps its aspect ratio and the kernel stays isotropic
    in the original units.
    """

    coords: np.ndarray  # (V, d) normalized coordinates
    mask_shape: tuple[int, ...] | None = None
    mask_flat_index: np.ndarray | None = None  # row-major grid offsets of in-mask cells
    voxel_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2:
            raise DataError("coords must be a 2-d array of shape (V, d)")
        if not np.all(np.isfinite(coords)):
            raise DataError("coords contain non-finite values")
        if coords.shape[0] == 0:
            raise DataError("domain has no locations")
        uniq = np.unique(coords, axis=0)
        if uniq.shape[0] != coords.shape[0]:
            raise DataError("duplicate coordinate rows in domain")
        if coords.min() < -1e-12 or coords.max() > 1 + 1e-12:
            raise DataError("coords must be normalized to [0, 1]; use from_points/from_mask")
        object.__setattr__(self, "coords", coords)
        if self.voxel_ids is None:
            object.__setattr__(self, "voxel_ids", np.arange(coords.shape[0]))

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def n_dims(self) -> int:
        return self.coords.shape[1]

    @classmethod
    def from_points(cls, points: np.ndarray) -> "SpatialDomain":
        """Build a domain from raw coordinates, normalizing to [0, 1]."""
        return cls(coords=normalize_coords(points))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SpatialDomain":
        """Build a domain from a 2-d/3-d binary mask grid.

        In-mask cells are enumerated in row-major order; their integer
        grid indices become the coordinates (then normalized).
        """
        mask = np.asarray(mask)
        if mask.ndim not in (2, 3):
            raise DataError(f"mask must be 2-d or 3-d, got {mask.ndim}-d")
        inside = mask.astype(bool)
        if not inside.any():
            raise DataError("mask has no in-mask voxels")
        idx = np.argwhere(inside).astype(np.float64)  # row-major by construction
        flat = np.flatnonzero(inside.ravel(order="C"))
        return cls(
            coords=normalize_coords(idx),
            mask_shape=tuple(int(s) for s in mask.shape),
            mask_flat_index=flat,
        )

    def to_grid(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Scatter a flat per-voxel vector back onto the mask grid."""
        if self.mask_shape is None or self.mask_flat_index is None:
            raise DataError("domain is not image-backed; no grid to scatter onto")
        values = np.asarray(values)
        if values.shape[-1] != self.n_voxels:
            raise DataError("value vector length does not match voxel count")
        grid = np.full(int(np.prod(self.mask_shape)), fill, dtype=np.float64)
        grid[self.mask_flat_index] = values
        return grid.reshape(self.mask_shape)


def normalize_coords(points: np.ndarray) -> np.ndarray:
    """Shift to the origin and scale by the largest extent across axes."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError("points must be a 2-d array of shape (V, d)")
    if not np.all(np.isfinite(pts)):
        raise DataError("points contain non-finite values")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if extent == 0.0:
        return np.zeros_like(pts)
    return (pts - lo) / extent
