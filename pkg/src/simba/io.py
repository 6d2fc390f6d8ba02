"""File formats and rendering: configs, map files, datasets, NIfTI, PPM.

Voxel ordering contract: all flat per-voxel vectors follow row-major
order over the mask grid. Every output file carries the configuration
hash and seed in its header. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .domain import SpatialDomain
from .errors import ConfigError, DataError
from .kernels import KernelConfig
from .model import Dataset

MAP_MAGIC = "# simba-map v1"


# ---------------------------------------------------------------------
# Study configuration (plain-text key=value)
# ---------------------------------------------------------------------

@dataclass
class StudyConfig:
    kernel_family: str = "matern"
    kernel_nu: float = 1.5
    kernel_length_scale: float = 0.08
    kernel_nugget: float = 1e-6
    basis_L: str = "auto"  # "auto" or an integer literal
    basis_L_eta: int = 0  # 0 means floor(0.1 L)
    basis_L_max: int = 260
    inference_backend: str = "simba-gibbs"
    inference_n_iter: int = 5000
    inference_n_burnin: int = 4000
    inference_thin: int = 1
    inference_n_chains: int = 3
    inference_tol: float = 1e-6
    inference_max_iter: int = 500
    prior_A: float = 100.0
    threshold: float = 0.95
    level: float = 0.95
    seed: int = 0
    memory_mode: bool = False
    out_dir: str = "simba_out"

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(
            length_scale=self.kernel_length_scale,
            nu=self.kernel_nu,
            nugget=self.kernel_nugget,
            family=self.kernel_family,
        )

    def basis_size(self) -> int | str:
        if self.basis_L == "auto":
            return "auto"
        try:
            return int(self.basis_L)
        except ValueError as exc:
            raise ConfigError(f"basis.L must be 'auto' or an integer: {self.basis_L!r}") from exc

    def canonical_text(self) -> str:
        items = []
        for f in dc_fields(self):
            key = f.name.replace("_", ".", 1) if "_" in f.name else f.name
            items.append(f"{key}={getattr(self, f.name)}")
        return "\n".join(sorted(items)) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]


_CONFIG_KEYS = {
    "kernel.family": ("kernel_family", str),
    "kernel.nu": ("kernel_nu", float),
    "kernel.length_scale": ("kernel_length_scale", float),
    "kernel.nugget": ("kernel_nugget", float),
    "basis.L": ("basis_L", str),
    "basis.L_eta": ("basis_L_eta", int),
    "basis.L_max": ("basis_L_max", int),
    "inference.backend": ("inference_backend", str),
    "inference.n_iter": ("inference_n_iter", int),
    "inference.n_burnin": ("inference_n_burnin", int),
    "inference.thin": ("inference_thin", int),
    "inference.n_chains": ("inference_n_chains", int),
    "inference.tol": ("inference_tol", float),
    "inference.max_iter": ("inference_max_iter", int),
    "prior.A": ("prior_A", float),
    "threshold": ("threshold", float),
    "level": ("level", float),
    "seed": ("seed", int),
    "memory_mode": ("memory_mode", None),
    "out_dir": ("out_dir", str),
}


def parse_study_config(text: str) -> StudyConfig:
    """Parse key=value lines; fail naming the offending key."""
    cfg = StudyConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        attr, caster = _CONFIG_KEYS[key]
        try:
            if caster is None:  # boolean
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                parsed = value.lower() in ("true", "1")
            else:
                parsed = caster(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
        setattr(cfg, attr, parsed)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: StudyConfig):
    cfg.kernel_config()  # raises ConfigError on bad kernel settings
    cfg.basis_size()
    if cfg.inference_backend not in ("simba-gibbs", "simba-vi", "glm", "bml"):
        raise ConfigError(f"unknown inference.backend {cfg.inference_backend!r}")
    if not 0 < cfg.level < 1:
        raise ConfigError(f"level must be in (0, 1), got {cfg.level}")
    if not 0 <= cfg.threshold <= 1:
        raise ConfigError(f"threshold must be in [0, 1], got {cfg.threshold}")
    if cfg.prior_A <= 0:
        raise ConfigError(f"prior.A must be positive, got {cfg.prior_A}")


def load_study_config(path) -> StudyConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_study_config(text)


# ---------------------------------------------------------------------
# Atomic writes and provenance
# ---------------------------------------------------------------------

def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


# ---------------------------------------------------------------------
# Map files (self-describing text, one field per column)
# ---------------------------------------------------------------------

@dataclass
class MapFileData:
    coords: np.ndarray
    voxel_ids: np.ndarray
    fields: dict[str, np.ndarray]
    covariate: int
    mask_shape: tuple[int, ...] | None
    grid_offsets: np.ndarray | None  # row-major grid offsets, image-backed only
    config_hash: str
    seed: int

    def to_grid(self, field: str, fill: float = np.nan) -> np.ndarray:
        if self.mask_shape is None or self.grid_offsets is None:
            raise DataError("map is not image-backed; no grid to scatter onto")
        grid = np.full(int(np.prod(self.mask_shape)), fill)
        grid[self.grid_offsets] = self.fields[field]
        return grid.reshape(self.mask_shape)


def write_map_file(
    path,
    domain: SpatialDomain,
    fields: dict[str, np.ndarray],
    covariate: int = 0,
    config_hash: str = "none",
    seed: int = 0,
):
    V = domain.n_voxels
    for name, vec in fields.items():
        if np.asarray(vec).shape != (V,):
            raise DataError(f"field {name!r} does not have one value per voxel")
    names = list(fields)
    image_backed = domain.mask_shape is not None and domain.mask_flat_index is not None
    shape = "x".join(str(s) for s in domain.mask_shape) if image_backed else "none"
    geom_cols = ["voxel_id"] + [f"x{k}" for k in range(domain.n_dims)]
    cols = [domain.voxel_ids.astype(np.float64), domain.coords]
    if image_backed:
        geom_cols.append("grid_offset")
        cols.append(domain.mask_flat_index.astype(np.float64)[:, None])
    lines = [
        MAP_MAGIC,
        provenance_line(config_hash, seed),
        f"# V={V} d={domain.n_dims} mask_shape={shape}",
        f"# covariate={covariate}",
        f"# fields={','.join(names)}",
        "# columns=" + ",".join(geom_cols + names),
    ]
    body = np.column_stack(cols + [np.asarray(fields[n], dtype=np.float64) for n in names])
    for row in body:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_map_file(path) -> MapFileData:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read map file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != MAP_MAGIC:
        raise DataError(f"{path}: not a simba map file")
    meta = {}
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        for token in line[1:].strip().split():
            if "=" in token:
                k, v = token.split("=", 1)
                meta[k] = v
    required = ("V", "d", "fields", "columns", "config_hash", "seed")
    for key in required:
        if key not in meta:
            raise DataError(f"{path}: missing header entry {key!r}")
    V, d = int(meta["V"]), int(meta["d"])
    names = meta["fields"].split(",")
    columns = meta["columns"].split(",")
    has_offsets = "grid_offset" in columns
    n_geom = 1 + d + (1 if has_offsets else 0)
    data = np.loadtxt(lines[body_start:], ndmin=2)
    if data.shape != (V, n_geom + len(names)):
        raise DataError(
            f"{path}: body shape {data.shape} does not match header "
            f"(V={V}, d={d}, {len(names)} fields)"
        )
    mask_shape = None
    if meta.get("mask_shape", "none") != "none":
        mask_shape = tuple(int(s) for s in meta["mask_shape"].split("x"))
    return MapFileData(
        coords=data[:, 1 : 1 + d],
        voxel_ids=data[:, 0].astype(int),
        fields={n: data[:, n_geom + k] for k, n in enumerate(names)},
        covariate=int(meta.get("covariate", 0)),
        mask_shape=mask_shape,
        grid_offsets=data[:, 1 + d].astype(int) if has_offsets else None,
        config_hash=meta["config_hash"],
        seed=int(meta["seed"]),
    )


def save_effect_maps(out_dir, maps, domain, config_hash="none", seed=0, prefix="effect"):
    """One map file per covariate; returns the written paths."""
    paths = []
    for m in maps:
        fields = {
            "mean": m.mean,
            "lower": m.lower,
            "upper": m.upper,
            "p_plus": m.p_plus,
            "e_s": m.e_s,
            "active": m.active.astype(np.float64),
        }
        path = Path(out_dir) / f"{prefix}_cov{m.covariate}.map"
        write_map_file(path, domain, fields, covariate=m.covariate,
                       config_hash=config_hash, seed=seed)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------
# Mask grids and tabular data
# ---------------------------------------------------------------------

def read_mask_grid(path) -> np.ndarray:
    """Text mask: rows of integers; 3-d masks use blank-line-separated blocks."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read mask file {path}: {exc}") from exc
    blocks, current = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            if current:
                blocks.append(current)
                current = []
            continue
        try:
            current.append([int(tok) for tok in line.split()])
        except ValueError as exc:
            raise DataError(f"{path}: non-integer mask entry in line {raw!r}") from exc
    if current:
        blocks.append(current)
    if not blocks:
        raise DataError(f"{path}: empty mask file")
    try:
        arrs = [np.asarray(b, dtype=np.int8) for b in blocks]
    except ValueError as exc:
        raise DataError(f"{path}: ragged mask rows") from exc
    if len(arrs) == 1:
        return arrs[0]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise DataError(f"{path}: 3-d mask blocks differ in shape")
    return np.stack(arrs)


def write_mask_grid(path, mask: np.ndarray, config_hash="none", seed=0):
    mask = np.asarray(mask)
    lines = [provenance_line(config_hash, seed)]
    blocks = mask[None] if mask.ndim == 2 else mask
    for b, block in enumerate(blocks):
        if b:
            lines.append("")
        for row in block:
            lines.append(" ".join(str(int(v)) for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_matrix_csv(path, expect_header: bool = True):
    """CSV/TSV numeric matrix; returns (header list or None, array)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in text.splitlines() if r.strip() and not r.startswith("#")]
    if not rows:
        raise DataError(f"{path}: no data rows")
    delim = "\t" if "\t" in rows[0] else ","
    header = None
    start = 0
    if expect_header:
        first = rows[0].split(delim)
        try:
            [float(tok) for tok in first]
        except ValueError:
            header = [tok.strip() for tok in first]
            start = 1
    data = []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        toks = row.split(delim)
        try:
            data.append([float(tok) for tok in toks])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value in data row {lineno}") from exc
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or (header and arr.shape[1] != len(header)):
        raise DataError(f"{path}: inconsistent column counts")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    return header, arr


def write_matrix_csv(path, array, header=None, config_hash="none", seed=0):
    lines = [provenance_line(config_hash, seed)]
    if header is not None:
        lines.append(",".join(header))
    for row in np.atleast_2d(array):
        lines.append(",".join(f"{v:.17g}" for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------

def _load_covariates(path, n_expected) -> np.ndarray:
    header, X = read_matrix_csv(path)
    if X.shape[0] != n_expected:
        raise DataError(
            f"{path}: {X.shape[0]} covariate rows but {n_expected} participants"
        )
    if X.shape[1] == 0 or not np.allclose(X[:, 0], 1.0):
        X = np.column_stack([np.ones(X.shape[0]), X])  # intercept auto-prepended
    return X


def _load_responses_dir(path) -> np.ndarray:
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    if not files:
        raise DataError(f"{path}: no per-participant files")
    rows = []
    for f in files:
        vals = [
            float(tok)
            for tok in f.read_text().split()
            if not tok.startswith("#")
        ]
        rows.append(vals)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise DataError(f"{path}: participant files have differing voxel counts")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite response values")
    return arr


def load_dataset(
    responses,
    covariates,
    geometry,
    nifti: bool = False,
) -> Dataset:
    """Assemble a Dataset from files.

    geometry is a mask grid (text), a coordinates CSV, or (with
    nifti=True) a NIfTI mask volume. responses are a dense N x V CSV, a
    directory of per-participant flat files, or NIfTI volumes (one per
    participant, directory). Covariates are always CSV; an intercept
    column is prepended when absent.
    """
    if nifti:
        mask_vol = read_nifti(geometry)
        mask = mask_vol != 0
        domain = SpatialDomain.from_mask(mask)
        files = sorted(
            p for p in Path(responses).iterdir()
            if p.suffix in (".nii", ".gz") or p.name.endswith(".nii.gz")
        )
        if not files:
            raise DataError(f"{responses}: no NIfTI volumes found")
        rows = []
        for f in files:
            vol = read_nifti(f)
            if vol.shape != mask.shape:
                raise DataError(f"{f}: volume shape {vol.shape} != mask {mask.shape}")
            rows.append(vol[mask])
        Y = np.asarray(rows, dtype=np.float64)
    else:
        geometry = Path(geometry)
        if geometry.suffix in (".csv", ".tsv"):
            _, coords = read_matrix_csv(geometry)
            domain = SpatialDomain.from_points(coords)
        else:
            domain = SpatialDomain.from_mask(read_mask_grid(geometry))
        responses = Path(responses)
        if responses.is_dir():
            Y = _load_responses_dir(responses)
        else:
            _, Y = read_matrix_csv(responses)
        if Y.shape[1] != domain.n_voxels:
            raise DataError(
                f"{responses}: {Y.shape[1]} response voxels but domain has "
                f"{domain.n_voxels}"
            )
    X = _load_covariates(covariates, Y.shape[0])
    return Dataset(Y=Y, X=X, domain=domain)


# ---------------------------------------------------------------------
# Minimal NIfTI-1 reader (feature-flagged adapter)
# ---------------------------------------------------------------------

_NIFTI_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}


def read_nifti(path) -> np.ndarray:
    """Read a NIfTI-1 volume: dims and datatype only, affine ignored.

    Supports int16/float32/float64, plain or gzip. Anything exotic
    raises a DataError naming the unsupported feature.
    """
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read NIfTI file {path}: {exc}") from exc
    if len(raw) < 352:
        raise DataError(f"{path}: too short to be a NIfTI-1 file")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise DataError(f"{path}: bad NIfTI header size")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: unsupported NIfTI magic {magic!r}")
    dim = struct.unpack_from(f"{order}8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 3:
        raise DataError(f"{path}: unsupported NIfTI feature: {ndim}-d data")
    shape = dim[1 : 1 + ndim]
    (datatype,) = struct.unpack_from(f"{order}h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI feature: datatype {datatype}")
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    slope, inter = struct.unpack_from(f"{order}2f", raw, 112)
    offset = int(vox_offset) if magic == b"n+1\x00" else 352
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    vol = data.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        vol = vol * (slope if slope != 0.0 else 1.0) + inter
    return vol


# ---------------------------------------------------------------------
# PPM rendering
# ---------------------------------------------------------------------

def render_ppm(
    path,
    value_grid: np.ndarray,
    alpha_grid: np.ndarray | None = None,
    threshold: float = 0.95,
    vmax: float | None = None,
    config_hash: str = "none",
    seed: int = 0,
):
    """Render a 2-d value grid to a binary PPM (P6) raster.

    Diverging blue-white-red colormap; opacity follows |alpha| with
    suprathreshold cells fully opaque (highlight style). NaN cells are
    background. Raster dimensions equal the grid dimensions.
    """
    grid = np.asarray(value_grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError("value grid must be 2-d; select a slice first")
    h, w = grid.shape
    inside = np.isfinite(grid)
    if vmax is None:
        vmax = float(np.nanmax(np.abs(grid))) if inside.any() else 1.0
        vmax = vmax if vmax > 0 else 1.0
    t = np.clip(np.where(inside, grid, 0.0) / vmax, -1.0, 1.0)
    color = np.empty((h, w, 3))
    pos = np.clip(t, 0.0, None)
    neg = np.clip(-t, 0.0, None)
    color[..., 0] = 1.0 - neg  # red fades for negative values
    color[..., 1] = 1.0 - np.abs(t)
    color[..., 2] = 1.0 - pos  # blue fades for positive values
    if alpha_grid is None:
        alpha = np.ones((h, w))
    else:
        a = np.abs(np.asarray(alpha_grid, dtype=np.float64))
        alpha = np.clip(np.where(np.isfinite(a), a, 0.0), 0.0, 1.0)
        alpha = np.where(alpha > threshold, 1.0, alpha)
    bg_in, bg_out = 0.62, 0.35  # gray levels inside/outside the mask
    out = np.where(
        inside[..., None],
        alpha[..., None] * color + (1.0 - alpha[..., None]) * bg_in,
        bg_out,
    )
    pixels = np.round(out * 255.0).astype(np.uint8)
    header = (
        f"P6\n{provenance_line(config_hash, seed)}\n{w} {h}\n255\n".encode()
    )
    atomic_write(path, header + pixels.tobytes())
