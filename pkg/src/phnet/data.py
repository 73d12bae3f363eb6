"""Synthetic anisotropic volumes, raw+header file I/O, spacing resampling,
and patch sampling.

Conventions: in-memory grids are (D, H, W) — depth/through-plane axis first —
while ``spacing_mm`` is always quoted (x, y, z) as in scan metadata, so
``spacing_mm[2]`` is the through-plane spacing of grid axis 0.  On disk a
volume is a pair ``<base>.hdr`` (JSON: dims [x,y,z], spacing_mm [x,y,z],
dtype, byte_order) plus ``<base>.raw`` (contiguous little-endian scalars,
x fastest — exactly the C-order bytes of the (D, H, W) grid).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "LabelVolume",
    "SyntheticSpec",
    "generate_synthetic_case",
    "resample_to_spacing",
    "resample_to_grid",
    "sample_patches",
    "read_volume",
    "write_volume",
    "write_manifest",
    "read_manifest",
    "zscore",
]


@dataclass
class Volume:
    grid: np.ndarray          # (D, H, W) float32
    spacing_mm: tuple         # (x, y, z)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_spacing(self.spacing_mm)
        if self.grid.ndim != 3:
            raise ValueError(f"volume grid must be 3D, got shape {self.grid.shape}")
        if not np.isfinite(self.grid).all():
            raise ValueError("volume grid contains non-finite values")


@dataclass
class LabelVolume:
    grid: np.ndarray          # (D, H, W) uint8 class ids
    spacing_mm: tuple         # (x, y, z)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_spacing(self.spacing_mm)
        if self.grid.ndim != 3:
            raise ValueError(f"label grid must be 3D, got shape {self.grid.shape}")


def _check_spacing(spacing):
    if len(spacing) != 3 or any(s <= 0 or not math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals (x,y,z), got {spacing}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic case: per-class ellipsoidal blobs with
    class-specific mean intensity on a noisy background.  Blob radii are in
    millimetres, so anisotropic spacing renders them as voxel-space
    ellipsoids.  Later classes overwrite earlier ones where blobs overlap."""

    shape: tuple = (32, 64, 64)               # (D, H, W)
    spacing_mm: tuple = (1.0, 1.0, 4.0)       # (x, y, z)
    num_classes: int = 2
    blobs_per_class: tuple = (1, 3)           # inclusive count range
    radius_range_mm: tuple = (10.0, 16.0)
    intensity_means: tuple | None = None      # per class incl. background
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.radius_range_mm[0] <= 0:
            raise ValueError(f"radii must be positive, got {self.radius_range_mm}")
        _check_spacing(self.spacing_mm)

    def means(self):
        if self.intensity_means is not None:
            if len(self.intensity_means) != self.num_classes:
                raise ValueError("need one intensity mean per class")
            return tuple(self.intensity_means)
        return tuple(float(c) for c in range(self.num_classes))


def generate_synthetic_case(spec):
    """Deterministic (Volume, LabelVolume) pair for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    D, H, W = spec.shape
    sx, sy, sz = spec.spacing_mm
    # voxel center coordinates in mm, grid axes (z, y, x)
    zc = (np.arange(D) + 0.5) * sz
    yc = (np.arange(H) + 0.5) * sy
    xc = (np.arange(W) + 0.5) * sx
    extent = (D * sz, H * sy, W * sx)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    r_lo, r_hi = spec.radius_range_mm
    for cls in range(1, spec.num_classes):
        count = int(rng.integers(spec.blobs_per_class[0], spec.blobs_per_class[1] + 1))
        for _ in range(count):
            radii = rng.uniform(r_lo, r_hi, size=3)  # (z, y, x) mm
            if any(2 * r > e for r, e in zip(radii, extent)):
                raise ValueError(
                    f"class {cls}: blob radii {tuple(radii)} mm do not fit the "
                    f"volume extent {extent} mm")
            center = tuple(rng.uniform(r, e - r) for r, e in zip(radii, extent))
            dist2 = (((zc - center[0]) / radii[0])[:, None, None] ** 2
                     + ((yc - center[1]) / radii[1])[None, :, None] ** 2
                     + ((xc - center[2]) / radii[2])[None, None, :] ** 2)
            labels[dist2 <= 1.0] = cls

    means = spec.means()
    image = np.zeros(spec.shape, dtype=np.float64)
    for cls in range(spec.num_classes):
        image[labels == cls] = means[cls]
    image += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return (Volume(image.astype(np.float32), spec.spacing_mm),
            LabelVolume(labels, spec.spacing_mm))


def zscore(grid):
    """Per-volume z-score normalization (population std, eps-guarded)."""
    g = np.asarray(grid, dtype=np.float32)
    std = float(g.std())
    return (g - float(g.mean())) / (std if std > 1e-8 else 1.0)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _axis_map(n_src, n_dst, s_src, s_dst):
    """Center-aligned source coordinates of each destination voxel center."""
    return (np.arange(n_dst) + 0.5) * (s_dst / s_src) - 0.5


def resample_to_grid(v, dst_dims, dst_spacing):
    """Resample onto an explicit (D,H,W) destination grid, center-aligned,
    clamp-to-edge: trilinear for images, nearest-neighbor for labels."""
    if any(n < 1 for n in dst_dims):
        raise ValueError(f"degenerate output dims {tuple(dst_dims)}")
    _check_spacing(dst_spacing)
    grid = v.grid
    # per grid axis (z, y, x): spacing index 2, 1, 0
    maps = [_axis_map(grid.shape[a], dst_dims[a], v.spacing_mm[2 - a], dst_spacing[2 - a])
            for a in range(3)]
    if isinstance(v, LabelVolume):
        idx = [np.clip(np.floor(m + 0.5).astype(np.int64), 0, grid.shape[a] - 1)
               for a, m in enumerate(maps)]
        return LabelVolume(grid[np.ix_(*idx)], dst_spacing)

    lo, frac = [], []
    for a, m in enumerate(maps):
        i0 = np.floor(m).astype(np.int64)
        frac.append(m - i0)
        lo.append(i0)
    out = np.zeros(tuple(dst_dims), dtype=np.float64)
    src = grid.astype(np.float64)
    for bz in (0, 1):
        wz = (1.0 - frac[0]) if bz == 0 else frac[0]
        iz = np.clip(lo[0] + bz, 0, grid.shape[0] - 1)
        for by in (0, 1):
            wy = (1.0 - frac[1]) if by == 0 else frac[1]
            iy = np.clip(lo[1] + by, 0, grid.shape[1] - 1)
            for bx in (0, 1):
                wx = (1.0 - frac[2]) if bx == 0 else frac[2]
                ix = np.clip(lo[2] + bx, 0, grid.shape[2] - 1)
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * src[np.ix_(iz, iy, ix)]
    return Volume(out.astype(np.float32), dst_spacing)


def resample_to_spacing(v, target_spacing):
    """Resample to a new (x,y,z) spacing; output dims round(n * s/t) per axis."""
    _check_spacing(target_spacing)
    dims = tuple(int(round(v.grid.shape[a] * v.spacing_mm[2 - a] / target_spacing[2 - a]))
                 for a in range(3))
    if any(n < 1 for n in dims):
        raise ValueError(
            f"degenerate output dims {dims} for target spacing {tuple(target_spacing)}")
    return resample_to_grid(v, dims, tuple(target_spacing))


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

def sample_patches(v, labels, patch_size, n, fg_bias, rng):
    """Sample ``n`` aligned (image, label) patches of grid size (D,H,W)
    ``patch_size``.  With probability ``fg_bias`` the patch is centered on a
    uniformly chosen foreground voxel (when any exists), then clamped to fit
    — so the chosen voxel always stays inside the patch."""
    grid, lab = v.grid, labels.grid
    if grid.shape != lab.shape:
        raise ValueError(f"image {grid.shape} and label {lab.shape} shapes differ")
    ps = tuple(int(p) for p in patch_size)
    if any(p > s for p, s in zip(ps, grid.shape)):
        raise ValueError(f"patch {ps} larger than volume {grid.shape}")
    fg = np.argwhere(lab > 0)
    out = []
    for _ in range(n):
        if len(fg) and rng.random() < fg_bias:
            center = fg[rng.integers(len(fg))]
        else:
            center = [rng.integers(s) for s in grid.shape]
        start = [int(np.clip(c - p // 2, 0, s - p))
                 for c, p, s in zip(center, ps, grid.shape)]
        sl = tuple(slice(st, st + p) for st, p in zip(start, ps))
        out.append((grid[sl].copy(), lab[sl].copy()))
    return out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_volume(base_path, v):
    """Write ``<base>.hdr`` + ``<base>.raw``; images as f32, labels as u8."""
    base = str(base_path)
    dtype_name = "u8" if isinstance(v, LabelVolume) else "f32"
    grid = np.ascontiguousarray(v.grid, dtype=_DTYPES[dtype_name])
    d, h, w = grid.shape
    header = {"dims": [w, h, d],
              "spacing_mm": list(v.spacing_mm),
              "dtype": dtype_name,
              "byte_order": "little"}
    with open(base + ".hdr", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1)
        f.write("\n")
    with open(base + ".raw", "wb") as f:
        f.write(grid.tobytes())


def read_volume(base_path):
    """Read a volume pair; returns Volume (f32) or LabelVolume (u8)."""
    base = str(base_path)
    with open(base + ".hdr", "r", encoding="utf-8") as f:
        header = json.load(f)
    for key in ("dims", "spacing_mm", "dtype", "byte_order"):
        if key not in header:
            raise ValueError(f"{base}.hdr: missing field {key!r}")
    if header["byte_order"] != "little":
        raise ValueError(f"{base}.hdr: unsupported byte_order {header['byte_order']!r}")
    if header["dtype"] not in _DTYPES:
        raise ValueError(f"{base}.hdr: unknown dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(n) < 1 for n in dims):
        raise ValueError(f"{base}.hdr: dims must be 3 positive ints, got {dims}")
    w, h, d = (int(n) for n in dims)
    dt = _DTYPES[header["dtype"]]
    with open(base + ".raw", "rb") as f:
        payload = f.read()
    if len(payload) != w * h * d * dt.itemsize:
        raise ValueError(
            f"{base}.raw: payload is {len(payload)} bytes, dims {dims} require "
            f"{w * h * d * dt.itemsize}")
    grid = np.frombuffer(payload, dtype=dt).reshape(d, h, w)
    spacing = tuple(header["spacing_mm"])
    if header["dtype"] == "u8":
        return LabelVolume(grid.copy(), spacing)
    return Volume(grid.copy(), spacing)


def write_manifest(path, cases, extra=None):
    """Dataset manifest: case ids with split assignment plus dataset-level
    fields (num_classes, spacing, shape...)."""
    doc = {"cases": [{"id": cid, "split": split} for cid, split in cases]}
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "cases" not in doc:
        raise ValueError(f"{path}: manifest has no 'cases' field")
    return doc
