"""Cubic volumes, centered 3D DFTs, filters and rigid resampling.

Arrays are indexed ``data[x, y, z]``. Spectra are stored in centered
(fftshifted) order: index ``i`` along an axis holds frequency
``(i - d // 2) / d`` cycles per voxel. The forward transform is
unnormalized and the inverse carries ``1 / d**3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    HermitianViolation,
    InvalidRadius,
    InvalidTargetSize,
    ResolutionBelowNyquist,
    ShapeMismatch,
    ZeroVariance,
)

# coordinates closer than this to an integer are snapped onto the lattice, so
# lattice-preserving rotations resample exactly
SNAP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Volume:
    """A ``d x d x d`` real scalar field with isotropic voxel size in Å."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ShapeMismatch(f"volume must be cubic, got shape {data.shape}")
        if data.shape[0] < 2:
            raise ShapeMismatch("volume edge must be at least 2 voxels")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def center(self) -> float:
        return (self.d - 1) / 2.0

    def with_data(self, data) -> "Volume":
        return Volume(data, self.voxel_size)


@dataclass(frozen=True, eq=False)
class Spectrum:
    coeffs: np.ndarray
    voxel_size: float = 1.0

    @property
    def d(self) -> int:
        return self.coeffs.shape[0]


def centered_freqs(d: int) -> np.ndarray:
    """1D frequencies (cycles/voxel) in centered order."""
    return (np.arange(d) - d // 2) / d


def freq_grid(d: int):
    f = centered_freqs(d)
    return np.meshgrid(f, f, f, indexing="ij")


def freq_radius(d: int) -> np.ndarray:
    """|k| in cycles/voxel on the centered grid."""
    fx, fy, fz = freq_grid(d)
    return np.sqrt(fx**2 + fy**2 + fz**2)


def hermitian_partner(d: int) -> np.ndarray:
    """Index map ``j -> j'`` with ``f(j') == -f(j)`` (mod 1) on a centered axis."""
    return np.mod(2 * (d // 2) - np.arange(d), d)


def dft3(v: Volume) -> Spectrum:
    return Spectrum(np.fft.fftshift(np.fft.fftn(v.data)), v.voxel_size)


def idft3(s: Spectrum, reference_norm: float | None = None) -> Volume:
    """Inverse transform; the imaginary residual must stay below 1e-6 of the output norm.

    Filters pass the input norm as ``reference_norm`` so an output that
    was filtered down to roundoff is not mistaken for a non-Hermitian one.
    """
    out = np.fft.ifftn(np.fft.ifftshift(s.coeffs))
    norm = np.linalg.norm(out)
    if reference_norm is not None:
        norm = max(norm, 1e-9 * reference_norm)
    resid = np.linalg.norm(out.imag)
    if resid > 1e-6 * max(norm, np.finfo(float).tiny):
        raise HermitianViolation(
            f"imaginary residual {resid:.3g} exceeds 1e-6 of output norm {norm:.3g}"
        )
    return Volume(out.real, s.voxel_size)


def _filtered(v: Volume, weights: np.ndarray) -> Volume:
    return idft3(Spectrum(dft3(v).coeffs * weights, v.voxel_size), np.linalg.norm(v.data))


def lowpass_filter(v: Volume, resolution: float) -> Volume:
    """Zero all coefficients with ``|k| > 1 / resolution`` (k in 1/Å).

    A cutoff exactly at Nyquist is treated as the full passband, so the
    corners of the cube beyond the Nyquist sphere are kept in that case.
    """
    nyquist = 2.0 * v.voxel_size
    if resolution < nyquist * (1 - 1e-12):
        raise ResolutionBelowNyquist(
            f"resolution {resolution} Å is finer than Nyquist {nyquist} Å"
        )
    if resolution <= nyquist * (1 + 1e-12):
        return v.with_data(v.data)
    k = freq_radius(v.d) / v.voxel_size
    return _filtered(v, (k <= 1.0 / resolution).astype(float))


def fourier_crop(v: Volume, d_out: int) -> Volume:
    """Resample to ``d_out`` voxels by keeping the central block of the spectrum.

    The geometric center ``(d - 1) / 2`` maps onto ``(d_out - 1) / 2`` (a
    sub-voxel phase ramp is applied before cropping) and the mean is kept.
    """
    d = v.d
    if not 2 <= d_out <= d:
        raise InvalidTargetSize(f"d_out must lie in [2, {d}], got {d_out}")
    if d_out == d:
        return v.with_data(v.data)
    ratio = d / d_out
    shift = (ratio - 1.0) / 2.0
    f = centered_freqs(d)
    ramp = np.exp(2j * np.pi * f * shift)
    coeffs = dft3(v).coeffs * ramp[:, None, None] * ramp[None, :, None] * ramp[None, None, :]
    start = d // 2 - d_out // 2
    block = coeffs[start:start + d_out, start:start + d_out, start:start + d_out]
    p = hermitian_partner(d_out)
    block = 0.5 * (block + np.conj(block[np.ix_(p, p, p)]))
    out = np.fft.ifftn(np.fft.ifftshift(block)).real * (d_out / d) ** 3
    return Volume(out, v.voxel_size * ratio)


def standardize(v: Volume) -> Volume:
    mean = v.data.mean()
    std = v.data.std()
    if std <= 1e-12 * max(1.0, float(np.abs(v.data).max())):
        raise ZeroVariance("cannot standardize a volume with zero variance")
    return v.with_data((v.data - mean) / std)


def spherical_mask_weights(d: int, radius: float, edge_width: float = 3.0) -> np.ndarray:
    if not 0 < radius <= d / 2:
        raise InvalidRadius(f"radius must lie in (0, {d / 2}], got {radius}")
    if edge_width < 0:
        raise InvalidRadius(f"edge_width must be non-negative, got {edge_width}")
    c = (d - 1) / 2.0
    g = np.arange(d) - c
    r = np.sqrt(g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2)
    inner = radius - edge_width
    w = np.zeros_like(r)
    w[r <= inner] = 1.0
    if edge_width > 0:
        band = (r > inner) & (r < radius)
        w[band] = 0.5 * (1.0 + np.cos(np.pi * (r[band] - inner) / edge_width))
    return w


def spherical_mask(v: Volume, radius: float, edge_width: float = 3.0) -> Volume:
    """Multiply by a raised-cosine soft sphere centered at ``(d - 1) / 2``."""
    return v.with_data(v.data * spherical_mask_weights(v.d, radius, edge_width))


def trilinear_sample(v: Volume, p) -> float:
    """Trilinear interpolation at one point; 0 outside ``[0, d - 1]^3``."""
    p = np.asarray(p, dtype=float)
    d = v.d
    if np.any(p < 0) or np.any(p > d - 1):
        return 0.0
    i0 = np.minimum(np.floor(p).astype(int), d - 2)
    t = p - i0
    out = 0.0
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, t, 1.0 - t))
        out += w * v.data[tuple(i0 + c)]
    return float(out)


def trilinear_stencil(coords: np.ndarray, d: int):
    """Corner indices and weights for trilinear sampling of a ``d^3`` grid.

    ``coords`` has shape ``(..., 3)``. Returns ``(flat_idx, weights, valid,
    frac, base)`` where ``flat_idx`` and ``weights`` have shape ``(..., 8)``
    (corners ordered as ``np.ndindex(2, 2, 2)``), weights are zero for points
    outside ``[0, d - 1]^3``, ``frac`` is the in-cell offset and ``base`` the
    lower corner.
    """
    valid = np.all((coords >= 0) & (coords <= d - 1), axis=-1)
    base = np.clip(np.floor(coords), 0, d - 2).astype(np.int64)
    frac = coords - base
    tx, ty, tz = frac[..., 0], frac[..., 1], frac[..., 2]
    bx, by, bz = base[..., 0], base[..., 1], base[..., 2]
    idx = []
    w = []
    for cx, cy, cz in np.ndindex(2, 2, 2):
        idx.append(((bx + cx) * d + (by + cy)) * d + (bz + cz))
        w.append(
            (tx if cx else 1 - tx) * (ty if cy else 1 - ty) * (tz if cz else 1 - tz)
        )
    idx = np.stack(idx, axis=-1)
    w = np.stack(w, axis=-1) * valid[..., None]
    return idx, w, valid, frac, base


def grid_points(d: int) -> np.ndarray:
    """All voxel coordinates, shape ``(d**3, 3)``, C order over ``[x, y, z]``."""
    g = np.arange(d, dtype=float)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def snap(coords: np.ndarray) -> np.ndarray:
    r = np.round(coords)
    return np.where(np.abs(coords - r) < SNAP_TOL, r, coords)


def rigid_source_coords(rotation, translation, d: int) -> np.ndarray:
    """Source coordinates ``T^-1(x)`` for every output voxel ``x``.

    ``T(p) = R (p - c) + c + t`` with ``c = (d - 1) / 2``.
    """
    c = (d - 1) / 2.0
    x = grid_points(d) - c - np.asarray(translation, dtype=float)
    return snap(x @ np.asarray(rotation, dtype=float) + c)


def resample_rigid(v: Volume, t) -> Volume:
    """Apply a rigid transform (rotate about the center, then translate)."""
    coords = rigid_source_coords(t.rotation, t.translation, v.d)
    out = map_coordinates(v.data, coords.T, order=1, mode="constant", cval=0.0)
    return v.with_data(out.reshape(v.data.shape))
