"""Subtomogram preprocessing: low-pass, Fourier crop, standardize, soft mask.

The order is fixed. Standardization happens before masking and is not
repeated afterwards, so the output mean is close to, but not exactly, zero.
Applying the chain twice therefore re-standardizes the masked volume:
``preprocess(preprocess(v)) == mask(standardize(lowpass(preprocess(v))))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, fourier_crop, lowpass_filter, spherical_mask, standardize


@dataclass(frozen=True)
class PreprocessConfig:
    target_resolution: float = 15.0  # Å
    box_out: int = 48
    mask_radius: float = 24.0
    mask_edge: float = 3.0

    def __post_init__(self):
        if self.box_out < 16:
            raise ValueError(f"box_out must be >= 16, got {self.box_out}")
        if not 0 < self.mask_radius <= self.box_out / 2:
            raise ValueError(
                f"mask_radius must lie in (0, {self.box_out / 2}], got {self.mask_radius}"
            )


def preprocess(v: Volume, c: PreprocessConfig) -> Volume:
    if v.d < c.box_out:
        raise ValueError(f"input box {v.d} is smaller than box_out {c.box_out}")
    out = lowpass_filter(v, c.target_resolution)
    out = fourier_crop(out, c.box_out)
    out = standardize(out)
    return spherical_mask(out, c.mask_radius, c.mask_edge)


def preprocess_stack(volumes: np.ndarray, voxel_size: float, c: PreprocessConfig):
    """Preprocess an ``(n, d, d, d)`` stack; returns the stack and the new voxel size."""
    out = [preprocess(Volume(v, voxel_size), c) for v in volumes]
    return np.stack([o.data for o in out]), out[0].voxel_size
