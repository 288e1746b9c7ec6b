"""Forward simulation of posed, degraded subtomograms with ground truth."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from . import se3
from .errors import UnsupportedKind, ZeroVariance
from .volume import Volume, dft3, freq_grid, freq_radius, idft3, resample_rigid, Spectrum

PHANTOM_KINDS = ("sphere", "dumbbell", "hollow_shell", "ell_prism")

# erf edge width of the phantoms, in voxels
EDGE_SIGMA = 1.0


@dataclass(frozen=True, eq=False)
class Template:
    volume: Volume
    class_id: int
    name: str = ""

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        off = np.linalg.norm(center_of_mass(self.volume.data) - self.volume.center)
        if off > 2.0:
            raise ValueError(f"template '{self.name}' is off-center by {off:.2f} voxels")


@dataclass(frozen=True)
class CtfParams:
    voltage: float = 300.0  # kV
    cs: float = 2.7  # mm
    defocus: float = 5.0  # µm, underfocus positive
    amplitude_contrast: float = 0.07


@dataclass(frozen=True)
class ImagingParams:
    snr: float = 0.1
    wedge_half_angle: float = 30.0
    ctf: CtfParams = field(default_factory=CtfParams)
    apply_ctf: bool = True
    translation_bound: float = 2.0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if not 0 <= self.wedge_half_angle < 90:
            raise ValueError(f"wedge_half_angle must be in [0, 90), got {self.wedge_half_angle}")
        if not 0 <= self.ctf.amplitude_contrast <= 1:
            raise ValueError("amplitude_contrast must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class GroundTruthRecord:
    index: int
    class_id: int
    pose: se3.RigidTransform
    seed: int


def center_of_mass(data: np.ndarray) -> np.ndarray:
    w = np.clip(data, 0, None)
    total = w.sum()
    if total <= 0:
        return np.full(3, (data.shape[0] - 1) / 2.0)
    g = np.arange(data.shape[0])
    return np.array(
        [
            (w.sum(axis=(1, 2)) * g).sum() / total,
            (w.sum(axis=(0, 2)) * g).sum() / total,
            (w.sum(axis=(0, 1)) * g).sum() / total,
        ]
    )


def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def phantom_sdf(kind: str, p: np.ndarray, d: int) -> np.ndarray:
    """Signed distance (voxels, negative inside) at center-relative points."""
    r = np.linalg.norm(p, axis=-1)
    if kind == "sphere":
        return r - 0.25 * d
    if kind == "hollow_shell":
        return np.maximum(r - 0.36 * d, 0.24 * d - r)
    if kind == "dumbbell":
        off = np.array([0.22 * d, 0.0, 0.0])
        rad = 0.15 * d
        return np.minimum(
            np.linalg.norm(p - off, axis=-1) - rad, np.linalg.norm(p + off, axis=-1) - rad
        )
    if kind == "ell_prism":
        arm, width, height = 0.56 * d, 0.18 * d, 0.3 * d
        # the L's area-weighted centroid sits at (com, com) before centering
        area1, area2 = arm * width, width * (arm - width)
        com = (area1 * arm / 2 + area2 * width / 2) / (area1 + area2)
        shifted = p + np.array([com, com, 0.0])
        a = _box_sdf(shifted, np.array([arm / 2, width / 2, 0.0]),
                     np.array([arm / 2, width / 2, height / 2]))
        b = _box_sdf(shifted, np.array([width / 2, arm / 2, 0.0]),
                     np.array([width / 2, arm / 2, height / 2]))
        return np.minimum(a, b)
    raise UnsupportedKind(f"unknown phantom kind '{kind}'; expected one of {PHANTOM_KINDS}")


def phantom_density(kind: str, p: np.ndarray, d: int) -> np.ndarray:
    """Soft (erf-edged) density at center-relative points, before peak scaling."""
    return 0.5 * erfc(phantom_sdf(kind, p, d) / (np.sqrt(2.0) * EDGE_SIGMA))


def make_phantom(kind: str, d: int, voxel_size: float = 7.5, class_id: int | None = None) -> Template:
    if kind not in PHANTOM_KINDS:
        raise UnsupportedKind(f"unknown phantom kind '{kind}'; expected one of {PHANTOM_KINDS}")
    if d < 16:
        raise ValueError(f"phantoms need d >= 16, got {d}")
    g = np.arange(d) - (d - 1) / 2.0
    p = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)
    rho = phantom_density(kind, p, d)
    rho = rho / rho.max()
    if class_id is None:
        class_id = PHANTOM_KINDS.index(kind)
    return Template(Volume(rho, voxel_size), class_id, kind)


def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Å."""
    v = voltage_kv * 1e3
    return 12.2643247 / np.sqrt(v * (1.0 + 0.978466e-6 * v))


def ctf_phase(k: np.ndarray, ctf: CtfParams) -> np.ndarray:
    """Aberration phase ``gamma(k)`` for spatial frequency ``k`` in 1/Å."""
    lam = electron_wavelength(ctf.voltage)
    dz = ctf.defocus * 1e4
    cs = ctf.cs * 1e7
    return np.pi * lam * dz * k**2 - 0.5 * np.pi * cs * lam**3 * k**4


def ctf_value(k: np.ndarray, ctf: CtfParams) -> np.ndarray:
    a = ctf.amplitude_contrast
    gamma = ctf_phase(k, ctf)
    return -(np.sqrt(1.0 - a * a) * np.sin(gamma) + a * np.cos(gamma))


def ctf_weights(d: int, voxel_size: float, ctf: CtfParams) -> np.ndarray:
    return ctf_value(freq_radius(d) / voxel_size, ctf)


def apply_ctf(v: Volume, p: ImagingParams) -> Volume:
    coeffs = dft3(v).coeffs * ctf_weights(v.d, v.voxel_size, p.ctf)
    return idft3(Spectrum(coeffs, v.voxel_size))


def wedge_mask(d: int, wedge_half_angle: float) -> np.ndarray:
    """1 where measured, 0 inside the missing wedge (tilt axis y, beam axis z).

    A coefficient is missing when its ``(kx, kz)`` direction lies strictly
    within ``wedge_half_angle`` of the kz axis; the ``ky`` line itself is kept.
    """
    fx, _, fz = freq_grid(d)
    if wedge_half_angle <= 0:
        return np.ones((d, d, d))
    missing = np.abs(fx) < np.tan(np.deg2rad(wedge_half_angle)) * np.abs(fz)
    return (~missing).astype(float)


def wedge_zero_fraction(d: int, wedge_half_angle: float) -> float:
    """Fraction of Fourier voxels inside the Nyquist ball that the wedge removes.

    Inside the ball the fraction approaches ``2 * angle / 180``; over the
    whole cube it is smaller because the corners lie mostly outside the wedge.
    """
    inside = freq_radius(d) <= 0.5
    return float(1.0 - wedge_mask(d, wedge_half_angle)[inside].mean())


def apply_missing_wedge(v: Volume, wedge_half_angle: float) -> Volume:
    if not 0 <= wedge_half_angle < 90:
        raise ValueError(f"wedge_half_angle must be in [0, 90), got {wedge_half_angle}")
    if wedge_half_angle == 0:
        return v.with_data(v.data)
    coeffs = dft3(v).coeffs * wedge_mask(v.d, wedge_half_angle)
    return idft3(Spectrum(coeffs, v.voxel_size))


def add_noise_to_snr(v: Volume, snr: float, rng: np.random.Generator) -> Volume:
    """Add i.i.d. Gaussian noise with variance ``var(v) / snr``."""
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    var = v.data.var()
    if var <= 0:
        raise ZeroVariance("cannot set SNR of a constant volume")
    noise = rng.standard_normal(v.data.shape) * np.sqrt(var / snr)
    return v.with_data(v.data + noise)


def sample_pose(rng: np.random.Generator, translation_bound: float) -> se3.RigidTransform:
    return se3.RigidTransform(
        se3.sample_rotation_haar(rng), se3.sample_translation(rng, translation_bound)
    )


def simulate_subtomogram(template: Template, p: ImagingParams, rng: np.random.Generator,
                         pose: se3.RigidTransform | None = None, index: int = 0,
                         seed: int = 0):
    """Pose, CTF, missing wedge and noise; returns the volume and its ground truth."""
    if pose is None:
        pose = sample_pose(rng, p.translation_bound)
    v = resample_rigid(template.volume, pose)
    # CTF and wedge are both pointwise spectral multipliers, so their order is immaterial
    if p.apply_ctf or p.wedge_half_angle > 0:
        weights = np.ones((v.d,) * 3)
        if p.apply_ctf:
            weights = weights * ctf_weights(v.d, v.voxel_size, p.ctf)
        if p.wedge_half_angle > 0:
            weights = weights * wedge_mask(v.d, p.wedge_half_angle)
        v = idft3(Spectrum(dft3(v).coeffs * weights, v.voxel_size))
    v = add_noise_to_snr(v, p.snr, rng)
    return v, GroundTruthRecord(index, template.class_id, pose, seed)


def item_seed(seed: int, index: int) -> int:
    """Stable per-item seed: SeedSequence(entropy=seed, spawn_key=(index,))."""
    state = np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def _simulate_item(args):
    template, p, index, seed = args
    s = item_seed(seed, index)
    v, rec = simulate_subtomogram(template, p, np.random.default_rng(s), index=index, seed=s)
    return v.data, rec


def worker_count() -> int:
    return max(1, int(os.environ.get("CRYOMORPH_WORKERS", "1")))


def simulate_dataset(templates, n_per_class: int, p: ImagingParams, seed: int,
                     workers: int | None = None):
    """``n_per_class`` volumes per template, class-major order.

    Returns ``(volumes, records)`` with volumes of shape ``(n, d, d, d)``.
    Output does not depend on ``workers``.
    """
    if len(templates) < 2:
        raise ValueError("need at least two templates")
    jobs = [
        (t, p, ci * n_per_class + j, seed)
        for ci, t in enumerate(templates)
        for j in range(n_per_class)
    ]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_simulate_item, jobs, chunksize=16))
    else:
        results = [_simulate_item(j) for j in jobs]
    volumes = np.stack([r[0] for r in results])
    return volumes, [r[1] for r in results]
