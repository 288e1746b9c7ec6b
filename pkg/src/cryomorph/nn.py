"""Encoder, decoder and the differentiable rigid grid sampler.

Spatial plan for the kernel-4 layers: the three stride-2 convolutions use
padding 1 and halve the box exactly; the final stride-1 convolution uses
padding 0 when ``box / 8 >= 5`` (48 -> 24 -> 12 -> 6 -> 3) and padding 1
otherwise (24 -> 12 -> 6 -> 3 -> 2). The decoder mirrors the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ShapeMismatch
from .volume import rigid_source_coords, trilinear_stencil

KERNEL = 4
POSE_DIM = 9


@dataclass(frozen=True)
class NetConfig:
    box: int = 48
    channels: tuple = (16, 32, 64, 128)
    latent_dim: int = 16
    hidden: int = 256
    dropout: float = 0.2
    # tanh bound on predicted translations in voxels; None means box / 4
    translation_limit: float | None = None
    # std of the pose-head weights; small so the initial frame is near canonical
    pose_init_scale: float = 1e-2

    def __post_init__(self):
        if self.box % 8 != 0:
            raise ShapeMismatch(f"box must be divisible by 8, got {self.box}")
        if len(self.channels) != 4:
            raise ValueError("channels must list four widths")

    @property
    def final_pad(self) -> int:
        return 0 if self.box // 8 >= 5 else 1

    @property
    def bottleneck(self) -> int:
        return ad.conv_output_size(self.box // 8, KERNEL, 1, self.final_pad)

    @property
    def max_shift(self) -> float:
        return self.box / 4 if self.translation_limit is None else float(self.translation_limit)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class EncoderOutput:
    s2s2: ad.DiffTensor
    translation: ad.DiffTensor
    z: ad.DiffTensor


class Module:
    params: dict

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))


class Encoder(Module):
    """Four ELU convolutions, then FC-ELU-dropout-FC to (s2s2, translation, z)."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.params = {}
        c_in = 1
        for i, c_out in enumerate(cfg.channels):
            fan = c_in * KERNEL**3
            self.params[f"enc.conv{i}.weight"] = ad.parameter(
                _uniform(rng, (c_out, c_in, KERNEL, KERNEL, KERNEL), fan, dtype))
            self.params[f"enc.conv{i}.bias"] = ad.parameter(_uniform(rng, (c_out,), fan, dtype))
            c_in = c_out
        flat = cfg.channels[-1] * cfg.bottleneck**3
        self.params["enc.fc0.weight"] = ad.parameter(_uniform(rng, (cfg.hidden, flat), flat, dtype))
        self.params["enc.fc0.bias"] = ad.parameter(_uniform(rng, (cfg.hidden,), flat, dtype))
        out = POSE_DIM + cfg.latent_dim
        w = _uniform(rng, (out, cfg.hidden), cfg.hidden, dtype)
        w[:POSE_DIM] = rng.standard_normal((POSE_DIM, cfg.hidden)) * cfg.pose_init_scale / np.sqrt(cfg.hidden)
        b = _uniform(rng, (out,), cfg.hidden, dtype)
        b[:POSE_DIM] = 0.0
        b[:6] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        self.params["enc.fc1.weight"] = ad.parameter(w.astype(dtype))
        self.params["enc.fc1.bias"] = ad.parameter(b.astype(dtype))
        for name, p in self.params.items():
            p.name = name

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None):
        cfg = self.cfg
        x = ad.as_tensor(x)
        if x.ndim == 4:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.ndim != 5 or x.shape[2:] != (cfg.box,) * 3:
            raise ShapeMismatch(f"encoder expects (B, {cfg.box}, {cfg.box}, {cfg.box}), got {x.shape}")
        p = self.params
        h = x
        for i in range(4):
            stride, pad = (2, 1) if i < 3 else (1, cfg.final_pad)
            h = ad.elu(ad.conv3(h, p[f"enc.conv{i}.weight"], p[f"enc.conv{i}.bias"], stride, pad))
        h = h.reshape(h.shape[0], -1)
        h = ad.elu(ad.linear(h, p["enc.fc0.weight"], p["enc.fc0.bias"]))
        h = ad.dropout(h, cfg.dropout, rng, training)
        out = ad.linear(h, p["enc.fc1.weight"], p["enc.fc1.bias"])
        s2s2 = out[:, :6]
        trans = ad.tanh(out[:, 6:9]) * cfg.max_shift
        z = out[:, 9:]
        return EncoderOutput(s2s2, trans, z)


class Decoder(Module):
    """FC-ELU-dropout, then four transposed convolutions (ELU on the first three)."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.params = {}
        flat = cfg.channels[-1] * cfg.bottleneck**3
        self.params["dec.fc.weight"] = ad.parameter(
            _uniform(rng, (flat, cfg.latent_dim), cfg.latent_dim, dtype))
        self.params["dec.fc.bias"] = ad.parameter(_uniform(rng, (flat,), cfg.latent_dim, dtype))
        widths = list(cfg.channels[::-1]) + [1]
        for i in range(4):
            c_in, c_out = widths[i], widths[i + 1]
            fan = c_in * KERNEL**3
            # conv3 layout (O, C, ...): this layer maps c_in -> c_out
            self.params[f"dec.deconv{i}.weight"] = ad.parameter(
                _uniform(rng, (c_in, c_out, KERNEL, KERNEL, KERNEL), fan, dtype))
            self.params[f"dec.deconv{i}.bias"] = ad.parameter(_uniform(rng, (c_out,), fan, dtype))
        for name, p in self.params.items():
            p.name = name

    def __call__(self, z, training: bool = False, rng: np.random.Generator | None = None):
        cfg = self.cfg
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(f"decoder expects (B, {cfg.latent_dim}), got {z.shape}")
        p = self.params
        h = ad.elu(ad.linear(z, p["dec.fc.weight"], p["dec.fc.bias"]))
        h = ad.dropout(h, cfg.dropout, rng, training)
        s = cfg.bottleneck
        h = h.reshape(h.shape[0], cfg.channels[-1], s, s, s)
        for i in range(4):
            stride, pad = (1, cfg.final_pad) if i == 0 else (2, 1)
            h = ad.conv3_transpose(h, p[f"dec.deconv{i}.weight"], p[f"dec.deconv{i}.bias"], stride, pad)
            if i < 3:
                h = ad.elu(h)
        return h.reshape(h.shape[0], cfg.box, cfg.box, cfg.box)


def parameter_count(cfg: NetConfig) -> int:
    """Closed-form parameter count of encoder + decoder."""
    k3 = KERNEL**3
    ch = [1] + list(cfg.channels)
    conv = sum(ch[i] * ch[i + 1] * k3 + ch[i + 1] for i in range(4))
    flat = cfg.channels[-1] * cfg.bottleneck**3
    out = POSE_DIM + cfg.latent_dim
    enc = conv + flat * cfg.hidden + cfg.hidden + cfg.hidden * out + out
    # decoder biases sit on the output side of each layer
    dec =cfg.latent_dim * flat + flat + sum(
        ch[i + 1] * ch[i] * k3 + ch[i] for i in range(4)
    )
    return enc + dec


def grid_sample_rigid(v, s2s2, trans) -> ad.DiffTensor:
    """Rigidly resample ``v`` (B, d, d, d) by S2S2 rotation and translation.

    Gradients reach the volume and both pose inputs.
    """
    return ad.sample_rigid(v, ad.s2s2_rotation(s2s2), trans)


def rigid_operator(transform, d: int, dtype=np.float64) -> sp.csr_matrix:
    """Sparse ``(d^3, d^3)`` matrix of trilinear rigid resampling (zero padded)."""
    coords = rigid_source_coords(transform.rotation, transform.translation, d)
    idx, w, _, _, _ = trilinear_stencil(coords, d)
    n = d**3
    rows = np.repeat(np.arange(n), 8)
    m = sp.csr_matrix((w.ravel().astype(dtype), (rows, idx.ravel())), shape=(n, n))
    m.eliminate_zeros()
    return m


@dataclass
class Adam:
    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values = p.values - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
