"""Siamese training with in-plane augmentation and the winner-takes-all loss.

Per batch the loss is

    min_k SSE(I_theta, C_k D) + min_k SSE(I'_theta', C_k D') + SSE(I_theta, I'_theta')
        + embed_weight * L1(z, z')

where ``I_theta`` is the input resampled by the encoder's pose, ``D`` the
decoding of ``z + eps`` and ``C_k`` the k-th candidate transform. Candidate 0
is always the identity, so ``n_candidates=1`` is the plain single-candidate loss.
Reduction: sum over voxels, mean over the batch.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import se3
from .errors import NonFiniteLoss
from .nn import Adam, Decoder, Encoder, NetConfig, grid_sample_rigid, rigid_operator
from .sim import wedge_mask
from .volume import Volume, resample_rigid

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "recon_self", "recon_aug", "recon_cross", "embed", "total",
                   "winner_entropy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 16
    n_candidates: int = 96
    schedule_switch_epoch: int = 40
    translation_bound: float = 2.0
    embed_weight: float = 1.0
    latent_noise: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0
    # compare candidates through the dataset wedge mask (off: loss as written)
    wedge_candidates: bool = False
    wedge_half_angle: float = 30.0
    # Haar-uniform candidate rotations in the wide phase instead of axis-angle boxes
    haar_candidates: bool = False

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.schedule_switch_epoch > self.epochs:
            raise ValueError("schedule_switch_epoch must not exceed epochs")


@dataclass
class CandidateSet:
    transforms: list
    phase: str

    def __len__(self):
        return len(self.transforms)


@dataclass
class LossBreakdown:
    recon_self: float
    recon_aug: float
    recon_cross: float
    embed: float
    total: float
    winner_indices: np.ndarray


@dataclass
class TrainedModel:
    encoder: Encoder
    decoder: Decoder
    history: list = field(default_factory=list)


def build_model(cfg: NetConfig, seed: int, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0DE,)))
    return Encoder(cfg, rng, dtype), Decoder(cfg, rng, dtype)


def augment(v: Volume, rng: np.random.Generator):
    """Random rotation about z, angle uniform in [0, 2*pi)."""
    t = se3.inplane_rotation(rng.uniform(0.0, 2.0 * np.pi))
    return resample_rigid(v, t), t


def augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(batch)
    for i, vol in enumerate(batch):
        out[i] = augment(Volume(vol), rng)[0].data
    return out


def sample_candidates(epoch: int, cfg: TrainConfig, rng: np.random.Generator,
                      force_identity: bool = False) -> CandidateSet:
    """Identity first, then ``N - 1`` random rigid transforms for the epoch's phase."""
    phase = "wide" if epoch < cfg.schedule_switch_epoch else "near_identity"
    transforms = [se3.RigidTransform.identity()]
    if not force_identity:
        for _ in range(cfg.n_candidates - 1):
            if phase == "wide":
                R = se3.sample_rotation_haar(rng) if cfg.haar_candidates else se3.sample_rotation_wide(rng)
            else:
                R = se3.sample_rotation_near_identity(rng)
            transforms.append(se3.RigidTransform(R, se3.sample_translation(rng, cfg.translation_bound)))
    return CandidateSet(transforms, phase)


def _wedge_post(d: int, angle: float):
    m = wedge_mask(d, angle)

    def post(vols):
        spec = np.fft.fftshift(np.fft.fftn(vols, axes=(1, 2, 3)), axes=(1, 2, 3)) * m
        return np.fft.ifftn(np.fft.ifftshift(spec, axes=(1, 2, 3)), axes=(1, 2, 3)).real.astype(vols.dtype)

    return post


def wta_recon_term(target, decoded, cands: CandidateSet, post=None):
    """Per-item ``min_k SSE(target, C_k decoded)`` and the winning indices.

    Candidate transforms are constants; the gradient flows through the winner
    only (into both ``target`` and ``decoded``).
    """
    d = decoded.shape[-1]
    ops = [rigid_operator(t, d, dtype=decoded.dtype) for t in cands.transforms]
    all_sse = ad.candidate_sse(target, decoded, ops, post=post)
    values, winners = ad.min_reduce(all_sse)
    return values, winners, all_sse


def total_loss(I, I2, encoder: Encoder, decoder: Decoder, cands: CandidateSet, cfg: TrainConfig,
               rng: np.random.Generator | None = None, training: bool = True):
    """Returns ``(LossBreakdown, total DiffTensor)``."""
    out1 = encoder(I, training, rng)
    out2 = encoder(I2, training, rng)
    I_t = grid_sample_rigid(I, out1.s2s2, out1.translation)
    I2_t = grid_sample_rigid(I2, out2.s2s2, out2.translation)
    D1 = decoder(ad.add_gaussian(out1.z, cfg.latent_noise, rng, training), training, rng)
    D2 = decoder(ad.add_gaussian(out2.z, cfg.latent_noise, rng, training), training, rng)
    post = _wedge_post(I_t.shape[-1], cfg.wedge_half_angle) if cfg.wedge_candidates else None
    self_term, w1, _ = wta_recon_term(I_t, D1, cands, post)
    aug_term, w2, _ = wta_recon_term(I2_t, D2, cands, post)
    cross = ad.sse(I_t, I2_t)
    embed = ad.l1(out1.z, out2.z)
    recon_self, recon_aug = self_term.mean(), aug_term.mean()
    recon_cross, embed_m = cross.mean(), embed.mean()
    total = recon_self + recon_aug + recon_cross + embed_m * cfg.embed_weight
    breakdown = LossBreakdown(
        float(recon_self.values), float(recon_aug.values), float(recon_cross.values),
        float(embed_m.values), float(total.values), np.stack([w1, w2]),
    )
    return breakdown, total


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


def _streams(seed: int):
    """Independent generators for shuffling, augmentation, candidates and the network."""
    names = ("shuffle", "augment", "candidates", "network")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def train(volumes: np.ndarray, cfg: TrainConfig, encoder: Encoder, decoder: Decoder,
          checkpoint_fn=None, force_identity: bool = False) -> TrainedModel:
    """Adam at constant learning rate; returns the model and per-epoch mean losses.

    ``checkpoint_fn(epoch, encoder, decoder)`` is called every
    ``cfg.checkpoint_every`` epochs when given.
    """
    volumes = np.asarray(volumes, dtype=encoder.params["enc.conv0.weight"].dtype)
    n = len(volumes)
    streams = _streams(cfg.seed)
    params = encoder.parameters() + decoder.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = streams["shuffle"].permutation(n)
        sums = np.zeros(5)
        counts = np.zeros(max(cfg.n_candidates, 1))
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            I = volumes[idx]
            I2 = augment_batch(I, streams["augment"])
            cands = sample_candidates(epoch, cfg, streams["candidates"], force_identity)
            for p in params:
                p.zero_grad()
            br, total = total_loss(I, I2, encoder, decoder, cands, cfg, streams["network"])
            if not math.isfinite(br.total):
                state = {"epoch": epoch, "batch_start": start, **{
                    k: v for k, v in asdict(br).items() if k != "winner_indices"}}
                raise NonFiniteLoss(f"non-finite loss: {json.dumps(state)}")
            total.backward()
            opt.step()
            sums += len(idx) * np.array([br.recon_self, br.recon_aug, br.recon_cross, br.embed, br.total])
            np.add.at(counts, br.winner_indices.ravel(), 1)
        means = sums / n
        row = dict(zip(HISTORY_COLUMNS, [epoch + 1, *means.tolist(), _entropy(counts)]))
        history.append(row)
        log.info("epoch %d total %.6g entropy %.3f", epoch + 1, row["total"], row["winner_entropy"])
        if checkpoint_fn is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(epoch + 1, encoder, decoder)
    return TrainedModel(encoder, decoder, history)


def history_csv(history: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def write_history(history: list, path) -> None:
    Path(path).write_text(history_csv(history))
