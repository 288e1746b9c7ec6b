"""Latent extraction, 2-D reduction, GMM clustering and class templates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateData, EmptyClass
from .nn import Decoder, Encoder
from .volume import Volume

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6


@dataclass
class LatentRecord:
    index: int
    z: np.ndarray
    theta: np.ndarray
    coords: np.ndarray | None = None
    class_posterior: np.ndarray | None = None
    assigned_class: int | None = None


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: list = field(default_factory=list)
    reseeded: int = 0

    @property
    def K(self) -> int:
        return len(self.weights)


def extract_latents(volumes: np.ndarray, encoder: Encoder, batch_size: int = 32):
    """Eval-mode encoder outputs; returns ``(z, theta)`` with theta = (s2s2, translation)."""
    dtype = encoder.params["enc.conv0.weight"].dtype
    zs, thetas = [], []
    for start in range(0, len(volumes), batch_size):
        out = encoder(np.asarray(volumes[start:start + batch_size], dtype=dtype), training=False)
        zs.append(out.z.values)
        thetas.append(np.concatenate([out.s2s2.values, out.translation.values], axis=1))
    return np.concatenate(zs).astype(np.float64), np.concatenate(thetas).astype(np.float64)


def latent_records(z, theta) -> list:
    return [LatentRecord(i, z[i], theta[i]) for i in range(len(z))]


def reduce_2d(latents: np.ndarray, strict: bool = False):
    """Project centered latents onto their top two principal axes.

    Each axis' sign makes its largest-magnitude loading positive. Returns
    ``(coords, explained_variance_ratio)``. Rank-deficient input is padded
    with a zero axis unless ``strict``.
    """
    X = np.asarray(latents, dtype=float)
    if len(X) < 3:
        raise DegenerateData("need at least 3 points")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s.max(initial=0.0) * max(Xc.shape) * np.finfo(float).eps
    rank = int((s > tol).sum())
    if rank < 2:
        if strict or rank == 0:
            raise DegenerateData(f"latent matrix has rank {rank}")
        log.warning("latent matrix has rank 1; padding a zero axis")
    axes = vt[:2].copy() if vt.shape[0] >= 2 else np.vstack([vt[:1], np.zeros_like(vt[:1])])
    for i in range(min(rank, 2), 2):
        axes[i] = 0.0
    for a in axes:
        j = np.argmax(np.abs(a))
        if a[j] < 0:
            a *= -1
    coords = Xc @ axes.T
    var = s**2
    ratio = np.zeros(2)
    ratio[:min(2, len(var))] = var[:2] / var.sum()
    ratio[rank:] = 0.0
    return coords, ratio


def _log_gauss(X, mean, cov):
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (X - mean).T)
    maha = (sol**2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (maha + logdet + X.shape[1] * np.log(2 * np.pi))


def _floor_cov(cov, floor=COV_FLOOR):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    return (v * np.maximum(w, floor)) @ v.T


def _log_resp(X, model: GmmModel):
    logp = np.stack([
        np.log(model.weights[k]) + _log_gauss(X, model.means[k], model.covariances[k])
        for k in range(model.K)
    ], axis=1)
    norm = logsumexp(logp, axis=1)
    return logp - norm[:, None], norm


def _kmeans_pp(X, K, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, K):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(len(X))])
        else:
            centers.append(X[rng.choice(len(X), p=d2 / total)])
    return np.array(centers)


def gmm_fit(points, K: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-7) -> GmmModel:
    """Full-covariance GMM by EM from a k-means++ seeding.

    Stops when the mean log-likelihood improves by less than ``tol`` or after
    ``max_iter`` iterations. Covariance eigenvalues are floored at 1e-6. A
    component whose responsibility mass vanishes is re-seeded at the point
    with the lowest likelihood under the current mixture.
    """
    X = np.asarray(points, dtype=float)
    n, dim = X.shape
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, K, rng)
    hard = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    global_cov = _floor_cov(np.cov(X.T, bias=True).reshape(dim, dim))
    means = np.empty((K, dim))
    covs = np.empty((K, dim, dim))
    weights = np.empty(K)
    for k in range(K):
        members = X[hard == k]
        if len(members) == 0:
            members = centers[k:k + 1]
        means[k] = members.mean(axis=0)
        covs[k] = global_cov if len(members) < 2 else _floor_cov(np.cov(members.T, bias=True).reshape(dim, dim))
        weights[k] = max(len(members), 1)
    model = GmmModel(weights / weights.sum(), means, covs)
    prev = -np.inf
    for _ in range(max_iter):
        log_r, norm = _log_resp(X, model)
        ll = float(norm.mean())
        model.log_likelihood.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        r = np.exp(log_r)
        nk = r.sum(axis=0)
        for k in range(K):
            if nk[k] < 1e-10 * n:
                far = int(np.argmin(norm))
                model.means[k] = X[far]
                model.covariances[k] = global_cov
                nk[k] = 1.0
                r[:, k] = 0.0
                r[far, k] = 1.0
                model.reseeded += 1
                log.warning("GMM component %d emptied; re-seeded at point %d", k, far)
                prev = -np.inf
                continue
            mu = r[:, k] @ X / nk[k]
            diff = X - mu
            model.means[k] = mu
            model.covariances[k] = _floor_cov((r[:, k, None] * diff).T @ diff / nk[k])
        model.weights = nk / nk.sum()
    return model


def assign_classes(model: GmmModel, points):
    """Posterior class probabilities and argmax labels (lowest index wins ties)."""
    log_r, _ = _log_resp(np.asarray(points, dtype=float), model)
    post = np.exp(log_r)
    post /= post.sum(axis=1, keepdims=True)
    return post, np.argmax(post, axis=1)


def class_template(z: np.ndarray, labels: np.ndarray, class_id: int, decoder: Decoder,
                   voxel_size: float = 1.0) -> Volume:
    """Decode (eval mode, no latent noise) the componentwise median z of a class."""
    members = np.asarray(z)[np.asarray(labels) == class_id]
    if len(members) == 0:
        raise EmptyClass(f"class {class_id} has no members")
    med = np.median(members, axis=0)
    dtype = decoder.params["dec.fc.weight"].dtype
    out = decoder(med[None].astype(dtype), training=False)
    return Volume(out.values[0].astype(np.float64), voxel_size)


@dataclass(frozen=True)
class InferConfig:
    K: int = 4
    # "pca": cluster 2-D principal coordinates; "none": cluster full z
    reduction: str = "pca"
    seed: int = 0


def cluster(z: np.ndarray, cfg: InferConfig):
    """Reduce (or not) and fit the GMM; returns ``(coords, model, posteriors, labels)``."""
    if cfg.reduction == "pca":
        coords, _ = reduce_2d(z)
    elif cfg.reduction == "none":
        coords = np.asarray(z, dtype=float)
    else:
        raise ValueError(f"unknown reduction '{cfg.reduction}'")
    model = gmm_fit(coords, cfg.K, cfg.seed)
    post, labels = assign_classes(model, coords)
    return coords, model, post, labels
