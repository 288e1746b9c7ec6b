"""Clustering, reconstruction and disentanglement metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import (DegenerateLabels, LabelOutOfRange, LengthMismatch, NonFinite, ShapeMismatch,
                     ZeroVariance)
from .volume import Volume, dft3, freq_radius, resample_rigid

# reported in place of an infinite SNR (noisy == clean)
SNR_CAP = 1e12


@dataclass(frozen=True)
class ContingencyTable:
    n_ij: np.ndarray
    a: np.ndarray
    b: np.ndarray
    n: int


def contingency_table(labels_a, labels_b) -> ContingencyTable:
    la, lb = np.asarray(labels_a), np.asarray(labels_b)
    if la.shape != lb.shape:
        raise LengthMismatch(f"label lengths differ: {la.shape} vs {lb.shape}")
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    n_ij = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(n_ij, (ia, ib), 1)
    return ContingencyTable(n_ij, n_ij.sum(axis=1), n_ij.sum(axis=0), int(la.size))


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected Rand index from the contingency table.

    When the expected and maximal index coincide (e.g. both labelings put
    every item in one cluster) the labelings are identical and 1.0 is returned.
    """
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"label lengths differ: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) < 2:
        raise LengthMismatch("need at least two labels")
    t = contingency_table(labels_a, labels_b)
    index = _comb2(t.n_ij)
    sa, sb = _comb2(t.a), _comb2(t.b)
    total = t.n * (t.n - 1) // 2
    # (index - expected) / (max - expected), scaled by 2 * total to stay in integers
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def _assignment(cost: np.ndarray):
    """Optimal square assignment by the shortest augmenting path (potentials) method."""
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


def hungarian_match(cost):
    """Minimum-cost perfect matching of a square matrix.

    Returns ``(perm, total)`` with ``perm[i]`` the column matched to row ``i``.
    Among optimal matchings the lexicographically smallest ``perm`` is chosen.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeMismatch(f"cost must be square, got {C.shape}")
    if not np.isfinite(C).all():
        raise NonFinite("cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int), 0.0
    best = C[np.arange(n), _assignment(C)].sum()
    tol = 1e-9 * (1.0 + np.abs(C).sum())
    rows, cols = list(range(n)), list(range(n))
    perm = np.empty(n, dtype=int)
    fixed = 0.0
    # fix rows in order, each to the smallest column that still admits an optimum
    for i in range(n):
        rest_rows = rows[1:]
        for j in sorted(cols):
            rest_cols = [c for c in cols if c != j]
            sub = C[np.ix_(rest_rows, rest_cols)]
            rest = sub[np.arange(len(rest_rows)), _assignment(sub)].sum() if rest_rows else 0.0
            if fixed + C[i, j] + rest <= best + tol:
                perm[i] = j
                fixed += C[i, j]
                cols = rest_cols
                break
        rows = rest_rows
    return perm, float(C[np.arange(n), perm].sum())


def brute_force_match(cost):
    """Reference matcher by enumeration; lexicographic order breaks ties."""
    C = np.asarray(cost, dtype=float)
    n = C.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        c = C[np.arange(n), perm].sum()
        if c < best - 1e-9 * (1.0 + np.abs(C).sum()):
            best, best_perm = c, perm
    return np.array(best_perm), float(best)


def matched_accuracy(pred, gt, K: int) -> float:
    """Accuracy after the label permutation that maximizes agreement."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"label lengths differ: {pred.shape} vs {gt.shape}")
    for name, lab in (("pred", pred), ("gt", gt)):
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise LabelOutOfRange(f"{name} labels must lie in [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (pred, gt), 1)
    perm, _ = hungarian_match(-counts)
    return float(counts[np.arange(K), perm].sum() / pred.size)


@dataclass(frozen=True)
class FscCurve:
    frequencies: np.ndarray  # cycles per voxel, shell centers
    values: np.ndarray
    counts: np.ndarray


def fsc(v1: Volume, v2: Volume, shell_width: float = 1.0) -> FscCurve:
    """Per-shell normalized correlation of the two spectra up to Nyquist.

    Shell ``s`` holds Fourier voxels with radius ``r`` (in Fourier voxels)
    satisfying ``|r / shell_width - s| < 0.5``. Empty-energy shells report 0.
    """
    if v1.data.shape != v2.data.shape:
        raise ShapeMismatch(f"volume shapes differ: {v1.data.shape} vs {v2.data.shape}")
    d = v1.d
    f1, f2 = dft3(v1).coeffs, dft3(v2).coeffs
    r = freq_radius(d) * d / shell_width
    shell = np.floor(r + 0.5).astype(int).ravel()
    n_shells = int(np.floor((d // 2) / shell_width + 0.5)) + 1
    keep = shell < n_shells
    shell = shell[keep]
    cross = np.bincount(shell, (f1 * np.conj(f2)).real.ravel()[keep], n_shells)
    e1 = np.bincount(shell, (np.abs(f1) ** 2).ravel()[keep], n_shells)
    e2 = np.bincount(shell, (np.abs(f2) ** 2).ravel()[keep], n_shells)
    counts = np.bincount(shell, minlength=n_shells)
    den = np.sqrt(e1 * e2)
    values = np.zeros(n_shells)
    ok = den > 0
    values[ok] = np.clip(cross[ok] / den[ok], -1.0, 1.0)
    freqs = np.arange(n_shells) * shell_width / d
    return FscCurve(freqs, values, counts)


def auc_fsc(curve: FscCurve) -> float:
    """Area under FSC over normalized frequency ``s = f / 0.5`` in [0, 1].

    The DC shell is excluded. The trapezoid rule covers the non-DC shells and
    the segment from 0 to the first of them is closed by linear extrapolation
    from the first two non-DC shells (constant if only one exists). Shells
    beyond ``s = 1`` are dropped.
    """
    s = np.asarray(curve.frequencies, dtype=float) / 0.5
    f = np.asarray(curve.values, dtype=float)
    keep = (s > 0) & (s <= 1.0 + 1e-12)
    s, f = s[keep], f[keep]
    if s.size == 0:
        raise ValueError("curve has no non-DC shells")
    if s.size == 1:
        f0 = f[0]
    else:
        f0 = f[0] - s[0] * (f[1] - f[0]) / (s[1] - s[0])
    s = np.concatenate([[0.0], s])
    f = np.concatenate([[f0], f])
    return float(np.trapezoid(f, s))


def _predictivity(X, y, seed):
    from sklearn.model_selection import train_test_split
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import LinearSVC

    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=0.2, stratify=y, random_state=seed)
    scaler = StandardScaler().fit(Xtr)
    clf = LinearSVC(C=1.0, loss="hinge", dual=True, max_iter=20000, random_state=seed)
    clf.fit(scaler.transform(Xtr), ytr)
    return float((clf.predict(scaler.transform(Xte)) == yte).mean())


def sap_score(z_factors, theta_factors, labels, seed: int = 0) -> float:
    """Held-out class predictivity of ``z`` minus that of ``theta``.

    Predictivity is the test accuracy of a one-vs-rest linear hinge-loss SVM
    (C = 1, standardized features) on a stratified 80/20 split.
    """
    y = np.asarray(labels)
    if not len(z_factors) == len(theta_factors) == len(y):
        raise LengthMismatch("z, theta and labels must have equal lengths")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise DegenerateLabels("need >= 2 classes with >= 2 members each")
    return _predictivity(z_factors, y, seed) - _predictivity(theta_factors, y, seed)


def measure_snr(clean: Volume, noisy: Volume) -> float:
    """``var(clean) / var(noisy - clean)``; capped at ``SNR_CAP``."""
    if clean.data.shape != noisy.data.shape:
        raise ShapeMismatch("volume shapes differ")
    signal = clean.data.var()
    if signal <= 0:
        raise ZeroVariance("clean volume is constant")
    noise = (noisy.data - clean.data).var()
    if noise <= signal / SNR_CAP:
        return SNR_CAP
    return float(signal / noise)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped arrays."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def _best_shift(ref: np.ndarray, mov: np.ndarray, max_shift: int):
    """Integer shift of ``mov`` (circular correlation, |shift| <= max_shift) best matching ``ref``."""
    cc = np.fft.ifftn(np.fft.fftn(ref) * np.conj(np.fft.fftn(mov))).real
    best, arg = -np.inf, (0, 0, 0)
    rng = range(-max_shift, max_shift + 1)
    for s in itertools.product(rng, rng, rng):
        c = cc[s]
        if c > best + 1e-12:
            best, arg = c, s
    return arg


def _shift_zero(x: np.ndarray, s) -> np.ndarray:
    """Integer shift with zero fill."""
    out = np.zeros_like(x)
    src, dst = [], []
    for k in s:
        if k >= 0:
            src.append(slice(0, x.shape[0] - k))
            dst.append(slice(k, None))
        else:
            src.append(slice(-k, None))
            dst.append(slice(0, x.shape[0] + k))
    out[tuple(dst)] = x[tuple(src)]
    return out


@dataclass(frozen=True)
class Alignment:
    volume: Volume
    transform: se3.RigidTransform
    ncc: float


def align(ref: Volume, mov: Volume, max_shift: int = 2) -> Alignment:
    """Align ``mov`` to ``ref`` over the 24 cube rotations and integer shifts.

    Each rotation is scored at its best shift within ``max_shift`` voxels;
    the highest correlation wins (first rotation on ties).
    """
    if ref.data.shape != mov.data.shape:
        raise ShapeMismatch("volume shapes differ")
    best = None
    for R in se3.cube_rotations():
        rot = resample_rigid(mov, se3.RigidTransform(R, np.zeros(3)))
        s = _best_shift(ref.data, rot.data, max_shift)
        data = _shift_zero(rot.data, s)
        score = ncc(ref.data, data)
        if best is None or score > best.ncc + 1e-12:
            best = Alignment(mov.with_data(data), se3.RigidTransform(R, np.array(s, dtype=float)), score)
    return best


def refine_alignment(ref: Volume, mov: Volume, start: se3.RigidTransform, steps=(0.2, 0.1, 0.05),
                     shift_steps=(0.5, 0.25)) -> Alignment:
    """Coordinate-ascent refinement of a rigid alignment (rotation-vector and shift steps)."""
    R, t = start.rotation, start.translation.astype(float)

    def score(R_, t_):
        out = resample_rigid(mov, se3.RigidTransform(R_, t_))
        return ncc(ref.data, out.data), out

    best, _ = score(R, t)
    for h in steps:
        improved = True
        while improved:
            improved = False
            for axis in range(3):
                for sign in (1, -1):
                    w = np.zeros(3)
                    w[axis] = sign * h
                    Rc = se3.axis_angle_to_rotation(w) @ R
                    c, _ = score(Rc, t)
                    if c > best + 1e-10:
                        best, R, improved = c, Rc, True
            for hs in shift_steps:
                for axis in range(3):
                    for sign in (1, -1):
                        tc = t.copy()
                        tc[axis] += sign * hs
                        c, _ = score(R, tc)
                        if c > best + 1e-10:
                            best, t, improved = c, tc, True
    c, out = score(R, t)
    return Alignment(out, se3.RigidTransform(R, t), c)


def template_ncc(ref: Volume, mov: Volume, max_shift: int = 2, refine: bool = False) -> float:
    """Aligned normalized cross-correlation of a decoded template with a reference."""
    a = align(ref, mov, max_shift)
    if refine:
        a = refine_alignment(ref, mov, a.transform)
    return a.ncc


def aligned_auc_fsc(ref: Volume, mov: Volume, max_shift: int = 2) -> float:
    return auc_fsc(fsc(ref, align(ref, mov, max_shift).volume))
