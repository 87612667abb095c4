"""Dictionary-based upscalers: sparse coding (SC) and anchored regression (A+).

Both work on the bicubic estimate of the HR image. LR features are first and
second order gradient responses of that estimate, cut into overlapping
patches and PCA-reduced; the learned model predicts the missing HR residual
patch by patch, and overlapping residuals are averaged.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ensr.classical_sr.interp import bicubic_upscale
from ensr.errors import ConfigurationError, DataError
from ensr.image_core import Image
from ensr.io import read_raw, write_raw
from ensr.kspace import downsample_kspace

log = logging.getLogger(__name__)

DEFAULT_ATOMS = 1024
DEFAULT_SPARSITY = 3
DEFAULT_RIDGE = 0.1
DEFAULT_NEIGHBORHOOD = 256
DEFAULT_PATCH = 6


@dataclass(frozen=True)
class FeatureOp:
    """LR feature extraction: gradient filters, patch cut and PCA projection."""

    patch_size: int = DEFAULT_PATCH
    stride: int = 2
    projection: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def raw_dim(self) -> int:
        return 4 * self.patch_size ** 2

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def describe(self) -> dict:
        return {"filters": ["[-1,0,1]", "[-1,0,1]^T", "[1,0,-2,0,1]", "[1,0,-2,0,1]^T"],
                "patch_size": self.patch_size, "stride": self.stride,
                "pca_dim": int(self.dim)}


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Unit-norm LR feature atoms (columns) with their paired HR residual atoms."""

    atoms: np.ndarray
    hr_atoms: np.ndarray
    feature_op: FeatureOp
    seed: int = 0
    training_hash: str = ""

    def __post_init__(self):
        norms = np.linalg.norm(self.atoms, axis=0)
        if self.atoms.ndim != 2 or self.atoms.shape[1] < 1 or self.atoms.shape[0] < 1:
            raise ConfigurationError(f"bad atom matrix shape {self.atoms.shape}")
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ConfigurationError("dictionary atoms must have unit norm")
        if self.hr_atoms.shape[1] != self.atoms.shape[1]:
            raise ConfigurationError("LR and HR atom counts differ")
        if self.feature_op.projection is not None and self.feature_op.dim != self.atom_dim:
            raise ConfigurationError("feature projection does not match atom_dim")

    @property
    def atom_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def hr_dim(self) -> int:
        return self.hr_atoms.shape[0]


@dataclass(frozen=True, eq=False)
class AnchoredRegressors:
    """One ridge regressor per atom, mapping LR features to an HR residual patch."""

    matrices: np.ndarray  # (n_atoms, hr_dim, atom_dim)
    neighborhood_size: int
    ridge: float = DEFAULT_RIDGE

    def check(self, dictionary: Dictionary) -> None:
        want = (dictionary.n_atoms, dictionary.hr_dim, dictionary.atom_dim)
        if self.matrices.shape != want:
            raise ConfigurationError(
                f"regressor stack {self.matrices.shape} does not match dictionary {want}")


# ---------------------------------------------------------------- features

def gradient_responses(a: np.ndarray) -> np.ndarray:
    """(4, H, W) responses to [-1,0,1], its transpose, [1,0,-2,0,1], its transpose."""
    p = np.pad(a, 2, mode="edge")
    H, W = a.shape
    sx = lambda d: p[2:2 + H, 2 + d:2 + d + W]  # noqa: E731
    sy = lambda d: p[2 + d:2 + d + H, 2:2 + W]  # noqa: E731
    return np.stack([
        sx(1) - sx(-1),
        sy(1) - sy(-1),
        sx(2) - 2 * sx(0) + sx(-2),
        sy(2) - 2 * sy(0) + sy(-2),
    ])


def patch_origins(extent: int, patch: int, stride: int) -> np.ndarray:
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return np.asarray(origins)


def extract_patches(stack: np.ndarray, patch: int, rows, cols) -> np.ndarray:
    """Columns of flattened (C, patch, patch) blocks at every (row, col) origin pair."""
    if stack.ndim == 2:
        stack = stack[None]
    win = sliding_window_view(stack, (patch, patch), axis=(1, 2))  # C, h, w, p, p
    sel = win[:, rows[:, None], cols[None, :]]  # C, nr, nc, p, p
    sel = np.moveaxis(sel, 0, 2)  # nr, nc, C, p, p
    return sel.reshape(len(rows) * len(cols), -1).T.copy()


def accumulate_patches(cols_: np.ndarray, shape, patch: int, rows, cols) -> np.ndarray:
    """Average (patch*patch, n) column patches back into an image of ``shape``."""
    acc = np.zeros(shape)
    weight = np.zeros(shape)
    blocks = cols_.T.reshape(len(rows), len(cols), patch, patch)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            acc[r:r + patch, c:c + patch] += blocks[i, j]
            weight[r:r + patch, c:c + patch] += 1.0
    return acc / np.maximum(weight, 1.0)


def _raw_features(mid: np.ndarray, patch: int, stride: int):
    rows = patch_origins(mid.shape[0], patch, stride)
    cols = patch_origins(mid.shape[1], patch, stride)
    return extract_patches(gradient_responses(mid), patch, rows, cols), rows, cols


def pca_projection(features: np.ndarray, energy: float = 0.999) -> np.ndarray:
    """Uncentred PCA basis (k, raw_dim) keeping ``energy`` of the feature power."""
    cov = features @ features.T
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0, None), vecs[:, order]
    total = vals.sum()
    if total <= 0:
        raise DataError("training features are identically zero")
    k = int(np.searchsorted(np.cumsum(vals) / total, energy) + 1)
    basis = vecs[:, :min(k, len(vals))].T
    # deterministic sign: largest-magnitude entry of each basis vector is positive
    flip = np.sign(basis[np.arange(basis.shape[0]), np.argmax(np.abs(basis), axis=1)])
    return basis * flip[:, None]


# ---------------------------------------------------------------- sparse coding

def omp(D: np.ndarray, X: np.ndarray, sparsity: int, tol: float = 1e-10) -> np.ndarray:
    """Orthogonal matching pursuit for every column of ``X``.

    Returns the (n_atoms, n_samples) code matrix. A column stops early once its
    residual norm drops below ``tol`` times its own norm.
    """
    if X.ndim == 1:
        X = X[:, None]
    d, K = D.shape
    n = X.shape[1]
    s_max = int(min(sparsity, K))
    codes = np.zeros((K, n))
    support = np.zeros((n, s_max), dtype=int)
    coef = np.zeros((n, s_max))
    norms = np.linalg.norm(X, axis=0)
    active = np.flatnonzero(norms > 0)
    residual = X.copy()
    for step in range(s_max):
        if active.size == 0:
            break
        corr = np.abs(D.T @ residual[:, active])  # K, a
        if step:
            corr[support[active, :step].T, np.arange(active.size)[None, :]] = -1.0
        support[active, step] = np.argmax(corr, axis=0)
        S = support[active, :step + 1]
        Ds = np.transpose(D[:, S], (1, 0, 2))  # a, d, s
        gram = Ds.transpose(0, 2, 1) @ Ds
        rhs = np.einsum("ads,da->as", Ds, X[:, active])
        sol = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
        coef[active, :step + 1] = sol
        residual[:, active] = X[:, active] - np.einsum("ads,as->da", Ds, sol)
        done = np.linalg.norm(residual[:, active], axis=0) <= tol * norms[active]
        active = active[~done]
    cols = np.arange(n)
    for k in range(s_max):
        used = coef[:, k] != 0
        codes[support[used, k], cols[used]] += coef[used, k]
    return codes


def ksvd(X: np.ndarray, n_atoms: int, sparsity: int, iters: int,
         rng: np.random.Generator) -> np.ndarray:
    """K-SVD dictionary learning on the columns of ``X``; returns unit-norm atoms."""
    n = X.shape[1]
    norms = np.linalg.norm(X, axis=0)
    usable = np.flatnonzero(norms > 0)
    if usable.size < n_atoms:
        raise DataError(f"K-SVD needs at least {n_atoms} non-zero samples, got {usable.size}")
    init = rng.choice(usable, size=n_atoms, replace=False)
    D = X[:, init] / norms[init]
    for it in range(iters):
        G = omp(D, X, sparsity)
        E = X - D @ G
        err = np.linalg.norm(E, axis=0)
        reseed_order = list(np.argsort(-err, kind="stable"))
        for j in range(n_atoms):
            users = np.flatnonzero(G[j])
            if users.size == 0:
                while reseed_order:
                    cand = reseed_order.pop(0)
                    if err[cand] > 0:
                        D[:, j] = E[:, cand] / err[cand]
                        break
                continue
            E_j = E[:, users] + np.outer(D[:, j], G[j, users])
            u, s, vt = np.linalg.svd(E_j, full_matrices=False)
            D[:, j] = u[:, 0]
            G[j, users] = s[0] * vt[0]
            E[:, users] = E_j - np.outer(D[:, j], G[j, users])
        log.debug("ksvd iter %d: rmse %.3e", it, np.sqrt(np.mean(E ** 2)))
    return D / np.linalg.norm(D, axis=0)


# ---------------------------------------------------------------- training

def training_pairs(hr_images, patch: int, stride: int):
    """Raw LR feature columns and HR residual columns from HR training images."""
    feats, resid = [], []
    for img in hr_images:
        mid = bicubic_upscale(downsample_kspace(img)).data
        f, rows, cols = _raw_features(mid, patch, stride)
        feats.append(f)
        resid.append(extract_patches(img.data - mid, patch, rows, cols))
    return np.concatenate(feats, axis=1), np.concatenate(resid, axis=1)


def _training_hash(hr_images, config: dict) -> str:
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
    for img in hr_images:
        h.update(np.ascontiguousarray(img.data, dtype="<f8").tobytes())
    return h.hexdigest()


def anchored_regressors(D: np.ndarray, Z: np.ndarray, R: np.ndarray,
                        neighborhood: int, ridge: float) -> np.ndarray:
    """Ridge regressor per atom over its most correlated normalized training samples."""
    scale = np.linalg.norm(Z, axis=0)
    Zn, Rn = Z / scale, R / scale
    M = min(neighborhood, Z.shape[1])
    corr = np.abs(D.T @ Zn)  # K, N
    nbrs = np.argsort(-corr, axis=1, kind="stable")[:, :M]
    d = D.shape[0]
    out = np.empty((D.shape[1], R.shape[0], d))
    for j in range(D.shape[1]):
        Nl, Nh = Zn[:, nbrs[j]], Rn[:, nbrs[j]]
        # Nh (Nl^T Nl + rI)^-1 Nl^T == Nh Nl^T (Nl Nl^T + rI)^-1
        out[j] = np.linalg.solve(Nl @ Nl.T + ridge * np.eye(d), Nl @ Nh.T).T
    return out


def train_dictionary(hr_patches, n_atoms: int | None = None, sparsity: int = DEFAULT_SPARSITY,
                     iters: int = 10, seed: int = 0, patch_size: int = DEFAULT_PATCH,
                     stride: int = 2, neighborhood: int = DEFAULT_NEIGHBORHOOD,
                     ridge: float = DEFAULT_RIDGE, pca_energy: float = 0.999):
    """Learn the SC dictionary pair and the A+ regressors from HR training images."""
    n_atoms = DEFAULT_ATOMS if n_atoms is None else int(n_atoms)
    hr_patches = list(hr_patches)
    config = dict(n_atoms=n_atoms, sparsity=sparsity, iters=iters, seed=seed,
                  patch_size=patch_size, stride=stride, neighborhood=neighborhood,
                  ridge=ridge, pca_energy=pca_energy)
    F, R = training_pairs(hr_patches, patch_size, stride)
    keep = np.linalg.norm(F, axis=0) > 1e-8
    F, R = F[:, keep], R[:, keep]
    if F.shape[1] < n_atoms:
        raise DataError(f"dictionary training needs at least {n_atoms} textured patch pairs, "
                        f"got {F.shape[1]}")
    proj = pca_projection(F, pca_energy)
    Z = proj @ F
    rng = np.random.default_rng(seed)
    D = ksvd(Z, n_atoms, sparsity, iters, rng)
    G = omp(D, Z, sparsity)
    hr_atoms = np.linalg.lstsq(G.T, R.T, rcond=None)[0].T
    log.info("dictionary: %d atoms of dim %d from %d samples", n_atoms, Z.shape[0], Z.shape[1])
    op = FeatureOp(patch_size, stride, proj)
    dictionary = Dictionary(D, hr_atoms, op, seed, _training_hash(hr_patches, config))
    reg = AnchoredRegressors(anchored_regressors(D, Z, R, neighborhood, ridge),
                             min(neighborhood, Z.shape[1]), ridge)
    return dictionary, reg


# ---------------------------------------------------------------- inference

def lr_features(lr: Image, op: FeatureOp):
    """Bicubic estimate plus projected feature columns and their patch origins."""
    mid = bicubic_upscale(lr).data
    raw, rows, cols = _raw_features(mid, op.patch_size, op.stride)
    if op.projection is None or op.projection.shape[1] != raw.shape[0]:
        raise ConfigurationError("dictionary feature projection does not match LR features")
    return mid, op.projection @ raw, rows, cols


def _check_dictionary(dictionary):
    if not isinstance(dictionary, Dictionary) or dictionary.feature_op.projection is None:
        raise ConfigurationError("a trained Dictionary is required")
    if dictionary.hr_dim != dictionary.feature_op.patch_size ** 2:
        raise ConfigurationError("HR atom length does not match the patch size")


def sc_upscale(lr: Image, dictionary: Dictionary, sparsity: int = DEFAULT_SPARSITY) -> Image:
    _check_dictionary(dictionary)
    mid, Z, rows, cols = lr_features(lr, dictionary.feature_op)
    codes = omp(dictionary.atoms, Z, sparsity)
    resid = dictionary.hr_atoms @ codes
    p = dictionary.feature_op.patch_size
    return lr.with_data(mid + accumulate_patches(resid, mid.shape, p, rows, cols))


def select_anchors(D: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return np.argmax(np.abs(D.T @ Z), axis=0)


def aplus_upscale(lr: Image, dictionary: Dictionary, reg: AnchoredRegressors) -> Image:
    _check_dictionary(dictionary)
    reg.check(dictionary)
    mid, Z, rows, cols = lr_features(lr, dictionary.feature_op)
    anchors = select_anchors(dictionary.atoms, Z)
    resid = np.einsum("nhd,dn->hn", reg.matrices[anchors], Z)
    p = dictionary.feature_op.patch_size
    return lr.with_data(mid + accumulate_patches(resid, mid.shape, p, rows, cols))


# ---------------------------------------------------------------- persistence

def save_dictionary(path, dictionary: Dictionary, reg: AnchoredRegressors | None = None) -> None:
    """Write the dictionary as raw-float matrices plus a ``dictionary.json`` sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_raw(path / "atoms.raw", dictionary.atoms)
    write_raw(path / "hr_atoms.raw", dictionary.hr_atoms)
    write_raw(path / "projection.raw", dictionary.feature_op.projection)
    meta = {
        "n_atoms": dictionary.n_atoms,
        "atom_dim": dictionary.atom_dim,
        "hr_dim": dictionary.hr_dim,
        "feature": dictionary.feature_op.describe(),
        "seed": dictionary.seed,
        "training_hash": dictionary.training_hash,
    }
    if reg is not None:
        K, h, d = reg.matrices.shape
        write_raw(path / "regressors.raw", reg.matrices.reshape(K * h, d))
        meta["regressors"] = {"neighborhood_size": reg.neighborhood_size, "ridge": reg.ridge}
    (path / "dictionary.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dictionary(path):
    path = Path(path)
    try:
        meta = json.loads((path / "dictionary.json").read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"no dictionary at {path}") from None
    op = FeatureOp(meta["feature"]["patch_size"], meta["feature"]["stride"],
                   read_raw(path / "projection.raw"))
    dictionary = Dictionary(read_raw(path / "atoms.raw"), read_raw(path / "hr_atoms.raw"), op,
                            meta["seed"], meta["training_hash"])
    reg = None
    if "regressors" in meta:
        m = read_raw(path / "regressors.raw").reshape(
            dictionary.n_atoms, dictionary.hr_dim, dictionary.atom_dim)
        reg = AnchoredRegressors(m, meta["regressors"]["neighborhood_size"],
                                 meta["regressors"]["ridge"])
    return dictionary, reg
