"""Synthetic phantom corpus: HR images, their k-space LR versions and five PLR images.

Layout under the corpus root::

    dictionary/                      SC dictionary and A+ regressors
    <split>/<id>/hr.raw, lr.raw, plr_<method>.raw
    manifest.json                    written last; its presence marks completion
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ensr import classical_sr
from ensr.errors import DataError, DimensionError
from ensr.image_core import Image, SRMethod
from ensr.io import load_image, save_image
from ensr.kspace import centered_fft2, centered_ifft2, downsample_kspace

log = logging.getLogger(__name__)

SCHEMA = 1
SPLITS = ("train", "valid", "test")
MANIFEST = "manifest.json"
PLR_ROLES = {f"plr_{m.slug}": m for m in SRMethod}
ROLES = ("hr", "lr", *PLR_ROLES)


# ------------------------------------------------------------------ phantoms

@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (320, 320)
    ellipses: tuple = (3, 8)
    background: float = 0.05
    intensity: tuple = (0.15, 0.45)
    ramp: float = 0.3
    texture: float = 0.04
    texture_band: tuple = (0.15, 0.45)
    noise_sigma: float = 0.01

    def __post_init__(self):
        h, w = self.dims
        if h % 4 or w % 4 or h < 8 or w < 8:
            raise DimensionError(f"phantom dims must be multiples of 4 and >= 8, got {h}x{w}")
        if self.noise_sigma < 0 or self.texture < 0:
            raise DataError("noise sigma and texture amplitude must be >= 0")
        lo, hi = self.ellipses
        if not 1 <= lo <= hi:
            raise DataError(f"bad ellipse count range {self.ellipses}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    axes: tuple
    angle: float
    level: float
    gradient: tuple

    def local(self, yy, xx):
        """Rotated offsets from the center, scaled by the semi-axes."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        dy, dx = yy - self.center[0], xx - self.center[1]
        u = (c * dx + s * dy) / self.axes[1]
        v = (-s * dx + c * dy) / self.axes[0]
        return dy, dx, u * u + v * v

    def ramp_range(self):
        """Bounds of level + gradient . offset over the ellipse."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        gy, gx = self.gradient
        # offsets inside: dx = a cos t c - b sin t s, dy = a cos t s + b sin t c
        a, b = self.axes[1], self.axes[0]
        amp = np.hypot(gx * a * c + gy * a * s, -gx * b * s + gy * b * c)
        return self.level - amp, self.level + amp


def _sample_ellipses(rng, cfg: PhantomConfig):
    h, w = cfg.dims
    n = int(rng.integers(cfg.ellipses[0], cfg.ellipses[1] + 1))
    out = []
    for _ in range(n):
        axes = (rng.uniform(0.08, 0.35) * h, rng.uniform(0.08, 0.35) * w)
        center = (rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w)
        angle = rng.uniform(0, np.pi)
        level = rng.uniform(*cfg.intensity)
        # a ramp of at most cfg.ramp across the ellipse
        direction = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0, cfg.ramp) / (2 * max(axes))
        out.append(Ellipse(center, axes, angle, level,
                           (mag * np.sin(direction), mag * np.cos(direction))))
    return out


def band_limited_texture(rng, dims, band) -> np.ndarray:
    """Unit-variance noise keeping only radial frequencies in ``band`` (cycles/pixel x 2)."""
    h, w = dims
    spec = centered_fft2(rng.normal(size=dims))
    fy = np.fft.fftshift(np.fft.fftfreq(h))[:, None] * 2
    fx = np.fft.fftshift(np.fft.fftfreq(w))[None, :] * 2
    r = np.hypot(fy, fx)
    tex = centered_ifft2(spec * ((r >= band[0]) & (r <= band[1]))).real
    sd = tex.std()
    return tex / sd if sd > 0 else tex


def generate_phantom(cfg: PhantomConfig, seed: int) -> Image:
    """Ellipses with linear intensity ramps, texture inside tissue, Rician noise; in [0, 1]."""
    rng = np.random.default_rng(seed)
    h, w = cfg.dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full(cfg.dims, cfg.background)
    tissue = np.zeros(cfg.dims, dtype=bool)
    for e in _sample_ellipses(rng, cfg):
        dy, dx, rr = e.local(yy, xx)
        inside = rr <= 1.0
        img[inside] += e.level + e.gradient[0] * dy[inside] + e.gradient[1] * dx[inside]
        tissue |= inside
    if cfg.texture > 0:
        img += cfg.texture * tissue * band_limited_texture(rng, cfg.dims, cfg.texture_band)
    if cfg.noise_sigma > 0:
        n1, n2 = rng.normal(0, cfg.noise_sigma, (2, h, w))
        img = np.hypot(img + n1, n2)
    return Image(np.clip(img, 0.0, 1.0), 1.0)


# ------------------------------------------------------------------ corpus

@dataclass(frozen=True)
class DictionaryConfig:
    n_atoms: int = 1024
    n_images: int = 4
    iters: int = 10
    sparsity: int = 3
    seed: int = 0


@dataclass
class CorpusManifest:
    root: Path
    records: list
    config: dict
    config_hash: str
    seed: int
    schema: int = SCHEMA
    extra: dict = field(default_factory=dict)

    def ids(self, split):
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return sorted(r["id"] for r in self.records if r["split"] == split)

    def path(self, image_id, role):
        rec = next((r for r in self.records if r["id"] == image_id), None)
        if rec is None:
            raise DataError(f"no image {image_id!r} in corpus")
        return self.root / rec["split"] / image_id / f"{role}.raw"

    def to_json(self):
        return {"schema": self.schema, "seed": self.seed, "config": self.config,
                "config_hash": self.config_hash, "records": self.records, **self.extra}

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        root = Path(root)
        try:
            d = json.loads((root / MANIFEST).read_text())
        except FileNotFoundError:
            raise DataError(f"{root} has no {MANIFEST}; corpus is missing or incomplete") from None
        if d.get("schema") != SCHEMA:
            raise DataError(f"unsupported corpus schema {d.get('schema')}")
        known = {"schema", "seed", "config", "config_hash", "records"}
        return cls(root, d["records"], d["config"], d["config_hash"], d["seed"], d["schema"],
                   {k: v for k, v in d.items() if k not in known})


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def split_pool(n_train: int, seed: int):
    """Shuffle the training pool; first round(0.8 n) go to train, the rest to valid."""
    order = np.random.default_rng([seed, 1]).permutation(n_train)
    n_tr = int(round(0.8 * n_train))
    return sorted(order[:n_tr].tolist()), sorted(order[n_tr:].tolist())


def _phantom_seed(seed, pool, index):
    # pools: 0 training, 1 test, 2 dictionary
    return int(np.random.SeedSequence([seed, pool, index]).generate_state(1)[0])


def process_all(lr: Image, dictionary, regressors, sparsity=3):
    return {m: classical_sr.process(m, lr, dictionary, regressors, sparsity) for m in SRMethod}


def build_corpus(n_train: int, n_test: int, cfg: PhantomConfig, seed: int, root,
                 dict_cfg: DictionaryConfig | None = None) -> CorpusManifest:
    """Generate phantoms, degrade them, run all five processors and write the manifest."""
    dict_cfg = dict_cfg or DictionaryConfig()
    root = Path(root)
    if n_train < 1 or n_test < 0:
        raise DataError("need at least one training image")
    if (root / MANIFEST).exists():
        (root / MANIFEST).unlink()
    full_config = {"phantom": cfg.to_dict(), "dictionary": asdict(dict_cfg),
                   "n_train": n_train, "n_test": n_test, "seed": seed}
    chash = config_hash(full_config)

    held_out = [generate_phantom(cfg, _phantom_seed(seed, 2, i)) for i in range(dict_cfg.n_images)]
    dictionary, regressors = classical_sr.train_dictionary(
        held_out, n_atoms=dict_cfg.n_atoms, sparsity=dict_cfg.sparsity, iters=dict_cfg.iters,
        seed=dict_cfg.seed)
    classical_sr.save_dictionary(root / "dictionary", dictionary, regressors)

    train_idx, valid_idx = split_pool(n_train, seed)
    jobs = [("train", 0, i) for i in train_idx] + [("valid", 0, i) for i in valid_idx]
    jobs += [("test", 1, i) for i in range(n_test)]
    records = []
    for split, pool, i in jobs:
        image_id = f"{'pool' if pool == 0 else 'test'}{i:04d}"
        pseed = _phantom_seed(seed, pool, i)
        hr = generate_phantom(cfg, pseed)
        lr = downsample_kspace(hr)
        d = root / split / image_id
        save_image(d / "hr.raw", hr)
        save_image(d / "lr.raw", lr)
        for m, plr in process_all(lr, dictionary, regressors, dict_cfg.sparsity).items():
            save_image(d / f"plr_{m.slug}.raw", plr)
        records.append({"id": image_id, "split": split, "dims": list(hr.shape), "seed": pseed})
        log.info("corpus: %s/%s", split, image_id)
    manifest = CorpusManifest(root, records, full_config, chash, seed,
                              extra={"dictionary": "dictionary"})
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / MANIFEST)
    return manifest


def load_dictionary(manifest: CorpusManifest):
    return classical_sr.load_dictionary(manifest.root / manifest.extra.get("dictionary",
                                                                         "dictionary"))


# ------------------------------------------------------------------ loading

class SplitDataset:
    """Images of one role from one split, in sorted-id order."""

    def __init__(self, manifest: CorpusManifest, split: str, role, pred_root=None):
        self.manifest = manifest
        self.split = split
        self.role = _normalize_role(role)
        self.ids = manifest.ids(split)
        self.pred_root = Path(pred_root) if pred_root is not None else None
        if self.role == "prediction_stack" and self.pred_root is None:
            raise DataError("prediction stacks need the directory holding GAN predictions")

    def __len__(self):
        return len(self.ids)

    def load(self, image_id):
        if self.role == "prediction_stack":
            from ensr.ensemble import PredictionStack
            return PredictionStack({m: self._read(prediction_path(self.pred_root, m, self.split,
                                                                  image_id), image_id, m.slug)
                                    for m in SRMethod})
        return self._read(self.manifest.path(image_id, self.role), image_id, self.role)

    @staticmethod
    def _read(path, image_id, role):
        if not Path(path).exists():
            raise DataError(f"image {image_id}: missing {role} file {path}")
        return load_image(path)

    def __iter__(self):
        for image_id in self.ids:
            yield image_id, self.load(image_id)

    def shuffled(self, seed):
        order = np.random.default_rng(seed).permutation(len(self.ids))
        for k in order:
            yield self.ids[k], self.load(self.ids[k])


def _normalize_role(role):
    if isinstance(role, SRMethod):
        return f"plr_{role.slug}"
    if role in ROLES or role == "prediction_stack":
        return role
    raise DataError(f"unknown role {role!r}; expected one of {ROLES + ('prediction_stack',)}")


def load_split(manifest, split: str, role, pred_root=None) -> SplitDataset:
    if not isinstance(manifest, CorpusManifest):
        manifest = CorpusManifest.load(manifest)
    return SplitDataset(manifest, split, role, pred_root)


def prediction_path(pred_root, method: SRMethod, split: str, image_id: str) -> Path:
    return Path(pred_root) / SRMethod(method).slug / split / f"{image_id}.raw"
