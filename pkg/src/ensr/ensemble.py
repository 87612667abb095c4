"""Combining per-prior GAN predictions: pixel averaging and a CNN integrator.

The integrator reuses the generator architecture with one input channel per
prediction. Its checkpoint records the channel order it was trained with and
refuses stacks assembled in any other order.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ensr import autodiff as ad
from ensr import gan, metrics
from ensr.errors import ConfigurationError, DataError, DimensionError, TrainingDiverged, UsageError
from ensr.image_core import Image, SRMethod, patch_offsets

log = logging.getLogger(__name__)

ALL_METHODS = tuple(SRMethod)
THREE_METHODS = (SRMethod.ZIP, SRMethod.BI, SRMethod.NEDI)


def default_methods(n_inputs: int):
    if n_inputs == 5:
        return ALL_METHODS
    if n_inputs == 3:
        return THREE_METHODS
    raise ConfigurationError(f"no default input set for {n_inputs} predictions; pass methods")


def order_hash(methods) -> str:
    text = ",".join(SRMethod(m).name for m in methods)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class PredictionStack:
    """Per-method predictions of one image, in a fixed channel order.

    ``members`` is a mapping or a sequence of (method, Image) pairs. Unless
    ``order`` is given, channels follow SRMethod order.
    """

    def __init__(self, members, order=None):
        items = dict(members.items() if hasattr(members, "items") else members)
        if not items:
            raise UsageError("prediction stack is empty")
        items = {SRMethod(k): v for k, v in items.items()}
        methods = tuple(sorted(items)) if order is None else tuple(SRMethod(m) for m in order)
        if set(methods) != set(items) or len(methods) != len(items):
            raise UsageError("stack order must list each member exactly once")
        dims = {img.shape for img in items.values()}
        if len(dims) != 1:
            raise DimensionError(f"stack members differ in dims: {sorted(dims)}")
        self.methods = methods
        self.images = tuple(items[m] for m in methods)

    @property
    def shape(self):
        return self.images[0].shape

    @property
    def intensity_max(self):
        return self.images[0].intensity_max

    @property
    def order_hash(self) -> str:
        return order_hash(self.methods)

    def __len__(self):
        return len(self.methods)

    def __getitem__(self, method):
        return self.images[self.methods.index(SRMethod(method))]

    def subset(self, methods) -> "PredictionStack":
        return PredictionStack([(m, self[m]) for m in methods], order=methods)

    def as_array(self) -> np.ndarray:
        """(C, H, W) in channel order."""
        return np.stack([img.data for img in self.images])


def average_ensemble(stack: PredictionStack) -> Image:
    # accumulate in canonical method order so any permutation gives identical bits
    ordered = [stack.images[stack.methods.index(m)] for m in sorted(stack.methods)]
    total = np.zeros(stack.shape)
    for img in ordered:
        total += img.data
    return Image(total / len(ordered), stack.intensity_max)


def build_integrator(n_inputs: int = 5, seed: int = 0, width: float = 1.0, methods=None,
                     allow_any: bool = False, residual: bool = False) -> ad.ParamStore:
    if methods is None:
        if n_inputs not in (3, 5) and not allow_any:
            raise ConfigurationError(f"integrator takes 3 or 5 predictions, got {n_inputs}")
        methods = ALL_METHODS if n_inputs == 5 else THREE_METHODS if n_inputs == 3 else ()
    methods = tuple(SRMethod(m) for m in methods)
    if methods and len(methods) != n_inputs:
        raise ConfigurationError(f"{len(methods)} methods listed for {n_inputs} inputs")
    store = gan.build_generator(seed, n_inputs, width, residual)
    store.meta.update(arch="integrator", methods=[m.name for m in methods],
                      order_hash=order_hash(methods) if methods else None)
    return store


def _check_order(model: ad.ParamStore, stack: PredictionStack):
    want = model.meta.get("order_hash")
    if model.meta["in_channels"] != len(stack):
        raise ConfigurationError(f"integrator expects {model.meta['in_channels']} "
                                 f"predictions, stack has {len(stack)}")
    if want is not None and want != stack.order_hash:
        raise ConfigurationError(
            f"stack order {[m.name for m in stack.methods]} does not match the "
            f"integrator's training order {model.meta.get('methods')}")


def integrate(model: ad.ParamStore, stack: PredictionStack) -> Image:
    _check_order(model, stack)
    with ad.no_grad():
        out = gan.generator_forward(model, stack.as_array()[None])
    return Image(out.data[0, 0], stack.intensity_max)


@dataclass
class IntegratorConfig:
    epochs: int = 80
    lr: float = 2e-5
    batch: int = 4
    width: float = 1.0
    seed: int = 0
    patch: int = 80
    stride: int = 40
    residual: bool = False


def patch_pairs(pairs, patch: int, stride: int):
    """Cut (stack, HR) pairs on the GAN patch grid: arrays (N, C, P, P), (N, 1, P, P)."""
    xs, ys = [], []
    for stack, hr in pairs:
        if stack.shape != hr.shape:
            raise DimensionError(f"stack dims {stack.shape} differ from HR {hr.shape}")
        arr = stack.as_array()
        for r, c in patch_offsets(hr.height, hr.width, patch, stride):
            xs.append(arr[:, r:r + patch, c:c + patch])
            ys.append(hr.data[None, r:r + patch, c:c + patch])
    return np.stack(xs), np.stack(ys)


def train_integrator(pairs, cfg: IntegratorConfig | None = None, out_dir=None,
                     methods=None, resume: bool = True):
    """MAE-supervised training on patches; returns (model, per-epoch history)."""
    cfg = cfg or IntegratorConfig()
    pairs = list(pairs)
    if not pairs:
        raise DataError("no training stacks")
    methods = tuple(methods) if methods is not None else pairs[0][0].methods
    for stack, _ in pairs:
        if stack.methods != methods:
            raise DataError(f"stack with methods {[m.name for m in stack.methods]} does not "
                            f"match {[m.name for m in methods]}")
    x, y = patch_pairs(pairs, cfg.patch, cfg.stride)
    model = build_integrator(len(methods), cfg.seed, cfg.width, methods, allow_any=True,
                             residual=cfg.residual)
    history, start = [], 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None and resume and (out_dir / "integrator" / "manifest.json").exists():
        model = ad.ParamStore.load(out_dir / "integrator")
        history = read_history(out_dir / "losses.csv")
        start = len(history)
    last_good = out_dir if start else None
    for epoch in range(start, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        total, batches = 0.0, 0
        for b0 in range(0, len(x), cfg.batch):
            idx = order[b0:b0 + cfg.batch]
            model.zero_grad()
            loss = ad.mae(gan.generator_forward(model, x[idx]), y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"integrator: non-finite MAE at epoch {epoch + 1}",
                                       last_good)
            loss.backward()
            ad.adam_step(model, lr=cfg.lr)
            total += value
            batches += 1
        history.append({"epoch": epoch + 1, "L_mae": total / batches})
        log.info("integrator epoch %d: L_mae=%.4g", epoch + 1, total / batches)
        if out_dir is not None:
            model.save(out_dir / "integrator", {"epoch": epoch + 1, "config": asdict(cfg)})
            write_history(out_dir / "losses.csv", history)
            last_good = out_dir
    return model, history


def write_history(path, history):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_mae"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["L_mae"]))])
    tmp.replace(path)


def read_history(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "L_mae": float(r["L_mae"])}
                for r in csv.DictReader(fh)]


# ------------------------------------------------------------------ ablation

def ablation_grid(stacks, references, models):
    """PSNR/SSIM for {3, 5} inputs x {average, CNN}.

    ``models`` maps 3 and 5 to trained integrators (a missing entry skips that
    CNN cell). Returns rows with keys inputs, mode, psnr_mean, psnr_std,
    ssim_mean, ssim_std.
    """
    stacks, references = list(stacks), list(references)
    rows = []
    for n in (3, 5):
        subsets = [s.subset(default_methods(n)) for s in stacks]
        for mode in ("average", "cnn"):
            if mode == "cnn" and n not in models:
                continue
            if mode == "average":
                preds = [average_ensemble(s) for s in subsets]
            else:
                preds = [integrate(models[n], s) for s in subsets]
            summary = metrics.evaluate_pairs(list(zip(preds, references)))
            pm, ps = summary.psnr_mean_std
            sm, ss = summary.ssim_mean_std
            rows.append({"inputs": n, "mode": mode, "psnr_mean": pm, "psnr_std": ps,
                         "ssim_mean": sm, "ssim_std": ss})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["inputs", "mode", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for r in rows:
            w.writerow([r["inputs"], r["mode"]] + [repr(float(r[k])) for k in
                       ("psnr_mean", "psnr_std", "ssim_mean", "ssim_std")])
