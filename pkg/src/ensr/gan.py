"""Per-prior WGAN-GP super-resolution networks.

The generator is a seven-block encoder-decoder (conv + layer norm + ReLU per
layer) whose last three blocks also receive the outputs of the first three.
The discriminator is five conv + layer norm + leaky-ReLU blocks followed by
global average pooling. Generators are trained with

    L_G = L_adv + l1 * L_gra + l2 * L_mse + l3 * L_per

and the critic with the Wasserstein loss plus gradient penalty.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ensr import autodiff as ad
from ensr.errors import DataError, DimensionError, TrainingDiverged, UsageError
from ensr.image_core import Image, SRMethod

log = logging.getLogger(__name__)

GENERATOR_PLAN = ((32, 32), (64, 64), (128, 128), (256, 256), (128, 128), (64, 64), (32, 1))
# block index -> earlier block whose output is concatenated onto its input
SKIPS = {4: 2, 5: 1, 6: 0}
DISCRIMINATOR_PLAN = ((64, 2), (128, 2), (256, 2), (512, 1), (1, 1))
FEATURE_PLAN = (16, 32, 64, 64, 64)
KERNEL = 3
LRELU_SLOPE = 0.2


def _scaled(c, width):
    return max(1, int(round(c * width)))


# ------------------------------------------------------------------ architectures

@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    width: float = 1.0

    def blocks(self):
        """Channel plan per block; the final single-channel layer is not scaled."""
        out = []
        for i, (a, b) in enumerate(GENERATOR_PLAN):
            b = 1 if i == len(GENERATOR_PLAN) - 1 else _scaled(b, self.width)
            out.append((_scaled(a, self.width), b))
        return out

    def layers(self):
        """(name, in_channels, out_channels, normalized) for every conv layer."""
        blocks = self.blocks()
        outs = []
        layers = []
        prev = self.in_channels
        for i, (c1, c2) in enumerate(blocks):
            cin = prev + (outs[SKIPS[i]] if i in SKIPS else 0)
            last = i == len(blocks) - 1
            layers.append((f"g{i + 1}a", cin, c1, True))
            layers.append((f"g{i + 1}b", c1, c2, not last))
            outs.append(c2)
            prev = c2
        return layers

    def layer_specs(self):
        specs = []
        for name, _, cout, normed in self.layers():
            specs.append(ad.LayerSpec("conv2d", cout, KERNEL, 1, KERNEL // 2, name=name))
            if normed:
                specs += [ad.LayerSpec("layernorm", name=name), ad.LayerSpec("relu", name=name)]
        return specs


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    width: float = 1.0

    def layers(self):
        layers = []
        prev = self.in_channels
        for i, (c, s) in enumerate(DISCRIMINATOR_PLAN):
            c = 1 if i == len(DISCRIMINATOR_PLAN) - 1 else _scaled(c, self.width)
            layers.append((f"d{i + 1}", prev, c, s))
            prev = c
        return layers

    def layer_specs(self):
        specs = []
        for name, _, c, s in self.layers():
            specs += [ad.LayerSpec("conv2d", c, KERNEL, s, KERNEL // 2, name=name),
                      ad.LayerSpec("layernorm", name=name),
                      ad.LayerSpec("lrelu", slope=LRELU_SLOPE, name=name)]
        return specs + [ad.LayerSpec("gap")]


def _add_conv(store, rng, name, cin, cout, norm):
    store.add(f"{name}.w", ad.he_uniform(rng, (cout, cin, KERNEL, KERNEL)))
    store.add(f"{name}.b", np.zeros(cout))
    if norm:
        store.add(f"{name}.gamma", np.ones(cout))
        store.add(f"{name}.beta", np.zeros(cout))


def build_generator(seed: int = 0, in_channels: int = 1, width: float = 1.0,
                    residual: bool = False) -> ad.ParamStore:
    """With ``residual`` the network predicts a correction added to the
    channel mean of its input instead of the image itself."""
    spec = GeneratorSpec(in_channels, width)
    rng = np.random.default_rng(seed)
    store = ad.ParamStore({"arch": "generator", "in_channels": in_channels, "width": width,
                           "seed": seed, "kernel": KERNEL, "skips": "1->7,2->6,3->5",
                           "residual": bool(residual)})
    for name, cin, cout, norm in spec.layers():
        _add_conv(store, rng, name, cin, cout, norm)
    return store


def build_discriminator(seed: int = 0, in_channels: int = 1, width: float = 1.0) -> ad.ParamStore:
    spec = DiscriminatorSpec(in_channels, width)
    rng = np.random.default_rng(seed)
    store = ad.ParamStore({"arch": "discriminator", "in_channels": in_channels,
                           "width": width, "seed": seed, "kernel": KERNEL})
    for name, cin, cout, _ in spec.layers():
        _add_conv(store, rng, name, cin, cout, True)
    return store


def _conv(store, name, x, stride=1):
    y = ad.conv2d(x, store[f"{name}.w"], stride, KERNEL // 2, name=name)
    return y + ad.reshape(store[f"{name}.b"], (1, -1, 1, 1))


def _norm(store, name, y):
    return ad.layer_norm(y, store[f"{name}.gamma"], store[f"{name}.beta"])


def generator_forward(store: ad.ParamStore, x) -> ad.Tensor:
    """(N, in_channels, H, W) -> (N, 1, H, W)."""
    x = ad.as_tensor(x)
    spec = GeneratorSpec(store.meta["in_channels"], store.meta["width"])
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"generator expects (N, {spec.in_channels}, H, W) input, "
                             f"got {x.shape}")
    outs = []
    h = x
    n_blocks = len(GENERATOR_PLAN)
    for i in range(n_blocks):
        if i in SKIPS:
            h = ad.concat([h, outs[SKIPS[i]]], axis=1)
        h = ad.relu(_norm(store, f"g{i + 1}a", _conv(store, f"g{i + 1}a", h)))
        h = _conv(store, f"g{i + 1}b", h)
        if i < n_blocks - 1:
            h = ad.relu(_norm(store, f"g{i + 1}b", h))
        outs.append(h)
    if store.meta.get("residual"):
        h = h + x.mean(axis=1, keepdims=True)
    return h


def discriminator_forward(store: ad.ParamStore, x) -> ad.Tensor:
    """(N, C, H, W) -> (N, 1) critic scores."""
    x = ad.as_tensor(x)
    spec = DiscriminatorSpec(store.meta["in_channels"], store.meta["width"])
    h = x
    for name, _, _, stride in spec.layers():
        h = ad.leaky_relu(_norm(store, name, _conv(store, name, h, stride)), LRELU_SLOPE)
    return ad.global_avg_pool(h)


# ------------------------------------------------------------------ feature extractor

class FeatureExtractor:
    """Fixed random conv stack standing in for pretrained perceptual features.

    Any callable mapping an (N, 1, H, W) tensor to a feature tensor can replace
    it (pass it as ``phi`` to the losses).
    """

    def __init__(self, seed: int = 0, channels=FEATURE_PLAN, layer_index: int | None = None):
        self.seed = seed
        self.channels = tuple(channels)
        self.layer_index = len(self.channels) if layer_index is None else layer_index
        if not 1 <= self.layer_index <= len(self.channels):
            raise UsageError("feature layer index out of range")
        rng = np.random.default_rng(seed)
        self.params = ad.ParamStore({"arch": "feature", "seed": seed})
        prev = 1
        for i, c in enumerate(self.channels[:self.layer_index]):
            self.params.add(f"f{i + 1}.w", ad.he_uniform(rng, (c, prev, KERNEL, KERNEL)))
            self.params.add(f"f{i + 1}.b", np.zeros(c))
            prev = c
        self.params.frozen(True)

    def __call__(self, x):
        h = ad.as_tensor(x)
        for i in range(self.layer_index):
            h = ad.relu(_conv(self.params, f"f{i + 1}", h))
        return h

    def describe(self):
        return {"kind": "random-conv", "seed": self.seed, "channels": list(self.channels),
                "layer": self.layer_index}


def identity_extractor(x):
    return ad.as_tensor(x)


# ------------------------------------------------------------------ losses

def adv_loss(d_out_fake) -> ad.Tensor:
    return -ad.as_tensor(d_out_fake).mean()


def image_gradients(x):
    """Forward differences along x (width) and y (height) of an (N, C, H, W) tensor."""
    dx = x[:, :, :, 1:] - x[:, :, :, :-1]
    dy = x[:, :, 1:, :] - x[:, :, :-1, :]
    return dx, dy


def gradient_loss(fake, real) -> ad.Tensor:
    fake, real = ad.as_tensor(fake), ad.as_tensor(real)
    if fake.shape != real.shape:
        raise DimensionError(f"gradient loss shapes differ: {fake.shape} vs {real.shape}")
    fx, fy = image_gradients(fake)
    rx, ry = image_gradients(real)
    return ad.mse(fx, rx) + ad.mse(fy, ry)


def mse_loss(fake, real) -> ad.Tensor:
    fake, real = ad.as_tensor(fake), ad.as_tensor(real)
    if fake.shape != real.shape:
        raise DimensionError(f"mse shapes differ: {fake.shape} vs {real.shape}")
    return ad.mse(fake, real)


def perceptual_loss(fake, real, phi) -> ad.Tensor:
    with ad.no_grad():
        target = phi(ad.as_tensor(real)).detach()
    return ad.mse(phi(fake), target)


def gradient_penalty(critic, real, fake, seed=0) -> ad.Tensor:
    """Mean of (||grad critic(x_hat)|| - 1)^2 on random interpolates of real and fake.

    ``critic`` maps an (N, C, H, W) tensor to (N, 1). ``seed`` is an int or a
    numpy Generator; one uniform mixing weight is drawn per sample.
    """
    real = np.asarray(ad.as_tensor(real).data)
    fake = np.asarray(ad.as_tensor(fake).data)
    if real.shape != fake.shape:
        raise DimensionError("real and fake batches differ in shape")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.uniform(size=(real.shape[0],) + (1,) * (real.ndim - 1))
    x_hat = ad.Tensor(eps * real + (1.0 - eps) * fake, requires_grad=True)
    (g,) = ad.grad(critic(x_hat).sum(), [x_hat], create_graph=True)
    axes = tuple(range(1, real.ndim))
    norm = ad.sqrt((g * g).sum(axis=axes) + 1e-12)
    return ((norm - 1.0) ** 2).mean()


@dataclass(frozen=True)
class LossWeights:
    gradient: float = 0.1
    mse: float = 0.1
    perceptual: float = 1.0
    gp_coef: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise UsageError(f"loss weight {k} must be finite and >= 0, got {v}")


def generator_objective(G, D, phi, plr, hr, weights: LossWeights):
    """Total generator loss and its four terms (as floats)."""
    fake = generator_forward(G, plr)
    terms = {
        "L_adv": adv_loss(discriminator_forward(D, fake)),
        "L_gra": gradient_loss(fake, hr),
        "L_mse": mse_loss(fake, hr),
        "L_per": perceptual_loss(fake, hr, phi),
    }
    total = (terms["L_adv"] + weights.gradient * terms["L_gra"]
             + weights.mse * terms["L_mse"] + weights.perceptual * terms["L_per"])
    return total, {k: v.item() for k, v in terms.items()}


def discriminator_objective(D, real, fake, weights: LossWeights, rng):
    critic = lambda x: discriminator_forward(D, x)  # noqa: E731
    wdist = critic(fake).mean() - critic(real).mean()
    return wdist + weights.gp_coef * gradient_penalty(critic, real, fake, rng)


# ------------------------------------------------------------------ training

@dataclass
class GANConfig:
    epochs: int = 50
    lr: float = 2e-5
    batch: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    n_critic: int = 5
    beta1: float = 0.0
    beta2: float = 0.9
    width: float = 1.0
    seed: int = 0
    feature_seed: int = 1234
    residual: bool = False


LOSS_COLUMNS = ("epoch", "L_adv", "L_gra", "L_mse", "L_per", "L_D")


class GANTrainer:
    """Owns one generator/critic pair and performs alternating updates."""

    def __init__(self, cfg: GANConfig, phi=None, G=None, D=None):
        self.cfg = cfg
        self.G = G if G is not None else build_generator(cfg.seed, 1, cfg.width, cfg.residual)
        self.D = D if D is not None else build_discriminator(cfg.seed + 1, 1, cfg.width)
        self.phi = phi if phi is not None else FeatureExtractor(cfg.feature_seed)
        self.rng = np.random.default_rng(cfg.seed + 2)

    def d_step(self, plr, hr):
        with ad.no_grad():
            fake = generator_forward(self.G, plr).data
        self.D.zero_grad()
        loss = discriminator_objective(self.D, hr, fake, self.cfg.weights, self.rng)
        value = loss.item()
        if not np.isfinite(value):
            return value
        loss.backward()
        ad.adam_step(self.D, lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2)
        return value

    def g_step(self, plr, hr):
        self.G.zero_grad()
        self.D.frozen(True)
        try:
            total, terms = generator_objective(self.G, self.D, self.phi, plr, hr,
                                               self.cfg.weights)
            if np.isfinite(total.item()):
                total.backward()
                ad.adam_step(self.G, lr=self.cfg.lr, beta1=self.cfg.beta1,
                             beta2=self.cfg.beta2)
        finally:
            self.D.frozen(False)
        terms["L_G"] = total.item()
        return terms

    def step(self, plr, hr):
        d_losses = [self.d_step(plr, hr) for _ in range(self.cfg.n_critic)]
        terms = self.g_step(plr, hr)
        terms["L_D"] = float(np.mean(d_losses))
        return terms


def _as_batch(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr[:, None] if arr.ndim == 3 else arr


def train_gan(plr, hr, method: SRMethod, cfg: GANConfig | None = None, out_dir=None,
              phi=None, resume: bool = True):
    """Train one generator on paired (PLR, HR) patches of shape (N, P, P).

    Writes ``generator/``, ``discriminator/`` and ``losses.csv`` under
    ``out_dir`` after every epoch. Returns (generator store, per-epoch history).
    """
    cfg = cfg or GANConfig()
    method = SRMethod(method)
    plr, hr = _as_batch(plr), _as_batch(hr)
    if len(plr) == 0 or plr.shape != hr.shape:
        raise DataError(f"need a non-empty paired dataset, got {plr.shape} and {hr.shape}")
    trainer = GANTrainer(cfg, phi)
    history = []
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None and resume and (out_dir / "generator" / "manifest.json").exists():
        trainer.G = ad.ParamStore.load(out_dir / "generator")
        trainer.D = ad.ParamStore.load(out_dir / "discriminator")
        history = read_loss_csv(out_dir / "losses.csv")
        start = len(history)
    last_good = out_dir if start else None
    n = len(plr)
    for epoch in range(start, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        # per-epoch penalty stream so a resumed run replays the same draws
        trainer.rng = np.random.default_rng([cfg.seed + 2, epoch])
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        batches = 0
        for b0 in range(0, n, cfg.batch):
            idx = order[b0:b0 + cfg.batch]
            terms = trainer.step(plr[idx], hr[idx])
            bad = [k for k in sums if not np.isfinite(terms[k])]
            if bad or not np.isfinite(terms["L_G"]):
                raise TrainingDiverged(
                    f"{method.name} GAN: non-finite {bad or ['L_G']} at epoch {epoch + 1}, "
                    f"batch {batches + 1}", last_good)
            for k in sums:
                sums[k] += terms[k]
            batches += 1
        row = {"epoch": epoch + 1, **{k: v / batches for k, v in sums.items()}}
        history.append(row)
        log.info("%s epoch %d: %s", method.name, epoch + 1,
                 ", ".join(f"{k}={row[k]:.4g}" for k in LOSS_COLUMNS[1:]))
        if out_dir is not None:
            extra = {"method": method.name, "epoch": epoch + 1, "config": _cfg_dict(cfg)}
            trainer.G.meta["method"] = method.name
            trainer.G.save(out_dir / "generator", extra)
            trainer.D.save(out_dir / "discriminator", extra)
            write_loss_csv(out_dir / "losses.csv", history)
            last_good = out_dir
    return trainer.G, history


def _cfg_dict(cfg):
    d = asdict(cfg)
    return d


def write_loss_csv(path, history, columns=LOSS_COLUMNS):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in columns[1:]])
    tmp.replace(path)


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# ------------------------------------------------------------------ inference

def predict(G: ad.ParamStore, plr: Image) -> Image:
    """Whole-image generator inference; output has the input's dims."""
    if G.meta.get("in_channels", 1) != 1:
        raise DimensionError("predict expects a single-channel generator")
    with ad.no_grad():
        out = generator_forward(G, plr.data[None, None])
    return Image(out.data[0, 0], plr.intensity_max)
