"""Command-line entry point: every pipeline stage as a subcommand plus ``run-all``."""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from ensr import autodiff as ad
from ensr import classical_sr, data_pipeline as dp, ensemble as ens, gan, metrics
from ensr.errors import (ConfigurationError, DataError, DimensionError, TrainingDiverged,
                         UsageError)
from ensr.image_core import Image, SRMethod, patch_offsets
from ensr.io import load_image, save_image, write_raw
from ensr.kspace import downsample_kspace, fft2

log = logging.getLogger("ensr")

# exit status per failing stage
EXIT_CODES = {
    "config": 2,
    "make-corpus": 3,
    "train-gan": 4,
    "predict": 5,
    "train-ensemble": 6,
    "evaluate": 7,
    "io": 8,
}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # corpus
    dims: int = 320
    n_train: int = 10
    n_test: int = 4
    noise_sigma: float = 0.01
    texture: float = 0.04
    dict_atoms: int = 1024
    dict_images: int = 4
    dict_iters: int = 10
    # patches and networks
    patch: int = 80
    stride: int = 40
    width: float = 1.0
    residual: bool = False
    # GAN
    gan_epochs: int = 50
    gan_lr: float = 2e-5
    gan_batch: int = 64
    n_critic: int = 5
    gp_coef: float = 10.0
    lambda_gra: float = 0.1
    lambda_mse: float = 0.1
    lambda_per: float = 1.0
    feature_seed: int = 1234
    # ensemble
    ens_epochs: int = 80
    ens_lr: float = 2e-5
    ens_batch: int = 4
    ens_inputs: int = 5
    ens_seed: int = 0
    jobs: int = 0

    def __post_init__(self):
        if self.dims % 4:
            raise ConfigurationError(f"dims must be a multiple of 4, got {self.dims}")
        if self.patch > self.dims or self.stride < 1 or self.patch < 8:
            raise ConfigurationError("patch must lie in [8, dims] and stride must be >= 1")
        if self.ens_inputs not in (3, 5):
            raise ConfigurationError("ens_inputs must be 3 or 5")
        if self.width <= 0:
            raise ConfigurationError("width must be positive")

    # keys that change neither corpus nor weights
    RUNTIME_KEYS = ("jobs",)

    def gan_config(self, method: SRMethod) -> gan.GANConfig:
        return gan.GANConfig(
            epochs=self.gan_epochs, lr=self.gan_lr, batch=self.gan_batch,
            weights=gan.LossWeights(self.lambda_gra, self.lambda_mse, self.lambda_per,
                                    self.gp_coef),
            n_critic=self.n_critic, width=self.width,
            seed=self.seed * 100 + 10 * int(method), feature_seed=self.feature_seed,
            residual=self.residual)

    def integrator_config(self, seed=None) -> ens.IntegratorConfig:
        return ens.IntegratorConfig(self.ens_epochs, self.ens_lr, self.ens_batch, self.width,
                                    self.ens_seed if seed is None else seed, self.patch,
                                    self.stride, self.residual)

    def phantom_config(self) -> dp.PhantomConfig:
        return dp.PhantomConfig(dims=(self.dims, self.dims), noise_sigma=self.noise_sigma,
                                texture=self.texture)

    def dictionary_config(self) -> dp.DictionaryConfig:
        return dp.DictionaryConfig(n_atoms=self.dict_atoms, n_images=self.dict_images,
                                   iters=self.dict_iters, seed=self.seed)

    def corpus_subset(self):
        keys = ("seed", "dims", "n_train", "n_test", "noise_sigma", "texture", "dict_atoms",
                "dict_images", "dict_iters")
        return {k: getattr(self, k) for k in keys}


FULL = RunConfig()

DESK = replace(FULL, dims=64, n_train=10, n_test=4, dict_atoms=128, dict_iters=5,
               patch=32, stride=16, width=0.25, residual=True, gan_epochs=5, gan_lr=1e-3, gan_batch=8,
               ens_epochs=5, ens_lr=1e-3, ens_batch=4)

PRESETS = {"full": FULL, "desk": DESK}

# always reported: choices the source leaves open or that substitute for it
STANDING_DEVIATIONS = (
    "perceptual features: seeded random 5-layer conv stack (16-32-64-64-64) replaces VGG19",
    "kernel size 3 for every convolution",
    "gp_coef 10, n_critic 5, Adam betas (0, 0.9) for the GANs",
    "skip pairing 1->7, 2->6, 3->5",
    "generator output conv has no layer norm or ReLU",
)


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _coerce(name, text):
    f = {f.name: f for f in fields(RunConfig)}.get(name)
    if f is None:
        raise ConfigurationError(f"unknown config key {name!r}")
    kind = {"int": int, "float": float, "bool": _parse_bool}[f.type]
    try:
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {text!r} as {f.type}") from None


def parse_config(text: str, base: RunConfig = FULL) -> RunConfig:
    """Read a flat ``key = value`` document; comments start with '#'."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    values = {}
    for key, raw in cp["run"].items():
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigurationError(f"unknown preset {raw!r}")
            base = PRESETS[raw]
            continue
        values[key] = _coerce(key, raw)
    return replace(base, **values)


def load_config(path=None, preset="full", overrides=None) -> RunConfig:
    cfg = PRESETS[preset]
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    if overrides:
        cfg = replace(cfg, **{k: _coerce(k, str(v)) for k, v in overrides.items()})
    return cfg


def echo_config(cfg: RunConfig) -> str:
    """Canonical text form; deviations from the published settings appear as comments."""
    lines = ["# deviations:"]
    lines += [f"#   {d}" for d in STANDING_DEVIATIONS]
    for f in fields(RunConfig):
        v, ref = getattr(cfg, f.name), getattr(FULL, f.name)
        if v != ref and f.name not in RunConfig.RUNTIME_KEYS:
            lines.append(f"#   {f.name} = {v!r} (published setting {ref!r})")
    lines += [f"{f.name} = {getattr(cfg, f.name)!r}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    body = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)
            if f.name not in RunConfig.RUNTIME_KEYS}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ pipeline stages

class Layout:
    def __init__(self, out):
        self.root = Path(out)
        self.corpus = self.root / "corpus"
        self.gan = self.root / "gan"
        self.predictions = self.root / "predictions"
        self.ensemble = self.root / "ensemble"
        self.results = self.root / "results"

    def gan_dir(self, method):
        return self.gan / SRMethod(method).slug

    def integrator_dir(self, n_inputs, seed=0):
        return self.ensemble / (f"cnn{n_inputs}" + (f"_seed{seed}" if seed else ""))


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except (ConfigurationError, DataError, DimensionError, UsageError,
                    FloatingPointError, OSError) as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@_stage("make-corpus")
def stage_corpus(cfg: RunConfig, layout: Layout) -> dp.CorpusManifest:
    want = dp.config_hash(cfg.corpus_subset())
    try:
        m = dp.CorpusManifest.load(layout.corpus)
        if m.extra.get("run_hash") == want:
            log.info("corpus present, skipping")
            return m
    except DataError:
        pass
    m = dp.build_corpus(cfg.n_train, cfg.n_test, cfg.phantom_config(), cfg.seed, layout.corpus,
                        cfg.dictionary_config())
    m.extra["run_hash"] = want
    _write_json(layout.corpus / dp.MANIFEST, m.to_json())
    return m


def gan_training_pairs(manifest: dp.CorpusManifest, method: SRMethod, patch: int, stride: int):
    plr, hr = [], []
    hrs = dp.load_split(manifest, "train", "hr")
    plrs = dp.load_split(manifest, "train", method)
    for (_, h), (_, p) in zip(hrs, plrs):
        for r, c in patch_offsets(h.height, h.width, patch, stride):
            hr.append(h.data[r:r + patch, c:c + patch])
            plr.append(p.data[r:r + patch, c:c + patch])
    return np.stack(plr), np.stack(hr)


def _train_one_gan(args):
    cfg, corpus_root, method, out = args
    manifest = dp.CorpusManifest.load(corpus_root)
    plr, hr = gan_training_pairs(manifest, method, cfg.patch, cfg.stride)
    G, hist = gan.train_gan(plr, hr, method, cfg.gan_config(method), out)
    _write_json(Path(out) / "stage.json", {"config_hash": config_hash(cfg),
                                           "corpus_hash": manifest.config_hash,
                                           "epochs": len(hist)})
    return method


@_stage("train-gan")
def stage_gans(cfg: RunConfig, layout: Layout, manifest, methods=tuple(SRMethod)):
    jobs = [(cfg, manifest.root, m, layout.gan_dir(m)) for m in methods]
    workers = cfg.jobs or min(5, os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            list(pool.map(_train_one_gan, jobs))
    else:
        for job in jobs:
            _train_one_gan(job)


def load_generator(path) -> ad.ParamStore:
    return ad.ParamStore.load(Path(path) / "generator" if (Path(path) / "generator").exists()
                              else path)


@_stage("predict")
def stage_predict(cfg: RunConfig, layout: Layout, manifest, methods=tuple(SRMethod)):
    chash = config_hash(cfg)
    for m in methods:
        done = layout.predictions / m.slug / "stage.json"
        if done.exists() and json.loads(done.read_text()).get("config_hash") == chash:
            continue
        G = load_generator(layout.gan_dir(m))
        for split in dp.SPLITS:
            for image_id, plr in dp.load_split(manifest, split, m):
                save_image(dp.prediction_path(layout.predictions, m, split, image_id),
                           gan.predict(G, plr))
        _write_json(done, {"config_hash": chash, "corpus_hash": manifest.config_hash})


def _stacks(manifest, layout, split):
    return list(dp.load_split(manifest, split, "prediction_stack", layout.predictions))


@_stage("train-ensemble")
def stage_ensemble(cfg: RunConfig, layout: Layout, manifest, n_inputs=None, seed=None):
    n_inputs = n_inputs or cfg.ens_inputs
    seed = cfg.ens_seed if seed is None else seed
    methods = ens.default_methods(n_inputs)
    hrs = dict(dp.load_split(manifest, "train", "hr"))
    pairs = [(stack.subset(methods), hrs[i]) for i, stack in _stacks(manifest, layout, "train")]
    out = layout.integrator_dir(n_inputs, seed)
    model, _ = ens.train_integrator(pairs, cfg.integrator_config(seed), out, methods)
    _write_json(out / "stage.json", {"config_hash": config_hash(cfg), "mode": "cnn",
                                     "inputs": n_inputs, "corpus_hash": manifest.config_hash})
    return model


def _check_hashes(layout, manifest):
    for m in SRMethod:
        stamp = layout.predictions / m.slug / "stage.json"
        if stamp.exists() and json.loads(stamp.read_text())["corpus_hash"] != manifest.config_hash:
            raise DataError(f"predictions for {m.name} come from a different corpus")


@_stage("evaluate")
def stage_evaluate(cfg: RunConfig, layout: Layout, manifest, model, ablation=False):
    _check_hashes(layout, manifest)
    res = layout.results
    res.mkdir(parents=True, exist_ok=True)
    tests = _stacks(manifest, layout, "test")
    refs = dict(dp.load_split(manifest, "test", "hr"))
    final_dir = res / "ensemble"
    pairs = []
    methods = ens.default_methods(cfg.ens_inputs)
    for image_id, stack in tests:
        pred = ens.integrate(model, stack.subset(methods))
        save_image(final_dir / f"{image_id}.raw", pred)
        pairs.append((pred, refs[image_id]))
    summary = metrics.evaluate_pairs(pairs, [i for i, _ in tests])
    summary.write_csv(res / "metrics.csv")
    summary.pooled_curve.write_csv(res / "accuracy.csv")
    # per-prior GAN predictions for comparison
    rows = []
    for m in SRMethod:
        s = metrics.evaluate_pairs([(stack[m], refs[i]) for i, stack in tests])
        rows.append((f"gan_{m.slug}",) + s.psnr_mean_std + s.ssim_mean_std)
        s = metrics.evaluate_pairs([(p, refs[i]) for i, p in dp.load_split(manifest, "test", m)])
        rows.append((f"plr_{m.slug}",) + s.psnr_mean_std + s.ssim_mean_std)
    rows.append(("ensemble_cnn",) + summary.psnr_mean_std + summary.ssim_mean_std)
    with open(res / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    for m in SRMethod:
        src = layout.gan_dir(m) / "losses.csv"
        if src.exists():
            shutil.copyfile(src, res / f"losses_gan_{m.slug}.csv")
    src = layout.integrator_dir(cfg.ens_inputs, cfg.ens_seed) / "losses.csv"
    if src.exists():
        shutil.copyfile(src, res / "losses_ensemble.csv")
    if ablation:
        models = {cfg.ens_inputs: model}
        other = 3 if cfg.ens_inputs == 5 else 5
        models[other] = stage_ensemble(cfg, layout, manifest, other)
        grid = ens.ablation_grid([s for _, s in tests], [refs[i] for i, _ in tests], models)
        ens.write_ablation_csv(res / "ablation.csv", grid)
    return summary


def run_pipeline(cfg: RunConfig, out, ablation: bool = False):
    """make-corpus, train-gan x5, predict x5, train-ensemble, evaluate (resuming)."""
    layout = Layout(out)
    layout.root.mkdir(parents=True, exist_ok=True)
    (layout.root / "config.ini").write_text(echo_config(cfg))
    manifest = stage_corpus(cfg, layout)
    stage_gans(cfg, layout, manifest)
    stage_predict(cfg, layout, manifest)
    model = stage_ensemble(cfg, layout, manifest)
    return stage_evaluate(cfg, layout, manifest, model, ablation)


# ------------------------------------------------------------------ subcommands

def _cfg_from_args(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k in {f.name for f in fields(RunConfig)} and v is not None}
    return load_config(getattr(args, "config", None), getattr(args, "preset", "full"),
                       overrides)


def cmd_make_corpus(args):
    cfg = _cfg_from_args(args)
    m = dp.build_corpus(cfg.n_train, cfg.n_test, cfg.phantom_config(), cfg.seed, args.out,
                        cfg.dictionary_config())
    print(f"corpus with {len(m.records)} images written to {args.out}")


def cmd_downsample(args):
    hr = load_image(args.input)
    save_image(args.out, downsample_kspace(hr))
    if args.save_kspace:
        write_raw(args.save_kspace, fft2(hr).data)


def cmd_preprocess(args):
    lr = load_image(args.input)
    dictionary = regressors = None
    if args.dictionary:
        dictionary, regressors = classical_sr.load_dictionary(args.dictionary)
    methods = list(SRMethod) if args.method == "all" else [SRMethod.parse(args.method)]
    for m in methods:
        out = Path(args.out)
        target = out / f"plr_{m.slug}.raw" if len(methods) > 1 else out
        save_image(target, classical_sr.process(m, lr, dictionary, regressors))


def cmd_train_gan(args):
    cfg = _cfg_from_args(args)
    method = SRMethod.parse(args.method)
    manifest = dp.CorpusManifest.load(args.data)
    try:
        _train_one_gan((cfg, manifest.root, method, args.out))
    except (DataError, FloatingPointError, DimensionError) as exc:
        raise StageError("train-gan", exc) from exc


def cmd_predict(args):
    try:
        G = load_generator(args.ckpt)
        save_image(args.out, gan.predict(G, load_image(args.input)))
    except (ConfigurationError, DataError, DimensionError) as exc:
        raise StageError("predict", exc) from exc


def _read_stack_dir(path, methods=None):
    path = Path(path)
    found = {m: path / f"{m.slug}.raw" for m in SRMethod if (path / f"{m.slug}.raw").exists()}
    if methods is not None:
        missing = [m.slug for m in methods if m not in found]
        if missing:
            raise DataError(f"stack directory {path} lacks {missing}")
        found = {m: found[m] for m in methods}
    return ens.PredictionStack({m: load_image(p) for m, p in found.items()})


def cmd_train_ensemble(args):
    cfg = _cfg_from_args(args)
    methods = ens.default_methods(args.inputs)
    out = Path(args.out)
    if args.mode == "avg":
        _write_json(out / "stage.json", {"mode": "avg", "inputs": args.inputs,
                                         "methods": [m.name for m in methods]})
        return
    manifest = dp.CorpusManifest.load(args.corpus)
    hrs = dict(dp.load_split(manifest, "train", "hr"))
    stacks = dp.load_split(manifest, "train", "prediction_stack", args.data)
    pairs = [(s.subset(methods), hrs[i]) for i, s in stacks]
    try:
        ens.train_integrator(pairs, cfg.integrator_config(), out, methods)
    except (DataError, FloatingPointError, DimensionError) as exc:
        raise StageError("train-ensemble", exc) from exc
    _write_json(out / "stage.json", {"mode": "cnn", "inputs": args.inputs,
                                     "config_hash": config_hash(cfg)})


def cmd_predict_ensemble(args):
    ckpt = Path(args.ckpt)
    stamp = json.loads((ckpt / "stage.json").read_text()) if (ckpt / "stage.json").exists() \
        else {"mode": "cnn"}
    if stamp["mode"] == "avg":
        methods = [SRMethod[m] for m in stamp["methods"]]
        save_image(args.out, ens.average_ensemble(_read_stack_dir(args.stack, methods)))
        return
    model = ad.ParamStore.load(ckpt / "integrator" if (ckpt / "integrator").exists() else ckpt)
    methods = [SRMethod[m] for m in model.meta["methods"]]
    if args.inputs is not None and args.inputs != len(methods):
        raise ConfigurationError(f"--inputs {args.inputs} conflicts with a "
                                 f"{len(methods)}-channel checkpoint")
    save_image(args.out, ens.integrate(model, _read_stack_dir(args.stack, methods)))


def cmd_evaluate(args):
    s = metrics.evaluate_corpus(args.pred, args.ref)
    s.write_csv(args.out)
    pm, ps = s.psnr_mean_std
    sm, ss = s.ssim_mean_std
    print(f"PSNR {pm:.2f} +/- {ps:.2f} dB, SSIM {sm:.4f} +/- {ss:.4f} over {len(s.names)} images")
    for name in s.unmatched:
        print(f"unmatched: {name}")


def cmd_plot_accuracy(args):
    s = metrics.evaluate_corpus(args.pred, args.ref)
    curve = s.pooled_curve if args.pooling == "pooled" else s.mean_curve
    curve.write_csv(args.out)


def cmd_run_all(args):
    cfg = _cfg_from_args(args)
    s = run_pipeline(cfg, args.out, args.ablation)
    pm, ps = s.psnr_mean_std
    sm, ss = s.ssim_mean_std
    print(f"ensemble PSNR {pm:.2f} +/- {ps:.2f} dB, SSIM {sm:.4f} +/- {ss:.4f}")


def cmd_echo_config(args):
    sys.stdout.write(echo_config(_cfg_from_args(args)))


def _add_config_flags(p, keys):
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full")
    types = {f.name: f.type for f in fields(RunConfig)}
    for k in keys:
        kind = {"int": int, "float": float, "bool": _parse_bool}[types[k]]
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=kind)


def build_parser():
    ap = argparse.ArgumentParser(prog="ensr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate phantoms, LR and PLR images")
    _add_config_flags(p, ["n_train", "n_test", "dims", "seed", "noise_sigma", "dict_atoms"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("downsample", help="k-space downsampling of one HR image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-kspace")
    p.set_defaults(fn=cmd_downsample)

    p = sub.add_parser("preprocess", help="enlarge an LR image with a classical method")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", required=True, help="zip, bi, nedi, sc, aplus or all")
    p.add_argument("--dictionary")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train-gan", help="train the GAN for one processing method")
    _add_config_flags(p, ["seed", "width", "residual", "patch", "stride", "n_critic",
                          "feature_seed"])
    p.add_argument("--method", required=True)
    p.add_argument("--data", required=True, help="corpus root")
    p.add_argument("--epochs", dest="gan_epochs", type=int)
    p.add_argument("--lr", dest="gan_lr", type=float)
    p.add_argument("--batch", dest="gan_batch", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_gan)

    p = sub.add_parser("predict", help="run a trained generator on one PLR image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("train-ensemble", help="train the integrator or set up averaging")
    _add_config_flags(p, ["seed", "width", "residual", "patch", "stride"])
    p.add_argument("--inputs", type=int, choices=(3, 5), default=5)
    p.add_argument("--mode", choices=("cnn", "avg"), default="cnn")
    p.add_argument("--data", help="prediction root (<method>/<split>/<id>.raw)")
    p.add_argument("--corpus", help="corpus root")
    p.add_argument("--epochs", dest="ens_epochs", type=int)
    p.add_argument("--lr", dest="ens_lr", type=float)
    p.add_argument("--batch", dest="ens_batch", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_ensemble)

    p = sub.add_parser("predict-ensemble", help="combine one stack of predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stack", required=True, help="directory of <method>.raw predictions")
    p.add_argument("--inputs", type=int, choices=(3, 5))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict_ensemble)

    p = sub.add_parser("evaluate", help="PSNR/SSIM over filename-matched pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("plot-accuracy", help="pixel-intensity accuracy curve as CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--pooling", choices=("pooled", "mean"), default="pooled")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot_accuracy)

    p = sub.add_parser("run-all", help="the whole pipeline, resuming from checkpoints")
    _add_config_flags(p, [f.name for f in fields(RunConfig)])
    p.add_argument("--ablation", action="store_true", help="also emit the 2x2 ablation grid")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run_all)

    p = sub.add_parser("echo-config", help="print the fully resolved configuration")
    _add_config_flags(p, [f.name for f in fields(RunConfig)])
    p.set_defaults(fn=cmd_echo_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except StageError as exc:
        print(f"ensr: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    except (ConfigurationError, UsageError) as exc:
        print(f"ensr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except TrainingDiverged as exc:
        print(f"ensr: {exc} (last good checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_CODES["train-gan"]
    except (DataError, DimensionError, OSError) as exc:
        print(f"ensr: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
