import numpy as np
import pytest

from ensr import autodiff as ad
from ensr import gan
from ensr.errors import DataError, DimensionError, TrainingDiverged, UsageError
from ensr.image_core import Image, SRMethod, patchify, stitch


def linear_critic(w):
    w = ad.Tensor(w)

    def critic(x):
        return (x * w).sum(axis=(1, 2, 3)).reshape(-1, 1)
    return critic


# ---------------------------------------------------------------- architecture

# (in, out, layer-normed) per conv at full width, skip inputs added by hand
FULL_WIDTH_TABLE = [
    (1, 32, 1), (32, 32, 1), (32, 64, 1), (64, 64, 1), (64, 128, 1), (128, 128, 1),
    (128, 256, 1), (256, 256, 1), (256 + 128, 128, 1), (128, 128, 1),
    (128 + 64, 64, 1), (64, 64, 1), (64 + 32, 32, 1), (32, 1, 0),
]


def test_generator_parameter_count_closed_form():
    expected = sum(9 * i * o + o + 2 * o * n for i, o, n in FULL_WIDTH_TABLE)
    assert expected == 1_940_065
    assert gan.build_generator(0).count() == expected


def test_block5_consumes_concatenated_channels():
    layers = {name: (cin, cout) for name, cin, cout, _ in gan.GeneratorSpec().layers()}
    assert layers["g5a"] == (384, 128)
    assert layers["g6a"] == (192, 64)
    assert layers["g7a"] == (96, 32)


def test_layer_specs_cover_every_conv():
    specs = gan.GeneratorSpec(width=0.25).layer_specs()
    assert sum(s.kind == "conv2d" for s in specs) == 14
    assert sum(s.kind == "layernorm" for s in specs) == 13
    dspecs = gan.DiscriminatorSpec().layer_specs()
    assert [s.stride for s in dspecs if s.kind == "conv2d"] == [2, 2, 2, 1, 1]
    assert dspecs[-1].kind == "gap"


@pytest.mark.parametrize("size", [16, 40])
def test_generator_preserves_dims(size, rng):
    G = gan.build_generator(0, width=0.125)
    with ad.no_grad():
        out = gan.generator_forward(G, rng.random((2, 1, size, size)))
    assert out.shape == (2, 1, size, size)


def test_generator_rejects_wrong_channels(rng):
    G = gan.build_generator(0, width=0.125)
    with pytest.raises(DimensionError):
        gan.generator_forward(G, rng.random((1, 3, 8, 8)))


def test_discriminator_output_shape(rng):
    D = gan.build_discriminator(0, width=0.125)
    with ad.no_grad():
        out = gan.discriminator_forward(D, rng.random((3, 1, 16, 16)))
    assert out.shape == (3, 1)


def test_zero_weight_generator_outputs_zero(rng):
    G = gan.build_generator(0, width=0.125)
    for _, t in G:
        t.data = np.zeros_like(t.data)
    out = gan.predict(G, Image(rng.random((16, 16))))
    assert np.array_equal(out.data, np.zeros((16, 16)))


def test_residual_generator_adds_input_mean(rng):
    G = gan.build_generator(0, in_channels=3, width=0.125, residual=True)
    for _, t in G:
        t.data = np.zeros_like(t.data)
    x = rng.random((2, 3, 16, 16))
    out = gan.generator_forward(G, x).data
    assert np.allclose(out, x.mean(axis=1, keepdims=True), atol=1e-15)
    assert not gan.build_generator(0).meta["residual"]


# ---------------------------------------------------------------- losses

def test_adv_loss_values_and_gradient():
    assert gan.adv_loss(np.ones((4, 1))).item() == -1.0
    assert gan.adv_loss(np.array([[2.0], [-2.0]])).item() == 0.0
    d = ad.Tensor(np.array([[0.3], [1.2], [-0.7]]), requires_grad=True)
    (g,) = ad.grad(gan.adv_loss(d), [d])
    assert np.allclose(g.data, -1.0 / 3)


def test_gradient_loss_ramp():
    ramp = np.tile(np.arange(4.0), (4, 1))[None, None]
    assert gan.gradient_loss(np.zeros_like(ramp), ramp).item() == pytest.approx(1.0, abs=1e-15)
    # direct summation over the 12 x-differences and 12 y-differences
    dx = np.diff(ramp, axis=3)
    dy = np.diff(ramp, axis=2)
    assert np.mean(dx ** 2) + np.mean(dy ** 2) == 1.0


def test_gradient_loss_ignores_constants(rng):
    a, b = rng.random((2, 1, 6, 6)), rng.random((2, 1, 6, 6))
    base = gan.gradient_loss(a, b).item()
    assert gan.gradient_loss(a + 3.0, b + 3.0).item() == pytest.approx(base, abs=1e-14)
    with pytest.raises(DimensionError):
        gan.gradient_loss(a, b[:, :, :5])


def test_perceptual_loss_properties(rng):
    a, b = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
    phi = gan.FeatureExtractor(3)
    assert gan.perceptual_loss(a, a, phi).item() == 0.0
    assert gan.perceptual_loss(a, b, phi).item() >= 0.0
    assert gan.perceptual_loss(a, b, gan.identity_extractor).item() == \
        gan.mse_loss(a, b).item()


def test_feature_extractor_is_frozen_and_seeded(rng):
    x = rng.random((1, 1, 8, 8))
    a, b = gan.FeatureExtractor(5), gan.FeatureExtractor(5)
    assert np.array_equal(a(x).data, b(x).data)
    assert a(x).shape == (1, 64, 8, 8)
    assert not any(t.requires_grad for _, t in a.params)
    with pytest.raises(UsageError):
        gan.FeatureExtractor(0, layer_index=9)


def test_loss_weights_defaults_and_validation():
    w = gan.LossWeights()
    assert (w.gradient, w.mse, w.perceptual) == (0.1, 0.1, 1.0)
    with pytest.raises(UsageError):
        gan.LossWeights(mse=-1)


# ---------------------------------------------------------------- gradient penalty

@pytest.mark.parametrize("norm,expected", [(1.0, 0.0), (3.0, 4.0)])
def test_penalty_linear_critic(norm, expected, rng):
    w = rng.normal(size=(1, 1, 5, 5))
    w *= norm / np.linalg.norm(w)
    real, fake = rng.random((4, 1, 5, 5)), rng.random((4, 1, 5, 5))
    gp = gan.gradient_penalty(linear_critic(w), real, fake, seed=7).item()
    assert abs(gp - expected) < 1e-9


def test_penalty_quadratic_critic(rng):
    n = 9
    B = rng.normal(size=(n, n))
    A = 0.25 * (B + B.T)
    At = ad.Tensor(A)

    def critic(x):
        flat = x.reshape(x.shape[0], n)
        return (ad.matmul(flat, At) * flat).sum(axis=1).reshape(-1, 1)

    x = rng.normal(size=(3, 1, 3, 3))
    # real == fake pins the interpolate regardless of the mixing weights
    gp = gan.gradient_penalty(critic, x, x, seed=1).item()
    norms = np.linalg.norm(2 * x.reshape(3, n) @ A, axis=1)
    assert abs(gp - np.mean((norms - 1) ** 2)) < 1e-7


def test_penalty_reproducible_and_second_order(rng):
    D = gan.build_discriminator(0, width=0.0625)
    critic = lambda x: gan.discriminator_forward(D, x)  # noqa: E731
    real, fake = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
    a = gan.gradient_penalty(critic, real, fake, seed=3)
    b = gan.gradient_penalty(critic, real, fake, seed=3)
    assert a.item() == b.item()
    w = D["d1.w"]
    (g,) = ad.grad(a, [w])
    assert np.any(g.data != 0)


def test_penalty_gradient_matches_finite_differences(rng):
    from gradcheck import check
    real, fake = rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))
    w0 = rng.normal(size=(2, 1, 3, 3))

    def build(w):
        def critic(x):
            h = ad.leaky_relu(ad.conv2d(x, w), 0.2)
            return (h * h).mean(axis=(1, 2, 3)).reshape(-1, 1)
        return gan.gradient_penalty(critic, real, fake, seed=11)

    assert check(build, [w0]) < 1e-6


# ---------------------------------------------------------------- composite objective

def _sampled_gradcheck(store, loss_fn, rng, per_tensor=2, h=1e-6):
    # thousands of ReLU units: a small step keeps the stencil off their kinks
    store.zero_grad()
    loss_fn().backward()
    # biases feeding a layer norm have identically zero gradient, so errors are
    # measured against the largest gradient anywhere in the network
    scale = max(np.max(np.abs(t.grad)) for _, t in store if t.grad is not None)
    worst = 0.0
    for name, t in store:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(per_tensor, flat.size),
                                      replace=False):
            orig = flat[idx]
            # grad mode stays on: the penalty differentiates internally
            flat[idx] = orig + h
            fp = loss_fn().item()
            flat[idx] = orig - h
            fm = loss_fn().item()
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic.reshape(-1)[idx] - num) / scale)
    return worst


def test_composite_generator_objective_gradcheck(rng):
    G = gan.build_generator(0, width=0.125)
    D = gan.build_discriminator(1, width=0.125).frozen(True)
    phi = gan.FeatureExtractor(2, channels=(4, 4, 4, 4, 4))
    # 16x16 keeps the critic's last layer norm above one spatial element
    plr, hr = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
    weights = gan.LossWeights()

    def loss():
        return gan.generator_objective(G, D, phi, plr, hr, weights)[0]

    assert _sampled_gradcheck(G, loss, np.random.default_rng(4)) < 1e-5


def test_discriminator_objective_gradcheck(rng):
    D = gan.build_discriminator(1, width=0.0625)
    real, fake = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))

    def loss():
        return gan.discriminator_objective(D, real, fake, gan.LossWeights(),
                                           np.random.default_rng(9))

    assert _sampled_gradcheck(D, loss, np.random.default_rng(5)) < 1e-5


# ---------------------------------------------------------------- training

def _toy_pairs(rng, n=2, size=16):
    yy, xx = np.mgrid[0:size, 0:size] / size
    hr = np.stack([0.5 + 0.4 * np.sin(2 * np.pi * (xx * (k + 1) + yy)) for k in range(n)])
    plr = hr + 0.05 * rng.normal(size=hr.shape)
    return plr, hr


def test_single_batch_overfit_halves_mse(rng):
    plr, hr = _toy_pairs(rng)
    cfg = gan.GANConfig(width=0.25, batch=2, lr=1e-3, seed=0)
    trainer = gan.GANTrainer(cfg)
    first = None
    for step in range(200):
        terms = trainer.step(plr[:, None], hr[:, None])
        first = terms["L_mse"] if first is None else first
        if terms["L_mse"] < 0.5 * first:
            break
    assert terms["L_mse"] < 0.5 * first, (step, first, terms["L_mse"])


def test_critic_separates_toy_distributions():
    rng = np.random.default_rng(0)
    D = gan.build_discriminator(0, width=0.0625)
    real = 0.8 + 0.05 * rng.random((4, 1, 16, 16))
    fake = 0.2 + 0.05 * rng.random((4, 1, 16, 16))
    losses = []
    for _ in range(40):
        D.zero_grad()
        loss = gan.discriminator_objective(D, real, fake, gan.LossWeights(), rng)
        losses.append(loss.item())
        loss.backward()
        ad.adam_step(D, lr=1e-3, beta1=0.0, beta2=0.9)
    assert np.mean(losses[-5:]) < losses[0]


def test_train_gan_writes_artifacts_and_is_deterministic(tmp_path, rng):
    plr, hr = _toy_pairs(rng, n=3)
    cfg = gan.GANConfig(epochs=2, width=0.0625, batch=2, lr=1e-3, n_critic=1)
    G1, h1 = gan.train_gan(plr, hr, SRMethod.BI, cfg, tmp_path / "a")
    G2, h2 = gan.train_gan(plr, hr, SRMethod.BI, cfg, tmp_path / "b")
    assert h1 == h2 and G1.state_equal(G2)
    for name in ("losses.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "losses.csv").read_text().splitlines()[0]
    assert header == "epoch,L_adv,L_gra,L_mse,L_per,L_D"
    loaded = ad.ParamStore.load(tmp_path / "a" / "generator")
    assert loaded.state_equal(G1)


def test_train_gan_resumes(tmp_path, rng):
    plr, hr = _toy_pairs(rng, n=2)
    full = gan.GANConfig(epochs=2, width=0.0625, batch=2, lr=1e-3, n_critic=1)
    G_full, _ = gan.train_gan(plr, hr, SRMethod.ZIP, full, tmp_path / "full")
    half = gan.GANConfig(epochs=1, width=0.0625, batch=2, lr=1e-3, n_critic=1)
    gan.train_gan(plr, hr, SRMethod.ZIP, half, tmp_path / "resumed")
    G_res, hist = gan.train_gan(plr, hr, SRMethod.ZIP, full, tmp_path / "resumed")
    assert len(hist) == 2
    assert G_res.state_equal(G_full)


def test_train_gan_rejects_empty_dataset():
    with pytest.raises(DataError):
        gan.train_gan(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), SRMethod.ZIP)


def test_train_gan_aborts_on_nan(tmp_path, rng):
    plr, hr = _toy_pairs(rng, n=2)
    hr[0, 0, 0] = np.nan
    cfg = gan.GANConfig(epochs=1, width=0.0625, batch=2, n_critic=1)
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        gan.train_gan(plr, hr, SRMethod.ZIP, cfg, tmp_path)


# ---------------------------------------------------------------- inference

def test_predict_dims_and_determinism(rng):
    G = gan.build_generator(0, width=0.0625)
    img = Image(rng.random((24, 40)))
    a, b = gan.predict(G, img), gan.predict(G, img)
    assert a.shape == (24, 40) and a == b


@pytest.mark.xfail(strict=True, reason="layer norm statistics span the whole input, so "
                   "patch-wise and whole-image inference differ")
def test_predict_matches_patch_stitched_interior(rng):
    G = gan.build_generator(0, width=0.0625)
    img = Image(rng.random((160, 160)))
    whole = gan.predict(G, img).data
    patches = patchify(img, 80, 40)
    preds = np.stack([gan.predict(G, Image(p)).data for p in patches.as_array()])
    stitched = stitch(preds, patches.origin_offsets, img.shape)
    assert np.max(np.abs(whole[20:-20, 20:-20] - stitched[20:-20, 20:-20])) < 1e-6
