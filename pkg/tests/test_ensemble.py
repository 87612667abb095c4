import numpy as np
import pytest

from ensr import autodiff as ad
from ensr import ensemble as ens
from ensr.errors import ConfigurationError, DimensionError, UsageError
from ensr.image_core import Image, SRMethod, patchify, stitch


def make_stack(rng, shape=(16, 16), methods=ens.ALL_METHODS):
    return ens.PredictionStack({m: Image(rng.random(shape)) for m in methods})


# ---------------------------------------------------------------- stacks and averaging

def test_stack_uses_canonical_order(rng):
    members = [(SRMethod.APLUS, Image(rng.random((4, 4)))), (SRMethod.ZIP, Image(rng.random((4, 4))))]
    stack = ens.PredictionStack(members)
    assert stack.methods == (SRMethod.ZIP, SRMethod.APLUS)
    assert np.array_equal(stack.as_array()[0], members[1][1].data)


def test_stack_validation(rng):
    with pytest.raises(UsageError):
        ens.PredictionStack({})
    with pytest.raises(DimensionError):
        ens.PredictionStack({SRMethod.ZIP: Image(rng.random((4, 4))),
                             SRMethod.BI: Image(rng.random((4, 6)))})


def test_average_of_identical_members(rng):
    img = Image(rng.random((8, 8)))
    stack = ens.PredictionStack({m: img for m in ens.ALL_METHODS})
    assert np.allclose(ens.average_ensemble(stack).data, img.data, atol=1e-15)


def test_average_of_zero_and_one():
    stack = ens.PredictionStack({SRMethod.ZIP: Image(np.zeros((3, 3))),
                                 SRMethod.BI: Image(np.ones((3, 3)))})
    assert np.array_equal(ens.average_ensemble(stack).data, np.full((3, 3), 0.5))


def test_average_is_permutation_invariant(rng):
    stack = make_stack(rng)
    perm = [SRMethod.SC, SRMethod.ZIP, SRMethod.APLUS, SRMethod.BI, SRMethod.NEDI]
    permuted = ens.PredictionStack([(m, stack[m]) for m in perm], order=perm)
    assert ens.average_ensemble(permuted) == ens.average_ensemble(stack)


# ---------------------------------------------------------------- integrator

@pytest.mark.parametrize("n", [3, 5])
def test_integrator_input_channels(n):
    model = ens.build_integrator(n, seed=0, width=0.125)
    assert model["g1a.w"].shape[1] == n
    assert model["g7b.w"].shape[0] == 1


def test_integrator_rejects_other_counts():
    with pytest.raises(ConfigurationError):
        ens.build_integrator(4)
    model = ens.build_integrator(4, width=0.125, allow_any=True)
    assert model["g1a.w"].shape[1] == 4


@pytest.mark.parametrize("size", [16, 48])
def test_integrate_preserves_dims(size, rng):
    model = ens.build_integrator(5, width=0.0625)
    assert ens.integrate(model, make_stack(rng, (size, size))).shape == (size, size)


def test_three_input_set_is_zip_bi_nedi(rng):
    model = ens.build_integrator(3, width=0.0625)
    assert model.meta["methods"] == ["ZIP", "BI", "NEDI"]
    stack = make_stack(rng).subset(ens.THREE_METHODS)
    assert ens.integrate(model, stack).shape == (16, 16)


def test_zero_weight_integrator_outputs_zero(rng):
    model = ens.build_integrator(5, width=0.0625)
    for _, t in model:
        t.data = np.zeros_like(t.data)
    assert np.array_equal(ens.integrate(model, make_stack(rng)).data, np.zeros((16, 16)))


def test_integrate_rejects_permuted_stack(rng):
    model = ens.build_integrator(5, width=0.0625)
    stack = make_stack(rng)
    perm = list(reversed(ens.ALL_METHODS))
    with pytest.raises(ConfigurationError):
        ens.integrate(model, ens.PredictionStack([(m, stack[m]) for m in perm], order=perm))
    with pytest.raises(ConfigurationError):
        ens.integrate(model, stack.subset(ens.THREE_METHODS))


def test_integrate_deterministic(rng):
    model = ens.build_integrator(5, width=0.0625)
    stack = make_stack(rng)
    assert ens.integrate(model, stack) == ens.integrate(model, stack)


def test_mae_of_identical_is_zero(rng):
    x = rng.random((2, 1, 4, 4))
    assert ad.mae(x, x).item() == 0.0


def _mean_task(rng, n, size=16):
    pairs = []
    for _ in range(n):
        stack = make_stack(rng, (size, size))
        pairs.append((stack, ens.average_ensemble(stack)))
    return pairs


def _mae(model, pairs):
    return float(np.mean([np.mean(np.abs(ens.integrate(model, s).data - hr.data))
                          for s, hr in pairs]))


def test_integrator_learns_the_mean():
    rng = np.random.default_rng(0)
    train, test = _mean_task(rng, 6), _mean_task(rng, 2)
    cfg = ens.IntegratorConfig(epochs=100, lr=3e-3, batch=2, width=0.125, patch=16, stride=16)
    untrained = ens.build_integrator(5, cfg.seed, cfg.width)
    before = _mae(untrained, test)
    model, hist = ens.train_integrator(train, cfg)
    after = _mae(model, test)
    assert after < before
    assert after < 0.1 * before, (before, after)
    assert hist[-1]["L_mae"] < hist[0]["L_mae"]


def test_train_integrator_checkpoint_and_determinism(tmp_path):
    rng = np.random.default_rng(1)
    pairs = _mean_task(rng, 2)
    cfg = ens.IntegratorConfig(epochs=2, lr=1e-3, batch=2, width=0.0625, patch=16, stride=16)
    m1, h1 = ens.train_integrator(pairs, cfg, tmp_path / "a")
    m2, h2 = ens.train_integrator(pairs, cfg, tmp_path / "b")
    assert h1 == h2 and m1.state_equal(m2)
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
    loaded = ad.ParamStore.load(tmp_path / "a" / "integrator")
    assert loaded.state_equal(m1)
    assert loaded.meta["order_hash"] == ens.order_hash(ens.ALL_METHODS)


def test_patch_pairs_follow_grid(rng):
    pairs = _mean_task(rng, 1, size=32)
    x, y = ens.patch_pairs(pairs, 16, 8)
    assert x.shape == (9, 5, 16, 16) and y.shape == (9, 1, 16, 16)


@pytest.mark.xfail(strict=True, reason="layer norm statistics span the whole input, so "
                   "patch-wise and whole-image inference differ")
def test_integrate_matches_patch_stitched_interior(rng):
    model = ens.build_integrator(5, width=0.0625)
    stack = make_stack(rng, (160, 160))
    whole = ens.integrate(model, stack).data
    grid = patchify(stack.images[0], 80, 40)
    preds = []
    for r, c in grid.origin_offsets:
        sub = ens.PredictionStack({m: Image(stack[m].data[r:r + 80, c:c + 80])
                                   for m in stack.methods})
        preds.append(ens.integrate(model, sub).data)
    stitched = stitch(np.stack(preds), grid.origin_offsets, (160, 160))
    assert np.max(np.abs(whole[20:-20, 20:-20] - stitched[20:-20, 20:-20])) < 1e-6


# ---------------------------------------------------------------- ablation

def test_ablation_grid_shape(rng):
    stacks = [make_stack(rng) for _ in range(2)]
    refs = [Image(rng.random((16, 16))) for _ in range(2)]
    models = {3: ens.build_integrator(3, width=0.0625), 5: ens.build_integrator(5, width=0.0625)}
    rows = ens.ablation_grid(stacks, refs, models)
    assert [(r["inputs"], r["mode"]) for r in rows] == [
        (3, "average"), (3, "cnn"), (5, "average"), (5, "cnn")]
    three_avg = ens.average_ensemble(stacks[0].subset(ens.THREE_METHODS))
    expected = (stacks[0][SRMethod.ZIP].data + stacks[0][SRMethod.BI].data
                + stacks[0][SRMethod.NEDI].data) / 3
    assert np.allclose(three_avg.data, expected, atol=1e-15)
