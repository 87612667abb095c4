import hashlib

import numpy as np
import pytest

from ensr import data_pipeline as dp
from ensr.errors import DataError, DimensionError
from ensr.image_core import SRMethod
from ensr.io import read_raw
from ensr.kspace import downsample_kspace

SMALL = dp.PhantomConfig(dims=(32, 32))
DICT = dp.DictionaryConfig(n_atoms=32, n_images=2, iters=2)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return dp.build_corpus(10, 2, SMALL, 3, root, DICT)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- phantoms

def test_single_ellipse_histogram():
    cfg = dp.PhantomConfig(dims=(64, 64), ellipses=(1, 1), texture=0.0, noise_sigma=0.0)
    seed = 12
    img = dp.generate_phantom(cfg, seed).data
    (e,) = dp._sample_ellipses(np.random.default_rng(seed), cfg)
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    inside = e.local(yy, xx)[2] <= 1.0
    assert np.all(img[~inside] == cfg.background)
    lo, hi = e.ramp_range()
    vals = img[inside] - cfg.background
    assert vals.min() >= lo - 1e-12 and vals.max() <= hi + 1e-12
    # the ramp is linear, so the histogram of the ellipse is continuous, not a spike
    assert vals.max() - vals.min() > 0


def test_phantom_deterministic_and_clipped():
    for seed in range(6):
        a = dp.generate_phantom(SMALL, seed)
        assert a == dp.generate_phantom(SMALL, seed)
        assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def test_phantom_config_validation():
    with pytest.raises(DimensionError):
        dp.PhantomConfig(dims=(30, 32))
    with pytest.raises(DataError):
        dp.PhantomConfig(noise_sigma=-0.1)


def test_texture_is_band_limited(rng):
    tex = dp.band_limited_texture(rng, (64, 64), (0.2, 0.4))
    spec = np.abs(np.fft.fftshift(np.fft.fft2(tex)))
    fy = np.fft.fftshift(np.fft.fftfreq(64))[:, None] * 2
    fx = np.fft.fftshift(np.fft.fftfreq(64))[None, :] * 2
    r = np.hypot(fy, fx)
    assert np.max(spec[(r < 0.2) | (r > 0.4)]) < 1e-9
    assert abs(tex.std() - 1.0) < 1e-12


# ---------------------------------------------------------------- corpus

def test_split_sizes(corpus):
    assert len(corpus.ids("train")) == 8
    assert len(corpus.ids("valid")) == 2
    assert len(corpus.ids("test")) == 2
    ids = [r["id"] for r in corpus.records]
    assert len(ids) == len(set(ids))


def test_every_entry_has_seven_images(corpus):
    for rec in corpus.records:
        files = sorted(p.name for p in (corpus.root / rec["split"] / rec["id"]).iterdir())
        assert files == sorted(["hr.raw", "lr.raw"] + [f"plr_{m.slug}.raw" for m in SRMethod])


def test_stored_lr_is_the_kspace_downsample(corpus):
    for split in dp.SPLITS:
        for (_, hr), (_, lr) in zip(dp.load_split(corpus, split, "hr"),
                                    dp.load_split(corpus, split, "lr")):
            assert np.array_equal(downsample_kspace(hr).data, lr.data)


def test_plr_dims_equal_hr_dims(corpus):
    hr_shapes = [img.shape for _, img in dp.load_split(corpus, "train", "hr")]
    for m in SRMethod:
        assert [img.shape for _, img in dp.load_split(corpus, "train", m)] == hr_shapes


def test_loader_order_and_shuffle(corpus):
    ds = dp.load_split(corpus.root, "train", "hr")
    assert len(ds) == 8 and ds.ids == sorted(ds.ids)
    a = [i for i, _ in ds.shuffled(5)]
    b = [i for i, _ in ds.shuffled(5)]
    assert a == b and sorted(a) == ds.ids


def test_manifest_roundtrip(corpus):
    loaded = dp.CorpusManifest.load(corpus.root)
    assert loaded.records == corpus.records
    assert loaded.config_hash == corpus.config_hash
    assert loaded.schema == 1


def test_dictionary_is_loadable(corpus):
    d, reg = dp.load_dictionary(corpus)
    assert d.n_atoms == 32 and reg is not None


def test_missing_file_names_id_and_role(corpus, tmp_path):
    import shutil
    root = tmp_path / "c"
    shutil.copytree(corpus.root, root)
    victim = dp.CorpusManifest.load(root).ids("test")[0]
    (root / "test" / victim / "plr_sc.raw").unlink()
    with pytest.raises(DataError, match=f"{victim}.*plr_sc"):
        list(dp.load_split(root, "test", SRMethod.SC))


def test_incomplete_corpus_rejected(tmp_path):
    (tmp_path / "train").mkdir()
    with pytest.raises(DataError):
        dp.load_split(tmp_path, "train", "hr")


def test_unknown_role_rejected(corpus):
    with pytest.raises(DataError):
        dp.load_split(corpus, "train", "plr_bogus")


def test_corpus_is_byte_reproducible(corpus, tmp_path):
    again = dp.build_corpus(10, 2, SMALL, 3, tmp_path / "again", DICT)
    assert _digest(again.root) == _digest(corpus.root)


def test_raw_values_match_loader(corpus):
    image_id = corpus.ids("valid")[0]
    _, img = next(iter(dp.load_split(corpus, "valid", "hr")))
    assert np.array_equal(read_raw(corpus.path(image_id, "hr")), img.data)
