import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensr.errors import DimensionError
from ensr.image_core import (
    DegenerateQuantization,
    Image,
    PatchGrid,
    SRMethod,
    patchify,
    quantize,
    unpatchify,
)
from ensr.io import load_image, read_pgm, read_raw, save_image, write_pgm, write_raw


def test_image_rejects_non_finite():
    with pytest.raises(ValueError):
        Image(np.array([[0.0, np.nan]]))


def test_image_is_immutable():
    img = Image(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_method_order_is_fixed():
    assert [m.name for m in SRMethod] == ["ZIP", "BI", "NEDI", "SC", "APLUS"]
    assert [int(m) for m in SRMethod] == [1, 2, 3, 4, 5]
    assert SRMethod.parse("a+") is SRMethod.APLUS
    assert SRMethod.parse("nedi") is SRMethod.NEDI


def test_patchify_full_size_grid():
    img = Image(np.arange(320 * 320, dtype=float).reshape(320, 320))
    pg = patchify(img, 80, 40)
    assert len(pg.patches) == 49
    assert pg.grid_shape == (7, 7)
    assert pg.origin_offsets[0] == (0, 0)
    assert pg.origin_offsets[1] == (0, 40)
    assert pg.origin_offsets[-1] == (240, 240)
    assert all(p.shape == (80, 80) for p in pg.patches)


def test_single_patch_is_input():
    img = Image(np.random.default_rng(0).random((80, 80)))
    pg = patchify(img, 80, 40)
    assert len(pg.patches) == 1
    assert pg.patches[0] == img
    assert unpatchify(pg) == img


def test_checkerboard_roundtrip_160():
    ii, jj = np.indices((160, 160))
    img = Image(((ii + jj) % 2).astype(float))
    pg = patchify(img, 80, 40)
    assert len(pg.patches) == 9
    assert np.max(np.abs(unpatchify(pg).data - img.data)) < 1e-12


def test_stride_must_divide():
    with pytest.raises(DimensionError, match="width"):
        patchify(Image(np.zeros((80, 90))), 80, 40)
    with pytest.raises(DimensionError, match="height"):
        patchify(Image(np.zeros((90, 80))), 80, 40)


def test_inconsistent_patch_dims_rejected():
    with pytest.raises(DimensionError):
        PatchGrid(4, 2, (Image(np.zeros((3, 3))),), (4, 4), ((0, 0),))


@settings(max_examples=40, deadline=None)
@given(p=st.integers(1, 6), s=st.integers(1, 4), nh=st.integers(0, 4), nw=st.integers(0, 4),
       seed=st.integers(0, 2**16))
def test_patch_count_and_roundtrip(p, s, nh, nw, seed):
    h, w = p + nh * s, p + nw * s
    img = Image(np.random.default_rng(seed).normal(size=(h, w)))
    pg = patchify(img, p, s)
    assert len(pg.patches) == ((h - p) // s + 1) * ((w - p) // s + 1)
    if s <= p or (nh == 0 and nw == 0):
        assert np.allclose(unpatchify(pg).data, img.data, rtol=0, atol=1e-12)
    else:
        with pytest.raises(DimensionError):
            unpatchify(pg)


def test_quantize_endpoints_and_idempotence():
    q = quantize(Image(np.array([[0.0, 1.0], [1.0, 0.0]])))
    assert q.intensity_max == 255
    assert set(np.unique(q.data)) == {0.0, 255.0}
    full = Image(np.arange(256, dtype=float).reshape(16, 16), 255)
    assert quantize(full) == full


def test_quantize_ramp():
    ramp = Image(np.linspace(0, 1, 256).reshape(16, 16))
    assert np.array_equal(quantize(ramp).data.ravel(), np.arange(256))


def test_quantize_constant_flags():
    with pytest.warns(DegenerateQuantization):
        q = quantize(Image(np.full((3, 3), 7.0)))
    assert np.all(q.data == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_quantize_idempotent(seed):
    img = Image(np.random.default_rng(seed).normal(size=(5, 7)))
    q = quantize(img)
    assert quantize(q) == q


def test_raw_roundtrip(tmp_path, rng):
    img = Image(rng.normal(size=(5, 7)))
    save_image(tmp_path / "a.raw", img)
    blob = (tmp_path / "a.raw").read_bytes()
    assert blob[:4] == b"ENSR" and len(blob) == 16 + 5 * 7 * 8
    assert int.from_bytes(blob[4:8], "little") == 5
    assert int.from_bytes(blob[8:12], "little") == 7
    assert load_image(tmp_path / "a.raw") == img


def test_raw_complex_roundtrip(tmp_path, rng):
    z = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    write_raw(tmp_path / "k.raw", z)
    blob = (tmp_path / "k.raw").read_bytes()
    assert len(blob) == 16 + 4 * 6 * 16
    np.testing.assert_array_equal(read_raw(tmp_path / "k.raw"), z)


def test_pgm_roundtrip(tmp_path):
    img = Image(np.linspace(0, 1, 12).reshape(3, 4))
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n65535\n")
    back = read_pgm(tmp_path / "a.pgm")
    assert np.max(np.abs(back.data - img.data)) <= 0.5 / 65535 + 1e-15
