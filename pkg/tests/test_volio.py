import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadeseg.cascade import binarize_region
from cascadeseg.volio import (MAGIC, LabelMap, NormStats, VolumeFormatError, VolumeSet,
                              compute_norm_stats, decode_volume, encode_volume, normalize,
                              read_case, read_volume, sample_patches, write_case, write_volume)


def _labels(shape=(6, 5, 4), seed=0):
    rng = np.random.default_rng(seed)
    return rng.choice(np.array([0, 1, 2, 4], np.uint8), size=shape)


@settings(max_examples=25)
@given(X=st.integers(1, 7), Y=st.integers(1, 7), Z=st.integers(1, 5), C=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_float_volume_round_trip(X, Y, Z, C, seed):
    data = np.random.default_rng(seed).standard_normal((C, X, Y, Z)).astype(np.float32)
    vol = VolumeSet(data, spacing=(1.0, 0.5, 2.5))
    back = decode_volume(encode_volume(vol))
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == (1.0, 0.5, 2.5) and back.axis_order == "xyz"


def test_label_round_trip(tmp_path):
    lab = LabelMap(_labels(), spacing=(0.9, 0.9, 3.0))
    write_volume(lab, tmp_path / "l.avol")
    back = read_volume(tmp_path / "l.avol")
    assert isinstance(back, LabelMap)
    assert np.array_equal(back.labels, lab.labels) and back.spacing == lab.spacing


def test_payload_is_x_fastest():
    data = np.arange(2 * 3 * 1, dtype=np.float32).reshape(1, 2, 3, 1)
    raw = encode_volume(VolumeSet(data))
    payload = np.frombuffer(raw[-24:], "<f4")
    assert payload.tolist() == [0, 3, 1, 4, 2, 5]


def test_truncated_payload_names_byte_counts():
    raw = encode_volume(VolumeSet(np.ones((1, 4, 4, 2), np.float32)))
    with pytest.raises(VolumeFormatError, match="expected 128 bytes, got 124"):
        decode_volume(raw[:-4])


def test_bad_magic_rejected():
    raw = encode_volume(VolumeSet(np.ones((1, 2, 2, 2), np.float32)))
    with pytest.raises(VolumeFormatError, match="magic"):
        decode_volume(b"XVOL0001" + raw[8:])
    with pytest.raises(VolumeFormatError, match="too short"):
        decode_volume(MAGIC)


def test_label_three_rejected():
    raw = bytearray(encode_volume(LabelMap(np.zeros((2, 2, 2), np.uint8))))
    raw[-1] = 3
    with pytest.raises(VolumeFormatError, match=r"\[3\]"):
        decode_volume(bytes(raw))
    with pytest.raises(VolumeFormatError):
        LabelMap(np.full((2, 2, 2), 3))


def test_non_finite_rejected():
    data = np.ones((1, 2, 2, 2), np.float32)
    data[0, 1, 1, 1] = np.nan
    with pytest.raises(VolumeFormatError, match="non-finite"):
        encode_volume(VolumeSet(data))
    raw = bytearray(encode_volume(VolumeSet(np.ones((1, 2, 2, 2), np.float32))))
    raw[-4:] = np.array([np.inf], "<f4").tobytes()
    with pytest.raises(VolumeFormatError, match="non-finite"):
        decode_volume(bytes(raw))


def test_case_round_trip(tmp_path):
    data = np.random.default_rng(1).random((4, 5, 6, 3)).astype(np.float32)
    lab = LabelMap(_labels((5, 6, 3)))
    write_case(tmp_path / "c", VolumeSet(data), lab)
    vol, back = read_case(tmp_path / "c")
    assert np.array_equal(vol.data, data) and np.array_equal(back.labels, lab.labels)
    (tmp_path / "c" / "labels.avol").unlink()
    assert read_case(tmp_path / "c")[1] is None


# ----------------------------------------------------------- normalization

def test_norm_stats_by_hand():
    a = np.zeros((1, 2, 2, 1), np.float32)
    a[0, :, :, 0] = [[0, 2], [4, 0]]
    b = np.zeros((1, 2, 2, 1), np.float32)
    b[0, 0, 0, 0] = 6
    stats = compute_norm_stats([VolumeSet(a), VolumeSet(b)])
    # nonzero voxels 2, 4, 6: mean 4, population std sqrt(8/3)
    assert stats.mean == pytest.approx((4.0,))
    assert stats.std == pytest.approx((np.sqrt(8 / 3),))
    out = normalize(VolumeSet(a), stats).data
    assert out[0, 0, 0, 0] == 0 and out[0, 1, 1, 0] == 0
    assert out[0, 0, 1, 0] == pytest.approx(-2 / np.sqrt(8 / 3))


@settings(max_examples=20)
@given(seed=st.integers(0, 10 ** 6))
def test_self_normalized_voxels_are_standard(seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.5, 3.0, (2, 6, 6, 4)).astype(np.float32)
    data[:, :2] = 0
    vol = VolumeSet(data)
    out = normalize(vol, compute_norm_stats([vol])).data
    for c in range(2):
        v = out[c][data[c] != 0].astype(np.float64)
        assert abs(v.mean()) < 1e-5 and abs(v.std() - 1) < 1e-4
        assert np.all(out[c][data[c] == 0] == 0)


def test_constant_modality_becomes_zero():
    data = np.ones((2, 3, 3, 2), np.float32)
    data[1] = np.arange(18).reshape(3, 3, 2)
    vol = VolumeSet(data)
    stats = compute_norm_stats([vol])
    assert stats.std[0] == 0.0
    out = normalize(vol, stats).data
    assert np.all(out[0] == 0) and np.isfinite(out).all()


def test_normalization_is_affine_on_nonzero_voxels():
    vol = VolumeSet(np.random.default_rng(2).uniform(1, 2, (1, 4, 4, 2)))
    stats = NormStats((1.5,), (0.25,))
    out = normalize(vol, stats).data
    np.testing.assert_allclose(out * 0.25 + 1.5, vol.data, rtol=1e-6)
    with pytest.raises(ValueError, match="modalities"):
        normalize(vol, NormStats((0.0, 0.0), (1.0, 1.0)))


# ---------------------------------------------------------------- sampling

def _tiny_case(shape=(20, 20, 8)):
    labels = np.zeros(shape, np.uint8)
    cx, cy, cz = (n // 2 for n in shape)
    labels[cx - 1:cx + 2, cy - 1:cy + 2, max(cz - 1, 0):cz + 1] = 2
    labels[cx, cy, cz] = 4
    data = np.random.default_rng(0).random((4,) + shape).astype(np.float32)
    return VolumeSet(data), LabelMap(labels)


def test_patch_larger_than_volume_is_padded_whole_volume():
    vol, lab = _tiny_case((6, 5, 3))
    [(img, tgt)] = sample_patches(vol, lab, (8, 8, 4), 1, "WT", seed=0)
    assert img.shape == (4, 8, 8, 4) and tgt.shape == (8, 8, 4)
    assert np.array_equal(img[:, :6, :5, :3], vol.data)
    assert np.all(img[:, 6:] == 0)


def test_all_background_case_samples_uniformly():
    vol, _ = _tiny_case()
    lab = LabelMap(np.zeros(vol.extents, np.uint8))
    patches = sample_patches(vol, lab, (6, 6, 3), 20, "WT", seed=1)
    assert len(patches) == 20 and not any(t.any() for _, t in patches)


def test_foreground_fraction_near_half():
    vol, lab = _tiny_case((40, 40, 10))
    hits = 0
    n = 2000
    mask = binarize_region(lab.labels, "EN")  # one voxel, so uniform draws hit it rarely
    for img, tgt in sample_patches(vol, lab, (1, 1, 1), n, "EN", seed=3):
        hits += int(tgt[0, 0, 0])
    assert mask.sum() == 1
    assert 0.45 <= hits / n <= 0.55


def test_patches_stay_inside_the_volume():
    vol, lab = _tiny_case()
    X, Y, Z = vol.extents
    origins = [(a, b, c) for a in range(X - 6) for b in range(Y - 8) for c in range(Z - 4)]
    for img, tgt in sample_patches(vol, lab, (7, 9, 5), 30, "TC", seed=4):
        assert img.shape == (4, 7, 9, 5)
        # every patch is a verbatim, unpadded crop
        assert any(np.array_equal(img, vol.data[:, a:a + 7, b:b + 9, c:c + 5])
                   for a, b, c in origins)


def test_sample_count_must_be_positive():
    vol, lab = _tiny_case()
    for count in (0, -1):
        with pytest.raises(ValueError, match="positive"):
            sample_patches(vol, lab, (4, 4, 2), count, "WT", seed=0)


def test_sampling_is_seeded():
    vol, lab = _tiny_case()
    a = sample_patches(vol, lab, (5, 5, 3), 5, "WT", seed=9)
    b = sample_patches(vol, lab, (5, 5, 3), 5, "WT", seed=9)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
