import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import fftconvolve

from rtfvae.evaluation import ser
from rtfvae.room import ground_truth_rtf, room_response
from rtfvae.rtf import (
    RoomConfig, RtfAccumulator, RtfDataset, augment, build_dataset, center, default_grid,
    estimate_rtf, pack_rtf, streamed_clean_rtf, uncenter, unpack_rtf,
)
from rtfvae.signal import stft


def _frames(k=16, l=40, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((k, l)) + 1j * rng.standard_normal((k, l))


def test_pack_unpack_layout():
    h = np.array([1 + 2j, 3 - 4j])
    np.testing.assert_array_equal(pack_rtf(h), [1, 3, 2, -4])
    np.testing.assert_array_equal(unpack_rtf(pack_rtf(h)), h)
    with pytest.raises(ValueError):
        unpack_rtf(np.zeros(3))


def test_identity_and_constant_gain():
    x1 = _frames()
    np.testing.assert_allclose(estimate_rtf(x1, x1), np.r_[np.ones(16), np.zeros(16)], atol=1e-12)
    c = 0.3 - 1.7j
    h = unpack_rtf(estimate_rtf(x1, c * x1))
    np.testing.assert_allclose(h, c, rtol=1e-10)


def test_per_bin_transfer_recovered():
    x1 = _frames(l=200)
    h = np.exp(1j * np.linspace(0, 3, 16)) * np.linspace(0.5, 2, 16)
    np.testing.assert_allclose(unpack_rtf(estimate_rtf(x1, h[:, None] * x1)), h, rtol=1e-10)


def test_insufficient_frames():
    with pytest.raises(ValueError, match="insufficient frames"):
        estimate_rtf(_frames(l=2), _frames(l=2))


def test_matches_naive_formula():
    x1, x2 = _frames(seed=1), _frames(seed=2)
    a = np.abs(x1) ** 2
    c = x2 * np.conj(x1)
    num = np.mean(a * c, axis=1) - np.mean(a, axis=1) * np.mean(c, axis=1)
    den = np.mean(a * a, axis=1) - np.mean(a, axis=1) ** 2
    den = den + 1e-12 * np.mean(a, axis=1) ** 2
    np.testing.assert_allclose(unpack_rtf(estimate_rtf(x1, x2)), num / den, rtol=1e-10)


def test_accumulator_chunking():
    x1, x2 = _frames(l=90, seed=3), _frames(l=90, seed=4)
    acc = RtfAccumulator(16)
    for s in (slice(0, 10), slice(10, 55), slice(55, 90)):
        acc.update(x1[:, s], x2[:, s])
    np.testing.assert_allclose(acc.estimate(), estimate_rtf(x1, x2), rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(phi=st.floats(-np.pi, np.pi), seed=st.integers(0, 10_000))
def test_unit_modulus_scaling_invariance(phi, seed):
    x1, x2 = _frames(seed=seed), _frames(seed=seed + 1)
    u = np.exp(1j * phi)
    np.testing.assert_allclose(estimate_rtf(u * x1, u * x2), estimate_rtf(x1, x2),
                               rtol=1e-9, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_frame_permutation_invariance(seed):
    x1, x2 = _frames(seed=seed), _frames(seed=seed + 7)
    perm = np.random.default_rng(seed).permutation(x1.shape[1])
    np.testing.assert_allclose(estimate_rtf(x1[:, perm], x2[:, perm]), estimate_rtf(x1, x2),
                               rtol=1e-9, atol=1e-12)


def test_bias_shrinks_with_frames():
    h = 0.7 + 0.4j

    def mean_abs_err(n_frames):
        errs = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            x1 = rng.standard_normal((8, n_frames)) + 1j * rng.standard_normal((8, n_frames))
            v2 = 0.5 * (rng.standard_normal((8, n_frames)) + 1j * rng.standard_normal((8, n_frames)))
            errs.append(np.abs(unpack_rtf(estimate_rtf(x1, h * x1 + v2)) - h))
        return float(np.mean(errs))

    assert mean_abs_err(2000) <= mean_abs_err(50)


def test_streamed_matches_direct_estimate():
    room = RoomConfig(t60=0.1)
    rr = room_response(room.room_dims, 0.1, (1.9, 2.45, 1.15), room.mic1_pos, room.mic2_pos)
    rng = np.random.default_rng(11)
    s = rng.standard_normal(3 * 16000)
    x1 = fftconvolve(s, rr.rir1)[:s.size]
    x2 = fftconvolve(s, rr.rir2)[:s.size]
    direct = estimate_rtf(stft(x1), stft(x2))
    np.testing.assert_allclose(streamed_clean_rtf(rr, 3.0, 11, block_len=8192), direct,
                               atol=1e-12)


def test_long_excitation_reaches_40db_per_position():
    # clean-condition estimates approach the ground truth as the excitation grows
    room = RoomConfig(t60=0.3)
    for i, p in enumerate(default_grid()[::40]):
        rr = room_response(room.room_dims, 0.3, p, room.mic1_pos, room.mic2_pos)
        assert ser(ground_truth_rtf(rr), streamed_clean_rtf(rr, 480.0, i)) >= 40.0


def test_grid_shape_and_center():
    g = default_grid()
    assert len(g) == 120 and len(set(g)) == 120
    np.testing.assert_allclose(np.mean(g, axis=0), (1.9, 2.45, 1.15), atol=1e-12)


@pytest.fixture(scope="module")
def small_dataset():
    room = RoomConfig(t60=0.1, duration_s=1.0)
    return build_dataset(default_grid(shape=(3, 5, 2)), room, n_test=5, n_val=5, seed=4)


def test_build_dataset_counts(small_dataset):
    ds = small_dataset
    assert ds.train.shape == (20, 256)
    assert ds.validation.shape == (5, 256) and ds.test.shape == (5, 256)
    pos = [tuple(p) for s in ("train", "validation", "test") for p in ds.positions(s)]
    assert len(set(pos)) == 30


def test_mean_is_pre_augmentation_train_mean(small_dataset):
    ds = small_dataset
    direct = np.zeros(256)
    for row in ds.train:
        direct += row
    np.testing.assert_allclose(ds.mean_rtf, direct / ds.train.shape[0], atol=1e-12)


def test_split_reproducible(small_dataset):
    room = RoomConfig(t60=0.1, duration_s=1.0)
    again = build_dataset(default_grid(shape=(3, 5, 2)), room, n_test=5, n_val=5, seed=4)
    assert again.provenance == small_dataset.provenance
    np.testing.assert_array_equal(again.train, small_dataset.train)


def test_build_dataset_errors():
    g = default_grid(shape=(2, 2, 2))
    with pytest.raises(ValueError, match="duplicate"):
        build_dataset(g + g[:1], n_test=1, n_val=1)
    with pytest.raises(ValueError):
        build_dataset(g, n_test=4, n_val=4)


def test_dataset_save_load(tmp_path, small_dataset):
    ds = small_dataset
    ds.augmented = augment(ds.train, seed=1)
    ds.save(tmp_path / "d")
    back = RtfDataset.load(tmp_path / "d")
    for name in ("train", "validation", "test", "mean_rtf", "augmented"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.positions("test") == ds.positions("test")
    (tmp_path / "d" / "mean.f64").unlink()
    np.testing.assert_allclose(RtfDataset.load(tmp_path / "d").mean_rtf, ds.mean_rtf)
    ds.augmented = None
    with pytest.raises(FileNotFoundError):
        RtfDataset.load(tmp_path / "missing")


def test_augment_counts_and_limit():
    rng = np.random.default_rng(0)
    train = rng.standard_normal((20, 8))
    assert augment(train, repeats=5).shape == (100, 8)
    tiny = augment(train, repeats=3, noise_fraction=1e-20)
    np.testing.assert_allclose(tiny, np.repeat(train, 3, axis=0), atol=1e-9)
    with pytest.raises(ValueError):
        augment(np.zeros((0, 8)))
    with pytest.raises(ValueError):
        augment(train, noise_fraction=0.0)
    with pytest.raises(ValueError):
        augment(train, repeats=0)


def test_augment_noise_variance():
    rng = np.random.default_rng(1)
    train = rng.standard_normal((50, 64)) * np.linspace(0.5, 3, 64)
    out = augment(train, repeats=5, noise_fraction=0.01, seed=2)
    diff = out - np.repeat(train, 5, axis=0)
    target = 0.01 * np.mean(np.var(train, axis=0))
    assert diff.size >= 10_000
    assert np.var(diff) == pytest.approx(target, rel=0.05)


def test_center_uncenter():
    rng = np.random.default_rng(3)
    mean = rng.standard_normal(8)
    np.testing.assert_array_equal(center(mean, mean), np.zeros(8))
    x = rng.standard_normal((30, 8))
    np.testing.assert_allclose(np.mean(center(x, x.mean(axis=0)), axis=0), 0.0, atol=1e-10)
    with pytest.raises(ValueError):
        center(np.zeros(7), mean)
    with pytest.raises(ValueError):
        uncenter(np.zeros(9), mean)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3))
def test_uncenter_center_roundtrip(seed, scale):
    rng = np.random.default_rng(seed)
    v, m = rng.standard_normal((2, 16)) * scale
    back = uncenter(center(v, m), m)
    # (v - m) + m is exact unless the subtraction rounds; then it is off by at most one ulp
    assert np.all(np.abs(back - v) <= np.spacing(np.maximum(np.abs(v), np.abs(m))))
