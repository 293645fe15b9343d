import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtfvae.room import (
    DEFAULT_ROOM, SPEED_OF_SOUND, RoomResponse, SceneSpec, babble_positions, calibrated_reflection,
    ground_truth_rtf, mix_at_snr, oogp_positions, read_scene_manifest, render_components,
    room_response, sabine_reflection, schroeder_t60, simulate_rir, speechlike_noise,
    synthesize_manifest, synthesize_scene, write_scene_manifest,
)
from rtfvae.rtf import unpack_rtf
from rtfvae.signal import SAMPLE_RATE, TimeSignal

ROOM = DEFAULT_ROOM
SRC = (2.0, 2.5, 1.2)


def _mic_at(distance_samples, src=SRC):
    d = distance_samples * SPEED_OF_SOUND / SAMPLE_RATE
    return (src[0] + d, src[1], src[2]), d


def test_free_field_integer_delay_peak():
    mic, d = _mic_at(40)
    rir = simulate_rir(ROOM, None, SRC, mic, max_order=0, beta=0.5, length=200)
    assert int(np.argmax(np.abs(rir))) == 40
    assert rir[40] == pytest.approx(1.0 / (4 * math.pi * d), rel=1e-9)
    rest = np.delete(rir, 40)
    assert np.max(np.abs(rest)) < 1e-12


def test_free_field_fractional_delay_energy_and_centroid():
    mic, d = _mic_at(50.37)
    rir = simulate_rir(ROOM, None, SRC, mic, max_order=0, beta=0.5, length=200)
    # unit-energy sinc; the Hann taper trims a few percent of the tail energy
    assert np.sum(rir ** 2) == pytest.approx((1 / (4 * math.pi * d)) ** 2, rel=0.05)
    # taps follow the Hann-windowed sinc at the delay resolved to 1/64 sample
    delay = np.rint(d / SPEED_OF_SOUND * SAMPLE_RATE * 64) / 64
    n = np.arange(44, 58)
    t = n - delay
    expected = 0.5 * (1 + np.cos(2 * np.pi * t / 64)) * np.sinc(t) / (4 * math.pi * d)
    np.testing.assert_allclose(rir[n], expected, atol=1e-12)


def test_doubling_distance_halves_peak():
    m1, _ = _mic_at(30)
    m2, _ = _mic_at(60)
    a = simulate_rir(ROOM, None, SRC, m1, max_order=0, beta=0.5, length=200)
    b = simulate_rir(ROOM, None, SRC, m2, max_order=0, beta=0.5, length=200)
    assert np.max(np.abs(b)) / np.max(np.abs(a)) == pytest.approx(0.5, rel=0.02)


def test_absorbing_walls_equal_direct_path():
    mic = (3.1, 2.9, 1.0)
    a = simulate_rir(ROOM, None, SRC, mic, max_order=6, beta=0.0, length=400)
    b = simulate_rir(ROOM, None, SRC, mic, max_order=0, beta=0.5, length=400)
    np.testing.assert_array_equal(a, b)


def test_first_order_image_count():
    mic = (3.1, 2.9, 1.0)
    a = simulate_rir(ROOM, None, SRC, mic, max_order=1, beta=0.5, length=2000, sinc_width=0)
    b = simulate_rir(ROOM, None, SRC, mic, max_order=0, beta=0.5, length=2000, sinc_width=0)
    # direct path plus six first-order images, each at gain beta / (4 pi d)
    src, m, dims = np.array(SRC), np.array(mic), np.array(ROOM)
    total = 0.0
    for axis in range(3):
        for wall in (0.0, dims[axis]):
            img = src.copy()
            img[axis] = 2 * wall - src[axis]
            total += 0.5 / (4 * math.pi * np.linalg.norm(img - m))
    assert np.sum(a - b) == pytest.approx(total, rel=1e-12)


def test_schroeder_t60_of_calibrated_rir():
    rir = simulate_rir(ROOM, 0.3, (1.9, 2.45, 1.15), (3.78, 3.14, 1.15))
    assert schroeder_t60(rir) == pytest.approx(0.3, rel=0.2)


def test_schroeder_on_exponential_decay():
    t = np.arange(8000) / SAMPLE_RATE
    rng = np.random.default_rng(0)
    rir = rng.standard_normal(t.size) * 10 ** (-3 * t / 0.25)  # 60 dB energy decay in 0.25 s
    assert schroeder_t60(rir) == pytest.approx(0.25, rel=0.05)


def test_calibrated_reflection_monotone_in_t60():
    b1 = calibrated_reflection(ROOM, 0.1)
    b3 = calibrated_reflection(ROOM, 0.3)
    assert 0 < b1 < b3 < 1


def test_sabine_formula():
    beta = sabine_reflection(ROOM, 0.6)
    v = 6 * 6 * 2.4
    s = 2 * (36 + 6 * 2.4 * 2)
    alpha = 24 * math.log(10) * v / (SPEED_OF_SOUND * s * 0.6)
    assert beta == pytest.approx(math.sqrt(1 - alpha))
    with pytest.raises(ValueError):
        sabine_reflection(ROOM, 0.1)


def test_too_short_t60_is_rejected():
    with pytest.raises(ValueError, match="too short"):
        simulate_rir(ROOM, 0.02, SRC, (3, 3, 1))


def test_outside_positions_rejected():
    with pytest.raises(ValueError):
        simulate_rir(ROOM, 0.3, (7.0, 1.0, 1.0), (3, 3, 1))
    with pytest.raises(ValueError):
        simulate_rir(ROOM, 0.3, SRC, (3, 3, 2.4))
    with pytest.raises(ValueError):
        simulate_rir(ROOM, 0.3, SRC, (3, 3, 1), max_order=-1)


def test_scene_spec_validation_and_json():
    with pytest.raises(ValueError):
        SceneSpec(t60=0.0)
    with pytest.raises(ValueError):
        SceneSpec(mic1_pos=(3, 3, 1), mic2_pos=(3, 3, 1))
    with pytest.raises(ValueError):
        SceneSpec(noise_kind="pink")
    with pytest.raises(ValueError):
        SceneSpec(source_pos=(10, 1, 1))
    s = SceneSpec(interferer_positions=((1.0, 1.0, 1.0),), noise_kind="ps_wgn", snr_db=5.0, seed=9)
    assert SceneSpec.from_json(s.to_json()) == s
    inf = SceneSpec()
    assert SceneSpec.from_json(inf.to_json()).snr_db == math.inf


def test_scene_manifest_roundtrip(tmp_path):
    scenes = [SceneSpec(seed=i, t60=0.1) for i in range(3)]
    path = tmp_path / "scenes.jsonl"
    write_scene_manifest(path, scenes)
    assert read_scene_manifest(path) == scenes
    out = list(synthesize_manifest(path, duration_s=1.0))
    assert len(out) == 3 and out[0][0].seed == 0
    path.write_text('{"t60": -1}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_scene_manifest(path)


def test_ground_truth_identity_delay_scaling():
    rng = np.random.default_rng(0)
    rir = rng.standard_normal(300) * np.exp(-np.arange(300) / 40)
    for method in ("narrowband", "pointwise"):
        h = ground_truth_rtf(RoomResponse(rir, rir.copy()), method=method, fft_len=512)
        np.testing.assert_allclose(h, np.r_[np.ones(128), np.zeros(128)], atol=1e-9)
        h = ground_truth_rtf(RoomResponse(rir, 0.5 * rir), method=method, fft_len=512)
        np.testing.assert_allclose(h, np.r_[0.5 * np.ones(128), np.zeros(128)], atol=1e-9)


def test_pointwise_delay_phase_oracle():
    # minimum-phase response with |G| >= 2/3, so the Tikhonov guard is inactive
    rir = 0.5 ** np.arange(200)
    tau = 7
    delayed = np.r_[np.zeros(tau), rir]
    fft_len = 1024
    h = unpack_rtf(ground_truth_rtf(RoomResponse(np.r_[rir, np.zeros(tau)], delayed),
                                    fft_len=fft_len, method="pointwise"))
    kbin = np.arange(1, 129) * (fft_len // 256)
    np.testing.assert_allclose(np.abs(h), 1.0, atol=1e-9)
    np.testing.assert_allclose(h, np.exp(-2j * np.pi * kbin * tau / fft_len), atol=1e-9)


def test_ground_truth_silent_reference():
    with pytest.raises(ValueError, match="reference channel silent"):
        ground_truth_rtf(RoomResponse(np.zeros(10), np.ones(10)))


@settings(max_examples=15, deadline=None)
@given(scale=st.floats(1e-3, 1e3), neg=st.booleans(), seed=st.integers(0, 1000))
def test_ground_truth_joint_scaling_invariance(scale, neg, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal((2, 300))
    c = -scale if neg else scale
    for method in ("narrowband", "pointwise"):
        a = ground_truth_rtf(RoomResponse(r1, r2), method=method, fft_len=512)
        b = ground_truth_rtf(RoomResponse(c * r1, c * r2), method=method, fft_len=512)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_mix_at_snr_examples():
    x = np.random.default_rng(0).standard_normal(1000)
    assert mix_at_snr(x, x, 0.0) == pytest.approx(1.0)
    assert mix_at_snr(x, x, 20.0) == pytest.approx(0.1)
    assert mix_at_snr(x, x, math.inf) == 0.0
    with pytest.raises(ValueError):
        mix_at_snr(x, np.zeros(1000), 0.0)


@settings(max_examples=40, deadline=None)
@given(snr=st.floats(-30, 40), seed=st.integers(0, 2 ** 32 - 1))
def test_mix_at_snr_recomputed(snr, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(4000) * rng.uniform(0.1, 10)
    v = rng.standard_normal(4000) * rng.uniform(0.1, 10)
    g = mix_at_snr(TimeSignal(c), TimeSignal(v), snr)
    measured = 10 * np.log10(np.mean(c ** 2) / np.mean((g * v) ** 2))
    assert abs(measured - snr) <= 0.05


def _spec(**kw):
    base = dict(t60=0.1, source_pos=(1.9, 2.45, 1.15), seed=3)
    base.update(kw)
    return SceneSpec(**base)


def test_scene_decomposition_and_determinism():
    babble = babble_positions(_spec().mic1_pos, _spec().mic2_pos, ROOM, n=4)
    spec = _spec(interferer_positions=babble, noise_kind="babble", snr_db=5.0,
                 source_kind="speechlike")
    a = synthesize_scene(spec, 1.0)
    b = synthesize_scene(spec, 1.0)
    for m in ("x1", "x2", "c1", "c2", "v1", "v2"):
        np.testing.assert_array_equal(getattr(a, m).samples, getattr(b, m).samples)
    np.testing.assert_allclose(a.x1.samples - a.c1.samples - a.v1.samples, 0.0, atol=1e-12)
    np.testing.assert_allclose(a.x2.samples - a.c2.samples - a.v2.samples, 0.0, atol=1e-12)
    snr = 10 * np.log10(a.c1.energy() / a.v1.energy())
    assert snr == pytest.approx(5.0, abs=0.05)


def test_noiseless_scene():
    obs = synthesize_scene(_spec(), 1.0)
    assert np.all(obs.v1.samples == 0) and np.all(obs.v2.samples == 0)
    np.testing.assert_array_equal(obs.x1.samples, obs.c1.samples)


def test_point_source_at_source_position_energy_ratio():
    spec = _spec(interferer_positions=((1.9, 2.45, 1.15),), noise_kind="ps_wgn", snr_db=0.0)
    obs = synthesize_scene(spec, 2.0)
    ratio = 10 * np.log10(obs.v1.energy() / obs.c1.energy())
    assert abs(ratio) <= 0.05


def test_scene_errors():
    with pytest.raises(ValueError):
        synthesize_scene(_spec(noise_kind="ps_noise", snr_db=0.0), 1.0)
    with pytest.raises(ValueError):
        synthesize_scene(_spec(noise_kind="babble", snr_db=0.0,
                               interferer_positions=((1, 1, 1),)), 1.0)
    with pytest.raises(ValueError):
        synthesize_scene(_spec(), 0.5)


@pytest.mark.parametrize("kind", ["awgn", "ps_speechlike", "ps_noise", "babble_and_noise"])
def test_noise_kinds_render(kind):
    spec = _spec(noise_kind=kind, snr_db=0.0,
                 interferer_positions=oogp_positions(ROOM, height=1.15)[:4])
    c1, c2, v1, v2 = render_components(spec, 1.0)
    assert np.all(np.isfinite(v1)) and np.mean(v1 ** 2) > 0 and np.mean(v2 ** 2) > 0
    if kind == "awgn":
        assert abs(np.corrcoef(v1, v2)[0, 1]) < 0.05


def test_babble_geometry():
    spec = _spec()
    pts = babble_positions(spec.mic1_pos, spec.mic2_pos, ROOM, n=8)
    center = (np.array(spec.mic1_pos) + np.array(spec.mic2_pos)) / 2
    radii = [np.linalg.norm(np.array(p) - center) for p in pts]
    np.testing.assert_allclose(radii, min(ROOM) / 2 - 0.5)
    with pytest.raises(ValueError):
        babble_positions(spec.mic1_pos, spec.mic2_pos, ROOM, n=3)


def test_oogp_distance_from_walls():
    for p in oogp_positions(ROOM):
        assert min(p[0], ROOM[0] - p[0], p[1], ROOM[1] - p[1]) == pytest.approx(1.0)


def test_speechlike_is_modulated():
    x = speechlike_noise(64000, np.random.default_rng(0))
    env = np.sqrt(np.convolve(x ** 2, np.ones(800) / 800, mode="valid"))[::800]
    assert np.std(env) / np.mean(env) > 0.3  # white noise would give ~0.05


def test_room_response_cached_readonly():
    rr = room_response(ROOM, 0.1, (1.9, 2.45, 1.15), (3.7, 3.1, 1.15), (3.8, 3.0, 1.15))
    assert not rr.rir1.flags.writeable
    assert room_response(ROOM, 0.1, (1.9, 2.45, 1.15), (3.7, 3.1, 1.15), (3.8, 3.0, 1.15)).rir1 is rr.rir1
