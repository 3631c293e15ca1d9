import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpmatch.exceptions import ContractError, FormatError
from pnpmatch.features import (
    FeatureVector,
    FilterBankConfig,
    cqt_features,
    get_feature_map,
    jtfs,
    log_compress,
    mss,
    mss_distance,
    phi_jtfs,
    read_feature_vector,
    scalogram,
    write_feature_csv,
    write_feature_vector,
)
from pnpmatch.ftm import N_SAMPLES, SAMPLE_RATE, AudioBuffer, synthesize

P_JTFS = 2880


def sine(freq, n=N_SAMPLES):
    t = np.arange(n) / SAMPLE_RATE
    return AudioBuffer(0.5 * np.sin(2 * np.pi * freq * t))


@pytest.fixture(scope="module")
def drum():
    return synthesize(np.array([0.1, -0.3, -0.2, 0.4, 0.2]))


def test_scalogram_peak_at_sine_frequency():
    sc = scalogram(sine(440.0))
    energy = sc.magnitudes.sum(axis=1)
    peak = sc.frequencies[np.argmax(energy)]
    assert abs(12 * math.log2(peak / 440.0)) <= 0.5  # nearest of the 12-per-octave filters


def test_scalogram_frequencies_descend_by_semitone():
    f = scalogram(sine(440.0)).frequencies
    assert f.size == 120
    np.testing.assert_allclose(f[:-1] / f[1:], 2 ** (1 / 12))


def test_jtfs_dimension_and_paths(drum):
    v = jtfs(drum)
    assert v.P == P_JTFS
    assert v.paths.size == P_JTFS
    order = v.paths["order"]
    assert np.sum(order == 1) == 40
    spin = v.paths["spin"]
    assert np.sum((order == 2) & (spin != 0)) == 2400
    assert np.sum((order == 2) & (spin == 0) & (v.paths["xi_fr"] == 0)) == 240
    assert np.sum((order == 2) & (v.paths["xi2"] == 0)) == 200


def test_zero_signal_has_zero_features():
    z = AudioBuffer(np.zeros(N_SAMPLES))
    assert not np.any(jtfs(z, with_paths=False).values)
    assert not np.any(phi_jtfs(z))
    assert not np.any(cqt_features(z))


def test_jtfs_positive_homogeneity(drum):
    a = jtfs(drum, with_paths=False).values
    b = jtfs(AudioBuffer(3.0 * drum.samples), with_paths=False).values
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-9, atol=1e-12 * a.max())


def test_jtfs_sign_invariance(drum):
    a = jtfs(drum, with_paths=False).values
    b = jtfs(AudioBuffer(-drum.samples), with_paths=False).values
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_jtfs_stable_to_small_shift(drum):
    a = phi_jtfs(drum)
    x = np.concatenate([np.zeros(4), drum.samples[:-4]])
    b = phi_jtfs(AudioBuffer(x))
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 0.05


def test_log_compress_values():
    np.testing.assert_allclose(log_compress(np.array([0.0, 1e-3, 9e-3])), [0.0, math.log(2), math.log(10)])
    with pytest.raises(ContractError):
        log_compress(np.array([-1.0]))
    fv = log_compress(FeatureVector(np.array([1e-3]), None, "jtfs"))
    assert fv.feature_map_id == "jtfs+log"


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20))
def test_log_compress_monotone(xs):
    x = np.sort(np.array(xs))
    y = log_compress(x)
    assert np.all(np.diff(y) >= 0)
    assert np.all(y >= 0)


def test_cqt_features_shape(drum):
    c = cqt_features(drum)
    assert c.shape == (240,)
    assert np.all(np.isfinite(c)) and np.all(c >= 0)
    assert np.all(c[120:] >= c[:120] - 1e-12)  # max-pooled half dominates the mean-pooled half


def test_mss_layout():
    x = AudioBuffer(np.random.default_rng(0).normal(size=4096))
    v = mss(x, window_sizes=(256,), with_paths=True)
    frames = 1 + (4096 - 256) // 64
    assert v.P == 2 * frames * 129
    half = v.P // 2
    np.testing.assert_allclose(v.values[half:], np.log(v.values[:half] + 1e-7))


def test_mss_distance_impulse_against_silence():
    imp = np.zeros(2048)
    imp[1024] = 1.0
    n_fft = 2048
    # one frame; Hann window value at the impulse is 1, so every bin has magnitude 1
    d = mss_distance(imp, np.zeros(2048), window_sizes=(n_fft,))
    expected = 1.0 + abs(math.log(1 + 1e-7) - math.log(1e-7))
    assert d == pytest.approx(expected, rel=1e-12)


def test_mss_distance_symmetric_and_zero(drum):
    other = synthesize(np.array([0.0, 0.0, 0.0, 0.0, 0.0]))
    assert mss_distance(drum, drum) == 0.0
    assert mss_distance(drum, other) == pytest.approx(mss_distance(other, drum), rel=1e-14)
    assert mss_distance(drum, other) > 0


def test_feature_map_registry():
    assert get_feature_map("jtfs") is phi_jtfs
    with pytest.raises(ValueError):
        get_feature_map("nope")


def test_config_validation():
    with pytest.raises(ValueError):
        FilterBankConfig(q1=0)


@settings(max_examples=20)
@given(st.lists(st.floats(-1e300, 1e300), min_size=0, max_size=50), st.text(max_size=8))
def test_feature_vector_round_trip(tmp_path_factory, xs, fid):
    path = tmp_path_factory.mktemp("fv") / "v.pnpf"
    v = FeatureVector(np.array(xs, dtype=float), None, fid)
    write_feature_vector(path, v)
    back = read_feature_vector(path)
    assert back.feature_map_id == fid
    assert np.array_equal(back.values, v.values)


def test_feature_vector_format_errors(tmp_path):
    path = tmp_path / "v.pnpf"
    write_feature_vector(path, FeatureVector(np.arange(4.0), None, "cqt"))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_feature_vector(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_feature_vector(path)


def test_feature_csv(tmp_path, drum):
    path = tmp_path / "v.csv"
    write_feature_csv(path, jtfs(drum))
    lines = path.read_text().splitlines()
    assert lines[0] == "index,order,xi1,xi2,xi_fr,spin,time,value"
    assert len(lines) == P_JTFS + 1
