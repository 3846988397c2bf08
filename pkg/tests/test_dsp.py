import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err
from s4se.dsp import (DEFAULT_STFT, LONG_HOP_STFT, ComplexSpectrogram, StftConfig,
                      WhiteningStats, amplitude_transform, compress, decompress, fit_whitening,
                      frame_energy, frame_indices, hann_window, hz_to_mel, istft, load_whitening,
                      mel_to_hz, save_whitening, stft, whiten, whiten_array)
from s4se.errors import ColaViolation, DimensionMismatch, InsufficientData, SignalTooShort


# ---------------------------------------------------------------- stft / istft

def test_zeros_give_zero_spectrogram():
    s = stft(np.zeros(1600), DEFAULT_STFT)
    assert s.n_bins == 256
    assert np.all(s.data == 0)


def test_frame_count():
    assert stft(np.zeros(1600), DEFAULT_STFT).n_frames == 17
    assert DEFAULT_STFT.n_frames(1501) == 17


def test_too_short():
    with pytest.raises(SignalTooShort):
        stft(np.zeros(399), DEFAULT_STFT)


def test_window_has_no_zero_taps():
    w = hann_window(255)
    assert w.min() > 0 and np.isclose(w.max(), 1.0)
    assert np.allclose(w, w[::-1])


@pytest.mark.parametrize("cfg", [DEFAULT_STFT, LONG_HOP_STFT], ids=["510-400-100", "510-255-255"])
def test_round_trip(cfg, rng):
    x = rng.standard_normal(4000)
    assert cfg.nola
    assert np.max(np.abs(istft(stft(x, cfg)) - x)) < 1e-6


def test_zeros_round_trip():
    assert np.all(istft(stft(np.zeros(2000), DEFAULT_STFT)) == 0)


def test_bin_centre_sine_leakage():
    cfg, k = DEFAULT_STFT, 40
    n = np.arange(8000)
    x = np.sin(2 * np.pi * k * n / cfg.n_fft + 0.3)
    s = stft(x, cfg)
    p = np.abs(s.data) ** 2
    interior = slice(3, s.n_frames - 3)
    share = p[k - 1:k + 2, interior].sum(axis=0) / p[:, interior].sum(axis=0)
    assert share.min() >= 0.95
    # independent oracle: a windowed DFT of one interior frame built by hand
    t = 10
    start = t * cfg.hop_length - cfg.n_fft // 2
    frame = x[start:start + cfg.n_fft] * cfg.window
    dft = np.array([np.sum(frame * np.exp(-2j * np.pi * b * np.arange(cfg.n_fft) / cfg.n_fft))
                    for b in range(cfg.n_bins)])
    assert rel_err(s.data[:, t], dft) < 1e-9


def test_single_frame_inverse():
    cfg = StftConfig(64, 48, 16, center=False)
    rng = np.random.default_rng(3)
    spec = rng.standard_normal((cfg.n_bins, 1)) + 1j * rng.standard_normal((cfg.n_bins, 1))
    spec[0] = spec[0].real
    spec[-1] = spec[-1].real
    out = istft(ComplexSpectrogram(spec, cfg), length=cfg.n_fft)
    # direct windowed inverse DFT, divided by the window-squared envelope
    n = np.arange(cfg.n_fft)
    full = np.concatenate([spec[:, 0], np.conj(spec[-2:0:-1, 0])])
    frame = np.array([np.sum(full * np.exp(2j * np.pi * np.arange(cfg.n_fft) * m / cfg.n_fft))
                      for m in n]).real / cfg.n_fft
    w = cfg.window
    support = w > 0
    expect = np.zeros(cfg.n_fft)
    expect[support] = frame[support] / w[support]
    assert np.count_nonzero(support) == cfg.win_length
    assert np.max(np.abs(out[support] - expect[support])) < 1e-6


def test_non_nola_rejected():
    # the zero-free window makes every hop <= win_length valid, so force the flag
    assert StftConfig(16, 4, 4).nola
    bad = StftConfig(16, 8, 8)
    object.__setattr__(bad, "nola", False)
    with pytest.raises(ColaViolation):
        istft(ComplexSpectrogram(np.zeros((9, 3), complex), bad))


def test_frame_indices_reflect_and_tail():
    cfg = StftConfig(8, 8, 4)
    idx = frame_indices(cfg, 10)
    assert idx.shape == (cfg.n_frames(10), 8)
    assert list(idx[0, :4]) == [4, 3, 2, 1]
    assert idx.max() == 10   # zero-padded tail


def test_spectrogram_bin_check():
    with pytest.raises(DimensionMismatch):
        ComplexSpectrogram(np.zeros((10, 3), complex), DEFAULT_STFT)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 32 - 1))
def test_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(1200), r.standard_normal(1200)
    lhs = stft(a * x + b * y, DEFAULT_STFT).data
    rhs = a * stft(x, DEFAULT_STFT).data + b * stft(y, DEFAULT_STFT).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


@settings(max_examples=20, deadline=None)
@given(L=st.integers(600, 3000), seed=st.integers(0, 2 ** 32 - 1))
def test_parseval(L, seed):
    x = np.random.default_rng(seed).standard_normal(L)
    cfg = DEFAULT_STFT
    s = stft(x, cfg)
    xz = np.append(x, 0.0)
    windowed = xz[frame_indices(cfg, L)] * cfg.window
    assert rel_err(frame_energy(s), np.sum(windowed ** 2, axis=-1)) < 1e-6


@settings(max_examples=15, deadline=None)
@given(L=st.integers(510, 4000), seed=st.integers(0, 2 ** 32 - 1),
       long_hop=st.booleans())
def test_round_trip_property(L, seed, long_hop):
    cfg = LONG_HOP_STFT if long_hop else DEFAULT_STFT
    x = np.random.default_rng(seed).standard_normal(L)
    assert np.max(np.abs(istft(stft(x, cfg)) - x)) < 1e-6


# ---------------------------------------------------------------- amplitude transform

def test_compress_hand_value():
    assert np.isclose(compress(np.array([4.0]))[0], 0.3)


def test_identity_transform(rng):
    s = stft(rng.standard_normal(1000), DEFAULT_STFT)
    assert np.allclose(amplitude_transform(s, 1.0, 1.0).data, s.data, rtol=1e-15, atol=0)


def test_transform_round_trip(rng):
    s = stft(rng.standard_normal(1000), DEFAULT_STFT)
    back = amplitude_transform(amplitude_transform(s), inverse=True)
    assert np.max(np.abs(back.data - s.data)) < 1e-9


def test_transform_zero_and_phase():
    assert compress(np.array([0j]))[0] == 0
    c = compress(np.array([-1j * 9.0]))[0]
    assert np.isclose(c, -1j * 0.45)
    assert np.isclose(decompress(np.array([c]))[0], -9j)


def test_transform_rejects_bad_parameters(rng):
    s = stft(rng.standard_normal(1000), DEFAULT_STFT)
    with pytest.raises(ValueError):
        amplitude_transform(s, 0.0, 0.15)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.05, 1.0), beta=st.floats(0.01, 10.0), seed=st.integers(0, 2 ** 32 - 1))
def test_transform_inverse_property(alpha, beta, seed):
    r = np.random.default_rng(seed)
    c = r.standard_normal(50) + 1j * r.standard_normal(50)
    back = decompress(compress(c, alpha, beta), alpha, beta)
    assert np.max(np.abs(back - c)) <= 1e-9 * max(1.0, np.max(np.abs(c)))


# ---------------------------------------------------------------- whitening

def test_whitening_diagonal_closed_form():
    # +-2 in bin 0 and +-1 in bin 1, crossed, gives covariance diag(4, 1) exactly
    frames = np.array([[2, 1], [2, -1], [-2, 1], [-2, -1]], float).T
    obs = np.tile(frames, 2)   # 8 frames > F = 2
    # magnitudes are taken internally, so shift to keep values positive
    st_ = fit_whitening([obs + 5.0], eps=0.0)
    assert np.allclose(st_.mean, [5, 5])
    assert np.allclose(st_.transform, np.diag([0.5, 1.0]), atol=1e-12)


def test_whitening_iid_identity():
    r = np.random.default_rng(0)
    obs = r.standard_normal((8, 10_000)) + 10.0
    st_ = fit_whitening([obs])
    assert np.linalg.norm(st_.transform - np.eye(8), 2) < 0.1


def test_whitening_insufficient():
    with pytest.raises(InsufficientData):
        fit_whitening([np.ones((8, 4))])


def test_whitened_covariance_is_diagonal():
    r = np.random.default_rng(1)
    M = r.standard_normal((6, 6))
    obs = np.abs(M @ r.standard_normal((6, 400)) + 20)
    st_ = fit_whitening([obs[:, :200], obs[:, 200:]], eps=0.0)
    w = whiten_array(obs, st_)
    cov = np.cov(w, bias=True)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) <= 1e-4 * np.max(np.diag(cov))
    T = st_.transform
    assert np.allclose(T, T.T) and np.linalg.eigvalsh(T).min() > 0


def test_whitening_identity_stats_unchanged(rng):
    s = stft(rng.standard_normal(1000), DEFAULT_STFT)
    ident = WhiteningStats(np.zeros(256), np.eye(256))
    assert np.array_equal(whiten(s, ident).data, s.data)


def test_whiten_round_trip(rng):
    specs = [stft(rng.standard_normal(8000), LONG_HOP_STFT) for _ in range(10)]
    st_ = fit_whitening(specs)
    mag = np.abs(specs[0].data)
    back = whiten_array(whiten_array(mag, st_), st_, inverse=True)
    assert np.max(np.abs(back - mag)) < 1e-6


def test_whiten_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        whiten_array(np.zeros((3, 4)), WhiteningStats(np.zeros(2), np.eye(2)))


def test_whitening_file(tmp_path):
    r = np.random.default_rng(2)
    st_ = fit_whitening([np.abs(r.standard_normal((3, 50)))], eps=1e-3)
    p = tmp_path / "w.zcaw"
    save_whitening(p, st_)
    raw = p.read_bytes()
    assert raw[:4] == b"ZCAW" and len(raw) == 4 + 16 + 8 * 3 + 8 * 9
    back = load_whitening(p)
    assert np.array_equal(back.mean, st_.mean) and np.array_equal(back.transform, st_.transform)
    assert back.eps == 1e-3


# ---------------------------------------------------------------- mel

def test_mel_values():
    assert hz_to_mel(0.0) == 0.0
    assert abs(hz_to_mel(1000.0) - 999.99) < 0.01


@pytest.mark.parametrize("f", [100.0, 4000.0, 8000.0])
def test_mel_inverse(f):
    assert abs(mel_to_hz(hz_to_mel(f)) - f) < 1e-9
