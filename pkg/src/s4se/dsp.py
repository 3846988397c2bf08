"""STFT front end, amplitude compression, ZCA whitening and mel conversions."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ColaViolation, DimensionMismatch, InsufficientData, SignalTooShort

_NOLA_TOL = 1e-10
_ZCA_MAGIC = b"ZCAW"
_ZCA_VERSION = 1


def hann_window(win_length: int) -> np.ndarray:
    """Hann taper without zero end points.

    The periodic Hann is exactly zero at its first sample, which leaves every
    frame boundary unrecoverable when hop == win_length (the 510/255/255
    setting).  Sampling the raised cosine on ``win_length + 1`` intervals keeps
    every tap positive.
    """
    n = np.arange(1, win_length + 1)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / (win_length + 1))


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 510
    win_length: int = 400
    hop_length: int = 100
    center: bool = True
    window: np.ndarray = field(init=False, repr=False, compare=False)
    nola: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError(
                f"need 0 < hop ({self.hop_length}) <= win ({self.win_length}) <= n_fft ({self.n_fft})")
        w = np.zeros(self.n_fft)
        off = (self.n_fft - self.win_length) // 2
        w[off:off + self.win_length] = hann_window(self.win_length)
        object.__setattr__(self, "window", w)
        # steady-state overlap-add envelope of w^2, one hop period
        env = np.zeros(self.hop_length)
        sq = w ** 2
        for start in range(0, self.n_fft, self.hop_length):
            chunk = sq[start:start + self.hop_length]
            env[:chunk.shape[0]] += chunk
        object.__setattr__(self, "nola", bool(env.min() > _NOLA_TOL * env.max()))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        if self.center:
            return 1 + -(-length // self.hop_length)
        return 1 + (length - self.n_fft) // self.hop_length

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "win_length": self.win_length,
                "hop_length": self.hop_length, "center": self.center}


DEFAULT_STFT = StftConfig(510, 400, 100)
LONG_HOP_STFT = StftConfig(510, 255, 255)


def frame_indices(cfg: StftConfig, length: int) -> np.ndarray:
    """(T, n_fft) gather indices into ``append(signal, 0)``.

    Center mode reflect-pads n_fft // 2 samples on both sides and zero-pads the
    tail so the last frame is complete; index ``length`` addresses the zero.
    """
    T = cfg.n_frames(length)
    if cfg.center:
        pad = cfg.n_fft // 2
        base = np.pad(np.arange(length), pad, mode="reflect")
    else:
        base = np.arange(length)
    need = (T - 1) * cfg.hop_length + cfg.n_fft
    if base.shape[0] < need:
        base = np.concatenate([base, np.full(need - base.shape[0], length)])
    starts = np.arange(T) * cfg.hop_length
    return base[starts[:, None] + np.arange(cfg.n_fft)[None, :]]


@dataclass
class ComplexSpectrogram:
    """STFT coefficients laid out (..., F, T)."""

    data: np.ndarray
    config: StftConfig
    sample_rate: int = 16000
    length: int | None = None

    def __post_init__(self):
        if self.data.shape[-2] != self.config.n_bins:
            raise DimensionMismatch(
                f"expected {self.config.n_bins} frequency bins, got {self.data.shape[-2]}")

    @property
    def n_bins(self) -> int:
        return self.data.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]

    def replace(self, data) -> "ComplexSpectrogram":
        return ComplexSpectrogram(data, self.config, self.sample_rate, self.length)


def stft(signal, cfg: StftConfig, sample_rate: int = 16000) -> ComplexSpectrogram:
    x = np.asarray(signal, dtype=np.float64)
    L = x.shape[-1]
    if L < cfg.win_length or (cfg.center and L <= cfg.n_fft // 2):
        raise SignalTooShort(f"signal of {L} samples is shorter than the analysis window")
    idx = frame_indices(cfg, L)
    xz = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    frames = xz[..., idx] * cfg.window
    spec = scipy.fft.rfft(frames, axis=-1)
    return ComplexSpectrogram(np.swapaxes(spec, -1, -2), cfg, sample_rate, L)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add with window-squared normalization."""
    cfg = spec.config
    if not cfg.nola:
        raise ColaViolation(
            f"window/hop {cfg.win_length}/{cfg.hop_length} does not overlap-add to a nonzero envelope")
    length = length if length is not None else spec.length
    T = spec.n_frames
    frames = scipy.fft.irfft(np.swapaxes(spec.data, -1, -2), cfg.n_fft, axis=-1) * cfg.window
    total = (T - 1) * cfg.hop_length + cfg.n_fft
    out = np.zeros(frames.shape[:-2] + (total,))
    env = np.zeros(total)
    sq = cfg.window ** 2
    for t in range(T):
        sl = slice(t * cfg.hop_length, t * cfg.hop_length + cfg.n_fft)
        out[..., sl] += frames[..., t, :]
        env[sl] += sq
    nz = env > _NOLA_TOL * env.max()
    out[..., nz] /= env[nz]
    start = cfg.n_fft // 2 if cfg.center else 0
    if length is None:
        length = (T - 1) * cfg.hop_length
    return out[..., start:start + length]


def frame_energy(spec: ComplexSpectrogram) -> np.ndarray:
    """Per-frame time-domain energy recovered from one-sided spectra (Parseval)."""
    mag2 = np.abs(spec.data) ** 2
    n = spec.config.n_fft
    w = np.full(spec.n_bins, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return np.tensordot(w, mag2, axes=([0], [-2])) / n


def compress(x, alpha: float = 0.5, beta: float = 0.15):
    """c -> beta |c|^alpha e^{i angle c}."""
    mag = np.abs(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(mag > 0, x / np.where(mag > 0, mag, 1), 0)
    return beta * mag ** alpha * unit


def decompress(x, alpha: float = 0.5, beta: float = 0.15):
    mag = np.abs(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(mag > 0, x / np.where(mag > 0, mag, 1), 0)
    return (mag / beta) ** (1.0 / alpha) * unit


def amplitude_transform(spec: ComplexSpectrogram, alpha: float = 0.5, beta: float = 0.15,
                        inverse: bool = False) -> ComplexSpectrogram:
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    f = decompress if inverse else compress
    return spec.replace(f(spec.data, alpha, beta))


@dataclass(frozen=True)
class WhiteningStats:
    mean: np.ndarray
    transform: np.ndarray
    eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def inverse_transform(self) -> np.ndarray:
        return np.linalg.inv(self.transform)


def fit_whitening(specs, eps: float = 1e-5) -> WhiteningStats:
    """ZCA statistics over frequency-bin magnitude vectors, one observation per frame.

    ``eps`` is relative to the mean variance across bins.
    """
    chunks = []
    for s in specs:
        mag = np.abs(s.data if isinstance(s, ComplexSpectrogram) else np.asarray(s))
        chunks.append(np.swapaxes(mag, -1, -2).reshape(-1, mag.shape[-2]))
    obs = np.concatenate(chunks, axis=0)
    n, F = obs.shape
    if n <= F:
        raise InsufficientData(f"{n} frames cannot estimate a {F}x{F} covariance")
    mean = obs.mean(axis=0)
    centered = obs - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    reg = eps * np.trace(cov) / F
    scale = 1.0 / np.sqrt(np.maximum(evals, 0.0) + reg)
    transform = (evecs * scale) @ evecs.T
    return WhiteningStats(mean, 0.5 * (transform + transform.T), float(eps))


def whiten_array(data, stats: WhiteningStats, inverse: bool = False) -> np.ndarray:
    """Affine map over the bin axis of (..., F, T) data."""
    if data.shape[-2] != stats.dim:
        raise DimensionMismatch(f"{data.shape[-2]} bins vs whitening dimension {stats.dim}")
    if inverse:
        return np.linalg.solve(stats.transform, data) + stats.mean[:, None]
    return stats.transform @ (data - stats.mean[:, None])


def whiten(spec: ComplexSpectrogram, stats: WhiteningStats, inverse: bool = False) -> ComplexSpectrogram:
    return spec.replace(whiten_array(spec.data, stats, inverse))


def save_whitening(path, stats: WhiteningStats) -> None:
    with open(path, "wb") as f:
        f.write(whitening_bytes(stats))


def whitening_bytes(stats: WhiteningStats) -> bytes:
    F = stats.dim
    return (_ZCA_MAGIC + struct.pack("<IId", _ZCA_VERSION, F, stats.eps)
            + stats.mean.astype("<f8").tobytes() + stats.transform.astype("<f8").tobytes())


def whitening_from_bytes(raw: bytes) -> WhiteningStats:
    if raw[:4] != _ZCA_MAGIC:
        raise ValueError("not a ZCAW whitening file")
    version, F, eps = struct.unpack_from("<IId", raw, 4)
    if version != _ZCA_VERSION:
        raise ValueError(f"unsupported whitening file version {version}")
    off = 4 + struct.calcsize("<IId")
    mean = np.frombuffer(raw, "<f8", F, off).copy()
    transform = np.frombuffer(raw, "<f8", F * F, off + 8 * F).reshape(F, F).copy()
    return WhiteningStats(mean, transform, eps)


def load_whitening(path) -> WhiteningStats:
    with open(path, "rb") as f:
        return whitening_from_bytes(f.read())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)
