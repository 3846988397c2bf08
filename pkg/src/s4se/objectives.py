"""Training losses and evaluation metrics.

Losses accept numpy arrays or :class:`~s4se.autodiff.Tensor` values and
return a scalar Tensor, so the same code serves training and evaluation.
Batched inputs put the batch on the leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import StftConfig, frame_indices, stft
from .errors import ShapeMismatch, ZeroReference

LOG_EPS = 1e-7
SI_SDR_CAP = 100.0


def _default_resolutions():
    return (StftConfig(512, 240, 50), StftConfig(1024, 600, 120), StftConfig(2048, 1200, 240))


@dataclass(frozen=True)
class MultiResStftConfig:
    resolutions: tuple = field(default_factory=_default_resolutions)

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("need at least one STFT resolution")


def stft_magnitude(y, cfg: StftConfig) -> Tensor:
    """Differentiable |STFT| laid out (..., T, F)."""
    y = ad.as_tensor(y)
    idx = frame_indices(cfg, y.shape[-1])
    frames = ad.gather_frames(y, idx) * cfg.window.astype(y.dtype)
    return ad.abs_(ad.rfft(frames, cfg.n_fft, axis=-1))


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def spectral_convergence(S, S_hat) -> Tensor:
    """|| |S| - |S_hat| ||_F / || |S| ||_F over the whole batch."""
    S, S_hat = ad.as_tensor(S), ad.as_tensor(S_hat)
    ref = float(np.sqrt(np.sum(S.data.astype(np.float64) ** 2)))
    if ref == 0.0:
        raise ZeroReference("reference spectrogram is identically zero")
    return ad.norm(S - S_hat) * (1.0 / ref)


def log_magnitude_distance(S, S_hat, eps: float = LOG_EPS) -> Tensor:
    """Sum over bins of |ln S - ln S_hat|, averaged over frames (and batch)."""
    S, S_hat = ad.as_tensor(S), ad.as_tensor(S_hat)
    n_frames = int(np.prod(S.shape[:-1]))
    d = ad.log(ad.clamp_min(S, eps)) - ad.log(ad.clamp_min(S_hat, eps))
    return ad.sum_(ad.abs_(d)) * (1.0 / n_frames)


def stft_loss(y, y_hat, cfg: StftConfig) -> Tensor:
    y, y_hat = ad.as_tensor(y), ad.as_tensor(y_hat)
    _check_same(y, y_hat)
    S = stft_magnitude(y, cfg)
    S_hat = stft_magnitude(y_hat, cfg)
    return spectral_convergence(S, S_hat) + log_magnitude_distance(S, S_hat)


def time_domain_loss(y, y_hat, mrcfg: MultiResStftConfig | None = None) -> Tensor:
    """Mean absolute waveform error plus the average multi-resolution STFT loss."""
    mrcfg = mrcfg or MultiResStftConfig()
    y, y_hat = ad.as_tensor(y), ad.as_tensor(y_hat)
    _check_same(y, y_hat)
    total = ad.mean(ad.abs_(y - y_hat))
    M = len(mrcfg.resolutions)
    for cfg in mrcfg.resolutions:
        total = total + stft_loss(y, y_hat, cfg) * (1.0 / M)
    return total


def mag_loss(S, S_hat) -> Tensor:
    S, S_hat = ad.as_tensor(S), ad.as_tensor(S_hat)
    _check_same(S, S_hat)
    return ad.mean(ad.abs_(S - S_hat))


def _parts(S):
    if isinstance(S, tuple):
        return ad.as_tensor(S[0]), ad.as_tensor(S[1])
    S = ad.as_tensor(S)
    if not np.iscomplexobj(S.data):
        return S, ad.as_tensor(np.zeros_like(S.data))
    return S.real, S.imag


def _magnitude(re: Tensor, im: Tensor) -> Tensor:
    return ad.abs_(ad.complex_(re, im))


def complex_loss(S, S_hat) -> Tensor:
    """Mean |dRe| + mean |dIm| + magnitude L1.

    Either argument may be a complex array/Tensor or a ``(real, imag)`` pair.
    """
    Sr, Si = _parts(S)
    Hr, Hi = _parts(S_hat)
    _check_same(Sr, Hr)
    ri = ad.mean(ad.abs_(Sr - Hr)) + ad.mean(ad.abs_(Si - Hi))
    return ri + mag_loss(_magnitude(Sr, Si), _magnitude(Hr, Hi))


# ---------------------------------------------------------------- metrics

def si_sdr(ref, est) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeMismatch(f"shapes differ: {ref.shape} vs {est.shape}")
    energy = ref @ ref
    if energy == 0.0:
        raise ZeroReference("reference signal is identically zero")
    target = (est @ ref / energy) * ref
    residual = est - target
    t, r = target @ target, residual @ residual
    # relative thresholds keep exact scalings / orthogonal noise at the caps
    tiny = 1e-20 * max(est @ est, energy)
    if r <= tiny:
        return SI_SDR_CAP
    if t <= tiny:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(t / r), -SI_SDR_CAP, SI_SDR_CAP))


def log_spectral_distance(ref, est, cfg: StftConfig | None = None, eps: float = LOG_EPS) -> float:
    """RMS over frames of the per-frame RMS of 20 log10 magnitude differences (dB)."""
    cfg = cfg or StftConfig()
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeMismatch(f"shapes differ: {ref.shape} vs {est.shape}")
    A = np.maximum(np.abs(stft(ref, cfg).data), eps)
    B = np.maximum(np.abs(stft(est, cfg).data), eps)
    d = 20.0 * (np.log10(A) - np.log10(B))             # (F, T)
    per_frame = np.sqrt(np.mean(d ** 2, axis=0))
    return float(np.sqrt(np.mean(per_frame ** 2)))
