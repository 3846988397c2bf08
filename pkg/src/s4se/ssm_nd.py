"""2-D (S4ND-style) state-space kernels.

Each axis carries its own DPLR SSM; the output projection is a rank-R sum of
outer products ``C = sum_r c1_r (x) c2_r``, so the 2-D kernel factorizes as
``K[i, j] = sum_r K1_r[i] * K2_r[j]`` and can be applied one axis at a time.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import DimensionMismatch
from .ssm_kernel import DiscreteSSM, DplrSSM, _as_vector, fft_conv, materialize_kernel

_MAGIC = b"SSK2"
_VERSION = 1


@dataclass(frozen=True)
class Ssm2D:
    axis1: DplrSSM
    axis2: DplrSSM
    c_factors: tuple

    def __post_init__(self):
        factors = tuple((_as_vector(c1, "c1"), _as_vector(c2, "c2")) for c1, c2 in self.c_factors)
        if not factors:
            raise ValueError("need at least one rank component")
        for c1, c2 in factors:
            if c1.shape[0] != self.axis1.N or c2.shape[0] != self.axis2.N:
                raise DimensionMismatch("C factor lengths must match the axis state sizes")
        object.__setattr__(self, "c_factors", factors)

    @property
    def rank(self) -> int:
        return len(self.c_factors)

    def C_tensor(self) -> np.ndarray:
        return sum(np.outer(c1, c2) for c1, c2 in self.c_factors)


@dataclass(frozen=True)
class SsmKernel2D:
    taps: np.ndarray
    # per-rank (K1, K2) pairs; empty when the kernel was given only as taps
    factors: tuple = field(default=(), compare=False)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128)
        if taps.ndim != 2 or min(taps.shape) < 1:
            raise ValueError(f"2-D kernel taps must be a nonempty matrix, got {taps.shape}")
        object.__setattr__(self, "taps", taps)

    @property
    def lengths(self) -> tuple[int, int]:
        return self.taps.shape

    @property
    def rank(self) -> int:
        return len(self.factors)


def materialize_kernel_2d(ssm: Ssm2D, L1: int, L2: int) -> SsmKernel2D:
    if L1 < 1 or L2 < 1:
        raise ValueError("kernel lengths must be >= 1")
    d1 = ssm.axis1.to_discrete()
    d2 = ssm.axis2.to_discrete()
    factors = []
    taps = np.zeros((L1, L2), dtype=np.complex128)
    for c1, c2 in ssm.c_factors:
        k1 = materialize_kernel(DiscreteSSM(d1.Abar, d1.Bbar, c1, 0.0, d1.delta), L1).taps
        k2 = materialize_kernel(DiscreteSSM(d2.Abar, d2.Bbar, c2, 0.0, d2.delta), L2).taps
        factors.append((k1, k2))
        taps += np.outer(k1, k2)
    return SsmKernel2D(taps, tuple(factors))


def apply_conv_2d(kernel: SsmKernel2D, u) -> np.ndarray:
    """Causal 2-D convolution truncated to ``u``'s shape."""
    u = np.asarray(u)
    if u.ndim != 2 or u.shape != kernel.lengths:
        raise DimensionMismatch(f"input shape {u.shape} != kernel lengths {kernel.lengths}")
    u = u.astype(np.complex128)
    if not kernel.factors:
        L1, L2 = u.shape
        s = (scipy.fft.next_fast_len(2 * L1 - 1), scipy.fft.next_fast_len(2 * L2 - 1))
        y = scipy.fft.ifft2(scipy.fft.fft2(kernel.taps, s) * scipy.fft.fft2(u, s))
        return y[:L1, :L2]
    out = np.zeros_like(u)
    for k1, k2 in kernel.factors:
        out += fft_conv(k2[None, :], fft_conv(k1[:, None], u, axis=0), axis=1)
    return out


def write_kernel_2d(path, kernel: SsmKernel2D) -> None:
    L1, L2 = kernel.lengths
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<IIII", _VERSION, L1, L2, max(kernel.rank, 1)))
        t = kernel.taps
        f.write(np.stack([t.real, t.imag], axis=-1).astype("<f8").tobytes())


def read_kernel_2d(path) -> SsmKernel2D:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not an SSK2 kernel file")
    version, L1, L2, _rank = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported kernel file version {version}")
    pairs = np.frombuffer(raw, dtype="<f8", count=2 * L1 * L2, offset=20).reshape(L1, L2, 2)
    return SsmKernel2D(pairs[..., 0] + 1j * pairs[..., 1])
