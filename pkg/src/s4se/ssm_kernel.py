"""1-D state-space core: bilinear discretization, recurrence, kernel materialization.

Two routes produce the same convolution kernel ``K_k = C Abar^k Bbar``:

* :func:`materialize_kernel` unrolls the recurrence on the dense matrices;
* :func:`materialize_kernel_dplr` evaluates the kernel's generating function at
  the roots of unity using the diagonal-plus-rank-1 structure of ``A`` and a
  Woodbury correction, then inverts with one FFT.

Everything here is plain numpy in double precision.  The differentiable
version of the dense route lives in :mod:`s4se.autodiff` (``ssm_kernel`` op).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import DimensionMismatch, InvalidDelta, NumericalInstability, SingularMatrix

_COND_LIMIT = 1e12
_KERNEL_MAGIC = b"SSMK"
_KERNEL_VERSION = 1


def _as_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 2 and 1 in x.shape:
        x = x.reshape(-1)
    if x.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector, got shape {x.shape}")
    return x


def _check_finite(**arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ContinuousSSM:
    """x'(t) = A x + B u,  v = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: complex = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.complex128))
        B = _as_vector(self.B, "B")
        C = _as_vector(self.C, "C")
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0] or C.shape[0] != A.shape[0]:
            raise DimensionMismatch(
                f"state size mismatch: A {A.shape}, B {B.shape}, C {C.shape}")
        _check_finite(A=A, B=B, C=C, D=np.asarray(self.D))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", complex(self.D))

    @property
    def N(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSSM:
    Abar: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    D: complex = 0.0
    delta: float = 1.0

    def __post_init__(self):
        Abar = np.atleast_2d(np.asarray(self.Abar, dtype=np.complex128))
        Bbar = _as_vector(self.Bbar, "Bbar")
        C = _as_vector(self.C, "C")
        if Abar.shape[0] != Abar.shape[1] or Bbar.shape[0] != Abar.shape[0] \
                or C.shape[0] != Abar.shape[0]:
            raise DimensionMismatch(
                f"state size mismatch: Abar {Abar.shape}, Bbar {Bbar.shape}, C {C.shape}")
        if not self.delta > 0:
            raise InvalidDelta(f"delta must be positive, got {self.delta}")
        object.__setattr__(self, "Abar", Abar)
        object.__setattr__(self, "Bbar", Bbar)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", complex(self.D))
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def N(self) -> int:
        return self.Abar.shape[0]


@dataclass(frozen=True)
class DplrSSM:
    """A = diag(Lambda) - P P^*, D = 0 (the residual path replaces it)."""

    Lambda: np.ndarray
    P: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        vecs = {k: _as_vector(getattr(self, k), k) for k in ("Lambda", "P", "B", "C")}
        n = {v.shape[0] for v in vecs.values()}
        if len(n) != 1:
            raise DimensionMismatch(f"DPLR vectors disagree in length: {n}")
        if not self.delta > 0:
            raise InvalidDelta(f"delta must be positive, got {self.delta}")
        _check_finite(**vecs)
        for k, v in vecs.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def N(self) -> int:
        return self.Lambda.shape[0]

    def dense_A(self) -> np.ndarray:
        return np.diag(self.Lambda) - np.outer(self.P, self.P.conj())

    def to_continuous(self) -> ContinuousSSM:
        return ContinuousSSM(self.dense_A(), self.B, self.C, 0.0)

    def to_discrete(self) -> DiscreteSSM:
        return discretize(self.to_continuous(), self.delta)

    def with_C(self, C) -> "DplrSSM":
        return DplrSSM(self.Lambda, self.P, self.B, C, self.delta)


@dataclass(frozen=True)
class SsmKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128).reshape(-1)
        if taps.size < 1:
            raise ValueError("kernel needs at least one tap")
        _check_finite(taps=taps)
        object.__setattr__(self, "taps", taps)

    @property
    def length(self) -> int:
        return self.taps.shape[0]


def discretize(ssm: ContinuousSSM, delta: float) -> DiscreteSSM:
    """Bilinear (Tustin) transform with step ``delta``."""
    if not delta > 0:
        raise InvalidDelta(f"delta must be positive, got {delta}")
    I = np.eye(ssm.N, dtype=np.complex128)
    left = I - (delta / 2.0) * ssm.A
    if np.linalg.cond(left) > _COND_LIMIT:
        raise SingularMatrix("I - delta/2 A is not invertible")
    Abar = np.linalg.solve(left, I + (delta / 2.0) * ssm.A)
    Bbar = np.linalg.solve(left, delta * ssm.B)
    return DiscreteSSM(Abar, Bbar, ssm.C, ssm.D, delta)


def step(dssm: DiscreteSSM, state, u) -> tuple[np.ndarray, complex]:
    state = np.asarray(state, dtype=np.complex128)
    if state.shape != (dssm.N,):
        raise DimensionMismatch(f"state must have shape ({dssm.N},), got {state.shape}")
    new = dssm.Abar @ state + dssm.Bbar * u
    return new, complex(dssm.C @ new + dssm.D * u)


def run_recurrence(dssm: DiscreteSSM, u, state=None) -> np.ndarray:
    """Step the recurrence over a whole input sequence (x_{-1} = 0 by default)."""
    x = np.zeros(dssm.N, dtype=np.complex128) if state is None else state
    out = np.empty(len(u), dtype=np.complex128)
    for k, uk in enumerate(u):
        x, out[k] = step(dssm, x, uk)
    return out


def propagate_states(Abar: np.ndarray, Bbar: np.ndarray, L: int) -> np.ndarray:
    """States ``Abar^k Bbar`` for k < L, batched over leading dims.

    ``Abar``: (..., N, N), ``Bbar``: (..., N)  ->  (..., L, N).
    """
    X = np.empty(Bbar.shape[:-1] + (L, Bbar.shape[-1]), dtype=np.result_type(Abar, Bbar))
    x = Bbar[..., None]
    for k in range(L):
        X[..., k, :] = x[..., 0]
        if k + 1 < L:
            x = Abar @ x
    return X


def materialize_kernel(dssm: DiscreteSSM, L: int) -> SsmKernel:
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    X = propagate_states(dssm.Abar, dssm.Bbar, L)
    return SsmKernel(X @ dssm.C)


def discrete_eigenvalues(dplr: DplrSSM) -> np.ndarray:
    a = np.linalg.eigvals(dplr.dense_A())
    h = dplr.delta / 2.0
    return (1 + h * a) / (1 - h * a)


def dplr_kernel(Lambda, P, B, C, delta, L: int, *, check: bool = True,
                tol: float = 1e-9) -> np.ndarray:
    """Batched frequency-domain kernel for A = diag(Lambda) - P P^*.

    Shapes: Lambda, P, B (..., N); C (..., R, N); delta (...,).  Returns the
    complex kernels (..., R, L).

    With z = exp(-2 pi i j / L) the truncated generating function is
    ``sum_k K_k z^k = Ct (I - Abar z)^{-1} Bbar`` where ``Ct = C (I - Abar^L)``.
    Substituting the bilinear formulas,
    ``(I - Abar z)^{-1} Bbar = delta [(1-z) I - s A]^{-1} B`` with
    ``s = delta (1+z) / 2``, and the bracket is diagonal plus ``s P P^*``,
    which Woodbury inverts in O(N) per frequency.
    """
    Lambda, P, B, C = (np.asarray(a, dtype=np.complex128) for a in (Lambda, P, B, C))
    delta = np.asarray(delta, dtype=np.float64)
    N = Lambda.shape[-1]
    A = Lambda[..., :, None] * np.eye(N) - P[..., :, None] * P.conj()[..., None, :]
    h = (delta / 2.0)[..., None, None]
    I = np.eye(N)
    if check:
        a = np.linalg.eigvals(A)
        mu = (1 + h[..., 0] * a) / (1 - h[..., 0] * a)
        worst = np.abs(mu).max()
        if worst >= 1 + tol:
            raise NumericalInstability(
                f"discretized transition has spectral radius {worst:.6g} >= 1")
    Abar = np.linalg.solve(I - h * A, I + h * A)
    AbarL = np.linalg.matrix_power(Abar, L)
    Ct = C - C @ AbarL                                          # (..., R, N)

    z = np.exp(-2j * np.pi * np.arange(L) / L)                  # (L,)
    d = delta[..., None]                                        # (..., 1)
    s = d * (1 + z) / 2.0                                       # (..., L)
    diag = (1 - z)[..., None] - s[..., :, None] * Lambda[..., None, :]   # (..., L, N)
    inv = 1.0 / diag
    invT = np.swapaxes(inv, -1, -2)                             # (..., N, L)
    cb = (Ct * B[..., None, :]) @ invT                          # (..., R, L)
    cp = (Ct * P[..., None, :]) @ invT
    pb = ((P.conj() * B)[..., None, :] @ invT)[..., 0, :]       # (..., L)
    pp = ((P.conj() * P)[..., None, :] @ invT)[..., 0, :]
    sp = s[..., None, :]
    at_roots = d[..., None] * (cb - sp * cp * (pb / (1 + s * pp))[..., None, :])
    return np.fft.ifft(at_roots, axis=-1)


def materialize_kernel_dplr(dplr: DplrSSM, L: int) -> SsmKernel:
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    taps = dplr_kernel(dplr.Lambda, dplr.P, dplr.B, dplr.C[None, :], dplr.delta, L)
    return SsmKernel(taps[0])


def fft_conv(k: np.ndarray, u: np.ndarray, axis: int = -1) -> np.ndarray:
    """Causal linear convolution along ``axis``, truncated to ``u``'s length."""
    L = u.shape[axis]
    n = scipy.fft.next_fast_len(L + k.shape[axis] - 1)
    if np.iscomplexobj(k) or np.iscomplexobj(u):
        y = scipy.fft.ifft(scipy.fft.fft(k, n, axis=axis) * scipy.fft.fft(u, n, axis=axis),
                           axis=axis)
    else:
        y = scipy.fft.irfft(scipy.fft.rfft(k, n, axis=axis) * scipy.fft.rfft(u, n, axis=axis),
                            n, axis=axis)
    return np.take(y, np.arange(L), axis=axis)


def direct_conv(k: np.ndarray, u: np.ndarray) -> np.ndarray:
    """O(L^2) causal convolution, for benchmarking against the FFT route."""
    return np.convolve(u, k[: len(u)])[: len(u)]


def apply_conv(kernel: SsmKernel, u, d_term: complex = 0.0) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim != 1:
        raise DimensionMismatch(f"input must be a vector, got shape {u.shape}")
    L = u.shape[0]
    taps = kernel.taps[:L]
    if taps.shape[0] < L:
        taps = np.pad(taps, (0, L - taps.shape[0]))
    return fft_conv(taps, u.astype(np.complex128)) + d_term * u


def hippo_dplr_init(N: int, rng: np.random.Generator, dt_min: float = 1e-3,
                    dt_max: float = 1e-1) -> DplrSSM:
    """Diagonal HiPPO-LegS approximation: Lambda_n = -1/2 + i pi n, P_n = sqrt(n + 1/2)."""
    n = np.arange(N)
    Lambda = -0.5 + 1j * np.pi * n
    P = np.sqrt(n + 0.5).astype(np.complex128)
    B = np.ones(N, dtype=np.complex128)
    C = (rng.standard_normal(N) + 1j * rng.standard_normal(N)) / np.sqrt(2.0)
    delta = float(np.exp(rng.uniform(np.log(dt_min), np.log(dt_max))))
    return DplrSSM(Lambda, P, B, C, delta)


def write_kernel(path, kernel: SsmKernel) -> None:
    taps = kernel.taps
    with open(path, "wb") as f:
        f.write(_KERNEL_MAGIC + struct.pack("<II", _KERNEL_VERSION, taps.shape[0]))
        f.write(np.stack([taps.real, taps.imag], axis=-1).astype("<f8").tobytes())


def read_kernel(path) -> SsmKernel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _KERNEL_MAGIC:
        raise ValueError("not an SSMK kernel file")
    version, L = struct.unpack_from("<II", raw, 4)
    if version != _KERNEL_VERSION:
        raise ValueError(f"unsupported kernel file version {version}")
    pairs = np.frombuffer(raw, dtype="<f8", count=2 * L, offset=12).reshape(L, 2)
    return SsmKernel(pairs[:, 0] + 1j * pairs[:, 1])
