"""Layers and the three enhancement networks built on :mod:`s4se.autodiff`.

Tensor layouts: 1-D sequence models use (batch, channels, length); the
spectrogram models use (batch, channels, freq, time).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .dsp import WhiteningStats
from .errors import ConfigError, NonFiniteActivation, ShapeMismatch
from .ssm_kernel import dplr_kernel

COMPLEX_OF = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}


def _walk(value, name: str):
    if isinstance(value, Tensor) and value.requires_grad:
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise ConfigError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr).astype(dtype), requires_grad=True)


def count_params(model: Module) -> int:
    """Trainable scalars; a complex entry counts as two."""
    return int(sum(p.size * (2 if np.iscomplexobj(p.data) else 1)
                   for p in model.parameters().values()))


class Linear(Module):
    """1x1 convolution / position-wise dense layer over the channel axis."""

    def __init__(self, h_in: int, h_out: int, rng, dtype=np.float64, bias: bool = True,
                 zero: bool = False):
        bound = 1.0 / np.sqrt(h_in)
        w = np.zeros((h_out, h_in)) if zero else rng.uniform(-bound, bound, (h_out, h_in))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(h_out) if zero else rng.uniform(-bound, bound, h_out), dtype) \
            if bias else None

    def forward(self, x: Tensor, axis: int = 1) -> Tensor:
        y = ad.channel_mix(x, self.weight, axis)
        if self.bias is not None:
            shape = [1] * y.ndim
            shape[axis] = -1
            y = y + ad.reshape(self.bias, tuple(shape))
        return y


class LayerNorm(Module):
    def __init__(self, h: int, dtype=np.float64):
        self.gamma = param(np.ones(h), dtype)
        self.beta = param(np.zeros(h), dtype)

    def forward(self, x: Tensor) -> Tensor:
        shape = (-1,) + (1,) * (x.ndim - 2)
        return ad.layer_norm(x, axis=1) * ad.reshape(self.gamma, shape) \
            + ad.reshape(self.beta, shape)


class SSMKernel(Module):
    """H independent DPLR SSMs with rank-R output projections.

    ``Lambda = -exp(log_neg_re) + i * im`` keeps every diagonal entry in the
    left half-plane, and since ``A = Lambda - P P^*`` subtracts a Hermitian
    PSD term the whole spectrum stays there too.
    """

    def __init__(self, H: int, N: int, rng, rank: int = 1, dtype=np.float64,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, dplr_threshold: int = 1024):
        cdtype = COMPLEX_OF[np.dtype(dtype)]
        n = np.arange(N)
        self.log_neg_re = param(np.full((H, N), np.log(0.5)), dtype)
        self.im = param(np.tile(np.pi * n, (H, 1)), dtype)
        self.P = param(np.tile(np.sqrt(n + 0.5), (H, 1)), cdtype)
        self.B = param(np.ones((H, N)), cdtype)
        C = (rng.standard_normal((H, rank, N)) + 1j * rng.standard_normal((H, rank, N))) / np.sqrt(2)
        self.C = param(C, cdtype)
        self.log_dt = param(rng.uniform(np.log(dt_min), np.log(dt_max), H), dtype)
        self.dplr_threshold = dplr_threshold

    def forward(self, L: int) -> Tensor:
        """Real kernels (H, R, L)."""
        if ad._active() is None and L >= self.dplr_threshold:
            return self._kernel_dplr(L)
        lam = ad.complex_(-ad.exp(self.log_neg_re), self.im)          # (H, N)
        N = lam.shape[-1]
        eye = np.eye(N, dtype=self.log_dt.dtype)
        A = ad.reshape(lam, lam.shape + (1,)) * eye \
            - ad.reshape(self.P, self.P.shape + (1,)) * ad.reshape(ad.conj(self.P), (-1, 1, N))
        half_dt = ad.reshape(ad.exp(self.log_dt), (-1, 1, 1)) * 0.5
        left = eye - half_dt * A
        abar = ad.solve(left, eye + half_dt * A)
        bbar = ad.solve(left, ad.reshape(self.B, self.B.shape + (1,)) * (half_dt * 2.0))
        bbar = ad.reshape(bbar, bbar.shape[:-1])
        return ad.real(ad.ssm_kernel(abar, bbar, self.C, L))

    def _kernel_dplr(self, L: int) -> Tensor:
        lam = -np.exp(self.log_neg_re.data) + 1j * self.im.data
        k = dplr_kernel(lam, self.P.data, self.B.data, self.C.data,
                        np.exp(self.log_dt.data.astype(np.float64)), L, check=False)
        return Tensor(k.real.astype(self.log_dt.dtype))


class S4Layer(Module):
    def __init__(self, H: int, N: int, rng, dtype=np.float64, **kw):
        self.kernel = SSMKernel(H, N, rng, rank=1, dtype=dtype, **kw)

    def forward(self, x: Tensor) -> Tensor:
        K = self.kernel(x.shape[-1])
        return ad.causal_conv(x, ad.reshape(K, (K.shape[0], K.shape[2])), axis=-1)


class S4NDLayer(Module):
    """Separable 2-D SSM: frequency-axis and time-axis kernels per channel, rank R."""

    def __init__(self, H: int, N: int, rng, rank: int = 1, dtype=np.float64, **kw):
        self.freq = SSMKernel(H, N, rng, rank=rank, dtype=dtype, **kw)
        self.time = SSMKernel(H, N, rng, rank=rank, dtype=dtype, **kw)
        self.rank = rank

    def forward(self, x: Tensor) -> Tensor:
        F, T = x.shape[-2], x.shape[-1]
        K1 = self.freq(F)
        K2 = self.time(T)
        out = None
        for r in range(self.rank):
            y = ad.causal_conv(x, K1[:, r, :, None], axis=-2)
            y = ad.causal_conv(y, K2[:, r, None, :], axis=-1)
            out = y if out is None else out + y
        return out


class S4Block(Module):
    """x + Mix(GELU(SSM(LayerNorm(x))))."""

    def __init__(self, H: int, ssm: Module, rng, dtype=np.float64):
        self.norm = LayerNorm(H, dtype)
        self.ssm = ssm
        self.mix = Linear(H, H, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.mix(ad.gelu(self.ssm(self.norm(x))))


class UNet1D(Module):
    """Sequence U-Net: S4 blocks, pooling by ``pool`` with channel growth ``expand``."""

    def __init__(self, width: int, levels: int, blocks: int, pool: int, expand: int,
                 N: int, rng, dtype=np.float64, **kw):
        self.pool = pool
        self.levels = levels
        self.down_blocks, self.down_pools, self.up_pools, self.up_blocks = [], [], [], []
        H = width
        widths = []
        for _ in range(levels):
            self.down_blocks.append([S4Block(H, S4Layer(H, N, rng, dtype, **kw), rng, dtype)
                                     for _ in range(blocks)])
            widths.append(H)
            self.down_pools.append(Linear(H * pool, H * expand, rng, dtype))
            H *= expand
        self.center = [S4Block(H, S4Layer(H, N, rng, dtype, **kw), rng, dtype)
                       for _ in range(blocks)]
        for Hs in reversed(widths):
            self.up_pools.append(Linear(H, Hs * pool, rng, dtype))
            self.up_blocks.append([S4Block(Hs, S4Layer(Hs, N, rng, dtype, **kw), rng, dtype)
                                   for _ in range(blocks)])
            H = Hs

    @property
    def multiple(self) -> int:
        return self.pool ** self.levels

    def forward(self, x: Tensor) -> Tensor:
        p = self.pool
        skips = []
        for blocks, down in zip(self.down_blocks, self.down_pools):
            for blk in blocks:
                x = blk(x)
            skips.append(x)
            Bn, H, L = x.shape
            x = ad.reshape(ad.transpose(ad.reshape(x, (Bn, H, L // p, p)), (0, 1, 3, 2)),
                           (Bn, H * p, L // p))
            x = down(x)
        for blk in self.center:
            x = blk(x)
        for blocks, up, skip in zip(self.up_blocks, self.up_pools, reversed(skips)):
            x = up(x)
            Bn, Hp, L = x.shape
            x = ad.reshape(ad.transpose(ad.reshape(x, (Bn, Hp // p, p, L)), (0, 1, 3, 2)),
                           (Bn, Hp // p, L * p))
            x = x + skip
            for blk in blocks:
                x = blk(x)
        return x


def _ssm_kw(cfg: ModelConfig) -> dict:
    return {"dt_min": cfg.dt_min, "dt_max": cfg.dt_max, "dplr_threshold": cfg.dplr_threshold}


def _pad_axis(x: Tensor, axis: int, multiple: int) -> tuple[Tensor, int]:
    n = x.shape[axis]
    extra = (-n) % multiple
    if extra:
        widths = [(0, 0)] * x.ndim
        widths[axis] = (0, extra)
        x = ad.pad(x, widths)
    return x, n


def _crop_last(x: Tensor, n: int) -> Tensor:
    return x if x.shape[-1] == n else x[..., :n]


class EnhancementModel(Module):
    """Common entry point: accepts unbatched or batched input."""

    cfg: ModelConfig

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        single = x.ndim == len(self.input_shape_hint)
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        self._check_input(x)
        y = self._forward(x)
        if not np.all(np.isfinite(y.data)):
            raise NonFiniteActivation("model produced non-finite output")
        return ad.reshape(y, y.shape[1:]) if single else y

    input_shape_hint = ()

    def _check_input(self, x):
        pass


class TimeS4UNet(EnhancementModel):
    input_shape_hint = ("C", "L")

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.cfg = cfg
        self.encode = Linear(1, cfg.base_channels, rng, dt)
        self.unet = UNet1D(cfg.base_channels, cfg.num_unet_levels, cfg.blocks_per_level,
                           cfg.pool_factor, cfg.expand, cfg.state_size, rng, dt, **_ssm_kw(cfg))
        self.decode = Linear(cfg.base_channels, 1, rng, dt)

    def _check_input(self, x):
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeMismatch(f"time model expects (1, L) input, got {x.shape[1:]}")

    def _forward(self, x):
        x, n = _pad_axis(x, -1, self.unet.multiple)
        return _crop_last(self.decode(self.unet(self.encode(x))), n)


def _head(raw: Tensor, scenario: str) -> Tensor:
    if scenario == "mag_regression":
        return ad.softplus(raw)
    if scenario == "mag_masking":
        return ad.sigmoid(raw)
    return raw


def out_channels(scenario: str) -> int:
    return 2 if scenario == "complex_masking" else 1


class _SpectralModel(EnhancementModel):
    input_shape_hint = ("C", "F", "T")
    whitening: WhiteningStats | None = None

    def set_whitening(self, stats: WhiteningStats | None) -> None:
        if stats is not None and stats.dim != self.cfg.n_freq:
            raise ConfigError(f"whitening has {stats.dim} bins, model expects {self.cfg.n_freq}")
        self.whitening = stats

    def _check_input(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.n_freq:
            raise ShapeMismatch(
                f"expected ({cfg.in_channels}, {cfg.n_freq}, T) input, got {x.shape[1:]}")

    def _whiten_in(self, x: Tensor) -> Tensor:
        if not self.cfg.whitening:
            return x
        if self.whitening is None:
            raise ConfigError("model configured for whitening but no statistics are set")
        s = self.whitening
        centered = x - s.mean.astype(x.dtype)[:, None]
        return ad.channel_mix(centered, s.transform.astype(x.dtype), axis=2)

    def _finish(self, raw: Tensor) -> Tensor:
        if self.cfg.whitening and self.cfg.scenario == "mag_regression":
            s = self.whitening
            raw = ad.channel_mix(raw, np.linalg.inv(s.transform).astype(raw.dtype), axis=2) \
                + s.mean.astype(raw.dtype)[:, None]
        return _head(raw, self.cfg.scenario)


class TFS4UNet(_SpectralModel):
    """1-D S4 U-Net over time with (channel, frequency) flattened into features."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.cfg = cfg
        F = cfg.n_freq
        self.encode = Linear(cfg.in_channels * F, cfg.base_channels, rng, dt)
        self.unet = UNet1D(cfg.base_channels, cfg.num_unet_levels, cfg.blocks_per_level,
                           cfg.pool_factor, cfg.expand, cfg.state_size, rng, dt, **_ssm_kw(cfg))
        self.decode = Linear(cfg.base_channels, out_channels(cfg.scenario) * F, rng, dt)

    def _forward(self, x):
        Bn, C, F, T = x.shape
        x = self._whiten_in(x)
        h = ad.reshape(x, (Bn, C * F, T))
        h, n = _pad_axis(h, -1, self.unet.multiple)
        h = _crop_last(self.decode(self.unet(self.encode(h))), n)
        raw = ad.reshape(h, (Bn, out_channels(self.cfg.scenario), F, T))
        return self._finish(raw)


class S4NDUNet(_SpectralModel):
    """U-Net of S4ND blocks; each level halves (F, T) by 2x2 averaging and doubles channels."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.cfg = cfg
        kw = _ssm_kw(cfg)
        N, R, nb = cfg.state_size, cfg.rank, cfg.blocks_per_level

        def block(H):
            return S4Block(H, S4NDLayer(H, N, rng, rank=R, dtype=dt, **kw), rng, dt)

        H = cfg.base_channels
        self.encode = Linear(cfg.in_channels, H, rng, dt)
        self.down_blocks, self.down_mix, self.up_mix, self.skip_mix, self.up_blocks = [], [], [], [], []
        widths = []
        for _ in range(cfg.num_unet_levels):
            self.down_blocks.append([block(H) for _ in range(nb)])
            widths.append(H)
            self.down_mix.append(Linear(H, H * cfg.expand, rng, dt))
            H *= cfg.expand
        for Hs in reversed(widths):
            self.up_mix.append(Linear(H, Hs, rng, dt))
            self.skip_mix.append(Linear(2 * Hs, Hs, rng, dt))
            self.up_blocks.append([block(Hs) for _ in range(nb)])
            H = Hs
        self.decode = Linear(H, out_channels(cfg.scenario), rng, dt)

    def _forward(self, x):
        m = 2 ** self.cfg.num_unet_levels
        if x.shape[2] % m:
            raise ShapeMismatch(f"frequency bins ({x.shape[2]}) must be divisible by {m}")
        x = self._whiten_in(x)
        x, T = _pad_axis(x, -1, m)
        h = self.encode(x)
        skips = []
        for blocks, down in zip(self.down_blocks, self.down_mix):
            for blk in blocks:
                h = blk(h)
            skips.append(h)
            Bn, H, F, Tt = h.shape
            h = ad.mean(ad.reshape(h, (Bn, H, F // 2, 2, Tt // 2, 2)), axis=(3, 5))
            h = down(h)
        for blocks, up, merge, skip in zip(self.up_blocks, self.up_mix, self.skip_mix,
                                           reversed(skips)):
            h = up(ad.repeat(ad.repeat(h, 2, axis=2), 2, axis=3))
            h = merge(ad.concat([h, skip], axis=1))
            for blk in blocks:
                h = blk(h)
        raw = _crop_last(self.decode(h), T)
        return self._finish(raw)


VARIANTS = {"time_s4_unet": TimeS4UNet, "tf_s4_unet": TFS4UNet, "s4nd_unet": S4NDUNet}


def build_model(cfg: ModelConfig, seed: int = 0):
    rng = np.random.Generator(np.random.Philox(seed))
    return VARIANTS[cfg.variant](cfg, rng)


# ---------------------------------------------------------------- masking scenarios

def enhance_parts(noisy_re, noisy_im, out: Tensor, scenario: str) -> tuple[Tensor, Tensor]:
    """Enhanced (real, imag) spectrogram parts for batched (B, F, T) noisy parts.

    ``out`` is the model output (B, C_out, F, T).  Differentiable in ``out``.
    """
    if scenario == "complex_masking":
        if out.shape[1] != 2:
            raise ShapeMismatch("complex masking needs a two-channel model output")
        mr, mi = out[:, 0], out[:, 1]
        mag = ad.sqrt(mr * mr + mi * mi + 1e-12)
        scale = ad.tanh(mag) / mag
        Mr, Mi = scale * mr, scale * mi
        return Mr * noisy_re - Mi * noisy_im, Mr * noisy_im + Mi * noisy_re
    if out.shape[1] != 1:
        raise ShapeMismatch("magnitude scenarios need a one-channel model output")
    noisy_mag = np.sqrt(noisy_re ** 2 + noisy_im ** 2)
    safe = np.where(noisy_mag > 0, noisy_mag, 1)
    ur = np.where(noisy_mag > 0, noisy_re / safe, 1.0)
    ui = np.where(noisy_mag > 0, noisy_im / safe, 0.0)
    mag = out[:, 0] if scenario == "mag_regression" else out[:, 0] * noisy_mag
    return mag * ur, mag * ui


def apply_scenario(noisy_spec, model_out, scenario: str):
    """Enhanced ComplexSpectrogram from the noisy one and the model output (C_out, F, T)."""
    out = ad.as_tensor(model_out)
    data = noisy_spec.data
    if out.shape[-2:] != data.shape[-2:]:
        raise ShapeMismatch(f"model output {out.shape} does not match spectrogram {data.shape}")
    out = ad.reshape(out, (1,) + out.shape)
    re, im = enhance_parts(data.real[None], data.imag[None], out, scenario)
    return noisy_spec.replace((re.data + 1j * im.data)[0])
