"""Finite-difference verification of the reverse-mode gradients.

Every check perturbs real scalar coordinates (real and imaginary parts of
complex entries separately) by central differences and compares with the
tape gradient.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, tiny
from .dsp import StftConfig, frame_indices
from .errors import DisconnectedGraph
from .nn import build_model, enhance_parts
from .objectives import (MultiResStftConfig, complex_loss, mag_loss, stft_loss,
                         time_domain_loss)

TOL = 1e-3
STEP = 1e-4
FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    groups: dict = field(default_factory=dict)        # group -> max relative error
    disconnected: list = field(default_factory=list)
    checked: int = 0
    tol: float = TOL

    @property
    def max_error(self) -> float:
        return max(self.groups.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol and not self.disconnected

    def lines(self) -> list[str]:
        out = [f"{self.name}: {'PASS' if self.passed else 'FAIL'} "
               f"max_rel_err={self.max_error:.3e} ({self.checked} coordinates)"]
        out += [f"  {g}: {e:.3e}" for g, e in self.groups.items()]
        out += [f"  disconnected: {d}" for d in self.disconnected]
        return out


def _coordinates(params: dict, n: int | None, rng) -> list[tuple[str, int, complex]]:
    """(name, flat index, direction) triples; direction 1 or 1j.

    With a budget ``n`` every parameter still gets one coordinate; the rest
    are drawn uniformly.
    """
    coords = [(k, i, d) for k, p in params.items() for i in range(p.size)
              for d in ((1, 1j) if np.iscomplexobj(p.data) else (1,))]
    if n is None or n >= len(coords):
        return coords
    first = {}
    for j, (k, _, _) in enumerate(coords):
        first.setdefault(k, []).append(j)
    chosen = {int(rng.choice(js)) for js in first.values()}
    rest = np.setdiff1d(np.arange(len(coords)), sorted(chosen))
    extra = max(n - len(chosen), 0)
    chosen.update(int(j) for j in rng.choice(rest, size=min(extra, rest.size), replace=False))
    return [coords[j] for j in sorted(chosen)]


def check(name: str, loss_fn, params: dict, n: int | None = 50, step: float = STEP,
          seed: int = 0, tol: float = TOL) -> GradcheckReport:
    """Compare tape gradients of ``loss_fn()`` w.r.t. ``params`` with central differences.

    ``loss_fn`` reads the current values of the Tensors in ``params``.
    """
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        # disconnected parameters are reported, not warned about
        warnings.simplefilter("ignore", DisconnectedGraph)
        with ad.Tape() as tape:
            loss = loss_fn()
        grads = ad.backward(tape, loss, params)
    report = GradcheckReport(name, tol=tol, disconnected=list(grads.disconnected))
    for k, i, d in _coordinates(params, n, rng):
        p = params[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step * d
        fp = float(loss_fn().data)
        flat[i] = orig - step * d
        fm = float(loss_fn().data)
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        g = grads[k].reshape(-1)[i]
        ana = float(g.real if d == 1 else g.imag)
        err = abs(ana - num) / max(abs(ana), abs(num), FLOOR)
        report.groups[k] = max(report.groups.get(k, 0.0), err)
        report.checked += 1
    return report


def _weights(shape, rng, cplx=False):
    w = rng.standard_normal(shape)
    return w + 1j * rng.standard_normal(shape) if cplx else w


def _project(y: Tensor, w) -> Tensor:
    """Real scalar <w, y> that depends on every output entry."""
    return ad.sum_(ad.real(y * w)) if np.iscomplexobj(y.data) else ad.sum_(y * w)


def primitive_checks(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    R = lambda *s: rng.standard_normal(s)                        # noqa: E731
    C = lambda *s: rng.standard_normal(s) + 1j * rng.standard_normal(s)  # noqa: E731
    cases = {
        "mul": (lambda a, b: a * b, [C(3, 4), C(4)]),
        "div": (lambda a, b: a / b, [C(3, 4), C(4) + 3]),
        "power": (lambda a: a ** 3, [R(5)]),
        "exp": (ad.exp, [C(5)]),
        "log": (ad.log, [R(5) ** 2 + 1]),
        "sqrt": (ad.sqrt, [R(5) ** 2 + 1]),
        "tanh": (ad.tanh, [R(5)]),
        "sigmoid": (ad.sigmoid, [R(5)]),
        "softplus": (ad.softplus, [R(5)]),
        "gelu": (ad.gelu, [R(6)]),
        "abs_complex": (ad.abs_, [C(5)]),
        "real_imag": (lambda a: ad.real(a) * ad.imag(a), [C(5)]),
        "complex": (lambda a, b: ad.complex_(a, b) ** 2, [R(5), R(5)]),
        "sum_mean": (lambda a: ad.sum_(a, 1) + ad.mean(a, 1), [R(3, 4)]),
        "reshape_transpose": (lambda a: ad.transpose(ad.reshape(a, (4, 3)), (1, 0)), [R(3, 4)]),
        "getitem": (lambda a: a[np.array([0, 2, 2, 1])], [R(3)]),
        "concat_pad": (lambda a, b: ad.pad(ad.concat([a, b], 1), [(1, 0), (0, 2)]),
                       [R(3, 4), R(3, 2)]),
        "repeat": (lambda a: ad.repeat(a, 2, 1), [R(3, 4)]),
        "matmul": (lambda a, b: a @ b, [C(2, 3, 4), C(4, 5)]),
        "solve": (ad.solve, [C(2, 3, 3) + 3 * np.eye(3), C(2, 3, 2)]),
        "channel_mix": (lambda a, w: ad.channel_mix(a, w, 1), [R(2, 3, 4, 5), R(6, 3)]),
        "layer_norm_gelu": (lambda a: ad.gelu(ad.layer_norm(a, 1)), [R(2, 5, 4)]),
        "ssm_kernel": (lambda a, b, c: ad.ssm_kernel(a, b, c, 9),
                       [0.4 * C(2, 3, 3), C(2, 3), C(2, 2, 3)]),
        "causal_conv": (lambda u, k: ad.causal_conv(u, k, -2), [R(2, 3, 9, 4), R(3, 9, 1)]),
        "rfft": (lambda a: ad.rfft(a, 12, -1), [R(2, 10)]),
        "gather_frames": (lambda a: ad.gather_frames(a, frame_indices(StftConfig(8, 6, 2), 11)),
                          [R(2, 11)]),
        "norm": (lambda a: ad.norm(a) * a, [C(3, 2)]),
    }
    reports = []
    for name, (fn, arrays) in cases.items():
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*ts)
        w = _weights(out.shape, rng, np.iscomplexobj(out.data))
        params = {f"x{i}": t for i, t in enumerate(ts)}
        reports.append(check(name, lambda: _project(fn(*ts), w), params, n=None, seed=seed))
    return reports


def loss_checks(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((2, 700))
    cfg = StftConfig(64, 48, 16)
    mr = MultiResStftConfig((StftConfig(64, 48, 16), StftConfig(128, 96, 24)))
    est = Tensor(y + 0.3 * rng.standard_normal(y.shape), requires_grad=True)
    S = np.abs(rng.standard_normal((3, 16, 8)))
    S_hat = Tensor(S + 0.5 * rng.standard_normal(S.shape), requires_grad=True)
    Z = rng.standard_normal((3, 16, 8)) + 1j * rng.standard_normal((3, 16, 8))
    zr = Tensor(Z.real + 0.3 * rng.standard_normal(Z.shape), requires_grad=True)
    zi = Tensor(Z.imag + 0.3 * rng.standard_normal(Z.shape), requires_grad=True)
    return [
        check("stft_loss", lambda: stft_loss(y, est, cfg), {"y_hat": est}, seed=seed),
        check("time_domain_loss", lambda: time_domain_loss(y, est, mr), {"y_hat": est}, seed=seed),
        check("mag_loss", lambda: mag_loss(S, S_hat), {"S_hat": S_hat}, seed=seed),
        check("complex_loss", lambda: complex_loss(Z, (zr, zi)), {"re": zr, "im": zi}, seed=seed),
    ]


def _tiny_loss(model, cfg: ModelConfig, rng):
    """A loss closure for the variant's training objective on random data."""
    if not cfg.is_spectral:
        L = 64
        x = rng.standard_normal((2, 1, L))
        y = rng.standard_normal((2, L))
        mr = MultiResStftConfig((StftConfig(16, 12, 4), StftConfig(32, 24, 8)))
        return lambda: time_domain_loss(y, ad.reshape(model(x), (2, L)), mr)
    F, T = cfg.n_freq, 8
    S = rng.standard_normal((2, F, T)) + 1j * rng.standard_normal((2, F, T))
    target = rng.standard_normal((2, F, T)) + 1j * rng.standard_normal((2, F, T))
    x = np.stack([S.real, S.imag], 1) if cfg.in_channels == 2 else np.abs(S)[:, None]

    def fn():
        re, im = enhance_parts(S.real, S.imag, model(x), cfg.scenario)
        if cfg.scenario == "complex_masking":
            return complex_loss(target, (re, im))
        return mag_loss(np.abs(target), ad.abs_(ad.complex_(re, im)))
    return fn


def model_check(cfg: ModelConfig, seed: int = 0, n: int = 50,
                detach: str | None = None) -> GradcheckReport:
    """Gradcheck an assembled model; ``detach`` names a parameter to cut from the graph."""
    cfg = replace(cfg, dtype="float64")
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    if cfg.whitening:
        from .dsp import fit_whitening
        model.set_whitening(fit_whitening([np.abs(rng.standard_normal((cfg.n_freq, 4 * cfg.n_freq)))]))
    params = model.parameters()
    if detach is not None:
        # swap in a copy the forward pass never reads
        params[detach] = Tensor(params[detach].data.copy(), requires_grad=True)
    return check(f"{cfg.variant}/{cfg.scenario}", _tiny_loss(model, cfg, rng), params,
                 n=n, seed=seed)


def variant_checks(seed: int = 0) -> list[GradcheckReport]:
    reports = []
    for variant in ("time_s4_unet", "tf_s4_unet", "s4nd_unet"):
        scenarios = ("mag_regression",) if variant == "time_s4_unet" else \
            ("mag_regression", "mag_masking", "complex_masking")
        for sc in scenarios:
            reports.append(model_check(tiny(variant, sc), seed))
    return reports


def run_all(seed: int = 0) -> list[GradcheckReport]:
    return primitive_checks(seed) + loss_checks(seed) + variant_checks(seed)
