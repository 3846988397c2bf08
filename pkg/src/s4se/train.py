"""Adam, checkpoints, the training loop, and waveform-level enhancement/evaluation."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, TrainConfig
from .data import (Batch, Utterance, bandmask, load_dataset, make_batches, make_rng, read_wav,
                   remix, write_wav)
from .dsp import (ComplexSpectrogram, WhiteningStats, compress, decompress, fit_whitening,
                  istft, stft, whitening_bytes, whitening_from_bytes)
from .errors import ConfigError, ConfigMismatch, DataError, NumericalInstability, ShapeMismatch
from .nn import build_model, enhance_parts
from .objectives import (MultiResStftConfig, complex_loss, log_spectral_distance, mag_loss,
                         si_sdr, time_domain_loss)

CKPT_MAGIC = b"S4CK"
CKPT_VERSION = 1


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_train_config(cls, tc: TrainConfig) -> "OptimizerState":
        return cls(tc.lr, tc.beta1, tc.beta2, tc.eps)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step}


def _arr(p):
    return p.data if isinstance(p, ad.Tensor) else p


def adam_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """In-place Adam update with bias correction; complex entries use |g|^2."""
    for k, p in params.items():
        if k not in grads or np.shape(grads[k]) != np.shape(_arr(p)):
            raise ShapeMismatch(f"gradient for {k} is missing or has the wrong shape")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        data = _arr(p)
        g = np.asarray(grads[k], dtype=data.dtype)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(data)
            v = np.zeros(data.shape, dtype=np.abs(data).dtype)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g.real ** 2 + g.imag ** 2 if np.iscomplexobj(g) else g * g)
        state.m[k], state.v[k] = m, v
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(data.dtype)
        data -= update
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.abs(g) ** 2)) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericalInstability("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * np.asarray(s, dtype=grads[k].real.dtype)
    return total


# ---------------------------------------------------------------- checkpoints

_DTYPES = ("<f4", "<f8", "<c8", "<c16")


def _pack_arrays(arrays: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a)
        code = a.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise ConfigError(f"cannot store dtype {a.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<BI", _DTYPES.index(code), a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=code).tobytes())
    return buf.getvalue()


def _unpack_arrays(raw: bytes) -> dict:
    (n,), off = struct.unpack_from("<I", raw, 0), 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode()
        off += ln
        code, ndim = struct.unpack_from("<BI", raw, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dt, count, off).reshape(shape).copy()
        off += count * dt.itemsize
    return out


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    optimizer: OptimizerState
    whitening: WhiteningStats | None = None
    rng_state: dict = field(default_factory=dict)
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        cfg = json.dumps({"model": self.model_config.to_dict(),
                          "train": self.train_config.to_dict()}, sort_keys=True)
        opt = json.dumps(self.optimizer.hyper(), sort_keys=True).encode()
        opt_arrays = {f"m/{k}": v for k, v in self.optimizer.m.items()}
        opt_arrays.update({f"v/{k}": v for k, v in self.optimizer.v.items()})
        sections = [
            cfg.encode(),
            _pack_arrays(self.params),
            struct.pack("<I", len(opt)) + opt + _pack_arrays(opt_arrays),
            whitening_bytes(self.whitening) if self.whitening is not None else b"",
            json.dumps(self.rng_state, sort_keys=True).encode(),
            struct.pack("<I", self.epoch),
            json.dumps(self.metrics, sort_keys=True).encode(),
        ]
        body = b"".join(struct.pack("<Q", len(s)) + s for s in sections)
        return CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CKPT_MAGIC:
            raise ConfigError("not an S4CK checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise ConfigError(f"checkpoint version {version} is not supported "
                              f"(expected {CKPT_VERSION})")
        off, sections = 8, []
        while off < len(raw):
            (n,) = struct.unpack_from("<Q", raw, off)
            sections.append(raw[off + 8:off + 8 + n])
            off += 8 + n
        if len(sections) != 7:
            raise ConfigError("truncated or malformed checkpoint")
        cfg_s, params_s, opt_s, white_s, rng_s, epoch_s, metrics_s = sections
        cfg = json.loads(cfg_s.decode())
        (olen,) = struct.unpack_from("<I", opt_s, 0)
        hyper = json.loads(opt_s[4:4 + olen].decode())
        arrays = _unpack_arrays(opt_s[4 + olen:])
        opt = OptimizerState(**hyper)
        for k, a in arrays.items():
            kind, name = k.split("/", 1)
            (opt.m if kind == "m" else opt.v)[name] = a
        return cls(
            ModelConfig.from_dict(cfg["model"]), TrainConfig.from_dict(cfg["train"]),
            _unpack_arrays(params_s), opt,
            whitening_from_bytes(white_s) if white_s else None,
            json.loads(rng_s.decode()), struct.unpack("<I", epoch_s)[0],
            json.loads(metrics_s.decode()))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(raw)

    def build_model(self):
        model = build_model(self.model_config, self.train_config.seed)
        model.load_state_dict(self.params)
        if self.whitening is not None:
            model.set_whitening(self.whitening)
        return model


# ---------------------------------------------------------------- features and losses

def spectral_input(cfg: ModelConfig, noisy: np.ndarray) -> np.ndarray:
    """Complex (possibly compressed) noisy spectrogram (..., F, T) used by the model."""
    S = stft(noisy, cfg.stft).data
    return compress(S, cfg.alpha, cfg.beta) if cfg.amplitude_transform else S


def model_input(cfg: ModelConfig, S: np.ndarray) -> np.ndarray:
    """Stack (re, im) or take the magnitude, adding the channel axis before (F, T)."""
    if cfg.in_channels == 2:
        x = np.stack([S.real, S.imag], axis=-3)
    else:
        x = np.abs(S)[..., None, :, :]
    return x.astype(cfg.np_dtype)


def _enhance_spec(model, cfg: ModelConfig, S: np.ndarray):
    """Enhanced (re, im) Tensors for a batch of input spectrograms (B, F, T)."""
    out = model(model_input(cfg, S))
    dt = cfg.np_dtype
    return enhance_parts(S.real.astype(dt), S.imag.astype(dt), out, cfg.scenario)


def batch_loss(model, cfg: ModelConfig, clean: np.ndarray, noisy: np.ndarray,
               mrcfg: MultiResStftConfig | None = None):
    """Scalar loss Tensor and the enhanced waveforms (B, L) for one batch."""
    L = clean.shape[-1]
    if not cfg.is_spectral:
        est = model(noisy[:, None, :].astype(cfg.np_dtype))
        est = ad.reshape(est, (est.shape[0], L))
        return time_domain_loss(clean.astype(cfg.np_dtype), est, mrcfg), est.data
    S = spectral_input(cfg, noisy)
    target = spectral_input(cfg, clean)
    re, im = _enhance_spec(model, cfg, S)
    if cfg.scenario == "complex_masking":
        loss = complex_loss(target.astype(np.result_type(cfg.np_dtype, np.complex64)), (re, im))
    else:
        mag = ad.abs_(ad.complex_(re, im))
        loss = mag_loss(np.abs(target).astype(cfg.np_dtype), mag)
    wav = _to_waveform(cfg, re.data + 1j * im.data, L)
    return loss, wav


def _to_waveform(cfg: ModelConfig, S: np.ndarray, length: int) -> np.ndarray:
    S = S.astype(np.complex128)
    if cfg.amplitude_transform:
        S = decompress(S, cfg.alpha, cfg.beta)
    return istft(ComplexSpectrogram(S, cfg.stft), length)


def fit_training_whitening(cfg: ModelConfig, utts: list[Utterance], eps: float) -> WhiteningStats:
    specs = [spectral_input(cfg, u.noisy) for u in utts]
    return fit_whitening(specs, eps)


# ---------------------------------------------------------------- training

def _augment(batch: Batch, tc: TrainConfig, cfg: ModelConfig, seed: int, epoch: int,
             index: int) -> Batch:
    rng = make_rng(seed, epoch, index, 1)
    if tc.remix and rng.uniform() < tc.remix_prob:
        batch = remix(batch, rng)
    if rng.uniform() < tc.bandmask_prob:
        batch = bandmask(batch, rng, tc.bandmask_width, cfg.stft, tc.sample_rate,
                         guard=tc.bandmask_guard)
    return batch


def train_step(model, cfg: ModelConfig, tc: TrainConfig, opt: OptimizerState,
               batch: Batch) -> tuple[float, np.ndarray]:
    """One optimizer step; micro-batches accumulate size-weighted gradients."""
    params = model.parameters()
    clean, noisy = batch.stack("clean"), batch.stack("noisy")
    n = clean.shape[0]
    mb = tc.micro_batch if tc.micro_batch > 0 else n
    grads, total, wavs = None, 0.0, []
    for s in range(0, n, mb):
        with ad.Tape() as tape:
            loss, wav = batch_loss(model, cfg, clean[s:s + mb], noisy[s:s + mb])
        w = clean[s:s + mb].shape[0] / n
        g = ad.backward(tape, loss, params)
        grads = {k: g[k] * w for k in g} if grads is None else \
            {k: grads[k] + g[k] * w for k in g}
        total += w * float(loss.data)
        wavs.append(wav)
    clip_grad_norm(grads, tc.grad_clip)
    adam_step(params, grads, opt)
    return total, np.concatenate(wavs)


def _mean_si_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    return float(np.mean([si_sdr(r, e) for r, e in zip(ref, est)]))


def evaluate_utterances(model, cfg: ModelConfig, utts: list[Utterance]) -> list[dict]:
    rows = []
    for u in utts:
        loss, est = batch_loss(model, cfg, u.clean[None], u.noisy[None])
        est = est[0]
        rows.append({"id": u.id, "si_sdr_db": si_sdr(u.clean, est),
                     "lsd_db": log_spectral_distance(u.clean, est, cfg.stft),
                     "loss": float(loss.data),
                     "noisy_si_sdr_db": si_sdr(u.clean, u.noisy)})
    return rows


def train(model_cfg: ModelConfig, tc: TrainConfig, manifest, out_dir, *,
          resume=None, log=None) -> list[Path]:
    """Train for ``tc.epochs`` epochs, writing one checkpoint per epoch.

    Returns the checkpoint paths written.  Data and config problems raise
    before the first optimizer step.
    """
    utts = load_dataset(manifest)
    val = load_dataset(tc.val_manifest) if tc.val_manifest else []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ck.model_config != model_cfg:
            raise ConfigMismatch("checkpoint model config differs from the requested one")
        model, opt, start, whitening = ck.build_model(), ck.optimizer, ck.epoch, ck.whitening
    else:
        model = build_model(model_cfg, tc.seed)
        opt = OptimizerState.from_train_config(tc)
        start, whitening = 0, None
        if model_cfg.whitening:
            whitening = fit_training_whitening(model_cfg, utts, tc.whitening_eps)
            model.set_whitening(whitening)

    log_path = out / "train_log.jsonl"
    written = []
    for epoch in range(start, tc.epochs):
        batches = make_batches(utts, tc.batch_size, tc.segment_length, make_rng(tc.seed, epoch))
        losses, sdrs = [], []
        for bi, batch in enumerate(batches):
            batch = _augment(batch, tc, model_cfg, tc.seed, epoch, bi)
            loss, wav = train_step(model, model_cfg, tc, opt, batch)
            losses.append(loss * len(batch))
            sdrs.append(_mean_si_sdr(batch.stack("clean"), wav) * len(batch))
        metrics = {"epoch": epoch + 1, "train_loss": sum(losses) / len(utts),
                   "train_si_sdr_db": sum(sdrs) / len(utts)}
        if val:
            rows = evaluate_utterances(model, model_cfg, val)
            metrics["val_loss"] = float(np.mean([r["loss"] for r in rows]))
            metrics["val_si_sdr_db"] = float(np.mean([r["si_sdr_db"] for r in rows]))
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(metrics, sort_keys=True) + "\n")
        if log is not None:
            log(metrics)
        nxt = make_rng(tc.seed, epoch + 1).bit_generator.state
        ck = Checkpoint(model_cfg, tc, model.state_dict(), opt, whitening,
                        {"seed": tc.seed, "next_epoch": epoch + 1, "philox": _jsonable(nxt)},
                        epoch + 1, metrics)
        path = out / f"epoch_{epoch + 1:04d}.s4ck"
        ck.save(path)
        written.append(path)
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- inference

def enhance_waveform(model, cfg: ModelConfig, noisy) -> tuple[np.ndarray, int]:
    """Enhanced waveform (same length as input) clamped to [-1, 1], and the clip count."""
    x = np.asarray(noisy, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch("enhance expects a mono signal")
    if cfg.is_spectral:
        S = spectral_input(cfg, x)[None]
        re, im = _enhance_spec(model, cfg, S)
        y = _to_waveform(cfg, (re.data + 1j * im.data)[0], x.shape[0])
    else:
        y = model(x[None, :].astype(cfg.np_dtype)).data[0].astype(np.float64)
    if not np.all(np.isfinite(y)):
        raise NumericalInstability("enhanced signal contains non-finite samples")
    clipped = int(np.count_nonzero(np.abs(y) > 1.0))
    return np.clip(y, -1.0, 1.0), clipped


def enhance_file(ck: Checkpoint, in_wav, out_wav, ref_wav=None, model=None) -> dict:
    model = model or ck.build_model()
    x, sr = read_wav(in_wav)
    if sr != ck.train_config.sample_rate:
        raise DataError(f"{in_wav}: {sr} Hz, model expects {ck.train_config.sample_rate} Hz")
    y, clipped = enhance_waveform(model, ck.model_config, x)
    write_wav(out_wav, y, sr)
    rec = {"id": Path(in_wav).stem, "samples": int(y.shape[0]), "clipped": clipped}
    if ref_wav is not None:
        ref, _ = read_wav(ref_wav)
        if ref.shape != y.shape:
            raise ShapeMismatch(f"reference {ref_wav} has {ref.shape[0]} samples, "
                                f"output has {y.shape[0]}")
        rec["si_sdr_db"] = si_sdr(ref, y)
        rec["lsd_db"] = log_spectral_distance(ref, y, ck.model_config.stft)
    return rec


def evaluate(ck: Checkpoint, manifest) -> list[dict]:
    """Per-utterance records {id, si_sdr_db, lsd_db, loss} on a manifest."""
    utts = load_dataset(manifest)
    model = ck.build_model()
    return [{k: r[k] for k in ("id", "si_sdr_db", "lsd_db", "loss")}
            for r in evaluate_utterances(model, ck.model_config, utts)]
