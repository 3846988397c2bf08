"""WAV I/O, SNR mixing, manifests, batching and the Remix / BandMask augmentations."""
from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dsp import StftConfig, hz_to_mel, istft, mel_to_hz, stft
from .errors import CorruptHeader, DataError, ShapeMismatch, UnsupportedFormat, ZeroPowerInput

SAMPLE_RATE = 16000
MANIFEST_FIELDS = ("id", "clean_path", "noise_path", "snr_db")


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of integers (seed, epoch, batch, ...)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# ---------------------------------------------------------------- WAV

def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = (f.getnchannels(), f.getsampwidth(),
                                        f.getframerate(), f.getnframes())
            raw = f.readframes(n)
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg:
            raise UnsupportedFormat(f"{path}: {msg} (only PCM is supported)") from e
        raise CorruptHeader(f"{path}: {msg}") from e
    except EOFError as e:
        raise CorruptHeader(f"{path}: truncated header") from e
    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, expected 16-bit")
    if len(raw) != 2 * n:
        raise CorruptHeader(f"{path}: header declares {n} frames, found {len(raw) // 2}")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch("write_wav expects a mono 1-D signal")
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(q.tobytes())


# ---------------------------------------------------------------- mixing

def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


@dataclass(frozen=True)
class Mixture:
    noisy: np.ndarray
    clean: np.ndarray
    noise: np.ndarray       # the gain- and peak-scaled noise component
    gain: float             # g applied to the raw noise
    scale: float            # peak normalization 1 / max(1, peak)


def mix_at_snr(clean, noise, snr_db: float) -> Mixture:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ShapeMismatch(f"clean {clean.shape} and noise {noise.shape} differ")
    pc, pn = power(clean), power(noise)
    if pc == 0.0 or pn == 0.0:
        raise ZeroPowerInput("clean and noise must both have nonzero power")
    g = np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    noisy = clean + g * noise
    scale = 1.0 / max(1.0, float(np.max(np.abs(noisy))))
    return Mixture(noisy * scale, clean * scale, g * noise * scale, float(g), scale)


@dataclass(frozen=True)
class Utterance:
    id: str
    clean: np.ndarray
    noise: np.ndarray       # scaled noise component, so noisy == clean + noise
    snr_db: float
    noisy: np.ndarray

    def __post_init__(self):
        if not (self.clean.shape == self.noise.shape == self.noisy.shape) or self.clean.ndim != 1:
            raise ShapeMismatch(f"utterance {self.id}: signal lengths differ")

    @classmethod
    def from_mixture(cls, uid: str, mix: Mixture, snr_db: float) -> "Utterance":
        return cls(uid, mix.clean, mix.noise, float(snr_db), mix.noisy)

    def __len__(self):
        return self.clean.shape[0]

    def segment(self, start: int, length: int) -> "Utterance":
        sl = slice(start, start + length)
        return Utterance(self.id, self.clean[sl], self.noise[sl], self.snr_db, self.noisy[sl])


@dataclass(frozen=True)
class Batch:
    utterances: tuple
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise DataError("a batch needs at least one utterance")
        if len({len(u) for u in self.utterances}) != 1:
            raise ShapeMismatch("batch utterances must share one segment length")

    def __len__(self):
        return len(self.utterances)

    @property
    def segment_length(self) -> int:
        return len(self.utterances[0])

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def stack(self, what: str) -> np.ndarray:
        return np.stack([getattr(u, what) for u in self.utterances])


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    clean_path: Path
    noise_path: Path
    snr_db: float


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
                raise DataError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
            rows = list(reader)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not rows:
        raise DataError(f"{path}: manifest has no utterances")
    base = path.parent
    entries = []
    for i, row in enumerate(rows):
        try:
            snr = float(row["snr_db"])
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}: row {i + 1} has a bad snr_db") from e
        entries.append(ManifestEntry(row["id"], base / row["clean_path"],
                                     base / row["noise_path"], snr))
    return entries


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r[k] for k in MANIFEST_FIELDS])


def _fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    if noise.shape[0] >= n:
        return noise[:n]
    return np.resize(noise, n)          # tiles a short noise recording


def load_utterance(entry: ManifestEntry) -> Utterance:
    clean, sr_c = read_wav(entry.clean_path)
    noise, sr_n = read_wav(entry.noise_path)
    for sr, p in ((sr_c, entry.clean_path), (sr_n, entry.noise_path)):
        if sr != SAMPLE_RATE:
            raise UnsupportedFormat(f"{p}: {sr} Hz, expected {SAMPLE_RATE} Hz")
    mix = mix_at_snr(clean, _fit_length(noise, clean.shape[0]), entry.snr_db)
    return Utterance.from_mixture(entry.id, mix, entry.snr_db)


def load_dataset(manifest) -> list[Utterance]:
    return [load_utterance(e) for e in load_manifest(manifest)]


# ---------------------------------------------------------------- batching

def make_batches(utts: list[Utterance], batch_size: int, segment_length: int,
                 rng: np.random.Generator) -> list[Batch]:
    """Shuffled batches with random crops to a common segment length.

    Batches whose clips are shorter than ``segment_length`` are cropped to the
    shortest clip in the batch instead.
    """
    order = rng.permutation(len(utts))
    batches = []
    for b0 in range(0, len(order), batch_size):
        group = [utts[i] for i in order[b0:b0 + batch_size]]
        seg = min(segment_length, min(len(u) for u in group))
        picked = [u.segment(int(rng.integers(0, len(u) - seg + 1)), seg) for u in group]
        batches.append(Batch(picked, int(rng.integers(0, 2 ** 63 - 1))))
    return batches


# ---------------------------------------------------------------- augmentation

def remix(batch: Batch, rng: np.random.Generator, perm: np.ndarray | None = None) -> Batch:
    """Shuffle the (already scaled) noise components across the batch."""
    n = len(batch)
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm must be a permutation of the batch indices")
    utts = batch.utterances
    out = []
    for i, u in enumerate(utts):
        src = utts[perm[i]]
        out.append(replace(u, noise=src.noise, noisy=u.clean + src.noise, snr_db=src.snr_db))
    return Batch(out, batch.rng_seed)


def sample_band(rng: np.random.Generator, width_fraction: float = 0.2,
                sample_rate: int = SAMPLE_RATE, m0: float | None = None) -> tuple[float, float]:
    """Stop band edges in Hz; ``m0`` (mel) is drawn uniformly unless given."""
    if not 0.0 < width_fraction < 1.0:
        raise ValueError("width_fraction must lie in (0, 1)")
    top = hz_to_mel(sample_rate / 2.0)
    if m0 is None:
        m0 = rng.uniform(0.0, top * (1.0 - width_fraction))
    m1 = m0 + width_fraction * top
    f1 = sample_rate / 2.0 if np.isclose(m1, top, rtol=0, atol=1e-9 * top) else float(mel_to_hz(m1))
    return float(mel_to_hz(m0)), f1


def band_bins(f_lo: float, f_hi: float, cfg: StftConfig, sample_rate: int = SAMPLE_RATE,
              guard: int = 0) -> np.ndarray:
    """Indices of bins whose center frequency lies in [f_lo, f_hi], widened by ``guard``."""
    centers = np.arange(cfg.n_bins) * sample_rate / cfg.n_fft
    inside = np.flatnonzero((centers >= f_lo) & (centers <= f_hi))
    if inside.size == 0 or guard == 0:
        return inside
    lo = max(inside[0] - guard, 0)
    hi = min(inside[-1] + guard, cfg.n_bins - 1)
    return np.arange(lo, hi + 1)


def band_stop(x: np.ndarray, bins: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Zero the given STFT rows of each signal in ``x`` (..., L) and resynthesize."""
    if bins.size == 0:
        return np.array(x, dtype=np.float64, copy=True)
    spec = stft(x, cfg)
    data = spec.data.copy()
    data[..., bins, :] = 0
    return istft(spec.replace(data), x.shape[-1])


def bandmask(batch: Batch, rng: np.random.Generator, width_fraction: float = 0.2,
             cfg: StftConfig | None = None, sample_rate: int = SAMPLE_RATE,
             guard: int = 2, band: tuple[float, float] | None = None) -> Batch:
    """Remove one mel-uniform band from both noisy input and clean target.

    ``guard`` extra bins on each side absorb the Hann main lobe so that the
    re-analysed stop band keeps less than 1e-3 of its energy.
    """
    cfg = cfg or StftConfig()
    f_lo, f_hi = band if band is not None else sample_band(rng, width_fraction, sample_rate)
    bins = band_bins(f_lo, f_hi, cfg, sample_rate, guard)
    clean = band_stop(batch.stack("clean"), bins, cfg)
    noisy = band_stop(batch.stack("noisy"), bins, cfg)
    out = [replace(u, clean=c, noisy=y, noise=y - c)
           for u, c, y in zip(batch.utterances, clean, noisy)]
    return Batch(out, batch.rng_seed)


# ---------------------------------------------------------------- synthetic corpus

def synth_pair(rng: np.random.Generator, length: int, sample_rate: int = SAMPLE_RATE):
    """One steady sine (clean) and white noise."""
    t = np.arange(length) / sample_rate
    f = rng.uniform(200.0, 2000.0)
    clean = 0.5 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return clean, rng.standard_normal(length)


def write_synthetic_corpus(out_dir, n: int = 10, length: int = 4000, snr_db: float = 0.0,
                           seed: int = 0) -> Path:
    """Write ``n`` clean/noise WAV pairs plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    rows = []
    for i in range(n):
        clean, noise = synth_pair(rng, length)
        cid, nid = f"clean_{i:03d}.wav", f"noise_{i:03d}.wav"
        write_wav(out / cid, clean)
        write_wav(out / nid, 0.5 * noise / np.max(np.abs(noise)))
        rows.append({"id": f"utt{i:03d}", "clean_path": cid, "noise_path": nid, "snr_db": snr_db})
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
