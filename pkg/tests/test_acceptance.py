"""Acceptance suite: one test per criterion, summarized at the end of the run."""
import time
from collections import Counter

import numpy as np
import pytest

from conftest import direct_conv_2d, direct_conv_2d_windowed, rel_err, random_stable_discrete
from s4se import gradcheck as gc
from s4se.cli import bench_rows
from s4se.config import TrainConfig, s4nd_default, tiny
from s4se.data import (Batch, Utterance, band_bins, bandmask, load_dataset, make_rng, mix_at_snr,
                       power, remix, sample_band, write_synthetic_corpus)
from s4se.dsp import (DEFAULT_STFT, LONG_HOP_STFT, amplitude_transform, fit_whitening, istft,
                      stft, whiten_array)
from s4se.nn import build_model, count_params
from s4se.ssm_kernel import (DplrSSM, apply_conv, materialize_kernel, materialize_kernel_dplr,
                             run_recurrence)
from s4se.ssm_nd import Ssm2D, apply_conv_2d, materialize_kernel_2d
from s4se.train import Checkpoint, evaluate_utterances, train


@pytest.fixture
def report(record_property):
    def _report(k, title, detail):
        record_property("criterion", k)
        record_property("title", title)
        record_property("detail", detail)
    return _report


def _cvec(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def _dplr(rng, N):
    Lambda = -rng.uniform(0.05, 1.0, N) + 1j * rng.uniform(-np.pi * N, np.pi * N, N)
    delta = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1))))
    return DplrSSM(Lambda, _cvec(rng, N) / np.sqrt(2), _cvec(rng, N), _cvec(rng, N), delta)


def test_c01_ssm_duality(report):
    rng = np.random.default_rng(101)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(120):
        N, L = int(rng.integers(1, 17)), int(rng.integers(1, 257))
        d = random_stable_discrete(rng, N)
        u = rng.standard_normal(L)
        rec = run_recurrence(d, u)
        conv = apply_conv(materialize_kernel(d, L), u, d.D)
        worst = max(worst, rel_err(conv, rec))
    dt = time.perf_counter() - t0
    report(1, "SSM duality (recurrence vs FFT conv)",
           f"120 cases, max rel err {worst:.2e} (<= 1e-6), {dt:.1f} s (< 10 s)")
    assert worst <= 1e-6 and dt < 10


def test_c02_dplr_fast_path(report):
    rng = np.random.default_rng(102)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(60):
        N, L = int(rng.integers(1, 33)), int(rng.integers(1, 1025))
        s = _dplr(rng, N)
        fast = materialize_kernel_dplr(s, L).taps
        dense = materialize_kernel(s.to_discrete(), L).taps
        worst = max(worst, rel_err(fast, dense))
    dt = time.perf_counter() - t0
    report(2, "DPLR kernel vs dense kernel",
           f"60 cases, max rel err {worst:.2e} (<= 1e-5), {dt:.1f} s (< 30 s)")
    assert worst <= 1e-5 and dt < 30


def test_c03_s4nd_separability(report):
    rng = np.random.default_rng(103)
    # the windowed oracle is the quadruple loop with its two inner loops vectorized
    for _ in range(3):
        taps, u = _cvec(rng, (5, 4)), rng.standard_normal((5, 4))
        assert rel_err(direct_conv_2d_windowed(taps, u), direct_conv_2d(taps, u)) < 1e-12
    t0, worst = time.perf_counter(), 0.0
    for _ in range(60):
        L1, L2, R = int(rng.integers(1, 65)), int(rng.integers(1, 65)), int(rng.integers(1, 5))
        N1, N2 = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        s = Ssm2D(_dplr(rng, N1), _dplr(rng, N2),
                  [(_cvec(rng, N1), _cvec(rng, N2)) for _ in range(R)])
        k = materialize_kernel_2d(s, L1, L2)
        u = rng.standard_normal((L1, L2))
        worst = max(worst, rel_err(apply_conv_2d(k, u), direct_conv_2d_windowed(k.taps, u)))
    dt = time.perf_counter() - t0
    report(3, "S4ND separable FFT vs direct 2-D conv",
           f"60 cases, max rel err {worst:.2e} (<= 1e-6), {dt:.1f} s (< 30 s)")
    assert worst <= 1e-6 and dt < 30


def test_c04_gradient_suite(report):
    t0 = time.perf_counter()
    reports = gc.run_all(0)
    dt = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_error for r in reports)
    report(4, "gradcheck (primitives, losses, tiny models)",
           f"{len(reports)} checks, {len(failed)} failed {failed}, max rel err {worst:.2e} "
           f"(<= 1e-3), {dt:.0f} s (< 300 s)")
    assert not failed and worst <= 1e-3 and dt < 300


def test_c05_dsp_suite(report):
    rng = np.random.default_rng(105)
    x = rng.standard_normal(16000)
    rt = [float(np.max(np.abs(istft(stft(x, c)) - x))) for c in (DEFAULT_STFT, LONG_HOP_STFT)]

    mags = np.abs(stft(rng.standard_normal(16000 * 30), DEFAULT_STFT).data)
    stats = fit_whitening([mags], eps=0.0)
    cov = np.cov(whiten_array(mags, stats), bias=True)
    off = float(np.max(np.abs(cov - np.diag(np.diag(cov)))) / np.max(np.diag(cov)))

    s = stft(x, DEFAULT_STFT)
    amp = float(np.max(np.abs(amplitude_transform(amplitude_transform(s), inverse=True).data
                              - s.data)))
    report(5, "DSP suite",
           f"round trip {rt[0]:.1e}/{rt[1]:.1e} (<= 1e-6), whitened off-diag ratio {off:.1e} "
           f"(<= 1e-4), amplitude round trip {amp:.1e} (<= 1e-9)")
    assert max(rt) <= 1e-6 and off <= 1e-4 and amp <= 1e-9


def _utt(rng, i, n):
    c, z = rng.standard_normal(n), rng.standard_normal(n)
    return Utterance(f"u{i}", c, z, 0.0, c + z)


def _band_energy(x, bins):
    return float(np.sum(np.abs(stft(x, DEFAULT_STFT).data[bins]) ** 2))


def test_c06_augmentation_suite(report):
    rng = np.random.default_rng(106)
    snr_err = 0.0
    for snr in np.linspace(-10, 30, 41):
        m = mix_at_snr(rng.standard_normal(4000), rng.standard_normal(4000), float(snr))
        snr_err = max(snr_err, abs(10 * np.log10(power(m.clean) / power(m.noise)) - snr))

    multiset = True
    for seed in range(20):
        b = Batch([_utt(rng, i, 300) for i in range(6)])
        out = remix(b, make_rng(seed))
        multiset &= Counter(u.noise.tobytes() for u in b.utterances) == \
            Counter(u.noise.tobytes() for u in out.utterances)

    r = make_rng(106)
    removed = 1.0
    for _ in range(20):
        b = Batch([_utt(rng, 0, 8000)])
        f_lo, f_hi = sample_band(r, 0.2)
        out = bandmask(b, r, 0.2, cfg=DEFAULT_STFT, band=(f_lo, f_hi))
        core = band_bins(f_lo, f_hi, DEFAULT_STFT)
        before = _band_energy(b.utterances[0].noisy, core)
        after = _band_energy(out.utterances[0].noisy, core)
        removed = min(removed, 1 - after / before)
    report(6, "augmentation suite",
           f"max SNR error {snr_err:.1e} dB (<= 1e-6), remix multiset kept: {multiset}, "
           f"min stop-band energy removed {100 * removed:.4f}% (>= 99.9%) over 20 bands")
    assert snr_err <= 1e-6 and multiset and removed >= 0.999


OVERFIT_TC = TrainConfig(epochs=200, batch_size=1, micro_batch=1, segment_length=1500,
                         lr=1e-3, remix=False, bandmask_prob=0.0, seed=0)


def test_c07_tiny_overfit(report, tmp_path):
    man = write_synthetic_corpus(tmp_path / "corpus", n=10, length=1500, snr_db=0.0)
    cfg = s4nd_default()
    t0 = time.perf_counter()
    losses = []
    paths = train(cfg, OVERFIT_TC, man, tmp_path / "run",
                  log=lambda rec: losses.append(rec["train_loss"]))
    dt = time.perf_counter() - t0
    ck = Checkpoint.load(paths[-1])
    rows = evaluate_utterances(ck.build_model(), cfg, load_dataset(man))
    gain = float(np.mean([r["si_sdr_db"] - r["noisy_si_sdr_db"] for r in rows]))
    drop = 1 - losses[-1] / losses[0]
    report(7, "tiny overfit (10 clips, 0 dB, 200 epochs)",
           f"SI-SDR gain {gain:+.2f} dB (>= 5), loss {losses[0]:.4f} -> {losses[-1]:.4f} "
           f"= {100 * drop:.1f}% drop (>= 90%), {dt / 60:.1f} min (target < 30)")
    assert gain >= 5 and drop >= 0.9


def test_c08_parameter_budget(report):
    cfg = s4nd_default()
    n = count_params(build_model(cfg))
    report(8, "parameter budget", f"count_params = {n:,} (in [600,000, 950,000]); "
           f"config {cfg.to_dict()}")
    assert 600_000 <= n <= 950_000


def _seconds(mode, N, L):
    return min(bench_rows(mode, N, L, repeats=3)[0]["seconds"] for _ in range(2))


def test_c09_performance(report):
    conv = _seconds("conv-direct", 1, 4096) / _seconds("conv-fft", 1, 4096)
    kern = _seconds("kernel-naive", 16, 1024) / _seconds("kernel-dplr", 16, 1024)
    report(9, "bench speedups", f"FFT over direct conv at L=4096: {conv:.1f}x, "
           f"DPLR over dense kernel at N=16 L=1024: {kern:.1f}x (each >= 2x)")
    assert conv >= 2 and kern >= 2


def test_c10_determinism(report, tmp_path):
    man = write_synthetic_corpus(tmp_path / "corpus", n=4, length=600)
    tc = TrainConfig(epochs=5, batch_size=2, segment_length=500, seed=3)
    cfg = tiny("s4nd_unet", "complex_masking")
    a = train(cfg, tc, man, tmp_path / "a")[-1].read_bytes()
    b = train(cfg, tc, man, tmp_path / "b")[-1].read_bytes()
    report(10, "determinism", f"epoch-5 checkpoints bitwise identical: {a == b} "
           f"({len(a):,} bytes)")
    assert a == b
