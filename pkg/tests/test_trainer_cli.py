import csv
import io
import json
import struct
from contextlib import redirect_stdout
from dataclasses import replace

import numpy as np
import pytest

from s4se.cli import bench_rows, main
from s4se.config import TrainConfig, dump_config, tiny
from s4se.data import load_dataset, write_manifest, write_synthetic_corpus, write_wav
from s4se.errors import ConfigError, ConfigMismatch, DataError, NumericalInstability, ShapeMismatch
from s4se.nn import build_model
from s4se.ssm_kernel import read_kernel
from s4se.ssm_nd import read_kernel_2d
from s4se.train import (Checkpoint, OptimizerState, adam_step, clip_grad_norm, enhance_file,
                        enhance_waveform, evaluate, train)

TC = TrainConfig(epochs=2, batch_size=2, segment_length=300, remix=True, bandmask_prob=0.5,
                 seed=7)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return write_synthetic_corpus(tmp_path_factory.mktemp("corpus"), n=4, length=400)


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    paths = train(tiny("s4nd_unet"), TC, corpus, out)
    return out, paths


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_is_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, OptimizerState(lr=0.01))
    assert np.allclose(p["w"], [0.99, -1.99, 2.99], atol=1e-7)


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([1.0, 2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState())
    assert np.array_equal(p["w"], [1.0, 2.0])


def test_adam_complex_parameter():
    p = {"c": np.array([1 + 1j])}
    adam_step(p, {"c": np.array([3 + 4j])}, OptimizerState(lr=0.1))
    assert np.allclose(p["c"], 1 + 1j - 0.1 * (3 + 4j) / 5)


def test_adam_shape_check():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.isclose(np.hypot(g["a"][0], g["b"][0]), 1.0)
    with pytest.raises(NumericalInstability):
        clip_grad_norm({"a": np.array([np.nan])}, 1.0)


# ---------------------------------------------------------------- training

def test_train_writes_logs_and_checkpoints(trained):
    out, paths = trained
    assert [p.name for p in paths] == ["epoch_0001.s4ck", "epoch_0002.s4ck"]
    lines = (out / "train_log.jsonl").read_text().splitlines()
    rec = json.loads(lines[-1])
    assert rec["epoch"] == 2 and np.isfinite(rec["train_loss"])


def test_train_is_deterministic(corpus, trained, tmp_path):
    out, paths = trained
    again = train(tiny("s4nd_unet"), TC, corpus, tmp_path)
    assert again[-1].read_bytes() == paths[-1].read_bytes()
    assert (tmp_path / "train_log.jsonl").read_text() == (out / "train_log.jsonl").read_text()


def test_resume_matches_uninterrupted(corpus, trained, tmp_path):
    out, paths = trained
    one = replace(TC, epochs=1)
    first = train(tiny("s4nd_unet"), one, corpus, tmp_path / "a")
    train(tiny("s4nd_unet"), TC, corpus, tmp_path / "a", resume=first[0])
    full = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    split = [json.loads(x) for x in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert split[1]["train_loss"] == full[1]["train_loss"]
    assert (tmp_path / "a" / "epoch_0002.s4ck").read_bytes() == paths[1].read_bytes()


def test_resume_config_mismatch(corpus, trained, tmp_path):
    _, paths = trained
    with pytest.raises(ConfigMismatch):
        train(tiny("s4nd_unet", "mag_masking"), TC, corpus, tmp_path, resume=paths[0])


def test_empty_manifest_fails_before_training(tmp_path):
    man = tmp_path / "m.csv"
    write_manifest(man, [])
    with pytest.raises(DataError):
        train(tiny("s4nd_unet"), TC, man, tmp_path / "out")
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("variant,scenario", [("time_s4_unet", "mag_regression"),
                                              ("tf_s4_unet", "mag_masking")])
def test_other_variants_train(corpus, tmp_path, variant, scenario):
    paths = train(tiny(variant, scenario), replace(TC, epochs=1), corpus, tmp_path)
    assert paths[0].exists()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(trained):
    _, paths = trained
    raw = paths[-1].read_bytes()
    ck = Checkpoint.from_bytes(raw)
    assert ck.to_bytes() == raw
    assert ck.epoch == 2 and ck.optimizer.step > 0
    model = ck.build_model()
    for k, v in model.state_dict().items():
        assert np.array_equal(v, ck.params[k])


def test_checkpoint_version_rejected(trained):
    raw = bytearray(trained[1][-1].read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(ConfigError):
        Checkpoint.from_bytes(bytes(raw))


def test_checkpoint_bad_magic():
    with pytest.raises(ConfigError):
        Checkpoint.from_bytes(b"NOPE" + b"\x00" * 20)


# ---------------------------------------------------------------- enhance / eval

def test_enhance_length_and_zero_input(trained, tmp_path):
    ck = Checkpoint.load(trained[1][-1])
    model = ck.build_model()
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 517)
    y, clipped = enhance_waveform(model, ck.model_config, x)
    assert y.shape == x.shape and np.all(np.isfinite(y)) and np.max(np.abs(y)) <= 1
    z, _ = enhance_waveform(model, ck.model_config, np.zeros(400))
    assert np.max(np.abs(z)) <= 1e-3


def test_enhance_file_with_reference(trained, corpus, tmp_path):
    ck = Checkpoint.load(trained[1][-1])
    u = load_dataset(corpus)[0]
    write_wav(tmp_path / "in.wav", u.noisy)
    write_wav(tmp_path / "ref.wav", u.clean)
    rec = enhance_file(ck, tmp_path / "in.wav", tmp_path / "out.wav", tmp_path / "ref.wav")
    assert rec["samples"] == 400 and "si_sdr_db" in rec and "lsd_db" in rec


def test_evaluate_records(trained, corpus):
    rows = evaluate(Checkpoint.load(trained[1][-1]), corpus)
    assert len(rows) == 4
    assert set(rows[0]) == {"id", "si_sdr_db", "lsd_db", "loss"}


# ---------------------------------------------------------------- CLI

def _config_file(tmp_path, model=None, train_cfg=None):
    p = tmp_path / "cfg.json"
    p.write_text(dump_config(model or tiny("s4nd_unet"), train_cfg or replace(TC, epochs=1)))
    return p


def _run(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(argv)
    return code, buf.getvalue()


def test_cli_train_enhance_eval(corpus, tmp_path):
    cfg = _config_file(tmp_path)
    code, out = _run(["train", "--config", str(cfg), "--manifest", str(corpus),
                      "--out", str(tmp_path / "run")])
    assert code == 0 and json.loads(out.splitlines()[-1])["epoch"] == 1
    ck = tmp_path / "run" / "epoch_0001.s4ck"
    code, out = _run(["enhance", "--ckpt", str(ck), "--in", str(corpus.parent / "clean_000.wav"),
                      "--out", str(tmp_path / "e.wav")])
    assert code == 0 and (tmp_path / "e.wav").exists()
    code, out = _run(["eval", "--ckpt", str(ck), "--manifest", str(corpus)])
    assert code == 0 and len(out.splitlines()) == 4


def test_cli_enhance_directory(trained, corpus, tmp_path):
    code, _ = _run(["enhance", "--ckpt", str(trained[1][-1]), "--in", str(corpus.parent),
                    "--out", str(tmp_path / "o")])
    assert code == 0 and len(list((tmp_path / "o").glob("*.wav"))) == 8


def test_cli_exit_codes(tmp_path, corpus):
    code, _ = _run(["train", "--config", str(tmp_path / "missing.json"), "--manifest",
                    str(corpus), "--out", str(tmp_path)])
    assert code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"variant": "nope"}}))
    assert _run(["train", "--config", str(bad), "--manifest", str(corpus),
                 "--out", str(tmp_path)])[0] == 2
    empty = tmp_path / "m.csv"
    write_manifest(empty, [])
    assert _run(["train", "--config", str(_config_file(tmp_path)), "--manifest", str(empty),
                 "--out", str(tmp_path / "x")])[0] == 3
    assert _run(["enhance", "--ckpt", str(tmp_path / "none.s4ck"), "--in", "a.wav",
                 "--out", "b.wav"])[0] == 2


def test_cli_gradcheck_primitives():
    code, out = _run(["gradcheck", "--variant", "primitives"])
    assert code == 0 and "ssm_kernel: PASS" in out


def test_cli_kernel_dump(tmp_path):
    cfg1 = _config_file(tmp_path, tiny("tf_s4_unet"))
    code, _ = _run(["kernel", "--config", str(cfg1), "--len", "32", "--out", str(tmp_path / "k")])
    assert code == 0 and read_kernel(tmp_path / "k").taps.shape == (32,)
    cfg2 = _config_file(tmp_path, tiny("s4nd_unet"))
    code, _ = _run(["kernel", "--config", str(cfg2), "--len", "8", "--len2", "5",
                    "--out", str(tmp_path / "k2")])
    assert code == 0 and read_kernel_2d(tmp_path / "k2").taps.shape == (8, 5)


def test_cli_bench_csv():
    code, out = _run(["bench", "--mode", "conv-fft", "--n", "4", "--len", "64", "--repeats", "1"])
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows[0]["mode"] == "conv-fft" and float(rows[0]["seconds"]) > 0
    assert bench_rows("kernel-dplr", 4, 32, 1)[0]["len"] == 32
