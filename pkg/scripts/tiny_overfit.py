"""Overfit the small S4ND U-Net on 10 synthetic 0 dB clips and report SI-SDR gain.

    python3 scripts/tiny_overfit.py --out runs/overfit --epochs 200
"""
import argparse
import time
from pathlib import Path

import numpy as np

from s4se.config import TrainConfig, s4nd_default
from s4se.data import load_dataset, write_synthetic_corpus
from s4se.train import Checkpoint, evaluate_utterances, train


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--length", type=int, default=1500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    out = Path(a.out)
    man = write_synthetic_corpus(out / "corpus", n=10, length=a.length, snr_db=0.0)
    tc = TrainConfig(epochs=a.epochs, batch_size=1, micro_batch=1, segment_length=a.length,
                     lr=a.lr, remix=False, bandmask_prob=0.0, seed=a.seed)
    cfg = s4nd_default()
    losses = []
    t0 = time.perf_counter()

    def log(rec):
        losses.append(rec["train_loss"])
        print(f"epoch {rec['epoch']:4d}  loss {rec['train_loss']:.5f}  "
              f"{time.perf_counter() - t0:7.1f} s", flush=True)

    paths = train(cfg, tc, man, out / "run", log=log)
    rows = evaluate_utterances(Checkpoint.load(paths[-1]).build_model(), cfg, load_dataset(man))
    gain = np.mean([r["si_sdr_db"] - r["noisy_si_sdr_db"] for r in rows])
    print(f"SI-SDR gain {gain:+.2f} dB, loss drop {100 * (1 - losses[-1] / losses[0]):.1f}%")


if __name__ == "__main__":
    main()
