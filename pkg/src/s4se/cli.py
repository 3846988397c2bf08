"""Command-line entry point: ``s4se {train,enhance,eval,gradcheck,kernel,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import VARIANTS, load_config, tiny
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _cmd_train(args) -> int:
    from .train import train
    model_cfg, tc = load_config(args.config)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)

    def log(m):
        print(json.dumps(m, sort_keys=True), flush=True)
    train(model_cfg, tc, args.manifest, args.out, resume=args.resume, log=log)
    return EXIT_OK


def _pairs(inp: Path, out: Path, ref: Path | None):
    if inp.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(inp.glob("*.wav")):
            yield f, out / f.name, (ref / f.name if ref is not None else None)
    else:
        yield inp, out, ref


def _cmd_enhance(args) -> int:
    from .train import Checkpoint, enhance_file
    ck = Checkpoint.load(args.ckpt)
    model = ck.build_model()
    for src, dst, ref in _pairs(Path(args.inp), Path(args.out), Path(args.ref) if args.ref else None):
        print(json.dumps(enhance_file(ck, src, dst, ref, model=model), sort_keys=True), flush=True)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .train import Checkpoint, evaluate
    rows = evaluate(Checkpoint.load(args.ckpt), args.manifest)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for r in rows:
            out.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import gradcheck as gc
    if args.variant == "primitives":
        reports = gc.primitive_checks(args.seed)
    elif args.variant == "losses":
        reports = gc.loss_checks(args.seed)
    elif args.variant == "all":
        reports = gc.run_all(args.seed)
    else:
        scenarios = ("mag_regression",) if args.variant == "time_s4_unet" else \
            ("mag_regression", "mag_masking", "complex_masking")
        reports = [gc.model_check(tiny(args.variant, sc), args.seed) for sc in scenarios]
    for r in reports:
        print("\n".join(r.lines()))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def _cmd_kernel(args) -> int:
    from .data import make_rng
    from .ssm_kernel import hippo_dplr_init, materialize_kernel_dplr, write_kernel
    from .ssm_nd import Ssm2D, materialize_kernel_2d, write_kernel_2d
    model_cfg, tc = load_config(args.config)
    rng = make_rng(tc.seed if args.seed is None else args.seed)
    N = model_cfg.state_size
    if model_cfg.variant == "s4nd_unet":
        a1, a2 = hippo_dplr_init(N, rng), hippo_dplr_init(N, rng)
        factors = [(rng.standard_normal(N) + 1j * rng.standard_normal(N),
                    rng.standard_normal(N) + 1j * rng.standard_normal(N))
                   for _ in range(model_cfg.rank)]
        L2 = args.len2 or args.len
        write_kernel_2d(args.out, materialize_kernel_2d(Ssm2D(a1, a2, factors), args.len, L2))
    else:
        write_kernel(args.out, materialize_kernel_dplr(hippo_dplr_init(N, rng), args.len))
    print(args.out)
    return EXIT_OK


def _time(fn, repeats: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_rows(mode: str, N: int, L: int, repeats: int = 3, seed: int = 0) -> list[dict]:
    from .data import make_rng
    from .ssm_kernel import (direct_conv, fft_conv, hippo_dplr_init, materialize_kernel,
                             materialize_kernel_dplr)
    rng = make_rng(seed)
    if mode.startswith("kernel"):
        ssm = hippo_dplr_init(N, rng)
        if mode == "kernel-naive":
            fn = lambda: materialize_kernel(ssm.to_discrete(), L)   # noqa: E731
        else:
            fn = lambda: materialize_kernel_dplr(ssm, L)             # noqa: E731
    else:
        k, u = rng.standard_normal(L), rng.standard_normal(L)
        fn = (lambda: direct_conv(k, u)) if mode == "conv-direct" else (lambda: fft_conv(k, u))
    return [{"mode": mode, "n": N, "len": L, "seconds": _time(fn, repeats)}]


def _cmd_bench(args) -> int:
    modes = [args.mode] if args.mode != "all" else \
        ["kernel-naive", "kernel-dplr", "conv-direct", "conv-fft"]
    w = csv.DictWriter(sys.stdout, fieldnames=["mode", "n", "len", "seconds"])
    w.writeheader()
    for m in modes:
        for row in bench_rows(m, args.n, args.len, args.repeats):
            w.writerow({**row, "seconds": f"{row['seconds']:.6e}"})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s4se", description="S4/S4ND speech enhancement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("enhance", help="enhance a WAV file or a directory of WAVs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ref")
    e.set_defaults(fn=_cmd_enhance)

    v = sub.add_parser("eval", help="JSON-lines metrics on a manifest")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--out")
    v.set_defaults(fn=_cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--variant", default="all",
                   choices=list(VARIANTS) + ["primitives", "losses", "all"])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gradcheck)

    k = sub.add_parser("kernel", help="dump an SSMK / SSK2 kernel file")
    k.add_argument("--config", required=True)
    k.add_argument("--len", type=int, required=True)
    k.add_argument("--len2", type=int)
    k.add_argument("--out", required=True)
    k.add_argument("--seed", type=int)
    k.set_defaults(fn=_cmd_kernel)

    b = sub.add_parser("bench", help="CSV timings of kernel and convolution paths")
    b.add_argument("--mode", default="all",
                   choices=["kernel-naive", "kernel-dplr", "conv-direct", "conv-fft", "all"])
    b.add_argument("--n", type=int, default=16)
    b.add_argument("--len", type=int, default=4096)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
