"""Synthesize a dataset, train a small velocity net, and print an N_sample table.

    python3 scripts/run_desk_experiment.py --out runs/desk --iters 2000

Writes a training set, a held-out test set, the checkpoint, loss CSV and metrics CSV under --out and prints
mean GED / S_NCC / D_max / Dice for each sample count, one row per count.
"""

import argparse
import logging
from pathlib import Path

from flowseg.cli import main as cli


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=20)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--num", type=int, nargs="+", default=[5, 10, 15])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)

    run(["synth", "--out", str(out / "data"), "--n", str(args.n), "--size", str(args.size),
         "--seed", str(args.seed)])
    run(["synth", "--out", str(out / "test"), "--n", str(args.n_test), "--size", str(args.size),
         "--seed", str(args.seed + 1)])
    run(["train", "--data", str(out / "data"), "--out", str(out / "model.ckpt"), "--iters", str(args.iters),
         "--width", str(args.width), "--batch", str(args.batch), "--seed", str(args.seed)])
    run(["eval", "--ckpt", str(out / "model.ckpt"), "--data", str(out / "test"), "--out", str(out / "metrics.csv"),
         "--num", *map(str, args.num), "--seed", str(args.seed)])

    logging.getLogger().setLevel(logging.WARNING)
    header, *rows = (out / "metrics.csv").read_text().splitlines()
    print(f"{'N':>4} {'GED':>8} {'S_NCC':>8} {'D_max':>8} {'Dice':>8}")
    for row in rows:
        image_id, n, _, *vals = row.split(",")
        if image_id == "mean":
            print(f"{n:>4} " + " ".join(f"{float(v):8.4f}" for v in vals))


if __name__ == "__main__":
    main()
