"""``flowseg`` command line: synth, train, sample, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_run_config
from .data import DataError, load_checkpoint, load_dataset, save_checkpoint, synth_generate, to_u8, write_pgm
from .flow import NonFiniteLossError, train
from .metrics import evaluate, mean_report, write_csv
from .net import init_params
from .sampler import IntegrationError, sample_many
from .uncertainty import pixelwise_stats, write_maps

log = logging.getLogger("flowseg")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("FLOWSEG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FLOWSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"FLOWSEG_THREADS must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


def _base_config(args) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def _override(section, **flags):
    flags = {k: v for k, v in flags.items() if v is not None}
    return replace(section, **flags) if flags else section


def _resolve_integrator(cfg: RunConfig, args) -> RunConfig:
    integ = _override(
        cfg.integrator,
        guidance=args.guidance,
        step=args.step,
        method=args.method,
        threshold=args.threshold,
    )
    return replace(cfg, integrator=integ).validate()


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _base_config(args)
    synth = _override(
        cfg.synth,
        n_samples=args.n,
        size=args.size,
        annotators=args.annotators,
        p_empty=args.p_empty,
        sigma_r=args.sigma_r,
        noise=args.noise,
        seed=args.seed,
    )
    cfg = replace(cfg, synth=synth).validate()
    out = Path(args.out)
    synth_generate(cfg.synth, out)
    cfg.dump(out / "resolved.json")
    log.info("wrote %d samples to %s", cfg.synth.n_samples, out)
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    dataset = load_dataset(args.data)
    if not dataset:
        raise UsageError(f"dataset {args.data} is empty")
    C, H, _ = dataset[0].image.shape
    net = _override(
        cfg.network, size=H, cond_channels=C, width=args.width, depth=args.depth, temb_dim=args.temb_dim
    )
    tr = _override(
        cfg.training,
        iterations=args.iters,
        seed=args.seed,
        lr=args.lr,
        batch_size=args.batch,
        p_drop=args.p_drop,
    )
    cfg = replace(cfg, network=net, training=tr).validate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(out.parent / "resolved.json")

    def progress(it, value):
        if it % 100 == 0:
            log.info("iteration %d loss %.5f", it, value)

    params, history = train(dataset, cfg.network, cfg.training, callback=progress)
    save_checkpoint(out, params, cfg.training, cfg.training.iterations)
    history.to_csv(out.with_suffix(".loss.csv"))
    return 0


def _load_model(args):
    params, _, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    return params, dataset


def cmd_sample(args) -> int:
    params, dataset = _load_model(args)
    cfg = replace(_base_config(args), network=params.config)
    cfg = _resolve_integrator(cfg, args)
    ids = [s.id for s in dataset]
    if args.image_id not in ids:
        raise UsageError(f"image id {args.image_id!r} not in {args.data}/manifest.json")
    index = ids.index(args.image_id)
    sample = dataset[index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved.json")
    ss = sample_many(
        params, sample.image, args.num, cfg.integrator, args.seed,
        conditional_only=args.conditional_only, key=(index,),
    )
    for i, m in enumerate(ss.masks):
        write_pgm(out / f"mask_{i:03d}.pgm", m[0] * np.uint8(255))
    np.save(out / "fields.npy", ss.fields)
    write_maps(pixelwise_stats(ss.mask_list()), out / "mean.pgm", out / "variance.pgm")
    write_pgm(out / "image.pgm", to_u8(sample.image[0]))
    return 0


def cmd_eval(args) -> int:
    params, dataset = _load_model(args) if not args.oracle else (None, load_dataset(args.data))
    if not dataset:
        raise UsageError(f"dataset {args.data} is empty")
    cfg = _base_config(args)
    if params is not None:
        cfg = replace(cfg, network=params.config)
    cfg = _resolve_integrator(cfg, args)
    nums = sorted(set(args.num))
    if nums[0] < 1:
        raise UsageError("--num values must be >= 1")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(out.parent / "resolved.json")
    dump = Path(args.dump) if args.dump else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)

    def predict(index):
        s = dataset[index]
        if args.oracle:
            return [m.copy() for m in s.masks]
        ss = sample_many(params, s.image, nums[-1], cfg.integrator, args.seed, key=(index,))
        if dump:
            np.save(dump / f"{s.id}.npy", ss.masks[:, 0])
        return ss.mask_list()

    workers = min(_threads(), len(dataset))
    if workers > 1:
        with threadpool_limits(1), ThreadPoolExecutor(workers) as pool:
            preds = list(pool.map(predict, range(len(dataset))))
    else:
        preds = [predict(i) for i in range(len(dataset))]

    rows = []
    for n in nums:
        reports = []
        for s, pred in zip(dataset, preds):
            use = pred if args.oracle else pred[:n]
            reports.append(evaluate(use, s.masks, s.id, self_pairs=not args.exclude_self_pairs))
        rows.extend(reports)
        rows.append(mean_report(reports))
        if args.oracle:
            break
    write_csv(out, rows)
    for r in rows:
        if r.image_id == "mean":
            log.info("M=%d ged=%.4f s_ncc=%.4f d_max=%.4f dice=%.4f", r.M, r.ged, r.s_ncc, r.d_max, r.dice)
    return 0


# ------------------------------------------------------------------- parser


def _integrator_flags(p):
    p.add_argument("--guidance", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--method", choices=["midpoint", "euler"])
    p.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-annotator dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--annotators", type=int)
    p.add_argument("--p-empty", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the velocity network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--p-drop", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--temb-dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample masks and uncertainty maps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--num", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--conditional-only", action="store_true", help="integrate u(t,S,X) without guidance")
    _integrator_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="sample every image and write a metrics CSV")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--num", type=int, nargs="+", default=[15])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--config")
    p.add_argument("--oracle", action="store_true", help="use the expert masks as predictions")
    p.add_argument("--dump", help="directory for the sampled mask sets (.npy)")
    p.add_argument("--exclude-self-pairs", action="store_true")
    _integrator_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    if args.command == "eval" and not args.oracle and not args.ckpt:
        parser.error("eval needs --ckpt unless --oracle is given")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"flowseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, IntegrationError, DataError, OSError) as e:
        print(f"flowseg: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
