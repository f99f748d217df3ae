"""``nv3d`` command line: gen-data, train, infer, eval, bench, check.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import apsp, checks, io, net, taskgen
from . import tensor as T
from . import train as tr
from .losses import SEGMENTATION, TASK_KINDS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _task_list(text: str) -> list[str]:
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASK_KINDS]
    if bad or not tasks:
        raise argparse.ArgumentTypeError(f"unknown task(s) {', '.join(bad) or text!r}; "
                                         f"choose from {', '.join(TASK_KINDS)}")
    return tasks


def _read(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return io.read_volume(path)


def _as_volume(arr: np.ndarray, path) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"{path}: expected a (D, H, W) or (1, D, H, W) volume, got {arr.shape}")
    return arr.astype(np.float64)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.count):
        rng = np.random.default_rng([args.seed, i])
        task = args.tasks[int(rng.integers(len(args.tasks)))]
        eseed = tr.eval_seed(args.seed, i)
        target, context = taskgen.sample_episode(task, args.context, eseed, side=args.side)
        name = f"episode_{i:05d}"
        edir = out / name
        edir.mkdir(exist_ok=True)
        files = {"target_image": "target_image.nvol", "target_label": "target_label.nvol"}
        io.write_volume(edir / files["target_image"], target.image)
        io.write_volume(edir / files["target_label"], target.label)
        for j, pair in enumerate(context):
            for part, arr in (("image", pair.image), ("label", pair.label)):
                files[f"context_{j}_{part}"] = f"context_{j:02d}_{part}.nvol"
                io.write_volume(edir / files[f"context_{j}_{part}"], arr)
        records.append({"id": name, "task": task, "context_size": args.context, "seed": eseed,
                        "side": args.side, "files": {k: f"{name}/{v}" for k, v in files.items()}})
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(records)} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = tr.load_config(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    out = Path(args.out)
    resume = None
    if args.resume:
        last = out / "last.nv3d"
        if not last.is_file():
            raise FileNotFoundError(f"nothing to resume: {last} does not exist")
        resume = tr.load_checkpoint(last)
        resume.config = cfg
        print(f"resuming at step {resume.step}")
    best = tr.train(cfg, out_dir=out, resume=resume, stop_after=args.stop_after,
                    log=None if args.quiet else print)
    print(f"best checkpoint at step {best.step}: {out / 'best.nv3d'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    dt = {"f32": np.float32, "f64": np.float64}[args.dtype]
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"no such file: {ckpt_path}")
    ckpt = tr.load_checkpoint(ckpt_path, dt)
    target = _as_volume(_read(args.target), args.target)
    pairs = []
    for img_path, lab_path in args.context:
        img, lab = _as_volume(_read(img_path), img_path), _as_volume(_read(lab_path), lab_path)
        if img.shape != target.shape or lab.shape != target.shape:
            raise ValueError(f"context pair {img_path}, {lab_path} has shape {img.shape}/{lab.shape}, "
                             f"target has {target.shape}")
        pairs.append(apsp.ContextPair(img, lab))
    if tuple(target.shape[1:]) != (ckpt.config.side,) * 3:
        raise ValueError(f"model expects side {ckpt.config.side}, target has shape {target.shape}")
    pred = apsp.apsp_forward(target, pairs, args.mini_context, ckpt.params, ckpt.net_config).data
    io.write_volume(args.out, pred, dt)
    written = [args.out]
    task = args.task or (ckpt.config.task_list[0] if len(ckpt.config.task_list) == 1 else SEGMENTATION)
    if task == SEGMENTATION:
        mask_path = Path(args.out).with_suffix(".mask.nvol")
        io.write_volume(mask_path, (pred > 0.5).astype(np.float32), dt)
        written.append(str(mask_path))
    print("wrote " + ", ".join(map(str, written)))
    return EXIT_OK


def cmd_eval(args) -> int:
    dt = {"f32": np.float32, "f64": np.float64}[args.dtype]
    ckpt = tr.load_checkpoint(args.checkpoint, dt)
    tasks = args.tasks or ckpt.config.task_list
    rows = tr.evaluate(ckpt, tasks, args.context_sizes, repeats=args.repeats, seed=args.seed,
                       predictor=tr.model_predictor(ckpt, args.mini_context))
    sys.stdout.write(tr.report_lines(rows))
    if args.csv:
        Path(args.csv).write_text(tr.report_csv(rows), encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        ckpt = tr.load_checkpoint(args.checkpoint)
        cfg, params = ckpt.net_config, ckpt.params
    else:
        cfg = net.NetConfig()
        params = net.init_params(cfg, args.seed, np.float32)
    rows = []
    for L in args.L_list:
        x, S, _ = checks.random_episode(cfg, L, args.seed)
        for ell in args.ell_list:
            meter = T.ActivationMeter()
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                apsp.apsp_forward(x, S, ell, params, cfg, meter=meter)
            secs = (time.perf_counter() - t0) / args.repeats
            rows.append((L, ell, meter.peak, f"{secs:.4f}"))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("L", "ell", "peak_bytes", "seconds"))
    w.writerows(rows)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(("L", "ell", "peak_bytes", "seconds"))
            cw.writerows(rows)
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_suite(args.suite, fault=args.fault, quick=not args.full,
                               report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nv3d", description="In-context 3D volume models with memory-bounded context streaming.")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (1 = bitwise reproducible)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic episodes as .nvol files plus a manifest")
    g.add_argument("--tasks", type=_task_list, default=list(TASK_KINDS))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--side", type=int, default=16)
    g.add_argument("--context", type=int, default=4, help="context pairs per episode")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.nv3d")
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--stop-after", type=int, help="stop after this many steps of this run")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict one target from a context set")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--target", required=True)
    i.add_argument("--context", nargs=2, action="append", metavar=("IMAGE", "LABEL"), required=True)
    i.add_argument("--mini-context", type=int, default=3)
    i.add_argument("--task", choices=TASK_KINDS)
    i.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="Dice/PSNR per task and context size")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", type=_task_list)
    e.add_argument("--context-sizes", type=_int_list, default=[1, 2, 4, 8])
    e.add_argument("--repeats", type=int, default=10)
    e.add_argument("--mini-context", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="peak context activation bytes and wall time per (L, ell)")
    b.add_argument("--checkpoint", help="default: freshly initialized desk-scale model")
    b.add_argument("--L-list", type=_int_list, default=[1, 2, 4, 8, 16])
    b.add_argument("--ell-list", type=_int_list, default=[1, 2, 4, 8, 16])
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="run the property suites")
    c.add_argument("--suite", choices=checks.SUITES, default="all")
    c.add_argument("--fault", choices=apsp.FAULTS, help="inject a gradient-scaling fault (should fail)")
    c.add_argument("--full", action="store_true", help="acceptance-size seed counts and the desk-scale net")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("nv3d: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (OSError, ValueError, tr.TrainingDiverged) as exc:
        print(f"nv3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
