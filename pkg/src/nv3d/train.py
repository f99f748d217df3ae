"""Episode-driven training, Adam, metrics and evaluation reports."""
from __future__ import annotations

import csv
import io as _io
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import apsp, io, net, taskgen
from . import tensor as T
from .losses import DEFAULT_RATES, DEFAULT_WEIGHTS, SEGMENTATION, TASK_KINDS, LossConfig, total_loss

logger = logging.getLogger(__name__)

_DTYPES = {"f32": np.float32, "f64": np.float64}


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    seed: int = 0
    dtype: str = "f32"
    side: int = 16
    stages: int = 3
    base_channels: int = 8
    fusion_stages: str = ""
    warm_fraction: float = 100 / 120  # share of steps with fixed L = ell = 3
    warm_context: int = 3
    max_context: int = 8
    mini_context: int = 3
    tasks: str = ",".join(TASK_KINDS)
    log_interval: int = 50
    val_interval: int = 200
    val_episodes: int = 32
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_interval: int = 200
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if not 0.0 <= self.warm_fraction <= 1.0:
            raise ValueError("warm_fraction must lie in [0, 1]")
        unknown = [t for t in self.task_list if t not in TASK_KINDS]
        if unknown:
            raise ValueError(f"unknown tasks: {', '.join(unknown)}")

    @property
    def task_list(self) -> list[str]:
        return [t.strip() for t in self.tasks.split(",") if t.strip()]

    @property
    def warm_steps(self) -> int:
        return int(round(self.steps * self.warm_fraction))

    def net_config(self) -> net.NetConfig:
        fs = [int(s) for s in self.fusion_stages.split(",") if s.strip()] or None
        return net.NetConfig(stages=self.stages, base_channels=self.base_channels,
                             fusion_stages=fs, side=self.side)

    def loss_config(self) -> LossConfig:
        return LossConfig(weights=dict(self.weights), rates=dict(self.rates))

    def phase(self, step: int) -> int:
        return 1 if step < self.warm_steps else 2

    # flat key = value form; weights/rates flatten to weight.<task> / rate.<task>
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                prefix = "weight" if f.name == "weights" else "rate"
                out.update({f"{prefix}.{k}": repr(float(x)) for k, x in v.items()})
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict, source: str = "<config>") -> "TrainConfig":
        kw: dict = {}
        weights, rates = dict(DEFAULT_WEIGHTS), dict(DEFAULT_RATES)
        types = {f.name: f.type for f in fields(cls)}
        for key, value in d.items():
            if key.startswith("weight.") or key.startswith("rate."):
                prefix, task = key.split(".", 1)
                if task not in TASK_KINDS:
                    raise io.ConfigError(f"{source}: unknown task {task!r} in {key!r}")
                (weights if prefix == "weight" else rates)[task] = float(value)
                continue
            if key not in types or key in ("weights", "rates"):
                raise io.ConfigError(f"{source}: unknown key {key!r}")
            typ = types[key]
            try:
                if typ == "int":
                    kw[key] = int(value)
                elif typ == "float":
                    kw[key] = float(value)
                else:
                    kw[key] = value
            except ValueError:
                raise io.ConfigError(f"{source}: bad value {value!r} for {key!r}") from None
        return cls(weights=weights, rates=rates, **kw)


def load_config(path) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    cfg = TrainConfig.from_dict(io.parse_config(text, str(path)), str(path))
    env_seed = os.environ.get("NV3D_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> tuple[dict, OptimizerState]:
    """Bias-corrected Adam. Returns new parameter tensors and the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r} at optimizer step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = T.parameter((p.data - update).astype(p.dtype), name)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, OptimizerState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------- metrics

def dice(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Overlap ``2|A n B| / (|A| + |B|)`` after thresholding; two empty masks score 1."""
    a = np.asarray(pred) > threshold
    b = np.asarray(gt) > threshold
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` in dB for intensities in ``[0, 1]``; ``inf`` when identical."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def metric_for(kind: str) -> str:
    return "dice" if kind == SEGMENTATION else "psnr"


def score(kind: str, pred: np.ndarray, gt: np.ndarray) -> float:
    if kind == SEGMENTATION:
        return dice(pred, gt)
    return psnr(np.clip(pred, 0.0, 1.0), gt)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    step: int = 0
    opt: OptimizerState | None = None
    extra: dict = field(default_factory=dict)

    @property
    def net_config(self) -> net.NetConfig:
        return self.config.net_config()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = ckpt.config.to_dict()
    meta["state.step"] = str(ckpt.step)
    meta.update({f"state.{k}": str(v) for k, v in ckpt.extra.items()})
    tensors = {name: p.data for name, p in ckpt.params.items()}
    if ckpt.opt is not None:
        meta["state.adam_step"] = str(ckpt.opt.step)
        tensors.update({f"adam.m/{k}": v for k, v in ckpt.opt.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in ckpt.opt.v.items()})
    io.write_checkpoint(path, io.format_config(meta), tensors)


def load_checkpoint(path, dtype=None) -> Checkpoint:
    text, tensors = io.read_checkpoint(path)
    meta = io.parse_config(text, str(path))
    state = {k[6:]: v for k, v in meta.items() if k.startswith("state.")}
    cfg = TrainConfig.from_dict({k: v for k, v in meta.items() if not k.startswith("state.")}, str(path))
    dt = _DTYPES[cfg.dtype] if dtype is None else dtype
    params = {k: T.parameter(v.astype(dt), k) for k, v in tensors.items() if not k.startswith("adam.")}
    expected = set(net.init_params(cfg.net_config(), 0, np.float32))
    if set(params) != expected:
        missing, extra = expected - set(params), set(params) - expected
        raise io.FormatError(f"checkpoint tensors do not match the network: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
    opt = None
    if "adam_step" in state:
        opt = OptimizerState({k[7:]: v.astype(dt) for k, v in tensors.items() if k.startswith("adam.m/")},
                             {k[7:]: v.astype(dt) for k, v in tensors.items() if k.startswith("adam.v/")},
                             int(state["adam_step"]), cfg.beta1, cfg.beta2, cfg.eps)
    step = int(state.pop("step", 0))
    state.pop("adam_step", None)
    return Checkpoint(cfg, params, step, opt, state)


# ---------------------------------------------------------------- training

def train_seed(seed: int, step: int) -> int:
    """Even seeds for training episodes."""
    return 2 * (seed * 1_000_003 + step)


def eval_seed(seed: int, index: int) -> int:
    """Odd seeds for validation and evaluation episodes."""
    return 2 * (seed * 1_000_003 + index) + 1


def draw_episode(cfg: TrainConfig, step: int):
    """Task, context size and episode for one training step."""
    rng = np.random.default_rng([cfg.seed, step, 77])
    rates = {k: v for k, v in cfg.rates.items() if k in cfg.task_list}
    kind = taskgen.sample_task(rng, rates)
    if cfg.phase(step) == 1:
        L = cfg.warm_context
    else:
        L = int(rng.integers(1, cfg.max_context + 1))
    target, context = taskgen.sample_episode(kind, L, train_seed(cfg.seed, step), side=cfg.side)
    return kind, target, context


def validation_bank(cfg: TrainConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 99])
    rates = {k: v for k, v in cfg.rates.items() if k in cfg.task_list}
    bank = []
    for i in range(cfg.val_episodes):
        kind = taskgen.sample_task(rng, rates)
        L = int(rng.integers(1, cfg.max_context + 1))
        target, context = taskgen.sample_episode(kind, L, eval_seed(cfg.seed, 10_000 + i), side=cfg.side,
                                                 augment=False)
        bank.append((kind, target, context))
    return bank


def validation_loss(params: dict, cfg: TrainConfig, bank: list) -> float:
    ncfg, lcfg = cfg.net_config(), cfg.loss_config()
    dtype = net.params_dtype(params)
    total = 0.0
    for kind, target, context in bank:
        pred = apsp.apsp_forward(target.image, context, cfg.mini_context, params, ncfg)
        with T.no_grad():
            total += float(total_loss(kind, pred, T.Tensor(target.label.astype(dtype)), lcfg).data)
    return total / len(bank)


def train(cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          log: Callable[[str], None] | None = None, stop_after: int | None = None) -> Checkpoint:
    """Run the two-phase schedule and return the best-validation checkpoint.

    With ``out_dir`` the run writes ``train.log``, ``last.nv3d`` (resumable,
    includes optimizer state) and ``best.nv3d``. ``stop_after`` ends the run
    early after that many steps of this call, as an interruption would.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ncfg, lcfg = cfg.net_config(), cfg.loss_config()
    dtype = _DTYPES[cfg.dtype]
    if resume is not None:
        params = {k: T.parameter(v.data.astype(dtype), k) for k, v in resume.params.items()}
        opt = resume.opt or OptimizerState.zeros(params, cfg.beta1, cfg.beta2, cfg.eps)
        start = resume.step
        lr = float(resume.extra.get("lr", cfg.lr))
        best_val = float(resume.extra.get("best_val", "inf"))
        stale = int(resume.extra.get("stale", 0))
    else:
        params = net.init_params(ncfg, cfg.seed, dtype)
        opt = OptimizerState.zeros(params, cfg.beta1, cfg.beta2, cfg.eps)
        start, lr, best_val, stale = 0, cfg.lr, math.inf, 0
    best = Checkpoint(cfg, params, start, None, {})
    if out is not None and (out / "best.nv3d").exists() and resume is not None:
        best = load_checkpoint(out / "best.nv3d", dtype)
    bank = validation_bank(cfg)
    log_path = out / "train.log" if out is not None else None
    window: list[float] = []
    t0 = time.perf_counter()
    end = cfg.steps if stop_after is None else min(cfg.steps, start + stop_after)

    def write_line(line: str):
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if log is not None:
            log(line)

    def snapshot(step_done: int) -> Checkpoint:
        return Checkpoint(cfg, params, step_done, opt,
                          {"lr": repr(lr), "best_val": repr(best_val), "stale": str(stale)})

    for step in range(start, end):
        kind, target, context = draw_episode(cfg, step)
        loss_fn = lambda pred, y, kind=kind: total_loss(kind, pred, y, lcfg)
        loss, grads, _ = apsp.apsp_train_forward(
            target.image, target.label, context, cfg.mini_context, params, ncfg, loss_fn,
            seed=train_seed(cfg.seed, step) + 1)
        if not math.isfinite(loss):
            msg = f"loss became {loss} at step {step + 1} (task {kind})"
            write_line(f"error step={step + 1} {msg}")
            raise TrainingDiverged(msg)
        params, opt = adam_step(params, grads, opt, lr)
        window.append(loss)
        done = step + 1
        if done % cfg.log_interval == 0:
            write_line(f"step={done} loss={np.mean(window):.6g} lr={lr:.3g} phase={cfg.phase(step)} "
                       f"elapsed={time.perf_counter() - t0:.1f}")
            window = []
        if done % cfg.val_interval == 0 or done == cfg.steps:
            val = validation_loss(params, cfg, bank)
            if val < best_val:
                best_val, stale = val, 0
                best = Checkpoint(cfg, params, done, None, {"val_loss": repr(val)})
                if out is not None:
                    save_checkpoint(out / "best.nv3d", best)
            else:
                stale += 1
                if stale >= cfg.patience:
                    lr *= 0.5
                    stale = 0
                    logger.info("step %d: no improvement over %d evaluations, lr -> %g", done, cfg.patience, lr)
            logger.info("step %d val_loss %.6g (best %.6g)", done, val, best_val)
        if out is not None and (done % cfg.checkpoint_interval == 0 or done == end):
            save_checkpoint(out / "last.nv3d", snapshot(done))
    return best


# ---------------------------------------------------------------- evaluation

@dataclass
class ReportRow:
    task: str
    context_size: int
    metric: str
    mean: float
    std: float
    repeats: int
    values: list = field(default_factory=list)


def model_predictor(ckpt: Checkpoint, mini_context: int | None = None) -> Callable:
    ncfg = ckpt.net_config
    ell = mini_context or ckpt.config.mini_context

    def predict(target, context):
        return apsp.apsp_forward(target.image, context, ell, ckpt.params, ncfg).data

    return predict


def evaluate(ckpt: Checkpoint | None, tasks: Sequence[str], context_sizes: Sequence[int], repeats: int = 10,
             seed: int = 0, predictor: Callable | None = None, side: int | None = None) -> list[ReportRow]:
    """Mean and std of Dice (segmentation) or PSNR (generation) per task and context size.

    Each repeat draws one held-out episode with the largest context size;
    smaller sizes use a prefix of the same context, so rows for one task are
    paired across context sizes.
    """
    unknown = [t for t in tasks if t not in TASK_KINDS]
    if unknown:
        raise ValueError(f"no generator for tasks: {', '.join(unknown)}")
    if predictor is None:
        if ckpt is None:
            raise ValueError("need a checkpoint or a predictor")
        predictor = model_predictor(ckpt)
    side = side or (ckpt.config.side if ckpt is not None else 16)
    sizes = sorted(set(int(L) for L in context_sizes))
    rows = []
    for task in tasks:
        values = {L: [] for L in sizes}
        for r in range(repeats):
            eseed = eval_seed(seed, 1_000_000 * (TASK_KINDS.index(task) + 1) + r)
            target, context = taskgen.sample_episode(task, max(sizes), eseed, side=side, augment=False)
            for L in sizes:
                values[L].append(score(task, predictor(target, context[:L]), target.label))
        for L in sizes:
            v = np.asarray(values[L], dtype=np.float64)
            std = float(v.std()) if len(v) > 1 and np.all(np.isfinite(v)) else 0.0
            rows.append(ReportRow(task, L, metric_for(task), float(v.mean()), std, repeats, list(v)))
    return rows


CSV_COLUMNS = ("task", "context_size", "metric", "mean", "std", "repeats")


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.task, r.context_size, r.metric, f"{r.mean:.6g}", f"{r.std:.6g}", r.repeats])
    return buf.getvalue()


def report_lines(rows: Sequence[ReportRow]) -> str:
    return "".join(f"task={r.task} context_size={r.context_size} {r.metric}={r.mean:.4f} "
                   f"std={r.std:.4f} repeats={r.repeats}\n" for r in rows)
