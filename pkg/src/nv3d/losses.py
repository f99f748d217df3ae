"""Task losses: a cubic smooth-L1 for masks, smooth-L1 plus an edge term for images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SEGMENTATION = "segmentation"
GENERATION_TASKS = (
    "bias_correction",
    "gaussian_denoise",
    "salt_pepper_denoise",
    "inpainting",
    "super_resolution",
    "two_d_to_three_d",
    "contrast_remap",
    "skull_strip",
)
TASK_KINDS = (SEGMENTATION,) + GENERATION_TASKS

DEFAULT_WEIGHTS = {kind: 1.0 for kind in TASK_KINDS} | {SEGMENTATION: 50.0, "two_d_to_three_d": 0.5}
DEFAULT_RATES = {kind: 1.0 for kind in TASK_KINDS} | {SEGMENTATION: 2.0}


@dataclass
class LossConfig:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))

    def __post_init__(self):
        for table in (self.weights, self.rates):
            for kind, v in table.items():
                if not v > 0:
                    raise ValueError(f"{kind}: weights and rates must be positive, got {v}")

    def weight(self, kind: str) -> float:
        if kind not in self.weights:
            raise KeyError(f"unknown task {kind!r}")
        return self.weights[kind]


def _check_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")


def _voxel_mean(pred: Tensor, target: Tensor, value_fn, slope_fn, op: str) -> Tensor:
    _check_shapes(pred, target)
    d = pred.data - target.data
    n = d.size
    out = np.asarray(value_fn(d).mean(), dtype=pred.dtype)

    def back(g):
        gd = (g / n) * slope_fn(d)
        return gd, -gd

    return T.make_op(out, (pred, target), back, op)


def _cubic_value(d):
    a = np.abs(d)
    return np.where(a < 1, a ** 3 / 3.0, a - 2.0 / 3.0)


def _cubic_slope(d):
    a = np.abs(d)
    return np.sign(d) * np.where(a < 1, a * a, 1.0)


def _huber_value(d):
    a = np.abs(d)
    return np.where(a < 1, 0.5 * d * d, a - 0.5)


def _huber_slope(d):
    return np.clip(d, -1.0, 1.0)


def seg_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of ``|d|^3 / 3`` inside the unit band and ``|d| - 2/3`` outside."""
    return _voxel_mean(pred, target, _cubic_value, _cubic_slope, "seg_loss")


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Huber loss with the knee at 1."""
    return _voxel_mean(pred, target, _huber_value, _huber_slope, "smooth_l1")


def intensity_diff(x: Tensor) -> Tensor:
    """Forward differences along depth, height and width as three channels.

    The last slice along each axis has no forward neighbour and gets 0.
    """
    if x.shape[-4] != 1:
        raise ValueError(f"intensity_diff expects a single channel, got shape {x.shape}")
    v = x.data[..., 0, :, :, :]
    out = np.zeros(x.shape[:-4] + (3,) + x.shape[-3:], dtype=x.dtype)
    out[..., 0, :-1, :, :] = v[..., 1:, :, :] - v[..., :-1, :, :]
    out[..., 1, :, :-1, :] = v[..., :, 1:, :] - v[..., :, :-1, :]
    out[..., 2, :, :, :-1] = v[..., :, :, 1:] - v[..., :, :, :-1]

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gv = gx[..., 0, :, :, :]
        gv[..., 1:, :, :] += g[..., 0, :-1, :, :]
        gv[..., :-1, :, :] -= g[..., 0, :-1, :, :]
        gv[..., :, 1:, :] += g[..., 1, :, :-1, :]
        gv[..., :, :-1, :] -= g[..., 1, :, :-1, :]
        gv[..., :, :, 1:] += g[..., 2, :, :, :-1]
        gv[..., :, :, :-1] -= g[..., 2, :, :, :-1]
        return (gx,)

    return T.make_op(out, (x,), back, "intensity_diff")


def gen_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Half smooth-L1 on intensities, half on their forward differences."""
    _check_shapes(pred, target)
    direct = smooth_l1(pred, target)
    edges = smooth_l1(intensity_diff(pred), intensity_diff(target))
    return T.scale(T.add(direct, edges), 0.5)


def task_loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    if kind == SEGMENTATION:
        return seg_loss(pred, target)
    if kind in GENERATION_TASKS:
        return gen_loss(pred, target)
    raise KeyError(f"unknown task {kind!r}")


def total_loss(kind: str, pred: Tensor, target: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Task loss scaled by the task weight."""
    cfg = cfg or LossConfig()
    return T.scale(task_loss(kind, pred, target), cfg.weight(kind))
