"""Dual-branch 3D U-Net with U-shaped fusion between the branches.

The target branch is a plain U-Net on the single-channel target volume. The
context branch is a second U-Net, shared by every (image, label) pair, whose
encoder receives target features after each stage (target-to-context fusion)
and whose decoder outputs are averaged over pairs and handed back to the target
decoder after each of its stages (context-to-target fusion).

Levels are 0-based internally: level ``s`` has ``base_channels * 2**s``
channels and side ``side / 2**s``; the deepest level is the bottleneck and is
fused like every other level. ``NetConfig.fusion_stages`` uses 1-based stage
numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ModelParams = dict  # name -> Tensor


@dataclass
class NetConfig:
    stages: int = 3
    base_channels: int = 8
    in_channels_target: int = 1
    in_channels_context: int = 2
    fusion_stages: frozenset | None = None
    residual_blocks_per_stage: int = 2
    side: int = 16

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError(f"need at least 2 stages, got {self.stages}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.fusion_stages is None:
            self.fusion_stages = frozenset(range(1, self.stages + 1))
        self.fusion_stages = frozenset(int(s) for s in self.fusion_stages)
        bad = [s for s in self.fusion_stages if not 1 <= s <= self.stages]
        if bad:
            raise ValueError(f"fusion stages {sorted(bad)} outside 1..{self.stages}")
        if self.side % (2 ** (self.stages - 1)):
            raise ValueError(
                f"side {self.side} is not divisible by 2**{self.stages - 1}; bottleneck would be fractional")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def fused(self, level: int) -> bool:
        return (level + 1) in self.fusion_stages

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "base_channels": self.base_channels,
            "in_channels_target": self.in_channels_target,
            "in_channels_context": self.in_channels_context,
            "fusion_stages": ",".join(str(s) for s in sorted(self.fusion_stages)),
            "residual_blocks_per_stage": self.residual_blocks_per_stage,
            "side": self.side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        fs = d.get("fusion_stages")
        if isinstance(fs, str):
            fs = frozenset(int(s) for s in fs.split(",") if s.strip())
        return cls(
            stages=int(d.get("stages", 3)),
            base_channels=int(d.get("base_channels", 8)),
            in_channels_target=int(d.get("in_channels_target", 1)),
            in_channels_context=int(d.get("in_channels_context", 2)),
            fusion_stages=fs,
            residual_blocks_per_stage=int(d.get("residual_blocks_per_stage", 2)),
            side=int(d.get("side", 16)),
        )


# ---------------------------------------------------------------- parameters

def _conv_shapes(cfg: NetConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    k = 3
    for branch, cin in (("tgt", cfg.in_channels_target), ("ctx", cfg.in_channels_context)):
        for s in range(cfg.stages):
            c = cfg.channels(s)
            if s == 0:
                shapes[f"{branch}.enc0.stem"] = (c, cin, k)
            else:
                shapes[f"{branch}.enc{s}.down"] = (c, cfg.channels(s - 1), k)
            for r in range(cfg.residual_blocks_per_stage):
                shapes[f"{branch}.enc{s}.res{r}.conv1"] = (c, c, k)
                shapes[f"{branch}.enc{s}.res{r}.conv2"] = (c, c, k)
        for s in range(cfg.stages - 2, -1, -1):
            c = cfg.channels(s)
            shapes[f"{branch}.dec{s}.up"] = (c, cfg.channels(s + 1), k)
            shapes[f"{branch}.dec{s}.merge"] = (c, 2 * c, k)
            for r in range(cfg.residual_blocks_per_stage):
                shapes[f"{branch}.dec{s}.res{r}.conv1"] = (c, c, k)
                shapes[f"{branch}.dec{s}.res{r}.conv2"] = (c, c, k)
    for s in range(cfg.stages):
        if cfg.fused(s):
            c = cfg.channels(s)
            shapes[f"t2c{s}"] = (c, 2 * c, k)
            shapes[f"c2t{s}"] = (c, 2 * c, k)
    shapes["head"] = (1, cfg.channels(0), 1)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal kernels, zero biases; the second conv of each residual branch
    and the fusion convs start scaled down so the initial network is close to
    its residual identity path."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, (cout, cin, k) in _conv_shapes(cfg).items():
        std = math.sqrt(2.0 / (cin * k ** 3))
        if name.endswith("conv2"):
            std *= 0.25
        elif name.startswith(("t2c", "c2t")):
            std *= 0.5
        elif name == "head":
            std = math.sqrt(1.0 / cin)
        w = rng.normal(0.0, std, size=(cout, cin, k, k, k)).astype(dtype)
        params[f"{name}.w"] = T.parameter(w, f"{name}.w")
        params[f"{name}.b"] = T.parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
    return params


def params_dtype(params: ModelParams):
    return next(iter(params.values())).dtype


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {k: T.parameter(v.data.astype(dtype), k) for k, v in params.items()}


def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    return T.conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)


# ---------------------------------------------------------------- blocks

def residual_block(x: Tensor, params: ModelParams, name: str) -> Tensor:
    """``gelu(conv2(gelu(conv1(x))) + x)``."""
    c = x.shape[-4]
    w = params[f"{name}.conv1.w"]
    if w.shape[1] != c or w.shape[0] != c:
        raise ValueError(f"residual block {name} expects {w.shape[1]} channels, input has shape {x.shape}")
    h = T.gelu(_conv(x, params, f"{name}.conv1"))
    return T.gelu(T.add(_conv(h, params, f"{name}.conv2"), x))


def fusion(c: Tensor, t: Tensor, params: ModelParams, name: str) -> Tensor:
    """``Conv(c || t)`` mapping 2C channels back to C.

    ``t`` may be unbatched while ``c`` is batched; it is then shared by every
    item of the batch.
    """
    if c.ndim == 5 and t.ndim == 4:
        t = T.broadcast_batch(t, c.shape[0])
    if c.shape != t.shape:
        raise ValueError(f"fusion inputs differ: context {c.shape} vs target {t.shape}")
    return _conv(T.concat_channels(c, t), params, name)


def t2c_fuse(c: Tensor, t: Tensor, params: ModelParams, name: str) -> Tensor:
    """Target-to-context fusion, residual on the context features."""
    return T.gelu(T.add(fusion(c, t, params, name), c))


def c2t_fuse(cbar: Tensor, t: Tensor, params: ModelParams, name: str) -> Tensor:
    """Context-to-target fusion, residual on the target features."""
    return T.gelu(T.add(fusion(cbar, t, params, name), t))


def _stage_blocks(x: Tensor, params: ModelParams, prefix: str, cfg: NetConfig) -> Tensor:
    for r in range(cfg.residual_blocks_per_stage):
        x = residual_block(x, params, f"{prefix}.res{r}")
    return x


def _encoder_stage(x: Tensor, params: ModelParams, branch: str, s: int, cfg: NetConfig) -> Tensor:
    if s == 0:
        h = T.gelu(_conv(x, params, f"{branch}.enc0.stem"))
    else:
        h = T.gelu(_conv(x, params, f"{branch}.enc{s}.down", stride=2))
    return _stage_blocks(h, params, f"{branch}.enc{s}", cfg)


def _decoder_stage(prev: Tensor, skip: Tensor, params: ModelParams, branch: str, s: int,
                   cfg: NetConfig) -> Tensor:
    up = T.gelu(_conv(T.upsample_nearest2x(prev), params, f"{branch}.dec{s}.up"))
    h = T.gelu(_conv(T.concat_channels(up, skip), params, f"{branch}.dec{s}.merge"))
    return _stage_blocks(h, params, f"{branch}.dec{s}", cfg)


# ---------------------------------------------------------------- branches

@dataclass
class StageFeatures:
    """Per-level feature maps, index 0 = full resolution, last = bottleneck."""
    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def detached(self) -> "StageFeatures":
        return StageFeatures([T.detach(t) for t in self.levels])


# instrumentation: how many times the target encoder ran
ENCODER_CALLS = {"target": 0}


def _check_volume(x: Tensor, channels: int, cfg: NetConfig, what: str) -> None:
    want = (channels, cfg.side, cfg.side, cfg.side)
    got = x.shape[-4:]
    if got != want or x.ndim not in (4, 5):
        raise ValueError(f"{what} shape {x.shape} does not match expected {want}")


def target_encode(x: Tensor, params: ModelParams, cfg: NetConfig) -> StageFeatures:
    """Encoder of the target branch, one feature map per level."""
    _check_volume(x, cfg.in_channels_target, cfg, "target")
    ENCODER_CALLS["target"] += 1
    feats = []
    h = x
    for s in range(cfg.stages):
        h = _encoder_stage(h, params, "tgt", s, cfg)
        feats.append(h)
    return StageFeatures(feats)


def pair_input(images: Tensor | np.ndarray, labels: Tensor | np.ndarray) -> Tensor:
    """Stack images and labels as the two input channels of the context branch."""
    img = images.data if isinstance(images, Tensor) else np.asarray(images)
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if img.shape != lab.shape:
        raise ValueError(f"image shape {img.shape} and label shape {lab.shape} differ")
    return T.Tensor(np.concatenate([img, lab], axis=-4))


def context_branch(pairs: Tensor, target_feats: StageFeatures, params: ModelParams,
                   cfg: NetConfig) -> list[Tensor]:
    """Run the shared context U-Net on a batch of pairs.

    ``pairs`` is ``(N, 2, D, H, W)``. Returns the decoder output of every
    level, each batched ``(N, C_s, ...)``, listed from level 0 to the
    bottleneck.
    """
    if pairs.ndim != 5 or pairs.shape[0] == 0:
        raise ValueError(f"context branch needs a non-empty (N, 2, D, H, W) batch, got {pairs.shape}")
    _check_volume(pairs, cfg.in_channels_context, cfg, "context pairs")
    skips = []
    h = pairs
    for s in range(cfg.stages):
        h = _encoder_stage(h, params, "ctx", s, cfg)
        if cfg.fused(s):
            h = t2c_fuse(h, target_feats[s], params, f"t2c{s}")
        skips.append(h)
    dec = [None] * cfg.stages
    dec[-1] = h
    for s in range(cfg.stages - 2, -1, -1):
        h = _decoder_stage(h, skips[s], params, "ctx", s, cfg)
        dec[s] = h
    return dec


def target_decode(target_feats: StageFeatures, cbar: list, params: ModelParams,
                  cfg: NetConfig) -> Tensor:
    """Target decoder with skip connections and context-to-target fusion.

    ``cbar`` holds one (unbatched) mean context map per level. Returns the
    raw single-channel prediction.
    """
    if len(cbar) != cfg.stages:
        raise ValueError(f"expected {cfg.stages} context levels, got {len(cbar)}")
    for s in range(cfg.stages):
        if cfg.fused(s) and cbar[s].shape != target_feats[s].shape:
            raise ValueError(
                f"context level {s} has shape {cbar[s].shape}, decoder expects {target_feats[s].shape}")
    h = target_feats[-1]
    last = cfg.stages - 1
    if cfg.fused(last):
        h = c2t_fuse(cbar[last], h, params, f"c2t{last}")
    for s in range(cfg.stages - 2, -1, -1):
        h = _decoder_stage(h, target_feats[s], params, "tgt", s, cfg)
        if cfg.fused(s):
            h = c2t_fuse(cbar[s], h, params, f"c2t{s}")
    return T.conv3d(h, params["head.w"], params["head.b"], padding=0)


def full_forward(x: Tensor, pairs: Tensor, params: ModelParams, cfg: NetConfig) -> Tensor:
    """Whole context in one batch, plain mean. Reference path for small contexts."""
    feats = target_encode(x, params, cfg)
    dec = context_branch(pairs, feats, params, cfg)
    return target_decode(feats, [T.batch_mean(d) for d in dec], params, cfg)
