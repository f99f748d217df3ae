"""Adaptive parallel-sequential context processing.

The context set is cut into mini-contexts of at most ``ell`` pairs. Each
mini-context goes through the context branch as one batch and is averaged;
mini-contexts are then folded one after another into a running weighted mean,
so only one mini-context's activations are alive at a time.

In training the mini-context order is shuffled, every mini-context but the
last runs without a graph, and the last one (the retained mini-context) carries
the gradient, scaled so that its expectation over the shuffle equals the
full-context gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import net
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ContextPair:
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if np.shape(self.image) != np.shape(self.label):
            raise ValueError(f"image shape {np.shape(self.image)} and label shape {np.shape(self.label)} differ")


@dataclass(frozen=True)
class PartitionPlan:
    L: int
    ell: int
    groups: tuple  # tuples of pair indices, in processing order
    order: tuple  # original mini-context index of each processed group
    retained: int | None = None  # original index of the group processed last (training)

    @property
    def n(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        """Sizes in original (unshuffled) mini-context order."""
        out = [0] * self.n
        for j, g in zip(self.order, self.groups):
            out[j] = len(g)
        return out


def partition(L: int, ell: int, shuffle_seed: int | None = None) -> PartitionPlan:
    """Split ``L`` pairs into ``ceil(L / ell)`` consecutive mini-contexts.

    Without ``shuffle_seed`` the input order is kept (inference). With it,
    the order of mini-contexts is permuted and the last one is recorded as
    retained.
    """
    if isinstance(L, Sequence):
        L = len(L)
    if L < 1:
        raise ValueError("context set is empty")
    if ell < 1:
        raise ValueError(f"mini-context size must be >= 1, got {ell}")
    n = -(-L // ell)
    groups = [tuple(range(j * ell, min((j + 1) * ell, L))) for j in range(n)]
    order = list(range(n))
    retained = None
    if shuffle_seed is not None:
        order = [int(i) for i in np.random.default_rng(shuffle_seed).permutation(n)]
        retained = order[-1]
    return PartitionPlan(L, ell, tuple(groups[j] for j in order), tuple(order), retained)


def with_retained(plan: PartitionPlan, retained: int) -> PartitionPlan:
    """Same partition with mini-context ``retained`` moved to the end."""
    if not 0 <= retained < plan.n:
        raise ValueError(f"retained index {retained} outside 0..{plan.n - 1}")
    base = partition(plan.L, plan.ell)
    order = [j for j in range(plan.n) if j != retained] + [retained]
    return PartitionPlan(plan.L, plan.ell, tuple(base.groups[j] for j in order), tuple(order), retained)


@dataclass
class ContextRepresentation:
    """Running per-level mean of context decoder outputs and the pair count behind it."""
    stage_means: list = field(default_factory=list)
    w: int = 0


def stack_pairs(pairs: Sequence[ContextPair], dtype) -> Tensor:
    """``(N, 2, D, H, W)`` batch of image||label volumes."""
    imgs = np.stack([np.asarray(p.image, dtype=dtype) for p in pairs])
    labs = np.stack([np.asarray(p.label, dtype=dtype) for p in pairs])
    return net.pair_input(imgs, labs)


def mini_context_pass(pairs: Sequence[ContextPair], target_feats: net.StageFeatures,
                      params: net.ModelParams, cfg: net.NetConfig) -> list[Tensor]:
    """Uniform mean of the context decoder outputs over the pairs of one mini-context.

    The divisor is the actual number of pairs, also for a short last mini-context.
    """
    if not pairs:
        raise ValueError("mini-context is empty")
    batch = stack_pairs(pairs, net.params_dtype(params))
    dec = net.context_branch(batch, target_feats, params, cfg)
    return [T.batch_mean(d) for d in dec]


def sequential_merge(acc: ContextRepresentation, cj: list[Tensor], len_j: int) -> ContextRepresentation:
    """Fold one mini-context mean into the running mean with ``alpha = w / (w + len_j)``."""
    if len_j < 1:
        raise ValueError(f"mini-context length must be >= 1, got {len_j}")
    alpha = acc.w / (acc.w + len_j)
    if acc.w == 0:
        means = list(cj)
    else:
        means = [T.add(T.scale(old, alpha), T.scale(new, 1.0 - alpha))
                 for old, new in zip(acc.stage_means, cj)]
    return ContextRepresentation(means, acc.w + len_j)


def _accumulate(acc: ContextRepresentation, cj: list[Tensor], len_j: int, wide: bool) -> ContextRepresentation:
    # fresh buffers, detached from the mini-context's activations; f32 models accumulate in f64
    dt = np.float64 if wide else None
    cj = [T.Tensor(c.data.astype(dt or c.dtype, copy=True)) for c in cj]
    return sequential_merge(acc, cj, len_j)


def stream_context(target_feats: net.StageFeatures, S: Sequence[ContextPair], plan: PartitionPlan,
                   params: net.ModelParams, cfg: net.NetConfig, groups: Sequence | None = None,
                   meter: T.ActivationMeter | None = None,
                   on_merge: Callable | None = None) -> ContextRepresentation:
    """Graph-free streaming mean over the mini-contexts of ``plan`` (or ``groups``)."""
    dtype = net.params_dtype(params)
    wide = dtype == np.float32
    acc = ContextRepresentation()
    groups = plan.groups if groups is None else groups
    with T.no_grad():
        for g in groups:
            # the meter sees context-branch activations only; the running mean is a fixed-size buffer
            with T.track_activations(meter):
                cj = mini_context_pass([S[i] for i in g], target_feats, params, cfg)
            acc = _accumulate(acc, cj, len(g), wide)
            del cj
            if on_merge is not None:
                on_merge(acc)
    return acc


def _finalize(acc: ContextRepresentation, dtype) -> list[Tensor]:
    return [T.Tensor(m.data.astype(dtype, copy=False)) for m in acc.stage_means]


def apsp_forward(x, S: Sequence[ContextPair], ell: int, params: net.ModelParams, cfg: net.NetConfig,
                 meter: T.ActivationMeter | None = None) -> Tensor:
    """Inference: encode the target once, stream the context, decode."""
    dtype = net.params_dtype(params)
    x = x if isinstance(x, Tensor) else T.Tensor(np.asarray(x, dtype=dtype))
    plan = partition(len(S), ell)
    with T.no_grad():
        feats = net.target_encode(x, params, cfg)
        acc = stream_context(feats, S, plan, params, cfg, meter=meter)
        if acc.w != len(S):
            raise AssertionError(f"merged {acc.w} pairs, expected {len(S)}")
        return net.target_decode(feats, _finalize(acc, dtype), params, cfg)


FAULTS = ("scale_n_minus_1", "skip_length_weight", "no_scale")


def scaled_context(prefix: ContextRepresentation, c_pi: list[Tensor], len_pi: int, L: int, n: int,
                   fault: str | None = None) -> list[Tensor]:
    """Combine the graph-free prefix with the retained mini-context.

    Value: ``(w/L) * prefix + (len_pi/L) * c_pi``, the exact running mean.
    Gradient: that of ``(len_pi/L) * n * c_pi``.
    ``fault`` deliberately breaks the scaling; only self-checks use it.
    """
    factor = float(n)
    weight = len_pi / L
    if fault == "scale_n_minus_1":
        factor = float(n - 1)
    elif fault == "skip_length_weight":
        weight = 1.0
    elif fault == "no_scale":
        factor = 1.0
    elif fault is not None:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    out = []
    for s, c in enumerate(c_pi):
        # factor*c - (factor-1)*detach(c) has value c and gradient factor*dc
        boosted = T.sub(T.scale(c, factor), T.scale(T.detach(c), factor - 1.0))
        if fault == "skip_length_weight":
            term = T.add(T.scale(boosted, weight), T.scale(T.detach(c), len_pi / L - weight))
        else:
            term = T.scale(boosted, weight)
        if prefix.w:
            pm = prefix.stage_means[s]
            pm = T.Tensor(pm.data.astype(c.dtype) * c.dtype.type(prefix.w / L))
            term = T.add(pm, term)
        out.append(term)
    return out


@dataclass
class TrainForward:
    loss: Tensor
    prediction: Tensor
    plan: PartitionPlan


def apsp_train_forward(x, y, S: Sequence[ContextPair], ell: int, params: net.ModelParams,
                       cfg: net.NetConfig, loss_fn: Callable, seed: int | None = 0,
                       retained: int | None = None, fault: str | None = None,
                       meter: T.ActivationMeter | None = None) -> tuple[float, dict, TrainForward]:
    """Loss and parameter gradients with shuffled mini-contexts and a scaled retained one.

    ``retained`` pins which (original) mini-context is processed last instead
    of drawing it from ``seed``; used to enumerate the shuffle exactly.
    """
    dtype = net.params_dtype(params)
    x = x if isinstance(x, Tensor) else T.Tensor(np.asarray(x, dtype=dtype))
    y = y if isinstance(y, Tensor) else T.Tensor(np.asarray(y, dtype=dtype))
    plan = partition(len(S), ell, shuffle_seed=seed if seed is not None else 0)
    if retained is not None:
        plan = with_retained(plan, retained)
    L, n = plan.L, plan.n
    feats = net.target_encode(x, params, cfg)
    prefix = stream_context(feats.detached(), S, plan, params, cfg, groups=plan.groups[:-1], meter=meter)
    last = plan.groups[-1]
    with T.track_activations(meter):
        c_pi = mini_context_pass([S[i] for i in last], feats, params, cfg)
        cbar = scaled_context(prefix, c_pi, len(last), L, n, fault=fault)
    pred = net.target_decode(feats, cbar, params, cfg)
    loss = loss_fn(pred, y)
    grads = T.backward(loss, params.values())
    return float(loss.data), grads, TrainForward(loss, pred, plan)
