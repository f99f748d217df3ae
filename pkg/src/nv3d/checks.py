"""Self-checks run by ``nv3d check`` and by the acceptance tests.

Every check returns a :class:`CheckResult`; none of them raise on a failed
property, so a report can list every property by name.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import apsp, losses, net
from . import tensor as T
from .apsp import ContextPair

DESK = net.NetConfig(stages=3, base_channels=8, side=16)
SMALL = net.NetConfig(stages=2, base_channels=2, side=8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3g} vs bound {self.bound:.3g}{extra} [{self.seconds:.1f}s]"


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


def rel_err(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Frobenius norm; 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_params(cfg: net.NetConfig, seed: int, dtype=np.float64) -> dict:
    """Initialized weights with small random biases so every path carries signal."""
    rng = np.random.default_rng([seed, 5])
    params = net.init_params(cfg, seed, dtype)
    return {k: (T.parameter(rng.normal(0, 0.05, size=p.shape).astype(dtype), k) if k.endswith(".b") else p)
            for k, p in params.items()}


def random_episode(cfg: net.NetConfig, L: int, seed: int):
    rng = np.random.default_rng([seed, 6])
    shape = (1,) + (cfg.side,) * 3
    x = rng.random(shape)
    S = [ContextPair(rng.random(shape), (rng.random(shape) > 0.6).astype(np.float64)) for _ in range(L)]
    y = (rng.random(shape) > 0.6).astype(np.float64)
    return x, S, y


def _diff(a: np.ndarray, b: np.ndarray, dtype) -> float:
    if dtype == np.float64:
        return float(np.max(np.abs(a - b)))
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def _bound(dtype) -> float:
    return 1e-10 if dtype == np.float64 else 1e-4


# ---------------------------------------------------------------- invariants

def partition_invariance(cfg=DESK, seeds=20, L=8, ells=(1, 2, 3, 4, 8), dtype=np.float64) -> CheckResult:
    def run():
        worst = 0.0
        for seed in range(seeds):
            params = random_params(cfg, seed, dtype)
            x, S, _ = random_episode(cfg, L, seed)
            outs = [apsp.apsp_forward(x, S, ell, params, cfg).data for ell in ells]
            worst = max(worst, max(_diff(o, outs[0], dtype) for o in outs[1:]))
        b = _bound(dtype)
        return CheckResult("partition_invariance", worst <= b, worst, b,
                           f"{seeds} seeds, L={L}, ell in {list(ells)}, {np.dtype(dtype).name}")
    return _timed(run)


def order_invariance(cfg=DESK, perms=20, L=8, ell=3, dtype=np.float64, seed=0) -> CheckResult:
    def run():
        params = random_params(cfg, seed, dtype)
        x, S, _ = random_episode(cfg, L, seed)
        ref = apsp.apsp_forward(x, S, ell, params, cfg).data
        rng = np.random.default_rng([seed, 7])
        worst = 0.0
        for _ in range(perms):
            perm = rng.permutation(L)
            out = apsp.apsp_forward(x, [S[i] for i in perm], ell, params, cfg).data
            worst = max(worst, _diff(out, ref, dtype))
        b = _bound(dtype)
        return CheckResult("order_invariance", worst <= b, worst, b, f"{perms} permutations, L={L}, ell={ell}")
    return _timed(run)


def brute_force_forward(x, S, params, cfg) -> np.ndarray:
    """Literal evaluation: all pair features at once, then a plain mean over the set."""
    dtype = net.params_dtype(params)
    with T.no_grad():
        feats = net.target_encode(T.Tensor(np.asarray(x, dtype=dtype)), params, cfg)
        images = np.stack([p.image for p in S]).astype(dtype)
        labels = np.stack([p.label for p in S]).astype(dtype)
        dec = net.context_branch(net.pair_input(images, labels), feats, params, cfg)
        cbar = [T.Tensor(d.data.mean(axis=0)) for d in dec]
        return net.target_decode(feats, cbar, params, cfg).data


def brute_force_oracle(cfg=SMALL, seeds=5, max_L=4, dtype=np.float64) -> CheckResult:
    def run():
        worst = 0.0
        for seed in range(seeds):
            params = random_params(cfg, seed, dtype)
            for L in range(1, max_L + 1):
                x, S, _ = random_episode(cfg, L, seed)
                ref = brute_force_forward(x, S, params, cfg)
                for ell in range(1, L + 1):
                    worst = max(worst, _diff(apsp.apsp_forward(x, S, ell, params, cfg).data, ref, dtype))
        b = _bound(dtype)
        return CheckResult("brute_force_oracle", worst <= b, worst, b, f"L<=4, {cfg.stages}-stage net")
    return _timed(run)


def context_peak_bytes(cfg, params, L: int, ell: int, seed: int = 0) -> int:
    meter = T.ActivationMeter()
    x, S, _ = random_episode(cfg, L, seed)
    apsp.apsp_forward(x, S, ell, params, cfg, meter=meter)
    return meter.peak


def memory_flat_in_L(cfg=DESK, dtype=np.float32, L_max=16) -> CheckResult:
    def run():
        params = random_params(cfg, 0, dtype)
        a = context_peak_bytes(cfg, params, 1, 1)
        b = context_peak_bytes(cfg, params, L_max, 1)
        change = abs(b - a) / a
        return CheckResult("memory_flat_in_L", change < 0.10, change, 0.10,
                           f"peak bytes at ell=1: L=1 -> {a}, L={L_max} -> {b}")
    return _timed(run)


def memory_monotone_in_ell(cfg=DESK, dtype=np.float32, L=16, ells=(1, 2, 4, 8, 16)) -> CheckResult:
    def run():
        params = random_params(cfg, 0, dtype)
        peaks = [context_peak_bytes(cfg, params, L, ell) for ell in ells]
        steps = np.diff(peaks)
        worst = float(steps.min()) if len(steps) else 0.0
        return CheckResult("memory_monotone_in_ell", bool(np.all(steps > 0)), worst, 0.0,
                           "peaks " + ", ".join(f"ell={e}:{p}" for e, p in zip(ells, peaks)))
    return _timed(run)


def encoder_runs_once(cfg=SMALL, L=5) -> CheckResult:
    def run():
        params = random_params(cfg, 0)
        x, S, _ = random_episode(cfg, L, 0)
        counts = []
        for ell in range(1, L + 1):
            before = net.ENCODER_CALLS["target"]
            apsp.apsp_forward(x, S, ell, params, cfg)
            counts.append(net.ENCODER_CALLS["target"] - before)
        worst = max(counts)
        return CheckResult("target_encoder_once", set(counts) == {1}, worst, 1, f"calls per forward {counts}")
    return _timed(run)


def loss_continuity() -> CheckResult:
    def run():
        errs = []
        for side in (1.0, -1.0):
            d = np.array([side])
            for f, slope in ((losses._cubic_value, losses._cubic_slope),):
                errs.append(abs(f(d)[0] - 1 / 3))
                errs.append(abs(f(d * (1 + 1e-15))[0] - f(d * (1 - 1e-15))[0]))
                errs.append(abs(abs(slope(d)[0]) - 1.0))
                errs.append(abs(slope(d * (1 + 1e-15))[0] - slope(d * (1 - 1e-15))[0]))
        worst = float(max(errs))
        return CheckResult("seg_loss_c1_at_one", worst <= 1e-12, worst, 1e-12, "value 1/3, slope 1 at |d|=1")
    return _timed(run)


# ---------------------------------------------------------------- gradients

def exact_shuffle_average(x, y, S, ell, params, cfg, loss_fn, fault=None) -> dict:
    """Mean gradient over every mini-context order.

    Only the retained (last) mini-context changes the gradient, and each one
    is last in the same number of orders, so the average over all orders is
    the average over the choice of retained mini-context.
    """
    n = apsp.partition(len(S), ell).n
    total = None
    for r in range(n):
        _, g, _ = apsp.apsp_train_forward(x, y, S, ell, params, cfg, loss_fn, retained=r, fault=fault)
        total = g if total is None else {k: total[k] + g[k] for k in total}
    return {k: v / n for k, v in total.items()}


def gradient_equivalence(L: int, ell: int, cfg=DESK, fault=None, seed=0, bound=1e-8) -> CheckResult:
    def run():
        params = random_params(cfg, seed, np.float64)
        x, S, y = random_episode(cfg, L, seed)
        loss_fn = lambda p, t: losses.total_loss(losses.SEGMENTATION, p, t)
        _, full, _ = apsp.apsp_train_forward(x, y, S, L, params, cfg, loss_fn)
        avg = exact_shuffle_average(x, y, S, ell, params, cfg, loss_fn, fault=fault)
        errs = {k: rel_err(avg[k], full[k]) for k in full}
        worst_name = max(errs, key=errs.get)
        worst = errs[worst_name]
        n = apsp.partition(L, ell).n
        tag = f" fault={fault}" if fault else ""
        return CheckResult(f"gradient_equivalence_n{n}", worst < bound, worst, bound,
                           f"L={L}, ell={ell}, worst parameter {worst_name}{tag}")
    return _timed(run)


def _fd(f, arr: np.ndarray, idx, h=1e-5) -> np.ndarray:
    flat = arr.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def _fd_check(name: str, build: Callable, inputs: dict, seed: int, bound: float, samples=12, h=1e-5) -> CheckResult:
    """Compare backward() against central differences at random entries of ``inputs``."""
    def run():
        rng = np.random.default_rng(seed)
        leaves = {k: T.parameter(v, k) for k, v in inputs.items()}
        out = build(leaves)
        probe = rng.normal(size=out.shape)
        loss = lambda: T.sum_all(T.mul(build(leaves), T.constant(probe))) if out.ndim else build(leaves)
        grads = T.backward(loss())
        analytic, numeric = [], []
        for k, leaf in leaves.items():
            idx = rng.choice(leaf.data.size, size=min(samples, leaf.data.size), replace=False)
            numeric.extend(_fd(lambda: float(loss().data), leaf.data, idx, h))
            analytic.extend(grads[k].reshape(-1)[idx])
        err = rel_err(analytic, numeric)
        return CheckResult(name, err < bound, err, bound, f"{len(analytic)} entries")
    return _timed(run)


def fd_checks(seed=0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 8])
    r = lambda *s: rng.normal(size=s)
    C = 2
    fusion = lambda L: net.fusion(L["c"], L["t"], {"f.w": L["w"], "f.b": L["b"]}, "f")
    block = lambda L: net.residual_block(L["x"], {"r.conv1.w": L["w1"], "r.conv1.b": L["b1"],
                                                  "r.conv2.w": L["w2"], "r.conv2.b": L["b2"]}, "r")
    cfg, params = SMALL, random_params(SMALL, seed)
    x, S, _ = random_episode(cfg, 2, seed)
    pairs = apsp.stack_pairs(S, np.float64)
    pick = sorted(params)[:: max(1, len(params) // 10)]

    def network(L):
        p = dict(params)
        p.update({k: L[k] for k in pick})
        return net.full_forward(T.constant(x), pairs, p, cfg)

    # offsets kept away from the loss kinks at 0 and |d| = 1
    d = rng.uniform(0.1, 0.9, size=(1, 4, 4, 4)) * rng.choice([-1, 1], size=(1, 4, 4, 4))
    d[:, :, ::2] += np.sign(d[:, :, ::2]) * 1.0
    target = r(1, 4, 4, 4)
    loss_case = lambda fn: (lambda L: fn(L["p"], T.constant(target)))
    return [
        _fd_check("fd_conv3d", lambda L: T.conv3d(L["x"], L["w"], L["b"]),
                  {"x": r(2, 5, 5, 5), "w": r(3, 2, 3, 3, 3), "b": r(3)}, seed, 1e-5),
        _fd_check("fd_conv3d_stride2", lambda L: T.conv3d(L["x"], L["w"], L["b"], stride=2),
                  {"x": r(2, 6, 6, 6), "w": r(3, 2, 3, 3, 3), "b": r(3)}, seed, 1e-5),
        _fd_check("fd_gelu", lambda L: T.gelu(L["x"]), {"x": r(3, 4, 4, 4) * 2}, seed, 1e-5),
        _fd_check("fd_upsample", lambda L: T.upsample_nearest2x(L["x"]), {"x": r(2, 3, 3, 3)}, seed, 1e-5),
        _fd_check("fd_fusion", fusion, {"c": r(C, 4, 4, 4), "t": r(C, 4, 4, 4),
                                        "w": r(C, 2 * C, 3, 3, 3) * 0.3, "b": r(C)}, seed, 1e-5),
        _fd_check("fd_residual_block", block, {"x": r(C, 4, 4, 4), "w1": r(C, C, 3, 3, 3) * 0.3, "b1": r(C),
                                               "w2": r(C, C, 3, 3, 3) * 0.3, "b2": r(C)}, seed, 1e-5),
        _fd_check("fd_network_2stage", network, {k: params[k].data.copy() for k in pick}, seed, 1e-5, h=1e-4),
        _fd_check("fd_seg_loss", loss_case(losses.seg_loss), {"p": target + d}, seed, 1e-6, samples=40),
        _fd_check("fd_smooth_l1", loss_case(losses.smooth_l1), {"p": target + d}, seed, 1e-6, samples=40),
        _fd_check("fd_gen_loss", loss_case(losses.gen_loss), {"p": target + 0.3 * r(1, 4, 4, 4)}, seed, 1e-6,
                  samples=40),
    ]


# ---------------------------------------------------------------- suites

SUITES = ("invariants", "gradients", "all")


def run_suite(suite: str, fault: str | None = None, quick: bool = True,
              report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run a named suite. ``quick`` trims seed counts and uses the small net for the gradient checks."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    jobs: list[Callable[[], CheckResult | list]] = []
    if suite in ("invariants", "all"):
        seeds = 3 if quick else 20
        jobs += [
            lambda: partition_invariance(seeds=seeds),
            lambda: partition_invariance(seeds=seeds, dtype=np.float32),
            lambda: order_invariance(perms=5 if quick else 20),
            lambda: brute_force_oracle(seeds=2 if quick else 5),
            lambda: memory_flat_in_L(),
            lambda: memory_monotone_in_ell(),
            lambda: encoder_runs_once(),
            lambda: loss_continuity(),
        ]
    if suite in ("gradients", "all"):
        gcfg = SMALL if quick else DESK
        jobs += [
            lambda: gradient_equivalence(4, 2, cfg=gcfg, fault=fault),
            lambda: gradient_equivalence(6, 2, cfg=gcfg, fault=fault),
            lambda: fd_checks(),
        ]
    results = []
    for job in jobs:
        out = job()
        for res in out if isinstance(out, list) else [out]:
            results.append(res)
            if report is not None:
                report(res)
    return results
