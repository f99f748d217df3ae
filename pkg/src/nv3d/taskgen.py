"""Synthetic volumes, degradations and in-context episodes.

Everything here is a pure function of its inputs and an integer seed. Volumes
are ``(1, D, H, W)`` float64 arrays in ``[0, 1]``; masks hold ``{0, 1}``.
Degradations return ``(corrupted, ground_truth)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import ndimage

from .apsp import ContextPair
from .losses import DEFAULT_RATES, SEGMENTATION, TASK_KINDS

SALT_PEPPER_P = 0.04
GAUSSIAN_SIGMA_RANGE = (0.15, 0.25)
MASK_FRACTION_RANGE = (0.05, 0.3)
INTENSITY_RANGE = (0.15, 1.0)
OVERLAY_P = 0.05
LABEL_AUG_P = 0.05
SPATIAL_AUG_P = 0.05
RANDOM_FOREGROUND_P = 0.5
MAX_FOREGROUND_CLASSES = 10
OVERLAY_KINDS = ("bias_correction", "gaussian_denoise", "salt_pepper_denoise", "inpainting", "super_resolution")


def _rng(seed, *tags) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags])


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {', '.join(TASK_KINDS)}")


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    labels: np.ndarray  # int, 0 = background, 1..K foreground classes


# ---------------------------------------------------------------- noise fields

def value_noise(side: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth noise: a random ``cells**3`` lattice upsampled with cubic splines."""
    grid = rng.standard_normal((cells + 1,) * 3)
    f = ndimage.zoom(grid, side / (cells + 1), order=3, mode="nearest", grid_mode=True)
    return f[:side, :side, :side]


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_noise(side: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """3D gradient-lattice (Perlin) noise with random unit gradients."""
    g = rng.standard_normal((cells + 1, cells + 1, cells + 1, 3))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    coords = (np.arange(side) + 0.5) * cells / side
    i0 = np.floor(coords).astype(int)
    f = coords - i0
    I, J, K = np.meshgrid(i0, i0, i0, indexing="ij")
    U, V, W = np.meshgrid(f, f, f, indexing="ij")
    out = np.zeros((side,) * 3)
    for di in (0, 1):
        wu = _fade(U) if di else 1 - _fade(U)
        for dj in (0, 1):
            wv = _fade(V) if dj else 1 - _fade(V)
            for dk in (0, 1):
                ww = _fade(W) if dk else 1 - _fade(W)
                grad = g[I + di, J + dj, K + dk]
                dot = grad[..., 0] * (U - di) + grad[..., 1] * (V - dj) + grad[..., 2] * (W - dk)
                out += wu * wv * ww * dot
    return out


# ---------------------------------------------------------------- phantoms

def class_intensities(K: int, seed: int) -> np.ndarray:
    """Per-class mean intensities of a phantom family, index 0 = background.

    One level per equal-width bin of ``INTENSITY_RANGE``, jittered inside the
    middle half of its bin, so any two classes differ by at least half a bin.
    """
    rng = _rng(seed, 11)
    lo, hi = INTENSITY_RANGE
    width = (hi - lo) / K
    levels = lo + width * (np.arange(K) + 0.25 + 0.5 * rng.random(K))
    return np.concatenate([[0.0], rng.permutation(levels)])


def synth_phantom(side: int, K: int, seed: int, intensities: np.ndarray | None = None) -> Phantom:
    """Blob-shaped labelled volume with ``K`` foreground classes.

    A noisy ellipsoid defines the foreground; inside it the class with the
    largest of ``K`` smooth noise fields wins.
    """
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    if not 1 <= K <= 10:
        raise ValueError(f"K must be in 1..10, got {K}")
    rng = _rng(seed, 1)
    if intensities is None:
        intensities = class_intensities(K, seed)
    c = (np.arange(side) + 0.5) / side - 0.5
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    centre = rng.uniform(-0.06, 0.06, size=3)
    radii = rng.uniform(0.28, 0.42, size=3)
    r = np.sqrt(((Z - centre[0]) / radii[0]) ** 2 + ((Y - centre[1]) / radii[1]) ** 2
                + ((X - centre[2]) / radii[2]) ** 2)
    shape_noise = value_noise(side, 3, rng)
    fg = r + 0.12 * shape_noise < 1.0
    if not fg.any():
        fg[side // 2, side // 2, side // 2] = True
    labels = np.zeros((side,) * 3, dtype=np.int64)
    if K == 1:
        labels[fg] = 1
    else:
        fields = np.stack([value_noise(side, 2, rng) for _ in range(K)])
        labels[fg] = 1 + np.argmax(fields, axis=0)[fg]
    image = intensities[labels].astype(np.float64)
    texture = 0.04 * value_noise(side, 4, rng)
    image = np.where(labels > 0, image + texture, 0.0)
    image = ndimage.gaussian_filter(image, 0.6)
    image = np.clip(image, 0.0, 1.0)
    return Phantom(image[None], labels[None])


def random_foreground(labels: np.ndarray, seed: int, k: int | None = None) -> np.ndarray:
    """Binary union of ``k`` distinct randomly chosen foreground classes.

    ``k`` defaults to a uniform draw from ``1..min(K, 10)``.
    """
    classes = np.unique(labels)
    classes = classes[classes > 0]
    if classes.size == 0:
        raise ValueError("labels contain no foreground class")
    chosen = choose_classes(classes, seed, k)
    return np.isin(labels, chosen).astype(np.float64)


def choose_classes(classes, seed: int, k: int | None = None) -> np.ndarray:
    classes = np.asarray(sorted(int(c) for c in classes))
    rng = _rng(seed, 2)
    cap = min(classes.size, MAX_FOREGROUND_CLASSES)
    if k is None:
        k = int(rng.integers(1, cap + 1))
    k = max(1, min(k, cap))
    return np.sort(rng.choice(classes, size=k, replace=False))


# ---------------------------------------------------------------- degradations

def legendre_field(side: int, degree: int, coeffs: np.ndarray) -> np.ndarray:
    """``sum a_ijk P_i(u) P_j(v) P_k(w)`` on voxel centres mapped to ``[-1, 1]``."""
    u = np.linspace(-1.0, 1.0, side)
    U, V, W = np.meshgrid(u, u, u, indexing="ij")
    return legendre.legval3d(U, V, W, coeffs)


def bias_coefficients(degree: int, coeff_scale: float, seed: int) -> np.ndarray:
    rng = _rng(seed, 3)
    c = rng.uniform(-coeff_scale, coeff_scale, size=(degree + 1,) * 3) if coeff_scale > 0 \
        else np.zeros((degree + 1,) * 3)
    i, j, k = np.indices(c.shape)
    c[i + j + k > degree] = 0.0
    c[0, 0, 0] = 0.0
    return c


def apply_bias_field(x: np.ndarray, degree: int = 3, coeff_scale: float = 0.5, seed: int = 0):
    """Multiply by ``exp(B)`` for a random low-order Legendre expansion ``B``."""
    if not 2 <= degree <= 4:
        raise ValueError(f"degree must be in 2..4, got {degree}")
    if coeff_scale < 0:
        raise ValueError("coeff_scale must be non-negative")
    if coeff_scale == 0:
        return x.copy(), x
    field_ = np.exp(legendre_field(x.shape[-1], degree, bias_coefficients(degree, coeff_scale, seed)))
    return np.clip(x * field_, 0.0, 1.0), x


def gaussian_sigma(seed: int) -> float:
    return float(_rng(seed, 4).uniform(*GAUSSIAN_SIGMA_RANGE))


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Unclamped additive noise used by :func:`add_gaussian_noise`."""
    return _rng(seed, 5).normal(0.0, gaussian_sigma(seed), size=shape)


def add_gaussian_noise(x: np.ndarray, seed: int = 0):
    return np.clip(x + gaussian_noise(x.shape, seed), 0.0, 1.0), x


def add_salt_pepper(x: np.ndarray, seed: int = 0, p: float = SALT_PEPPER_P):
    """Salt (value 1) then pepper (value 0), each voxel independently with ``p``."""
    rng = _rng(seed, 6)
    salt = rng.random(x.shape) < p
    pepper = rng.random(x.shape) < p
    out = x.copy()
    out[salt] = 1.0
    out[pepper & ~salt] = 0.0
    return out, x


def perlin_mask(side: int, threshold: float, seed: int, tries: int = 16) -> np.ndarray:
    """Boolean occlusion mask ``noise > threshold`` with its fraction kept in range."""
    lo, hi = MASK_FRACTION_RANGE
    noise = None
    for attempt in range(tries):
        noise = perlin_noise(side, 3, _rng(seed, 7, attempt))
        mask = noise > threshold
        if lo <= mask.mean() <= hi:
            return mask
    target = _rng(seed, 8).uniform(lo + 0.02, hi - 0.02)
    return noise > np.quantile(noise, 1.0 - target)


def perlin_occlude(x: np.ndarray, threshold: float = 0.25, seed: int = 0):
    mask = perlin_mask(x.shape[-1], threshold, seed)
    return x * (1.0 - mask[None]), x


def downsample_task(x: np.ndarray):
    """2x mean-pool then nearest upsample back to the original grid."""
    if any(s % 2 for s in x.shape[-3:]):
        raise ValueError(f"super-resolution needs even sides, got {x.shape[-3:]}")
    c, d, h, w = x.shape
    pooled = x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6))
    return pooled.repeat(2, 1).repeat(2, 2).repeat(2, 3), x


def central_slab(x: np.ndarray):
    """Keep the three axial slices centred at depth // 2, zero the rest."""
    d = x.shape[-3]
    if d < 3:
        raise ValueError(f"depth must be >= 3, got {d}")
    mid = d // 2
    out = np.zeros_like(x)
    out[..., mid - 1:mid + 2, :, :] = x[..., mid - 1:mid + 2, :, :]
    return out, x


def _leaky(v):
    return np.where(v >= 0, v, 0.2 * v)


def remap_weights(seed: int, hidden: int = 4) -> tuple:
    rng = _rng(seed, 9)
    return (rng.normal(0, 1, size=(hidden, 1)), rng.normal(0, 0.5, size=hidden),
            rng.normal(0, 1, size=(1, hidden)), rng.normal(0, 0.5, size=1))


def contrast_remap(x: np.ndarray, seed: int = 0, weights: tuple | None = None):
    """Random two-layer 1x1x1 network on intensities, rescaled to ``[0, 1]``.

    Returns ``(x, remapped)``: the input is unchanged and the remapped volume
    is the target.
    """
    w1, b1, w2, b2 = weights if weights is not None else remap_weights(seed)
    w1, b1, w2, b2 = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (w1, b1, w2, b2))
    v = x.reshape(1, -1)
    h = _leaky(w1.reshape(-1, 1) @ v + b1.reshape(-1, 1))
    y = (w2.reshape(1, -1) @ h + b2.reshape(-1, 1)).reshape(x.shape)
    lo, hi = y.min(), y.max()
    y = (y - lo) / (hi - lo) if hi > lo else np.zeros_like(y)
    return x, y


def skull_strip(image: np.ndarray, labels: np.ndarray):
    """Input is the full image; target keeps only the most voluminous class."""
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    keep = int(np.argmax(counts))
    return image, image * (labels == keep)


# ---------------------------------------------------------------- label augmentation

_SIX = ndimage.generate_binary_structure(3, 1)


def _require_binary(mask: np.ndarray) -> None:
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")


def augment_label(mask: np.ndarray, mode: str, seed: int = 0) -> np.ndarray:
    """Sobel edge magnitude, inversion, or one-voxel 6-connected dilation/erosion."""
    vol = mask[0] if mask.ndim == 4 else mask
    if mode == "sobel":
        mag = np.sqrt(sum(ndimage.sobel(vol.astype(np.float64), axis=a, mode="nearest") ** 2 for a in range(3)))
        top = mag.max()
        out = mag / top if top > 0 else mag
    elif mode in ("invert", "dilate1", "erode1"):
        _require_binary(vol)
        if mode == "invert":
            out = 1.0 - vol
        elif mode == "dilate1":
            out = ndimage.binary_dilation(vol > 0.5, structure=_SIX).astype(np.float64)
        else:
            out = ndimage.binary_erosion(vol > 0.5, structure=_SIX).astype(np.float64)
    else:
        raise ValueError(f"unknown label augmentation {mode!r}")
    return out[None] if mask.ndim == 4 else out


# ---------------------------------------------------------------- preprocessing

def preprocess(x: np.ndarray) -> np.ndarray:
    """Map the 2nd..98th intensity percentiles to ``[0, 1]`` and clamp."""
    lo, hi = np.percentile(x, [2.0, 98.0])
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float64)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def binarize(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0).astype(np.float64)


# ---------------------------------------------------------------- episodes

def sample_task(rng: np.random.Generator, rates: dict | None = None) -> str:
    """Draw a task kind proportionally to its sampling rate."""
    rates = rates or DEFAULT_RATES
    kinds = list(rates)
    p = np.array([rates[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=p / p.sum()))]


def _degrade(kind: str, img: np.ndarray, params: dict, seed: int) -> np.ndarray:
    if kind == "bias_correction":
        return apply_bias_field(img, params["degree"], params["coeff_scale"], seed)[0]
    if kind == "gaussian_denoise":
        return add_gaussian_noise(img, seed)[0]
    if kind == "salt_pepper_denoise":
        return add_salt_pepper(img, seed)[0]
    if kind == "inpainting":
        return perlin_occlude(img, params["threshold"], seed)[0]
    if kind == "super_resolution":
        return downsample_task(img)[0]
    if kind == "two_d_to_three_d":
        return central_slab(img)[0]
    raise ValueError(kind)


def default_params(kind: str, rng: np.random.Generator) -> dict:
    """Episode-level parameterization shared by every pair of the episode."""
    if kind == "bias_correction":
        return {"degree": int(rng.integers(2, 5)), "coeff_scale": 0.5}
    if kind == "inpainting":
        return {"threshold": float(rng.uniform(0.15, 0.35))}
    return {}


def _spatial_augment(vols: list, rng: np.random.Generator) -> list:
    if rng.random() < SPATIAL_AUG_P:
        ax = int(rng.integers(1, 4))
        vols = [np.flip(v, axis=ax) for v in vols]
    if rng.random() < SPATIAL_AUG_P:
        axes = [(1, 2), (1, 3), (2, 3)][int(rng.integers(0, 3))]
        k = int(rng.integers(1, 4))
        vols = [np.rot90(v, k=k, axes=axes) for v in vols]
    return [np.ascontiguousarray(v) for v in vols]


def sample_episode(task: TaskSpec | str, L: int, seed: int, side: int = 16,
                   augment: bool = True) -> tuple[ContextPair, list[ContextPair]]:
    """One target pair and ``L`` context pairs from a single synthetic dataset.

    All ``L + 1`` pairs share the phantom family (class count and contrast),
    the task and its parameterization, task overlays and label augmentation.
    """
    if L < 1:
        raise ValueError(f"context size must be >= 1, got {L}")
    if isinstance(task, str):
        task = TaskSpec(task, seed=seed)
    kind = task.kind
    rng = _rng(seed, 20)
    K = int(rng.integers(1, 6))
    family = int(rng.integers(0, 2 ** 62))
    intensities = class_intensities(K, family)
    params = dict(default_params(kind, rng), **task.params)
    remap_seed = int(rng.integers(0, 2 ** 62))
    overlays = [o for o in OVERLAY_KINDS if augment and rng.random() < OVERLAY_P and o != kind]
    overlay_params = {o: default_params(o, rng) for o in overlays}
    label_aug = None
    if augment and kind == SEGMENTATION:
        for mode in ("sobel", "invert", "dilate1", "erode1"):
            if rng.random() < LABEL_AUG_P:
                label_aug = mode
                break
    fg_seed = int(rng.integers(0, 2 ** 62))
    classes = choose_classes(range(1, K + 1), fg_seed,
                             None if rng.random() < RANDOM_FOREGROUND_P else 1)
    target_slot = int(rng.integers(0, L + 1))

    pairs = []
    for i in range(L + 1):
        pseed = int(rng.integers(0, 2 ** 62))
        ph = synth_phantom(side, K, pseed, intensities)
        img = preprocess(ph.image)
        if kind == SEGMENTATION:
            inp, out = img, np.isin(ph.labels, classes).astype(np.float64)
            if label_aug is not None:
                out = augment_label(out, label_aug)
        elif kind == "contrast_remap":
            inp, out = contrast_remap(img, remap_seed)
        elif kind == "skull_strip":
            inp, out = skull_strip(img, ph.labels)
        else:
            inp, out = _degrade(kind, img, params, pseed), img
        for j, o in enumerate(overlays):
            inp = _degrade(o, inp, overlay_params[o], pseed + 1 + j)
        if augment:
            inp, out = _spatial_augment([inp, out], _rng(pseed, 21))
        pairs.append(ContextPair(inp.astype(np.float64), out.astype(np.float64)))
    target = pairs.pop(target_slot)
    return target, pairs
