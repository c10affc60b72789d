"""Stochastic view generation: multi-crop views for representation learning
and single augmented views for predictor training.

Every function takes an explicit seed or Generator, and each sample gets its
own stream, so augmenting one sample never consumes randomness belonging to
another regardless of loader parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError

_MAX_CROP_RETRIES = 10


@dataclass(frozen=True)
class AugmentConfig:
    n_global: int = 2
    n_local: int = 4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    stage2_scale: tuple[float, float] = (0.08, 1.0)
    flip_prob: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    blur_kernel: int = 1
    local_size_ratio: float = 0.5

    def __post_init__(self):
        for lo, hi in (self.global_scale, self.local_scale, self.stage2_scale):
            if not (0.0 < lo <= hi <= 1.0):
                raise ParameterError(f"scale range ({lo}, {hi}) must sit inside (0, 1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip_prob must be in [0, 1]")
        if any(r % 90 != 0 for r in self.rotations):
            raise ParameterError("rotations must be multiples of 90 degrees")


@dataclass
class ViewSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    source_id: str
    seed: int

    def all_views(self) -> list[np.ndarray]:
        return list(self.globals) + list(self.locals)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling of a 2-D image."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def gaussian_blur(img: np.ndarray, kernel_size: int) -> np.ndarray:
    """Separable Gaussian blur; kernel size 1 is the identity by definition."""
    if kernel_size <= 1:
        return img.copy()
    if kernel_size % 2 == 0:
        raise ParameterError("blur kernel size must be odd")
    # OpenCV's sigma-from-kernel convention
    sigma = 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8
    half = kernel_size // 2
    xs = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, half, mode="reflect")
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, rows)


def _random_square_crop(img: np.ndarray, scale_range: tuple[float, float],
                        rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    base = min(h, w)
    for _ in range(_MAX_CROP_RETRIES):
        scale = rng.uniform(*scale_range)
        side = int(round(np.sqrt(scale) * base))
        if side >= 1:
            top = rng.integers(0, h - side + 1)
            left = rng.integers(0, w - side + 1)
            return img[top:top + side, left:left + side]
    raise ParameterError(f"could not draw a non-degenerate crop from {scale_range}")


def _flip_rotate(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    if rng.random() < cfg.flip_prob:
        img = img[::-1, :]
    turns = int(rng.choice(len(cfg.rotations)))
    return np.rot90(img, cfg.rotations[turns] // 90).copy()


def _one_view(img: np.ndarray, scale_range: tuple[float, float], out_size: int,
              cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    crop = _random_square_crop(img, scale_range, rng)
    view = bilinear_resize(crop, out_size, out_size)
    view = _flip_rotate(view, cfg, rng)
    return gaussian_blur(view, cfg.blur_kernel)


def make_views(image: np.ndarray, cfg: AugmentConfig, out_size: int,
               seed: int | np.random.SeedSequence, source_id: str = "") -> ViewSet:
    """n_global large-scale crops plus n_local small-scale half-resolution crops."""
    rng = np.random.default_rng(seed)
    local_size = max(1, int(out_size * cfg.local_size_ratio))
    globals_ = [_one_view(image, cfg.global_scale, out_size, cfg, rng)
                for _ in range(cfg.n_global)]
    locals_ = [_one_view(image, cfg.local_scale, local_size, cfg, rng)
               for _ in range(cfg.n_local)]
    marker = seed if isinstance(seed, int) else -1
    return ViewSet(globals=globals_, locals=locals_, source_id=source_id, seed=marker)


def stage2_augment(image: np.ndarray, out_size: int,
                   seed: int | np.random.SeedSequence,
                   cfg: AugmentConfig | None = None) -> np.ndarray:
    """One augmented view at the encoder input resolution."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    return _one_view(image, cfg.stage2_scale, out_size, cfg, rng)


def per_sample_seed(base_seed: int, epoch: int, sample_index: int) -> np.random.SeedSequence:
    """Independent stream per (run, epoch, sample); safe for parallel loaders."""
    return np.random.SeedSequence(entropy=(base_seed, epoch, sample_index))
