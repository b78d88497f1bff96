"""Spectrogram augmentation module producing the two training views.

Every block works on a single normalized log-mel array of shape ``[F, T]``
and draws all randomness from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractViolation

BLOCKS = ("mixup", "gaussian", "rrc", "rlf")
POST_NORM_EPS = 1e-8


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractViolation(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RRCConfig:
    freq_range: tuple = (0.6, 1.5)
    time_range: tuple = (0.6, 1.5)
    virtual_time_scale: float = 1.5

    def __post_init__(self):
        f1, f2 = self.freq_range
        t1, t2 = self.time_range
        if not (0 < f1 <= f2 and 0 < t1 <= t2):
            raise ContractViolation(f"bad crop ranges {self.freq_range}, {self.time_range}")
        if self.virtual_time_scale < 1:
            raise ContractViolation("virtual_time_scale must be >= 1")


@dataclass(frozen=True)
class AugmentConfig:
    blocks: tuple = ("mixup", "rrc", "rlf")
    mixup_alpha: float = 0.2
    queue_size: int = 2048
    noise_std: float = 0.4
    rrc: RRCConfig = field(default_factory=RRCConfig)

    def __post_init__(self):
        unknown = [b for b in self.blocks if b not in BLOCKS]
        if unknown:
            raise ContractViolation(f"unknown augmentation blocks {unknown}; choose from {BLOCKS}")


def parse_chain(text: str) -> tuple:
    """``"mixup,rrc,rlf"`` -> ``("mixup", "rrc", "rlf")``; ``"none"`` -> ``()``."""
    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    chain = tuple(part.strip() for part in text.split(","))
    unknown = [b for b in chain if b not in BLOCKS]
    if unknown:
        raise ContractViolation(f"unknown augmentation blocks {unknown}; choose from {BLOCKS}")
    return chain


class MixupQueue:
    """FIFO of past normalized inputs used as mixing counterparts."""

    def __init__(self, capacity: int = 2048, alpha: float = 0.2):
        self.capacity = capacity
        self.alpha = alpha
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, x: np.ndarray) -> None:
        if self._items and self._items[0].shape != x.shape:
            raise ContractViolation(
                f"queue holds {self._items[0].shape} entries, got {x.shape}")
        self._items.append(np.array(x, copy=True))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self._items[int(rng.integers(len(self._items)))]


def pre_norm(x: np.ndarray, stats: NormStats) -> np.ndarray:
    if not stats.sigma > 0:
        raise ContractViolation("sigma must be positive")
    return (np.asarray(x, dtype=np.float64) - stats.mu) / stats.sigma


def log_mixup_exp(xi: np.ndarray, xk: np.ndarray, lam: float) -> np.ndarray:
    """``log((1 - lam) * exp(xi) + lam * exp(xk))`` evaluated stably."""
    xi, xk = np.asarray(xi, dtype=np.float64), np.asarray(xk, dtype=np.float64)
    if xi.shape != xk.shape:
        raise ContractViolation(f"shape mismatch {xi.shape} vs {xk.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"mixing ratio {lam} outside [0, 1]")
    if lam == 0.0:
        return xi.copy()
    if lam == 1.0:
        return xk.copy()
    out = np.logaddexp(np.log1p(-lam) + xi, np.log(lam) + xk)
    # Rounding can leave the result an ulp outside [min, max]; clamp to the hull.
    return np.clip(out, np.minimum(xi, xk), np.maximum(xi, xk))


def mixup(x: np.ndarray, queue: MixupQueue, rng: np.random.Generator,
          lam: float | None = None, push: bool = True) -> np.ndarray:
    """Mix ``x`` with a random queued sample at ratio ``U(0, alpha)``, then enqueue ``x``.

    An empty queue returns ``x`` unchanged.
    """
    if len(queue) == 0:
        out = np.array(x, dtype=np.float64, copy=True)
    else:
        counterpart = queue.sample(rng)
        if lam is None:
            lam = rng.uniform(0.0, queue.alpha) if queue.alpha > 0 else 0.0
        out = log_mixup_exp(x, counterpart, lam)
    if push:
        queue.push(x)
    return out


def gaussian_noise_mix(x: np.ndarray, rng: np.random.Generator, alpha: float = 0.2,
                       noise_std: float = 0.4, lam: float | None = None) -> np.ndarray:
    """Log-mixup-exp with i.i.d. normal noise instead of a queued sample."""
    noise = rng.normal(0.0, noise_std, size=np.shape(x)) if noise_std > 0 else np.zeros(np.shape(x))
    if lam is None:
        lam = rng.uniform(0.0, alpha) if alpha > 0 else 0.0
    return log_mixup_exp(x, noise, lam)


def crop_size(draw: float, n: int, clamp: bool) -> int:
    """``floor(min(draw, 1) * n)`` when clamped, else ``floor(draw * n)``."""
    scale = min(draw, 1.0) if clamp else draw
    return int(np.floor(scale * n))


def cubic_kernel(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    out = np.zeros_like(s)
    near = s <= 1
    far = (s > 1) & (s < 2)
    out[near] = (a + 2) * s[near] ** 3 - (a + 3) * s[near] ** 2 + 1
    out[far] = a * s[far] ** 3 - 5 * a * s[far] ** 2 + 8 * a * s[far] - 4 * a
    return out


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix, half-pixel centres, edge-clamped taps."""
    dst = np.arange(n_out)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    for offset in range(-1, 3):
        weight = cubic_kernel(frac - offset)
        idx = np.clip(base + offset, 0, n_in - 1)
        np.add.at(mat, (dst, idx), weight)
    return mat


def bicubic_resize(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Separable Catmull-Rom resize of a 2-D array."""
    rows = bicubic_matrix(x.shape[0], shape[0])
    cols = bicubic_matrix(x.shape[1], shape[1])
    return rows @ x @ cols.T


def resize_crop(x: np.ndarray, top: int, left: int, height: int, width: int,
                virtual_width: int) -> np.ndarray:
    """Crop ``[height, width]`` at ``(top, left)`` of the zero-extended virtual
    boundary (input centred in ``virtual_width`` frames) and resize back to ``x.shape``."""
    F, T = x.shape
    canvas = np.zeros((F, virtual_width))
    offset = (virtual_width - T) // 2
    canvas[:, offset:offset + T] = x
    crop = canvas[top:top + height, left:left + width]
    return bicubic_resize(crop, (F, T))


def random_resize_crop(x: np.ndarray, cfg: RRCConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"expected [F, T] spectrogram, got {x.shape}")
    F, T = x.shape
    virtual_width = int(np.floor(T * cfg.virtual_time_scale))
    fc = crop_size(rng.uniform(*cfg.freq_range), F, clamp=True)
    tc = crop_size(rng.uniform(*cfg.time_range), T, clamp=False)
    fc = min(max(fc, 1), F)
    tc = min(max(tc, 1), virtual_width)
    top = int(rng.integers(0, F - fc + 1))
    left = int(rng.integers(0, virtual_width - tc + 1))
    return resize_crop(x, top, left, fc, tc, virtual_width)


def fader_gain(a: float, b: float, n_frames: int) -> np.ndarray:
    """Per-frame gain ``a + (b - a) * t / T`` for ``t = 0 .. T-1``."""
    return a + (b - a) * np.arange(n_frames) / n_frames


def linear_fader(x: np.ndarray, a: float, b: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + fader_gain(a, b, x.shape[1])[None, :]


def random_linear_fader(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a, b = rng.uniform(-1.0, 1.0, size=2)
    return linear_fader(x, a, b)


def post_norm(batch: np.ndarray, stats: NormStats | None = None) -> np.ndarray:
    """Standardize with the batch's own mean/std (or fixed ``stats``)."""
    batch = np.asarray(batch, dtype=np.float64)
    if stats is not None:
        return (batch - stats.mu) / stats.sigma
    mean = batch.mean()
    std = batch.std()
    return (batch - mean) / (std + POST_NORM_EPS if std == 0 else std)


def apply_blocks(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                 queue: MixupQueue | None = None) -> np.ndarray:
    """Run the configured block chain on one pre-normalized spectrogram.

    Mixup only reads the queue here; the caller enqueues the input once.
    """
    out = np.asarray(x, dtype=np.float64)
    for block in cfg.blocks:
        if block == "mixup":
            if queue is None:
                raise ContractViolation("mixup block requires a MixupQueue")
            out = mixup(out, queue, rng, push=False)
        elif block == "gaussian":
            out = gaussian_noise_mix(out, rng, cfg.mixup_alpha, cfg.noise_std)
        elif block == "rrc":
            out = random_resize_crop(out, cfg.rrc, rng)
        elif block == "rlf":
            out = random_linear_fader(out, rng)
    return out


@dataclass
class ViewPair:
    v: np.ndarray
    v_prime: np.ndarray


def branch_rngs(rng: np.random.Generator) -> tuple:
    """Two independent child streams, one per view branch."""
    a, b = rng.spawn(2)
    return a, b


def make_view_batch(xs: Sequence[np.ndarray], cfg: AugmentConfig, stats: NormStats,
                    rngs: tuple, queue: MixupQueue | None = None) -> ViewPair:
    """Augment a batch twice (one RNG stream per branch) and Post-Norm each view batch.

    Returns arrays of shape ``[B, F, T]``. Every input is pushed to the queue
    after both branches have drawn their counterparts.
    """
    rng_a, rng_b = rngs
    vs, vps = [], []
    for x in xs:
        x = pre_norm(x, stats)
        vs.append(apply_blocks(x, cfg, rng_a, queue))
        vps.append(apply_blocks(x, cfg, rng_b, queue))
        if queue is not None and "mixup" in cfg.blocks:
            queue.push(x)
    return ViewPair(post_norm(np.stack(vs)), post_norm(np.stack(vps)))


def make_views(x: np.ndarray, cfg: AugmentConfig, stats: NormStats, rngs: tuple,
               queue: MixupQueue | None = None) -> ViewPair:
    """Two augmented, post-normalized views ``[F, T]`` of a single spectrogram."""
    pair = make_view_batch([x], cfg, stats, rngs, queue)
    return ViewPair(pair.v[0], pair.v_prime[0])


def augment_chain(batch: np.ndarray, chain: str, seed: int, stats: NormStats,
                  cfg: AugmentConfig = AugmentConfig()) -> ViewPair:
    """Both views of ``batch`` ``[B, F, T]`` under the block chain ``chain``.

    A fresh queue and ``default_rng(seed)`` are used, so the result depends
    only on the arguments.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3:
        raise ContractViolation(f"augment expects [F, T] or [B, F, T], got {batch.shape}")
    cfg = replace(cfg, blocks=parse_chain(chain))
    queue = MixupQueue(cfg.queue_size, cfg.mixup_alpha)
    return make_view_batch(list(batch), cfg, stats, branch_rngs(np.random.default_rng(seed)), queue)
