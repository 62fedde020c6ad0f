"""Stochastic image augmentation: strong (student) and weak (teacher) policies.

Images are (C, H, W) float arrays in [0, 1]; batches are (N, C, H, W).
Each image in a batch gets its own random stream derived from the batch key
and the image index, so results are independent of any future
parallelization and of batch order.

Stage order is crop -> flip -> jitter -> grayscale -> blur. Stages with
probability zero are skipped entirely, so a policy's output depends only on
the draws of its enabled stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .rng import RngKey

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float]
    out_size: tuple[int, int]
    p_flip: float
    p_jitter: float
    p_gray: float
    p_blur: float
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ParameterError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("p_flip", "p_jitter", "p_gray", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name}={p} outside [0, 1]")


def strong_policy(out_size: tuple[int, int]) -> AugmentPolicy:
    return AugmentPolicy(crop_scale=(0.2, 1.0), out_size=out_size,
                         p_flip=0.5, p_jitter=0.8, p_gray=0.2, p_blur=0.5)


def weak_policy(out_size: tuple[int, int]) -> AugmentPolicy:
    return AugmentPolicy(crop_scale=(0.2, 1.0), out_size=out_size,
                         p_flip=0.9, p_jitter=0.0, p_gray=0.0, p_blur=0.0)


# ---------------------------------------------------------------------------
# Geometry


def resize_bilinear(img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of (C, H, W) to out_size, half-pixel convention."""
    c, h, w = img.shape
    oh, ow = out_size
    if (h, w) == (oh, ow):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)[None, :]
    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(img: np.ndarray, scale: tuple[float, float],
                        ratio: tuple[float, float], out_size: tuple[int, int],
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random area/aspect region and resize; center-crop fallback."""
    c, h, w = img.shape
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    ch = cw = None
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(log_lo, log_hi))
        cw_try = int(round(math.sqrt(target * ar)))
        ch_try = int(round(math.sqrt(target / ar)))
        if 0 < cw_try <= w and 0 < ch_try <= h:
            ch, cw = ch_try, cw_try
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    if ch is None:
        # Clamp aspect to the allowed band, then take the centered region.
        in_ratio = w / h
        if in_ratio < ratio[0]:
            cw, ch = w, min(h, int(round(w / ratio[0])))
        elif in_ratio > ratio[1]:
            ch, cw = h, min(w, int(round(h * ratio[1])))
        else:
            ch, cw = h, w
        top = (h - ch) // 2
        left = (w - cw) // 2
    crop = img[:, top:top + ch, left:left + cw]
    return resize_bilinear(crop, out_size)


def horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"flip probability {p} outside [0, 1]")
    if p > 0 and rng.uniform() < p:
        return img[:, :, ::-1].copy()
    return img


# ---------------------------------------------------------------------------
# Photometric ops


def _to_gray(img: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * img[0] + g * img[1] + b * img[2]


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    v = maxc
    rangec = maxc - minc
    s = np.where(maxc > 0, rangec / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(rangec > 0, rangec, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(rangec > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(img: np.ndarray, p: float,
                 strengths: tuple[float, float, float, float],
                 rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation/hue perturbation in random order."""
    if p <= 0:
        return img
    if rng.uniform() >= p:
        return img
    brightness, contrast, saturation, hue = strengths
    out = img
    for op in rng.permutation(4):
        if op == 0 and brightness > 0:
            f = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
            out = np.clip(out * f, 0.0, 1.0)
        elif op == 1 and contrast > 0:
            f = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
            mean = _to_gray(out).mean()
            out = np.clip(f * out + (1 - f) * mean, 0.0, 1.0)
        elif op == 2 and saturation > 0:
            f = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
            gray = _to_gray(out)[None, :, :]
            out = np.clip(f * out + (1 - f) * gray, 0.0, 1.0)
        elif op == 3 and hue > 0:
            shift = rng.uniform(-hue, hue)
            hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
            hsv[0] = (hsv[0] + shift) % 1.0
            out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(img.dtype, copy=False)


def grayscale(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p <= 0:
        return img
    if rng.uniform() >= p:
        return img
    gray = _to_gray(img)
    return np.broadcast_to(gray, img.shape).astype(img.dtype).copy()


def blur_kernel_size(width: int) -> int:
    """Largest odd integer <= max(3, width / 10)."""
    k = max(3, width // 10)
    return k if k % 2 == 1 else k - 1


def _gaussian_kernel(size: int, sigma: float, dtype) -> np.ndarray:
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(dtype)


def _convolve1d_reflect(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = kernel.size // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (half, half)
    padded = np.pad(arr, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=axis)
    return np.tensordot(windows, kernel, axes=([-1], [0])).astype(arr.dtype)


def gaussian_blur(img: np.ndarray, p: float, sigma_range: tuple[float, float],
                  rng: np.random.Generator) -> np.ndarray:
    if p <= 0:
        return img
    if rng.uniform() >= p:
        return img
    sigma = rng.uniform(sigma_range[0], sigma_range[1])
    size = blur_kernel_size(img.shape[2])
    kernel = _gaussian_kernel(size, sigma, img.dtype)
    out = _convolve1d_reflect(img, kernel, axis=1)
    out = _convolve1d_reflect(out, kernel, axis=2)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Pipeline


def augment_image(img: np.ndarray, policy: AugmentPolicy,
                  rng: np.random.Generator) -> np.ndarray:
    out = random_resized_crop(img, policy.crop_scale, policy.crop_ratio,
                              policy.out_size, rng)
    out = horizontal_flip(out, policy.p_flip, rng)
    out = color_jitter(out, policy.p_jitter, policy.jitter_strengths, rng)
    out = grayscale(out, policy.p_gray, rng)
    out = gaussian_blur(out, policy.p_blur, policy.blur_sigma, rng)
    return out


def apply_policy(batch: np.ndarray, policy: AugmentPolicy, key: RngKey) -> np.ndarray:
    """Augment every image with its own (key, index) stream."""
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ParameterError(f"expected nonempty (N,C,H,W) batch, got {batch.shape}")
    n = batch.shape[0]
    oh, ow = policy.out_size
    out = np.empty((n, batch.shape[1], oh, ow), dtype=batch.dtype)
    for i in range(n):
        out[i] = augment_image(batch[i], policy, key.child(i).generator())
    return out
