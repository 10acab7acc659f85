"""Augmentations and multi-crop views with crop geometry shared across branches.

Pipeline per image: channel-agnostic flips on the full raster, optical
subset, photometric augmentation of the optical subset, then ``n`` global and
``m`` local crops sampled once and applied identically to both branches.
Views are produced from raw (unnormalized) values, expected in roughly
[0, 1]; the trainer standardizes them afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .raster import MultispectralImage
from .resample import interp_matrix

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    crop_h: int
    crop_w: int
    flip_h: bool
    flip_v: bool
    out_size: int
    fallback: bool = False  # True when the center-crop fallback was used


@dataclass
class AugConfig:
    n: int = 2
    m: int = 10
    scale_global: tuple[float, float] = (0.4, 1.0)
    scale_local: tuple[float, float] = (0.05, 0.4)
    out_global: int = 32
    out_local: int = 16
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5  # channel-agnostic flips of the full raster, per axis
    crop_flip_p: float = 0.5  # horizontal flip recorded per crop
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5  # in raw value units; solarized value is 1 - v

    def validate(self) -> None:
        if self.n < 1 or self.m < 0:
            raise ValidationError("need n >= 1 global and m >= 0 local views")
        for name in ("flip_p", "crop_flip_p", "jitter_p", "blur_p", "solarize_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}={p} is not a probability")
        for name in ("scale_global", "scale_local"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValidationError(f"{name}={lo, hi} must satisfy 0 < lo <= hi <= 1")
        if self.out_global < 1 or self.out_local < 1:
            raise ValidationError("output sizes must be positive")
        lo, hi = self.blur_sigma
        if not 0.0 < lo <= hi:
            raise ValidationError("blur_sigma must satisfy 0 < lo <= hi")

    def without_optical(self) -> "AugConfig":
        """Copy with every photometric augmentation disabled."""
        return replace(self, jitter_p=0.0, blur_p=0.0, solarize_p=0.0)


@dataclass
class ViewSet:
    """Views of one image. Arrays are stacked per group: (n, C, g, g), (m, C, l, l), ..."""

    ms_global: np.ndarray
    ms_local: np.ndarray
    opt_global: np.ndarray
    opt_local: np.ndarray
    crop_params_global: list[CropParams] = field(default_factory=list)
    crop_params_local: list[CropParams] = field(default_factory=list)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def sample_crop(rng, source_h: int, source_w: int, scale_range, out_size: int, flip_p: float = 0.0) -> CropParams:
    """Random resized crop: area fraction uniform in ``scale_range``, log-uniform aspect in [3/4, 4/3].

    After 10 rejected attempts the crop falls back to a centered square of
    side ``min(source_h, source_w)``.
    """
    if source_h < 2 or source_w < 2:
        raise ValidationError("source must be at least 2x2")
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValidationError(f"scale range {scale_range} must lie in (0, 1]")
    area = source_h * source_w
    log_r = (math.log(3 / 4), math.log(4 / 3))
    chosen = None
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= source_w and 0 < h <= source_h:
            top = int(rng.integers(0, source_h - h + 1))
            left = int(rng.integers(0, source_w - w + 1))
            chosen = (top, left, h, w, False)
            break
    if chosen is None:
        s = min(source_h, source_w)
        chosen = ((source_h - s) // 2, (source_w - s) // 2, s, s, True)
    flip_h = bool(rng.random() < flip_p)
    top, left, h, w, fb = chosen
    return CropParams(top, left, h, w, flip_h, False, out_size, fb)


def apply_geometry(img, params: CropParams) -> np.ndarray:
    """Crop, bilinearly resize to ``out_size`` square, then flip. Linear in pixel values."""
    x = img.data if isinstance(img, MultispectralImage) else np.asarray(img)
    crop = x[:, params.top:params.top + params.crop_h, params.left:params.left + params.crop_w]
    ry = interp_matrix(params.out_size, params.crop_h)
    rx = interp_matrix(params.out_size, params.crop_w)
    out = np.matmul(np.matmul(ry, crop), rx.T)
    if params.flip_h:
        out = out[:, :, ::-1]
    if params.flip_v:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# photometric and channel-agnostic augmentation
# ---------------------------------------------------------------------------


def aug_channel_agnostic(img, rng, flip_p: float = 0.5) -> np.ndarray:
    """Independent horizontal and vertical flips, each with probability ``flip_p``."""
    x = img.data if isinstance(img, MultispectralImage) else np.asarray(img)
    flip_h = rng.random() < flip_p
    flip_v = rng.random() < flip_p
    if flip_h:
        x = x[:, :, ::-1]
    if flip_v:
        x = x[:, ::-1, :]
    return np.ascontiguousarray(x, dtype=np.float32)


def color_jitter(x: np.ndarray, rng, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    x = x * rng.uniform(1 - brightness, 1 + brightness)
    gray = np.tensordot(LUMA, x, axes=1)
    x = (x - gray.mean()) * rng.uniform(1 - contrast, 1 + contrast) + gray.mean()
    gray = np.tensordot(LUMA, x, axes=1)
    return gray[None] + (x - gray[None]) * rng.uniform(1 - saturation, 1 + saturation)


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel blur with periodic boundaries, which keeps channel means."""
    return ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="wrap")


def solarize(x: np.ndarray, threshold: float) -> np.ndarray:
    """Values ``v >= threshold`` become ``1 - v``."""
    return np.where(x >= threshold, 1.0 - x, x)


def aug_optical(img3, rng, cfg: AugConfig) -> np.ndarray:
    """Color jitter, Gaussian blur and solarization, each applied with its own probability."""
    x = img3.data if isinstance(img3, MultispectralImage) else np.asarray(img3)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValidationError(f"optical augmentation needs a 3-channel image, got shape {x.shape}")
    x = x.astype(np.float64)
    # draws happen unconditionally so the stream does not depend on earlier outcomes
    u_jit, u_blur, u_sol = rng.random(3)
    sigma = rng.uniform(*cfg.blur_sigma)
    sub = np.random.default_rng(rng.integers(2**63))
    if u_jit < cfg.jitter_p:
        x = color_jitter(x, sub, cfg.brightness, cfg.contrast, cfg.saturation)
    if u_blur < cfg.blur_p:
        x = gaussian_blur(x, sigma)
    if u_sol < cfg.solarize_p:
        x = solarize(x, cfg.solarize_threshold)
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# view crafting
# ---------------------------------------------------------------------------


def craft_views(img, cfg: AugConfig, rng) -> ViewSet:
    """Global and local views for both branches from one raster."""
    x = img.data if isinstance(img, MultispectralImage) else np.asarray(img, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] < 3:
        raise ValidationError(f"expected a (C>=3, H, W) raster, got shape {x.shape}")
    _, h, w = x.shape
    if min(h, w) < 2:
        raise ValidationError("raster too small for cropping")
    ms = aug_channel_agnostic(x, rng, cfg.flip_p)
    opt = aug_optical(ms[:3], rng, cfg)
    gp = [sample_crop(rng, h, w, cfg.scale_global, cfg.out_global, cfg.crop_flip_p) for _ in range(cfg.n)]
    lp = [sample_crop(rng, h, w, cfg.scale_local, cfg.out_local, cfg.crop_flip_p) for _ in range(cfg.m)]

    def stack(src, params, size):
        if not params:
            return np.zeros((0, src.shape[0], size, size), dtype=np.float32)
        return np.stack([apply_geometry(src, p) for p in params])

    return ViewSet(
        ms_global=stack(ms, gp, cfg.out_global),
        ms_local=stack(ms, lp, cfg.out_local),
        opt_global=stack(opt, gp, cfg.out_global),
        opt_local=stack(opt, lp, cfg.out_local),
        crop_params_global=gp,
        crop_params_local=lp,
    )


def item_rng(seed: int, step: int, item: int) -> np.random.Generator:
    """Independent stream per (seed, step, item), so batches can be built in any order."""
    return np.random.default_rng([seed, step, item])


def view_to_source(params: CropParams, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map continuous view coordinates (row ``u``, column ``v``, pixel units) to source pixels.

    Inverse of :func:`apply_geometry` for pixel centers, ignoring edge clamping.
    """
    s = params.out_size
    if params.flip_h:
        v = s - v
    if params.flip_v:
        u = s - u
    return params.top + u * params.crop_h / s, params.left + v * params.crop_w / s


def source_to_view(params: CropParams, r: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = params.out_size
    u = (r - params.top) * s / params.crop_h
    v = (c - params.left) * s / params.crop_w
    if params.flip_h:
        v = s - v
    if params.flip_v:
        u = s - u
    return u, v


__all__ = [
    "CropParams",
    "AugConfig",
    "ViewSet",
    "sample_crop",
    "apply_geometry",
    "aug_channel_agnostic",
    "aug_optical",
    "color_jitter",
    "gaussian_blur",
    "solarize",
    "craft_views",
    "item_rng",
    "view_to_source",
    "source_to_view",
]
