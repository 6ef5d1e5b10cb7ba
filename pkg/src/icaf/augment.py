"""Weak geometric and strong photometric perturbations, plus CutMix.

Weak parameters are drawn once per group per iteration and applied to every
sampled view and to the mask/pseudo-label, so pixel (y, x) refers to the same
scene point in all branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

Box = tuple[int, int, int, int]  # (y, x, h, w)


@dataclass
class AugConfig:
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    jitter: float = 0.5
    jitter_prob: float = 0.8
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.5
    grayscale_prob: float = 0.2
    cutmix_prob: float = 0.5
    cutmix_area: tuple[float, float] = (0.25, 0.5)

    def validate(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        lo, hi = self.blur_sigma
        if not 0 <= lo <= hi:
            raise ValueError(f"bad blur_sigma {self.blur_sigma}")
        lo, hi = self.cutmix_area
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"bad cutmix_area {self.cutmix_area}")
        for name in ("flip_prob", "jitter_prob", "blur_prob", "grayscale_prob", "cutmix_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")


@dataclass(frozen=True)
class GeoParams:
    scale: float
    crop: Box  # in coordinates of the rescaled image
    flip: bool

    def scaled_size(self, source_size: tuple[int, int]) -> tuple[int, int]:
        h, w = source_size
        return max(1, round(h * self.scale)), max(1, round(w * self.scale))


@dataclass(frozen=True)
class StrongParams:
    brightness: float = 0.0  # multiplicative offsets, 0 means unchanged
    contrast: float = 0.0
    saturation: float = 0.0
    blur_sigma: float = 0.0
    grayscale: bool = False
    cutmix_box: Optional[Box] = None


def identity_geo(size: tuple[int, int]) -> GeoParams:
    return GeoParams(1.0, (0, 0, size[0], size[1]), False)


def sample_weak_params(rng: np.random.Generator, config: AugConfig,
                       source_size: tuple[int, int], crop_size: tuple[int, int]) -> GeoParams:
    h, w = source_size
    ch, cw = crop_size
    lo, hi = config.scale_range
    # smallest scale whose rescaled image still contains the crop
    need = max(ch / h, cw / w)
    if hi < need:
        raise ValueError(f"crop {crop_size} larger than source {source_size} at max scale {hi}")
    lo = max(lo, need)
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(hi)
    sh, sw = GeoParams(scale, (0, 0, ch, cw), False).scaled_size(source_size)
    y = int(rng.integers(0, sh - ch + 1))
    x = int(rng.integers(0, sw - cw + 1))
    flip = bool(rng.random() < config.flip_prob)
    return GeoParams(scale, (y, x, ch, cw), flip)


def apply_weak(x: torch.Tensor, params: GeoParams, interpolation: str = "bilinear") -> torch.Tensor:
    """Resize, crop and flip the trailing (H, W) dims of an image or mask tensor."""
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    is_mask = not torch.is_floating_point(x)
    if is_mask and interpolation != "nearest":
        raise ValueError("masks must use nearest interpolation")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    y = x.reshape(-1, 1, h, w) if is_mask or x.dim() < 3 else x.reshape(-1, *x.shape[-3:])
    sh, sw = params.scaled_size((h, w))
    if (sh, sw) != (h, w):
        if is_mask:
            y = F.interpolate(y.float(), size=(sh, sw), mode="nearest").to(x.dtype)
        elif interpolation == "nearest":
            y = F.interpolate(y, size=(sh, sw), mode="nearest")
        else:
            y = F.interpolate(y, size=(sh, sw), mode="bilinear", align_corners=False)
    cy, cx, ch, cw = params.crop
    if cy < 0 or cx < 0 or cy + ch > sh or cx + cw > sw:
        raise ValueError(f"crop {params.crop} outside rescaled image {(sh, sw)}")
    y = y[..., cy:cy + ch, cx:cx + cw]
    if params.flip:
        y = torch.flip(y, dims=[-1])
    return y.reshape(*lead, ch, cw)


def sample_strong_params(rng: np.random.Generator, config: AugConfig, size: tuple[int, int],
                         use_cutmix: bool = False) -> StrongParams:
    j = config.jitter
    b = c = s = 0.0
    if rng.random() < config.jitter_prob:
        b, c, s = (float(v) for v in rng.uniform(-j, j, 3))
    gray = bool(rng.random() < config.grayscale_prob)
    sigma = 0.0
    if rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma))
    box = None
    if use_cutmix and rng.random() < config.cutmix_prob:
        box = sample_cutmix_box(rng, size, config.cutmix_area)
    return StrongParams(b, c, s, sigma, gray, box)


def sample_cutmix_box(rng: np.random.Generator, size: tuple[int, int], area_range) -> Box:
    h, w = size
    area = rng.uniform(*area_range) * h * w
    ratio = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    bh = int(min(h, max(1, round(math.sqrt(area * ratio)))))
    bw = int(min(w, max(1, round(area / bh))))
    y = int(rng.integers(0, h - bh + 1))
    x = int(rng.integers(0, w - bw + 1))
    return (y, x, bh, bw)


def _gray(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(-3)
    return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(-3)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype, device=x.device)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    shape = x.shape
    y = x.reshape(-1, 1, *shape[-2:])
    pad_h, pad_w = min(radius, shape[-2] - 1), min(radius, shape[-1] - 1)
    y = F.pad(y, (pad_w, pad_w, pad_h, pad_h), mode="reflect")
    kh = k[radius - pad_h: radius + pad_h + 1] if pad_h < radius else k
    kw = k[radius - pad_w: radius + pad_w + 1] if pad_w < radius else k
    y = F.conv2d(y, (kh / kh.sum()).view(1, 1, -1, 1))
    y = F.conv2d(y, (kw / kw.sum()).view(1, 1, 1, -1))
    return y.reshape(shape)


def apply_strong(image: torch.Tensor, params: StrongParams) -> torch.Tensor:
    """Photometric perturbation of a (..., 3, H, W) image; geometry is untouched."""
    x = image
    if params.brightness:
        x = (x * (1 + params.brightness)).clamp(0, 1)
    if params.contrast:
        mean = _gray(x).mean(dim=(-2, -1), keepdim=True)
        x = ((x - mean) * (1 + params.contrast) + mean).clamp(0, 1)
    if params.saturation:
        g = _gray(x)
        x = ((x - g) * (1 + params.saturation) + g).clamp(0, 1)
    if params.grayscale:
        x = _gray(x).expand_as(x).clone()
    if params.blur_sigma > 0:
        x = gaussian_blur(x, params.blur_sigma)
    return x.clamp(0, 1)


def cutmix_pair(img_a: torch.Tensor, img_b: torch.Tensor, tgt_a: torch.Tensor, tgt_b: torch.Tensor,
                box: Optional[Box], valid_a: Optional[torch.Tensor] = None,
                valid_b: Optional[torch.Tensor] = None):
    """Paste the b-side inside ``box`` over the a-side for image, target and validity mask."""
    h, w = img_a.shape[-2:]
    if img_b.shape != img_a.shape or tgt_a.shape[-2:] != (h, w) or tgt_b.shape != tgt_a.shape:
        raise ValueError("cutmix operands must share H x W")
    if valid_a is None:
        valid_a = torch.ones_like(tgt_a, dtype=torch.bool)
    if valid_b is None:
        valid_b = torch.ones_like(tgt_b, dtype=torch.bool)
    img, tgt, valid = img_a.clone(), tgt_a.clone(), valid_a.clone()
    if box is None:
        return img, tgt, valid
    y, x, bh, bw = box
    if y < 0 or x < 0 or bh < 0 or bw < 0 or y + bh > h or x + bw > w:
        raise ValueError(f"cutmix box {box} outside {(h, w)}")
    img[..., y:y + bh, x:x + bw] = img_b[..., y:y + bh, x:x + bw]
    tgt[..., y:y + bh, x:x + bw] = tgt_b[..., y:y + bh, x:x + bw]
    valid[..., y:y + bh, x:x + bw] = valid_b[..., y:y + bh, x:x + bw]
    return img, tgt, valid
