"""Resize, z-score and center-mask images.

Functions here accept numpy arrays or torch tensors shaped ``(..., H, W)``;
masking works on the last two axes so batches pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DegenerateImage, ShapeMismatch

FILL_VALUE = 0.0
DEFAULT_SIZE = (256, 384)


@dataclass(frozen=True)
class MaskSpec:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def for_shape(cls, h: int, w: int) -> "MaskSpec":
        if h % 4 or w % 4:
            raise ShapeMismatch(f"image size {h}x{w} must be divisible by 4")
        return cls(h // 4, w // 4, h // 2, w // 2)

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.height)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.width)


def load_image(path) -> np.ndarray:
    """Decode an 8- or 16-bit grayscale raster into float64."""
    with Image.open(Path(path)) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape == (target_h, target_w):
        return arr.copy()
    t = torch.from_numpy(arr)[None, None]
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def zscore(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    std = arr.std()
    if not np.isfinite(std) or std < 1e-8:
        raise DegenerateImage(f"image has near-zero variance (std={std:.3g})")
    return (arr - arr.mean()) / std


def preprocess(image, target_h: int = DEFAULT_SIZE[0], target_w: int = DEFAULT_SIZE[1], multiple: int = 32) -> np.ndarray:
    """Bilinear resize to ``(target_h, target_w)`` then per-image z-score.

    ``image`` may be an array or a path to a raster file. Returns float32.
    """
    if target_h % multiple or target_w % multiple or target_h % 4 or target_w % 4:
        raise ShapeMismatch(f"target size {target_h}x{target_w} must be divisible by {multiple} and 4")
    if isinstance(image, (str, Path)):
        image = load_image(image)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1) if arr.shape[-1] in (3, 4) else arr.mean(axis=0)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateImage("image contains non-finite values")
    return zscore(resize(arr, target_h, target_w)).astype(np.float32)


def _copy(x):
    return x.clone() if isinstance(x, torch.Tensor) else np.array(x, copy=True)


def mask_center(x):
    """Return ``(masked, target_patch, spec)`` for the central H/2 x W/2 block."""
    spec = MaskSpec.for_shape(*x.shape[-2:])
    patch = _copy(x[..., spec.rows, spec.cols])
    masked = _copy(x)
    masked[..., spec.rows, spec.cols] = FILL_VALUE
    return masked, patch, spec


def composite(base, patch, spec: MaskSpec):
    """``base`` with the masked region replaced by ``patch``."""
    if tuple(patch.shape[-2:]) != (spec.height, spec.width):
        raise ShapeMismatch(f"patch shape {tuple(patch.shape[-2:])} does not match mask {spec.height}x{spec.width}")
    if spec.top + spec.height > base.shape[-2] or spec.left + spec.width > base.shape[-1]:
        raise ShapeMismatch("mask region exceeds image bounds")
    if tuple(patch.shape[:-2]) != tuple(base.shape[:-2]):
        raise ShapeMismatch(f"leading dims differ: {tuple(patch.shape)} vs {tuple(base.shape)}")
    if isinstance(base, torch.Tensor):
        # out-of-place so autograd flows into the patch
        rows = torch.zeros(base.shape[-2], dtype=torch.bool, device=base.device)
        cols = torch.zeros(base.shape[-1], dtype=torch.bool, device=base.device)
        rows[spec.rows] = True
        cols[spec.cols] = True
        region = rows[:, None] & cols[None, :]
        padded = F.pad(patch, (spec.left, base.shape[-1] - spec.left - spec.width, spec.top, base.shape[-2] - spec.top - spec.height))
        return torch.where(region, padded.to(base.dtype), base)
    out = np.array(base, copy=True)
    out[..., spec.rows, spec.cols] = patch
    return out
