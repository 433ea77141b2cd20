"""Turn manifests into in-memory tensors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptySplit
from .metadata import SampleRecord
from .preprocessing import preprocess, zscore
from .synthdata import Corpus, load_mask


@dataclass
class TensorSet:
    images: torch.Tensor  # (n, 1, H, W) float32, z-scored per image
    labels: torch.Tensor  # (n, 10) float32
    classes: torch.Tensor | None = None  # (n,) int64
    masks: torch.Tensor | None = None  # (n, 2, H, W) float32

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "TensorSet":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return TensorSet(
            self.images[idx],
            self.labels[idx],
            None if self.classes is None else self.classes[idx],
            None if self.masks is None else self.masks[idx],
        )


def from_corpus(corpus: Corpus) -> TensorSet:
    images = np.stack([zscore(img) for img in corpus.images]).astype(np.float32)
    return TensorSet(
        torch.from_numpy(images)[:, None],
        torch.from_numpy(corpus.labels.astype(np.float32)),
        torch.from_numpy(corpus.classes.astype(np.int64)),
        torch.from_numpy(corpus.masks.astype(np.float32)),
    )


def _resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    if mask.shape[-2:] == (h, w):
        return mask
    t = torch.from_numpy(mask.astype(np.float32))[None]
    return F.interpolate(t, size=(h, w), mode="nearest")[0].numpy()


def load_records(records: Sequence[SampleRecord], root, size: tuple[int, int], split: str | None = None) -> TensorSet:
    """Decode, resize and normalize every record (optionally one split only)."""
    root = Path(root)
    recs = [r for r in records if split is None or r.split == split]
    if not recs:
        raise EmptySplit(f"no records for split {split!r}")
    h, w = size
    images = np.stack([preprocess(root / r.image_path, h, w) for r in recs])
    labels = np.asarray([r.label.encoded for r in recs], dtype=np.float32)
    classes = None
    if all(r.quality_class is not None for r in recs):
        classes = torch.tensor([r.quality_class for r in recs], dtype=torch.int64)
    masks = None
    if all(r.mask_path is not None for r in recs):
        masks = torch.from_numpy(
            np.stack([_resize_mask(load_mask(root / r.mask_path), h, w) for r in recs]).astype(np.float32)
        )
    return TensorSet(torch.from_numpy(images)[:, None], torch.from_numpy(labels), classes, masks)


def batches(n: int, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = True):
    """Index batches; a trailing singleton batch is folded into its predecessor (BatchNorm needs >1)."""
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    chunks = list(order.split(batch_size))
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = torch.cat([chunks[-1], last])
    return chunks
