"""Label-conditioned ultrasound-like phantoms.

Each image is drawn from a recipe fully determined by its weak label: the
transducer sets the field of view (sector for curvilinear, rectangle for
linear) and every study group paints an ellipse with its own echogenicity and
speckle grain. Liver and kidney double as segmentation targets, and their
rendered contrast tiers define a 0-4 quality class.

Speckle is multiplicative and band-limited: complex white noise is low-passed
with a Gaussian of group-specific width and its magnitude normalized to mean 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InsufficientLabels
from .metadata import (
    SampleRecord,
    StudyDescriptionTable,
    StudyGroup,
    WeakLabel,
    label_from_strings,
    load_default_table,
    split_indices,
)

SPEC_VERSION = 1
PROBES = ("SC6-1", "SL10-2", "SL15-4")
BACKGROUND = 0.4
ORGAN_TIERS = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class GroupRecipe:
    # ellipse center and semi-axes as fractions of (H, W)
    row: float
    col: float
    axis_r: float
    axis_c: float
    intensity: float
    grain: float  # speckle correlation length in pixels at 64x64


RECIPES = {
    StudyGroup.LIVER: GroupRecipe(0.42, 0.40, 0.12, 0.13, 0.80, 1.6),
    StudyGroup.KIDNEY: GroupRecipe(0.60, 0.60, 0.09, 0.11, 0.05, 0.8),
    StudyGroup.THYROID: GroupRecipe(0.36, 0.62, 0.07, 0.08, 0.65, 0.7),
    StudyGroup.ABDOMEN: GroupRecipe(0.66, 0.40, 0.05, 0.14, 0.58, 2.5),
    StudyGroup.CHEST: GroupRecipe(0.32, 0.50, 0.03, 0.18, 0.95, 0.6),
    StudyGroup.SOFT_TISSUE: GroupRecipe(0.45, 0.38, 0.08, 0.10, 0.62, 1.0),
    StudyGroup.NODULE: GroupRecipe(0.50, 0.52, 0.07, 0.07, 0.12, 0.5),
    StudyGroup.DRAINAGE: GroupRecipe(0.56, 0.34, 0.07, 0.05, 0.00, 1.0),
}

ORGANS = (StudyGroup.LIVER, StudyGroup.KIDNEY)


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    noise_level: float = 0.25
    jitter: float = 0.04
    # "label": organs drawn iff their group is in the label (tiers 0.5/1.0)
    # "random": each organ independently at tier 0, 0.5 or 1, label-agnostic
    organ_mode: str = "label"
    descriptions: tuple[str, ...] | None = None
    probes: tuple[str, ...] = PROBES
    seed: int = 0
    version: int = SPEC_VERSION

    def __post_init__(self):
        if self.organ_mode not in ("label", "random"):
            raise ValueError(f"organ_mode must be 'label' or 'random', got {self.organ_mode!r}")
        if self.height % 4 or self.width % 4:
            raise ValueError("phantom size must be divisible by 4")
        if self.noise_level < 0 or self.jitter < 0:
            raise ValueError("noise_level and jitter must be non-negative")

    def to_json(self) -> str:
        d = asdict(self)
        d["descriptions"] = list(self.descriptions) if self.descriptions is not None else None
        d["probes"] = list(self.probes)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        if d.get("version", SPEC_VERSION) != SPEC_VERSION:
            raise ValueError(f"unsupported phantom spec version {d.get('version')}")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        if d.get("descriptions") is not None:
            d["descriptions"] = tuple(d["descriptions"])
        if "probes" in d:
            d["probes"] = tuple(d["probes"])
        return cls(**d)


@dataclass
class Corpus:
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n, 10) int64
    masks: np.ndarray  # (n, 2, H, W) uint8, channels (liver, kidney)
    classes: np.ndarray  # (n,) int64 in 0..4
    transducers: list[str] = field(default_factory=list)
    descriptions: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(
            self.images[idx],
            self.labels[idx],
            self.masks[idx],
            self.classes[idx],
            [self.transducers[i] for i in idx],
            [self.descriptions[i] for i in idx],
        )


def _fov(h, w, curvilinear):
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    if curvilinear:
        apex_r, apex_c = -0.3 * h, 0.5 * w
        dr, dc = rr - apex_r, cc - apex_c
        radius = np.hypot(dr / h, dc / w)
        angle = np.degrees(np.arctan2(dc / w, dr / h))
        return (radius >= 0.36) & (radius <= 1.28) & (np.abs(angle) <= 38)
    return (rr >= 0.04 * h) & (cc >= 0.08 * w) & (cc < 0.92 * w)


def _ellipse(h, w, r0, c0, ar, ac):
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return ((rr + 0.5 - r0 * h) / (ar * h)) ** 2 + ((cc + 0.5 - c0 * w) / (ac * w)) ** 2 <= 1.0


def speckle(shape, grain, rng) -> np.ndarray:
    """Rayleigh-like speckle with correlation length ``grain`` pixels, mean 1."""
    h, w = shape
    noise = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    fr = np.fft.fftfreq(h)[:, None]
    fc = np.fft.fftfreq(w)[None, :]
    kernel = np.exp(-2 * (math.pi * grain) ** 2 * (fr**2 + fc**2))
    field_ = np.abs(np.fft.ifft2(np.fft.fft2(noise) * kernel))
    return field_ / field_.mean()


def render(label: WeakLabel, spec: PhantomSpec, rng: np.random.Generator, organ_tiers=None):
    """One phantom: ``(image, masks, quality_class)``."""
    h, w = spec.height, spec.width
    scale = h / 64.0
    curvilinear = label.transducer_onehot[0] == 1
    fov = _fov(h, w, curvilinear)
    groups = label.groups

    if organ_tiers is None:
        if spec.organ_mode == "label":
            organ_tiers = [float(rng.choice(ORGAN_TIERS[1:])) if g in groups else 0.0 for g in ORGANS]
        else:
            organ_tiers = [float(rng.choice(ORGAN_TIERS)) for _ in ORGANS]

    def texture(grain):
        if spec.noise_level == 0:
            return 1.0
        return 1.0 + spec.noise_level * (speckle((h, w), grain * scale, rng) - 1.0)

    img = BACKGROUND * texture(1.2)
    order = [g for g in StudyGroup if g in groups and g not in ORGANS]
    painted = []
    for g in order:
        painted.append((g, 1.0))
    for g, tier in zip(ORGANS, organ_tiers):
        if tier > 0:
            painted.append((g, tier))

    masks = np.zeros((2, h, w), dtype=np.uint8)
    for g, tier in painted:
        rec = RECIPES[g]
        jr, jc = (rng.uniform(-1, 1, size=2) * spec.jitter) if spec.jitter else (0.0, 0.0)
        region = _ellipse(h, w, rec.row + jr, rec.col + jc, rec.axis_r, rec.axis_c) & fov
        level = BACKGROUND + tier * (rec.intensity - BACKGROUND)
        img = np.where(region, level * texture(rec.grain), img)
        if g in ORGANS:
            # later ellipses occlude earlier ones
            masks[:, region] = 0
            masks[ORGANS.index(g)][region] = 1
        else:
            masks[:, region] = 0
    img = np.clip(np.where(fov, img, 0.0), 0.0, 1.0)
    quality = int(round(2 * sum(organ_tiers)))
    return img.astype(np.float32), masks, quality


def _draw_labels(spec: PhantomSpec, n: int, table: StudyDescriptionTable, rng):
    descs = list(spec.descriptions) if spec.descriptions is not None else list(table)
    probe_idx = rng.integers(0, len(spec.probes), size=n)
    desc_idx = rng.integers(0, len(descs), size=n)
    return [spec.probes[i] for i in probe_idx], [descs[i] for i in desc_idx]


def generate_corpus(spec: PhantomSpec, n: int, table: StudyDescriptionTable | None = None) -> Corpus:
    if n < 1:
        raise ValueError("n must be >= 1")
    table = table or load_default_table()
    root = np.random.SeedSequence(spec.seed)
    label_ss, *image_ss = root.spawn(n + 1)
    probes, descs = _draw_labels(spec, n, table, np.random.default_rng(label_ss))
    images, labels, masks, classes = [], [], [], []
    for probe, desc, ss in zip(probes, descs, image_ss):
        label = label_from_strings(probe, desc, table)
        img, m, q = render(label, spec, np.random.default_rng(ss))
        images.append(img)
        labels.append(label.encoded)
        masks.append(m)
        classes.append(q)
    return Corpus(
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        np.stack(masks),
        np.asarray(classes, dtype=np.int64),
        probes,
        descs,
    )


def write_corpus(
    corpus: Corpus, out_dir, spec: PhantomSpec | None = None, split_fraction: float = 0.8, seed: int = 0
) -> list[SampleRecord]:
    """Write 16-bit PNG images, 2-channel (LA) mask PNGs and ``manifest.jsonl``."""
    from .metadata import write_manifest

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    is_train = split_indices(len(corpus), split_fraction, seed)
    records = []
    for i in range(len(corpus)):
        img_rel = f"images/{i:05d}.png"
        mask_rel = f"masks/{i:05d}.png"
        Image.fromarray(np.round(corpus.images[i] * 65535).astype(np.uint16)).save(out / img_rel)
        la = np.stack([corpus.masks[i, 0], corpus.masks[i, 1]], axis=-1) * 255
        Image.fromarray(la.astype(np.uint8)).save(out / mask_rel)
        records.append(
            SampleRecord(
                image_path=img_rel,
                transducer_raw=corpus.transducers[i],
                study_description_raw=corpus.descriptions[i],
                label=WeakLabel.from_encoded(corpus.labels[i]),
                split="train" if is_train[i] else "val",
                quality_class=int(corpus.classes[i]),
                mask_path=mask_rel,
            )
        )
    write_manifest(records, out / "manifest.jsonl")
    if spec is not None:
        (out / "phantom_spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    return records


def load_mask(path) -> np.ndarray:
    """Read a 2-channel mask PNG back into a ``(2, H, W)`` uint8 array of 0/1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("LA"))
    return (np.moveaxis(arr, -1, 0) > 127).astype(np.uint8)


def _features(images: np.ndarray, blocks: int = 4) -> np.ndarray:
    n, h, w = images.shape
    bh, bw = h // blocks, w // blocks
    x = images[:, : bh * blocks, : bw * blocks].reshape(n, blocks, bh, blocks, bw)
    means = x.mean(axis=(2, 4)).reshape(n, -1)
    stds = x.std(axis=(2, 4)).reshape(n, -1)
    return np.concatenate([means, stds], axis=1)


def label_separation_oracle(images: np.ndarray, labels: Sequence, seed: int = 0) -> float:
    """Held-out accuracy of a nearest-centroid classifier on block pixel statistics.

    Samples are split per label into halves; labels with a single sample are
    skipped. Returns accuracy on the held-out halves.
    """
    keys = [tuple(int(v) for v in lab) for lab in labels]
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    usable = {k: v for k, v in groups.items() if len(v) >= 2}
    if len(usable) < 2:
        raise InsufficientLabels("need at least two distinct labels with two samples each")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in sorted(usable):
        idx = rng.permutation(usable[k])
        half = len(idx) // 2
        train_idx += [(k, i) for i in idx[:half]]
        test_idx += [(k, i) for i in idx[half:]]
    feats = _features(np.asarray(images, dtype=np.float64))
    tr = np.array([i for _, i in train_idx])
    mu, sd = feats[tr].mean(axis=0), feats[tr].std(axis=0) + 1e-8
    z = (feats - mu) / sd
    names = sorted(usable)
    centroids = np.stack([z[[i for k, i in train_idx if k == name]].mean(axis=0) for name in names])
    te = np.array([i for _, i in test_idx])
    dist = ((z[te][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = [names[j] for j in dist.argmin(axis=1)]
    truth = [k for k, _ in test_idx]
    return float(np.mean([p == t for p, t in zip(pred, truth)]))


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
