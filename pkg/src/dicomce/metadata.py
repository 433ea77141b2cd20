"""Weak labels from ultrasound DICOM metadata.

Two header fields are used: the transducer identifier (0018,5010) and the
study description (0008,1030). The transducer collapses to a curvilinear /
linear one-hot, the description to a multi-hot over eight anatomical or
procedural groups. Their concatenation is the 10-dim conditioning vector fed
to the projection discriminator::

    [curvilinear, linear, liver, kidney, thyroid, abdomen, chest,
     soft_tissue, nodule, drainage]
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import TableFormatError, UnknownStudyDescription, UnrecognizedTransducer

logger = logging.getLogger(__name__)

LABEL_DIM = 10
TABLE_VERSION = 1


class TransducerClass(enum.Enum):
    CURVILINEAR = "curvilinear"
    LINEAR = "linear"

    @property
    def index(self) -> int:
        return _TRANSDUCER_ORDER.index(self)


_TRANSDUCER_ORDER = (TransducerClass.CURVILINEAR, TransducerClass.LINEAR)


class StudyGroup(enum.Enum):
    LIVER = "liver"
    KIDNEY = "kidney"
    THYROID = "thyroid"
    ABDOMEN = "abdomen"
    CHEST = "chest"
    SOFT_TISSUE = "soft_tissue"
    NODULE = "nodule"
    DRAINAGE = "drainage"

    @property
    def index(self) -> int:
        return _GROUP_ORDER.index(self)

    @classmethod
    def parse(cls, text: str) -> "StudyGroup":
        key = normalize(text).lower().replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise TableFormatError(f"unknown study group {text!r}") from None


# fixed index order; never reorder
_GROUP_ORDER = tuple(StudyGroup)

_PROBE_RE = re.compile(r"^S([CL])(\d+)-(\d+)$")
_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Trim and collapse internal whitespace. Case is preserved."""
    return _WS_RE.sub(" ", text).strip()


def parse_transducer(raw: str) -> TransducerClass:
    """Map a probe identifier such as ``SC6-1`` or ``SL15-4`` to its geometry."""
    text = normalize(raw or "")
    if not text:
        raise UnrecognizedTransducer("empty transducer string")
    m = _PROBE_RE.match(text)
    if m is None:
        raise UnrecognizedTransducer(f"unrecognized transducer {raw!r}")
    return TransducerClass.CURVILINEAR if m.group(1) == "C" else TransducerClass.LINEAR


class StudyDescriptionTable(Mapping[str, frozenset]):
    """Read-only mapping from normalized study description to its group set."""

    def __init__(self, entries: Mapping[str, Iterable[StudyGroup]]):
        table = {}
        for desc, groups in entries.items():
            key = normalize(desc)
            gs = frozenset(groups)
            if not key:
                raise TableFormatError("empty study description")
            if not gs:
                raise TableFormatError(f"{desc!r} maps to no group")
            if key in table:
                raise TableFormatError(f"duplicate study description {key!r}")
            table[key] = gs
        self._entries = table

    def __getitem__(self, key: str) -> frozenset:
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    @classmethod
    def from_text(cls, text: str) -> "StudyDescriptionTable":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TableFormatError(f"line {lineno}: expected 2 tab-separated columns")
            desc, groups = parts
            key = normalize(desc)
            if key in entries:
                raise TableFormatError(f"line {lineno}: duplicate study description {key!r}")
            entries[key] = [StudyGroup.parse(g) for g in groups.split(",") if g.strip()]
        return cls(entries)

    @classmethod
    def from_file(cls, path) -> "StudyDescriptionTable":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"# study description\tcomma-separated groups (version {TABLE_VERSION})"]
        for desc, groups in self._entries.items():
            names = ",".join(g.value.replace("_", " ") for g in sorted(groups, key=lambda g: g.index))
            lines.append(f"{desc}\t{names}")
        return "\n".join(lines) + "\n"


def load_default_table() -> StudyDescriptionTable:
    """The bundled study-description table (44 rows)."""
    text = resources.files("dicomce").joinpath("data/study_descriptions.tsv").read_text(encoding="utf-8")
    return StudyDescriptionTable.from_text(text)


def categorize_study_description(
    raw: str, table: StudyDescriptionTable, strict: bool = True
) -> frozenset:
    key = normalize(raw or "")
    try:
        return table[key]
    except KeyError:
        if strict:
            raise UnknownStudyDescription(f"unknown study description {raw!r}") from None
        logger.warning("unknown study description %r, using empty group set", raw)
        return frozenset()


@dataclass(frozen=True)
class WeakLabel:
    transducer_onehot: tuple
    group_multihot: tuple

    def __post_init__(self):
        if len(self.transducer_onehot) != 2 or sum(self.transducer_onehot) != 1:
            raise ValueError("transducer one-hot must have length 2 and sum to 1")
        if len(self.group_multihot) != 8 or any(v not in (0, 1) for v in self.group_multihot):
            raise ValueError("group multi-hot must be 8 binary entries")

    @property
    def encoded(self) -> tuple:
        return self.transducer_onehot + self.group_multihot

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.encoded, dtype=dtype)

    @property
    def transducer(self) -> TransducerClass:
        return _TRANSDUCER_ORDER[self.transducer_onehot.index(1)]

    @property
    def groups(self) -> frozenset:
        return frozenset(g for g, v in zip(_GROUP_ORDER, self.group_multihot) if v)

    @classmethod
    def from_encoded(cls, vec: Sequence[int]) -> "WeakLabel":
        vec = tuple(int(v) for v in vec)
        if len(vec) != LABEL_DIM:
            raise ValueError(f"encoded label must have length {LABEL_DIM}, got {len(vec)}")
        return cls(vec[:2], vec[2:])


def encode_label(t: TransducerClass, groups: Iterable[StudyGroup]) -> WeakLabel:
    onehot = [0, 0]
    onehot[t.index] = 1
    multihot = [0] * len(_GROUP_ORDER)
    for g in groups:
        multihot[g.index] = 1
    return WeakLabel(tuple(onehot), tuple(multihot))


def label_from_strings(
    transducer_raw: str, study_description_raw: str, table: StudyDescriptionTable, strict: bool = True
) -> WeakLabel:
    t = parse_transducer(transducer_raw)
    groups = categorize_study_description(study_description_raw, table, strict=strict)
    return encode_label(t, groups)


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    transducer_raw: str
    study_description_raw: str
    label: WeakLabel
    split: str
    # downstream targets, absent for pretraining corpora
    quality_class: int | None = None
    mask_path: str | None = None

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")

    def to_json(self) -> str:
        obj = {
            "image_path": self.image_path,
            "transducer_raw": self.transducer_raw,
            "study_description_raw": self.study_description_raw,
            "label": list(self.label.encoded),
            "split": self.split,
        }
        if self.quality_class is not None:
            obj["quality_class"] = self.quality_class
        if self.mask_path is not None:
            obj["mask_path"] = self.mask_path
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        obj = json.loads(line)
        return cls(
            image_path=obj["image_path"],
            transducer_raw=obj["transducer_raw"],
            study_description_raw=obj["study_description_raw"],
            label=WeakLabel.from_encoded(obj["label"]),
            split=obj["split"],
            quality_class=obj.get("quality_class"),
            mask_path=obj.get("mask_path"),
        )


@dataclass
class ManifestAudit:
    n_records: int = 0
    n_unknown: int = 0
    per_transducer: Counter = field(default_factory=Counter)
    per_group: Counter = field(default_factory=Counter)
    per_split: Counter = field(default_factory=Counter)

    def summary(self) -> str:
        lines = [f"records: {self.n_records}  unknown study descriptions: {self.n_unknown}"]
        lines.append("splits: " + ", ".join(f"{k}={self.per_split[k]}" for k in ("train", "val")))
        lines.append("transducer: " + ", ".join(f"{t.value}={self.per_transducer[t.value]}" for t in _TRANSDUCER_ORDER))
        lines.append("groups: " + ", ".join(f"{g.value}={self.per_group[g.value]}" for g in _GROUP_ORDER))
        return "\n".join(lines)


def audit_manifest(records: Sequence[SampleRecord]) -> ManifestAudit:
    audit = ManifestAudit(n_records=len(records))
    for rec in records:
        audit.per_split[rec.split] += 1
        audit.per_transducer[rec.label.transducer.value] += 1
        groups = rec.label.groups
        # every table row has at least one group, so empty means unknown
        if not groups:
            audit.n_unknown += 1
        for g in groups:
            audit.per_group[g.value] += 1
    return audit


def split_indices(n: int, split_fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of training rows; ``round(n * fraction)`` rows are drawn."""
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie strictly between 0 and 1")
    n_train = int(math.floor(n * split_fraction + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    is_train = np.zeros(n, dtype=bool)
    is_train[order[:n_train]] = True
    return is_train


def build_manifest(
    records: Sequence[tuple],
    table: StudyDescriptionTable,
    split_fraction: float = 0.8,
    seed: int = 0,
    strict: bool = True,
    extras: Sequence[Mapping] | None = None,
) -> list[SampleRecord]:
    """Encode ``(image_path, transducer_raw, study_description_raw)`` rows and split them.

    ``extras`` optionally carries per-row ``quality_class`` / ``mask_path``.
    """
    records = list(records)
    if extras is not None and len(extras) != len(records):
        raise ValueError("extras must align with records")
    is_train = split_indices(len(records), split_fraction, seed)
    out = []
    for i, (image_path, transducer_raw, desc_raw) in enumerate(records):
        label = label_from_strings(transducer_raw, desc_raw, table, strict=strict)
        extra = dict(extras[i]) if extras is not None else {}
        out.append(
            SampleRecord(
                image_path=str(image_path),
                transducer_raw=transducer_raw,
                study_description_raw=desc_raw,
                label=label,
                split="train" if is_train[i] else "val",
                quality_class=extra.get("quality_class"),
                mask_path=extra.get("mask_path"),
            )
        )
    audit = audit_manifest(out)
    if audit.n_unknown:
        logger.warning("%d of %d records have unknown study descriptions", audit.n_unknown, audit.n_records)
    return out


def write_manifest(records: Iterable[SampleRecord], path) -> None:
    text = "".join(rec.to_json() + "\n" for rec in records)
    Path(path).write_bytes(text.encode("utf-8"))


def read_manifest(path) -> list[SampleRecord]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return [SampleRecord.from_json(line) for line in fh if line.strip()]
