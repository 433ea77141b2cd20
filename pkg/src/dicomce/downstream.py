"""Downstream fine-tuning (ordinal quality score, liver/kidney segmentation) and evaluation."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import TensorSet, batches
from .errors import EmptyInput, EmptySplit, IncompatibleCheckpoint, LengthMismatch, OutOfRange
from .losses import dice_per_channel, soft_dice_loss, weighted_bce
from .nets import EncoderConfig, ModelBundle, build_classifier_head, build_encoder, build_unet, load_checkpoint
from .pretrain import derive_seeds

logger = logging.getLogger(__name__)

NUM_CLASSES = 5
TASKS = ("classification", "segmentation")
PRETRAINED = ("none", "ce_plain", "ce_dicom")
METRIC_FOR_TASK = {"classification": "accuracy", "segmentation": "dice"}
TASK_DEFAULTS = {
    "classification": {"batch_size": 4, "lr": 1e-4, "epochs": 300},
    "segmentation": {"batch_size": 8, "lr": 1e-4, "epochs": 500},
}
# rows of the results table, in display order: (pretraining, freeze)
REGIMES = (("none", False), ("ce_plain", False), ("ce_dicom", False), ("ce_plain", True), ("ce_dicom", True))
GRID_COLUMNS = ("task", "pretrained", "freeze", "fraction", "metric", "mean", "std", "p_vs_no_dicom", "seed")


def ordinal_encode(class_index: int) -> list[int]:
    """Class k -> k ones followed by zeros (length 4)."""
    if isinstance(class_index, bool) or int(class_index) != class_index or not 0 <= class_index < NUM_CLASSES:
        raise OutOfRange(f"class index must be in 0..{NUM_CLASSES - 1}, got {class_index!r}")
    k = int(class_index)
    return [1] * k + [0] * (NUM_CLASSES - 1 - k)


def ordinal_decode(probs) -> int:
    """Length of the longest prefix of entries above 0.5."""
    k = 0
    for p in np.asarray(probs, dtype=np.float64).ravel():
        if p <= 0.5:
            break
        k += 1
    return k


def ordinal_targets(classes: torch.Tensor) -> torch.Tensor:
    return torch.tensor([ordinal_encode(int(c)) for c in classes], dtype=torch.float32).reshape(-1, NUM_CLASSES - 1)


def decode_batch(probs: torch.Tensor) -> torch.Tensor:
    # cumulative product of the >0.5 indicators counts the leading run
    return (probs > 0.5).to(torch.int64).cumprod(dim=1).sum(dim=1)


@dataclass
class FinetuneConfig:
    task: str = "classification"
    pretrained: str = "none"
    freeze_encoder: bool = False
    data_fraction: float = 1.0
    batch_size: int | None = None
    lr: float | None = None
    epochs: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    pos_weight: float = 2.0
    n_bootstrap: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.pretrained not in PRETRAINED:
            raise ValueError(f"pretrained must be one of {PRETRAINED}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must be in (0, 1]")
        for key, value in TASK_DEFAULTS[self.task].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0 or self.n_bootstrap < 1:
            raise ValueError("batch_size, epochs, n_bootstrap must be >= 1 and lr > 0")

    @property
    def metric(self) -> str:
        return METRIC_FOR_TASK[self.task]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    metric: str
    point: float
    mean: float
    std: float
    n_bootstrap: int
    resamples: tuple[float, ...] = ()
    p_value: float | None = None

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resamples"] = list(self.resamples)
        return d


def evaluate_bootstrap(values, n_bootstrap: int = 10, seed: int = 0, metric: str = "metric") -> MetricsReport:
    """Resample the per-sample metrics with replacement; report mean and population std of the resample means."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("no per-sample metrics")
    if n_bootstrap < 1:
        raise ValueError("n_bootstrap must be >= 1")
    n = v.size
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_bootstrap, n))
    means = [math.fsum(v[row]) / n for row in idx]
    mean = math.fsum(means) / n_bootstrap
    std = math.sqrt(math.fsum((m - mean) ** 2 for m in means) / n_bootstrap)
    return MetricsReport(metric, math.fsum(v) / n, mean, std, n_bootstrap, tuple(means))


def paired_significance(metrics_a, metrics_b, n_permutations: int = 10000, seed: int = 0) -> float:
    """Two-sided paired sign-flip permutation test on the mean difference.

    Returns ``(1 + #{|perm| >= |obs|}) / (1 + n_permutations)``; identical
    inputs give exactly 1.0.
    """
    a = np.asarray(metrics_a, dtype=np.float64).ravel()
    b = np.asarray(metrics_b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"paired vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise EmptyInput("no paired metrics")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    d = a - b
    observed = abs(math.fsum(d))
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_permutations, d.size)) * 2 - 1
    hits = sum(abs(math.fsum(row)) >= observed for row in signs * d)
    return (1 + hits) / (1 + n_permutations)


def subsample(n: int, fraction: float, seed: int, classes=None) -> np.ndarray:
    """Deterministic training subset of ``floor(n * fraction)`` indices (at least 1).

    With ``classes`` the draw is stratified: quotas follow the class
    proportions (largest remainder) and every present class keeps at least one
    sample whenever the budget allows. Depends only on its arguments, so every
    pretraining regime sees the same subset.
    """
    if n < 1:
        raise EmptySplit("cannot subsample an empty split")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = max(1, math.floor(n * fraction + 1e-9))
    rng = np.random.default_rng(seed)
    if classes is None:
        return np.sort(rng.permutation(n)[:k])

    classes = np.asarray(classes).ravel()
    if classes.size != n:
        raise LengthMismatch("classes must have one entry per sample")
    labels, counts = np.unique(classes, return_counts=True)
    exact = counts * k / n
    quota = np.floor(exact).astype(np.int64)
    if k >= len(labels):
        quota = np.maximum(quota, 1)
    while quota.sum() > k:
        # trim where the rounding was most generous
        j = int(np.argmax(np.where(quota > 1, quota - exact, -np.inf)))
        quota[j] -= 1
    while quota.sum() < k:
        j = int(np.argmax(np.where(quota < counts, exact - quota, -np.inf)))
        quota[j] += 1
    chosen = []
    for label, q in zip(labels, quota):
        members = np.flatnonzero(classes == label)
        chosen.append(members[rng.permutation(members.size)[:q]])
    return np.sort(np.concatenate(chosen))


def _encoder_from(checkpoint) -> torch.nn.Module:
    if isinstance(checkpoint, ModelBundle):
        bundle = checkpoint
    else:
        bundle = load_checkpoint(checkpoint)[0]
    return copy.deepcopy(bundle.encoder)


def build_task_model(cfg: FinetuneConfig, checkpoint=None, encoder_config: EncoderConfig | None = None, seed: int = 0):
    enc_seed, head_seed = derive_seeds(seed, 2)
    if cfg.pretrained == "none":
        encoder = build_encoder(encoder_config or EncoderConfig(), seed=enc_seed)
    else:
        if checkpoint is None:
            raise IncompatibleCheckpoint(f"pretrained={cfg.pretrained!r} needs a checkpoint")
        encoder = _encoder_from(checkpoint)
        if encoder_config is not None and encoder.cfg != encoder_config:
            raise IncompatibleCheckpoint(f"checkpoint encoder {encoder.cfg} does not match {encoder_config}")
    if cfg.task == "classification":
        return build_classifier_head(encoder, seed=head_seed, num_outputs=NUM_CLASSES - 1)
    return build_unet(encoder, seed=head_seed)


def _check_split(name: str, data: TensorSet, task: str):
    if data is None or len(data) == 0:
        raise EmptySplit(f"{name} split is empty")
    if task == "classification" and data.classes is None:
        raise EmptySplit(f"{name} split has no quality classes")
    if task == "segmentation" and data.masks is None:
        raise EmptySplit(f"{name} split has no masks")


def _loss(model, task: str, x, target, pos_weight: float):
    logits = model(x) if task == "classification" else model.logits(x)
    if task == "classification":
        return weighted_bce(logits, target, pos_weight)
    return pooled_dice_loss(torch.sigmoid(logits), target)


def pooled_dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft dice per channel with the batch pooled into one region.

    Per-image dice gives no gradient toward an empty prediction when an organ
    is absent from the image; pooling over the batch does.
    """
    c = pred.shape[1]
    flat = lambda t: t.transpose(0, 1).reshape(c, -1, t.shape[-1])
    return soft_dice_loss(flat(pred), flat(target))


def _targets(data: TensorSet, task: str) -> torch.Tensor:
    return ordinal_targets(data.classes) if task == "classification" else data.masks


def _set_mode(model, train: bool, freeze: bool):
    model.train(train)
    if freeze:
        model.encoder.eval()


@torch.no_grad()
def _mean_loss(model, data: TensorSet, cfg: FinetuneConfig) -> float:
    _set_mode(model, False, cfg.freeze_encoder)
    targets = _targets(data, cfg.task)
    total = 0.0
    for idx in batches(len(data), cfg.batch_size, shuffle=False):
        total += float(_loss(model, cfg.task, data.images[idx], targets[idx], cfg.pos_weight)) * len(idx)
    return total / len(data)


@torch.no_grad()
def per_sample_metrics(model, data: TensorSet, task: str, batch_size: int = 8) -> np.ndarray:
    """Exact-class accuracy (0/1) or mean liver/kidney hard dice, one value per image."""
    model.eval()
    out = []
    for idx in batches(len(data), batch_size, shuffle=False):
        x = data.images[idx]
        if task == "classification":
            pred = decode_batch(torch.sigmoid(model(x)))
            out.append((pred == data.classes[idx]).to(torch.float64).numpy())
        else:
            pred = (model(x) > 0.5).to(torch.float64)
            out.append(dice_per_channel(pred, data.masks[idx]).mean(dim=1).numpy())
    return np.concatenate(out)


@dataclass
class FinetuneResult:
    model: torch.nn.Module
    report: MetricsReport
    per_sample: np.ndarray
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    train_indices: np.ndarray | None = None


def finetune(
    checkpoint,
    cfg: FinetuneConfig,
    train: TensorSet,
    val: TensorSet,
    test: TensorSet,
    encoder_config: EncoderConfig | None = None,
) -> FinetuneResult:
    """Fine-tune on ``train``, keep the lowest-validation-loss state, report on ``test``.

    ``checkpoint`` is a pretraining checkpoint path or bundle; it is ignored
    when ``cfg.pretrained == "none"``.
    """
    for name, split in (("train", train), ("val", val), ("test", test)):
        _check_split(name, split, cfg.task)
    init_seed, shuffle_seed, dropout_seed = derive_seeds(cfg.seed, 3)
    model = build_task_model(cfg, checkpoint if cfg.pretrained != "none" else None, encoder_config, init_seed)

    stratify = train.classes.numpy() if cfg.task == "classification" else None
    keep = subsample(len(train), cfg.data_fraction, cfg.seed, stratify)
    sub = train.subset(keep)
    targets = _targets(sub, cfg.task)

    if cfg.freeze_encoder:
        model.encoder.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    gen = torch.Generator().manual_seed(shuffle_seed)

    history, best = [], (math.inf, 0, None)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(dropout_seed)  # dropout masks
        for epoch in range(1, cfg.epochs + 1):
            _set_mode(model, True, cfg.freeze_encoder)
            total = 0.0
            for idx in batches(len(sub), cfg.batch_size, gen):
                opt.zero_grad(set_to_none=True)
                loss = _loss(model, cfg.task, sub.images[idx], targets[idx], cfg.pos_weight)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            val_loss = _mean_loss(model, val, cfg)
            history.append({"epoch": epoch, "train_loss": total / len(sub), "val_loss": val_loss})
            if val_loss < best[0]:
                best = (val_loss, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()

    values = per_sample_metrics(model, test, cfg.task, cfg.batch_size)
    report = evaluate_bootstrap(values, cfg.n_bootstrap, cfg.seed, cfg.metric)
    return FinetuneResult(model, report, values, history, best[1], keep)


@dataclass
class GridCell:
    task: str
    pretrained: str
    freeze: bool
    fraction: float
    report: MetricsReport | None = None
    per_sample: np.ndarray | None = None
    p_vs_no_dicom: float | None = None
    error: str | None = None

    @property
    def key(self):
        return (self.task, self.pretrained, self.freeze, self.fraction)


@dataclass
class GridResult:
    cells: list[GridCell]
    seed: int

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            if c.report is None:
                continue
            out.append(
                {
                    "task": c.task,
                    "pretrained": c.pretrained,
                    "freeze": int(c.freeze),
                    "fraction": repr(float(c.fraction)),
                    "metric": c.report.metric,
                    "mean": repr(c.report.mean),
                    "std": repr(c.report.std),
                    "p_vs_no_dicom": "" if c.p_vs_no_dicom is None else repr(c.p_vs_no_dicom),
                    "seed": self.seed,
                }
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv(), encoding="utf-8", newline="")
        tmp.replace(path)

    def failures(self) -> list[GridCell]:
        return [c for c in self.cells if c.error is not None]


_REGIME_NAMES = {"none": "None", "ce_plain": "CE w/o DICOM", "ce_dicom": "CE w DICOM"}


def format_table(result: GridResult) -> str:
    """Text table with regimes as rows, task x fraction as columns."""
    tasks = [t for t in TASKS if any(c.task == t for c in result.cells)]
    fractions = sorted({c.fraction for c in result.cells}, reverse=True)
    lookup = {c.key: c for c in result.cells}
    head = ["Pretraining", "Freeze"] + [
        f"{METRIC_FOR_TASK[t]} {100 * f:g}%" for t in tasks for f in fractions
    ]
    lines = [head]
    for pre, frz in REGIMES:
        row = [_REGIME_NAMES[pre], "yes" if frz else ""]
        for t in tasks:
            for f in fractions:
                c = lookup.get((t, pre, frz, f))
                if c is None or c.report is None:
                    row.append("n/a" if c is None else "failed")
                    continue
                mark = "*" if c.p_vs_no_dicom is not None and c.p_vs_no_dicom < 0.05 else ""
                row.append(f"{c.report.mean:.3f} +/- {c.report.std:.3f}{mark}")
        lines.append(row)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines) + "\n"


def _run_cell(args):
    task, pre, frz, fraction, checkpoint, splits, overrides, encoder_config, seed = args
    cfg = FinetuneConfig(task=task, pretrained=pre, freeze_encoder=frz, data_fraction=fraction, seed=seed, **overrides)
    try:
        res = finetune(checkpoint, cfg, *splits, encoder_config=encoder_config)
    except Exception as exc:  # keep the rest of the grid
        return None, None, f"{type(exc).__name__}: {exc}"
    return res.report, res.per_sample, None


def run_ablation_grid(
    checkpoints: dict,
    data: dict,
    fractions: Sequence[float] = (1.0, 0.05),
    regimes: Sequence[tuple[str, bool]] = REGIMES,
    seed: int = 0,
    overrides: dict | None = None,
    encoder_config: EncoderConfig | None = None,
    n_permutations: int = 10000,
    jobs: int = 1,
    out_csv=None,
    raise_on_failure: bool = True,
) -> GridResult:
    """Fine-tune every (task, regime, fraction) cell and compare DICOM vs plain pretraining.

    ``checkpoints`` maps ``ce_plain`` / ``ce_dicom`` to checkpoint paths;
    ``data`` maps task name to its ``(train, val, test)`` splits, so all cells
    of a task share one test set. ``overrides`` maps task name to extra
    ``FinetuneConfig`` fields (e.g. epochs). Completed cells are written to
    ``out_csv`` even when others fail.
    """
    overrides = overrides or {}
    unknown = set(data) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    cells, jobs_args = [], []
    for task in (t for t in TASKS if t in data):
        for pre, frz in regimes:
            for f in fractions:
                cells.append(GridCell(task, pre, bool(frz), float(f)))
                ckpt = None if pre == "none" else checkpoints[pre]
                jobs_args.append((task, pre, bool(frz), float(f), ckpt, data[task], overrides.get(task, {}), encoder_config, seed))

    if jobs > 1:
        with ProcessPoolExecutor(jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            outcomes = list(pool.map(_run_cell, jobs_args))
    else:
        outcomes = [_run_cell(a) for a in jobs_args]
    for cell, (report, values, err) in zip(cells, outcomes):
        cell.report, cell.per_sample, cell.error = report, values, err
        if err:
            logger.error("cell %s failed: %s", cell.key, err)

    lookup = {c.key: c for c in cells}
    for c in cells:
        base = lookup.get((c.task, "ce_plain", c.freeze, c.fraction))
        if c.pretrained == "ce_dicom" and c.report is not None and base is not None and base.report is not None:
            c.p_vs_no_dicom = paired_significance(c.per_sample, base.per_sample, n_permutations, seed)
            c.report.p_value = c.p_vs_no_dicom

    result = GridResult(cells, seed)
    if out_csv is not None:
        result.write_csv(out_csv)
    if raise_on_failure and result.failures():
        first = result.failures()[0]
        raise RuntimeError(f"{len(result.failures())} grid cell(s) failed; first {first.key}: {first.error}")
    return result
