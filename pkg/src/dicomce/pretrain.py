"""Adversarial context-encoder pretraining, with or without metadata conditioning."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import TensorSet, batches
from .errors import EmptySplit, NonFiniteLoss
from .losses import LossWeights, adv_loss_d, adv_loss_g, joint_loss, rec_loss
from .nets import ModelBundle, ModelConfig, build_bundle, load_checkpoint, save_checkpoint
from .preprocessing import composite, mask_center

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_rec", "train_adv_d", "train_adv_g", "train_joint", "val_joint")


@dataclass
class PretrainConfig:
    conditioned: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    g_lr: float = 1e-4
    d_lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    update_ratio: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.update_ratio < 1:
            raise ValueError("epochs, batch_size and update_ratio must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLosses:
    rec: float
    adv_d: float
    adv_g: float
    joint: float


@dataclass
class Optimizers:
    g: torch.optim.Optimizer
    d: torch.optim.Optimizer


def make_optimizers(bundle: ModelBundle, cfg: PretrainConfig) -> Optimizers:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return Optimizers(
        torch.optim.Adam(bundle.generator.parameters(), lr=cfg.g_lr, betas=betas),
        torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.d_lr, betas=betas),
    )


def _check_finite(where: str, **values):
    bad = {k: float(v) for k, v in values.items() if not torch.isfinite(torch.as_tensor(v)).all()}
    if bad:
        raise NonFiniteLoss(f"non-finite loss at {where}: {bad}")


def generate(bundle: ModelBundle, x: torch.Tensor):
    """Inpaint the masked center; returns ``(fake_full, fake_patch, target_patch)``."""
    masked, target, spec = mask_center(x)
    fake_patch = bundle.generator(masked)
    return composite(masked, fake_patch, spec), fake_patch, target


def discriminator_step(bundle, opt, real, fake_full, y) -> torch.Tensor:
    opt.zero_grad(set_to_none=True)
    d = bundle.discriminator
    loss = adv_loss_d(d(real, y), d(fake_full.detach(), y))
    _check_finite("discriminator step", adv_d=loss.detach())
    loss.backward()
    opt.step()
    return loss.detach()


def generator_step(bundle, opt, fake_full, fake_patch, target, y, weights: LossWeights):
    opt.zero_grad(set_to_none=True)
    l_rec = rec_loss(fake_patch, target)
    l_adv = adv_loss_g(bundle.discriminator(fake_full, y))
    total = joint_loss(l_rec, l_adv, weights)
    _check_finite("generator step", rec=l_rec.detach(), adv_g=l_adv.detach())
    total.backward()
    opt.step()
    # D picked up gradients from this backward pass; they must not leak into its next step
    bundle.discriminator.zero_grad(set_to_none=True)
    return l_rec.detach(), l_adv.detach(), total.detach()


def pretrain_step(bundle: ModelBundle, batch, cfg: PretrainConfig, opts: Optimizers) -> StepLosses:
    """One (or ``update_ratio``) discriminator update followed by one generator update."""
    x, y = batch
    if x.shape[0] == 0:
        raise EmptySplit("empty batch")
    y_d = y if cfg.conditioned else None
    bundle.generator.train()
    bundle.discriminator.train()
    fake_full, fake_patch, target = generate(bundle, x)
    for _ in range(cfg.update_ratio):
        l_d = discriminator_step(bundle, opts.d, x, fake_full, y_d)
    l_rec, l_g, total = generator_step(bundle, opts.g, fake_full, fake_patch, target, y_d, cfg.weights)
    return StepLosses(float(l_rec), float(l_d), float(l_g), float(total))


@torch.no_grad()
def validation_joint_loss(bundle: ModelBundle, data: TensorSet, cfg: PretrainConfig, batch_size: int | None = None) -> float:
    bundle.generator.eval()
    bundle.discriminator.eval()
    total, n = 0.0, 0
    for idx in batches(len(data), batch_size or cfg.batch_size, shuffle=False):
        x = data.images[idx]
        y = data.labels[idx] if cfg.conditioned else None
        fake_full, fake_patch, target = generate(bundle, x)
        loss = joint_loss(rec_loss(fake_patch, target), adv_loss_g(bundle.discriminator(fake_full, y)), cfg.weights)
        total += float(loss) * len(idx)
        n += len(idx)
    return total / n


@dataclass
class PretrainResult:
    bundle: ModelBundle
    history: list[dict]
    best_epoch: int
    best_val: float


def derive_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_pretraining(
    train: TensorSet,
    val: TensorSet,
    cfg: PretrainConfig,
    model_config: ModelConfig | None = None,
    bundle: ModelBundle | None = None,
    out_dir=None,
    log_every: int = 0,
    keep: str = "best",
) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs; return the state with the lowest validation joint loss.

    ``keep="last"`` returns the final state instead (the history and best epoch
    are still reported, and ``best.pt`` is still written).
    """
    if keep not in ("best", "last"):
        raise ValueError("keep must be 'best' or 'last'")
    if len(train) == 0 or len(val) == 0:
        raise EmptySplit("pretraining needs non-empty train and val splits")
    init_seed, shuffle_seed = derive_seeds(cfg.seed, 2)
    if bundle is None:
        bundle = build_bundle(model_config or ModelConfig.full(), seed=init_seed)
    opts = make_optimizers(bundle, cfg)
    gen = torch.Generator().manual_seed(shuffle_seed)
    out = Path(out_dir) if out_dir is not None else None

    history = []
    best_val, best_epoch, best_state = float("inf"), -1, None
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        steps = 0
        for idx in batches(len(train), cfg.batch_size, gen):
            s = pretrain_step(bundle, (train.images[idx], train.labels[idx]), cfg, opts)
            sums += (s.rec, s.adv_d, s.adv_g, s.joint)
            steps += 1
        val_joint = validation_joint_loss(bundle, val, cfg)
        _check_finite(f"epoch {epoch} validation", val_joint=val_joint)
        row = dict(zip(HISTORY_COLUMNS, (epoch, *(float(v) for v in sums / steps), float(val_joint))))
        history.append(row)
        if log_every and epoch % log_every == 0:
            logger.info(
                "epoch %d rec %.4f adv_d %.4f adv_g %.4f val %.4f",
                epoch, row["train_rec"], row["train_adv_d"], row["train_adv_g"], row["val_joint"],
            )
        if val_joint < best_val:
            best_val, best_epoch = val_joint, epoch
            best_state = (
                copy.deepcopy(bundle.generator.state_dict()),
                copy.deepcopy(bundle.discriminator.state_dict()),
            )
            if out is not None:
                save_checkpoint(out / "best.pt", bundle, {"epoch": epoch, "val_joint": val_joint, "conditioned": cfg.conditioned})

    if out is not None:
        save_checkpoint(out / "last.pt", bundle, {"epoch": cfg.epochs, "val_joint": history[-1]["val_joint"], "conditioned": cfg.conditioned})
    if keep == "best":
        bundle.generator.load_state_dict(best_state[0])
        bundle.discriminator.load_state_dict(best_state[1])
    if out is not None:
        write_history(history, out / "history.csv")
    return PretrainResult(bundle, history, best_epoch, best_val)


@torch.no_grad()
def conditioning_auc(discriminator, images: torch.Tensor, labels: torch.Tensor, conditioned: bool = True) -> float:
    """How often ``D(x, y_true)`` outranks ``D(x, y_wrong)`` for the same image.

    Every distinct label in ``labels`` other than the image's own serves as a
    wrong label; ties count one half. With ``conditioned=False`` the label is
    never shown to D, so the result is exactly 0.5.
    """
    discriminator.eval()
    candidates = torch.unique(labels, dim=0)
    if candidates.shape[0] < 2:
        raise ValueError("need at least two distinct labels")
    h = discriminator.features(images)
    base = discriminator.rf_head(h).squeeze(-1)
    if conditioned:
        scores = base[:, None] + (h @ discriminator.projection) @ candidates.T.to(h.dtype)
    else:
        scores = base[:, None].expand(-1, candidates.shape[0])
    own = (labels[:, None, :] == candidates[None]).all(dim=-1)
    match = scores[own][:, None]
    wrong = scores[~own].view(len(images), -1)
    wins = (match > wrong).double().mean() + 0.5 * (match == wrong).double().mean()
    return float(wins)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
        ]


def _to_uint8(img: np.ndarray, lo: float = -3.0, hi: float = 3.0) -> np.ndarray:
    return np.round((np.clip(img, lo, hi) - lo) / (hi - lo) * 255).astype(np.uint8)


@torch.no_grad()
def inpaint_demo(checkpoint, images: torch.Tensor, out_path=None) -> np.ndarray:
    """Grid with one row per image: masked input, generated composite, original.

    ``checkpoint`` is a path or a ``ModelBundle``; returns the ``(n, 3, H, W)``
    panel stack and writes an 8-bit PNG when ``out_path`` is given.
    """
    bundle = checkpoint if isinstance(checkpoint, ModelBundle) else load_checkpoint(checkpoint)[0]
    bundle.generator.eval()
    x = images if images.ndim == 4 else images[:, None]
    masked, _, spec = mask_center(x)
    fake = composite(masked, bundle.generator(masked), spec)
    panels = torch.stack([masked[:, 0], fake[:, 0], x[:, 0]], dim=1).numpy()
    if out_path is not None:
        n, _, h, w = panels.shape
        sep = 2
        grid = np.full((n * h + (n - 1) * sep, 3 * w + 2 * sep), 255, dtype=np.uint8)
        for i in range(n):
            for j in range(3):
                grid[i * (h + sep) : i * (h + sep) + h, j * (w + sep) : j * (w + sep) + w] = _to_uint8(panels[i, j])
        Image.fromarray(grid).save(out_path)
    return panels
