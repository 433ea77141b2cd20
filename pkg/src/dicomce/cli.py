"""Command-line entry point: ``dicomce {ingest,synth,pretrain,finetune,evaluate,demo}``.

Every training subcommand resolves its options as built-in defaults < JSON
config file (``--config``) < command-line flags, and writes the effective
configuration to ``config.json`` in its run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import DicomCEError

logger = logging.getLogger("dicomce")

IMAGE_SIZE = [256, 384]

DEFAULTS = {
    "ingest": {"split_fraction": 0.8, "seed": 0, "strict": True, "table": None},
    "synth": {
        "n": 256,
        "height": 64,
        "width": 64,
        "noise_level": 0.25,
        "jitter": 0.04,
        "organ_mode": "label",
        "descriptions": None,
        "split_fraction": 0.8,
        "seed": 0,
    },
    "pretrain": {
        "size": IMAGE_SIZE,
        "conditioned": True,
        "lambda_rec": 0.99,
        "lambda_adv": 0.01,
        "g_lr": 1e-4,
        "d_lr": 1e-5,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "batch_size": 8,
        "epochs": 200,
        "update_ratio": 1,
        "model_width": 64,
        "disc_width": None,
        "convs_per_block": None,
        "keep": "best",
        "seed": 0,
    },
    "finetune": {
        "size": IMAGE_SIZE,
        "task": "classification",
        "pretrained": "none",
        "checkpoint": None,
        "freeze_encoder": False,
        "data_fraction": 1.0,
        "batch_size": None,
        "lr": None,
        "epochs": None,
        "pos_weight": 2.0,
        "n_bootstrap": 10,
        "model_width": 64,
        "convs_per_block": None,
        "seed": 0,
    },
    "evaluate": {
        "size": IMAGE_SIZE,
        "tasks": ["classification", "segmentation"],
        "fractions": [1.0, 0.05],
        "plain_checkpoint": None,
        "dicom_checkpoint": None,
        "classification_epochs": None,
        "segmentation_epochs": None,
        "lr": None,
        "n_bootstrap": 10,
        "n_permutations": 10000,
        "model_width": 64,
        "convs_per_block": None,
        "jobs": 1,
        "seed": 0,
    },
}


class UsageError(Exception):
    pass


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file, and explicitly given flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _run_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(run_dir: Path, command: str, cfg: dict, extra: dict | None = None):
    doc = {"command": command, "version": __version__, **(extra or {}), "config": cfg}
    (run_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _log_to(run_dir: Path):
    handler = logging.FileHandler(run_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("dicomce").addHandler(handler)
    return handler


def _encoder_config(cfg: dict):
    from .nets import EncoderConfig

    return EncoderConfig(base_width=cfg["model_width"], convs_per_block=cfg["convs_per_block"])


def _model_config(cfg: dict):
    from .nets import DecoderConfig, DiscriminatorConfig, ModelConfig

    enc = _encoder_config(cfg)
    return ModelConfig(
        enc,
        DecoderConfig(in_channels=enc.out_channels, base_width=cfg["model_width"]),
        DiscriminatorConfig(base_width=cfg["disc_width"] or cfg["model_width"]),
    )


def _load_split(manifest, size, split):
    from .data import load_records
    from .metadata import read_manifest

    manifest = Path(manifest)
    return load_records(read_manifest(manifest), manifest.parent, tuple(size), split)


def _downstream_splits(manifest, size, seed):
    """Train split as-is; the val split is halved into val and test."""
    from .metadata import split_indices

    train = _load_split(manifest, size, "train")
    rest = _load_split(manifest, size, "val")
    first = split_indices(len(rest), 0.5, seed)
    val, test = rest.subset(np.flatnonzero(first)), rest.subset(np.flatnonzero(~first))
    return train, val, test


# --- subcommands -------------------------------------------------------------


def cmd_ingest(args) -> int:
    from .metadata import StudyDescriptionTable, audit_manifest, build_manifest, load_default_table, write_manifest

    cfg = resolve("ingest", args)
    table = StudyDescriptionTable.from_file(cfg["table"]) if cfg["table"] else load_default_table()
    images = Path(args.images)
    out = Path(args.out)
    rows, extras = [], []
    with open(args.metadata, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_path", "transducer", "study_description"} - set(reader.fieldnames or ())
        if missing:
            raise UsageError(f"metadata file lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            img = images / row["image_path"]
            if not img.is_file():
                raise FileNotFoundError(f"image not found: {img}")
            rel = Path(os.path.relpath(img, out.parent)).as_posix()
            rows.append((rel, row["transducer"], row["study_description"]))
            extra = {}
            if row.get("quality_class"):
                extra["quality_class"] = int(row["quality_class"])
            if row.get("mask_path"):
                extra["mask_path"] = Path(os.path.relpath(images / row["mask_path"], out.parent)).as_posix()
            extras.append(extra)
    records = build_manifest(rows, table, cfg["split_fraction"], cfg["seed"], cfg["strict"], extras)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(records, out)
    print(audit_manifest(records).summary())
    return 0


def cmd_synth(args) -> int:
    from .synthdata import PhantomSpec, generate_corpus, write_corpus

    cfg = resolve("synth", args)
    out = _run_dir(args.out)
    spec = PhantomSpec(
        height=cfg["height"],
        width=cfg["width"],
        noise_level=cfg["noise_level"],
        jitter=cfg["jitter"],
        organ_mode=cfg["organ_mode"],
        descriptions=tuple(cfg["descriptions"]) if cfg["descriptions"] else None,
        seed=cfg["seed"],
    )
    corpus = generate_corpus(spec, cfg["n"])
    records = write_corpus(corpus, out, spec, cfg["split_fraction"], cfg["seed"])
    _echo_config(out, "synth", cfg)
    n_train = sum(r.split == "train" for r in records)
    print(f"wrote {len(records)} phantoms ({n_train} train / {len(records) - n_train} val) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .losses import LossWeights
    from .pretrain import PretrainConfig, run_pretraining

    cfg = resolve("pretrain", args)
    run_dir = _run_dir(args.run_dir)
    pcfg = PretrainConfig(
        conditioned=cfg["conditioned"],
        weights=LossWeights(cfg["lambda_rec"], cfg["lambda_adv"]),
        g_lr=cfg["g_lr"],
        d_lr=cfg["d_lr"],
        adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        update_ratio=cfg["update_ratio"],
    )
    _echo_config(run_dir, "pretrain", cfg, {"manifest": str(args.manifest)})
    handler = _log_to(run_dir)
    try:
        train = _load_split(args.manifest, cfg["size"], "train")
        val = _load_split(args.manifest, cfg["size"], "val")
        res = run_pretraining(train, val, pcfg, _model_config(cfg), out_dir=run_dir, log_every=1, keep=cfg["keep"])
    finally:
        logging.getLogger("dicomce").removeHandler(handler)
        handler.close()
    print(f"best epoch {res.best_epoch} val_joint {res.best_val:.6f}; checkpoints in {run_dir}")
    return 0


def cmd_finetune(args) -> int:
    from .downstream import FinetuneConfig, finetune

    cfg = resolve("finetune", args)
    run_dir = _run_dir(args.run_dir)
    fcfg = FinetuneConfig(
        task=cfg["task"],
        pretrained=cfg["pretrained"],
        freeze_encoder=cfg["freeze_encoder"],
        data_fraction=cfg["data_fraction"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        pos_weight=cfg["pos_weight"],
        n_bootstrap=cfg["n_bootstrap"],
        seed=cfg["seed"],
    )
    if fcfg.pretrained != "none" and not cfg["checkpoint"]:
        raise UsageError(f"--checkpoint is required with --pretrained {fcfg.pretrained}")
    _echo_config(run_dir, "finetune", cfg, {"manifest": str(args.manifest)})
    handler = _log_to(run_dir)
    try:
        splits = _downstream_splits(args.manifest, cfg["size"], cfg["seed"])
        res = finetune(cfg["checkpoint"], fcfg, *splits, encoder_config=_encoder_config(cfg))
    finally:
        logging.getLogger("dicomce").removeHandler(handler)
        handler.close()
    torch.save(res.model.state_dict(), run_dir / "model.pt")
    report = {
        "task": fcfg.task,
        "pretrained": fcfg.pretrained,
        "freeze": fcfg.freeze_encoder,
        "fraction": fcfg.data_fraction,
        "seed": fcfg.seed,
        "best_epoch": res.best_epoch,
        "report": res.report.to_dict(),
        "per_sample": [float(v) for v in res.per_sample],
        "train_indices": [int(i) for i in res.train_indices],
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    with open(run_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["epoch", "train_loss", "val_loss"], lineterminator="\n")
        w.writeheader()
        w.writerows(res.history)
    r = res.report
    print(f"{r.metric}: {r.mean:.4f} +/- {r.std:.4f} (point {r.point:.4f}, n_test {len(res.per_sample)})")
    return 0


def _grid_from_runs(run_dirs, n_permutations: int, seed: int):
    """Rebuild a GridResult from finetune run directories."""
    from .downstream import GridCell, GridResult, MetricsReport, paired_significance

    cells = []
    for d in run_dirs:
        doc = json.loads((Path(d) / "report.json").read_text(encoding="utf-8"))
        rep = doc["report"]
        rep["resamples"] = tuple(rep["resamples"])
        cells.append(
            GridCell(
                doc["task"],
                doc["pretrained"],
                bool(doc["freeze"]),
                float(doc["fraction"]),
                MetricsReport(**rep),
                np.asarray(doc["per_sample"], dtype=np.float64),
            )
        )
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        raise UsageError("two runs share the same (task, pretrained, freeze, fraction) cell")
    lookup = dict(zip(keys, cells))
    for c in cells:
        base = lookup.get((c.task, "ce_plain", c.freeze, c.fraction))
        if c.pretrained == "ce_dicom" and base is not None:
            c.p_vs_no_dicom = paired_significance(c.per_sample, base.per_sample, n_permutations, seed)
    return GridResult(cells, seed)


def cmd_evaluate(args) -> int:
    from .downstream import format_table, run_ablation_grid

    cfg = resolve("evaluate", args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.grid:
        if not args.manifest:
            raise UsageError("--grid needs --manifest")
        ckpts = {"ce_plain": cfg["plain_checkpoint"], "ce_dicom": cfg["dicom_checkpoint"]}
        missing = [k for k, v in ckpts.items() if not v]
        if missing:
            raise UsageError("--grid needs --plain-checkpoint and --dicom-checkpoint")
        splits = _downstream_splits(args.manifest, cfg["size"], cfg["seed"])
        data = {t: splits for t in cfg["tasks"]}
        overrides = {}
        for t in cfg["tasks"]:
            o = {"n_bootstrap": cfg["n_bootstrap"]}
            if cfg[f"{t}_epochs"] is not None:
                o["epochs"] = cfg[f"{t}_epochs"]
            if cfg["lr"] is not None:
                o["lr"] = cfg["lr"]
            overrides[t] = o
        _echo_config(out.parent, "evaluate", cfg, {"manifest": str(args.manifest), "grid": True})
        result = run_ablation_grid(
            ckpts,
            data,
            fractions=cfg["fractions"],
            seed=cfg["seed"],
            overrides=overrides,
            encoder_config=_encoder_config(cfg),
            n_permutations=cfg["n_permutations"],
            jobs=cfg["jobs"],
            out_csv=out,
        )
    else:
        if not args.runs:
            raise UsageError("give finetune run directories with --runs, or use --grid")
        result = _grid_from_runs(args.runs, cfg["n_permutations"], cfg["seed"])
        result.write_csv(out)
    table = format_table(result)
    out.with_suffix(".txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_demo(args) -> int:
    from .pretrain import inpaint_demo

    records = _load_split(args.manifest, args.size, args.split)
    n = min(args.n, len(records))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inpaint_demo(args.checkpoint, records.images[:n], out)
    print(f"wrote {n}-row inpainting grid to {out}")
    return 0


# --- parser ------------------------------------------------------------------


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction, default=None, help=help)


def _common(p, with_config=True):
    if with_config:
        p.add_argument("--config", help="JSON file of option overrides (flags win)")
    p.add_argument("--seed", type=int, help="root seed for every random choice")


def _size(p):
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="resize target (default 256 384)")


def _model(p):
    p.add_argument("--model-width", type=int, help="encoder base width (64 = VGG16)")
    p.add_argument("--convs-per-block", type=int, help="convs per encoder stage (default: VGG16 layout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicomce", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a weak-label manifest from a metadata CSV")
    p.add_argument("--images", required=True, help="directory the image paths are relative to")
    p.add_argument("--metadata", required=True, help="CSV with image_path, transducer, study_description")
    p.add_argument("--out", required=True, help="manifest (.jsonl) to write")
    p.add_argument("--table", help="study-description table (TSV); default is the bundled one")
    p.add_argument("--split-fraction", type=float)
    _bool_flag(p, "strict", "fail on unknown study descriptions (default on)")
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--organ-mode", choices=["label", "random"])
    p.add_argument("--descriptions", nargs="+", help="restrict to these study descriptions")
    p.add_argument("--split-fraction", type=float)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train a context encoder (optionally metadata-conditioned)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    _bool_flag(p, "conditioned", "condition the discriminator on the weak label (default on)")
    p.add_argument("--lambda-rec", type=float)
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--g-lr", type=float)
    p.add_argument("--d-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--update-ratio", type=int, help="discriminator steps per generator step")
    p.add_argument("--disc-width", type=int)
    p.add_argument("--keep", choices=["best", "last"], help="which state to return (best.pt is always written)")
    _model(p)
    _size(p)
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on quality classification or organ segmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--task", choices=["classification", "segmentation"])
    p.add_argument("--pretrained", choices=["none", "ce_plain", "ce_dicom"])
    p.add_argument("--checkpoint")
    _bool_flag(p, "freeze-encoder", "keep encoder weights fixed")
    p.add_argument("--data-fraction", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pos-weight", type=float)
    p.add_argument("--n-bootstrap", type=int)
    _model(p)
    _size(p)
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="collect finetune runs (or run the full grid) into a results table")
    p.add_argument("--out", required=True, help="results CSV; a text table is written next to it")
    p.add_argument("--runs", nargs="+", help="finetune run directories")
    p.add_argument("--grid", action="store_true", help="run every regime x fraction x task cell")
    p.add_argument("--manifest")
    p.add_argument("--plain-checkpoint")
    p.add_argument("--dicom-checkpoint")
    p.add_argument("--tasks", nargs="+", choices=["classification", "segmentation"])
    p.add_argument("--fractions", nargs="+", type=float)
    p.add_argument("--classification-epochs", type=int)
    p.add_argument("--segmentation-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-bootstrap", type=int)
    p.add_argument("--n-permutations", type=int)
    p.add_argument("--jobs", type=int, help="parallel grid workers")
    _model(p)
    _size(p)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="render masked / inpainted / original panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--size", type=int, nargs=2, default=IMAGE_SIZE, metavar=("H", "W"))
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("dicomce")
    root.setLevel(logging.INFO)
    root.addHandler(console)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DicomCEError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"dicomce {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        root.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
