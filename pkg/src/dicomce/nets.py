"""Encoder, inpainting decoder, projection discriminator and downstream heads.

Full-scale settings follow VGG16-BN (five conv stages, 64..512 channels) on
256x384 inputs. Every width is a constructor argument so the same classes run
at desk scale (32x32 inputs, a few thousand parameters) in tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .errors import IncompatibleCheckpoint, IncompatibleShape, ShapeMismatch
from .metadata import LABEL_DIM

CHECKPOINT_FORMAT = 1

VGG16_CONVS = (2, 2, 3, 3, 3)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    base_width: int = 64
    num_down_blocks: int = 5
    use_batchnorm: bool = True
    # convs per stage; None means the VGG16 layout (2, 2, 3, 3, 3)
    convs_per_block: int | None = None
    max_width_mult: int = 8

    def __post_init__(self):
        if self.num_down_blocks < 1:
            raise ValueError("num_down_blocks must be >= 1")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts must be positive")

    def stage_widths(self) -> list[int]:
        return [self.base_width * min(2**i, self.max_width_mult) for i in range(self.num_down_blocks)]

    def stage_convs(self) -> list[int]:
        if self.convs_per_block is not None:
            return [self.convs_per_block] * self.num_down_blocks
        return [VGG16_CONVS[min(i, len(VGG16_CONVS) - 1)] for i in range(self.num_down_blocks)]

    @property
    def out_channels(self) -> int:
        return self.stage_widths()[-1]

    @property
    def downsample(self) -> int:
        return 2**self.num_down_blocks


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int = 512
    base_width: int = 64
    num_up_blocks: int = 4
    kernel: int = 3
    out_channels: int = 1

    def block_widths(self) -> list[int]:
        return [self.base_width * 2 ** (self.num_up_blocks - 1 - i) for i in range(self.num_up_blocks)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_width: int = 64
    num_blocks: int = 4
    label_dim: int = LABEL_DIM
    norm: str = "instance"
    max_width_mult: int = 8

    def widths(self) -> list[int]:
        return [self.base_width * min(2**i, self.max_width_mult) for i in range(self.num_blocks)]

    @property
    def feature_dim(self) -> int:
        return self.widths()[-1]


def _conv_bn_relu(cin, cout, bn):
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class Encoder(nn.Module):
    """VGG-style encoder: ``num_down_blocks`` conv stages, each closed by 2x2 max-pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = cfg.in_channels
        for width, n_conv in zip(cfg.stage_widths(), cfg.stage_convs()):
            layers = []
            for _ in range(n_conv):
                layers += _conv_bn_relu(cin, width, cfg.use_batchnorm)
                cin = width
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2)

    def check_input(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        k = self.cfg.downsample
        if h % k or w % k:
            raise IncompatibleShape(f"input {h}x{w} not divisible by {k} ({self.cfg.num_down_blocks} down blocks)")

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Bottleneck plus the pre-pooling output of every stage (for skip connections)."""
        self.check_input(x)
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return x, skips

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[0]


class Decoder(nn.Module):
    """Up-convolution stack: each block doubles resolution (3x3 transposed conv, BN, ReLU)."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.kernel // 2
        layers = []
        cin = cfg.in_channels
        for width in cfg.block_widths():
            layers += [
                nn.ConvTranspose2d(cin, width, cfg.kernel, stride=2, padding=pad, output_padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            cin = width
        self.blocks = nn.Sequential(*layers)
        # linear output: targets are z-scored pixels
        self.head = nn.Conv2d(cin, cfg.out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.blocks(z))


class ContextEncoder(nn.Module):
    """Maps a center-masked image to a prediction of the missing H/2 x W/2 patch."""

    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        k, u = encoder.cfg.num_down_blocks, decoder.cfg.num_up_blocks
        # bottleneck (H / 2^k) * 2^u must equal the patch height H / 2
        if u != k - 1:
            raise IncompatibleShape(f"{k} down blocks need {k - 1} up blocks to reach the half-size patch, got {u}")
        if decoder.cfg.in_channels != encoder.cfg.out_channels:
            raise IncompatibleShape(
                f"decoder expects {decoder.cfg.in_channels} channels, encoder emits {encoder.cfg.out_channels}"
            )
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, masked: torch.Tensor) -> torch.Tensor:
        out = self.decoder(self.encoder(masked))
        h, w = masked.shape[-2:]
        if tuple(out.shape[-2:]) != (h // 2, w // 2):
            raise IncompatibleShape(f"generated patch {tuple(out.shape[-2:])} != mask {(h // 2, w // 2)}")
        return out


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class ProjectionDiscriminator(nn.Module):
    """``D(x, y) = C_rf(phi(x)) + phi(x)^T W y`` with ``phi`` a strided conv stack + global pooling."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for i, width in enumerate(cfg.widths()):
            layers.append(nn.Conv2d(cin, width, 4, stride=2, padding=1))
            if i > 0:
                layers.append(_norm(cfg.norm, width))
            layers.append(nn.LeakyReLU(0.2))
            cin = width
        self.body = nn.Sequential(*layers)
        d = cfg.feature_dim
        self.rf_head = nn.Linear(d, 1)
        self.projection = nn.Parameter(torch.empty(d, cfg.label_dim))
        nn.init.xavier_uniform_(self.projection)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(-2, -1))

    def project(self, h: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.cfg.label_dim:
            raise ShapeMismatch(f"label length {y.shape[-1]} != {self.cfg.label_dim}")
        return ((h @ self.projection) * y.to(h.dtype)).sum(dim=-1)

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        """Real/fake logits of shape ``(n,)``; ``y=None`` drops the projection term."""
        if y is not None and y.shape[-1] != self.cfg.label_dim:
            raise ShapeMismatch(f"label length {y.shape[-1]} != {self.cfg.label_dim}")
        h = self.features(x)
        logit = self.rf_head(h).squeeze(-1)
        if y is not None:
            logit = logit + self.project(h, y)
        return logit


def discriminate(d: ProjectionDiscriminator, x: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
    return d(x, y)


class Classifier(nn.Module):
    """Encoder + 1x1 conv, dropout, global average pooling and a linear layer."""

    def __init__(self, encoder: Encoder, num_outputs: int = 4, hidden: int | None = None, dropout: float = 0.5):
        super().__init__()
        c = encoder.cfg.out_channels
        hidden = hidden or c
        self.encoder = encoder
        self.conv = nn.Conv2d(c, hidden, 1)
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(hidden, num_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.dropout(self.conv(self.encoder(x)))
        return self.fc(z.mean(dim=(-2, -1)))


class UNet(nn.Module):
    """Pretrained encoder as the contracting path, mirrored up-convolutions with skips."""

    def __init__(self, encoder: Encoder, out_channels: int = 2):
        super().__init__()
        self.encoder = encoder
        widths = encoder.cfg.stage_widths()
        bn = encoder.cfg.use_batchnorm
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        cin = widths[-1]
        for width in reversed(widths):
            up = [nn.ConvTranspose2d(cin, width, 3, stride=2, padding=1, output_padding=1, bias=not bn)]
            if bn:
                up.append(nn.BatchNorm2d(width))
            up.append(nn.ReLU(inplace=True))
            self.ups.append(nn.Sequential(*up))
            self.fuse.append(nn.Sequential(*_conv_bn_relu(2 * width, width, bn)))
            cin = width
        self.head = nn.Conv2d(cin, out_channels, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        z, skips = self.encoder.forward_features(x)
        for up, fuse, skip in zip(self.ups, self.fuse, reversed(skips)):
            z = fuse(torch.cat([up(z), skip], dim=1))
        return self.head(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def _seeded(seed, fn, *args):
    if seed is None:
        return fn(*args)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn(*args)


def build_encoder(cfg: EncoderConfig, seed: int | None = None) -> Encoder:
    return _seeded(seed, Encoder, cfg)


def build_decoder(cfg: DecoderConfig, seed: int | None = None) -> Decoder:
    return _seeded(seed, Decoder, cfg)


def build_discriminator(cfg: DiscriminatorConfig, seed: int | None = None) -> ProjectionDiscriminator:
    return _seeded(seed, ProjectionDiscriminator, cfg)


def build_classifier_head(encoder: Encoder, seed: int | None = None, **kw) -> Classifier:
    return _seeded(seed, lambda: Classifier(encoder, **kw))


def build_unet(encoder: Encoder, seed: int | None = None, out_channels: int = 2) -> UNet:
    return _seeded(seed, lambda: UNet(encoder, out_channels))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "decoder": asdict(self.decoder), "discriminator": asdict(self.discriminator)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), DiscriminatorConfig(**d["discriminator"]))

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def scaled(cls, width: int = 4, disc_width: int | None = None, convs_per_block: int = 1) -> "ModelConfig":
        """Narrow variant for desk-scale runs; depths stay at 5 down / 4 up."""
        enc = EncoderConfig(base_width=width, convs_per_block=convs_per_block)
        dec = DecoderConfig(in_channels=enc.out_channels, base_width=width)
        disc = DiscriminatorConfig(base_width=disc_width or width)
        return cls(enc, dec, disc)


@dataclass
class ModelBundle:
    generator: ContextEncoder
    discriminator: ProjectionDiscriminator
    config: ModelConfig
    seed: int

    @property
    def encoder(self) -> Encoder:
        return self.generator.encoder

    @property
    def decoder(self) -> Decoder:
        return self.generator.decoder


def build_bundle(config: ModelConfig, seed: int = 0) -> ModelBundle:
    def make():
        enc = Encoder(config.encoder)
        dec = Decoder(config.decoder)
        disc = ProjectionDiscriminator(config.discriminator)
        return ContextEncoder(enc, dec), disc

    gen, disc = _seeded(seed, make)
    return ModelBundle(gen, disc, config, seed)


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, bundle: ModelBundle, meta: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "config": bundle.config.to_dict(),
            "seed": bundle.seed,
            "generator": bundle.generator.state_dict(),
            "discriminator": bundle.discriminator.state_dict(),
            "meta": meta or {},
        },
        Path(path),
    )


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = blob.get("format_version") if isinstance(blob, dict) else None
    if version != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"checkpoint format {version!r}, expected {CHECKPOINT_FORMAT}")
    bundle = build_bundle(ModelConfig.from_dict(blob["config"]), seed=blob["seed"])
    bundle.generator.load_state_dict(blob["generator"])
    bundle.discriminator.load_state_dict(blob["discriminator"])
    return bundle, blob["meta"]
