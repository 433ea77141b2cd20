import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dicomce.errors import IncompatibleCheckpoint, IncompatibleShape, ShapeMismatch
from dicomce.nets import (
    ContextEncoder,
    DecoderConfig,
    DiscriminatorConfig,
    EncoderConfig,
    ModelConfig,
    build_bundle,
    build_classifier_head,
    build_decoder,
    build_discriminator,
    build_encoder,
    build_unet,
    discriminate,
    load_checkpoint,
    save_checkpoint,
    state_checksum,
)
from dicomce.preprocessing import mask_center
from tests import fdcheck

D = torch.float64
TINY_ENC = EncoderConfig(base_width=2, convs_per_block=1)


def tiny_disc(seed=0, **kw):
    cfg = DiscriminatorConfig(base_width=1, **kw)  # feature dim 8
    return build_discriminator(cfg, seed=seed).double()


@pytest.mark.parametrize("size,bottleneck", [((256, 384), (8, 12)), ((32, 32), (1, 1))])
def test_encoder_bottleneck(size, bottleneck):
    enc = build_encoder(TINY_ENC, seed=0).eval()
    with torch.no_grad():
        out = enc(torch.randn(1, 1, *size))
    assert tuple(out.shape) == (1, TINY_ENC.out_channels, *bottleneck)


def test_encoder_rejects_indivisible():
    enc = build_encoder(TINY_ENC, seed=0)
    with pytest.raises(IncompatibleShape):
        enc(torch.randn(1, 1, 33, 32))


def test_full_encoder_is_vgg16_bn():
    enc = build_encoder(EncoderConfig(in_channels=3), seed=0)
    convs = [m for m in enc.modules() if isinstance(m, torch.nn.Conv2d)]
    bns = [m for m in enc.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    assert len(convs) == 13 and len(bns) == 13
    assert [c.out_channels for c in convs] == [64] * 2 + [128] * 2 + [256] * 3 + [512] * 6


@pytest.mark.parametrize("bottleneck,out", [((8, 12), (128, 192)), ((1, 1), (16, 16))])
def test_decoder_upsampling(bottleneck, out):
    dec = build_decoder(DecoderConfig(in_channels=8, base_width=2), seed=0)
    y = dec(torch.randn(2, 8, *bottleneck))
    assert tuple(y.shape) == (2, 1, *out)


@pytest.mark.parametrize("size", [(32, 32), (64, 96), (256, 384), (96, 32)])
def test_shape_chain_matches_mask(size):
    cfg = ModelConfig.scaled(width=2)
    bundle = build_bundle(cfg, seed=0)
    x = torch.randn(2, 1, *size)
    masked, patch, _ = mask_center(x)
    with torch.no_grad():
        assert bundle.generator(masked).shape == patch.shape


def test_shape_chain_rejected_at_build():
    enc = build_encoder(TINY_ENC)
    dec = build_decoder(DecoderConfig(in_channels=TINY_ENC.out_channels, num_up_blocks=5))
    with pytest.raises(IncompatibleShape):
        ContextEncoder(enc, dec)
    dec = build_decoder(DecoderConfig(in_channels=3))
    with pytest.raises(IncompatibleShape):
        ContextEncoder(enc, dec)


def test_discriminator_hand_example():
    d = build_discriminator(DiscriminatorConfig(base_width=1, num_blocks=2), seed=0).double()
    assert d.cfg.feature_dim == 2
    with torch.no_grad():
        d.rf_head.weight.zero_()
        d.rf_head.bias.fill_(0.5)
        d.projection.zero_()
        d.projection[0, 0] = 1
        d.projection[1, 3] = 1
    d.features = lambda x: torch.tensor([[1.0, 2.0]], dtype=D)
    y = torch.tensor([[1, 0, 0, 1, 0, 0, 0, 0, 0, 0]], dtype=D)
    assert abs(discriminate(d, torch.zeros(1, 1, 8, 8, dtype=D), y).item() - 3.5) < 1e-9


def test_projection_vanishes():
    d = tiny_disc()
    x = torch.randn(3, 1, 32, 32, dtype=D)
    y = torch.randint(0, 2, (3, 10)).to(D)
    base = d(x, None)
    assert torch.equal(d(x, torch.zeros(3, 10, dtype=D)), base)
    with torch.no_grad():
        d.projection.zero_()
    assert torch.equal(d(x, y), base)


def test_label_length_checked():
    d = tiny_disc()
    with pytest.raises(ShapeMismatch):
        d(torch.randn(1, 1, 32, 32, dtype=D), torch.zeros(1, 9, dtype=D))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_projection_affine_in_label(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    d = tiny_disc(seed=seed % 1000)
    x = torch.randn(2, 1, 32, 32, generator=g, dtype=D)
    y1 = torch.randn(2, 10, generator=g, dtype=D)
    y2 = torch.randn(2, 10, generator=g, dtype=D)
    zero = d(x, torch.zeros(2, 10, dtype=D))
    lhs = d(x, a * y1 + b * y2) - zero
    rhs = a * (d(x, y1) - zero) + b * (d(x, y2) - zero)
    assert torch.allclose(lhs, rhs, atol=1e-6, rtol=0)


def test_discriminator_gradients():
    d = tiny_disc(seed=3)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 1, 32, 32, generator=g, dtype=D, requires_grad=True)
    y = torch.randint(0, 2, (2, 10), generator=g).to(D)
    w = torch.randn(2, generator=g, dtype=D)

    def fn():
        return (d(x, y) * w).sum()

    err = fdcheck.check(fn, [d.projection, d.rf_head.weight, d.rf_head.bias, x])
    assert err < 1e-4


def test_classifier_head():
    clf = build_classifier_head(build_encoder(TINY_ENC, seed=0), seed=1)
    x = torch.randn(3, 1, 256, 384)
    clf.eval()
    with torch.no_grad():
        a = clf(x)
        b = clf(x)
    assert a.shape == (3, 4)
    assert torch.equal(a, b)
    clf.train()
    torch.manual_seed(0)
    with torch.no_grad():
        c = clf(x)
    assert not torch.equal(a, c)


@pytest.mark.parametrize("size", [(32, 32), (256, 384)])
def test_unet_output(size):
    net = build_unet(build_encoder(TINY_ENC, seed=0), seed=1).eval()
    with torch.no_grad():
        out = net(torch.randn(2, 1, *size))
    assert tuple(out.shape) == (2, 2, *size)
    assert out.min() >= 0 and out.max() <= 1


def test_init_reproducible():
    cfg = ModelConfig.scaled(width=2)
    a, b, c = build_bundle(cfg, seed=5), build_bundle(cfg, seed=5), build_bundle(cfg, seed=6)
    assert state_checksum(a.generator) == state_checksum(b.generator)
    assert state_checksum(a.discriminator) == state_checksum(b.discriminator)
    assert state_checksum(a.generator) != state_checksum(c.generator)


def test_seeded_build_leaves_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    build_bundle(ModelConfig.scaled(width=2), seed=0)
    assert torch.equal(torch.rand(1), expected)


def test_checkpoint_roundtrip(tmp_path):
    bundle = build_bundle(ModelConfig.scaled(width=2), seed=9)
    save_checkpoint(tmp_path / "ck.pt", bundle, {"epoch": 3})
    again, meta = load_checkpoint(tmp_path / "ck.pt")
    assert meta == {"epoch": 3}
    assert again.config == bundle.config
    assert state_checksum(again.generator) == state_checksum(bundle.generator)
    assert state_checksum(again.discriminator) == state_checksum(bundle.discriminator)


def test_checkpoint_version_mismatch(tmp_path):
    torch.save({"format_version": 99}, tmp_path / "bad.pt")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "bad.pt")
