import math

import numpy as np
import pytest
import torch

from dicomce.data import from_corpus
from dicomce.errors import EmptySplit, NonFiniteLoss
from dicomce.losses import LossWeights, rec_loss
from dicomce.nets import ModelConfig, build_bundle, save_checkpoint, state_checksum
from dicomce.preprocessing import mask_center
from dicomce.pretrain import (
    HISTORY_COLUMNS,
    PretrainConfig,
    conditioning_auc,
    discriminator_step,
    generate,
    generator_step,
    inpaint_demo,
    make_optimizers,
    pretrain_step,
    read_history,
    run_pretraining,
)
from dicomce.synthdata import PhantomSpec, generate_corpus

CFG = ModelConfig.scaled(width=2)


@pytest.fixture(scope="module")
def data():
    return from_corpus(generate_corpus(PhantomSpec(height=32, width=32, seed=11), 12))


def batch_of(data, n=4):
    return data.images[:n], data.labels[:n]


def test_adv_weight_zero_is_plain_autoencoder(data):
    cfg = PretrainConfig(weights=LossWeights(0.99, 0.0), g_lr=1e-3, d_lr=1e-3)
    a, b = build_bundle(CFG, seed=1), build_bundle(CFG, seed=1)
    pretrain_step(a, batch_of(data), cfg, make_optimizers(a, cfg))

    opt = make_optimizers(b, cfg).g
    b.generator.train()
    masked, target, _ = mask_center(data.images[:4])
    (0.99 * rec_loss(b.generator(masked), target)).backward()
    opt.step()
    assert state_checksum(a.generator) == state_checksum(b.generator)


def test_step_determinism(data):
    cfg = PretrainConfig(g_lr=1e-3, d_lr=1e-3)
    runs = []
    for _ in range(2):
        bundle = build_bundle(CFG, seed=2)
        opts = make_optimizers(bundle, cfg)
        losses = [pretrain_step(bundle, batch_of(data), cfg, opts) for _ in range(3)]
        runs.append((losses, state_checksum(bundle.generator), state_checksum(bundle.discriminator)))
    assert runs[0] == runs[1]


def test_unconditioned_ignores_labels(data):
    cfg = PretrainConfig(conditioned=False, g_lr=1e-3, d_lr=1e-3)
    out = []
    for labels in (data.labels[:4], torch.zeros(4, 10)):
        bundle = build_bundle(CFG, seed=3)
        opts = make_optimizers(bundle, cfg)
        s = [pretrain_step(bundle, (data.images[:4], labels), cfg, opts) for _ in range(2)]
        out.append((s, state_checksum(bundle.generator), state_checksum(bundle.discriminator)))
    assert out[0] == out[1]


def test_gradient_isolation(data):
    cfg = PretrainConfig(g_lr=1e-3, d_lr=1e-3)
    bundle = build_bundle(CFG, seed=4)
    opts = make_optimizers(bundle, cfg)
    x, y = batch_of(data)
    bundle.generator.train()
    fake_full, fake_patch, target = generate(bundle, x)

    g_before, d_before = state_checksum(bundle.generator), state_checksum(bundle.discriminator)
    discriminator_step(bundle, opts.d, x, fake_full, y)
    assert state_checksum(bundle.generator) == g_before
    assert state_checksum(bundle.discriminator) != d_before

    d_mid = state_checksum(bundle.discriminator)
    generator_step(bundle, opts.g, fake_full, fake_patch, target, y, cfg.weights)
    assert state_checksum(bundle.discriminator) == d_mid
    assert state_checksum(bundle.generator) != g_before
    assert all(p.grad is None for p in bundle.discriminator.parameters())


def test_zero_projection_matches_unconditioned(data):
    histories = []
    for conditioned in (True, False):
        cfg = PretrainConfig(conditioned=conditioned, epochs=3, batch_size=4, g_lr=1e-3, d_lr=1e-3, seed=5)
        bundle = build_bundle(CFG, seed=5)
        with torch.no_grad():
            bundle.discriminator.projection.zero_()
        bundle.discriminator.projection.requires_grad_(False)
        res = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, bundle=bundle)
        histories.append((res.history, state_checksum(res.bundle.generator), state_checksum(res.bundle.discriminator)))
    assert histories[0] == histories[1]


def test_run_pretraining_selection_and_history(data, tmp_path):
    cfg = PretrainConfig(epochs=4, batch_size=4, g_lr=1e-3, d_lr=1e-3, seed=6)
    res = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, CFG, out_dir=tmp_path)
    assert len(res.history) == 4
    vals = [row["val_joint"] for row in res.history]
    assert res.best_val == min(vals)
    assert res.history[res.best_epoch - 1]["val_joint"] == res.best_val
    # the returned model really is the selected one
    again = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, CFG)
    from dicomce.pretrain import validation_joint_loss

    assert validation_joint_loss(again.bundle, data.subset(range(8, 12)), cfg) == pytest.approx(res.best_val, abs=1e-12)
    rows = read_history(tmp_path / "history.csv")
    assert list(rows[0]) == list(HISTORY_COLUMNS)
    assert [r["val_joint"] for r in rows] == vals
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()


def test_run_pretraining_reproducible(data):
    cfg = PretrainConfig(epochs=2, batch_size=4, g_lr=1e-3, d_lr=1e-3, seed=7)
    a = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, CFG)
    b = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, CFG)
    assert a.history == b.history
    assert state_checksum(a.bundle.generator) == state_checksum(b.bundle.generator)


def test_keep_last(data):
    cfg = PretrainConfig(epochs=2, batch_size=4, g_lr=1e-3, d_lr=1e-3, seed=7)
    res = run_pretraining(data.subset(range(8)), data.subset(range(8, 12)), cfg, CFG, keep="last")
    from dicomce.pretrain import validation_joint_loss

    assert validation_joint_loss(res.bundle, data.subset(range(8, 12)), cfg) == pytest.approx(res.history[-1]["val_joint"], abs=1e-12)


def test_empty_split(data):
    with pytest.raises(EmptySplit):
        run_pretraining(data.subset([]), data.subset(range(2)), PretrainConfig(epochs=1), CFG)


def test_non_finite_loss_aborts(data):
    cfg = PretrainConfig(g_lr=1e-3, d_lr=1e-3)
    bundle = build_bundle(CFG, seed=8)
    x = data.images[:4].clone()
    x[0, 0, 12, 12] = float("nan")
    with pytest.raises(NonFiniteLoss):
        pretrain_step(bundle, (x, data.labels[:4]), cfg, make_optimizers(bundle, cfg))


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(g_lr=0)
    with pytest.raises(ValueError):
        PretrainConfig(epochs=0)
    cfg = PretrainConfig()
    assert (cfg.g_lr, cfg.d_lr, cfg.batch_size, cfg.epochs) == (1e-4, 1e-5, 8, 200)
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.999)
    assert cfg.weights == LossWeights(0.99, 0.01)


def test_inpaint_demo(data, tmp_path):
    bundle = build_bundle(CFG, seed=9)
    save_checkpoint(tmp_path / "ck.pt", bundle)
    x = data.images[:3]
    panels = inpaint_demo(tmp_path / "ck.pt", x, tmp_path / "grid.png")
    assert panels.shape == (3, 3, 32, 32)
    assert (tmp_path / "grid.png").exists()
    masked, _, spec = mask_center(x)
    outside = np.ones((32, 32), dtype=bool)
    outside[spec.rows, spec.cols] = False
    for i in range(3):
        np.testing.assert_array_equal(panels[i, 0], masked[i, 0].numpy())
        np.testing.assert_array_equal(panels[i, 2], x[i, 0].numpy())
        assert np.array_equal(panels[i, 1][outside], x[i, 0].numpy()[outside])
        assert np.all(np.isfinite(panels[i, 1]))


def test_conditioning_auc_unconditioned_is_half(data):
    d = build_bundle(CFG, seed=10).discriminator
    assert conditioning_auc(d, data.images, data.labels, conditioned=False) == 0.5


def test_conditioning_auc_oracle(data):
    d = build_bundle(CFG, seed=10).discriminator
    got = conditioning_auc(d, data.images, data.labels)
    # brute force over (image, wrong label) pairs
    cands = {tuple(r.tolist()) for r in data.labels}
    wins, total = 0.0, 0
    with torch.no_grad():
        for i in range(len(data)):
            x = data.images[i : i + 1]
            own = tuple(data.labels[i].tolist())
            s_true = d(x, data.labels[i : i + 1]).item()
            for c in cands - {own}:
                s = d(x, torch.tensor([c], dtype=torch.float32)).item()
                wins += 1.0 if s_true > s else 0.5 if s_true == s else 0.0
                total += 1
    assert math.isclose(got, wins / total, abs_tol=1e-3)
