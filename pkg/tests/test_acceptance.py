"""Acceptance gate: one test per criterion, each timed against its budget.

Running this module prints a PASS/FAIL line per criterion in the terminal
summary (see conftest). Full-scale accuracy reproduction is out of scope;
the gate rests on metric identities, analytic/numeric oracles, and property
checks at desk scale.
"""

import copy
import dataclasses
import time

import numpy as np
import pytest
import torch

from conftest import overfit_train_config, record_criterion
from dtcd.config import CdlParams, LossConfig, LossWeights, ModelConfig
from dtcd.data import ALL_AUGMENT_OPS, apply_geometric, augment, load_sample, split_manifest, tile_scene
from dtcd.losses import bce, cdl, cdl_grad, total_loss
from dtcd.metrics import f1_iou_from_pr, metrics_to_json, post_classification_compare
from dtcd.model import DualAttention, build_model, count_trainable
from dtcd.trainer import (apply_ablation_preset, compare_post_classification,
                          evaluate_checkpoint, train)
from reference_rows import ALL_ROWS


class Budget:
    def __init__(self, seconds: float):
        self.limit = seconds
        self.t0 = time.monotonic()

    def check(self):
        elapsed = time.monotonic() - self.t0
        assert elapsed < self.limit, f"ran {elapsed:.1f}s, budget {self.limit:.0f}s"


def test_criterion_01_metric_table_identities():
    budget = Budget(1.0)
    record_criterion(1, "published-table F1/IoU identities within 0.0005")
    assert len(ALL_ROWS) == 11
    for name, recall, precision, f1, iou in ALL_ROWS:
        got_f1, got_iou = f1_iou_from_pr(precision / 100.0, recall / 100.0)
        assert abs(got_f1 - f1 / 100.0) < 0.0005, name
        assert abs(got_iou - iou / 100.0) < 0.0005, name
    budget.check()


def test_criterion_02_cdl_reduction_to_bce():
    budget = Budget(1.0)
    record_criterion(2, "cdl(delta=0,theta=0) == bce within 1e-9 on 1e4 pairs")
    rng = np.random.default_rng(2024)
    p = torch.from_numpy(rng.uniform(1e-6, 1 - 1e-6, size=10_000))
    y = torch.from_numpy((rng.uniform(size=10_000) < 0.5).astype(np.float64))
    params = CdlParams(0.0, 0.0)
    worst = 0.0
    for lo in range(0, 10_000, 1000):
        sl = slice(lo, lo + 1000)
        worst = max(worst, abs(cdl(p[sl], y[sl], params).item() - bce(p[sl], y[sl]).item()))
    assert worst < 1e-9
    budget.check()


def test_criterion_03_cdl_gradient_vs_finite_differences():
    budget = Budget(5.0)
    record_criterion(3, "analytic cdl gradient matches central differences (<1e-5 rel)")
    h = 1e-6
    grid = np.linspace(0.01, 0.99, 99)
    worst = 0.0
    for delta in (0.0, 0.5, 1.0, 2.0):
        for theta in (0.0, 0.5, 1.0, 2.0):
            params = CdlParams(delta, theta)
            for y_val in (0.0, 1.0):
                y = torch.full((99,), y_val, dtype=torch.float64)
                p = torch.from_numpy(grid)
                analytic = cdl_grad(p, y, params) * 99  # undo the 1/N scaling
                for i in (0, 25, 49, 74, 98):
                    pi = p[i].reshape(1)
                    yi = y[i].reshape(1)
                    fd = (cdl(pi + h, yi, params).item() - cdl(pi - h, yi, params).item()) / (2 * h)
                    worst = max(worst, abs(analytic[i].item() - fd) / abs(fd))
    assert worst < 1e-5
    budget.check()


def test_criterion_04_cdl_monotonicity_and_hardness_bounds():
    budget = Budget(1.0)
    record_criterion(4, "cdl monotonicity and hardness-weight bounds on 99-point grid")
    grid = np.linspace(0.01, 0.99, 99)
    p = torch.from_numpy(grid)
    for expo in (0.0, 1.0, 2.0, 4.0):
        params = CdlParams(expo, expo)
        pos = (-((2.0 - p) ** expo) * torch.log(p)).numpy()
        neg = (-((1.0 + p) ** expo) * torch.log(1.0 - p)).numpy()
        # elementwise values agree with the loss on singleton maps
        assert cdl(p[:1], torch.ones(1, dtype=torch.float64), params).item() == pytest.approx(pos[0])
        assert (np.diff(pos) < 0).all() and (np.diff(neg) > 0).all()
        changed = (2.0 - grid) ** expo
        unchanged = (1.0 + grid) ** expo
        assert ((changed >= 1.0) & (changed <= 2.0 ** expo)).all()
        assert ((unchanged >= 1.0) & (unchanged <= 2.0 ** expo)).all()
        if expo > 0:
            assert (np.diff(changed) < 0).all() and (np.diff(unchanged) > 0).all()
    budget.check()


def test_criterion_05_tiling_and_split_counts():
    budget = Budget(1.0)
    record_criterion(5, "virtual production scene: 7620 tiles, 6096/762/762 split")
    tiles = tile_scene(32507, 15354, 256)
    assert len(tiles) == 7620
    manifest = split_manifest(tiles, ratios=(0.8, 0.1, 0.1), seed=0, width=32507, height=15354)
    assert manifest.split_counts() == {"train": 6096, "val": 762, "test": 762}
    budget.check()


def test_criterion_06_weight_sharing(tiny_cfg):
    budget = Budget(30.0)
    record_criterion(6, "shared encoder/SSN: bitwise twin outputs, non-shared count delta")
    model = build_model(tiny_cfg, seed=0)
    model.eval()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        out = model(x, x)
    assert torch.equal(out.seg_prob_t1, out.seg_prob_t2)

    params = list(model.parameters())
    assert len({id(p) for p in params}) == len(params)
    non_shared = torch.nn.ModuleList([
        copy.deepcopy(model),
        copy.deepcopy(model.encoder),
        copy.deepcopy(model.ssn_blocks),
        copy.deepcopy(model.ssn_final),
    ])
    extra = (count_trainable(model.encoder) + count_trainable(model.ssn_blocks)
             + count_trainable(model.ssn_final))
    assert count_trainable(model) == count_trainable(non_shared) - extra
    budget.check()


def test_criterion_07_dual_attention_identity_and_affinities():
    budget = Budget(10.0)
    record_criterion(7, "dual attention: identity at zero scales, affinity rows sum to 1")
    rng = np.random.default_rng(7)
    for channels, hw in ((16, 8), (32, 16), (8, 4)):
        dam = DualAttention(channels, max_positions=4096)
        f = torch.from_numpy(rng.standard_normal((2, channels, hw, hw)).astype(np.float32))
        assert (dam(f) - f).abs().max().item() == 0.0
        pa = dam.position_affinity(f)
        ca = dam.channel_affinity(f)
        assert (pa.sum(-1) - 1.0).abs().max().item() < 1e-6
        assert (ca.sum(-1) - 1.0).abs().max().item() < 1e-6
    budget.check()


def test_criterion_08_augmentation_group_and_alignment(synthetic_scene, synthetic_manifest):
    budget = Budget(5.0)
    record_criterion(8, "augmentation group laws and joint image/label alignment")
    sample = load_sample(synthetic_manifest.records[0], synthetic_scene)

    rotated = sample
    for _ in range(4):
        rotated = augment(rotated, dataclasses.replace(ALL_AUGMENT_OPS[0], rot_quarter=1))
    for a, b in zip(rotated.arrays().values(), sample.arrays().values()):
        np.testing.assert_array_equal(a, b)

    for op in ALL_AUGMENT_OPS:
        back = augment(augment(sample, op), op.inverse())
        for a, b in zip(back.arrays().values(), sample.arrays().values()):
            np.testing.assert_array_equal(a, b)

    h = w = 64
    coords = (np.arange(h)[:, None] * w + np.arange(w)[None, :]).astype(np.int64)
    stacked = np.stack([coords, coords, coords])
    for op in ALL_AUGMENT_OPS:
        np.testing.assert_array_equal(apply_geometric(stacked, op)[1], apply_geometric(coords, op))
    budget.check()


def test_criterion_09_end_to_end_gradient_probe():
    budget = Budget(120.0)
    record_criterion(9, "per-module autograd gradients match finite differences (<1e-3 rel)")
    cfg = ModelConfig.preset("tiny")
    model = build_model(cfg, seed=0).double()
    gen = torch.Generator().manual_seed(17)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    model.train()

    x1 = torch.rand(1, 3, 64, 64, generator=gen, dtype=torch.float64)
    x2 = torch.rand(1, 3, 64, 64, generator=gen, dtype=torch.float64)
    y = (torch.rand(1, 1, 64, 64, generator=gen) > 0.7).double()
    weights = LossWeights(0.25, 0.5)
    loss_cfg = LossConfig(kind="cdl", params=CdlParams(2.0, 2.0))

    def combined_loss():
        out = model(x1, x2)
        loss, _ = total_loss(out, y, y, y, weights, loss_cfg)
        return loss

    model.zero_grad()
    combined_loss().backward()

    rng = np.random.default_rng(9)
    # batch-norm over a single sample gives the train-mode loss large
    # curvature, so the step must be small for truncation not to dominate
    h = 1e-6
    probed = 0
    for mod_name, module in model.named_children():
        named = [(n, p) for n, p in module.named_parameters()]
        if not named:
            continue
        name, param = named[rng.integers(len(named))]
        flat_grad = param.grad.flatten()
        idx = int(rng.integers(flat_grad.numel()))
        if abs(flat_grad[idx]) < 1e-5:  # dodge numerically dead entries
            idx = int(flat_grad.abs().argmax())
        autograd_val = flat_grad[idx].item()

        flat = param.data.flatten()
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
        hi = combined_loss().item()
        with torch.no_grad():
            flat[idx] = orig - h
        lo = combined_loss().item()
        with torch.no_grad():
            flat[idx] = orig
        fd = (hi - lo) / (2 * h)
        rel = abs(autograd_val - fd) / max(abs(fd), 1e-12)
        assert rel < 1e-3, f"{mod_name}.{name}[{idx}]: autograd {autograd_val} vs fd {fd}"
        probed += 1
    assert probed >= 7  # encoder, center, fuse, cd blocks, aux heads, final, ssn blocks, ssn final
    budget.check()


def test_criterion_10_synthetic_overfit(synthetic_scene, overfit_manifest):
    budget = Budget(900.0)
    record_criterion(10, "tiny dual-task preset overfits 16 synthetic pairs to F1 >= 0.95")
    assert len(overfit_manifest.records_for("train")) == 16
    ckpt = None
    best_f1 = 0.0
    reached_at = None
    for steps in range(50, 501, 50):
        cfg = apply_ablation_preset("SCDN_DAM_CDL_SSN", overfit_train_config(steps))
        ckpt, _ = train(cfg, overfit_manifest, synthetic_scene, resume_from=ckpt)
        rep = evaluate_checkpoint(ckpt, overfit_manifest, "train", synthetic_scene,
                                  tau=0.5, batch=16)
        best_f1 = max(best_f1, rep["change"].f1)
        if rep["change"].f1 >= 0.95:
            reached_at = steps
            break
    assert reached_at is not None and reached_at <= 500, f"best train F1 {best_f1:.4f}"
    budget.check()


def test_criterion_11_post_classification_equivalence(tiny_cfg, synthetic_scene,
                                                      synthetic_manifest):
    budget = Budget(5.0)
    record_criterion(11, "xor comparison equals brute force; reference rows coincide")
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a = (rng.uniform(size=(16, 16)) < 0.5).astype(np.uint8)
        b = (rng.uniform(size=(16, 16)) < 0.5).astype(np.uint8)
        got = post_classification_compare(a, b)
        for i in range(16):
            for j in range(16):
                assert got[i, j] == (1 if a[i, j] != b[i, j] else 0)

    from dtcd.checkpoint import snapshot

    ckpt = snapshot(build_model(tiny_cfg, seed=0))
    reports = compare_post_classification(ckpt, synthetic_manifest, "val", synthetic_scene)
    assert reports["subtracted"] == reports["dataset"]
    budget.check()


def test_criterion_12_training_determinism(synthetic_scene, synthetic_manifest, tmp_path):
    budget = Budget(1800.0)
    record_criterion(12, "identical seed/config: bitwise-equal checkpoints and reports")
    base = dataclasses.replace(overfit_train_config(80, augment=True, seed=21),
                               checkpoint_every=40, eval_every=40)
    cfg = apply_ablation_preset("SCDN_DAM_CDL_SSN_DA", base)

    artifacts = {}
    for run in ("a", "b"):
        out = tmp_path / run
        ckpt, _ = train(cfg, synthetic_manifest, synthetic_scene, out_dir=out)
        reports = evaluate_checkpoint(ckpt, synthetic_manifest, "val", synthetic_scene,
                                      tau=0.5, batch=16)
        metrics_to_json(out / "metrics.json", "determinism", "val", 0.5,
                        {"change": reports["change"], "seg": reports["seg"]})
        artifacts[run] = {
            "last": (out / "last.ckpt").read_bytes(),
            "best": (out / "best.ckpt").read_bytes(),
            "metrics": (out / "metrics.json").read_bytes(),
        }
    assert artifacts["a"]["last"] == artifacts["b"]["last"]
    assert artifacts["a"]["best"] == artifacts["b"]["best"]
    assert artifacts["a"]["metrics"] == artifacts["b"]["metrics"]
    budget.check()
