"""Fast invariant and gradient self-tests, runnable from the CLI.

These mirror the core correctness properties of the package (attention
identity at init, affinity normalization, loss reductions, analytic vs
numeric gradients, augmentation group laws, weight sharing, shape chain)
without touching any dataset.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import CdlParams, ModelConfig
from .data import ALL_AUGMENT_OPS, BitemporalSample, augment
from .losses import bce, cdl, cdl_grad
from .model import DualAttention, build_model


def _check(results: list, name: str, ok: bool, detail: str = "") -> None:
    results.append((name, bool(ok), detail))


def run_self_tests(seed: int = 0) -> list[tuple[str, bool, str]]:
    results: list[tuple[str, bool, str]] = []
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    # Dual attention is the identity while its scales are zero, and every
    # affinity row is a probability distribution.
    dam = DualAttention(16, max_positions=4096)
    f = torch.randn(2, 16, 8, 8)
    diff = (dam(f) - f).abs().max().item()
    _check(results, "dual_attention_identity_at_init", diff == 0.0, f"max abs diff {diff}")
    pa = dam.position_affinity(f)
    ca = dam.channel_affinity(f)
    row_err = max((pa.sum(-1) - 1).abs().max().item(), (ca.sum(-1) - 1).abs().max().item())
    _check(results, "attention_rows_sum_to_one", row_err < 1e-6, f"max row error {row_err:.2e}")

    # CDL with zero exponents is plain cross-entropy.
    p = torch.from_numpy(rng.uniform(1e-6, 1 - 1e-6, size=4096))
    y = torch.from_numpy((rng.uniform(size=4096) < 0.5).astype(np.float64))
    red = abs(cdl(p, y, CdlParams(0.0, 0.0)).item() - bce(p, y).item())
    _check(results, "cdl_reduces_to_bce", red < 1e-9, f"max difference {red:.2e}")

    # Analytic CDL gradient against central finite differences.
    worst = 0.0
    h = 1e-6
    for delta in (0.0, 1.0, 2.0):
        params = CdlParams(delta, delta)
        for y_val in (0.0, 1.0):
            grid = torch.from_numpy(np.linspace(0.01, 0.99, 25))
            yv = torch.full_like(grid, y_val)
            for pv, yy in zip(grid, yv):
                p1 = pv.reshape(1)
                yy = yy.reshape(1)
                fd = (cdl(p1 + h, yy, params) - cdl(p1 - h, yy, params)) / (2 * h)
                an = cdl_grad(p1, yy, params)[0]
                worst = max(worst, abs((an - fd).item() / fd.item()))
    _check(results, "cdl_gradient_matches_finite_differences", worst < 1e-5,
           f"max relative error {worst:.2e}")

    # All 16 augmentation ops invert cleanly.
    sample = BitemporalSample(
        img_t1=rng.random((3, 16, 16), dtype=np.float32),
        img_t2=rng.random((3, 16, 16), dtype=np.float32),
        y_cd=(rng.random((16, 16)) < 0.5).astype(np.uint8),
        y_t1=(rng.random((16, 16)) < 0.5).astype(np.uint8),
        y_t2=(rng.random((16, 16)) < 0.5).astype(np.uint8),
    )
    ok = all(
        all(np.array_equal(a, b) for a, b in zip(
            augment(augment(sample, op), op.inverse()).arrays().values(),
            sample.arrays().values()))
        for op in ALL_AUGMENT_OPS
    )
    _check(results, "augment_ops_invertible", ok, "16/16 ops round-trip")

    # Shared weights: identical epochs give bitwise-identical segmentations.
    model = build_model(ModelConfig.preset("tiny"), seed=seed)
    model.eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        out = model(x, x)
    shared = torch.equal(out.seg_prob_t1, out.seg_prob_t2)
    _check(results, "shared_ssn_outputs_identical", shared, "forward(x, x)")

    # Stride schedule on the tiny preset at 64 pixels.
    with torch.no_grad():
        pyramid = model.encoder(x)
    sizes = [s.shape[-1] for s in pyramid.stages]
    aux_sizes = [a.shape[-1] for a in out.change_aux]
    ok = sizes == [32, 16, 8, 4, 2] and aux_sizes == [4, 8, 16, 32] and out.change_prob.shape[-1] == 64
    _check(results, "shape_chain", ok, f"stages {sizes}, aux {aux_sizes}")

    # Inference is a pure function of (parameters, input).
    with torch.no_grad():
        again = model(x, x)
    _check(results, "forward_deterministic", torch.equal(out.change_prob, again.change_prob),
           "repeated forward bitwise equal")

    return results
