"""Training loop, prediction, evaluation, and the ablation matrix.

Training follows the reference protocol: adaptive-moment gradient descent
(betas 0.9/0.999, eps 1e-8) at a constant learning rate, batch 16 by default,
deterministic under a seed in single-worker mode. Checkpoints are written
atomically; the best-validation-F1 checkpoint is retained alongside the last
one. A non-finite loss aborts with a diagnostic snapshot instead of stepping.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, read_checkpoint, snapshot, write_checkpoint
from .config import CdlParams, LossWeights, TrainConfig
from .data import Manifest, SceneSet, batch_iter
from .errors import ConfigurationError, NumericAbortError, ShapeError
from .losses import total_loss
from .metrics import (ConfusionCounts, accumulate, binarize, compute_metrics,
                      post_classification_compare)
from .model import DualTaskChangeNet, ModelOutput, build_model

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Ablation ladder, in presentation order. Each preset fully determines the
# attention flag, the change-branch loss, the segmentation branch, and
# train-time augmentation; everything else comes from the base config.
ABLATION_PRESETS = (
    "SCDN",
    "SCDN_DAM",
    "SCDN_DAM_FL",
    "SCDN_DAM_CDL",
    "SCDN_DAM_CDL_SSN",
    "SCDN_DAM_CDL_SSN_DA",
)


def apply_ablation_preset(name: str, base: TrainConfig) -> TrainConfig:
    """Derive a TrainConfig for one ablation row from a base config."""
    if name not in ABLATION_PRESETS:
        raise ConfigurationError(f"unknown ablation preset '{name}'")
    use_dam = name != "SCDN"
    use_ssn = "SSN" in name
    augment = name.endswith("_DA")

    if "FL" in name:
        kind, params = "focal", base.loss.params
    elif "CDL" in name:
        kind, params = "cdl", base.loss.params
    else:
        # plain cross-entropy baseline, expressed as CDL with zero exponents
        kind, params = "cdl", CdlParams(delta=0.0, theta=0.0)

    weights = LossWeights(
        alpha=base.loss.weights.alpha if use_ssn else 0.0,
        lambda_cd=base.loss.weights.lambda_cd,
    )
    loss = replace(base.loss, kind=kind, params=params, weights=weights)
    model = replace(base.model, use_dam=use_dam, use_ssn=use_ssn)
    return replace(base, model=model, loss=loss, augment=augment)


@dataclass
class RunHistory:
    """Per-step loss series and per-eval metric series, JSON-lines friendly."""

    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def record_step(self, step: int, report) -> None:
        self.steps.append({"kind": "step", "step": step, "time": time.time(),
                           **report.to_dict()})

    def record_eval(self, step: int, split: str, reports: dict) -> None:
        self.evals.append({
            "kind": "eval", "step": step, "split": split, "time": time.time(),
            "change": reports["change"].to_dict(),
            "seg": reports["seg"].to_dict() if reports.get("seg") else None,
        })

    def total_series(self) -> list[float]:
        return [rec["total"] for rec in self.steps]

    def moving_average(self, at_step: int, window: int = 50) -> float:
        series = self.total_series()[max(0, at_step - window):at_step]
        if not series:
            raise ConfigurationError(f"no steps recorded up to {at_step}")
        return float(np.mean(series))

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in sorted(self.steps + self.evals, key=lambda r: (r["step"], r["kind"])):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def enable_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _batch_tensors(batch):
    to = lambda a: torch.from_numpy(np.ascontiguousarray(a))
    return to(batch.img_t1), to(batch.img_t2), to(batch.y_cd), to(batch.y_t1), to(batch.y_t2)


def _numeric_abort(step: int, model, batch, out_dir: Path | None, reason: str):
    snap = {
        "step": step,
        "reason": reason,
        "param_norms": {name: float(p.detach().norm()) for name, p in model.named_parameters()},
    }
    if out_dir is not None:
        np.savez(out_dir / "abort_inputs.npz", img_t1=batch.img_t1, img_t2=batch.img_t2,
                 y_cd=batch.y_cd, y_t1=batch.y_t1, y_t2=batch.y_t2)
        (out_dir / "abort.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    raise NumericAbortError(f"non-finite loss at step {step}: {reason}", snap)


def _loss_extra(cfg: TrainConfig) -> dict:
    return {
        "seed": cfg.seed,
        "loss": {
            "kind": cfg.loss.kind,
            "delta": cfg.loss.params.delta,
            "theta": cfg.loss.params.theta,
            "alpha": cfg.loss.weights.alpha,
            "lambda_cd": cfg.loss.weights.lambda_cd,
            "focal_gamma": cfg.loss.focal_gamma,
            "focal_alpha": cfg.loss.focal_alpha,
        },
        "tau": cfg.tau,
    }


def train(cfg: TrainConfig, manifest: Manifest, scenes: SceneSet,
          out_dir: str | Path | None = None,
          resume_from: Checkpoint | str | Path | None = None) -> tuple[Checkpoint, RunHistory]:
    """Run the optimization loop; returns the final checkpoint and history.

    With ``resume_from``, model and optimizer state are restored and the loop
    continues from the stored step counter; resumption must land on an epoch
    boundary for the batch stream to match an uninterrupted run.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        enable_determinism(cfg.seed)

    if resume_from is not None:
        prev = _resolve(resume_from)
        if prev.model_config != cfg.model:
            raise ConfigurationError(
                "resume checkpoint was trained with a different model configuration"
            )
        model = prev.build_model()
        optimizer = prev.build_optimizer(model)
        step, epoch = prev.step, int(prev.extra.get("epoch", 0))
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        step, epoch = 0, 0
    history = RunHistory()
    extra = _loss_extra(cfg)
    has_val = bool(manifest.records_for("val"))
    best_f1 = -1.0

    max_steps = cfg.max_steps
    if cfg.epochs is not None:
        per_epoch = -(-len(manifest.records_for("train")) // cfg.batch)
        max_steps = cfg.epochs * per_epoch

    model.train()
    while step < max_steps:
        progressed = False
        for batch in batch_iter(manifest, "train", scenes, batch=cfg.batch, seed=cfg.seed,
                                augment_flag=cfg.augment, epoch=epoch):
            if step >= max_steps:
                break
            progressed = True
            x1, x2, y_cd, y_t1, y_t2 = _batch_tensors(batch)
            optimizer.zero_grad()
            out_maps = model(x1, x2)
            if not torch.isfinite(out_maps.change_prob).all():
                _numeric_abort(step, model, batch, out, "model emitted non-finite probabilities")
            loss, report = total_loss(out_maps, y_cd, y_t1, y_t2, cfg.loss.weights, cfg.loss)
            if not torch.isfinite(loss):
                _numeric_abort(step, model, batch, out, "total loss is non-finite")
            loss.backward()
            optimizer.step()
            step += 1
            history.record_step(step, report)

            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                write_checkpoint(snapshot(model, optimizer, step, {**extra, "epoch": epoch}),
                                 out / "last.ckpt")
            if has_val and cfg.eval_every and step % cfg.eval_every == 0:
                reports = evaluate_model(model, manifest, "val", scenes, tau=cfg.tau, batch=cfg.batch)
                history.record_eval(step, "val", reports)
                model.train()
                if reports["change"].f1 > best_f1:
                    best_f1 = reports["change"].f1
                    if out is not None:
                        write_checkpoint(snapshot(model, optimizer, step, {**extra, "epoch": epoch}),
                                         out / "best.ckpt")
        if not progressed:
            break
        epoch += 1

    ckpt = snapshot(model, optimizer, step, {**extra, "epoch": epoch})
    if out is not None:
        write_checkpoint(ckpt, out / "last.ckpt")
        history.to_jsonl(out / "history.jsonl")
    return ckpt, history


def _resolve(ckpt) -> Checkpoint:
    if isinstance(ckpt, Checkpoint):
        return ckpt
    return read_checkpoint(ckpt)


def predict(ckpt, img_t1, img_t2, tau: float = 0.5) -> tuple[ModelOutput, dict[str, np.ndarray]]:
    """Pure forward pass plus binarization; no parameter mutation.

    Accepts (3, H, W) or (B, 3, H, W) arrays in [0, 1]; masks come back with
    the same batching.
    """
    ckpt = _resolve(ckpt)
    model = ckpt.build_model()
    model.eval()

    t1 = np.asarray(img_t1, dtype=np.float32)
    t2 = np.asarray(img_t2, dtype=np.float32)
    unbatched = t1.ndim == 3
    if unbatched:
        t1, t2 = t1[None], t2[None]
    if t1.ndim != 4 or t1.shape[1] != ckpt.model_config.input_channels:
        raise ShapeError(
            f"expected images with {ckpt.model_config.input_channels} channels, got {t1.shape}"
        )
    with torch.no_grad():
        out = model(torch.from_numpy(t1), torch.from_numpy(t2))

    def mask(prob: torch.Tensor) -> np.ndarray:
        arr = binarize(prob.numpy()[:, 0], tau)
        return arr[0] if unbatched else arr

    masks = {"change": mask(out.change_prob)}
    if out.seg_prob_t1 is not None:
        masks["seg_t1"] = mask(out.seg_prob_t1)
        masks["seg_t2"] = mask(out.seg_prob_t2)
    return out, masks


def evaluate_model(model: DualTaskChangeNet, manifest: Manifest, split: str, scenes: SceneSet,
                   tau: float = 0.5, batch: int = 16) -> dict:
    """One global confusion matrix per task over a whole split."""
    model.eval()
    change_counts = ConfusionCounts()
    seg_counts = ConfusionCounts() if model.cfg.use_ssn else None
    for b in batch_iter(manifest, split, scenes, batch=batch, seed=0, augment_flag=False):
        x1, x2, *_ = _batch_tensors(b)
        with torch.no_grad():
            out = model(x1, x2)
        pred = binarize(out.change_prob.numpy()[:, 0], tau)
        change_counts = change_counts + accumulate(pred, b.y_cd[:, 0].astype(np.uint8))
        if seg_counts is not None:
            p1 = binarize(out.seg_prob_t1.numpy()[:, 0], tau)
            p2 = binarize(out.seg_prob_t2.numpy()[:, 0], tau)
            seg_counts = (seg_counts
                          + accumulate(p1, b.y_t1[:, 0].astype(np.uint8))
                          + accumulate(p2, b.y_t2[:, 0].astype(np.uint8)))
    return {
        "change": compute_metrics(change_counts),
        "seg": compute_metrics(seg_counts) if seg_counts is not None else None,
        "counts": {
            "change": dataclasses.asdict(change_counts),
            "seg": dataclasses.asdict(seg_counts) if seg_counts is not None else None,
        },
    }


def evaluate_checkpoint(ckpt, manifest: Manifest, split: str, scenes: SceneSet,
                        tau: float = 0.5, batch: int = 16) -> dict:
    ckpt = _resolve(ckpt)
    return evaluate_model(ckpt.build_model(), manifest, split, scenes, tau=tau, batch=batch)


def run_ablation(base: TrainConfig, manifest: Manifest, scenes: SceneSet,
                 out_dir: str | Path | None = None, eval_split: str = "val") -> list[tuple[str, object]]:
    """Train and evaluate every ablation preset with a shared seed and
    identical data; rows come back in presentation order."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for preset in ABLATION_PRESETS:
        cfg = apply_ablation_preset(preset, base)
        sub = out / preset.lower() if out is not None else None
        ckpt, _ = train(cfg, manifest, scenes, out_dir=sub)
        reports = evaluate_checkpoint(ckpt, manifest, eval_split, scenes, tau=cfg.tau, batch=cfg.batch)
        rows.append((preset, reports["change"]))
    if out is not None:
        write_ablation_table(rows, out / "ablation.csv")
    return rows


def write_ablation_table(rows, path: str | Path) -> None:
    lines = ["preset,recall,precision,f1,iou"]
    for preset, rep in rows:
        lines.append(f"{preset},{rep.recall:.6f},{rep.precision:.6f},{rep.f1:.6f},{rep.iou:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_ablation_table(rows) -> str:
    header = f"{'preset':24s} {'Recall':>8s} {'Prec.':>8s} {'F1':>8s} {'IoU':>8s}"
    lines = [header, "-" * len(header)]
    for preset, rep in rows:
        lines.append(f"{preset:24s} {rep.recall:8.4f} {rep.precision:8.4f} "
                     f"{rep.f1:8.4f} {rep.iou:8.4f}")
    return "\n".join(lines)


def export_predictions(ckpt, manifest: Manifest, split: str, scenes: SceneSet,
                       out_dir: str | Path, tau: float = 0.5, batch: int = 16,
                       overlays: bool = False) -> int:
    """Write per-tile prediction masks as {0, 255} PNGs mirroring tile-cache
    names ({scene}_{x0}_{y0}_{kind}.png), plus agreement overlays (TP white,
    FP red, FN blue, TN black) when requested. Returns the file count."""
    from .metrics import write_mask_png, write_overlay_png

    ckpt = _resolve(ckpt)
    model = ckpt.build_model()
    model.eval()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for b in batch_iter(manifest, split, scenes, batch=batch, seed=0, augment_flag=False):
        x1, x2, *_ = _batch_tensors(b)
        with torch.no_grad():
            maps = model(x1, x2)
        change = binarize(maps.change_prob.numpy()[:, 0], tau)
        segs = None
        if maps.seg_prob_t1 is not None:
            segs = (binarize(maps.seg_prob_t1.numpy()[:, 0], tau),
                    binarize(maps.seg_prob_t2.numpy()[:, 0], tau))
        for i, rec in enumerate(b.records):
            stem = f"{rec.scene_id}_{rec.x0}_{rec.y0}"
            write_mask_png(out / f"{stem}_change.png", change[i])
            written += 1
            if segs is not None:
                write_mask_png(out / f"{stem}_seg_t1.png", segs[0][i])
                write_mask_png(out / f"{stem}_seg_t2.png", segs[1][i])
                written += 2
            if overlays:
                write_overlay_png(out / f"{stem}_change_overlay.png", change[i],
                                  b.y_cd[i, 0].astype(np.uint8))
                written += 1
    return written


def compare_post_classification(ckpt, manifest: Manifest, split: str, scenes: SceneSet,
                                tau: float = 0.5, batch: int = 16) -> dict:
    """Change detection via differencing the two predicted segmentation maps,
    scored against both the change labels ("dataset") and the XOR of the
    epoch segmentation labels ("subtracted")."""
    ckpt = _resolve(ckpt)
    if not ckpt.model_config.use_ssn:
        raise ConfigurationError("post-classification comparison needs a checkpoint with SSN heads")
    model = ckpt.build_model()
    model.eval()

    counts = {"dataset": ConfusionCounts(), "subtracted": ConfusionCounts()}
    for b in batch_iter(manifest, split, scenes, batch=batch, seed=0, augment_flag=False):
        x1, x2, *_ = _batch_tensors(b)
        with torch.no_grad():
            out = model(x1, x2)
        seg1 = binarize(out.seg_prob_t1.numpy()[:, 0], tau)
        seg2 = binarize(out.seg_prob_t2.numpy()[:, 0], tau)
        pred = post_classification_compare(seg1, seg2)
        y_cd = b.y_cd[:, 0].astype(np.uint8)
        subtracted = post_classification_compare(b.y_t1[:, 0].astype(np.uint8),
                                                 b.y_t2[:, 0].astype(np.uint8))
        counts["dataset"] = counts["dataset"] + accumulate(pred, y_cd)
        counts["subtracted"] = counts["subtracted"] + accumulate(pred, subtracted)
    return {label: compute_metrics(c) for label, c in counts.items()}
