"""Command-line entry point.

Subcommands: prepare (tile + manifest), train, eval, predict, ablate,
compare-pc, check. Behaviour is driven by a JSON run config (see
``dtcd.config.default_run_config``); flags override file values, and the
resolved config is echoed into the output directory before any work. Exit
codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import (ConfigurationError, TrainConfig, load_run_config,
                     loss_config_from_run, merge_run_config, model_config_from_run,
                     save_run_config)
from .data import Manifest, SceneSet, build_manifest, export_tile_cache, load_raster
from .errors import DataError, DtcdError, NumericAbortError
from .metrics import metrics_to_csv, metrics_to_json, write_mask_png
from .selftest import run_self_tests
from .trainer import (apply_ablation_preset, compare_post_classification,
                      evaluate_checkpoint, export_predictions, format_ablation_table,
                      predict, run_ablation, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config; flags override file values")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="global random seed")
    parser.add_argument("--preset", help="ablation preset name for training")
    parser.add_argument("--tau", type=float, help="binarization threshold")
    parser.add_argument("--device", help="compute device (cpu)")
    parser.add_argument("--workers", type=int, help="data-loading workers (single-worker is deterministic)")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="force single-worker deterministic execution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtcd",
                                     description="Dual-task Siamese building change detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tile a scene pair and write the split manifest")
    _add_common(p)
    p.add_argument("--t1", help="epoch-1 image raster")
    p.add_argument("--t2", help="epoch-2 image raster")
    p.add_argument("--seg-t1", dest="seg_t1", help="epoch-1 building mask")
    p.add_argument("--seg-t2", dest="seg_t2", help="epoch-2 building mask")
    p.add_argument("--change", help="change mask")
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--cache", action="store_true", help="also export per-tile PNGs")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("predict", help="predict masks for one image pair")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)

    p = sub.add_parser("ablate", help="train and evaluate every ablation preset")
    _add_common(p)

    p = sub.add_parser("compare-pc", help="post-classification comparison analysis")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("check", help="run gradient and invariant self-tests")
    _add_common(p)
    return parser


def _resolve_config(args) -> dict:
    cfg = load_run_config(args.config) if args.config else cfgmod.default_run_config()
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    train_over = {}
    if getattr(args, "preset", None):
        train_over["preset"] = args.preset
    if args.workers is not None:
        train_over["workers"] = args.workers
    if args.deterministic:
        train_over["deterministic"] = True
    if args.device is not None:
        train_over["device"] = args.device
    if train_over:
        overrides["train"] = train_over
    if args.tau is not None:
        overrides["metrics"] = {"tau": args.tau}
    cfg = merge_run_config(overrides, cfg)
    if cfg["train"]["device"] != "cpu":
        raise ConfigurationError(f"unsupported device '{cfg['train']['device']}' (only cpu)")
    if cfg["train"]["workers"] < 1:
        raise ConfigurationError("workers must be >= 1")
    return cfg


def _out_dir(cfg: dict, required: bool = True) -> Path | None:
    if not cfg["out"]:
        if required:
            raise ConfigurationError("an output directory is required (--out or config key 'out')")
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: dict, out: Path | None) -> None:
    if out is not None:
        save_run_config(cfg, out / "run_config.json")


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    tc = TrainConfig(
        model=model_config_from_run(cfg),
        loss=loss_config_from_run(cfg),
        batch=t["batch"],
        lr=t["lr"],
        max_steps=t["max_steps"],
        epochs=t["epochs"],
        seed=cfg["seed"],
        checkpoint_every=t["checkpoint_every"],
        eval_every=t["eval_every"],
        augment=t["augment"],
        tau=cfg["metrics"]["tau"],
        deterministic=t["deterministic"],
        workers=t["workers"],
    )
    if t["preset"]:
        tc = apply_ablation_preset(t["preset"], tc)
    return tc


def _load_scenes(cfg: dict) -> SceneSet:
    d = cfg["data"]
    missing = [k for k in ("t1", "t2", "seg_t1", "seg_t2", "change") if not d[k]]
    if missing:
        raise ConfigurationError(f"missing data paths in config: {', '.join('data.' + m for m in missing)}")
    return SceneSet.from_files(d["t1"], d["t2"], d["seg_t1"], d["seg_t2"], d["change"])


def _load_manifest(cfg: dict) -> Manifest:
    path = cfg["data"]["manifest"]
    if not path:
        raise ConfigurationError("missing config key 'data.manifest'")
    return Manifest.load(path)


def _cache_dir(cfg: dict) -> Path | None:
    explicit = cfg["data"]["cache_dir"] or os.environ.get("DTCD_CACHE_DIR")
    return Path(explicit) if explicit else None


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    for key in ("t1", "t2", "seg_t1", "seg_t2", "change", "tile_size"):
        value = getattr(args, key, None)
        if value is not None:
            cfg["data"][key] = value
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    scenes = _load_scenes(cfg)
    manifest = build_manifest(scenes, tile=cfg["data"]["tile_size"],
                              ratios=tuple(cfg["data"]["ratios"]), seed=cfg["seed"])
    manifest.save(out / "manifest.json")
    counts = manifest.split_counts()
    print(f"manifest: {len(manifest.records)} tiles "
          f"({counts['train']}/{counts['val']}/{counts['test']} train/val/test) "
          f"-> {out / 'manifest.json'}")
    cache = _cache_dir(cfg)
    if args.cache and cache is None:
        cache = out / "tiles"
    if cache is not None:
        n = export_tile_cache(manifest, scenes, cache)
        print(f"tile cache: {n} PNGs -> {cache}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    scenes = _load_scenes(cfg)
    manifest = _load_manifest(cfg)
    tc = _train_config(cfg)
    ckpt, history = train(tc, manifest, scenes, out_dir=out)
    print(f"trained {ckpt.step} steps -> {out / 'last.ckpt'}")
    if history.steps:
        print(f"final loss {history.steps[-1]['total']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    scenes = _load_scenes(cfg)
    manifest = _load_manifest(cfg)
    tau = cfg["metrics"]["tau"]
    reports = evaluate_checkpoint(args.ckpt, manifest, args.split, scenes, tau=tau,
                                  batch=cfg["train"]["batch"])
    run_id = Path(args.ckpt).stem
    metrics_to_json(out / f"metrics_{args.split}.json", run_id, args.split, tau,
                    {"change": reports["change"], "seg": reports["seg"]})
    metrics_to_csv(out / "metrics.csv", run_id, args.split, tau, reports["change"])
    if cfg["metrics"]["write_masks"] or cfg["metrics"]["write_overlays"]:
        n = export_predictions(args.ckpt, manifest, args.split, scenes,
                               out / f"masks_{args.split}", tau=tau,
                               batch=cfg["train"]["batch"],
                               overlays=cfg["metrics"]["write_overlays"])
        print(f"wrote {n} mask PNGs -> {out / f'masks_{args.split}'}")
    rep = reports["change"]
    print(f"change: recall={rep.recall:.4f} precision={rep.precision:.4f} "
          f"f1={rep.f1:.4f} iou={rep.iou:.4f}")
    if reports["seg"] is not None:
        seg = reports["seg"]
        print(f"seg:    recall={seg.recall:.4f} precision={seg.precision:.4f} "
              f"f1={seg.f1:.4f} iou={seg.iou:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    img1 = load_raster(args.t1, channels=3).transpose(2, 0, 1).astype(np.float32) / 255.0
    img2 = load_raster(args.t2, channels=3).transpose(2, 0, 1).astype(np.float32) / 255.0
    _, masks = predict(args.ckpt, img1, img2, tau=cfg["metrics"]["tau"])
    for kind, mask in masks.items():
        write_mask_png(out / f"{kind}.png", mask)
    print(f"wrote {', '.join(sorted(masks))} masks -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    scenes = _load_scenes(cfg)
    manifest = _load_manifest(cfg)
    base = _train_config(cfg)
    eval_split = "val" if manifest.records_for("val") else "train"
    rows = run_ablation(base, manifest, scenes, out_dir=out, eval_split=eval_split)
    print(format_ablation_table(rows))
    return EXIT_OK


def cmd_compare_pc(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    scenes = _load_scenes(cfg)
    manifest = _load_manifest(cfg)
    reports = compare_post_classification(args.ckpt, manifest, args.split, scenes,
                                          tau=cfg["metrics"]["tau"], batch=cfg["train"]["batch"])
    doc = {label: rep.to_dict() for label, rep in reports.items()}
    (out / "post_classification.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for label in ("subtracted", "dataset"):
        rep = reports[label]
        print(f"{label:10s} recall={rep.recall:.4f} precision={rep.precision:.4f} "
              f"f1={rep.f1:.4f} iou={rep.iou:.4f}")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _resolve_config(args)
    results = run_self_tests(seed=cfg["seed"])
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} self-tests passed")
    return EXIT_OK if failed == 0 else 1


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "compare-pc": cmd_compare_pc,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbortError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DtcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
