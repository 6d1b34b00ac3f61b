"""Self-describing checkpoint archive.

A checkpoint is a single uncompressed zip holding:

    meta.json               format tag, version, training step counter
    model_config.json       every ModelConfig field
    extra.json              free-form run metadata (loss/train settings)
    params/<name>.npy       model state arrays keyed by their hierarchical
                            state-dict names (weights, biases, BN statistics)
    optim/state.json        optimizer hyperparameters and per-parameter step
    optim/<name>.<slot>.npy Adam first/second moment arrays per parameter

All entries carry a fixed timestamp and are written in sorted order, so two
checkpoints of identical training runs are byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import DataError

FORMAT_TAG = "dtcd-checkpoint"
FORMAT_VERSION = 1
_FIXED_STAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict[str, np.ndarray]
    optim: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def build_model(self):
        from .model import DualTaskChangeNet

        model = DualTaskChangeNet(self.model_config)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        return model

    def build_optimizer(self, model) -> torch.optim.Adam:
        hyper = (self.optim or {}).get("hyper", {})
        opt = torch.optim.Adam(
            model.parameters(),
            lr=hyper.get("lr", 1e-3),
            betas=tuple(hyper.get("betas", (0.9, 0.999))),
            eps=hyper.get("eps", 1e-8),
        )
        if self.optim and self.optim.get("slots"):
            names = [n for n, _ in model.named_parameters()]
            state = {}
            for idx, name in enumerate(names):
                slots = self.optim["slots"].get(name)
                if slots is None:
                    continue
                state[idx] = {
                    "step": torch.tensor(float(self.optim["steps"][name])),
                    "exp_avg": torch.from_numpy(slots["exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(slots["exp_avg_sq"].copy()),
                }
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        return opt


def snapshot(model, optimizer=None, step: int = 0, extra: dict | None = None) -> Checkpoint:
    """Capture model (and optionally Adam) state as numpy arrays."""
    state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    optim = None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        group = optimizer.param_groups[0]
        slots: dict[str, dict] = {}
        steps: dict[str, float] = {}
        sd = optimizer.state_dict()["state"]
        for idx, name in enumerate(names):
            entry = sd.get(idx)
            if entry is None:
                continue
            slots[name] = {
                "exp_avg": entry["exp_avg"].detach().cpu().numpy().copy(),
                "exp_avg_sq": entry["exp_avg_sq"].detach().cpu().numpy().copy(),
            }
            steps[name] = float(entry["step"])
        optim = {
            "hyper": {"lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"]},
            "slots": slots,
            "steps": steps,
        }
    return Checkpoint(model_config=model.cfg, state=state, optim=optim, step=step,
                      extra=dict(extra or {}))


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically (tmp file + rename) with fixed zip metadata."""
    path = Path(path)
    entries: dict[str, bytes] = {
        "meta.json": _json_bytes(
            {
                "format": FORMAT_TAG,
                "version": FORMAT_VERSION,
                "step": ckpt.step,
                "params": sorted(ckpt.state),
                "has_optimizer": ckpt.optim is not None,
            }
        ),
        "model_config.json": _json_bytes(ckpt.model_config.to_dict()),
        "extra.json": _json_bytes(ckpt.extra),
    }
    for name, arr in ckpt.state.items():
        entries[f"params/{name}.npy"] = _npy_bytes(arr)
    if ckpt.optim is not None:
        entries["optim/state.json"] = _json_bytes(
            {"hyper": ckpt.optim["hyper"], "steps": ckpt.optim["steps"]}
        )
        for name, slots in ckpt.optim["slots"].items():
            entries[f"optim/{name}.exp_avg.npy"] = _npy_bytes(slots["exp_avg"])
            entries[f"optim/{name}.exp_avg_sq.npy"] = _npy_bytes(slots["exp_avg_sq"])

    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_FIXED_STAMP)
            zf.writestr(info, entries[name])
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise DataError(f"{path} is not a checkpoint archive (no meta.json)")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT_TAG:
            raise DataError(f"{path}: unexpected archive format {meta.get('format')!r}")
        cfg = ModelConfig.from_dict(json.loads(zf.read("model_config.json")))
        extra = json.loads(zf.read("extra.json")) if "extra.json" in names else {}
        state = {
            p: np.load(io.BytesIO(zf.read(f"params/{p}.npy")), allow_pickle=False)
            for p in meta["params"]
        }
        optim = None
        if meta.get("has_optimizer") and "optim/state.json" in names:
            ostate = json.loads(zf.read("optim/state.json"))
            slots = {}
            for pname in ostate["steps"]:
                slots[pname] = {
                    "exp_avg": np.load(io.BytesIO(zf.read(f"optim/{pname}.exp_avg.npy")), allow_pickle=False),
                    "exp_avg_sq": np.load(io.BytesIO(zf.read(f"optim/{pname}.exp_avg_sq.npy")), allow_pickle=False),
                }
            optim = {"hyper": ostate["hyper"], "slots": slots, "steps": ostate["steps"]}
    return Checkpoint(model_config=cfg, state=state, optim=optim, step=meta["step"], extra=extra)
