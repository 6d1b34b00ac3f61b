"""Configuration dataclasses and the JSON run-config schema.

Every knob of the pipeline surfaces in :func:`default_run_config`; unknown
keys in a user config are rejected by name so typos never silently fall back
to defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

ENCODER_PRESETS = {
    # 34-layer style SE residual encoder: stem + 4 residual stages.
    "default": dict(stage_channels=(64, 64, 128, 256, 512), blocks_per_stage=(3, 4, 6, 3), se_reduction=16),
    # Desk-scale preset for tests and CPU experiments.
    "tiny": dict(stage_channels=(16, 16, 32, 64, 128), blocks_per_stage=(1, 1, 1, 1), se_reduction=4),
}

# SPP bins must each fit inside the deepest feature map: 8x8 for 256-pixel
# tiles, 2x2 for 64-pixel desk-scale tiles.
SPP_BINS_BY_PRESET = {"default": (1, 2, 3, 6), "tiny": (1, 2)}


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (3, 4, 6, 3)
    se_reduction: int = 16
    preset_name: str = "default"

    def __post_init__(self):
        if len(self.stage_channels) != 5:
            raise ConfigurationError("stage_channels must list exactly 5 stages")
        if len(self.blocks_per_stage) != 4:
            raise ConfigurationError("blocks_per_stage must list exactly 4 residual stages")
        if any(c <= 0 for c in self.stage_channels) or any(b <= 0 for b in self.blocks_per_stage):
            raise ConfigurationError("stage channels and block counts must be positive")
        if self.se_reduction <= 0:
            raise ConfigurationError("se_reduction must be positive")
        for c in self.stage_channels:
            if c % self.se_reduction != 0:
                raise ConfigurationError(
                    f"stage channel count {c} not divisible by se_reduction {self.se_reduction}"
                )

    @classmethod
    def preset(cls, name: str) -> "EncoderConfig":
        if name not in ENCODER_PRESETS:
            raise ConfigurationError(f"unknown encoder preset '{name}'")
        return cls(preset_name=name, **ENCODER_PRESETS[name])


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_dam: bool = True
    use_ssn: bool = True
    deep_supervision: bool = True
    spp_bins: tuple[int, ...] = (1, 2, 3, 6)
    input_channels: int = 3
    # When true the two temporal skips are differenced instead of
    # concatenated before the 1x1 fuse.
    diff_skips: bool = False
    # Cap on H*W of any map fed to dual attention; the affinity matrix is
    # (H*W)^2 so this is a hard memory guard (4096 == a 64x64 map).
    max_attention_positions: int = 4096

    def __post_init__(self):
        bins = tuple(self.spp_bins)
        if any(b <= 0 for b in bins) or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ConfigurationError("spp_bins must be strictly increasing positive ints")
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be >= 1")
        if self.max_attention_positions < 1:
            raise ConfigurationError("max_attention_positions must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        base = dict(encoder=EncoderConfig.preset(name), spp_bins=SPP_BINS_BY_PRESET[name])
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "encoder": {
                "stage_channels": list(self.encoder.stage_channels),
                "blocks_per_stage": list(self.encoder.blocks_per_stage),
                "se_reduction": self.encoder.se_reduction,
                "preset_name": self.encoder.preset_name,
            },
            "use_dam": self.use_dam,
            "use_ssn": self.use_ssn,
            "deep_supervision": self.deep_supervision,
            "spp_bins": list(self.spp_bins),
            "input_channels": self.input_channels,
            "diff_skips": self.diff_skips,
            "max_attention_positions": self.max_attention_positions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d["encoder"]
        return cls(
            encoder=EncoderConfig(
                stage_channels=tuple(enc["stage_channels"]),
                blocks_per_stage=tuple(enc["blocks_per_stage"]),
                se_reduction=enc["se_reduction"],
                preset_name=enc.get("preset_name", "custom"),
            ),
            use_dam=d["use_dam"],
            use_ssn=d["use_ssn"],
            deep_supervision=d["deep_supervision"],
            spp_bins=tuple(d["spp_bins"]),
            input_channels=d["input_channels"],
            diff_skips=d.get("diff_skips", False),
            max_attention_positions=d.get("max_attention_positions", 4096),
        )


@dataclass(frozen=True)
class CdlParams:
    """Exponents of the change detection loss: delta weights changed samples,
    theta weights unchanged ones."""

    delta: float = 2.0
    theta: float = 2.0

    def __post_init__(self):
        if self.delta < 0 or self.theta < 0:
            raise ConfigurationError("CDL exponents must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    """Dual-task balance: alpha scales each segmentation loss, lambda_cd the
    change-detection loss (including its deep-supervision mean)."""

    alpha: float = 0.25
    lambda_cd: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_cd < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.alpha == 0 and self.lambda_cd == 0:
            raise ConfigurationError("alpha and lambda_cd cannot both be zero")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "cdl"  # bce | focal | cdl
    params: CdlParams = field(default_factory=CdlParams)
    weights: LossWeights = field(default_factory=LossWeights)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.kind not in ("bce", "focal", "cdl"):
            raise ConfigurationError(f"unknown loss kind '{self.kind}'")
        if self.focal_gamma < 0:
            raise ConfigurationError("focal_gamma must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigurationError("focal_alpha must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch: int = 16
    lr: float = 1e-3
    max_steps: int = 1000
    # alternative budget: when set, overrides max_steps with
    # epochs * ceil(train_tiles / batch) at train start
    epochs: int | None = None
    seed: int = 0
    checkpoint_every: int = 200
    eval_every: int = 200
    augment: bool = False
    tau: float = 0.5
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigurationError("batch must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")


def default_run_config() -> dict:
    """The fully-populated run config with every documented default."""
    return {
        "seed": 0,
        "out": None,
        "data": {
            "t1": None,
            "t2": None,
            "seg_t1": None,
            "seg_t2": None,
            "change": None,
            "manifest": None,
            "tile_size": 256,
            "ratios": [0.8, 0.1, 0.1],
            "cache_dir": None,
        },
        "model": {
            "preset": "default",
            "input_channels": 3,
            "use_dam": True,
            "use_ssn": True,
            "deep_supervision": True,
            "spp_bins": None,  # None -> preset default
            "diff_skips": False,
            "max_attention_positions": 4096,
        },
        "loss": {
            "kind": "cdl",
            "delta": 2.0,
            "theta": 2.0,
            "alpha": 0.25,
            "lambda_cd": 0.5,
            "focal_gamma": 2.0,
            "focal_alpha": 0.25,
        },
        "train": {
            "preset": None,  # ablation preset name; overrides model/loss flags
            "batch": 16,
            "lr": 1e-3,
            "max_steps": 1000,
            "epochs": None,
            "checkpoint_every": 200,
            "eval_every": 200,
            "augment": False,
            "deterministic": True,
            "workers": 1,
            "device": "cpu",
        },
        "metrics": {
            "tau": 0.5,
            "write_masks": False,
            "write_overlays": False,
        },
    }


def merge_run_config(user: dict, base: dict | None = None, _path: str = "") -> dict:
    """Overlay ``user`` onto the defaults, rejecting unknown keys by name."""
    merged = copy.deepcopy(base if base is not None else default_run_config())
    for key, value in user.items():
        path = f"{_path}{key}"
        if key not in merged:
            raise ConfigurationError(f"unknown config key '{path}'")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = merge_run_config(value, merged[key], _path=path + ".")
        else:
            merged[key] = value
    return merged


def load_run_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return merge_run_config(user)


def save_run_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def model_config_from_run(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    preset = m.get("preset", "default")
    if preset not in ENCODER_PRESETS:
        raise ConfigurationError(f"unknown model preset '{preset}'")
    bins = m["spp_bins"] if m.get("spp_bins") else SPP_BINS_BY_PRESET[preset]
    return ModelConfig(
        encoder=EncoderConfig.preset(preset),
        use_dam=m["use_dam"],
        use_ssn=m["use_ssn"],
        deep_supervision=m["deep_supervision"],
        spp_bins=tuple(bins),
        input_channels=m["input_channels"],
        diff_skips=m["diff_skips"],
        max_attention_positions=m["max_attention_positions"],
    )


def loss_config_from_run(cfg: dict) -> LossConfig:
    l = cfg["loss"]
    return LossConfig(
        kind=l["kind"],
        params=CdlParams(delta=l["delta"], theta=l["theta"]),
        weights=LossWeights(alpha=l["alpha"], lambda_cd=l["lambda_cd"]),
        focal_gamma=l["focal_gamma"],
        focal_alpha=l["focal_alpha"],
    )
