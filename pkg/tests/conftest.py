import numpy as np
import pytest
import torch

from dtcd.config import ModelConfig, TrainConfig
from dtcd.data import build_manifest
from dtcd.synthetic import synthetic_scene_set

# Acceptance results are collected here and printed as one line per criterion
# at the end of the session.
_ACCEPTANCE: dict[str, dict] = {}


def record_criterion(number: int, description: str) -> None:
    _ACCEPTANCE[f"criterion_{number:02d}"] = {"number": number, "description": description}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "nodeid", "")
            if "test_acceptance" in name:
                outcomes[name] = status
    lines = []
    for key in sorted(_ACCEPTANCE):
        info = _ACCEPTANCE[key]
        matches = [s for n, s in outcomes.items() if f"criterion_{info['number']:02d}" in n]
        status = "PASS" if matches and all(m == "passed" for m in matches) else "FAIL"
        lines.append(f"  {status}  criterion {info['number']:2d}: {info['description']}")
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig.preset("tiny")


@pytest.fixture(scope="session")
def synthetic_scene():
    return synthetic_scene_set(seed=7, width=256, height=256, n_buildings=24)


@pytest.fixture(scope="session")
def synthetic_manifest(synthetic_scene):
    # 256x256 scene in 64-pixel tiles: 16 tiles, 14/1/1 split
    return build_manifest(synthetic_scene, tile=64, ratios=(0.8, 0.1, 0.1), seed=3)


@pytest.fixture(scope="session")
def overfit_manifest(synthetic_scene):
    # every tile in the train split: the 16-pair overfit set
    return build_manifest(synthetic_scene, tile=64, ratios=(1.0, 0.0, 0.0), seed=3)


@pytest.fixture()
def seeded():
    torch.manual_seed(0)
    return np.random.default_rng(0)


def overfit_train_config(max_steps: int, *, use_dam=True, use_ssn=True, augment=False,
                         seed: int = 5) -> TrainConfig:
    from dtcd.config import CdlParams, LossConfig, LossWeights

    model = ModelConfig.preset("tiny", use_dam=use_dam, use_ssn=use_ssn)
    loss = LossConfig(kind="cdl", params=CdlParams(2.0, 2.0),
                      weights=LossWeights(alpha=0.25 if use_ssn else 0.0, lambda_cd=0.5))
    return TrainConfig(model=model, loss=loss, batch=16, lr=1e-3, max_steps=max_steps,
                       seed=seed, checkpoint_every=0, eval_every=0, augment=augment)
