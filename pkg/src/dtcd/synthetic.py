"""Synthetic bitemporal scenes with geometric building footprints.

Rectangular "buildings" are placed on a textured background; each one either
persists across epochs, exists only at t1 (demolished), or only at t2
(constructed). Labels are consistent by construction: the change mask is
exactly the XOR of the two segmentation masks, which makes these scenes
suitable both for overfit training checks and for label-divergence tests.
"""

from __future__ import annotations

import numpy as np

from .data import SceneSet


def _textured_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = rng.integers(50, 90, size=(height, width, 1), dtype=np.int32)
    tint = rng.integers(-10, 10, size=(1, 1, 3), dtype=np.int32)
    noise = rng.integers(-8, 8, size=(height, width, 3), dtype=np.int32)
    return np.clip(base + tint + noise, 0, 255).astype(np.uint8)


def synthetic_scene_set(seed: int = 0, width: int = 256, height: int = 256,
                        n_buildings: int = 24, scene_id: str = "synthetic") -> SceneSet:
    """Generate one scene set. Roughly a third of the buildings persist, a
    third are demolished after t1, and a third are newly constructed at t2."""
    rng = np.random.default_rng(seed)
    img1 = _textured_background(rng, height, width)
    img2 = _textured_background(rng, height, width)
    mask1 = np.zeros((height, width), dtype=bool)
    mask2 = np.zeros((height, width), dtype=bool)

    min_side = max(4, min(height, width) // 16)
    max_side = max(min_side + 1, min(height, width) // 5)
    for i in range(n_buildings):
        bw = int(rng.integers(min_side, max_side))
        bh = int(rng.integers(min_side, max_side))
        x = int(rng.integers(0, max(1, width - bw)))
        y = int(rng.integers(0, max(1, height - bh)))
        fate = i % 3  # 0 persists, 1 only at t1, 2 only at t2
        color = rng.integers(150, 240, size=3)
        footprint = (slice(y, y + bh), slice(x, x + bw))
        if fate in (0, 1):
            mask1[footprint] = True
            img1[footprint] = np.clip(color + rng.integers(-12, 12, size=(bh, bw, 3)), 0, 255)
        if fate in (0, 2):
            mask2[footprint] = True
            img2[footprint] = np.clip(color + rng.integers(-12, 12, size=(bh, bw, 3)), 0, 255)

    change = mask1 ^ mask2
    return SceneSet(
        image_t1=img1,
        image_t2=img2,
        seg_label_t1=mask1.astype(np.uint8) * 255,
        seg_label_t2=mask2.astype(np.uint8) * 255,
        change_label=change.astype(np.uint8) * 255,
        scene_id=scene_id,
    )
