"""Raster tiling, manifests, sample loading, and joint augmentation.

A scene set is one pair of co-registered RGB rasters plus three binary label
rasters (per-epoch building masks and the change mask). Scenes are cut into a
non-overlapping ceil-grid of square tiles, zero-padding the right/bottom
edges, then shuffled into train/val/test splits recorded in a JSON manifest
alongside the source checksums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, DataIntegrityError

MANIFEST_VERSION = 1
RASTER_KINDS = ("t1", "t2", "seg_t1", "seg_t2", "change")


@dataclass(frozen=True)
class TileRecord:
    scene_id: str
    x0: int
    y0: int
    size: int
    split: str | None = None


@dataclass
class SceneSet:
    """Five co-registered rasters: two 3-channel images (H, W, 3) uint8 and
    three binary {0, 255} label rasters (H, W) uint8."""

    image_t1: np.ndarray
    image_t2: np.ndarray
    seg_label_t1: np.ndarray
    seg_label_t2: np.ndarray
    change_label: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        h, w = self.image_t1.shape[:2]
        for kind, arr in self.rasters().items():
            if arr.shape[:2] != (h, w):
                raise DataError(f"raster '{kind}' is {arr.shape[:2]}, expected {(h, w)}")
            if arr.dtype != np.uint8:
                raise DataError(f"raster '{kind}' must be 8-bit, got {arr.dtype}")
        for kind in ("t1", "t2"):
            if self.rasters()[kind].ndim != 3 or self.rasters()[kind].shape[2] != 3:
                raise DataError(f"image '{kind}' must have 3 channels")
        for kind in ("seg_t1", "seg_t2", "change"):
            arr = self.rasters()[kind]
            if arr.ndim != 2:
                raise DataError(f"label '{kind}' must be single-channel")
            if not np.isin(arr, (0, 255)).all():
                raise DataError(f"label '{kind}' must be strictly binary with values {{0, 255}}")

    @property
    def width(self) -> int:
        return self.image_t1.shape[1]

    @property
    def height(self) -> int:
        return self.image_t1.shape[0]

    def rasters(self) -> dict[str, np.ndarray]:
        return {
            "t1": self.image_t1,
            "t2": self.image_t2,
            "seg_t1": self.seg_label_t1,
            "seg_t2": self.seg_label_t2,
            "change": self.change_label,
        }

    def checksums(self) -> dict[str, str]:
        return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
                for k, v in self.rasters().items()}

    @classmethod
    def from_files(cls, t1, t2, seg_t1, seg_t2, change, scene_id: str = "scene") -> "SceneSet":
        return cls(
            image_t1=load_raster(t1, channels=3),
            image_t2=load_raster(t2, channels=3),
            seg_label_t1=load_raster(seg_t1, channels=1),
            seg_label_t2=load_raster(seg_t2, channels=1),
            change_label=load_raster(change, channels=1),
            scene_id=scene_id,
        )


def load_raster(path: str | Path, channels: int) -> np.ndarray:
    """Read an 8-bit PNG/TIFF raster as (H, W) or (H, W, 3) uint8."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"raster {path} does not exist")
    with Image.open(path) as img:
        if channels == 3:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        else:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    return arr


def write_raster(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(Path(path))


@dataclass
class Manifest:
    width: int
    height: int
    tile_size: int
    seed: int
    checksums: dict[str, str]
    records: list[TileRecord]
    version: int = MANIFEST_VERSION

    def records_for(self, split: str) -> list[TileRecord]:
        return [r for r in self.records if r.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {"train": 0, "val": 0, "test": 0}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "width": self.width,
            "height": self.height,
            "tile_size": self.tile_size,
            "seed": self.seed,
            "checksums": dict(sorted(self.checksums.items())),
            "records": [
                {"scene_id": r.scene_id, "x0": r.x0, "y0": r.y0, "split": r.split}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(
            width=d["width"],
            height=d["height"],
            tile_size=d["tile_size"],
            seed=d["seed"],
            checksums=dict(d["checksums"]),
            records=[
                TileRecord(scene_id=r["scene_id"], x0=r["x0"], y0=r["y0"],
                           size=d["tile_size"], split=r["split"])
                for r in d["records"]
            ],
            version=d.get("version", MANIFEST_VERSION),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} does not exist")
        return cls.from_dict(json.loads(path.read_text()))

    def verify_scenes(self, scenes: SceneSet) -> None:
        actual = scenes.checksums()
        for kind, expected in self.checksums.items():
            if actual.get(kind) != expected:
                raise DataIntegrityError(
                    f"checksum mismatch for raster '{kind}': scene data does not "
                    f"match the manifest"
                )


def tile_scene(width: int, height: int, tile: int, scene_id: str = "scene") -> list[TileRecord]:
    """Non-overlapping ceil-grid of tiles; edge tiles extend into zero padding."""
    if width <= 0 or height <= 0 or tile <= 0:
        raise ConfigurationError("width, height, and tile size must be positive")
    nx = -(-width // tile)
    ny = -(-height // tile)
    return [
        TileRecord(scene_id=scene_id, x0=ix * tile, y0=iy * tile, size=tile)
        for iy in range(ny)
        for ix in range(nx)
    ]


def split_manifest(tiles: list[TileRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0,
                   width: int = 0, height: int = 0,
                   checksums: dict[str, str] | None = None) -> Manifest:
    """Shuffle tiles under ``seed`` and split train/val/test.

    Val/test counts are floored, the remainder goes to train, so 7620 tiles at
    (0.8, 0.1, 0.1) yield 6096/762/762.
    """
    ratios = tuple(ratios)
    if len(ratios) != 3:
        raise ConfigurationError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios {ratios} must be non-negative and sum to 1")
    n = len(tiles)
    n_splits = sum(1 for r in ratios if r > 0)
    if n < n_splits:
        raise DataError(f"cannot split {n} tiles into {n_splits} non-empty parts")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test

    assigned: list[TileRecord] = [None] * n
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        assigned[idx] = replace(tiles[idx], split=split)

    if not tiles:
        raise DataError("no tiles to split")
    size = tiles[0].size
    return Manifest(width=width, height=height, tile_size=size, seed=seed,
                    checksums=dict(checksums or {}), records=assigned)


def build_manifest(scenes: SceneSet, tile: int = 256, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Manifest:
    tiles = tile_scene(scenes.width, scenes.height, tile, scene_id=scenes.scene_id)
    return split_manifest(tiles, ratios=ratios, seed=seed, width=scenes.width,
                          height=scenes.height, checksums=scenes.checksums())


def crop_padded(arr: np.ndarray, x0: int, y0: int, size: int) -> np.ndarray:
    """Crop a (H, W[, C]) raster, zero-filling beyond the right/bottom edges."""
    h, w = arr.shape[:2]
    out_shape = (size, size) + arr.shape[2:]
    out = np.zeros(out_shape, dtype=arr.dtype)
    ys = slice(y0, min(y0 + size, h))
    xs = slice(x0, min(x0 + size, w))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[: ys.stop - ys.start, : xs.stop - xs.start] = arr[ys, xs]
    return out


@dataclass
class BitemporalSample:
    """One training sample: normalized images (3, s, s) float32 in [0, 1] and
    binary labels (s, s) uint8."""

    img_t1: np.ndarray
    img_t2: np.ndarray
    y_cd: np.ndarray
    y_t1: np.ndarray
    y_t2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"img_t1": self.img_t1, "img_t2": self.img_t2,
                "y_cd": self.y_cd, "y_t1": self.y_t1, "y_t2": self.y_t2}


def load_sample(rec: TileRecord, scenes: SceneSet, manifest: Manifest | None = None) -> BitemporalSample:
    """Crop all five rasters at the record, normalize images by /255, map
    label 255 -> 1. With a manifest, scene checksums are verified first."""
    if manifest is not None:
        manifest.verify_scenes(scenes)
        padded_w = -(-manifest.width // manifest.tile_size) * manifest.tile_size
        padded_h = -(-manifest.height // manifest.tile_size) * manifest.tile_size
        if not (0 <= rec.x0 < padded_w and 0 <= rec.y0 < padded_h):
            raise DataError(f"tile origin ({rec.x0}, {rec.y0}) outside padded bounds")
    s = rec.size

    def img(arr):
        crop = crop_padded(arr, rec.x0, rec.y0, s)
        return np.ascontiguousarray(crop.transpose(2, 0, 1)).astype(np.float32) / 255.0

    def lab(arr):
        return (crop_padded(arr, rec.x0, rec.y0, s) > 0).astype(np.uint8)

    return BitemporalSample(
        img_t1=img(scenes.image_t1),
        img_t2=img(scenes.image_t2),
        y_cd=lab(scenes.change_label),
        y_t1=lab(scenes.seg_label_t1),
        y_t2=lab(scenes.seg_label_t2),
    )


@dataclass(frozen=True)
class AugmentOp:
    """A joint geometric transform: quarter rotations then optional flips,
    applied identically to every array of a sample."""

    rot_quarter: int = 0
    hflip: bool = False
    vflip: bool = False

    def __post_init__(self):
        if self.rot_quarter not in (0, 1, 2, 3):
            raise ConfigurationError("rot_quarter must be one of 0..3")

    @property
    def is_identity(self) -> bool:
        return self.rot_quarter == 0 and not self.hflip and not self.vflip

    def inverse(self) -> "AugmentOp":
        # flips first (self-inverse), then undo the rotation; expressed back
        # in rotate-then-flip form this swaps the flip axes for odd rotations.
        k = (-self.rot_quarter) % 4
        if self.rot_quarter % 2 == 0:
            return AugmentOp(rot_quarter=k, hflip=self.hflip, vflip=self.vflip)
        return AugmentOp(rot_quarter=k, hflip=self.vflip, vflip=self.hflip)


ALL_AUGMENT_OPS = tuple(
    AugmentOp(rot_quarter=k, hflip=bool(h), vflip=bool(v))
    for k in range(4) for h in (0, 1) for v in (0, 1)
)


def apply_geometric(arr: np.ndarray, op: AugmentOp) -> np.ndarray:
    """Apply an op to one array whose trailing two axes are (row, col)."""
    axes = (arr.ndim - 2, arr.ndim - 1)
    out = np.rot90(arr, k=op.rot_quarter, axes=axes)
    if op.hflip:
        out = np.flip(out, axis=axes[1])
    if op.vflip:
        out = np.flip(out, axis=axes[0])
    return np.ascontiguousarray(out)


def augment(sample: BitemporalSample, op: AugmentOp) -> BitemporalSample:
    return BitemporalSample(**{k: apply_geometric(v, op) for k, v in sample.arrays().items()})


def sample_augment_op(rng: np.random.Generator, enabled: bool = True) -> AugmentOp:
    """Uniform over the 16 rotation x flip combinations; identity when disabled."""
    if not enabled:
        return AugmentOp()
    return AugmentOp(
        rot_quarter=int(rng.integers(0, 4)),
        hflip=bool(rng.integers(0, 2)),
        vflip=bool(rng.integers(0, 2)),
    )


@dataclass
class Batch:
    """Stacked sample arrays ready for the model: images (B, 3, s, s) float32,
    labels (B, 1, s, s) float32."""

    img_t1: np.ndarray
    img_t2: np.ndarray
    y_cd: np.ndarray
    y_t1: np.ndarray
    y_t2: np.ndarray
    records: list[TileRecord]


def batch_iter(manifest: Manifest, split: str, scenes: SceneSet, batch: int = 16,
               seed: int = 0, augment_flag: bool = False, epoch: int = 0):
    """Yield batches for one epoch; the train split is reshuffled per epoch
    under (seed, epoch), other splits keep a fixed order. The last partial
    batch is emitted."""
    if split not in ("train", "val", "test"):
        raise ConfigurationError(f"unknown split '{split}'")
    records = manifest.records_for(split)
    if not records:
        raise DataError(f"split '{split}' is empty")
    manifest.verify_scenes(scenes)

    if split == "train":
        order_rng = np.random.default_rng((manifest.seed, seed, epoch, 0xD5))
        records = [records[i] for i in order_rng.permutation(len(records))]
    aug_rng = np.random.default_rng((manifest.seed, seed, epoch, 0xA6))

    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        samples = []
        for rec in chunk:
            s = load_sample(rec, scenes)
            op = sample_augment_op(aug_rng, enabled=augment_flag)
            if not op.is_identity:
                s = augment(s, op)
            samples.append(s)
        yield Batch(
            img_t1=np.stack([s.img_t1 for s in samples]),
            img_t2=np.stack([s.img_t2 for s in samples]),
            y_cd=np.stack([s.y_cd for s in samples])[:, None].astype(np.float32),
            y_t1=np.stack([s.y_t1 for s in samples])[:, None].astype(np.float32),
            y_t2=np.stack([s.y_t2 for s in samples])[:, None].astype(np.float32),
            records=list(chunk),
        )


def export_tile_cache(manifest: Manifest, scenes: SceneSet, out_dir: str | Path) -> int:
    """Write one PNG per raster per tile, named {scene}_{x0}_{y0}_{kind}.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.verify_scenes(scenes)
    rasters = scenes.rasters()
    n = 0
    for rec in manifest.records:
        for kind, arr in rasters.items():
            crop = crop_padded(arr, rec.x0, rec.y0, rec.size)
            write_raster(out_dir / f"{rec.scene_id}_{rec.x0}_{rec.y0}_{kind}.png", crop)
            n += 1
    return n
