import numpy as np
import pytest

from dtcd.data import (ALL_AUGMENT_OPS, AugmentOp, Manifest, SceneSet, apply_geometric,
                       augment, batch_iter, build_manifest, crop_padded, export_tile_cache,
                       load_sample, sample_augment_op, split_manifest, tile_scene)
from dtcd.errors import ConfigurationError, DataError, DataIntegrityError
from dtcd.synthetic import synthetic_scene_set


class TestTileScene:
    def test_production_scene_dimensions(self):
        # ceil(32507/256) * ceil(15354/256) = 127 * 60
        tiles = tile_scene(32507, 15354, 256)
        assert len(tiles) == 127 * 60 == 7620

    def test_exact_fit_single_tile(self):
        assert len(tile_scene(256, 256, 256)) == 1

    def test_padded_grid(self):
        tiles = tile_scene(512, 300, 256)
        assert len(tiles) == 4
        assert {(t.x0, t.y0) for t in tiles} == {(0, 0), (256, 0), (0, 256), (256, 256)}

    def test_every_source_pixel_covered_exactly_once(self):
        w, h, tile = 700, 450, 256
        covered = sum(
            max(0, min(t.x0 + t.size, w) - t.x0) * max(0, min(t.y0 + t.size, h) - t.y0)
            for t in tile_scene(w, h, tile)
        )
        assert covered == w * h

    def test_invalid_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            tile_scene(0, 100, 256)


class TestSplitManifest:
    def test_production_counts(self):
        tiles = tile_scene(32507, 15354, 256)
        manifest = split_manifest(tiles, ratios=(0.8, 0.1, 0.1), seed=0,
                                  width=32507, height=15354)
        counts = manifest.split_counts()
        assert counts == {"train": 6096, "val": 762, "test": 762}

    def test_same_seed_identical(self):
        tiles = tile_scene(1000, 700, 256)
        a = split_manifest(tiles, seed=42, width=1000, height=700)
        b = split_manifest(tiles, seed=42, width=1000, height=700)
        assert a.to_dict() == b.to_dict()

    def test_floor_then_remainder_to_train(self):
        tiles = tile_scene(256 * 10, 256, 256)
        manifest = split_manifest(tiles, ratios=(0.8, 0.1, 0.1), seed=1,
                                  width=2560, height=256)
        assert manifest.split_counts() == {"train": 8, "val": 1, "test": 1}

    def test_splits_partition_records(self):
        tiles = tile_scene(1200, 900, 256)
        manifest = split_manifest(tiles, seed=5, width=1200, height=900)
        assert len(manifest.records) == len(tiles)
        assert all(r.split in ("train", "val", "test") for r in manifest.records)
        keys = {(r.x0, r.y0) for r in manifest.records}
        assert keys == {(t.x0, t.y0) for t in tiles}

    def test_bad_ratios_rejected(self):
        tiles = tile_scene(512, 512, 256)
        with pytest.raises(ConfigurationError):
            split_manifest(tiles, ratios=(0.5, 0.3, 0.3), width=512, height=512)

    def test_fewer_tiles_than_splits(self):
        tiles = tile_scene(256, 256, 256)
        with pytest.raises(DataError):
            split_manifest(tiles, ratios=(0.8, 0.1, 0.1), width=256, height=256)

    def test_json_roundtrip(self, tmp_path, synthetic_manifest):
        path = tmp_path / "manifest.json"
        synthetic_manifest.save(path)
        loaded = Manifest.load(path)
        assert loaded.to_dict() == synthetic_manifest.to_dict()


class TestLoadSample:
    def test_normalization_and_label_mapping(self, synthetic_scene, synthetic_manifest):
        rec = synthetic_manifest.records[0]
        s = load_sample(rec, synthetic_scene, synthetic_manifest)
        assert s.img_t1.shape == (3, 64, 64) and s.img_t1.dtype == np.float32
        assert s.img_t1.min() >= 0.0 and s.img_t1.max() <= 1.0
        assert set(np.unique(s.y_cd)) <= {0, 1}
        crop = synthetic_scene.change_label[rec.y0:rec.y0 + 64, rec.x0:rec.x0 + 64]
        np.testing.assert_array_equal(s.y_cd, (crop > 0).astype(np.uint8))

    def test_full_intensity_maps_to_one(self):
        img = np.full((64, 64, 3), 255, dtype=np.uint8)
        zeros = np.zeros((64, 64), dtype=np.uint8)
        scene = SceneSet(img, img, zeros, zeros, zeros)
        s = load_sample(tile_scene(64, 64, 64)[0], scene)
        assert s.img_t1.max() == 1.0 and s.img_t1.min() == 1.0

    def test_all_zero_labels(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        zeros = np.zeros((64, 64), dtype=np.uint8)
        scene = SceneSet(img, img, zeros, zeros, zeros)
        s = load_sample(tile_scene(64, 64, 64)[0], scene)
        assert s.y_cd.sum() == 0 and s.y_t1.sum() == 0 and s.y_t2.sum() == 0

    def test_padded_margin_is_zero(self):
        img = np.full((40, 40, 3), 200, dtype=np.uint8)
        ones = np.full((40, 40), 255, dtype=np.uint8)
        scene = SceneSet(img, img, ones, ones, ones)
        rec = tile_scene(40, 40, 64)[0]
        s = load_sample(rec, scene)
        assert s.img_t1[:, 40:, :].max() == 0.0 and s.img_t1[:, :, 40:].max() == 0.0
        assert s.y_cd[40:, :].max() == 0 and s.y_cd[:, 40:].max() == 0
        assert s.y_cd[:40, :40].min() == 1

    def test_checksum_mismatch_detected(self, synthetic_scene, synthetic_manifest):
        tampered = synthetic_scene_set(seed=99, width=256, height=256)
        with pytest.raises(DataIntegrityError):
            load_sample(synthetic_manifest.records[0], tampered, synthetic_manifest)

    def test_out_of_bounds_record_rejected(self, synthetic_scene, synthetic_manifest):
        from dtcd.data import TileRecord

        bad = TileRecord(scene_id="scene", x0=10_000, y0=0, size=64, split="train")
        with pytest.raises(DataError):
            load_sample(bad, synthetic_scene, synthetic_manifest)


class TestAugment:
    @pytest.fixture()
    def sample(self, synthetic_scene, synthetic_manifest):
        return load_sample(synthetic_manifest.records[3], synthetic_scene)

    def test_identity_op(self, sample):
        out = augment(sample, AugmentOp())
        for a, b in zip(out.arrays().values(), sample.arrays().values()):
            np.testing.assert_array_equal(a, b)

    def test_quarter_rotation_has_order_four(self, sample):
        out = sample
        op = AugmentOp(rot_quarter=1)
        for _ in range(4):
            out = augment(out, op)
        for a, b in zip(out.arrays().values(), sample.arrays().values()):
            np.testing.assert_array_equal(a, b)

    def test_flips_are_involutions(self, sample):
        for op in (AugmentOp(hflip=True), AugmentOp(vflip=True)):
            out = augment(augment(sample, op), op)
            for a, b in zip(out.arrays().values(), sample.arrays().values()):
                np.testing.assert_array_equal(a, b)

    def test_all_sixteen_ops_invertible(self, sample):
        assert len(ALL_AUGMENT_OPS) == 16
        assert len(set(ALL_AUGMENT_OPS)) == 16
        for op in ALL_AUGMENT_OPS:
            out = augment(augment(sample, op), op.inverse())
            for a, b in zip(out.arrays().values(), sample.arrays().values()):
                np.testing.assert_array_equal(a, b)

    def test_images_and_labels_stay_aligned(self):
        # run a coordinate-encoding raster through the same transform used for
        # both images and labels: pixel (i, j) must name the same source pixel
        h = w = 16
        coords = (np.arange(h)[:, None] * w + np.arange(w)[None, :]).astype(np.int32)
        img_like = np.stack([coords, coords + 1, coords + 2])  # (3, h, w)
        for op in ALL_AUGMENT_OPS:
            t_img = apply_geometric(img_like, op)
            t_lab = apply_geometric(coords, op)
            np.testing.assert_array_equal(t_img[0], t_lab)
            np.testing.assert_array_equal(t_img[1], t_lab + 1)


class TestSampleAugmentOp:
    def test_reproducible_sequence(self):
        a = [sample_augment_op(np.random.default_rng(7)) for _ in range(10)]
        b = [sample_augment_op(np.random.default_rng(7)) for _ in range(10)]
        # fresh generator each draw: all equal first elements; compare streams too
        rng1, rng2 = np.random.default_rng(3), np.random.default_rng(3)
        stream1 = [sample_augment_op(rng1) for _ in range(50)]
        stream2 = [sample_augment_op(rng2) for _ in range(50)]
        assert a == b and stream1 == stream2

    def test_uniform_over_sixteen_ops(self):
        rng = np.random.default_rng(123)
        n = 16_000
        counts = {}
        for _ in range(n):
            op = sample_augment_op(rng)
            counts[op] = counts.get(op, 0) + 1
        assert set(counts) == set(ALL_AUGMENT_OPS)
        mean = n / 16
        sigma = (n * (1 / 16) * (15 / 16)) ** 0.5
        for op, c in counts.items():
            assert abs(c - mean) <= 3 * sigma, f"{op}: {c} outside 3 sigma of {mean}"

    def test_disabled_always_identity(self):
        rng = np.random.default_rng(0)
        assert all(sample_augment_op(rng, enabled=False).is_identity for _ in range(20))


class TestBatchIter:
    def test_batch_count_includes_partial(self, synthetic_scene, synthetic_manifest):
        batches = list(batch_iter(synthetic_manifest, "train", synthetic_scene, batch=5))
        # 14 train tiles at batch 5: 3 batches, last holds 4
        assert [b.img_t1.shape[0] for b in batches] == [5, 5, 4]
        assert batches[0].img_t1.shape[1:] == (3, 64, 64)
        assert batches[0].y_cd.shape[1:] == (1, 64, 64)

    def test_batches_per_epoch_arithmetic(self):
        # the production split: 6096 train tiles at batch 16 -> 381 full batches
        assert len(range(0, 6096, 16)) == 381

    def test_val_order_fixed_across_epochs(self, synthetic_scene, synthetic_manifest):
        a = list(batch_iter(synthetic_manifest, "val", synthetic_scene, epoch=0))
        b = list(batch_iter(synthetic_manifest, "val", synthetic_scene, epoch=5))
        assert [r for x in a for r in x.records] == [r for x in b for r in x.records]
        np.testing.assert_array_equal(a[0].img_t1, b[0].img_t1)

    def test_train_epochs_reshuffle_deterministically(self, synthetic_scene, synthetic_manifest):
        def order(epoch):
            return [r for b in batch_iter(synthetic_manifest, "train", synthetic_scene,
                                          batch=16, seed=4, epoch=epoch) for r in b.records]

        assert order(0) == order(0)
        assert order(0) != order(1)

    def test_no_augment_matches_load_sample(self, synthetic_scene, synthetic_manifest):
        batch = next(batch_iter(synthetic_manifest, "val", synthetic_scene, augment_flag=False))
        rec = batch.records[0]
        s = load_sample(rec, synthetic_scene)
        np.testing.assert_array_equal(batch.img_t1[0], s.img_t1)
        np.testing.assert_array_equal(batch.y_cd[0, 0], s.y_cd.astype(np.float32))

    def test_augment_stream_deterministic(self, synthetic_scene, synthetic_manifest):
        def first(epoch):
            return next(batch_iter(synthetic_manifest, "train", synthetic_scene,
                                   batch=16, seed=9, augment_flag=True, epoch=epoch))

        a, b = first(2), first(2)
        np.testing.assert_array_equal(a.img_t1, b.img_t1)
        np.testing.assert_array_equal(a.y_cd, b.y_cd)

    def test_empty_split_rejected(self, synthetic_scene, overfit_manifest):
        with pytest.raises(DataError):
            next(batch_iter(overfit_manifest, "val", synthetic_scene))

    def test_unknown_split_rejected(self, synthetic_scene, synthetic_manifest):
        with pytest.raises(ConfigurationError):
            next(batch_iter(synthetic_manifest, "nope", synthetic_scene))


class TestCropPadded:
    def test_interior_crop_is_plain_slice(self, synthetic_scene):
        got = crop_padded(synthetic_scene.image_t1, 32, 16, 64)
        np.testing.assert_array_equal(got, synthetic_scene.image_t1[16:80, 32:96])

    def test_margin_zero_filled(self):
        arr = np.full((10, 10), 7, dtype=np.uint8)
        got = crop_padded(arr, 8, 8, 4)
        assert got[:2, :2].min() == 7 and got[2:, :].max() == 0 and got[:, 2:].max() == 0


class TestTileCache:
    def test_export_names_and_count(self, tmp_path, synthetic_scene):
        manifest = build_manifest(synthetic_scene, tile=128, ratios=(0.8, 0.1, 0.1), seed=0)
        n = export_tile_cache(manifest, synthetic_scene, tmp_path)
        assert n == len(manifest.records) * 5
        expected = tmp_path / f"{synthetic_scene.scene_id}_0_0_change.png"
        assert expected.exists()

    def test_cache_tile_matches_crop(self, tmp_path, synthetic_scene):
        from dtcd.data import load_raster

        manifest = build_manifest(synthetic_scene, tile=128, ratios=(0.8, 0.1, 0.1), seed=0)
        export_tile_cache(manifest, synthetic_scene, tmp_path)
        rec = manifest.records[1]
        png = load_raster(tmp_path / f"{rec.scene_id}_{rec.x0}_{rec.y0}_t1.png", channels=3)
        np.testing.assert_array_equal(png, crop_padded(synthetic_scene.image_t1, rec.x0, rec.y0, 128))


class TestRasterIO:
    def test_tiff_roundtrip(self, tmp_path, synthetic_scene):
        from dtcd.data import load_raster, write_raster

        write_raster(tmp_path / "img.tif", synthetic_scene.image_t1)
        write_raster(tmp_path / "lab.tif", synthetic_scene.change_label)
        np.testing.assert_array_equal(load_raster(tmp_path / "img.tif", channels=3),
                                      synthetic_scene.image_t1)
        np.testing.assert_array_equal(load_raster(tmp_path / "lab.tif", channels=1),
                                      synthetic_scene.change_label)

    def test_scene_set_from_files(self, tmp_path, synthetic_scene):
        from dtcd.data import write_raster

        paths = {}
        for kind, arr in synthetic_scene.rasters().items():
            paths[kind] = tmp_path / f"{kind}.png"
            write_raster(paths[kind], arr)
        scene = SceneSet.from_files(paths["t1"], paths["t2"], paths["seg_t1"],
                                    paths["seg_t2"], paths["change"])
        assert scene.checksums() == synthetic_scene.checksums()

    def test_missing_raster_rejected(self, tmp_path):
        from dtcd.data import load_raster

        with pytest.raises(DataError):
            load_raster(tmp_path / "absent.png", channels=3)


class TestSceneSetValidation:
    def test_dimension_mismatch_rejected(self):
        img = np.zeros((10, 10, 3), dtype=np.uint8)
        lab = np.zeros((10, 10), dtype=np.uint8)
        with pytest.raises(DataError):
            SceneSet(img, np.zeros((8, 10, 3), dtype=np.uint8), lab, lab, lab)

    def test_non_binary_label_rejected(self):
        img = np.zeros((10, 10, 3), dtype=np.uint8)
        lab = np.zeros((10, 10), dtype=np.uint8)
        bad = lab.copy()
        bad[0, 0] = 17
        with pytest.raises(DataError):
            SceneSet(img, img, lab, lab, bad)

    def test_synthetic_labels_consistent(self, synthetic_scene):
        sub = (synthetic_scene.seg_label_t1 > 0) ^ (synthetic_scene.seg_label_t2 > 0)
        np.testing.assert_array_equal(sub, synthetic_scene.change_label > 0)
        assert synthetic_scene.change_label.max() == 255  # the task is non-trivial
