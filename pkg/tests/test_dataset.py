"""Tests for dataset ingestion, augmentation and batching."""

import logging

import numpy as np
import pytest

from dataset import (
    AugmentToggles,
    DatasetItem,
    DatasetReader,
    augment,
    collate_batch,
    ingest,
    item_rng,
    load_pairs,
    patchify,
    rotate_item,
    split_holdout,
)
from featurize import generator_level_sizes, validate_instance_mask

from tests.conftest import disc_mask, stained_image, write_dataset


class TestIngest:
    def test_toy_directory(self, toy_dataset_dir):
        items = DatasetReader(patch_size=32).ingest(toy_dataset_dir)

        assert len(items) == 4
        assert [item.organ for item in items] == ["colon", "colon", "lung", "lung"]
        assert items[0].image.shape == (3, 32, 32)
        assert items[0].image.dtype == np.float32
        assert -1.0 <= items[0].image.min() and items[0].image.max() <= 1.0

    def test_grid_patches(self, tmp_path):
        labels = disc_mask(64, [(10, 10), (40, 50)], 6)
        write_dataset(tmp_path / "big", [("big", "colon", labels, stained_image(labels, "colon"))])
        items = ingest(tmp_path / "big", patch_size=32)

        assert len(items) == 4
        assert sorted(item.patch for item in items) == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert len({item.item_id for item in items}) == 4

    def test_remainder_is_padded(self, tmp_path):
        labels = disc_mask(40, [(20, 20)], 5)
        write_dataset(tmp_path / "odd", [("odd", "lung", labels, stained_image(labels, "lung"))])
        items = ingest(tmp_path / "odd", patch_size=32)

        assert len(items) == 4
        assert all(item.inst.shape == (32, 32) for item in items)

    def test_crops_are_relabeled(self, tmp_path):
        labels = np.zeros((64, 64), dtype=np.int32)
        labels[28:36, 28:36] = 9
        labels[2:6, 2:6] = 4
        write_dataset(tmp_path / "cut", [("cut", "colon", labels, stained_image(labels, "colon"))])
        for item in ingest(tmp_path / "cut", patch_size=32):
            validate_instance_mask(item.inst, check_connectivity=True)
            ids = np.unique(item.inst[item.inst > 0])
            np.testing.assert_array_equal(ids, np.arange(1, ids.size + 1))

    def test_empty_directory(self, tmp_path, caplog):
        (tmp_path / "empty").mkdir()
        with caplog.at_level(logging.WARNING):
            assert DatasetReader(patch_size=32).ingest(tmp_path / "empty") == []
        assert "empty" in caplog.text

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            DatasetReader(patch_size=32).ingest(tmp_path / "nowhere")

    def test_missing_pair_is_itemized(self, toy_dataset_dir):
        (toy_dataset_dir / "masks" / "tile_02.png").unlink()
        reader = DatasetReader(patch_size=32)
        with pytest.raises(ValueError, match="tile_02"):
            reader.ingest(toy_dataset_dir)
        assert [sid for sid, _ in reader.errors] == ["tile_02"]

    def test_partial_load(self, toy_dataset_dir):
        (toy_dataset_dir / "images" / "tile_01.png").write_bytes(b"not a png")
        items = DatasetReader(patch_size=32, allow_partial=True).ingest(toy_dataset_dir)
        assert sorted({item.source_id for item in items}) == ["tile_00", "tile_02", "tile_03"]

    def test_without_manifest(self, tmp_path, toy_pairs):
        root = write_dataset(tmp_path / "bare", toy_pairs, manifest=False)
        items = DatasetReader(patch_size=32).ingest(root)
        assert {item.organ for item in items} == {"unknown"}

    def test_load_pairs(self, toy_dataset_dir):
        records = load_pairs(toy_dataset_dir)
        assert [r["id"] for r in records] == ["tile_00", "tile_01", "tile_02", "tile_03"]
        assert records[0]["image"].shape == (3, 32, 32)
        assert records[0]["mask"].shape == (32, 32)

    def test_patchify_small_image(self):
        image = np.zeros((3, 10, 10), dtype=np.float32)
        inst = np.zeros((10, 10), dtype=np.int32)
        patches = patchify(image, inst, 16)
        assert len(patches) == 1
        assert patches[0][1].shape == (3, 16, 16)

    def test_item_rejects_mismatch(self):
        with pytest.raises(ValueError):
            DatasetItem(np.zeros((3, 4, 4), np.float32), np.zeros((5, 5), np.int32), "x", "y")


class TestAugment:
    def test_all_off_is_identity(self, toy_items):
        item = toy_items[0]
        out = augment(item, item_rng(0, 0, 0), AugmentToggles.disabled())
        np.testing.assert_array_equal(out.image, item.image)
        np.testing.assert_array_equal(out.inst, item.inst)

    def test_half_turn_twice(self, toy_items):
        item = toy_items[2]
        twice = rotate_item(rotate_item(item, 2), 2)
        np.testing.assert_array_equal(twice.image, item.image)
        np.testing.assert_array_equal(twice.inst, item.inst)

    def test_geometry_moves_image_and_mask_together(self, toy_items):
        item = toy_items[1]
        toggles = AugmentToggles(hflip=1.0, vflip=1.0, rotate=1.0, median_blur=0.0)
        out = augment(item, item_rng(3, 1, 0), toggles)
        nuclei = out.inst > 0
        # Nuclei are drawn darker than the background in every channel.
        assert out.image[:, nuclei].mean() < out.image[:, ~nuclei].mean()

    def test_deterministic_stream(self, toy_items):
        toggles = AugmentToggles()
        a = augment(toy_items[0], item_rng(7, 2, 5), toggles)
        b = augment(toy_items[0], item_rng(7, 2, 5), toggles)
        np.testing.assert_array_equal(a.image, b.image)

    def test_blur_leaves_mask(self, toy_items):
        item = toy_items[0]
        out = augment(item, item_rng(0, 0, 0), AugmentToggles(0.0, 0.0, 0.0, 1.0))
        np.testing.assert_array_equal(out.inst, item.inst)
        assert not np.array_equal(out.image, item.image)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            AugmentToggles(hflip=1.5)


class TestBatching:
    def test_holdout_by_source(self, toy_items):
        train, held = split_holdout(toy_items, 0.5, seed=0)
        assert len(train) == 2 and len(held) == 2
        assert not {i.source_id for i in train} & {i.source_id for i in held}

    def test_no_holdout(self, toy_items):
        train, held = split_holdout(toy_items, 0.0)
        assert len(train) == 4 and held == []

    def test_collate(self, toy_items):
        batch = collate_batch(toy_items[:3], generator_level_sizes(32, 4), workers=2)

        assert tuple(batch.images.shape) == (3, 3, 32, 32)
        assert batch.pyramid.sizes() == [(2, 2), (4, 4), (8, 8), (16, 16)]
        assert tuple(batch.maps.semantic.shape) == (3, 2, 32, 32)
        assert tuple(batch.maps.distance.shape) == (3, 1, 32, 32)

    def test_collate_empty(self):
        with pytest.raises(ValueError):
            collate_batch([], [(2, 2)])
