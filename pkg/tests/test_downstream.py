"""Tests for the segmentation augmentation experiment."""

from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import ndimage

from config import Config
from dataset import AugmentToggles
from downstream import (
    BOUNDARY,
    INTERIOR,
    ROW_CLASSIC,
    ROW_REAL,
    ROW_SYNTHETIC,
    NucleiSegmenter,
    SegConfig,
    SyntheticSpec,
    instances_from_seg,
    load_segmenter,
    masks_to_seg_targets,
    predict_instances,
    run_augmentation_experiment,
    save_segmenter,
    synthesize_training_items,
    train_segmenter,
)
from featurize import relabel_instances
from maskgen import LayoutParams, NucleusPolygonParams, derive_mask_seed, generate_instance_mask
from metrics import match_instances
from trainer import SianSynthesizer, train

from tests.conftest import disc_mask

TINY_SEG = SegConfig(depth=2, width=4, epochs=1, batch_size=2, augment=AugmentToggles.disabled())


@pytest.fixture
def synthesizer(tiny_train_config, toy_items, tmp_path):
    path = train(toy_items, replace(tiny_train_config, epochs=0), tmp_path / "gan")
    return SianSynthesizer.from_checkpoint(path)


class TestSegTargets:
    def test_empty_mask(self):
        targets = masks_to_seg_targets(np.zeros((6, 6), dtype=np.int32))
        assert not targets.any()

    def test_single_pixel_is_boundary(self):
        labels = np.zeros((5, 5), dtype=np.int32)
        labels[2, 2] = 1
        assert masks_to_seg_targets(labels)[2, 2] == BOUNDARY

    def test_square_ring_and_core(self):
        labels = np.zeros((9, 9), dtype=np.int32)
        labels[2:7, 2:7] = 1
        targets = masks_to_seg_targets(labels)

        assert (targets == BOUNDARY).sum() == 16
        assert (targets == INTERIOR).sum() == 9

    def test_touching_instances_split_by_boundary(self):
        labels = np.zeros((7, 10), dtype=np.int32)
        labels[1:6, 1:5] = 1
        labels[1:6, 5:9] = 2
        targets = masks_to_seg_targets(labels)
        assert np.all(targets[1:6, 4] == BOUNDARY)
        assert np.all(targets[1:6, 5] == BOUNDARY)

    def test_image_edge_is_boundary(self):
        labels = np.ones((4, 4), dtype=np.int32)
        targets = masks_to_seg_targets(labels)
        assert (targets == INTERIOR).sum() == 4


class TestInstancesFromSeg:
    def test_recovers_separated_discs(self):
        labels = disc_mask(32, [(8, 8), (8, 24), (24, 16)], 4)
        recovered = instances_from_seg(masks_to_seg_targets(labels))
        matching = match_instances(labels, recovered)

        assert len(matching.pairs) == 3
        assert all(iou >= 0.8 for _, _, iou in matching.pairs)
        assert not matching.unmatched_pred

    def test_all_background(self):
        assert instances_from_seg(np.zeros((8, 8), dtype=np.int64)).max() == 0

    def test_shared_ridge_goes_to_first_component(self):
        seg = np.zeros((7, 9), dtype=np.int64)
        seg[1:6, 1:8] = BOUNDARY
        seg[2:5, 2:4] = INTERIOR
        seg[2:5, 5:7] = INTERIOR
        instances = instances_from_seg(seg)

        assert instances.max() == 2
        assert np.all(instances[2:5, 4] == 1)
        assert np.all(instances[2:5, 7] == 2)
        for corner in [(1, 1), (1, 7), (5, 1), (5, 7), (1, 4), (5, 4)]:
            assert instances[corner] == 0

    def test_single_dilation(self):
        seg = np.zeros((11, 11), dtype=np.int64)
        seg[2:9, 2:9] = BOUNDARY
        seg[4:7, 4:7] = INTERIOR
        seg[1, 1] = BOUNDARY
        instances = instances_from_seg(seg)

        expected = np.zeros_like(seg)
        expected[3:8, 4:7] = 1
        expected[4:7, 3:8] = 1
        np.testing.assert_array_equal(instances, expected)

    def test_isolated_boundary_is_dropped(self):
        seg = np.zeros((6, 6), dtype=np.int64)
        seg[1:3, 1:3] = BOUNDARY
        assert instances_from_seg(seg).max() == 0

    def test_round_trip_on_generated_masks(self):
        layout = LayoutParams(
            canvas=(64, 64), nucleus_count_range=(4, 8), max_pairwise_overlap_fraction=0.0, cluster_probability=0.0
        )
        nucleus = NucleusPolygonParams(
            radius_range=(5.0, 8.0), eccentricity_range=(0.0, 0.4), radial_noise_amplitude=0.1
        )
        square = ndimage.generate_binary_structure(2, 2)
        kept = 0
        for index in range(10):
            labels = generate_instance_mask(np.random.default_rng(derive_mask_seed(7, index)), layout, nucleus).labels
            # Keep instances away from the edge and at least one background pixel from any other.
            for inst_id in np.unique(labels[labels > 0]):
                footprint = labels == inst_id
                grown = ndimage.binary_dilation(footprint, structure=square)
                touches_edge = footprint[[0, -1], :].any() or footprint[:, [0, -1]].any()
                if touches_edge or np.any(labels[grown & ~footprint] > 0):
                    labels[footprint] = 0
            labels = relabel_instances(labels)
            kept += int(labels.max())

            recovered = instances_from_seg(masks_to_seg_targets(labels))
            matching = match_instances(labels, recovered)

            assert recovered.max() == labels.max()
            assert len(matching.pairs) == labels.max()
            assert all(iou >= 0.8 for _, _, iou in matching.pairs)
        assert kept >= 10


class TestSegmenter:
    def test_output_shape(self):
        model = NucleiSegmenter(depth=2, width=4)
        assert tuple(model(torch.zeros(1, 3, 32, 32)).shape) == (1, 3, 32, 32)

    def test_rejects_odd_size(self):
        with pytest.raises(ValueError, match="multiples"):
            NucleiSegmenter(depth=3, width=4)(torch.zeros(1, 3, 30, 30))

    def test_save_and_load(self, toy_items, tmp_path):
        model = train_segmenter(toy_items, TINY_SEG)
        path = save_segmenter(tmp_path / "seg.pt", model, TINY_SEG)
        loaded = load_segmenter(path)
        np.testing.assert_array_equal(
            predict_instances(model, toy_items[0].image), predict_instances(loaded, toy_items[0].image)
        )

    def test_load_foreign_file(self, tmp_path):
        torch.save({"weights": {}}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            load_segmenter(tmp_path / "x.pt")

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train_segmenter([], TINY_SEG)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SegConfig(n_classes=2)


class TestSyntheticSpec:
    def test_round_robin(self):
        assert SyntheticSpec(count=5, organs=("colon", "lung")).allocate([]) == [
            "colon",
            "lung",
            "colon",
            "lung",
            "colon",
        ]

    def test_defaults_to_available_organs(self):
        assert SyntheticSpec(count=3).allocate(["lung", "colon"]) == ["colon", "lung", "colon"]

    def test_nothing_to_allocate(self):
        with pytest.raises(ValueError):
            SyntheticSpec(count=1).allocate([])

    def test_negative_count(self):
        with pytest.raises(ValueError):
            SyntheticSpec(count=-1)


class TestExperiment:
    def test_no_synthetic_rows_agree(self, toy_items):
        report = run_augmentation_experiment(toy_items[:2], SyntheticSpec(count=0), toy_items[2:], TINY_SEG)

        assert [r.name for r in report.rows] == [ROW_REAL, ROW_CLASSIC, ROW_SYNTHETIC]
        classic, synthetic = report.row(ROW_CLASSIC), report.row(ROW_SYNTHETIC)
        assert (classic.dq, classic.sq, classic.pq) == (synthetic.dq, synthetic.sq, synthetic.pq)
        assert all(0.0 <= r.pq <= 1.0 for r in report.rows)

    def test_missing_checkpoint(self, toy_items, tmp_path):
        spec = SyntheticSpec(count=2, checkpoint=str(tmp_path / "none.pt"))
        with pytest.raises(ValueError, match="checkpoint"):
            run_augmentation_experiment(toy_items, spec, toy_items, TINY_SEG)

    def test_with_synthetic_pairs(self, toy_items, synthesizer, mock_config, tmp_path):
        spec = replace(SyntheticSpec.from_config(Config(mock_config)), count=2)
        report = run_augmentation_experiment(
            toy_items, spec, toy_items[:2], TINY_SEG, synthesizer=synthesizer, output_dir=tmp_path / "exp"
        )

        assert report.row(ROW_REAL).train_images == 4
        assert report.row(ROW_SYNTHETIC).train_images == 6
        assert len(list((tmp_path / "exp").glob("segmenter_*.pt"))) == 3
        assert [r["name"] for r in report.csv_rows()] == [ROW_REAL, ROW_CLASSIC, ROW_SYNTHETIC]

    def test_synthesized_items(self, toy_items, synthesizer, mock_config):
        spec = replace(SyntheticSpec.from_config(Config(mock_config)), count=3)
        items = synthesize_training_items(toy_items, spec, synthesizer)

        assert [item.organ for item in items] == ["colon", "lung", "colon"]
        assert all(item.image.shape == (3, 32, 32) for item in items)
        assert all(item.inst.max() >= 1 for item in items)

    def test_unknown_organ_style(self, toy_items, synthesizer):
        spec = SyntheticSpec(count=1, organs=("kidney",))
        with pytest.raises(ValueError, match="kidney"):
            synthesize_training_items(toy_items, spec, synthesizer)
