"""Tests for condition map construction."""

import numpy as np
import pytest
import torch

from featurize import (
    ConditionMaps,
    build_condition_pyramid,
    direction_map,
    distance_map,
    featurize_mask,
    generator_level_sizes,
    load_condition_maps,
    relabel_instances,
    save_condition_maps,
    semantic_map,
    validate_instance_mask,
)


def random_mask(rng, size=16, max_id=6):
    """Blocky random label map relabeled into 4-connected instances."""
    coarse = rng.integers(0, max_id + 1, size=(size // 2, size // 2))
    coarse[rng.random(coarse.shape) < 0.4] = 0
    return relabel_instances(np.kron(coarse, np.ones((2, 2), dtype=np.int64)))


class TestValidation:
    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="negative"):
            validate_instance_mask(np.array([[0, -1]]))

    def test_rejects_float(self):
        with pytest.raises(ValueError, match="integers"):
            validate_instance_mask(np.zeros((2, 2), dtype=np.float32))

    def test_rejects_split_instance_when_asked(self):
        labels = np.array([[1, 0, 1]])
        validate_instance_mask(labels)
        with pytest.raises(ValueError, match="split"):
            validate_instance_mask(labels, check_connectivity=True)

    def test_relabel_splits_and_compacts(self):
        labels = np.array(
            [
                [7, 0, 7],
                [0, 0, 0],
                [3, 3, 0],
            ]
        )
        out = relabel_instances(labels)

        np.testing.assert_array_equal(out, [[1, 0, 2], [0, 0, 0], [3, 3, 0]])


class TestSemanticMap:
    def test_empty_mask(self):
        m = semantic_map(np.zeros((4, 4), dtype=np.int32))
        assert np.all(m[0] == 1.0)
        assert np.all(m[1] == 0.0)

    def test_single_pixel(self):
        labels = np.zeros((4, 4), dtype=np.int32)
        labels[2, 2] = 1
        m = semantic_map(labels)

        assert m[1, 2, 2] == 1.0
        assert m[1].sum() == 1.0

    def test_nucleus_channel_counts_pixels(self):
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[0, :5] = 1
        labels[3:6, 3:6] = 2
        labels[7, 4:7] = 3
        assert (labels > 0).sum() == 17

        m = semantic_map(labels)
        assert m[1].sum() == 17.0
        np.testing.assert_array_equal(m.sum(axis=0), np.ones((8, 8), dtype=np.float32))


class TestDirectionMap:
    def test_single_pixel_is_zero(self):
        labels = np.zeros((5, 5), dtype=np.int32)
        labels[2, 3] = 1
        np.testing.assert_array_equal(direction_map(labels), 0.0)

    def test_horizontal_bar(self):
        labels = np.zeros((3, 3), dtype=np.int32)
        labels[0, :] = 1
        p = direction_map(labels)

        np.testing.assert_array_equal(p[:, 0, 0], [1.0, 0.0])
        np.testing.assert_array_equal(p[:, 0, 1], [0.0, 0.0])
        np.testing.assert_array_equal(p[:, 0, 2], [-1.0, 0.0])

    def test_vectors_are_unit_or_zero(self):
        p = direction_map(random_mask(np.random.default_rng(3)))
        norms = np.hypot(p[0], p[1])
        assert np.all((np.abs(norms - 1.0) < 1e-6) | (norms == 0.0))

    def test_background_is_zero(self):
        labels = random_mask(np.random.default_rng(4))
        p = direction_map(labels)
        assert np.all(p[:, labels == 0] == 0.0)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            labels = random_mask(rng)
            p = direction_map(labels)
            rotated = direction_map(np.rot90(labels))

            expected = np.stack([np.rot90(p[1]), -np.rot90(p[0])])
            np.testing.assert_allclose(rotated, expected, atol=1e-6)

    def test_flip_equivariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            labels = random_mask(rng)
            p = direction_map(labels)
            flipped = direction_map(np.fliplr(labels))

            expected = np.stack([-np.fliplr(p[0]), np.fliplr(p[1])])
            np.testing.assert_allclose(flipped, expected, atol=1e-6)


class TestDistanceMap:
    def test_single_pixel_is_one(self):
        labels = np.zeros((5, 5), dtype=np.int32)
        labels[1, 1] = 1
        q = distance_map(labels)
        assert q[0, 1, 1] == 1.0
        assert q.sum() == 1.0

    def test_square(self):
        labels = np.zeros((9, 9), dtype=np.int32)
        labels[2:7, 2:7] = 1
        q = distance_map(labels)[0]

        assert q[4, 4] == pytest.approx(1.0)
        ring = np.zeros_like(labels, dtype=bool)
        ring[2:7, 2:7] = True
        ring[3:6, 3:6] = False
        positive = q[q > 0]
        np.testing.assert_allclose(q[ring], positive.min())
        assert positive.min() == pytest.approx(1.0 / 3.0)

    def test_image_edge_counts_as_outside(self):
        labels = np.ones((3, 3), dtype=np.int32)
        q = distance_map(labels)[0]
        assert q[1, 1] == pytest.approx(1.0)
        assert q[0, 0] == pytest.approx(0.5)

    def test_translation_equivariance(self):
        labels = np.zeros((24, 24), dtype=np.int32)
        labels[2:8, 3:6] = 1
        labels[5:9, 9:14] = 2
        shifted = np.zeros_like(labels)
        shifted[3:, 7:] = labels[:-3, :-7]

        q = distance_map(labels)[0]
        q_shifted = distance_map(shifted)[0]
        np.testing.assert_array_equal(q_shifted[3:, 7:], q[:-3, :-7])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            labels = random_mask(rng)
            q = distance_map(labels)[0]

            padded = np.pad(labels, 1)
            expected = np.zeros(labels.shape)
            for inst_id in np.unique(labels[labels > 0]):
                outside = np.argwhere(padded != inst_id) - 1
                inside = np.argwhere(labels == inst_id)
                dists = np.sqrt(((inside[:, None, :] - outside[None, :, :]) ** 2).sum(-1)).min(axis=1)
                expected[tuple(inside.T)] = dists / dists.max()
            np.testing.assert_allclose(q, expected, atol=1e-6)

    def test_rotation_and_flip_equivariance(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            labels = random_mask(rng)
            q = distance_map(labels)[0]
            np.testing.assert_allclose(distance_map(np.rot90(labels))[0], np.rot90(q), atol=1e-6)
            np.testing.assert_allclose(distance_map(np.flipud(labels))[0], np.flipud(q), atol=1e-6)

    def test_range(self):
        labels = random_mask(np.random.default_rng(9))
        q = distance_map(labels)[0]
        assert q.min() >= 0.0 and q.max() <= 1.0
        for inst_id in np.unique(labels[labels > 0]):
            assert q[labels == inst_id].max() == pytest.approx(1.0)


class TestFeaturizeMask:
    def test_deterministic(self):
        labels = random_mask(np.random.default_rng(11))
        a = featurize_mask(labels)
        b = featurize_mask(labels)
        np.testing.assert_array_equal(a.stacked(), b.stacked())

    def test_shapes_and_dtype(self):
        maps = featurize_mask(random_mask(np.random.default_rng(12)))
        assert maps.stacked().shape == (5, 16, 16)
        assert maps.stacked().dtype == np.float32
        assert maps.spatial_size == (16, 16)


class TestPyramid:
    def test_level_sizes(self):
        assert generator_level_sizes(64, 5) == [(2, 2), (4, 4), (8, 8), (16, 16), (32, 32)]
        with pytest.raises(ValueError):
            generator_level_sizes(64, 4)

    def test_identity_size(self):
        maps = featurize_mask(random_mask(np.random.default_rng(1)))
        level = build_condition_pyramid(maps, [(16, 16)]).levels[0]
        np.testing.assert_array_equal(level.semantic[0].numpy(), maps.semantic)
        np.testing.assert_array_equal(level.distance[0].numpy(), maps.distance)

    def test_all_nucleus_stays_one_hot(self):
        maps = featurize_mask(np.ones((8, 8), dtype=np.int32))
        level = build_condition_pyramid(maps, [(4, 4)]).levels[0]
        assert torch.all(level.semantic[0, 1] == 1.0)
        assert torch.all(level.semantic[0, 0] == 0.0)

    def test_area_average(self):
        q = np.array([[[1.0, 1.0], [0.0, 0.0]]], dtype=np.float32)
        maps = ConditionMaps(np.zeros((2, 2, 2), np.float32), np.zeros((2, 2, 2), np.float32), q)
        level = build_condition_pyramid(maps, [(1, 1)]).levels[0]
        assert float(level.distance[0, 0, 0, 0]) == pytest.approx(0.5)

    @pytest.mark.parametrize("size", [(0, 0), (32, 32), (6, 6)])
    def test_invalid_sizes(self, size):
        maps = featurize_mask(np.zeros((16, 16), dtype=np.int32))
        with pytest.raises(ValueError):
            build_condition_pyramid(maps, [size])


class TestContainer:
    def test_save_load(self, tmp_path):
        maps = featurize_mask(random_mask(np.random.default_rng(5)))
        path = tmp_path / "m.maps"
        save_condition_maps(path, maps)
        loaded = load_condition_maps(path)
        np.testing.assert_array_equal(loaded.stacked(), maps.stacked())

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.maps"
        path.write_bytes(b"NOTMAPS!" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not a condition map"):
            load_condition_maps(path)

    def test_rejects_truncated_payload(self, tmp_path):
        maps = featurize_mask(np.ones((4, 4), dtype=np.int32))
        path = tmp_path / "m.maps"
        save_condition_maps(path, maps)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError, match="payload"):
            load_condition_maps(path)
