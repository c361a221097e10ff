"""Downsampling, surface extraction, label scaling, and splits."""

import numpy as np
import pytest

from conftest import downsample_loops, surfaces_loops
from octoforce.datapipe import (LabelScaler, SplitSpec, Volume, check_split_disjoint,
                                downsample, extract_surfaces, split_indices)
from octoforce.errors import ConfigError, ShapeError


def vol(data, spacing=(0.1, 0.1, 0.05)):
    return Volume(np.asarray(data, np.float32), spacing)


class TestDownsample:
    def test_constant_preserved(self):
        v = vol(np.full((8, 8, 8), 0.42))
        out = downsample(v, (4, 4, 4))
        np.testing.assert_allclose(out.data, 0.42, rtol=1e-6)

    def test_single_block_average(self):
        data = np.ones((2, 2, 2), np.float32)
        data[0, 0, 0] = 0.0
        out = downsample(vol(data), (1, 1, 1))
        assert out.data[0, 0, 0] == pytest.approx(7 / 8)

    def test_matches_loop_oracle(self, rng):
        data = rng.random((8, 8, 8), dtype=np.float32)
        out = downsample(vol(data), (4, 4, 4))
        np.testing.assert_allclose(out.data, downsample_loops(data, (4, 4, 4)), atol=1e-7)

    def test_anisotropic_factors_and_spacing(self, rng):
        data = rng.random((16, 16, 64), dtype=np.float32)
        v = Volume(data, (10 / 16, 10 / 16, 2.66 / 64))
        out = downsample(v, (8, 8, 8))
        assert out.extents == (8, 8, 8)
        np.testing.assert_allclose(out.fov_mm, v.fov_mm, rtol=1e-9)

    def test_preserves_global_mean(self, rng):
        data = rng.random((16, 16, 32), dtype=np.float32)
        out = downsample(vol(data), (8, 8, 8))
        assert abs(float(out.data.mean()) - float(data.mean())) <= 1e-6

    def test_non_divisible_target_rejected(self, rng):
        with pytest.raises(ShapeError):
            downsample(vol(rng.random((8, 8, 8))), (3, 4, 4))


class TestExtractSurfaces:
    def test_single_bright_voxel(self):
        data = np.zeros((4, 4, 64), np.float32)
        data[1, 2, 10] = 1.0
        maps = extract_surfaces(vol(data))
        assert maps.depth[1, 2] == pytest.approx(10 / 63)
        assert maps.mip[1, 2] == 1.0

    def test_constant_volume_ties_break_shallow(self):
        maps = extract_surfaces(vol(np.full((3, 3, 16), 0.5)))
        np.testing.assert_array_equal(maps.depth, np.zeros((3, 3), np.float32))

    def test_matches_loop_oracle(self, rng):
        data = rng.random((6, 5, 12), dtype=np.float32)
        maps = extract_surfaces(vol(data))
        mip_ref, depth_ref = surfaces_loops(data)
        np.testing.assert_array_equal(maps.mip, mip_ref)
        np.testing.assert_allclose(maps.depth, depth_ref, rtol=1e-6)

    def test_mip_value_sits_at_depth_index(self, rng):
        data = rng.random((5, 5, 9), dtype=np.float32)
        v = vol(data)
        maps = extract_surfaces(v)
        idx = np.rint(maps.depth * (9 - 1)).astype(int)
        for i in range(5):
            for j in range(5):
                assert data[i, j, idx[i, j]] == maps.mip[i, j]


class TestLabelScaler:
    def test_extremes_map_to_unit_interval(self):
        labels = np.array([[-1.0, 0.0, 5.0], [1.0, 2.0, 10.0]])
        sc = LabelScaler.fit(labels)
        scaled = sc.apply(labels)
        np.testing.assert_allclose(scaled[0], [0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(scaled[1], [1, 1, 1], atol=1e-12)

    def test_round_trip_identity(self, rng):
        labels = rng.standard_normal((20, 3)) * 2.0
        sc = LabelScaler.fit(labels)
        np.testing.assert_allclose(sc.invert(sc.apply(labels)), labels, atol=1e-6)

    def test_degenerate_component_maps_to_half(self):
        labels = np.array([[1.0, 3.0, 2.0], [1.0, 4.0, 2.0]])
        sc = LabelScaler.fit(labels)
        scaled = sc.apply(labels)
        np.testing.assert_array_equal(scaled[:, 0], [0.5, 0.5])
        np.testing.assert_array_equal(scaled[:, 2], [0.5, 0.5])
        back = sc.invert(scaled)
        np.testing.assert_allclose(back, labels, atol=1e-12)

    def test_train_fit_scaler_can_exceed_unit_range_elsewhere(self):
        sc = LabelScaler.fit(np.array([[0.0], [1.0]]))
        out = sc.apply(np.array([[2.0], [-1.0]]))
        assert out.max() > 1.0 and out.min() < 0.0

    def test_dict_round_trip(self, rng):
        sc = LabelScaler.fit(rng.random((5, 3)))
        sc2 = LabelScaler.from_dict(sc.to_dict())
        np.testing.assert_array_equal(sc.mins, sc2.mins)
        np.testing.assert_array_equal(sc.maxs, sc2.maxs)


class TestSplit:
    def test_sizes_80_10_10(self):
        splits = split_indices(100, SplitSpec(seed=1, group_aware=False))
        assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) == (80, 10, 10)
        check_split_disjoint(splits, 100)

    def test_same_seed_same_split(self):
        a = split_indices(50, SplitSpec(seed=3, group_aware=False))
        b = split_indices(50, SplitSpec(seed=3, group_aware=False))
        assert a == b

    def test_group_aware_never_splits_a_roi(self):
        groups = [i // 10 for i in range(100)]  # 10 ROIs of 10 pairs
        splits = split_indices(100, SplitSpec(seed=2), groups=groups)
        check_split_disjoint(splits, 100)
        for part in splits.values():
            rois = {groups[i] for i in part}
            for r in rois:
                members = [i for i in range(100) if groups[i] == r]
                assert all(i in part for i in members)

    def test_fraction_validation(self):
        with pytest.raises(ConfigError):
            SplitSpec(fractions=(0.5, 0.2, 0.2))

    def test_disjoint_checker_catches_overlap(self):
        with pytest.raises(ConfigError):
            check_split_disjoint({"train": [0, 1], "val": [1], "test": [2]}, 3)
