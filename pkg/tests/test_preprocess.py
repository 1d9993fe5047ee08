import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixseg.errors import ConfigError, DataError
from mixseg.preprocess import (PrepConfig, Region, WsiRecord, all_tiles, build_pools, centered_extraction,
                               centered_patch_coords, connected_components, extract_tiles, filter_patch,
                               foreground_mask, kmeans, kmeans_split, num_clusters, saturation, tile_category)
from oracles import brute_force_category, random_region, random_tiled_mask, small_tile_config


class TestForeground:
    def test_white_is_background(self):
        assert not foreground_mask(np.full((20, 30, 3), 255, dtype=np.uint8)).any()

    def test_saturated_is_foreground(self):
        img = np.zeros((20, 30, 3), dtype=np.uint8)
        img[..., 0] = 255
        assert foreground_mask(img).all()

    def test_saturation_values(self):
        rgb = np.array([[[255, 255, 255], [255, 0, 0], [0, 0, 0], [200, 100, 100]]], dtype=np.uint8)
        np.testing.assert_allclose(saturation(rgb)[0], [0.0, 1.0, 0.0, 0.5])

    def test_hole_is_filled(self):
        img = np.full((40, 40, 3), 255, dtype=np.uint8)
        img[5:35, 5:35] = (200, 60, 60)
        img[18:22, 18:22] = 255
        fg = foreground_mask(img)
        assert fg[20, 20] and not fg[0, 0]

    def test_specks_removed_by_opening(self):
        img = np.full((40, 40, 3), 255, dtype=np.uint8)
        img[10, 10] = (255, 0, 0)
        assert not foreground_mask(img).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_idempotent_on_rendered_mask(self, seed):
        from scipy import ndimage

        rng = np.random.default_rng(seed)
        field = ndimage.gaussian_filter(rng.standard_normal((64, 64)), 4)
        img = np.full((64, 64, 3), 255, dtype=np.uint8)
        img[field > 0] = (230, 90, 120)
        first = foreground_mask(img)
        rendered = np.full((64, 64, 3), 255, dtype=np.uint8)
        rendered[first] = (255, 0, 0)
        np.testing.assert_array_equal(foreground_mask(rendered), first)

    def test_empty_image(self):
        with pytest.raises(DataError):
            foreground_mask(np.zeros((0, 0, 3), dtype=np.uint8))


class TestComponents:
    def test_diagonal_pixels_are_separate(self):
        mask = np.array([[1, 0], [0, 1]])
        regions = connected_components(mask)
        assert len(regions) == 2 and all(r.area == 1 for r in regions)

    def test_classes_split(self):
        mask = np.array([[1, 1, 2], [0, 0, 2]])
        labels = sorted((r.label, r.area) for r in connected_components(mask))
        assert labels == [(1, 2), (2, 2)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_centroid_inside_bbox_and_partition(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.integers(0, 3, (12, 15))
        regions = connected_components(mask)
        assert sum(r.area for r in regions) == int((mask != 0).sum())
        for r in regions:
            r0, c0, r1, c1 = r.bbox
            cy, cx = r.centroid
            assert r0 <= cy <= r1 - 1 and c0 <= cx <= c1 - 1
            assert np.all(mask[r.rows, r.cols] == r.label)


class TestKMeans:
    def test_cluster_formula(self):
        assert num_clusters(0, 8) == 1
        assert num_clusters(64, 8) == 2
        assert num_clusters(65, 8) == 3

    def test_counts_on_1000_regions(self):
        rng = np.random.default_rng(123)
        for i in range(1000):
            delta = int(rng.integers(4, 12))
            region = random_region(rng, delta)
            centers = kmeans_split(region, delta, seed=i)
            assert len(centers) == math.ceil(1 + region.area / delta ** 2)

    def test_fitting_region_gives_centroid(self):
        region = Region(2, np.array([3, 3, 4]), np.array([5, 6, 5]))
        np.testing.assert_allclose(kmeans_split(region, 8), [region.centroid])

    def test_assignment_covers_every_point(self):
        pts = np.random.default_rng(0).uniform(0, 50, (300, 2))
        centers, labels = kmeans(pts, 5, seed=1)
        assert labels.shape == (300,) and set(labels) <= set(range(5))
        d = ((pts[:, None] - centers[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(labels, d.argmin(1))

    def test_seeded(self):
        pts = np.random.default_rng(0).uniform(0, 50, (200, 2))
        a, _ = kmeans(pts, 4, seed=3)
        b, _ = kmeans(pts, 4, seed=3)
        np.testing.assert_array_equal(a, b)


class TestCentredPatches:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_inside_bounds(self, seed):
        rng = np.random.default_rng(seed)
        delta = int(rng.integers(4, 16))
        shape = (int(rng.integers(delta, 60)), int(rng.integers(delta, 60)))
        n = int(rng.integers(1, 40))
        region = Region(1, rng.integers(0, shape[0], n), rng.integers(0, shape[1], n))
        for r, c in centered_patch_coords(region, shape, delta, seed=seed):
            assert 0 <= r <= shape[0] - delta and 0 <= c <= shape[1] - delta

    def test_top_left_from_centroid(self):
        region = Region(1, np.array([20]), np.array([30]))
        assert centered_patch_coords(region, (100, 100), 16) == [(12, 22)]

    def test_clamped_at_border(self):
        region = Region(1, np.array([1]), np.array([98]))
        assert centered_patch_coords(region, (100, 100), 16) == [(0, 84)]

    def test_image_smaller_than_patch(self):
        with pytest.raises(ConfigError):
            centered_patch_coords(Region(1, np.array([0]), np.array([0])), (8, 8), 16)

    def test_extraction_shapes(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[..., 0] = 200
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:20, 10:20] = 1
        mask[40:60, 5:60] = 2
        patches = centered_extraction(WsiRecord(img, mask, "w"), PrepConfig(patch_side=16))
        assert patches and all(p.image.shape == (16, 16, 3) and p.mask.shape == (16, 16) for p in patches)


class TestFilter:
    def test_threshold_inclusive(self):
        fg = np.zeros((16, 16), dtype=bool)
        fg.reshape(-1)[:192] = True  # exactly 75 %
        assert filter_patch((0, 0), fg, PrepConfig(patch_side=16))
        fg.reshape(-1)[191] = False
        assert not filter_patch((0, 0), fg, PrepConfig(patch_side=16))


class TestTiles:
    @pytest.mark.parametrize("fractions,expected", [
        ({0: 1.0}, ("cls", 0)),
        ({1: 0.92, 2: 0.08}, ("cls", 1)),
        ({1: 0.9, 2: 0.1}, ("cls", 1)),
        ({1: 0.6, 2: 0.4}, ("seg", None)),
        ({1: 0.5, 2: 0.3, 3: 0.2}, ("ignored", None)),
    ])
    def test_rules(self, fractions, expected):
        tile = np.concatenate([np.full(int(round(f * 100)), c) for c, f in fractions.items()]).reshape(10, 10)
        assert tile_category(tile, 0.9) == expected

    def test_matches_histogram_oracle_on_1000_masks(self):
        rng = np.random.default_rng(2024)
        for i in range(1000):
            delta = int(rng.choice([4, 5, 8]))
            mask = random_tiled_mask(rng, delta, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            img = np.zeros(mask.shape + (3,), dtype=np.uint8)
            res = extract_tiles(WsiRecord(img, mask, f"m{i}"), small_tile_config(delta))
            cls, seg, ignored = {}, set(), 0
            for r in range(0, mask.shape[0] - delta + 1, delta):
                for c in range(0, mask.shape[1] - delta + 1, delta):
                    kind, label = brute_force_category(mask[r:r + delta, c:c + delta], 0.9)
                    if kind == "cls":
                        cls[(r, c)] = label
                    elif kind == "seg":
                        seg.add((r, c))
                    else:
                        ignored += 1
            assert {p.top_left: p.label for p in res.classification} == cls
            assert {p.top_left for p in res.segmentation} == seg
            assert res.ignored == ignored
            assert res.total == (mask.shape[0] // delta) * (mask.shape[1] // delta)

    def test_all_tiles_cover_grid(self):
        mask = np.zeros((40, 33), dtype=np.uint8)
        img = np.zeros((40, 33, 3), dtype=np.uint8)
        tiles = all_tiles(WsiRecord(img, mask, "w"), 16)
        assert [t.top_left for t in tiles] == [(0, 0), (0, 16), (16, 0), (16, 16)]


class TestBuildPools:
    def records(self, n):
        rng = np.random.default_rng(0)
        recs = []
        for i in range(n):
            mask = np.zeros((32, 48), dtype=np.uint8)
            mask[:, 24:] = 1 + i % 2
            mask[:, 20:24] = 3
            recs.append(WsiRecord(rng.integers(0, 256, (32, 48, 3), dtype=np.uint8), mask, f"w{i}"))
        return recs

    def test_held_out_slides_only_in_eval(self):
        recs = self.records(5)
        pools = build_pools(recs, PrepConfig(patch_side=16), val_wsis=1, test_wsis=2)
        assert {p.wsi_id for p in pools.seg + pools.cls} == {"w0", "w1"}
        assert {p.wsi_id for p in pools.val} == {"w2"}
        assert {p.wsi_id for p in pools.test} == {"w3", "w4"}
        assert len(pools.test) == 2 * 6

    def test_needs_a_training_slide(self):
        with pytest.raises(ConfigError):
            build_pools(self.records(3), PrepConfig(patch_side=16), val_wsis=1, test_wsis=2)


class TestPrepConfig:
    @pytest.mark.parametrize("kwargs", [{"sat_threshold": 0.0}, {"sat_threshold": 1.0},
                                        {"dominance_threshold": 0.5}, {"patch_side": 8},
                                        {"fg_min_fraction": 1.5}, {"opening_radius": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PrepConfig(**kwargs)
