import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixseg.datagen import (DEFAULT_GRID, HEAD_MODES, MODES, REFERENCE_OVERRIDES, SynthConfig, class_fractions,
                            percent_count, schedule_indices, split_schedule, subset_indices, synth_dataset,
                            synth_wsi)
from mixseg.errors import ConfigError, DataError

# Fig. 6 caption sequences: (seg pool, cls pool) -> counts over the default grid
CAPTION = {
    (615, 400): ([0, 6, 15, 30, 46, 61, 92, 123, 153, 184, 246, 307, 461, 615],
                 [400, 396, 390, 380, 370, 360, 340, 320, 300, 280, 240, 200, 100, 0]),
    (1274, 1774): ([0, 12, 31, 63, 95, 127, 191, 254, 318, 382, 509, 637, 955, 1274],
                   [1774, 1757, 1730, 1686, 1641, 1597, 1508, 1420, 1331, 1242, 1065, 887, 444, 0]),
    (1630, 1764): ([0, 16, 40, 81, 122, 163, 244, 326, 407, 489, 652, 815, 1222, 1630],
                   [1764, 1747, 1720, 1676, 1632, 1588, 1500, 1412, 1323, 1235, 1059, 882, 441, 0]),
}


@pytest.fixture(scope="module")
def small_config():
    return SynthConfig(num_wsis=3, image_side=96, blob_radius=(10, 20), seed=5)


class TestSynth:
    def test_deterministic(self, small_config):
        a, b = synth_dataset(small_config), synth_dataset(small_config)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()

    def test_seed_changes_output(self, small_config):
        other = SynthConfig(num_wsis=1, image_side=96, blob_radius=(10, 20), seed=6)
        assert synth_wsi(small_config, 0).image.tobytes() != synth_wsi(other, 0).image.tobytes()

    def test_labels_in_range(self, small_config):
        for rec in synth_dataset(small_config):
            assert rec.mask.dtype == np.uint8 and rec.mask.max() < small_config.num_classes
            assert rec.image.shape == (96, 96, 3)

    def test_background_fraction_within_range_over_10_seeds(self):
        lo, hi = SynthConfig().background_fraction
        for seed in range(10):
            cfg = SynthConfig(num_wsis=2, image_side=256, seed=seed)
            for rec in synth_dataset(cfg):
                assert lo <= (rec.mask == 0).mean() <= hi

    def test_every_class_occurs(self):
        frac = class_fractions(synth_dataset(SynthConfig(num_wsis=4, image_side=256)), 4)
        assert np.all(frac > 0) and frac.sum() == pytest.approx(1.0)

    def test_colour_ranges_overlap(self):
        rec = synth_wsi(SynthConfig(image_side=256), 0)
        means = [rec.image[rec.mask == c].mean(axis=0) for c in np.unique(rec.mask)]
        spread = np.ptp(np.array(means), axis=0)
        stds = np.array([rec.image[rec.mask == c].std(axis=0) for c in np.unique(rec.mask)]).mean(axis=0)
        # class colour means differ by less than a few within-class standard deviations
        assert np.all(spread < 4 * stds)

    @pytest.mark.parametrize("kwargs", [{"num_classes": 1}, {"image_side": 8}, {"background_fraction": (0.9, 0.5)}])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SynthConfig(**kwargs)


class TestPercentCount:
    @pytest.mark.parametrize("n,p,expected", [(615, 1, 6), (615, 2.5, 15), (400, 99, 396), (10, 5, 1),
                                              (10, 15, 2), (0, 50, 0), (3, 50, 2)])
    def test_half_up(self, n, p, expected):
        assert percent_count(n, p) == expected

    def test_floor(self):
        assert percent_count(10, 15, "floor") == 1

    def test_unknown_rounding(self):
        with pytest.raises(ConfigError):
            percent_count(10, 5, "banker")


class TestSchedules:
    def test_bach_override_at_one_percent(self):
        s = split_schedule(615, 400, "S+C", 1, overrides=REFERENCE_OVERRIDES["bach"])
        assert (s.seg_count, s.cls_count) == (6, 396)

    @pytest.mark.parametrize("pools", sorted(CAPTION))
    def test_paper_rounding_reproduces_caption(self, pools):
        seg_exp, cls_exp = CAPTION[pools]
        got = [split_schedule(*pools, "S+C", p, rounding="paper") for p in DEFAULT_GRID]
        assert [s.seg_count for s in got] == seg_exp
        assert [s.cls_count for s in got] == cls_exp

    def test_modes(self):
        assert (split_schedule(615, 400, "S", 10).seg_count, split_schedule(615, 400, "S", 10).cls_count) == (62, 0)
        assert split_schedule(615, 400, "S+C*", 10).cls_count == 400
        assert split_schedule(615, 400, "S+C", 100).cls_count == 0
        assert split_schedule(615, 400, "S", 0).seg_count == 0

    def test_head_modes(self):
        assert split_schedule(600, 400, "S2+C2", 50).seg_count == 0
        assert split_schedule(600, 400, "S2+C2", 10).seg_count == 480
        assert split_schedule(600, 400, "S2+C2*", 10).cls_count == 200
        s = split_schedule(600, 400, "S2*+C2", 25)
        assert (s.seg_count, s.cls_count) == (600, 100)
        with pytest.raises(ConfigError):
            split_schedule(600, 400, "S2+C2", 60)

    @pytest.mark.parametrize("bad", [-1, 100.5])
    def test_percent_bounds(self, bad):
        with pytest.raises(ConfigError):
            split_schedule(10, 10, "S", bad)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            split_schedule(10, 10, "C", 5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 3000), st.integers(0, 3000), st.sampled_from(DEFAULT_GRID))
    def test_counts_within_one_item(self, ns, nc, p):
        s = split_schedule(ns, nc, "S+C", p)
        assert 0 <= s.seg_count <= ns and 0 <= s.cls_count <= nc
        assert abs(s.seg_count - ns * p / 100) <= 0.5 + 1e-9
        assert abs(s.cls_count - nc * (100 - p) / 100) <= 0.5 + 1e-9


class TestSubsets:
    @pytest.mark.parametrize("repeat", range(3))
    def test_shared_across_modes(self, repeat):
        picks = []
        for mode in MODES:
            s = split_schedule(200, 300, mode, 10, repeat=repeat, seed=7)
            picks.append(schedule_indices(s, 200, 300)[0].tolist())
        assert picks[0] == picks[1] == picks[2]

    def test_nested(self):
        small = set(subset_indices(100, 5, seed=1, repeat=0, stream=0))
        large = set(subset_indices(100, 40, seed=1, repeat=0, stream=0))
        assert small <= large

    def test_repeats_differ(self):
        assert subset_indices(100, 10, 1, 0, 0).tolist() != subset_indices(100, 10, 1, 1, 0).tolist()

    def test_too_many(self):
        with pytest.raises(DataError):
            subset_indices(5, 6, 0, 0, 0)

    def test_head_modes_listed(self):
        assert HEAD_MODES == ("S2+C2", "S2+C2*", "S2*+C2")
