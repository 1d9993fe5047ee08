import numpy as np
import pytest

from mixseg.errors import ConfigError, ReportError
from mixseg.experiments import (RunResult, SweepConfig, SweepData, normalize, read_results, run_cls_head_sweep,
                                run_seed, run_sweep, split_cls_pool, summarize, write_report)
from mixseg.preprocess import PatchSample
from mixseg.training import TrainConfig

SIDE = 16
TINY = dict(widths=(2, 2, 3, 4), decoder_width=3, epochs=1, train=TrainConfig(batch_size=8))


def make_data(seed=0, ns=8, nc=12, c=3):
    rng = np.random.default_rng(seed)

    def img():
        return rng.integers(0, 256, (SIDE, SIDE, 3), dtype=np.uint8)

    seg = [PatchSample(image=img(), mask=rng.integers(0, c, (SIDE, SIDE)).astype(np.uint8), wsi_id=f"s{i}")
           for i in range(ns)]
    cls = [PatchSample(image=img(), label=int(rng.integers(0, c)), wsi_id=f"c{i}") for i in range(nc)]
    test = [PatchSample(image=img(), mask=rng.integers(0, c, (SIDE, SIDE)).astype(np.uint8)) for _ in range(3)]
    return SweepData(seg, cls, test, c)


def row(mode, percent, repeat, value):
    return RunResult(mode, percent, repeat, 0, 0, 0, f1_macro=value, f1_micro=value, accuracy=value)


class TestSeeds:
    def test_stable(self):
        assert run_seed(0, "S", 1.0, 0) == run_seed(0, "S", 1, 0)

    def test_distinct(self):
        seeds = {run_seed(b, m, p, r) for b in (0, 1) for m in ("S", "S+C") for p in (1, 2.5) for r in range(3)}
        assert len(seeds) == 24


class TestSweep:
    def test_row_count_and_degenerate(self):
        cfg = SweepConfig(modes=("S", "S+C"), grid=(0, 50, 100), repeats=2, **TINY)
        rows = run_sweep(make_data(), cfg)
        assert len(rows) == 2 * 3 * 2
        degenerate = [r for r in rows if r.status == "degenerate"]
        assert [(r.mode, r.percent) for r in degenerate] == [("S", 0.0), ("S", 0.0)]
        assert all(np.isfinite(r.f1_micro) for r in rows)

    def test_bitwise_reproducible(self, tmp_path):
        cfg = SweepConfig(modes=("S", "S+C*"), grid=(25, 100), repeats=2, **TINY)
        data = make_data()
        write_report(run_sweep(data, cfg), None, tmp_path / "a")
        write_report(run_sweep(data, cfg), None, tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    def test_failure_recorded_not_fatal(self):
        data = make_data()
        data.seg_pool[0].mask[0, 0] = 7  # outside the class range
        cfg = SweepConfig(modes=("S",), grid=(0, 100), repeats=1, **TINY)
        rows = run_sweep(data, cfg)
        assert [r.status for r in rows] == ["degenerate", "failed"]
        assert "LabelError" in rows[1].error

    def test_history_files(self, tmp_path):
        cfg = SweepConfig(modes=("S+C",), grid=(50,), repeats=1, history_dir=str(tmp_path), **TINY)
        run_sweep(make_data(), cfg)
        assert (tmp_path / "S+C_50_r0.csv").exists()

    @pytest.mark.parametrize("grid", [(5, 1), (0, 101)])
    def test_grid_validation(self, grid):
        with pytest.raises(ConfigError):
            SweepConfig(grid=grid)


class TestHeadSweep:
    def test_rows_and_confusion(self):
        cfg = SweepConfig(modes=("S2+C2", "S2*+C2"), grid=(0, 50), repeats=1, **TINY)
        rows = run_cls_head_sweep(make_data(), cfg)
        assert len(rows) == 4
        for r in rows:
            assert r.status == "ok"
            assert np.asarray(r.confusion).sum() == 6
        s2 = {r.percent: r for r in rows if r.mode == "S2+C2"}
        assert s2[50.0].seg_count == 0 and s2[0.0].cls_count == 0

    def test_split_halves_disjoint(self):
        pool = list(range(11))
        train, held = split_cls_pool(pool, seed=3)
        assert len(train) == 6 and len(held) == 5
        assert set(train).isdisjoint(held) and set(train) | set(held) == set(pool)


class TestReport:
    def test_normalize_example(self):
        rows = [row("S", 50, 0, 40.0), row("S", 100, 0, 42.0)]
        normed = {r.percent: r.f1_micro for r in normalize(rows, 100)}
        assert normed[100] == 1.0 and normed[50] == pytest.approx(0.952, abs=1e-3)

    def test_baseline_is_one_on_average(self):
        rows = [row("S+C", 100, k, v) for k, v in enumerate([0.5, 0.7])]
        vals = [r.f1_micro for r in normalize(rows, 100)]
        assert np.mean(vals) == pytest.approx(1.0)

    def test_scale_invariant(self):
        rows = [row("S", p, 0, v) for p, v in ((10, 0.3), (50, 0.6), (100, 0.8))]
        scaled = [row("S", p, 0, 3 * v) for p, v in ((10, 0.3), (50, 0.6), (100, 0.8))]
        a = [r.f1_micro for r in normalize(rows, 100)]
        b = [r.f1_micro for r in normalize(scaled, 100)]
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_missing_baseline(self, tmp_path):
        with pytest.raises(ReportError):
            write_report([row("S", 50, 0, 0.5)], "s=100", tmp_path)

    def test_std_zero_for_single_repeat(self):
        stats = summarize([row("S", 10, 0, 0.4)])
        assert stats[("S", 10)]["f1_micro"] == (0.4, 0.0, 1)

    def test_population_std(self):
        stats = summarize([row("S", 10, 0, 0.2), row("S", 10, 1, 0.4)])
        assert stats[("S", 10)]["f1_micro"][1] == pytest.approx(0.1)

    def test_files_and_round_trip(self, tmp_path):
        rows = [row("S", 50, 0, 0.5), row("S", 100, 0, 0.8), row("S+C", 100, 0, 0.9)]
        rows[0].precision, rows[0].recall = [0.1, 0.2], [0.3, 0.4]
        rows[0].confusion = [[1, 2], [3, 4]]
        write_report(rows, "s=100", tmp_path)
        for name in ("results.csv", "results_normalized.csv", "summary.csv", "summary_normalized.csv",
                     "timings.csv", "raw_S.dat", "normalized_SpC.dat"):
            assert (tmp_path / name).exists(), name
        back = read_results(tmp_path / "results.csv")
        assert [(r.mode, r.percent, r.f1_micro) for r in back] == [(r.mode, r.percent, r.f1_micro) for r in rows]
        assert back[0].confusion == [[1, 2], [3, 4]] and back[0].recall == [0.3, 0.4]
        dat = (tmp_path / "raw_S.dat").read_text().splitlines()
        assert dat[0].startswith("#") and dat[1].split()[0] == "50"

    def test_failed_rows_excluded_from_summary(self):
        bad = row("S", 10, 1, float("nan"))
        bad.status = "failed"
        stats = summarize([row("S", 10, 0, 0.4), bad])
        assert stats[("S", 10)]["f1_micro"][2] == 1
