"""Percentage sweeps over training-data mixes and their reports.

A sweep trains one model per ``(mode, percent, repeat)`` cell and scores it
on a fixed held-out split. Subsets depend only on ``(base seed, repeat)``,
so all modes of one repeat see the same segmentation items; the training
seed of a cell is a hash of the whole key.
"""

import csv
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import DEFAULT_GRID, HEAD_MODES, MODES, percent_count, schedule_indices, split_schedule
from .errors import ConfigError, MixsegError, ReportError
from .model import ModelConfig
from .training import TrainConfig, evaluate_classification, evaluate_segmentation, train, write_history

log = logging.getLogger(__name__)

HEAD_GRID = (0, 1, 2.5, 5, 7.5, 10, 15, 20, 25, 30, 40, 50)
METRICS = ("f1_macro", "f1_micro", "accuracy")


@dataclass
class SweepData:
    """Training pools and held-out splits for one dataset."""

    seg_pool: list
    cls_pool: list
    test: list
    num_classes: int
    val: list = None


@dataclass
class SweepConfig:
    modes: tuple = MODES
    grid: tuple = DEFAULT_GRID
    repeats: int = 5
    epochs: int = 100
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    widths: tuple = None          # None keeps the full encoder widths
    decoder_width: int = None
    rounding: str = "half_up"
    overrides: dict = None
    history_dir: str = None
    jobs: int = 1

    def __post_init__(self):
        self.grid = tuple(float(p) for p in self.grid)
        if list(self.grid) != sorted(self.grid) or any(not 0 <= p <= 100 for p in self.grid):
            raise ConfigError(f"grid must be sorted and within [0, 100], got {self.grid}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def model_config(self, num_classes, input_size, seed):
        base = ModelConfig(num_classes=num_classes, input_size=input_size, seed=seed)
        if self.widths is not None:
            base = replace(base, channel_widths=tuple(self.widths))
        if self.decoder_width is not None:
            base = replace(base, decoder_width=int(self.decoder_width))
        base.__post_init__()
        return base


@dataclass
class RunResult:
    mode: str
    percent: float
    repeat: int
    seed: int
    seg_count: int
    cls_count: int
    f1_macro: float = float("nan")
    f1_micro: float = float("nan")
    accuracy: float = float("nan")
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""

    @property
    def run_id(self):
        return f"{self.mode.replace('*', 'star')}_{self.percent:g}_r{self.repeat}"

    def key(self):
        return (self.mode, self.percent, self.repeat)


def run_seed(base_seed, mode, percent, repeat):
    """Stable 32-bit training seed for one sweep cell."""
    text = f"{int(base_seed)}|{mode}|{float(percent)!r}|{int(repeat)}".encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=4).digest(), "little")


def _input_size(data):
    for pool in (data.seg_pool, data.cls_pool, data.test):
        if pool:
            return int(pool[0].image.shape[0])
    raise ConfigError("dataset has no patches")


def _fill(result, scores, agg):
    result.f1_macro, result.f1_micro, result.accuracy = agg.f1_macro, agg.f1_micro, agg.accuracy
    result.precision = [s.precision for s in scores]
    result.recall = [s.recall for s in scores]


def _run_cell(task):
    """Train and score one cell; failures are returned, never raised."""
    kind, data, config, sched, cls_train, cls_eval = task
    seed = run_seed(config.base_seed, sched.mode, sched.percent, sched.repeat)
    result = RunResult(sched.mode, sched.percent, sched.repeat, seed, sched.seg_count, sched.cls_count)
    if sched.seg_count == 0 and sched.cls_count == 0:
        result.status = "degenerate"
    t0 = time.perf_counter()
    try:
        seg_idx, cls_idx = schedule_indices(sched, len(data.seg_pool), len(cls_train))
        mc = config.model_config(data.num_classes, _input_size(data), seed)
        tc = replace(config.train, epochs=config.epochs, seed=seed)
        hist_path = None
        if config.history_dir is not None:
            Path(config.history_dir).mkdir(parents=True, exist_ok=True)
        model, history = train([data.seg_pool[i] for i in seg_idx], [cls_train[i] for i in cls_idx],
                               mc, tc, val_samples=data.val)
        if config.history_dir is not None:
            hist_path = Path(config.history_dir) / f"{result.run_id}.csv"
            write_history(history, hist_path)
        if kind == "seg":
            _, scores, agg = evaluate_segmentation(model, data.test, tc.eval_batch_size)
        else:
            cm, scores, agg = evaluate_classification(model, cls_eval, tc.eval_batch_size)
            result.confusion = np.asarray(cm).tolist()
        _fill(result, scores, agg)
    except (MixsegError, ValueError, ArithmeticError, RuntimeError) as exc:
        log.warning("run %s failed: %s", result.run_id, exc)
        result.status, result.error = "failed", f"{type(exc).__name__}: {exc}"
    result.wall_time = time.perf_counter() - t0
    return result


def _execute(tasks, jobs):
    if jobs == 1 or len(tasks) <= 1:
        results = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    return sorted(results, key=lambda r: (r.mode, r.percent, r.repeat))


def sweep_schedules(data, config):
    out = []
    for mode in config.modes:
        if mode not in MODES:
            raise ConfigError(f"unknown sweep mode {mode!r}")
        for p in config.grid:
            for r in range(config.repeats):
                out.append(split_schedule(len(data.seg_pool), len(data.cls_pool), mode, p, repeat=r,
                                          seed=config.base_seed, rounding=config.rounding,
                                          overrides=config.overrides))
    return out


def run_sweep(data, config):
    """One :class:`RunResult` per scheduled ``(mode, percent, repeat)``."""
    tasks = [("seg", data, config, s, data.cls_pool, None) for s in sweep_schedules(data, config)]
    log.info("sweep: %d runs over modes %s", len(tasks), ",".join(config.modes))
    return _execute(tasks, config.jobs)


def split_cls_pool(cls_pool, seed, rounding="half_up"):
    """Seeded ``(train half, evaluation half)`` of the classification pool."""
    n = len(cls_pool)
    perm = np.random.default_rng([int(seed), 50]).permutation(n)
    k = percent_count(n, 50, rounding)
    train_idx, eval_idx = np.sort(perm[:k]), np.sort(perm[k:])
    return [cls_pool[i] for i in train_idx], [cls_pool[i] for i in eval_idx]


def run_cls_head_sweep(data, config):
    """Classification-accuracy sweep over ``c`` for the head experiments.

    ``c`` percentages are relative to the full classification pool; half of
    that pool is held out for evaluation, so ``c`` is at most 50.
    """
    cls_train, cls_eval = split_cls_pool(data.cls_pool, config.base_seed, config.rounding)
    if not cls_eval:
        raise ConfigError("classification pool too small to hold out an evaluation half")
    tasks = []
    for mode in config.modes:
        if mode not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {mode!r}")
        for c in config.grid:
            for r in range(config.repeats):
                sched = split_schedule(len(data.seg_pool), len(data.cls_pool), mode, c, repeat=r,
                                       seed=config.base_seed, rounding=config.rounding)
                sched = replace(sched, cls_count=min(sched.cls_count, len(cls_train)))
                tasks.append(("cls", data, config, sched, cls_train, cls_eval))
    log.info("head sweep: %d runs, %d train / %d eval classification patches",
             len(tasks), len(cls_train), len(cls_eval))
    return _execute(tasks, config.jobs)


# -- reports ---------------------------------------------------------------

RESULT_FIELDS = ("mode", "percent", "repeat", "seed", "seg_count", "cls_count",
                 "f1_macro", "f1_micro", "accuracy", "precision", "recall", "confusion", "status", "error")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list) and v and isinstance(v[0], list):
        return ";".join(" ".join(str(int(x)) for x in row) for row in v)
    if isinstance(v, list):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def write_results(rows, path):
    """Metric rows in a fixed column order; wall time goes to a separate file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in RESULT_FIELDS])


def read_results(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(RunResult(
                mode=rec["mode"], percent=float(rec["percent"]), repeat=int(rec["repeat"]),
                seed=int(rec["seed"]), seg_count=int(rec["seg_count"]), cls_count=int(rec["cls_count"]),
                f1_macro=float(rec["f1_macro"]), f1_micro=float(rec["f1_micro"]), accuracy=float(rec["accuracy"]),
                precision=[float(x) for x in rec["precision"].split()],
                recall=[float(x) for x in rec["recall"].split()],
                confusion=[[int(x) for x in row.split()] for row in rec["confusion"].split(";") if row],
                status=rec["status"], error=rec["error"]))
    return rows


def normalize(rows, baseline_percent, metrics=METRICS):
    """Divide each metric by the mean at ``baseline_percent`` of the same mode."""
    usable = [r for r in rows if r.status != "failed"]
    out = []
    for mode in sorted({r.mode for r in usable}):
        base = [r for r in usable if r.mode == mode and r.percent == baseline_percent]
        if not base:
            raise ReportError(f"no rows for mode {mode} at baseline {baseline_percent:g}%")
        means = {m: float(np.mean([getattr(r, m) for r in base])) for m in metrics}
        for r in usable:
            if r.mode != mode:
                continue
            vals = {}
            for m in metrics:
                if means[m] == 0:
                    raise ReportError(f"mode {mode}: baseline mean of {m} is zero")
                vals[m] = getattr(r, m) / means[m]
            out.append(replace(r, **vals))
    return sorted(out, key=lambda r: (r.mode, r.percent, r.repeat))


def summarize(rows, metrics=METRICS):
    """``{(mode, percent): {metric: (mean, std, n)}}`` using the population std."""
    groups = {}
    for r in rows:
        if r.status == "failed":
            continue
        groups.setdefault((r.mode, r.percent), []).append(r)
    out = {}
    for key in sorted(groups):
        out[key] = {}
        for m in metrics:
            vals = np.array([getattr(r, m) for r in groups[key]])
            out[key][m] = (float(vals.mean()), float(vals.std()), int(vals.size))
    return out


def _write_summary(rows, path):
    summary = summarize(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "percent", "n"] + [f"{m}_{k}" for m in METRICS for k in ("mean", "std")])
        for (mode, p), stats in summary.items():
            n = next(iter(stats.values()))[2]
            w.writerow([mode, repr(p), n] + [repr(v) for m in METRICS for v in stats[m][:2]])
    return summary


def _write_plot_data(summary, out_dir, stem):
    """One whitespace-separated file per mode: percent, then mean/std per metric."""
    modes = sorted({mode for mode, _ in summary})
    for mode in modes:
        path = Path(out_dir) / f"{stem}_{mode.replace('*', 'star').replace('+', 'p')}.dat"
        with open(path, "w") as fh:
            fh.write("# percent " + " ".join(f"{m}_mean {m}_std" for m in METRICS) + "\n")
            for (m_, p), stats in summary.items():
                if m_ != mode:
                    continue
                fh.write(f"{p:g} " + " ".join(f"{stats[m][0]:.6f} {stats[m][1]:.6f}" for m in METRICS) + "\n")


BASELINES = {"s=100": 100.0, "c=50": 50.0}


def write_report(rows, normalize_to, out_dir):
    """Raw and (optionally) normalized tables, summaries and plot data.

    ``normalize_to`` is ``"s=100"``, ``"c=50"`` or ``None``. Returns the
    paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if normalize_to is not None and normalize_to not in BASELINES:
        raise ReportError(f"normalize_to must be one of {sorted(BASELINES)} or None")
    normed = normalize(rows, BASELINES[normalize_to]) if normalize_to else None
    written = [out / "results.csv", out / "summary.csv"]
    write_results(rows, written[0])
    _write_plot_data(_write_summary(rows, written[1]), out, "raw")
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "percent", "repeat", "wall_time"])
        for r in rows:
            w.writerow([r.mode, repr(r.percent), r.repeat, f"{r.wall_time:.3f}"])
    written.append(out / "timings.csv")
    if normed is not None:
        write_results(normed, out / "results_normalized.csv")
        _write_plot_data(_write_summary(normed, out / "summary_normalized.csv"), out, "normalized")
        written += [out / "results_normalized.csv", out / "summary_normalized.csv"]
    return written
