"""Command-line entry point: ``mixseg <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(keys are flag names without the leading dashes); explicit flags win over
the file. ``--seed`` falls back to the ``MIXSEG_SEED`` environment
variable, then to 0.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen, experiments, preprocess, storage
from .checkpoint import load_checkpoint
from .errors import ConfigError, MixsegError
from .metrics import summary_json
from .model import ModelConfig
from .training import TrainConfig, evaluate_classification, evaluate_segmentation, train

log = logging.getLogger("mixseg")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


# -- parsing helpers -------------------------------------------------------


def _int_pair(text):
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return tuple(parts)


def _int_list(text):
    return tuple(int(p) for p in str(text).split(",") if p.strip())


def _float_list(text):
    return tuple(float(p) for p in str(text).split(",") if p.strip())


def _str_list(text):
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _common(p):
    p.add_argument("--config", default=None, help="flat key=value file of flag defaults")
    p.add_argument("--seed", type=int, default=None, help="random seed; when unset, $MIXSEG_SEED or 0")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _prep_flags(p, with_dominance=False):
    d = preprocess.PrepConfig()
    p.add_argument("--patch", type=int, default=d.patch_side, help="patch side in pixels")
    p.add_argument("--sat-threshold", type=float, default=d.sat_threshold,
                   help="saturation threshold as a fraction of the maximum")
    p.add_argument("--fg-min", type=float, default=d.fg_min_fraction, help="minimum foreground fraction per patch")
    p.add_argument("--opening-radius", type=int, default=d.opening_radius, help="disk radius of the opening")
    p.add_argument("--magnification", default=d.magnification_tag, help="magnification tag (metadata)")
    if with_dominance:
        p.add_argument("--dominance", type=float, default=d.dominance_threshold,
                       help="single-class share that makes a tile a classification patch")


def _train_flags(p):
    d = TrainConfig()
    m = ModelConfig()
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--weights", default=d.class_weight_mode, choices=["inverse_frequency", "proportional", "uniform"],
                   help="class weight rule for the losses")
    p.add_argument("--weight-cls-loss", type=_bool, default=d.weight_cls_loss,
                   help="apply class weights to the classification loss too")
    p.add_argument("--joint-forward", type=_bool, default=d.joint_forward,
                   help="run seg and cls items of a batch through one encoder pass")
    p.add_argument("--flips", type=_bool, default=d.flips, help="random horizontal/vertical flips")
    p.add_argument("--widths", type=_int_list, default=m.channel_widths, help="stem and layer1-3 widths")
    p.add_argument("--decoder-width", type=int, default=m.decoder_width)


class _DefaultsFormatter(argparse.HelpFormatter):
    """Appends the default to every optional flag, including undocumented ones."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.option_strings and action.default is not argparse.SUPPRESS and action.dest != "help":
            text += " (default: %(default)s)"
        return text


def build_parser():
    fmt = _DefaultsFormatter
    parser = argparse.ArgumentParser(prog="mixseg", description="Segmentation from mixed supervision.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides with masks", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="default", choices=sorted(SYNTH_PRESETS),
                   help="starting values; the flags below override single fields")
    p.add_argument("--wsis", type=int, default=None, help="number of slides")
    p.add_argument("--classes", type=int, default=None, help="class count including background")
    p.add_argument("--side", type=int, default=None, help="slide side in pixels")
    p.add_argument("--blobs", type=_int_pair, default=None, help="blob count range lo,hi")
    p.add_argument("--radius", type=_int_pair, default=None, help="blob radius range lo,hi")
    p.add_argument("--noise", type=float, default=None, help="pixel noise amplitude")
    p.add_argument("--contrast", type=float, default=None, help="texture contrast")
    p.add_argument("--color-jitter", type=float, default=None, help="per-class colour jitter")
    p.add_argument("--slide-jitter", type=float, default=None, help="per-slide colour jitter")
    _common(p)

    p = sub.add_parser("prep", help="tissue masks and region-centred patches", formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _prep_flags(p)
    _common(p)

    p = sub.add_parser("tiles", help="sort slide tiles into seg/cls pools and hold out eval slides",
                       formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-wsis", type=int, default=1, help="slides held out for validation")
    p.add_argument("--test-wsis", type=int, default=2, help="slides held out for testing")
    p.add_argument("--fg-filter", type=_bool, default=False, help="drop tiles below the foreground fraction")
    _prep_flags(p, with_dominance=True)
    _common(p)

    p = sub.add_parser("train", help="train one model on a pool subset", formatter_class=fmt)
    p.add_argument("--pools", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="S+C", choices=list(datagen.MODES))
    p.add_argument("--percent", type=float, default=100.0)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--rounding", default="half_up", choices=["half_up", "floor", "paper"])
    p.add_argument("--classes", type=int, default=None, help="class count; None infers it from the pools")
    _train_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out split", formatter_class=fmt)
    p.add_argument("--pools", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", help="val, test or cls (classification patches)")
    p.add_argument("--out", default=None, help="write the JSON summary here as well")
    p.add_argument("--batch-size", type=int, default=TrainConfig().eval_batch_size)
    _common(p)

    for name, modes, grid, norm in (("sweep", datagen.MODES, datagen.DEFAULT_GRID, "s=100"),
                                    ("cls-sweep", datagen.HEAD_MODES, experiments.HEAD_GRID, "c=50")):
        p = sub.add_parser(name, help=f"percentage sweep (modes {','.join(modes)})", formatter_class=fmt)
        p.add_argument("--pools", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--modes", type=_str_list, default=modes)
        p.add_argument("--grid", type=_float_list, default=tuple(float(g) for g in grid))
        p.add_argument("--repeats", type=int, default=5)
        p.add_argument("--rounding", default="half_up", choices=["half_up", "floor", "paper"])
        p.add_argument("--normalize", default=norm, choices=["s=100", "c=50", "none"])
        p.add_argument("--classes", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        _train_flags(p)
        _common(p)

    p = sub.add_parser("report", help="rebuild report files from results.csv", formatter_class=fmt)
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", default="s=100", choices=["s=100", "c=50", "none"])
    _common(p)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        except ConfigError as exc:
            parser.error(str(exc))
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("config", "help"):
                parser.error(f"unknown key {key!r} in {args.config}")
            action = known[key]
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"bad value for {key!r} in {args.config}: {exc}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("MIXSEG_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            parser.error(f"MIXSEG_SEED must be an integer, got {env!r}")
    return args


# -- subcommands -----------------------------------------------------------


def _prep_config(args):
    return preprocess.PrepConfig(patch_side=args.patch, sat_threshold=args.sat_threshold,
                                 fg_min_fraction=args.fg_min,
                                 dominance_threshold=getattr(args, "dominance", 0.9),
                                 opening_radius=args.opening_radius, magnification_tag=args.magnification)


SYNTH_PRESETS = {"default": datagen.SynthConfig, "calibrated": datagen.SynthConfig.calibrated}
_SYNTH_FLAGS = {"wsis": "num_wsis", "classes": "num_classes", "side": "image_side", "blobs": "blobs_per_wsi",
                "radius": "blob_radius", "noise": "noise_amplitude", "contrast": "texture_contrast",
                "color_jitter": "color_jitter", "slide_jitter": "slide_jitter"}


def cmd_synth(args):
    fields = {f: getattr(args, flag) for flag, f in _SYNTH_FLAGS.items() if getattr(args, flag) is not None}
    cfg = SYNTH_PRESETS[args.preset](seed=args.seed, **fields)
    log.info("synth config: %s", asdict(cfg))
    records = datagen.synth_dataset(cfg)
    storage.write_wsis(records, args.out)
    log.info("wrote %d slides to %s", len(records), args.out)


def cmd_prep(args):
    cfg = _prep_config(args)
    log.info("prep config: %s", asdict(cfg))
    out = Path(args.out)
    (out / "fg").mkdir(parents=True, exist_ok=True)
    seg = []
    for rec in storage.read_wsis(args.inp):
        fg = preprocess.foreground_mask(rec.image, cfg)
        storage.write_raster(out / "fg" / f"{rec.identifier}.png", (fg * 255).astype(np.uint8))
        patches = preprocess.centered_extraction(rec, cfg, seed=args.seed)
        log.info("%s: foreground %.1f%%, %d centred patches", rec.identifier, 100 * fg.mean(), len(patches))
        seg += patches
    storage.write_pools(out, seg=seg)


def cmd_tiles(args):
    cfg = _prep_config(args)
    log.info("tiles config: %s val_wsis=%d test_wsis=%d fg_filter=%s",
             asdict(cfg), args.val_wsis, args.test_wsis, args.fg_filter)
    pools = preprocess.build_pools(storage.read_wsis(args.inp), cfg, args.val_wsis, args.test_wsis, args.fg_filter)
    storage.write_pools(args.out, seg=pools.seg, cls=pools.cls, splits={"val": pools.val, "test": pools.test})
    log.info("pools: %d seg, %d cls, %d ignored; val %d, test %d tiles",
             len(pools.seg), len(pools.cls), pools.ignored, len(pools.val), len(pools.test))


def _infer_classes(seg, cls, splits):
    top = 0
    for s in seg + [t for v in splits.values() for t in v]:
        top = max(top, int(s.mask.max()))
    for s in cls:
        top = max(top, int(s.label))
    return max(top + 1, 2)


def _train_config(args):
    return TrainConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed, class_weight_mode=args.weights,
                       weight_cls_loss=args.weight_cls_loss, flips=args.flips, joint_forward=args.joint_forward)


def cmd_train(args):
    seg, cls, splits = storage.read_pools(args.pools)
    c = args.classes or _infer_classes(seg, cls, splits)
    sched = datagen.split_schedule(len(seg), len(cls), args.mode, args.percent, repeat=args.repeat,
                                   seed=args.seed, rounding=args.rounding)
    si, ci = datagen.schedule_indices(sched, len(seg), len(cls))
    size = (seg or cls)[0].image.shape[0]
    mc = ModelConfig(num_classes=c, input_size=size, channel_widths=args.widths,
                     decoder_width=args.decoder_width, seed=args.seed)
    tc = _train_config(args)
    log.info("train: schedule=%s model=%s train=%s", asdict(sched), asdict(mc), asdict(tc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train([seg[i] for i in si], [cls[i] for i in ci], mc, tc, val_samples=splits.get("val") or None,
          history_path=out / "history.csv", checkpoint_path=out / "model.ckpt")
    log.info("wrote %s and %s", out / "model.ckpt", out / "history.csv")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    seg, cls, splits = storage.read_pools(args.pools)
    if args.split == "cls":
        if not cls:
            raise ConfigError(f"no classification patches under {args.pools}")
        cm, scores, agg = evaluate_classification(model, cls, args.batch_size)
    else:
        samples = splits.get(args.split)
        if not samples:
            raise ConfigError(f"no {args.split!r} split under {args.pools}")
        cm, scores, agg = evaluate_segmentation(model, samples, args.batch_size)
    text = summary_json(cm, scores, agg)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


def _sweep(args, head):
    seg, cls, splits = storage.read_pools(args.pools)
    c = args.classes or _infer_classes(seg, cls, splits)
    data = experiments.SweepData(seg, cls, splits.get("test", []), c, val=splits.get("val") or None)
    if not head and not data.test:
        raise ConfigError(f"no test split under {args.pools}")
    out = Path(args.out)
    cfg = experiments.SweepConfig(modes=args.modes, grid=args.grid, repeats=args.repeats, epochs=args.epochs,
                                  base_seed=args.seed, train=_train_config(args), widths=args.widths,
                                  decoder_width=args.decoder_width, rounding=args.rounding,
                                  history_dir=str(out / "history"), jobs=args.jobs)
    log.info("%s config: %s", "cls-sweep" if head else "sweep",
             {k: v for k, v in asdict(cfg).items() if k != "overrides"})
    rows = experiments.run_cls_head_sweep(data, cfg) if head else experiments.run_sweep(data, cfg)
    failed = sum(r.status == "failed" for r in rows)
    experiments.write_report(rows, None if args.normalize == "none" else args.normalize, out)
    log.info("%d runs (%d failed); report in %s", len(rows), failed, out)


def cmd_report(args):
    rows = experiments.read_results(args.results)
    paths = experiments.write_report(rows, None if args.normalize == "none" else args.normalize, args.out)
    log.info("wrote %s", ", ".join(str(p) for p in paths))


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "tiles": cmd_tiles,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": lambda a: _sweep(a, head=False),
    "cls-sweep": lambda a: _sweep(a, head=True),
    "report": cmd_report,
}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", force=True)
    log.info("effective arguments: %s", json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}))
    try:
        COMMANDS[args.command](args)
    except (MixsegError, OSError, ValueError) as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
