"""Synthetic slide generator and training-subset schedules.

Synthetic slides are a textured "stroma" background (class 0) with
irregular blobs of classes ``1..C-1`` painted on top. Every class shares
one colour distribution; what separates them is texture (smooth, striped,
dotted, speckled, ...), so a network has to learn spatial features.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .preprocess import WsiRecord

MODES = ("S", "S+C", "S+C*")
HEAD_MODES = ("S2+C2", "S2+C2*", "S2*+C2")

# Counts listed with the BACH / Gleason2019 / DigestPath2019 percentage
# grid {0, 1, 2.5, ..., 100}: (segmentation images, patch-level images).
DEFAULT_GRID = (0, 1, 2.5, 5, 7.5, 10, 15, 20, 25, 30, 40, 50, 75, 100)
_REFERENCE_COUNTS = {
    "bach": ((0, 6, 15, 30, 46, 61, 92, 123, 153, 184, 246, 307, 461, 615),
             (400, 396, 390, 380, 370, 360, 340, 320, 300, 280, 240, 200, 100, 0)),
    "gleason2019": ((0, 12, 31, 63, 95, 127, 191, 254, 318, 382, 509, 637, 955, 1274),
                    (1774, 1757, 1730, 1686, 1641, 1597, 1508, 1420, 1331, 1242, 1065, 887, 444, 0)),
    "digestpath2019": ((0, 16, 40, 81, 122, 163, 244, 326, 407, 489, 652, 815, 1222, 1630),
                       (1764, 1747, 1720, 1676, 1632, 1588, 1500, 1412, 1323, 1235, 1059, 882, 441, 0)),
}
REFERENCE_OVERRIDES = {
    name: {p: (s, c) for p, s, c in zip(DEFAULT_GRID, seg, cls)}
    for name, (seg, cls) in _REFERENCE_COUNTS.items()
}


@dataclass
class SynthConfig:
    num_wsis: int = 8
    image_side: int = 384
    num_classes: int = 4
    blobs_per_wsi: tuple = (5, 8)
    blob_radius: tuple = (26, 60)
    noise_amplitude: float = 14.0
    texture_contrast: float = 38.0
    color_jitter: float = 18.0
    slide_jitter: float = 5.0
    background_fraction: tuple = (0.25, 0.85)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.num_wsis < 1 or self.image_side < 16:
            raise ConfigError("need at least one image of side >= 16")
        lo, hi = self.background_fraction
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError(f"background_fraction must satisfy 0 <= lo < hi <= 1, got {self.background_fraction}")

    @classmethod
    def calibrated(cls, **overrides):
        """Many small blobs with low noise and strong textures.

        Tuned so that at 32 pixel patches a few segmentation patches do
        not cover the classes well, while the slide-level class evidence
        in classification patches is learnable: the regime where mixing in
        image-level labels pays off.
        """
        values = dict(image_side=512, blobs_per_wsi=(25, 40), blob_radius=(14, 30), noise_amplitude=4.0,
                      texture_contrast=60.0, color_jitter=8.0)
        values.update(overrides)
        return cls(**values)


# -- textures --------------------------------------------------------------


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return f / (f.std() + 1e-12)


def _texture(kind, rng, shape):
    """Zero-mean, roughly unit-range intensity pattern for texture ``kind``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 0:  # smooth stroma
        return 0.5 * _smooth_field(rng, shape, 6.0)
    if kind == 1:  # oriented stripes
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(5.0, 7.0)
        phase = rng.uniform(0, 2 * np.pi)
        return np.sin(2 * np.pi * (yy * np.cos(theta) + xx * np.sin(theta)) / period + phase)
    if kind == 2:  # dark dots on a lighter field
        dots = (rng.random(shape) < 0.035).astype(np.float64)
        dots = ndimage.gaussian_filter(dots, 1.2)
        return 1.0 - 2.0 * np.clip(dots / (dots.max() + 1e-12) * 2.5, 0, 1)
    if kind == 3:  # fine speckle
        return np.clip(rng.standard_normal(shape), -2, 2) / 2.0
    # further classes: checker patterns at class-specific scales
    scale = 2 + kind
    return np.where(((yy // scale + xx // scale) % 2) == 0, 1.0, -1.0)


def _blob_mask(rng, side, radius):
    cy, cx = rng.uniform(0, side, size=2)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    ang = np.arctan2(yy - cy, xx - cx)
    dist = np.hypot(yy - cy, xx - cx)
    r = np.full_like(ang, radius)
    for harmonic in (2, 3, 5):
        r += radius * rng.uniform(0.0, 0.18) * np.sin(harmonic * ang + rng.uniform(0, 2 * np.pi))
    return dist <= r


def _paint(mask, blob, label, bg_min):
    """Paint ``blob`` unless that would push the background share below ``bg_min``."""
    before = mask[blob].copy()
    mask[blob] = label
    if (mask == 0).mean() < bg_min:
        mask[blob] = before


def synth_wsi(config, index):
    """One synthetic slide (deterministic in ``config.seed`` and ``index``)."""
    rng = np.random.default_rng([config.seed, index])
    side = config.image_side
    c = config.num_classes
    mask = np.zeros((side, side), dtype=np.uint8)
    lo, hi = config.blobs_per_wsi
    n_blobs = int(rng.integers(lo, hi + 1))
    labels = [1 + (i + index) % (c - 1) for i in range(n_blobs)]
    rng.shuffle(labels)
    bg_lo, bg_hi = config.background_fraction
    for lab in labels:
        radius = rng.uniform(*config.blob_radius)
        _paint(mask, _blob_mask(rng, side, radius), lab, bg_lo)
    # top up with extra blobs (own stream) while too much background is left
    extra = np.random.default_rng([config.seed, index, 1])
    for k in range(4 * hi):
        if (mask == 0).mean() <= bg_hi:
            break
        _paint(mask, _blob_mask(extra, side, extra.uniform(*config.blob_radius)), 1 + (k + index) % (c - 1), bg_lo)

    base = np.array([205.0, 140.0, 185.0]) + rng.normal(0, config.slide_jitter, size=3)
    tint = np.array([-0.55, -1.0, -0.45])  # darker + more purple with positive intensity
    intensity = np.zeros((side, side))
    color_shift = np.zeros((side, side, 3))
    for cls in range(c):
        sel = mask == cls
        if not sel.any():
            continue
        tex = _texture(cls, rng, (side, side))
        intensity[sel] = tex[sel]
        # per-class colour offset drawn from the shared distribution
        color_shift[sel] = rng.normal(0, config.color_jitter, size=3)
    lum = _smooth_field(rng, (side, side), 20.0)
    img = base + color_shift + config.texture_contrast * intensity[..., None] * (-tint)
    img += 6.0 * lum[..., None]
    img += rng.normal(0, config.noise_amplitude, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return WsiRecord(image=image, mask=mask, identifier=f"wsi{index:03d}")


def synth_dataset(config):
    """``config.num_wsis`` synthetic slides with ground-truth masks."""
    return [synth_wsi(config, i) for i in range(config.num_wsis)]


def class_fractions(records, num_classes):
    """Pixel share of every class over ``records``."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        counts += np.bincount(rec.mask.ravel(), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


# -- split schedules -------------------------------------------------------


@dataclass(frozen=True)
class SplitSchedule:
    mode: str
    percent: float
    seg_count: int
    cls_count: int
    repeat: int = 0
    seed: int = 0


def percent_count(pool_size, percent, rounding="half_up"):
    """``percent`` % of ``pool_size`` as an item count.

    ``half_up`` rounds to nearest with halves up; ``floor`` truncates.
    Arithmetic is exact (``2.5`` % is handled as the fraction 5/2).
    """
    value = Fraction(str(percent)) * pool_size / 100
    if rounding == "half_up":
        return int(np.floor(value + Fraction(1, 2)))
    if rounding == "floor":
        return int(np.floor(value))
    raise ConfigError(f"unknown rounding {rounding!r}")


def split_schedule(seg_pool_size, cls_pool_size, mode, percent, repeat=0, seed=0,
                   rounding="half_up", overrides=None):
    """Number of segmentation / classification items used by one run.

    ``overrides`` maps a percentage to explicit ``(seg, cls)`` counts for the
    ``S+C`` layout; the ``S`` and ``S+C*`` modes reuse its segmentation count.
    ``rounding="paper"`` floors the segmentation share and gives the
    classification share the remainder, which reproduces the reference count
    tables exactly.
    """
    p = float(percent)
    if not 0.0 <= p <= 100.0:
        raise ConfigError(f"percent must lie in [0, 100], got {percent}")
    if seg_pool_size < 0 or cls_pool_size < 0:
        raise ConfigError("pool sizes must be non-negative")

    def share(n, q, complement_of=None):
        if rounding == "paper":
            if complement_of is not None:
                return n - percent_count(n, complement_of, "floor")
            return percent_count(n, q, "floor")
        return percent_count(n, q, rounding)

    if mode in MODES:
        if overrides is not None and p in overrides:
            seg, cls = overrides[p]
            if seg > seg_pool_size or cls > cls_pool_size:
                raise ConfigError(f"override {overrides[p]} exceeds pool sizes {(seg_pool_size, cls_pool_size)}")
        else:
            seg = share(seg_pool_size, p)
            cls = share(cls_pool_size, 100 - p, complement_of=p)
        if mode == "S":
            cls = 0
        elif mode == "S+C*":
            cls = cls_pool_size
    elif mode in HEAD_MODES:
        if p > 50:
            raise ConfigError(f"classification-head experiments need c <= 50, got {percent}")
        seg_all = share(seg_pool_size, 100 - 2 * p, complement_of=2 * p)
        cls_c = share(cls_pool_size, p)
        if mode == "S2+C2":
            seg, cls = seg_all, cls_c
        elif mode == "S2+C2*":
            seg, cls = seg_all, share(cls_pool_size, 50)
        else:
            seg, cls = seg_pool_size, cls_c
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return SplitSchedule(mode, p, int(seg), int(cls), int(repeat), int(seed))


def subset_indices(pool_size, count, seed, repeat, stream):
    """First ``count`` entries of a permutation fixed by (seed, repeat, stream).

    The permutation does not depend on mode or percentage, so every mode of a
    repeat draws the same items and smaller subsets nest in larger ones.
    """
    if count > pool_size:
        raise DataError(f"cannot draw {count} items from a pool of {pool_size}")
    perm = np.random.default_rng([int(seed), int(repeat), int(stream)]).permutation(pool_size)
    return np.sort(perm[:count])


def schedule_indices(schedule, seg_pool_size, cls_pool_size):
    """``(seg_indices, cls_indices)`` selected by ``schedule``."""
    seg = subset_indices(seg_pool_size, schedule.seg_count, schedule.seed, schedule.repeat, 0)
    cls = subset_indices(cls_pool_size, schedule.cls_count, schedule.seed, schedule.repeat, 1)
    return seg, cls
