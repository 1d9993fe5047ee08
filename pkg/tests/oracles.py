"""Brute-force reference implementations shared by the unit and acceptance tests."""

from collections import Counter

import numpy as np

from mixseg.preprocess import PrepConfig, Region


def brute_force_category(tile, dominance):
    counts = Counter(int(v) for v in tile.ravel())
    label, top = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    if top / tile.size >= dominance:
        return "cls", label
    if len(counts) == 2:
        return "seg", None
    return "ignored", None


def random_tiled_mask(rng, delta, tiles_r, tiles_c, num_classes=4):
    """Mask whose tiles are pure, two-class splits or three-class mixes, plus a ragged border."""
    h = delta * tiles_r + int(rng.integers(0, delta))
    w = delta * tiles_c + int(rng.integers(0, delta))
    mask = np.zeros((h, w), dtype=np.uint8)
    for i in range(tiles_r + 1):
        for j in range(tiles_c + 1):
            block = mask[i * delta:(i + 1) * delta, j * delta:(j + 1) * delta]
            kind = rng.integers(4)
            classes = rng.choice(num_classes, size=3, replace=False)
            block[:] = classes[0]
            if kind == 1:  # two classes, random split (sometimes near the threshold)
                cut = int(rng.integers(0, block.size + 1))
                block.reshape(-1)[:cut] = classes[1]
            elif kind == 2:
                flat = block.reshape(-1)
                flat[:] = rng.choice(classes, size=flat.size, p=rng.dirichlet(np.ones(3)))
            elif kind == 3:  # sparse second class near the dominance boundary
                n_minor = int(rng.integers(0, max(2, block.size // 6)))
                idx = rng.choice(block.size, size=min(n_minor, block.size), replace=False)
                block.reshape(-1)[idx] = classes[1]
    return mask


def random_region(rng, delta):
    """A random blob guaranteed not to fit in a ``delta`` box."""
    h = int(rng.integers(delta + 1, 4 * delta))
    w = int(rng.integers(2, 4 * delta))
    yy, xx = np.mgrid[0:h, 0:w]
    keep = rng.random((h, w)) < rng.uniform(0.3, 1.0)
    keep[:, 0] = True  # keeps the full height, so the bbox exceeds delta
    rows, cols = yy[keep], xx[keep]
    return Region(1, rows, cols)


def brute_force(pred, gt, c):
    """Per-class (p, r, f1, support) and (macro, support-weighted micro) from raw label lists."""
    pred, gt = list(pred), list(gt)
    rows = []
    for k in range(c):
        tp = sum(1 for a, b in zip(pred, gt) if a == k and b == k)
        fp = sum(1 for a, b in zip(pred, gt) if a == k and b != k)
        fn = sum(1 for a, b in zip(pred, gt) if a != k and b == k)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        rows.append((p, r, f1, tp + fn))
    n = len(gt)
    macro = sum(f for _, _, f, _ in rows) / c
    micro = sum(f * s / n for _, _, f, s in rows)
    return rows, macro, micro


def small_tile_config(delta):
    """PrepConfig enforces a 16 px minimum; small tiles for the oracle bypass it."""
    cfg = PrepConfig()
    object.__setattr__(cfg, "patch_side", delta)
    return cfg
