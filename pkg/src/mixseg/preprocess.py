"""Tissue foreground detection, region-centred patch extraction and tiling.

Two ways of turning an annotated slide into training patches live here:

* centred extraction: one patch per labelled connected component, centred
  on its centroid; components that do not fit in a patch are first split
  with k-means on their pixel coordinates;
* tiling: a non-overlapping grid of patches, each sorted into the
  classification pool (one class covers at least ``dominance_threshold``
  of it), the segmentation pool (exactly two classes) or discarded.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError, DataError, DimensionError


@dataclass
class PrepConfig:
    patch_side: int = 128
    sat_threshold: float = 0.10
    fg_min_fraction: float = 0.75
    dominance_threshold: float = 0.90
    opening_radius: int = 2
    magnification_tag: str = "1.25x"

    def __post_init__(self):
        if not 0.0 < self.sat_threshold < 1.0:
            raise ConfigError(f"sat_threshold must lie in (0, 1), got {self.sat_threshold}")
        if not 0.5 < self.dominance_threshold <= 1.0:
            raise ConfigError(f"dominance_threshold must lie in (0.5, 1], got {self.dominance_threshold}")
        if self.patch_side < 16:
            raise ConfigError(f"patch_side must be >= 16, got {self.patch_side}")
        if not 0.0 <= self.fg_min_fraction <= 1.0:
            raise ConfigError(f"fg_min_fraction must lie in [0, 1], got {self.fg_min_fraction}")
        if self.opening_radius < 0:
            raise ConfigError(f"opening_radius must be >= 0, got {self.opening_radius}")


@dataclass
class WsiRecord:
    image: np.ndarray
    mask: np.ndarray
    identifier: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DimensionError(f"image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DimensionError(f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}")


@dataclass
class Region:
    label: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def area(self):
        return int(self.rows.size)

    @property
    def centroid(self):
        return float(self.rows.mean()), float(self.cols.mean())

    @property
    def bbox(self):
        """``(r0, c0, r1, c1)`` with exclusive upper bounds."""
        return (int(self.rows.min()), int(self.cols.min()), int(self.rows.max()) + 1, int(self.cols.max()) + 1)

    def coords(self):
        return np.stack([self.rows, self.cols], axis=1).astype(np.float64)

    def fits(self, delta):
        r0, c0, r1, c1 = self.bbox
        return r1 - r0 <= delta and c1 - c0 <= delta


@dataclass
class PatchSample:
    image: np.ndarray
    mask: np.ndarray = None
    label: int = None
    wsi_id: str = ""
    top_left: tuple = (0, 0)
    category: str = ""

    def __post_init__(self):
        if (self.mask is None) == (self.label is None):
            raise DataError("a patch carries exactly one of mask or label")
        if not self.category:
            self.category = "seg" if self.mask is not None else "cls"


@dataclass
class TileResult:
    classification: list = field(default_factory=list)
    segmentation: list = field(default_factory=list)
    ignored: int = 0

    @property
    def total(self):
        return len(self.classification) + len(self.segmentation) + self.ignored


def identity_normalizer(image):
    """Stain-normaliser slot; returns the image unchanged."""
    return image


# --------------------------------------------------------------------------
# background removal
# --------------------------------------------------------------------------


def saturation(rgb):
    """HSV saturation ``(max - min) / max`` in [0, 1]; 0 where max is 0."""
    x = np.asarray(rgb, dtype=np.float64)
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    out = np.zeros(mx.shape)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


def disk(radius):
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return (y * y + x * x) <= r * r


def foreground_mask(rgb, config=None):
    """Boolean tissue mask: saturation threshold, hole filling, opening."""
    config = config or PrepConfig()
    rgb = np.asarray(rgb)
    if rgb.size == 0:
        raise DataError("empty image")
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 RGB, got {rgb.shape}")
    fg = saturation(rgb) >= config.sat_threshold * 1.0
    fg = ndimage.binary_fill_holes(fg)
    r = config.opening_radius
    if r > 0:
        # edge padding keeps the image border from acting as background
        padded = np.pad(fg, r, mode="edge")
        padded = ndimage.binary_opening(padded, structure=disk(r))
        fg = padded[r:-r, r:-r]
    return fg


# --------------------------------------------------------------------------
# regions and centred extraction
# --------------------------------------------------------------------------

_FOUR = ndimage.generate_binary_structure(2, 1)


def connected_components(mask, background=0):
    """4-connected components of every non-background class, in class order."""
    mask = np.asarray(mask)
    regions = []
    for cls in np.unique(mask):
        if cls == background:
            continue
        lab, n = ndimage.label(mask == cls, structure=_FOUR)
        if n == 0:
            continue
        order = np.argsort(lab, axis=None, kind="stable")
        flat = lab.ravel()[order]
        starts = np.searchsorted(flat, np.arange(1, n + 1))
        ends = np.searchsorted(flat, np.arange(1, n + 1), side="right")
        w = mask.shape[1]
        for s, e in zip(starts, ends):
            idx = order[s:e]
            regions.append(Region(int(cls), idx // w, idx % w))
    return regions


def num_clusters(area, delta):
    """``ceil(1 + area / delta**2)`` in exact integer arithmetic."""
    d2 = int(delta) * int(delta)
    return 1 + -(-int(area) // d2)


def kmeans(points, k, seed=0, max_iter=100):
    """Lloyd's k-means with seeded farthest-point initialisation.

    Returns ``(centers, labels)``. A cluster that loses all its points keeps
    its previous centre.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    p = points.shape[0]
    k = int(min(k, p))
    rng = np.random.default_rng(seed)
    centers = np.empty((k, 2))
    centers[0] = points[rng.integers(p)]
    dist = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centers[j] = points[int(np.argmax(dist))]
        dist = np.minimum(dist, ((points - centers[j]) ** 2).sum(axis=1))
    labels = kernels.kmeans_assign(points, centers)
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=k)
        for dim in range(2):
            sums = np.bincount(labels, weights=points[:, dim], minlength=k)
            np.divide(sums, counts, out=centers[:, dim], where=counts > 0)
        new = kernels.kmeans_assign(points, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return centers, labels


def kmeans_split(region, delta, seed=0, max_iter=100):
    """Cluster centres for ``region``; a single centroid if it fits in a patch."""
    if region.fits(delta):
        return np.array([region.centroid])
    k = num_clusters(region.area, delta)
    centers, _ = kmeans(region.coords(), k, seed=seed, max_iter=max_iter)
    return centers


def _clamped_origin(center, extent, delta):
    start = int(np.floor(center + 0.5)) - delta // 2
    return min(max(start, 0), extent - delta)


def centered_patch_coords(region, image_shape, delta, seed=0):
    """Top-left corners of the patches centred on ``region``.

    Patches that would cross the image border are translated inward.
    """
    h, w = image_shape[:2]
    if h < delta or w < delta:
        raise ConfigError(f"image {h}x{w} is smaller than the patch side {delta}")
    centers = kmeans_split(region, delta, seed=seed)
    return [(_clamped_origin(cy, h, delta), _clamped_origin(cx, w, delta)) for cy, cx in centers]


def filter_patch(top_left, fg_mask, config=None):
    """Keep a patch iff its foreground fraction is at least ``fg_min_fraction``."""
    config = config or PrepConfig()
    r, c = top_left
    d = config.patch_side
    window = fg_mask[r : r + d, c : c + d]
    return bool(window.sum() >= config.fg_min_fraction * d * d - 1e-9)


def centered_extraction(wsi, config=None, seed=0, normalizer=identity_normalizer):
    """Segmentation patches centred on every labelled component of ``wsi``."""
    config = config or PrepConfig()
    d = config.patch_side
    fg = foreground_mask(wsi.image, config)
    seen = set()
    out = []
    for region in connected_components(wsi.mask):
        for tl in centered_patch_coords(region, wsi.image.shape, d, seed=seed):
            if tl in seen or not filter_patch(tl, fg, config):
                continue
            seen.add(tl)
            r, c = tl
            out.append(PatchSample(
                image=normalizer(wsi.image[r : r + d, c : c + d].copy()),
                mask=wsi.mask[r : r + d, c : c + d].copy(),
                wsi_id=wsi.identifier,
                top_left=tl,
                category="seg",
            ))
    return out


# --------------------------------------------------------------------------
# tiling
# --------------------------------------------------------------------------


def tile_category(tile_mask, dominance_threshold):
    """``("cls", label)``, ``("seg", None)`` or ``("ignored", None)``."""
    counts = np.bincount(np.asarray(tile_mask, dtype=np.int64).ravel())
    n = tile_mask.size
    top = int(counts.argmax())
    if counts[top] >= dominance_threshold * n - 1e-9:
        return "cls", top
    if np.count_nonzero(counts) == 2:
        return "seg", None
    return "ignored", None


def extract_tiles(wsi, config=None, fg_mask=None, normalizer=identity_normalizer):
    """Sort the non-overlapping ``patch_side`` tiles of ``wsi`` into pools.

    Partial tiles at the right/bottom border are dropped. When ``fg_mask`` is
    given, tiles failing :func:`filter_patch` are counted as ignored.
    """
    config = config or PrepConfig()
    d = config.patch_side
    h, w = wsi.mask.shape
    result = TileResult()
    for r in range(0, h - d + 1, d):
        for c in range(0, w - d + 1, d):
            if fg_mask is not None and not filter_patch((r, c), fg_mask, config):
                result.ignored += 1
                continue
            tm = wsi.mask[r : r + d, c : c + d]
            kind, label = tile_category(tm, config.dominance_threshold)
            if kind == "ignored":
                result.ignored += 1
                continue
            img = normalizer(wsi.image[r : r + d, c : c + d].copy())
            if kind == "cls":
                result.classification.append(
                    PatchSample(image=img, label=label, wsi_id=wsi.identifier, top_left=(r, c), category="cls"))
            else:
                result.segmentation.append(
                    PatchSample(image=img, mask=tm.copy(), wsi_id=wsi.identifier, top_left=(r, c), category="seg"))
    return result


def all_tiles(wsi, delta):
    """Every full tile with its mask, for pixel-level evaluation."""
    h, w = wsi.mask.shape
    out = []
    for r in range(0, h - delta + 1, delta):
        for c in range(0, w - delta + 1, delta):
            out.append(PatchSample(image=wsi.image[r : r + delta, c : c + delta].copy(),
                                   mask=wsi.mask[r : r + delta, c : c + delta].copy(),
                                   wsi_id=wsi.identifier, top_left=(r, c), category="eval"))
    return out


@dataclass
class PoolSplit:
    """Training pools from the first slides plus all tiles of held-out slides."""

    seg: list
    cls: list
    val: list
    test: list
    ignored: int = 0


def build_pools(records, config=None, val_wsis=1, test_wsis=2, fg_filter=False):
    """Tile the leading slides into seg/cls pools; keep the last ones for evaluation.

    The last ``test_wsis`` slides form the test split and the ``val_wsis``
    before them the validation split, so no slide contributes to both
    training and evaluation.
    """
    config = config or PrepConfig()
    n_train = len(records) - val_wsis - test_wsis
    if n_train < 1 or val_wsis < 0 or test_wsis < 0:
        raise ConfigError(f"{len(records)} slides cannot be split {n_train}/{val_wsis}/{test_wsis}")
    out = PoolSplit([], [], [], [])
    for rec in records[:n_train]:
        fg = foreground_mask(rec.image, config) if fg_filter else None
        res = extract_tiles(rec, config, fg_mask=fg)
        out.seg += res.segmentation
        out.cls += res.classification
        out.ignored += res.ignored
    out.val = [t for r in records[n_train : n_train + val_wsis] for t in all_tiles(r, config.patch_side)]
    out.test = [t for r in records[n_train + val_wsis :] for t in all_tiles(r, config.patch_side)]
    return out
