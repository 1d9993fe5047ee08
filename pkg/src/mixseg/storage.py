"""On-disk layout for slides and patch pools.

Slides::

    <root>/images/<id>.png     8-bit RGB
    <root>/masks/<id>.png      8-bit single channel, class labels

Pools::

    <root>/seg/<id>_<r>_<c>.png        patch
    <root>/seg/<id>_<r>_<c>_mask.png   its mask
    <root>/cls/<id>_<r>_<c>.png        patch
    <root>/labels.csv                  filename,label for the cls patches
    <root>/manifest.jsonl              one provenance record per patch

Evaluation splits (``val``, ``test``) use the ``seg`` layout in their own
sub-directory.
"""

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .preprocess import PatchSample, WsiRecord

RASTER_EXT = ".png"


def write_raster(path, array):
    Image.fromarray(np.ascontiguousarray(array)).save(path)


def read_raster(path):
    with Image.open(path) as im:
        return np.array(im)


def write_wsis(records, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_raster(root / "images" / f"{rec.identifier}{RASTER_EXT}", rec.image)
        write_raster(root / "masks" / f"{rec.identifier}{RASTER_EXT}", rec.mask.astype(np.uint8))


def read_wsis(root):
    """All slides under ``root`` in identifier order."""
    root = Path(root)
    images = sorted((root / "images").glob(f"*{RASTER_EXT}"))
    if not images:
        raise DataError(f"no images found under {root / 'images'}")
    out = []
    for img_path in images:
        mask_path = root / "masks" / img_path.name
        if not mask_path.exists():
            raise DataError(f"missing mask for {img_path.name}")
        image = read_raster(img_path)
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=-1)
        out.append(WsiRecord(image=image[..., :3], mask=read_raster(mask_path), identifier=img_path.stem))
    return out


def patch_name(sample):
    r, c = sample.top_left
    return f"{sample.wsi_id}_{r}_{c}"


def _manifest_row(sample, subdir, name):
    return {"file": f"{subdir}/{name}{RASTER_EXT}", "category": sample.category,
            "wsi_id": sample.wsi_id, "top_left": list(sample.top_left),
            "label": sample.label}


def write_pools(root, seg=(), cls=(), splits=None):
    """Write pools and optional named evaluation splits (lists of masked patches)."""
    root = Path(root)
    manifest = []
    groups = [("seg", seg)] + sorted((splits or {}).items())
    for subdir, samples in groups:
        d = root / subdir
        d.mkdir(parents=True, exist_ok=True)
        for s in samples:
            name = patch_name(s)
            write_raster(d / f"{name}{RASTER_EXT}", s.image)
            write_raster(d / f"{name}_mask{RASTER_EXT}", s.mask.astype(np.uint8))
            manifest.append(_manifest_row(s, subdir, name))
    (root / "cls").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label"])
        for s in cls:
            name = patch_name(s)
            write_raster(root / "cls" / f"{name}{RASTER_EXT}", s.image)
            w.writerow([f"{name}{RASTER_EXT}", s.label])
            manifest.append(_manifest_row(s, "cls", name))
    with open(root / "manifest.jsonl", "w") as fh:
        for row in manifest:
            fh.write(json.dumps(row) + "\n")


def _provenance(root):
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        return {}
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {r["file"]: r for r in rows}


def read_masked(root, subdir):
    """Patches with masks from ``<root>/<subdir>``, filename order."""
    d = Path(root) / subdir
    if not d.is_dir():
        return []
    prov = _provenance(root)
    out = []
    for p in sorted(d.glob(f"*{RASTER_EXT}")):
        if p.stem.endswith("_mask"):
            continue
        mask_path = d / f"{p.stem}_mask{RASTER_EXT}"
        if not mask_path.exists():
            raise DataError(f"missing mask twin for {p}")
        meta = prov.get(f"{subdir}/{p.name}", {})
        out.append(PatchSample(image=read_raster(p), mask=read_raster(mask_path),
                               wsi_id=meta.get("wsi_id", ""), top_left=tuple(meta.get("top_left", (0, 0))),
                               category=meta.get("category", subdir)))
    return out


def read_labelled(root):
    """Classification patches listed in ``labels.csv``, in file order."""
    root = Path(root)
    path = root / "labels.csv"
    if not path.exists():
        return []
    prov = _provenance(root)
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            meta = prov.get(f"cls/{row['filename']}", {})
            out.append(PatchSample(image=read_raster(root / "cls" / row["filename"]), label=int(row["label"]),
                                   wsi_id=meta.get("wsi_id", ""), top_left=tuple(meta.get("top_left", (0, 0))),
                                   category="cls"))
    return out


def read_pools(root):
    """``(seg, cls, splits)`` where ``splits`` maps ``val``/``test`` to masked patches."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"pool directory {root} does not exist")
    splits = {name: read_masked(root, name) for name in ("val", "test") if (root / name).is_dir()}
    return read_masked(root, "seg"), read_labelled(root), splits
