"""Dataset ingestion for the ``<category>/{train,test,ground_truth}`` folder layout."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class CategoryIndex:
    train_normal: list
    test: dict  # defect type -> list of image paths ("good" holds normal test images)
    ground_truth: dict = field(default_factory=dict)  # test image path -> mask path

    def test_items(self):
        """``(path, defect, label)`` for every test image in a fixed order."""
        for defect in sorted(self.test):
            for p in self.test[defect]:
                yield p, defect, int(defect != "good")


@dataclass
class DatasetIndex:
    root: Path
    categories: dict
    image_label_only: bool = False
    has_points: bool = False

    def counts(self, category):
        c = self.categories[category]
        n_test = sum(len(v) for v in c.test.values())
        return len(self.categories), len(c.train_normal), n_test


def _images(folder):
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _check_readable(path):
    try:
        with Image.open(path) as im:
            im.verify()
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"unreadable image file: {path} ({exc})") from exc


def ingest(root) -> DatasetIndex:
    """Index and validate a dataset tree.

    An optional ``dataset.json`` at the root may set ``image_label_only``
    (test anomalies without pixel masks) and ``has_points``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root does not exist: {root}")
    meta = {}
    if (root / "dataset.json").exists():
        meta = json.loads((root / "dataset.json").read_text())
    label_only = bool(meta.get("image_label_only", False))

    categories = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (cat_dir / "train").is_dir() and not (cat_dir / "test").is_dir():
            continue
        train = _images(cat_dir / "train" / "good")
        if not train:
            raise ValidationError(f"category '{cat_dir.name}' has no normal training images in {cat_dir / 'train' / 'good'}")
        test = {}
        for d in sorted(p for p in (cat_dir / "test").iterdir() if p.is_dir()) if (cat_dir / "test").is_dir() else []:
            imgs = _images(d)
            if imgs:
                test[d.name] = imgs
        if not test:
            raise ValidationError(f"category '{cat_dir.name}' has no test images")
        gt = {}
        expected = set()
        for defect, imgs in test.items():
            if defect == "good":
                continue
            for p in imgs:
                mask = cat_dir / "ground_truth" / defect / f"{p.stem}_mask.png"
                expected.add(mask)
                if mask.exists():
                    gt[p] = mask
                elif not label_only:
                    raise ValidationError(f"missing ground-truth mask for test anomaly {p} (expected {mask})")
        for mask in sorted((cat_dir / "ground_truth").rglob("*.png")) if (cat_dir / "ground_truth").is_dir() else []:
            if mask not in expected:
                raise ValidationError(f"orphan mask without a test image: {mask}")
        for p in train + [q for v in test.values() for q in v] + list(gt.values()):
            _check_readable(p)
        categories[cat_dir.name] = CategoryIndex(train, test, gt)
    if not categories:
        raise ValidationError(f"no categories found under {root}")
    has_points = bool(meta.get("has_points", False))
    return DatasetIndex(root, categories, label_only, has_points)


def load_image(path, size=None):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_mask(path, shape):
    if path is None:
        return np.zeros(shape, np.uint8)
    with Image.open(path) as im:
        m = np.asarray(im.convert("L"))
    return (m > 127).astype(np.uint8)


def load_points(image_path):
    p = Path(image_path)
    xyz = p.parent / "xyz" / f"{p.stem}.npy"
    if not xyz.exists():
        raise ValidationError(f"missing point grid for {p} (expected {xyz})")
    return np.load(xyz).astype(np.float32)


def dataset_digest(index: DatasetIndex):
    """SHA-256 over every indexed file's relative path and bytes."""
    import hashlib

    h = hashlib.sha256()
    files = []
    for cat in sorted(index.categories):
        c = index.categories[cat]
        files += c.train_normal
        for p, _, _ in c.test_items():
            files.append(p)
            if p in c.ground_truth:
                files.append(c.ground_truth[p])
    if (index.root / "dataset.json").exists():
        files.append(index.root / "dataset.json")
    for f in files:
        h.update(str(Path(f).relative_to(index.root)).encode())
        h.update(Path(f).read_bytes())
        xyz = Path(f).parent / "xyz" / f"{Path(f).stem}.npy"
        if index.has_points and xyz.exists():
            h.update(xyz.read_bytes())
    return h.hexdigest()
