"""Procedural 32x32 "shapes" dataset in the usual benchmark folder layout.

Three categories (``disc``, ``stripes``, ``checker``), each with normal
training images, normal and defective test images, pixel masks and a
registered organized point grid (``xyz/*.npy``, shape ``3 x H x W``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

CATEGORIES = ("disc", "stripes", "checker")
DEFECTS = ("blob", "scratch", "hole")


def _coords(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _normal(category, rng, size):
    yy, xx = _coords(size)
    base = rng.uniform(-0.04, 0.04, size=3)
    grain = rng.normal(0.0, 0.025, size=(3, size, size))
    z = np.zeros((size, size))
    if category == "disc":
        bg = np.array([0.25, 0.3, 0.45]) + base
        fg = np.array([0.85, 0.75, 0.35]) + base
        cy, cx = size / 2 + rng.uniform(-3, 3, size=2)
        r = size * rng.uniform(0.26, 0.32)
        d = np.hypot(yy - cy, xx - cx)
        t = np.clip(r - d + 0.5, 0.0, 1.0)
        img = bg[:, None, None] * (1 - t) + fg[:, None, None] * t
        z = 0.3 * np.clip(1 - (d / r) ** 2, 0, None)
    elif category == "stripes":
        c0 = np.array([0.2, 0.55, 0.3]) + base
        c1 = np.array([0.75, 0.85, 0.6]) + base
        period = rng.uniform(7.0, 9.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        z = 0.05 * np.sin(2 * np.pi * xx / period + phase)
    elif category == "checker":
        c0 = np.array([0.15, 0.15, 0.2]) + base
        c1 = np.array([0.7, 0.4, 0.35]) + base
        cell = rng.integers(4, 6)
        oy, ox = rng.integers(0, 8, size=2)
        t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        z = 0.02 * (yy - size / 2) / size
    else:
        raise ValueError(f"unknown category {category!r}")
    img = np.clip(img + grain, 0.0, 1.0)
    xyz = np.stack([xx / size, yy / size, z + rng.normal(0.0, 0.002, size=z.shape)])
    return img.astype(np.float32), xyz.astype(np.float32)


def _defect(defect, img, xyz, rng, size):
    yy, xx = _coords(size)
    img = img.copy()
    xyz = xyz.copy()
    color = rng.uniform(0, 1, size=3)
    if defect == "blob":
        cy, cx = rng.uniform(6, size - 6, size=2)
        ry, rx = rng.uniform(2.5, 5.0, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        depth = 0.08
    elif defect == "scratch":
        y0, x0 = rng.uniform(4, size - 4, size=2)
        theta = rng.uniform(0, np.pi)
        length = rng.uniform(10, 18)
        dy, dx = np.sin(theta), np.cos(theta)
        # distance to the segment
        t = np.clip((yy - y0) * dy + (xx - x0) * dx, -length / 2, length / 2)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        mask = dist <= rng.uniform(1.0, 1.8)
        depth = -0.05
    elif defect == "hole":
        h, w = rng.integers(4, 8, size=2)
        r0, c0 = rng.integers(2, size - 2 - h), rng.integers(2, size - 2 - w)
        mask = np.zeros((size, size), bool)
        mask[r0:r0 + h, c0:c0 + w] = True
        color = color * 0.15
        depth = -0.1
    else:
        raise ValueError(f"unknown defect {defect!r}")
    shade = rng.normal(0.0, 0.03, size=(3, size, size))
    img = np.where(mask[None], np.clip(color[:, None, None] + shade, 0, 1), img)
    xyz[2] = np.where(mask, xyz[2] + depth, xyz[2])
    return img.astype(np.float32), xyz.astype(np.float32), mask.astype(np.uint8)


def _save_png(path, img):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)


def make_toy_dataset(root, seed=0, n_train=40, n_test_good=8, n_test_defect=4, size=32, categories=CATEGORIES):
    """Write the toy dataset under ``root`` and return its path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cat in categories:
        for k in range(n_train):
            img, xyz = _normal(cat, rng, size)
            _write(root / cat / "train" / "good", f"{k:03d}", img, xyz)
        for k in range(n_test_good):
            img, xyz = _normal(cat, rng, size)
            _write(root / cat / "test" / "good", f"{k:03d}", img, xyz)
        for defect in DEFECTS:
            for k in range(n_test_defect):
                img, xyz = _normal(cat, rng, size)
                img, xyz, mask = _defect(defect, img, xyz, rng, size)
                name = f"{k:03d}"
                _write(root / cat / "test" / defect, name, img, xyz)
                mpath = root / cat / "ground_truth" / defect / f"{name}_mask.png"
                mpath.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(mask * 255).save(mpath)
    meta = {"name": "toy-shapes", "seed": seed, "size": size, "categories": list(categories),
            "image_label_only": False, "has_points": True}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    return root


def _write(folder, name, img, xyz):
    _save_png(folder / f"{name}.png", img)
    (folder / "xyz").mkdir(parents=True, exist_ok=True)
    np.save(folder / "xyz" / f"{name}.npy", xyz)
