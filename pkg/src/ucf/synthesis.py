"""Synthetic anomalies for training the filter.

RGB anomalies blend procedural textures or tile-shuffled copies of the image
into Perlin-noise masks; point-grid anomalies perturb the masked points of
an organized ``3 x H x W`` point cloud. Everything outside the mask is left
bitwise unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, ShapeError, ValidationError


@dataclass
class SynthSample:
    image: np.ndarray | None
    mask: np.ndarray
    class_label: int = 0
    beta: float = 1.0
    seed: int = 0
    point_grid: np.ndarray | None = None
    mode: str = "none"

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.mask.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError("mask must be binary")
        if self.image is not None:
            if self.image.shape[1:] != self.mask.shape:
                raise ShapeError(f"image {self.image.shape} and mask {self.mask.shape} are not registered")
            if self.image.min() < 0 or self.image.max() > 1:
                raise ValidationError("image values must lie in [0, 1]")
        if self.point_grid is not None and self.point_grid.shape[1:] != self.mask.shape:
            raise ShapeError(f"point grid {self.point_grid.shape} and mask {self.mask.shape} are not registered")
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError(f"beta must lie in [0, 1], got {self.beta}")


# --------------------------------------------------------------------------
# Perlin noise


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin_octave(shape, res, rng):
    h, w = shape
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(res + 1, res + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    y = (np.arange(h) + 0.5) * res / h
    x = (np.arange(w) + 0.5) * res / w
    yy, xx = np.meshgrid(y, x, indexing="ij")
    y0 = np.minimum(np.floor(yy).astype(int), res - 1)
    x0 = np.minimum(np.floor(xx).astype(int), res - 1)
    fy, fx = yy - y0, xx - x0

    def corner(dy, dx):
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u, v = _fade(fy), _fade(fx)
    top = corner(0, 0) * (1 - v) + corner(0, 1) * v
    bottom = corner(1, 0) * (1 - v) + corner(1, 1) * v
    return top * (1 - u) + bottom * u


def perlin_noise(shape, scale, seed, octaves=1, persistence=0.5):
    """Classic 2D gradient noise with ``scale`` lattice cells per side."""
    h, w = shape
    if h < 1 or w < 1:
        raise ValidationError(f"degenerate noise shape {shape}")
    if scale < 1:
        raise ValidationError(f"scale must be >= 1, got {scale}")
    rng = np.random.default_rng(seed)
    total = np.zeros((h, w))
    amp, res = 1.0, int(scale)
    for _ in range(octaves):
        total += amp * _perlin_octave((h, w), res, rng)
        amp *= persistence
        res *= 2
    return total


def perlin_mask(shape, scale, threshold, seed, octaves=1):
    """Binary mask of where Perlin noise exceeds ``threshold``."""
    return (perlin_noise(shape, scale, seed, octaves) > threshold).astype(np.uint8)


# --------------------------------------------------------------------------
# RGB anomalies


def procedural_texture(kind, shape, seed):
    """A ``3 x H x W`` texture in ``[0, 1]``: ``noise``, ``stripes`` or ``checker``."""
    h, w = shape
    rng = np.random.default_rng(seed)
    c0, c1 = rng.uniform(0, 1, size=(2, 3, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    if kind == "noise":
        t = perlin_noise(shape, int(rng.integers(2, 9)), rng.integers(2**31), octaves=3)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    elif kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3, 10)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    elif kind == "checker":
        cell = int(rng.integers(2, 7))
        t = ((yy // cell + xx // cell) % 2).astype(float)
    else:
        raise ValidationError(f"unknown texture kind {kind!r}")
    return (c0 * (1 - t) + c1 * t).astype(np.float32)


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")


def texture_anomaly(image, mask, texture, beta, class_label=0, seed=0) -> SynthSample:
    """Blend ``texture`` into the masked region: ``beta * image + (1 - beta) * texture``."""
    _check_beta(beta)
    image = np.asarray(image, dtype=np.float32)
    texture = np.asarray(texture, dtype=np.float32)
    if texture.shape != image.shape:
        raise ShapeError(f"texture {texture.shape} and image {image.shape} differ in shape")
    mask = np.asarray(mask).astype(bool)
    blended = np.float32(beta) * image + np.float32(1.0 - beta) * texture
    out = np.where(mask[None], np.clip(blended, 0.0, 1.0), image)
    return SynthSample(out, mask, class_label, float(beta), seed, mode="texture")


def tile_permutation(grid_n, seed):
    return np.random.default_rng(seed).permutation(grid_n * grid_n)


def structural_anomaly(image, mask, grid_n, seed, beta=0.0, perm=None, blend=True, class_label=0):
    """Shuffle ``grid_n x grid_n`` tiles of the image and paste them into the mask.

    With ``blend`` the masked region becomes ``beta * image + (1 - beta) *
    shuffled``; otherwise it is replaced by the shuffled image.
    """
    _check_beta(beta)
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    if grid_n < 1 or h % grid_n or w % grid_n:
        raise ShapeError(f"image {h}x{w} is not divisible into a {grid_n}x{grid_n} grid")
    perm = tile_permutation(grid_n, seed) if perm is None else np.asarray(perm)
    th, tw = h // grid_n, w // grid_n
    tiles = image.reshape(c, grid_n, th, grid_n, tw).transpose(1, 3, 0, 2, 4).reshape(grid_n * grid_n, c, th, tw)
    shuffled = tiles[perm].reshape(grid_n, grid_n, c, th, tw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
    mask = np.asarray(mask).astype(bool)
    if blend:
        shuffled = np.clip(np.float32(beta) * image + np.float32(1.0 - beta) * shuffled, 0.0, 1.0)
    out = np.where(mask[None], shuffled, image)
    return SynthSample(out, mask, class_label, float(beta) if blend else 0.0, seed, mode="structural")


# --------------------------------------------------------------------------
# point-grid anomalies

POINT_MODES = ("gaussian", "shuffle", "interp_fill")


def _line_fill(values, known):
    """Linear interpolation along the last axis between known samples; NaN where no bracket."""
    out = np.full(values.shape, np.nan)
    idx = np.arange(values.shape[-1])
    for r in range(values.shape[0]):
        k = known[r]
        if k.sum() < 2:
            continue
        kx = idx[k]
        inside = (idx > kx[0]) & (idx < kx[-1])
        out[r, inside] = np.interp(idx[inside], kx, values[r, k])
    return out


def _interp_fill(channel, mask):
    """Fill masked cells from the surrounding ring by row and column linear interpolation."""
    known = ~mask
    rows = _line_fill(channel, known)
    cols = _line_fill(channel.T, known.T).T
    both = np.stack([rows, cols])
    count = (~np.isnan(both)).sum(axis=0)
    total = np.where(np.isnan(both), 0.0, both).sum(axis=0)
    filled = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    holes = np.isnan(filled) & mask
    if holes.any():
        filled[holes] = channel[known].mean() if known.any() else 0.0
    return np.where(mask, filled, channel)


def perturb_points(point_grid, mask, mode, params=None, seed=0, image=None, class_label=0) -> SynthSample:
    """Perturb the masked points of an organized point grid.

    Modes: ``gaussian`` (add N(0, sigma) noise), ``shuffle`` (permute masked
    points inside ``window x window`` blocks), ``interp_fill`` (replace masked
    points by interpolation from the unmasked neighbourhood).
    """
    params = params or {}
    grid = np.asarray(point_grid, dtype=np.float32)
    mask = np.asarray(mask).astype(bool)
    if grid.ndim != 3 or grid.shape[1:] != mask.shape:
        raise ShapeError(f"point grid {grid.shape} is not registered to mask {mask.shape}")
    if mode not in POINT_MODES:
        raise ValidationError(f"unknown point perturbation mode {mode!r}; expected one of {POINT_MODES}")
    rng = np.random.default_rng(seed)
    out = grid.copy()
    if mode == "gaussian":
        sigma = float(params.get("sigma", 0.02))
        noise = rng.normal(0.0, 1.0, size=grid.shape).astype(np.float32) * np.float32(sigma)
        out = np.where(mask[None], grid + noise, grid)
    elif mode == "shuffle":
        win = int(params.get("window", 4))
        h, w = mask.shape
        for r0 in range(0, h, win):
            for c0 in range(0, w, win):
                rr, cc = np.nonzero(mask[r0:r0 + win, c0:c0 + win])
                if len(rr) < 2:
                    continue
                p = rng.permutation(len(rr))
                out[:, r0 + rr, c0 + cc] = grid[:, r0 + rr[p], c0 + cc[p]]
    else:
        for k in range(grid.shape[0]):
            out[k] = _interp_fill(grid[k].astype(np.float64), mask).astype(np.float32)
        out = np.where(mask[None], out, grid)
    return SynthSample(image, mask, class_label, 1.0, seed, point_grid=out, mode=mode)


# --------------------------------------------------------------------------
# prompts


@dataclass
class PromptTemplateBank:
    normal: list
    abnormal: list
    class_specific: bool = True
    placeholder: str = "[cls]"

    def __post_init__(self):
        if not self.normal or not self.abnormal:
            raise ValidationError("prompt bank needs non-empty normal and abnormal template lists")


_STATES_NORMAL = ["{}", "flawless {}", "perfect {}", "unblemished {}", "{} without flaw", "{} without defect", "{} without damage"]
_STATES_ABNORMAL = ["damaged {}", "broken {}", "{} with flaw", "{} with defect", "{} with damage"]


def _prompt_forms(state):
    return [f"a bad photo of a {state}", f"a low resolution photo of the {state}", f"a cropped photo of the {state}"]


def default_prompt_bank() -> PromptTemplateBank:
    """Class-specific bank: three photo phrasings for each normal / abnormal state."""
    normal = [p for s in _STATES_NORMAL for p in _prompt_forms(s.format("[cls]"))]
    abnormal = [p for s in _STATES_ABNORMAL for p in _prompt_forms(s.format("[cls]"))]
    return PromptTemplateBank(normal, abnormal)


def object_agnostic_bank() -> PromptTemplateBank:
    return PromptTemplateBank(["a photo of a [object]"], ["a photo of a damaged [object]"], class_specific=False)


def render_prompts(bank: PromptTemplateBank, class_name: str):
    """Substitute ``class_name`` into every template; class-agnostic banks pass through."""
    if not bank.normal or not bank.abnormal:
        raise ValidationError("prompt bank is empty")
    if not bank.class_specific:
        return list(bank.normal), list(bank.abnormal)
    if not class_name:
        raise ValidationError("class-specific prompt bank needs a class name")
    rendered = []
    for group in (bank.normal, bank.abnormal):
        out = []
        for t in group:
            if bank.placeholder not in t:
                raise ValidationError(f"template {t!r} lacks the {bank.placeholder} placeholder")
            out.append(t.replace(bank.placeholder, class_name))
        rendered.append(out)
    return rendered[0], rendered[1]


# --------------------------------------------------------------------------
# training-sample generator


@dataclass(frozen=True)
class SynthConfig:
    p_anomalous: float = 0.75
    min_scale_exp: int = 0
    max_scale_exp: int = 3
    threshold: float = 0.3
    beta_max: float = 0.8
    p_structural: float = 0.5
    min_area: float = 0.01
    max_area: float = 0.3
    grid_choices: tuple = (2, 4, 8)
    blend_structural: bool = True
    point_sigma: float = 0.05
    textures: tuple = ("noise", "stripes", "checker")
    # pixels whose largest channel change is below this are reverted and unmasked
    refine_delta: float = 0.0

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _random_mask(shape, rng, cfg: SynthConfig):
    h, w = shape
    for _ in range(50):
        sy = 2 ** int(rng.integers(cfg.min_scale_exp, cfg.max_scale_exp + 1))
        sx = 2 ** int(rng.integers(cfg.min_scale_exp, cfg.max_scale_exp + 1))
        noise = perlin_noise((h, w), max(sy, 1), int(rng.integers(2**31)))
        if sx != sy:
            noise = 0.5 * (noise + perlin_noise((h, w), sx, int(rng.integers(2**31))))
        mask = (noise > cfg.threshold).astype(np.uint8)
        if cfg.min_area <= mask.mean() <= cfg.max_area:
            return mask
    return mask


def refine_to_changes(sample: SynthSample, original, delta):
    """Drop mask pixels whose change is below ``delta`` and restore them exactly."""
    changed = np.abs(sample.image - original).max(axis=0) >= delta
    keep = sample.mask.astype(bool) & changed
    sample.image = np.where(keep[None], sample.image, original)
    sample.mask = keep.astype(np.uint8)
    return sample


def synthesize(image, class_label, seed, cfg: SynthConfig = SynthConfig(), point_grid=None) -> SynthSample:
    """Draw one training sample: normal with probability ``1 - p_anomalous``, else texture or structural."""
    rng = np.random.default_rng(seed)
    image = np.asarray(image, dtype=np.float32)
    shape = image.shape[1:]
    if rng.uniform() >= cfg.p_anomalous:
        return SynthSample(image.copy(), np.zeros(shape, np.uint8), class_label, 1.0, seed,
                           None if point_grid is None else np.asarray(point_grid, np.float32).copy(), "normal")
    mask = _random_mask(shape, rng, cfg)
    beta = float(rng.uniform(0.0, cfg.beta_max))
    if rng.uniform() >= cfg.p_structural:
        kind = cfg.textures[int(rng.integers(len(cfg.textures)))]
        tex = procedural_texture(kind, shape, int(rng.integers(2**31)))
        sample = texture_anomaly(image, mask, tex, beta, class_label, seed)
    else:
        grids = [g for g in cfg.grid_choices if shape[0] % g == 0 and shape[1] % g == 0]
        g = grids[int(rng.integers(len(grids)))]
        sample = structural_anomaly(image, mask, g, int(rng.integers(2**31)), beta,
                                    blend=cfg.blend_structural, class_label=class_label)
        sample.seed = seed
    if cfg.refine_delta > 0:
        sample = refine_to_changes(sample, image, cfg.refine_delta)
    if point_grid is not None:
        mode = POINT_MODES[int(rng.integers(len(POINT_MODES)))]
        pts = perturb_points(point_grid, sample.mask, mode, {"sigma": cfg.point_sigma}, int(rng.integers(2**31)))
        sample.point_grid = pts.point_grid
        sample.mode = f"{sample.mode}+{mode}"
    return sample


# --------------------------------------------------------------------------
# persistence: 8-bit PNG image, 1-bit PNG mask, JSON manifest


def save_samples(samples, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k, s in enumerate(samples):
        name = f"{k:05d}"
        img = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img).save(outdir / f"{name}.png")
        Image.fromarray(s.mask.astype(bool)).save(outdir / f"{name}_mask.png")
        entry = {"name": name, "class_label": int(s.class_label), "beta": float(s.beta), "seed": int(s.seed), "mode": s.mode}
        if s.point_grid is not None:
            np.save(outdir / f"{name}_xyz.npy", s.point_grid.astype(np.float32))
            entry["points"] = f"{name}_xyz.npy"
        manifest.append(entry)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return outdir / "manifest.json"


def load_samples(outdir):
    outdir = Path(outdir)
    manifest = json.loads((outdir / "manifest.json").read_text())
    out = []
    for e in manifest:
        img = np.asarray(Image.open(outdir / f"{e['name']}.png"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        mask = np.asarray(Image.open(outdir / f"{e['name']}_mask.png")).astype(np.uint8)
        pts = np.load(outdir / e["points"]) if "points" in e else None
        out.append(SynthSample(img, mask, e["class_label"], e["beta"], e["seed"], pts, e["mode"]))
    return out
