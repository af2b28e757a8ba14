"""Multi-layer feature stacks, the toy frozen encoder and template handling.

A feature stack is an ``L x C x H' x W'`` array: ``L`` tapped layers, ``C``
channels per layer and an ``H' x W'`` token grid. Templates are stacks of the
same shape that the input is matched against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError, ValidationError


class Modality(str, Enum):
    rgb = "rgb"
    d3 = "d3"
    fused = "fused"
    text_normal = "text_normal"
    text_abnormal = "text_abnormal"


class Provenance(str, Enum):
    reconstruction = "reconstruction"
    sampled_normal = "sampled_normal"
    text_prompts = "text_prompts"
    cross_modal = "cross_modal"


_PROVENANCE_MODALITIES = {
    Provenance.reconstruction: {Modality.rgb, Modality.d3, Modality.fused},
    Provenance.sampled_normal: {Modality.rgb, Modality.d3, Modality.fused},
    Provenance.text_prompts: {Modality.text_normal, Modality.text_abnormal},
    Provenance.cross_modal: {Modality.rgb, Modality.d3, Modality.fused},
}


@dataclass
class FeatureStack:
    """Feature tensor of shape ``(L, C, H', W')`` tagged with its modality.

    Text stacks put one prompt group per column of a ``1 x G`` grid, so the
    number of groups plays the role of the spatial size.
    """

    data: np.ndarray
    modality: Modality = Modality.rgb
    layer_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"feature stack must be 4-D (L, C, H', W'), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"feature stack has an empty axis: {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("feature stack contains non-finite values")
        if not self.layer_ids:
            self.layer_ids = list(range(self.data.shape[0]))
        if len(self.layer_ids) != self.data.shape[0]:
            raise ShapeError(
                f"{len(self.layer_ids)} layer ids given for {self.data.shape[0]} layers"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def spatial(self):
        return self.data.shape[2:]

    @property
    def is_text(self):
        return self.modality in (Modality.text_normal, Modality.text_abnormal)


@dataclass
class TemplateSet:
    templates: list
    provenance: Provenance = Provenance.sampled_normal
    seed: int = 0

    def __post_init__(self):
        self.provenance = Provenance(self.provenance)
        if len(self.templates) < 1:
            raise ValidationError("a template set needs at least one template")
        shape = self.templates[0].shape
        modality = self.templates[0].modality
        for t in self.templates[1:]:
            if t.shape != shape:
                raise ShapeError(f"template shapes differ: {shape} vs {t.shape}")
            if t.modality != modality:
                raise ValidationError("templates in one set must share a modality")
        if modality not in _PROVENANCE_MODALITIES[self.provenance]:
            raise ValidationError(
                f"provenance {self.provenance.value} is inconsistent with modality {modality.value}"
            )

    def __len__(self):
        return len(self.templates)

    @property
    def modality(self):
        return self.templates[0].modality

    def stacked(self):
        """Templates as one ``(N, L, C, H', W')`` array."""
        return np.stack([t.data for t in self.templates])


# --------------------------------------------------------------------------
# toy encoder


@dataclass(frozen=True)
class EncoderConfig:
    """Frozen random convolutional encoder.

    A patchify convolution (kernel = stride = ``stride``) followed by
    ``layers`` 3x3 convolutions; the output of every 3x3 block is tapped.
    """

    seed: int = 0
    layers: int = 3
    channels: int = 32
    stride: int = 4
    activation: str = "tanh"
    bias: bool = False

    def to_dict(self):
        return dict(
            seed=self.seed,
            layers=self.layers,
            channels=self.channels,
            stride=self.stride,
            activation=self.activation,
            bias=self.bias,
        )


_WEIGHT_CACHE: dict = {}


def _encoder_weights(cfg: EncoderConfig, in_channels: int):
    key = (cfg, in_channels)
    if key not in _WEIGHT_CACHE:
        gen = torch.Generator().manual_seed(cfg.seed)
        s, c = cfg.stride, cfg.channels
        w0 = torch.randn(c, in_channels, s, s, generator=gen, dtype=torch.float64)
        w0 /= np.sqrt(in_channels * s * s)
        ws = []
        for _ in range(cfg.layers):
            w = torch.randn(c, c, 3, 3, generator=gen, dtype=torch.float64)
            ws.append(w / np.sqrt(c * 9))
        if cfg.bias:
            bs = [0.1 * torch.randn(c, generator=gen, dtype=torch.float64) for _ in range(cfg.layers + 1)]
        else:
            bs = [None] * (cfg.layers + 1)
        _WEIGHT_CACHE[key] = (w0, ws, bs)
    return _WEIGHT_CACHE[key]


def encode_toy(image, cfg: EncoderConfig = EncoderConfig(), modality=Modality.rgb) -> FeatureStack:
    """Encode a ``K x H x W`` image into a ``L x C x H/s x W/s`` feature stack.

    Deterministic in ``(image, cfg)``; computed in float64 and returned as float32.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a (channels, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    _, h, w = image.shape
    s = cfg.stride
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} is not divisible by the encoder stride {s}")
    if cfg.activation == "tanh":
        act = torch.tanh
    elif cfg.activation == "linear":
        act = lambda t: t  # noqa: E731
    else:
        raise ValidationError(f"unknown activation {cfg.activation!r}")

    w0, ws, bs = _encoder_weights(cfg, image.shape[0])
    x = torch.from_numpy(image)[None]
    x = act(F.conv2d(x, w0, bs[0], stride=s))
    taps = []
    for w_l, b_l in zip(ws, bs[1:]):
        x = act(F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w_l, b_l)) + x
        taps.append(x[0])
    data = torch.stack(taps).numpy().astype(np.float32)
    return FeatureStack(data, modality, layer_ids=[f"block{i + 1}" for i in range(cfg.layers)])


# --------------------------------------------------------------------------
# diffusion-step reconstruction and template sampling


def reconstruct_x0(i_t, eps_pred, alpha_bar_t):
    """Estimate the clean image from a noisy diffusion state and predicted noise.

    ``(i_t - sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_bar_t)``
    """
    if not 0.0 < alpha_bar_t <= 1.0:
        raise DomainError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    i_t = np.asarray(i_t)
    eps_pred = np.asarray(eps_pred)
    if i_t.shape != eps_pred.shape:
        raise ShapeError(f"i_t {i_t.shape} and eps_pred {eps_pred.shape} differ in shape")
    return (i_t - np.sqrt(1.0 - alpha_bar_t) * eps_pred) / np.sqrt(alpha_bar_t)


def sample_templates(pool, n, seed, provenance=Provenance.sampled_normal) -> TemplateSet:
    """Draw ``n`` templates from ``pool``.

    Without replacement when ``n <= len(pool)``, with replacement otherwise.
    """
    if not pool:
        raise ValidationError("template pool is empty")
    if n < 1:
        raise ValidationError(f"need n >= 1 templates, got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n, replace=n > len(pool))
    return TemplateSet([pool[i] for i in idx], provenance, seed)


def sample_template_indices(pool_size, n, seed):
    """Index-only version of :func:`sample_templates` (same draws for the same seed)."""
    rng = np.random.default_rng(seed)
    return rng.choice(pool_size, size=n, replace=n > pool_size)


# --------------------------------------------------------------------------
# toy prompt embeddings


def _prompt_direction(text, dim):
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    u = rng.standard_normal(dim)
    return u / np.linalg.norm(u)


def embed_prompts_toy(groups, anchor, spread=0.1, modality=Modality.text_normal) -> FeatureStack:
    """Stand-in text encoder: one embedding per prompt group, laid out on a ``1 x G`` grid.

    Each prompt maps to ``anchor + spread * |anchor| * u(prompt)`` with ``u`` a
    unit direction seeded by the prompt's SHA-256; a group embedding is the
    mean over its prompts. Returns an ``L = 1`` stack of shape ``(1, C, 1, G)``.
    """
    anchor = np.asarray(anchor, dtype=np.float64).ravel()
    if not groups or any(len(g) == 0 for g in groups):
        raise ValidationError("every prompt group needs at least one prompt")
    scale = spread * np.linalg.norm(anchor)
    cols = [np.mean([anchor + scale * _prompt_direction(t, anchor.size) for t in g], axis=0) for g in groups]
    data = np.stack(cols, axis=1)[None, :, None, :].astype(np.float32)
    return FeatureStack(data, modality, layer_ids=["text"])


def group_by_form(prompts, forms=3):
    """Split rendered prompts into ``forms`` groups by phrasing form (index modulo ``forms``)."""
    forms = max(1, min(forms, len(prompts)))
    return [list(prompts[k::forms]) for k in range(forms)]


# --------------------------------------------------------------------------
# 3D point features


def depth_descriptor(xyz):
    """``3 x H x W`` organized point grid -> (centred depth, d/drow, d/dcol), scaled per pixel pitch.

    Drops the x/y coordinates, which only encode pixel position on a
    registered grid, so the encoder sees surface shape instead.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 3 or xyz.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) point grid, got shape {xyz.shape}")
    if not np.all(np.isfinite(xyz)):
        raise ValidationError("point grid contains non-finite values")
    z = xyz[2]
    size = max(z.shape)
    gy, gx = np.gradient(z)
    return np.stack([10.0 * (z - z.mean()), size * gy, size * gx]).astype(np.float32)


def project_point_features(point_feats, point_xy, grid, radius=np.inf) -> FeatureStack:
    """Scatter per-point features onto an ``H' x W'`` grid by nearest neighbour.

    ``point_xy`` holds integer ``(row, col)`` grid coordinates, one per point.
    Each cell takes the feature of its nearest point (Euclidean distance in
    grid units, ties to the lowest point index); cells farther than ``radius``
    from every point stay zero.
    """
    feats = np.asarray(point_feats, dtype=np.float32)
    xy = np.asarray(point_xy)
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise ShapeError(f"point features must be (C, P) with P >= 1, got {feats.shape}")
    if xy.shape != (feats.shape[1], 2):
        raise ShapeError(f"expected {feats.shape[1]} (row, col) pairs, got shape {xy.shape}")
    h, w = grid
    if np.any(xy[:, 0] < 0) or np.any(xy[:, 0] >= h) or np.any(xy[:, 1] < 0) or np.any(xy[:, 1] >= w):
        raise ValidationError(f"point coordinates fall outside the {h}x{w} grid")

    rows, cols = np.mgrid[0:h, 0:w]
    cells = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    d2 = ((cells[:, None, :] - xy[None, :, :].astype(np.float64)) ** 2).sum(-1)
    # argmin returns the first minimum, which is the lowest point index on ties
    nearest = d2.argmin(axis=1)
    out = feats[:, nearest]
    if np.isfinite(radius):
        far = d2[np.arange(len(cells)), nearest] > radius * radius
        out[:, far] = 0.0
    return FeatureStack(out.reshape(1, feats.shape[0], h, w), Modality.d3, layer_ids=["points"])


# --------------------------------------------------------------------------
# fixture format: flat little-endian float32 + JSON sidecar


def save_array(path, data, **meta):
    """Write ``data`` as raw little-endian float32 at ``path`` and a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "byteorder": "little", **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_array(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return arr.astype(np.float32), meta


def save_stack(path, stack: FeatureStack, seed=None):
    return save_array(
        path,
        stack.data,
        modality=stack.modality.value,
        layer_ids=[str(i) for i in stack.layer_ids],
        seed=seed,
    )


def load_stack(path) -> FeatureStack:
    data, meta = load_array(path)
    return FeatureStack(data, Modality(meta["modality"]), meta["layer_ids"])
