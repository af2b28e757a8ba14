"""Guided 3D U-Net that filters anomaly cost volumes.

Tensor layout inside the network is ``(B, channels, L, H', W')``: matching
channels of the cost volume become network channels and the layer axis ``L``
is the 3D depth axis. Only the spatial axes are down/up-sampled.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError, ValidationError

CHECKPOINT_FORMAT = "ucf-filter-net"
CHECKPOINT_VERSION = 1


@dataclass
class FilterNetConfig:
    in_channels: int
    layers: int = 3
    feature_channels: int = 32
    spatial: tuple = (8, 8)
    num_classes: int = 3
    unified_channels: int = 96
    widths: tuple = (16, 32, 64)
    guidance_channels: int = 4
    spatial_kernel: int = 3
    decoder_guidance: bool = True
    padding_mode: str = "zeros"
    norm: str = "group"
    zero_head: bool = True
    seed: int = 0

    def __post_init__(self):
        self.spatial = tuple(self.spatial)
        self.widths = tuple(self.widths)
        if self.unified_channels < 1:
            raise ValidationError("unified_channels must be >= 1")
        if len(self.widths) < 2:
            raise ValidationError("depth (number of encoder widths) must be >= 2")
        if self.norm not in ("batch", "group"):
            raise ValidationError(f"norm must be 'batch' or 'group', got {self.norm!r}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.in_channels < 1 or self.layers < 1 or self.feature_channels < 1:
            raise ValidationError("in_channels, layers and feature_channels must be >= 1")

    @property
    def depth(self):
        return len(self.widths)

    def to_dict(self):
        d = asdict(self)
        d["spatial"] = list(self.spatial)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FilterOutput:
    anomaly_map: torch.Tensor  # (B, 2, H', W') softmax over (normal, abnormal)
    class_logits: torch.Tensor  # (B, K)
    bottleneck: torch.Tensor = field(repr=False, default=None)

    @property
    def abnormal(self):
        return self.anomaly_map[:, 1]


def _norm(channels, kind="group"):
    # batch statistics keep the absolute cost level that per-sample norms discard
    if kind == "group":
        return nn.GroupNorm(min(4, channels), channels)
    return nn.BatchNorm3d(channels)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, padding_mode="zeros", norm="group"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, padding=1, padding_mode=padding_mode),
            _norm(c_out, norm),
            nn.SiLU(),
            nn.Conv3d(c_out, c_out, 3, padding=1, padding_mode=padding_mode),
            _norm(c_out, norm),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class RCSA(nn.Module):
    """Residual channel-spatial attention with map and feature guidance.

    ``x' = cat(x, h(map), h(feat))``; channel gate from shared conv over
    global max and average pools, spatial gate from a conv over the
    channel-wise mean and max. Both gates are applied residually.
    """

    def __init__(self, channels, guidance_channels, feature_channels, kernel=3, padding_mode="zeros"):
        super().__init__()
        g = guidance_channels
        self.h_map = nn.Conv3d(1, g, 1)
        self.h_feat = nn.Conv3d(feature_channels, g, 1)
        self.out_channels = channels + 2 * g
        self.channel_conv = nn.Conv3d(self.out_channels, self.out_channels, 1)
        self.spatial_conv = nn.Conv3d(2, 1, kernel, padding=kernel // 2, padding_mode=padding_mode)

    def guidance(self, size, init_map, feats):
        m = F.interpolate(init_map, size=size, mode="nearest")
        f = F.interpolate(feats, size=size, mode="nearest")
        return self.h_map(m), self.h_feat(f)

    def channel_gate(self, x):
        mp = torch.amax(x, dim=(2, 3, 4), keepdim=True)
        ap = torch.mean(x, dim=(2, 3, 4), keepdim=True)
        return torch.sigmoid(self.channel_conv(mp) + self.channel_conv(ap))

    def spatial_gate(self, x):
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial_conv(stats))

    def attend(self, x_prime):
        x_ca = self.channel_gate(x_prime) * x_prime + x_prime
        return self.spatial_gate(x_ca) * x_ca + x_ca

    def forward(self, x, init_map, feats):
        if init_map.shape[1] != 1 or feats.shape[1] != self.h_feat.in_channels:
            raise ShapeError(
                f"guidance channels (map {init_map.shape[1]}, features {feats.shape[1]}) != "
                f"expected (1, {self.h_feat.in_channels})"
            )
        if init_map.shape[2] != x.shape[2] or feats.shape[2] != x.shape[2]:
            raise ShapeError(f"guidance depth does not match level depth {x.shape[2]}")
        hm, hf = self.guidance(x.shape[2:], init_map, feats)
        return self.attend(torch.cat([x, hm, hf], dim=1))


class ClassAdaptor(nn.Module):
    """Spatial average of deep features followed by a linear map to class logits."""

    def __init__(self, channels, num_classes):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, deep):
        return self.fc(deep.mean(dim=(2, 3, 4)))


class FilterNet(nn.Module):
    def __init__(self, cfg: FilterNetConfig):
        super().__init__()
        self.cfg = cfg
        pm = cfg.padding_mode
        g, fc = cfg.guidance_channels, cfg.feature_channels

        self.project = nn.Conv3d(cfg.in_channels, cfg.unified_channels, 1)
        self.enc_blocks = nn.ModuleList()
        self.enc_rcsa = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = cfg.unified_channels
        for w in cfg.widths:
            self.enc_blocks.append(ConvBlock(c_prev, w, pm, cfg.norm))
            rcsa = RCSA(w, g, fc, cfg.spatial_kernel, pm)
            self.enc_rcsa.append(rcsa)
            c_prev = rcsa.out_channels
            self.down.append(nn.Conv3d(c_prev, c_prev, (1, 2, 2), stride=(1, 2, 2)))

        bottleneck = 2 * cfg.widths[-1]
        self.bottleneck = ConvBlock(c_prev, bottleneck, pm, cfg.norm)
        self.adaptor = ClassAdaptor(bottleneck, cfg.num_classes)

        self.up = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.dec_rcsa = nn.ModuleList()
        c_prev = bottleneck
        for w in reversed(cfg.widths):
            skip = w + 2 * g
            self.up.append(nn.ConvTranspose3d(c_prev, w, (1, 2, 2), stride=(1, 2, 2)))
            self.dec_blocks.append(ConvBlock(w + skip, w, pm, cfg.norm))
            if cfg.decoder_guidance:
                rcsa = RCSA(w, g, fc, cfg.spatial_kernel, pm)
                self.dec_rcsa.append(rcsa)
                c_prev = rcsa.out_channels
            else:
                c_prev = w

        # collapses the layer (depth) axis L -> 1
        self.collapse = nn.Conv3d(c_prev, cfg.widths[0], (cfg.layers, 1, 1))
        self.head = nn.Conv2d(1, 2, 3, padding=1)
        if cfg.zero_head:
            # start at p = 0.5 everywhere; a random head saturates the softmax
            # because the channel minimum is large in magnitude at initialisation
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def _check(self, t, where):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations after {where}")

    def forward(self, volume, init_map, feats, check_finite=True):
        """Filter a batch.

        ``volume``: (B, DN, L, H', W'); ``init_map``: (B, L, H', W');
        ``feats``: (B, L, C, H', W') input feature stacks.
        """
        cfg = self.cfg
        if volume.shape[1] != cfg.in_channels or volume.shape[2] != cfg.layers:
            raise ShapeError(
                f"volume has (channels, layers) = {tuple(volume.shape[1:3])}, "
                f"network expects ({cfg.in_channels}, {cfg.layers})"
            )
        if tuple(volume.shape[3:]) != cfg.spatial:
            raise ShapeError(f"volume spatial size {tuple(volume.shape[3:])} != configured {cfg.spatial}")
        m = init_map.unsqueeze(1)
        f = feats.permute(0, 2, 1, 3, 4)
        check = self._check if check_finite else (lambda t, w: None)

        x = self.project(volume)
        check(x, "projection")
        skips = []
        for k, (block, rcsa, down) in enumerate(zip(self.enc_blocks, self.enc_rcsa, self.down)):
            x = rcsa(block(x), m, f)
            check(x, f"encoder level {k}")
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        check(x, "bottleneck")
        deep = x
        for k, (up, block) in enumerate(zip(self.up, self.dec_blocks)):
            x = block(torch.cat([up(x), skips[-1 - k]], dim=1))
            if cfg.decoder_guidance:
                x = self.dec_rcsa[k](x, m, f)
            check(x, f"decoder level {k}")
        x = self.collapse(x)[:, :, 0]  # (B, C, H', W')
        x = torch.amin(x, dim=1, keepdim=True)
        logits = self.head(x)
        check(logits, "output head")
        return FilterOutput(torch.softmax(logits, dim=1), self.adaptor(deep), deep)


def build(cfg: FilterNetConfig) -> FilterNet:
    """Construct a network with parameters initialised from ``cfg.seed``."""
    h, w = cfg.spatial
    f = 2 ** cfg.depth
    if h % f or w % f:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by 2**depth = {f}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = FilterNet(cfg)
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: FilterNet, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    meta = {**header, "config": net.cfg.to_dict(), "parameters": parameter_count(net), **(extra or {})}
    state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
    torch.save({**header, "config": net.cfg.to_dict(), "state_dict": state}, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, expected: FilterNetConfig | None = None) -> FilterNet:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"{path}: unsupported checkpoint header {blob.get('format')!r} v{blob.get('version')!r}"
        )
    cfg = FilterNetConfig.from_dict(blob["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {k for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v}
        raise ValidationError(f"{path}: checkpoint config mismatch in {sorted(diff)}")
    net = build(cfg)
    net.load_state_dict(blob["state_dict"])
    return net
