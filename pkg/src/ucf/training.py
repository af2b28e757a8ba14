"""Composite segmentation/classification objective and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ValidationError

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
IOU_EPS = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.1
    gamma0: float = 3.0
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    ssim_window: int = 11
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.gamma0 < 1:
            raise ValidationError("gamma0 must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)


def adaptive_gamma(class_logits, true_class, gamma0):
    """Focal exponent per sample: ``gamma0 - sigmoid(logit of true class)`` when the
    arg-max class is correct, ``gamma0`` otherwise.

    Accepts a single logit vector ``(K,)`` or a batch ``(B, K)``.
    """
    logits = torch.as_tensor(class_logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    target = torch.as_tensor(true_class).reshape(-1).to(torch.long)
    if target.numel() != logits.shape[0]:
        raise ValidationError("one true class per logit vector is required")
    k = logits.shape[1]
    if bool((target < 0).any()) or bool((target >= k).any()):
        raise ValidationError(f"true class outside [0, {k})")
    true_logit = logits.gather(1, target[:, None])[:, 0]
    correct = logits.argmax(dim=1) == target
    gamma = torch.where(correct, gamma0 - torch.sigmoid(true_logit), torch.full_like(true_logit, gamma0))
    return gamma[0] if single else gamma


def _as_batch(m, ms):
    if m.ndim == 3:
        m = m[None]
    if ms.ndim == 2:
        ms = ms[None]
    if m.shape[1] != 2 or m.shape[0] != ms.shape[0] or m.shape[2:] != ms.shape[1:]:
        raise ValidationError(f"anomaly map {tuple(m.shape)} and mask {tuple(ms.shape)} are not aligned")
    return m, ms.to(m.dtype)


def focal_loss(m, ms, gamma, reduction="mean"):
    """Mean over pixels of ``-(1 - p_t)**gamma * log(p_t)``.

    ``m`` holds (normal, abnormal) probabilities ``(B, 2, H, W)``, ``ms`` the
    binary mask ``(B, H, W)``; ``gamma`` is a scalar or one value per sample.
    """
    m, ms = _as_batch(m, ms)
    p_t = torch.where(ms > 0.5, m[:, 1], m[:, 0])
    gamma = torch.as_tensor(gamma, dtype=m.dtype).reshape(-1, 1, 1)
    loss = -((1.0 - p_t) ** gamma) * torch.log(p_t.clamp_min(PROB_EPS))
    per_sample = loss.mean(dim=(1, 2))
    return per_sample.mean() if reduction == "mean" else per_sample


def soft_iou_loss(m, ms, reduction="mean"):
    """``1 - (I + eps) / (U + eps)`` between the abnormal channel and the mask."""
    m, ms = _as_batch(m, ms)
    p = m[:, 1]
    inter = (p * ms).sum(dim=(1, 2))
    union = p.sum(dim=(1, 2)) + ms.sum(dim=(1, 2)) - inter
    per_sample = 1.0 - (inter + IOU_EPS) / (union + IOU_EPS)
    return per_sample.mean() if reduction == "mean" else per_sample


def gaussian_window(size, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_loss(m, ms, window=11, c1=0.01**2, c2=0.03**2, reduction="mean"):
    """``1 - mean SSIM`` over all valid ``window x window`` Gaussian windows."""
    m, ms = _as_batch(m, ms)
    x = m[:, 1:2]
    y = ms[:, None]
    size = min(window, x.shape[-1], x.shape[-2])
    if size % 2 == 0:
        size -= 1
    w = gaussian_window(size, dtype=x.dtype)[None, None]
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    ssim = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    per_sample = 1.0 - ssim.mean(dim=(1, 2, 3))
    return per_sample.mean() if reduction == "mean" else per_sample


def ce_loss(class_logits, true_class, reduction="mean"):
    logits = torch.as_tensor(class_logits)
    if logits.ndim == 1:
        logits = logits[None]
    target = torch.as_tensor(true_class).reshape(-1).to(torch.long)
    return F.cross_entropy(logits, target, reduction=reduction)


def upsample_probs(m, size):
    """Bilinearly resize a ``(B, 2, h, w)`` probability map; channels still sum to one."""
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.interpolate(m, size=tuple(size), mode="bilinear", align_corners=False)


def total_loss(m, ms, class_logits, true_class, cfg: LossConfig, reduction="mean"):
    """Focal (adaptive gamma) + CE + alpha * (soft IoU + SSIM).

    ``m`` may be at feature resolution; it is upsampled to the mask size.
    Returns ``(total, components)`` where components holds detached floats.
    """
    if m.ndim == 3:
        m = m[None]
    if ms.ndim == 2:
        ms = ms[None]
    m = upsample_probs(m, ms.shape[-2:])
    logits = torch.as_tensor(class_logits)
    if logits.ndim == 1:
        logits = logits[None]
    gamma = adaptive_gamma(logits, true_class, cfg.gamma0)
    parts = {
        "focal": focal_loss(m, ms, gamma, reduction="none"),
        "ce": ce_loss(logits, true_class, reduction="none"),
        "soft_iou": soft_iou_loss(m, ms, reduction="none"),
        "ssim": ssim_loss(m, ms, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2, reduction="none"),
    }
    per_sample = parts["focal"] + parts["ce"] + cfg.alpha * (parts["soft_iou"] + parts["ssim"])
    comps = {k: float(v.detach().mean()) for k, v in parts.items()}
    comps["gamma"] = float(torch.as_tensor(gamma).detach().mean())
    if reduction == "mean":
        return per_sample.mean(), comps
    return per_sample, comps


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    """Precomputed network inputs for a set of synthetic samples."""

    volumes: torch.Tensor  # (n, DN, L, H', W')
    init_maps: torch.Tensor  # (n, L, H', W')
    feats: torch.Tensor  # (n, L, C, H', W')
    masks: torch.Tensor  # (n, H, W)
    labels: torch.Tensor  # (n,)

    def __len__(self):
        return self.volumes.shape[0]

    def batch(self, idx):
        return self.volumes[idx], self.init_maps[idx], self.feats[idx], self.masks[idx], self.labels[idx]


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    steps: int = 0


def set_deterministic(flag=True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def train(data: TrainData, net, cfg: LossConfig, on_epoch=None, deterministic=False) -> TrainResult:
    """Adam with plateau halving of the learning rate.

    ``on_epoch(epoch, net)`` may return a dict of validation metrics that is
    merged into the history row.
    """
    set_deterministic(deterministic)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    result = TrainResult()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = torch.randperm(n, generator=gen)
        sums = {}
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            vol, init, feats, masks, labels = data.batch(idx)
            out = net(vol, init, feats)
            loss, comps = total_loss(out.anomaly_map, masks, out.class_logits, labels, cfg)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {result.steps}: components {comps}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.steps += 1
            b = len(idx)
            seen += b
            for k, v in {"loss": float(loss.detach()), **comps}.items():
                sums[k] = sums.get(k, 0.0) + v * b
        row = {"epoch": epoch, **{k: v / seen for k, v in sums.items()}, "lr": opt.param_groups[0]["lr"]}
        sched.step(row["loss"])
        if on_epoch is not None:
            net.eval()
            row.update(on_epoch(epoch, net) or {})
        result.history.append(row)
        log.info("epoch %d loss %.5f lr %.2e", epoch, row["loss"], row["lr"])
    net.eval()
    return result


def write_history(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) and math.isfinite(v) else v) for k, v in row.items()})
    return path


def smoothed(values, window=5):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
