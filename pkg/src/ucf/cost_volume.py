"""Global-matching similarity volumes and anomaly cost volumes.

Axis conventions follow the matching formulation: a similarity volume is
``D x N x L x S`` where ``j < D`` indexes template locations, ``n < N``
templates, ``l < L`` layers and ``i < S`` input locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .features import FeatureStack, Modality, Provenance, TemplateSet

COSINE_EPS = 1e-8


@dataclass
class SimilarityVolume:
    data: np.ndarray
    pairing: tuple
    spatial: tuple
    # (pairing, D_k) per concatenated block, in matching-axis order
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"similarity volume must be (D, N, L, S), got {self.data.shape}")
        if int(np.prod(self.spatial)) != self.data.shape[3]:
            raise ShapeError(f"spatial size {self.spatial} does not factor S = {self.data.shape[3]}")
        if not self.blocks:
            self.blocks = [(self.pairing, self.data.shape[0])]

    @property
    def D(self):
        return self.data.shape[0]

    @property
    def N(self):
        return self.data.shape[1]

    @property
    def L(self):
        return self.data.shape[2]


@dataclass
class CostVolume:
    """Cost volume reshaped to ``(D*N) x L x H' x W'``; channel ``j + D*n``."""

    data: np.ndarray
    D: int
    N: int
    pooling_mode: str = "min"
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"cost volume must be (DN, L, H', W'), got {self.data.shape}")
        if self.data.shape[0] != self.D * self.N:
            raise ShapeError(f"{self.data.shape[0]} channels but D*N = {self.D * self.N}")
        if self.pooling_mode not in ("min", "avg"):
            raise ValidationError(f"pooling mode must be 'min' or 'avg', got {self.pooling_mode!r}")

    @property
    def matching_channels(self):
        return self.data.shape[0]


def _layers_of(template_data, n_layers):
    """Broadcast single-layer templates (text embeddings) across input layers."""
    if template_data.shape[1] == n_layers:
        return template_data
    if template_data.shape[1] == 1:
        return np.repeat(template_data, n_layers, axis=1)
    raise ShapeError(f"templates have {template_data.shape[1]} layers, input has {n_layers}")


def similarity_volume(inp: FeatureStack, tpl: TemplateSet, pairing=None) -> SimilarityVolume:
    """Cosine similarity between every input location and every template location."""
    f_in = np.asarray(inp.data, dtype=np.float64)
    L, C, H, W = f_in.shape
    f_t = _layers_of(np.asarray(tpl.stacked(), dtype=np.float64), L)
    N, _, C_t, Ht, Wt = f_t.shape
    if C_t != C:
        raise ShapeError(f"input has {C} channels per layer, templates have {C_t}")

    a = f_in.reshape(L, C, H * W)  # (L, C, S)
    b = f_t.reshape(N, L, C, Ht * Wt)  # (N, L, C, D)
    dots = np.einsum("nlcj,lci->jnli", b, a)
    norm_a = np.sqrt(np.einsum("lci,lci->li", a, a))
    norm_b = np.sqrt(np.einsum("nlcj,nlcj->nlj", b, b))
    denom = np.maximum(norm_b.transpose(2, 0, 1)[..., None] * norm_a[None, None], COSINE_EPS)
    v = np.clip(dots / denom, -1.0, 1.0).astype(np.float32)
    pairing = pairing or (inp.modality.value, tpl.modality.value)
    return SimilarityVolume(v, tuple(pairing), (H, W))


def cross_modal_volume(inp: FeatureStack, tpl: TemplateSet, pair) -> SimilarityVolume:
    """Similarity volume for an explicit ``(input modality, template modality)`` pairing."""
    src, dst = (Modality(p) for p in pair)
    if inp.modality != src:
        raise ValidationError(f"input modality {inp.modality.value} does not match pairing source {src.value}")
    if tpl.modality != dst:
        raise ValidationError(f"template modality {tpl.modality.value} does not match pairing target {dst.value}")
    return similarity_volume(inp, tpl, (src.value, dst.value))


def concat_modalities(volumes) -> SimilarityVolume:
    """Stack volumes along the matching axis, in the given order."""
    volumes = list(volumes)
    if not volumes:
        raise ValidationError("nothing to concatenate")
    first = volumes[0]
    for v in volumes[1:]:
        if v.data.shape[1:] != first.data.shape[1:] or v.spatial != first.spatial:
            raise ShapeError(
                f"cannot concatenate volumes with (N, L, S) {first.data.shape[1:]} and {v.data.shape[1:]}"
            )
    if len(volumes) == 1:
        return first
    blocks = [b for v in volumes for b in v.blocks]
    data = np.concatenate([v.data for v in volumes], axis=0)
    return SimilarityVolume(data, ("concat", "concat"), first.spatial, blocks)


def text_volume(v_abn: SimilarityVolume, v_nor: SimilarityVolume) -> SimilarityVolume:
    """Normal-related volume ``cat(1 - v_abn, v_nor)`` from abnormal/normal prompt matches.

    Entries of the first block lie in ``[0, 2]``.
    """
    if v_abn.pairing[1] != Modality.text_abnormal.value:
        raise ValidationError(f"first volume must match abnormal prompts, got pairing {v_abn.pairing}")
    if v_nor.pairing[1] != Modality.text_normal.value:
        raise ValidationError(f"second volume must match normal prompts, got pairing {v_nor.pairing}")
    if v_abn.data.shape != v_nor.data.shape:
        raise ShapeError(f"prompt volumes differ in shape: {v_abn.data.shape} vs {v_nor.data.shape}")
    data = np.concatenate([1.0 - v_abn.data, v_nor.data], axis=0)
    blocks = [(("rgb", "1-" + v_abn.pairing[1]), v_abn.D), (v_nor.pairing, v_nor.D)]
    return SimilarityVolume(data.astype(np.float32), ("rgb", "text"), v_abn.spatial, blocks)


def to_cost(v: SimilarityVolume) -> SimilarityVolume:
    """``1 - similarity``, clamped to ``[0, 2]``."""
    cost = np.clip(1.0 - v.data, 0.0, 2.0).astype(np.float32)
    return SimilarityVolume(cost, v.pairing, v.spatial, list(v.blocks))


def reshape_volume(c: SimilarityVolume, pooling_mode="min") -> CostVolume:
    """``(D, N, L, H'W') -> (D*N, L, H', W')`` with ``(j, n, l, i) -> (j + D*n, l, i // W', i % W')``."""
    if c.spatial is None or int(np.prod(c.spatial)) != c.data.shape[3]:
        raise ValidationError("unknown spatial factorization for reshape")
    D, N, L, _ = c.data.shape
    H, W = c.spatial
    data = np.ascontiguousarray(c.data.transpose(1, 0, 2, 3)).reshape(N * D, L, H, W)
    return CostVolume(data, D, N, pooling_mode, list(c.blocks))


def unreshape_volume(cv: CostVolume) -> np.ndarray:
    """Inverse of :func:`reshape_volume`: back to ``(D, N, L, H'W')``."""
    DN, L, H, W = cv.data.shape
    return np.ascontiguousarray(cv.data.reshape(cv.N, cv.D, L, H * W).transpose(1, 0, 2, 3))


def initial_map(c: CostVolume) -> np.ndarray:
    """Pool the matching channels into an ``L x H' x W'`` coarse anomaly map."""
    if c.pooling_mode == "min":
        return c.data.min(axis=0)
    return c.data.mean(axis=0, dtype=np.float64).astype(np.float32)


# --------------------------------------------------------------------------
# scenario-level assembly


def build_cost_volume(inputs: dict, templates: dict, pairings, pooling_mode="min") -> CostVolume:
    """Assemble a cost volume from per-modality inputs and template sets.

    ``inputs`` maps modality -> FeatureStack, ``templates`` maps modality ->
    TemplateSet, ``pairings`` lists ``(input modality, template modality)``.
    """
    volumes = [cross_modal_volume(inputs[src], templates[dst], (src, dst)) for src, dst in pairings]
    return reshape_volume(to_cost(concat_modalities(volumes)), pooling_mode)


def build_text_cost_volume(image: FeatureStack, normal: TemplateSet, abnormal: TemplateSet, prompts="joint"):
    """Cost volume against normal/abnormal prompt embeddings.

    ``prompts`` selects ``joint``, ``normal`` or ``abnormal``; a single prompt
    type is duplicated along the matching axis to keep the channel count.
    """
    if normal.provenance != Provenance.text_prompts or abnormal.provenance != Provenance.text_prompts:
        raise ValidationError("prompt templates must carry text_prompts provenance")
    v_abn = cross_modal_volume(image, abnormal, ("rgb", "text_abnormal"))
    v_nor = cross_modal_volume(image, normal, ("rgb", "text_normal"))
    if prompts == "normal":
        v_abn = SimilarityVolume(1.0 - v_nor.data, ("rgb", "text_abnormal"), v_nor.spatial)
    elif prompts == "abnormal":
        v_nor = SimilarityVolume(1.0 - v_abn.data, ("rgb", "text_normal"), v_abn.spatial)
    elif prompts != "joint":
        raise ValidationError(f"prompts must be joint, normal or abnormal; got {prompts!r}")
    return reshape_volume(to_cost(text_volume(v_abn, v_nor)), "avg")
