"""Cross-modal fusion: modality embeddings, mixed-CLS strategies, one fusion block.

Four ways to initialise the mixed CLS token that feeds the classifier:

- ``naive``: a fresh learned vector; both branch CLS tokens are dropped.
- ``average``: the per-dimension mean of the two branch CLS tokens.
- ``weighted``: ``a * cls_video + (1 - a) * cls_skeleton`` with ``a = sigmoid(omega)``
  and a single learned scalar ``omega``.
- ``context``: same combination, but ``a`` is the sigmoid of the mean of a
  block's output over the concatenated non-CLS tokens of both branches.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .encoders import ModelConfig, SkeletonEncoder, TokenSequence, VideoEncoder
from .errors import EmptySequence, ShapeMismatch, WidthMismatch
from .module import Module, param, uniform_init
from .ssm import MambaBlock
from .tensor import (
    Tensor,
    add_bias,
    as_tensor,
    broadcast_leading,
    concat,
    concat_tokens,
    matmul,
    mean,
    reshape,
    scale_rows,
    select,
    sigmoid,
)


class Strategy(str, Enum):
    NAIVE = "naive"
    AVERAGE = "average"
    WEIGHTED = "weighted"
    CONTEXT = "context"


class FusionStrategy(Module):
    """Holds exactly the parameters the chosen strategy needs."""

    def __init__(self, tag: Strategy | str, config: ModelConfig, rng: np.random.Generator, omega: float = 0.0):
        self._tag = Strategy(tag)
        if self._tag is Strategy.NAIVE:
            self.naive_cls = param(rng.normal(0.0, 0.02, size=config.dim))
        elif self._tag is Strategy.WEIGHTED:
            self.omega = param(np.asarray(omega))
        elif self._tag is Strategy.CONTEXT:
            self.context_block = MambaBlock(config.ssm(config.fusion_bidirectional), rng)

    @property
    def tag(self) -> Strategy:
        return self._tag


def compute_context_alpha(t_video: Tensor, t_skel: Tensor, context_block: MambaBlock) -> Tensor:
    """sigmoid of the mean (over tokens and channels) of the block applied to
    the concatenated non-CLS rows. Scalar per sequence."""
    if t_video.shape[-2] == 0 and t_skel.shape[-2] == 0:
        raise EmptySequence("both token sequences are empty")
    joint = concat_tokens(t_video, t_skel)
    out = context_block(joint)
    return sigmoid(mean(out, (-2, -1)))


def _blend(alpha: Tensor, cls_v: Tensor, cls_s: Tensor) -> Tensor:
    if alpha.ndim == 0:
        return alpha * cls_v + (1.0 - alpha) * cls_s
    return scale_rows(cls_v, alpha) + scale_rows(cls_s, 1.0 - alpha)


def mix_cls(strategy: FusionStrategy, cls_v: Tensor, cls_s: Tensor, t_video: Tensor | None = None, t_skel: Tensor | None = None) -> Tensor:
    if cls_v.shape != cls_s.shape:
        raise ShapeMismatch(f"CLS shapes differ: {cls_v.shape} vs {cls_s.shape}")
    tag = strategy.tag
    if tag is Strategy.NAIVE:
        if strategy.naive_cls.shape != cls_v.shape[-1:]:
            raise ShapeMismatch(f"naive CLS width {strategy.naive_cls.shape} vs {cls_v.shape}")
        return broadcast_leading(strategy.naive_cls, cls_v.shape[:-1])
    if tag is Strategy.AVERAGE:
        return (cls_v + cls_s) * 0.5
    if tag is Strategy.WEIGHTED:
        return _blend(sigmoid(strategy.omega), cls_v, cls_s)
    if t_video is None or t_skel is None:
        raise ValueError("context strategy needs the non-CLS token rows")
    return _blend(compute_context_alpha(t_video, t_skel, strategy.context_block), cls_v, cls_s)


class FusionModule(Module):
    """Modality embeddings, the single fusion block, and the linear head."""

    def __init__(self, config: ModelConfig, strategy: FusionStrategy, rng: np.random.Generator, embed_cls: bool = False):
        c = config.dim
        self.modality_embed_video = param(rng.normal(0.0, 0.02, size=c))
        self.modality_embed_skel = param(rng.normal(0.0, 0.02, size=c))
        self.fusion_block = MambaBlock(config.ssm(config.fusion_bidirectional), rng)
        self.head_weight = uniform_init(rng, (c, config.num_classes), c)
        self.head_bias = param(np.zeros(config.num_classes))
        self.strategy = strategy
        self._embed_cls = embed_cls


def fusion_forward(seq_video: TokenSequence, seq_skel: TokenSequence, module: FusionModule, strategy: FusionStrategy | None = None) -> Tensor:
    """Logits ``[..., num_classes]`` from the two branch outputs."""
    strategy = module.strategy if strategy is None else strategy
    if seq_video.width != seq_skel.width:
        raise WidthMismatch(f"video width {seq_video.width} != skeleton width {seq_skel.width}")
    if seq_video.tokens.shape[:-2] != seq_skel.tokens.shape[:-2]:
        raise ShapeMismatch(f"batch dims differ: {seq_video.tokens.shape} vs {seq_skel.tokens.shape}")
    rows_v = add_bias(seq_video.rows, module.modality_embed_video)
    rows_s = add_bias(seq_skel.rows, module.modality_embed_skel)
    cls = mix_cls(strategy, seq_video.cls, seq_skel.cls, rows_v, rows_s)
    if module._embed_cls:
        cls = add_bias(cls, (module.modality_embed_video + module.modality_embed_skel) * 0.5)
    lead, c = cls.shape[:-1], cls.shape[-1]
    seq = concat([reshape(cls, lead + (1, c)), rows_v, rows_s], axis=-2)
    out = module.fusion_block(seq)
    return add_bias(matmul(select(out, -2, 0), module.head_weight), module.head_bias)


# ---------------------------------------------------------------------------
# full models


class CrossModalModel(Module):
    """Video branch + skeleton branch + fusion module."""

    def __init__(self, config: ModelConfig, strategy: Strategy | str = Strategy.AVERAGE, seed: int = 0, embed_cls: bool = False):
        rng = np.random.default_rng(seed)
        self._config = config
        self.video = VideoEncoder(config, rng)
        self.skeleton = SkeletonEncoder(config, rng)
        # strategy params are drawn last so the shared weights do not depend on the strategy
        self.fusion = FusionModule(config, None, rng, embed_cls)
        self.fusion.strategy = FusionStrategy(strategy, config, rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def forward(self, frames, keypoints) -> Tensor:
        return fusion_forward(self.video(as_tensor(frames)), self.skeleton(as_tensor(keypoints)), self.fusion)


class UnimodalModel(Module):
    """One branch with a linear head on its CLS row (the single-modality baseline)."""

    def __init__(self, config: ModelConfig, modality: str = "video", seed: int = 0):
        rng = np.random.default_rng(seed)
        self._config = config
        self._modality = modality
        if modality == "video":
            self.video = VideoEncoder(config, rng)
        elif modality == "skeleton":
            self.skeleton = SkeletonEncoder(config, rng)
        else:
            raise ValueError(f"unknown modality {modality!r}")
        self.head_weight = uniform_init(rng, (config.dim, config.num_classes), config.dim)
        self.head_bias = param(np.zeros(config.num_classes))

    @property
    def config(self) -> ModelConfig:
        return self._config

    def forward(self, frames, keypoints) -> Tensor:
        if self._modality == "video":
            seq = self.video(as_tensor(frames))
        else:
            seq = self.skeleton(as_tensor(keypoints))
        return add_bias(matmul(seq.cls, self.head_weight), self.head_bias)


def build_model(config: ModelConfig, kind: str = "fused", strategy: str = "average", seed: int = 0) -> Module:
    if kind == "fused":
        return CrossModalModel(config, strategy, seed)
    if kind in ("video", "skeleton"):
        return UnimodalModel(config, kind, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def count_parameters(*modules: Module) -> int:
    """Exact number of trainable scalars across ``modules``."""
    return sum(m.num_parameters() for m in modules)


def closed_form_parameter_count(config: ModelConfig, strategy: Strategy | str) -> int:
    """Parameter count of ``CrossModalModel(config, strategy)`` without building it."""
    c, k = config.dim, config.num_classes
    block = config.ssm().num_parameters()
    video = (config.patch_size**2 * 3) * c + c + c + (config.video_tokens + 1) * c + config.depth * block
    skel = config.skeleton_features * c + c + c + (config.skeleton_tokens + 1) * c + config.depth * block
    fusion = 2 * c + config.ssm(config.fusion_bidirectional).num_parameters() + c * k + k
    extra = {
        Strategy.NAIVE: c,
        Strategy.AVERAGE: 0,
        Strategy.WEIGHTED: 1,
        Strategy.CONTEXT: config.ssm(config.fusion_bidirectional).num_parameters(),
    }[Strategy(strategy)]
    return video + skel + fusion + extra
