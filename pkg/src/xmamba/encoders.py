"""Video and hand-skeleton branches: token embedding, CLS insertion, block stacks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ShapeMismatch
from .module import Module, param, uniform_init
from .ssm import MambaBlock, SsmBlockConfig
from .tensor import (
    Tensor,
    add_bias,
    broadcast_leading,
    concat,
    matmul,
    narrow,
    reshape,
    select,
    transpose,
)

JOINTS_PER_HAND = 21
# parent joint of each of the 21 hand joints (wrist = 0, four joints per finger)
HAND_PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "toy"
    depth: int = 4
    dim: int = 64
    frames: int = 8
    height: int = 32
    width: int = 32
    patch_size: int = 8
    skeleton_features: int = 2 * JOINTS_PER_HAND * 3
    num_classes: int = 4
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    bidirectional: bool = True
    fusion_bidirectional: bool = True
    cls_position: str = "front"

    def __post_init__(self):
        if self.frames < 1 or self.depth < 0 or self.dim < 1 or self.num_classes < 1:
            raise ValueError(f"invalid model config {self}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ShapeMismatch(f"{self.height}x{self.width} frames are not divisible by patch size {self.patch_size}")
        if self.cls_position not in ("front", "middle"):
            raise ValueError(f"cls_position must be 'front' or 'middle', got {self.cls_position!r}")

    @property
    def video_tokens(self) -> int:
        return self.frames * (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def skeleton_tokens(self) -> int:
        return self.frames

    def ssm(self, bidirectional: bool | None = None) -> SsmBlockConfig:
        return SsmBlockConfig(
            d_model=self.dim,
            d_state=self.d_state,
            expand=self.expand,
            d_conv=self.d_conv,
            bidirectional=self.bidirectional if bidirectional is None else bidirectional,
        )

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": ModelConfig("tiny", depth=24, dim=198, height=224, width=224, patch_size=16),
    "small": ModelConfig("small", depth=24, dim=386, height=224, width=224, patch_size=16),
    "toy": ModelConfig("toy", depth=4, dim=64, height=32, width=32, patch_size=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class ClsToken:
    value: Tensor
    origin: str = "learned"


@dataclass
class TokenSequence:
    """Encoder output: ``tokens[..., L + 1, C]`` with the CLS row at ``cls_index``."""

    tokens: Tensor
    cls_index: int
    modality: str

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2] - 1

    @property
    def cls(self) -> Tensor:
        return select(self.tokens, -2, self.cls_index)

    @property
    def rows(self) -> Tensor:
        """Every non-CLS row, in order."""
        i, n = self.cls_index, self.tokens.shape[-2]
        if i == 0:
            return narrow(self.tokens, -2, 1, n)
        if i == n - 1:
            return narrow(self.tokens, -2, 0, i)
        return concat([narrow(self.tokens, -2, 0, i), narrow(self.tokens, -2, i + 1, n)], axis=-2)


# ---------------------------------------------------------------------------
# token embedding


def patchify_video(frames: Tensor, config: ModelConfig, weight: Tensor, bias: Tensor) -> Tensor:
    """Split ``frames[..., T, H, W, 3]`` into p x p patches and project each to C.

    Rows come out frame-major, then raster order within a frame.
    """
    p = config.patch_size
    *lead, t, h, w, ch = frames.shape
    if ch != 3 or h % p or w % p:
        raise ShapeMismatch(f"frames {frames.shape} incompatible with patch size {p}")
    lead = tuple(lead)
    nl = len(lead)
    x = reshape(frames, lead + (t, h // p, p, w // p, p, ch))
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 1, 3, 2, 4, 5))
    x = transpose(x, perm)
    x = reshape(x, lead + (t * (h // p) * (w // p), p * p * ch))
    return add_bias(matmul(x, weight), bias)


def embed_skeleton(keypoints: Tensor, config: ModelConfig, weight: Tensor, bias: Tensor) -> Tensor:
    """One token per frame from the flattened per-frame keypoint vector."""
    if keypoints.ndim < 2 or keypoints.shape[-1] != config.skeleton_features:
        raise ShapeMismatch(f"keypoints {keypoints.shape}: expected [..., T, {config.skeleton_features}]")
    return add_bias(matmul(keypoints, weight), bias)


def normalize_hand_keypoints(raw: np.ndarray) -> np.ndarray:
    """Root-centre each hand on its wrist and divide by its mean bone length.

    ``raw[..., T, hands, 21, 3]`` -> ``[..., T, hands * 63]``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    centred = raw - raw[..., :1, :]
    child = np.arange(1, JOINTS_PER_HAND)
    parent = np.array(HAND_PARENTS[1:])
    bones = np.linalg.norm(raw[..., child, :] - raw[..., parent, :], axis=-1).mean(axis=-1)
    scale = np.where(bones > 0, bones, 1.0)[..., None, None]
    out = centred / scale
    return out.reshape(out.shape[:-3] + (-1,))


# ---------------------------------------------------------------------------
# branch


def cls_slot(config: ModelConfig, num_tokens: int) -> int:
    return 0 if config.cls_position == "front" else num_tokens // 2


def encoder_forward(tokens: Tensor, cls: ClsToken, pos_embed: Tensor, blocks, cls_index: int = 0, modality: str = "video") -> TokenSequence:
    """Insert CLS, add the positional table, then run the block stack."""
    *lead, length, c = tokens.shape
    if cls.value.shape != (c,) or pos_embed.shape != (length + 1, c):
        raise ShapeMismatch(f"tokens {tokens.shape}, cls {cls.value.shape}, pos {pos_embed.shape}")
    cls_row = broadcast_leading(reshape(cls.value, (1, c)), tuple(lead))
    parts = [narrow(tokens, -2, 0, cls_index), cls_row, narrow(tokens, -2, cls_index, length)]
    seq = concat([p for p in parts if p.shape[-2] > 0], axis=-2)
    seq = add_bias(seq, pos_embed)
    for block in blocks:
        seq = block(seq)
    return TokenSequence(seq, cls_index, modality)


class _Branch(Module):
    modality = ""

    def _init_common(self, config: ModelConfig, num_tokens: int, rng: np.random.Generator) -> None:
        self.cls = param(rng.normal(0.0, 0.02, size=config.dim))
        self.pos_embed = param(np.zeros((num_tokens + 1, config.dim)))
        self.blocks = [MambaBlock(config.ssm(), rng) for _ in range(config.depth)]
        self._config = config
        self._cls_index = cls_slot(config, num_tokens)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def encode(self, tokens: Tensor) -> TokenSequence:
        return encoder_forward(tokens, ClsToken(self.cls), self.pos_embed, self.blocks, self._cls_index, self.modality)


class VideoEncoder(_Branch):
    modality = "video"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        fan_in = config.patch_size**2 * 3
        self.patch_weight = uniform_init(rng, (fan_in, config.dim), fan_in)
        self.patch_bias = param(np.zeros(config.dim))
        self._init_common(config, config.video_tokens, rng)

    def forward(self, frames: Tensor) -> TokenSequence:
        return self.encode(patchify_video(frames, self._config, self.patch_weight, self.patch_bias))


class SkeletonEncoder(_Branch):
    modality = "skeleton"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        f = config.skeleton_features
        self.embed_weight = uniform_init(rng, (f, config.dim), f)
        self.embed_bias = param(np.zeros(config.dim))
        self._init_common(config, config.skeleton_tokens, rng)

    def forward(self, keypoints: Tensor) -> TokenSequence:
        return self.encode(embed_skeleton(keypoints, self._config, self.embed_weight, self.embed_bias))
