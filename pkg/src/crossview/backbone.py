"""Miniature divided space-time video encoder.

Each frame is cut into non-overlapping patches, linearly projected, and given
a learned spatial position embedding plus a per-frame CLS token. A stack of
pre-norm residual blocks alternates temporal attention (across frames, at a
fixed token index), spatial attention (across the tokens of one frame), and a
GELU MLP. The clip feature is the final LayerNorm of the temporal mean of the
per-frame CLS tokens.

The learned time-embedding table has a fixed pretraining length; clips with a
different frame count reuse it through linear interpolation of the table rows
(exact identity when the counts match, exact at both endpoints otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import LayerNorm, Linear, Module, MultiheadAttention
from .tensor import Tensor, concat, gelu

__all__ = ["BackboneConfig", "SpaceTimeBlock", "VideoEncoder", "interpolate_time_embeddings"]


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry of the encoder. Defaults are the desk-scale values."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 64
    depth: int = 2
    heads: int = 4
    pretrain_frames: int = 8  # rows in the learned time-embedding table
    mlp_ratio: int = 4
    # Weight scale for the frozen random encoder.  The encoder is never
    # trained, so this controls how much input structure survives to the
    # clip feature: tiny weights leave attention near-uniform and the CLS
    # output dominated by a constant, while larger weights sharpen the
    # attention pattern and spread distinct inputs further apart.
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        for field in ("image_size", "patch_size", "channels", "dim", "depth", "heads",
                      "pretrain_frames", "mlp_ratio"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


def interpolate_time_embeddings(table: Tensor, target_frames: int) -> Tensor:
    """Resample the (T0, d) time-embedding table to target_frames rows.

    Row t of the result samples source coordinate t * (T0-1) / (target-1) by
    linear interpolation between the two flanking rows. target == T0 returns
    the table itself (bitwise identity); a single target frame takes row 0.
    """
    if target_frames < 1:
        raise ConfigError(f"target frame count must be >= 1, got {target_frames}")
    t0 = table.shape[0]
    if target_frames == t0:
        return table
    weights = np.zeros((target_frames, t0))
    if t0 == 1:
        weights[:, 0] = 1.0
    elif target_frames == 1:
        weights[0, 0] = 1.0
    else:
        for t in range(target_frames):
            src = (t * (t0 - 1)) / (target_frames - 1)
            lo = min(int(np.floor(src)), t0 - 2)
            w = src - lo
            weights[t, lo] = 1.0 - w
            weights[t, lo + 1] = w
    return Tensor(weights) @ table


class Mlp(Module):
    def __init__(
        self, dim: int, hidden: int, rng: np.random.Generator, std: float = 0.02
    ):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, std=std)
        self.fc2 = Linear(hidden, dim, rng, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SpaceTimeBlock(Module):
    """Pre-norm residual block: temporal attention, spatial attention, MLP.

    Input tokens are (batch, frames, tokens_per_frame, dim). Temporal
    attention runs across the frame axis with the token index held fixed;
    spatial attention runs across the tokens of each frame (the per-frame
    CLS token participates in both, at token index 0).
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
        std: float = 0.02,
    ):
        super().__init__()
        self.ln_t = LayerNorm(dim)
        self.t_attn = MultiheadAttention(dim, heads, rng, std=std)
        self.ln_s = LayerNorm(dim)
        self.s_attn = MultiheadAttention(dim, heads, rng, std=std)
        self.ln_m = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, std=std)

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens.swapaxes(1, 2)  # (B, tokens, frames, dim): attend across frames
        x = x + self.t_attn(self.ln_t(x))
        x = x.swapaxes(1, 2)
        x = x + self.s_attn(self.ln_s(x))  # attend within each frame
        return x + self.mlp(self.ln_m(x))


class VideoEncoder(Module):
    """Clip encoder producing one feature vector per video clip."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config
        self.patch_proj = Linear(c.patch_dim, c.dim, rng, std=c.init_std)
        # position table row 0 belongs to the CLS slot, rows 1.. to patches
        self.pos_spatial = Tensor(
            rng.normal(0.0, c.init_std, size=(c.patches_per_frame + 1, c.dim)),
            requires_grad=True,
        )
        self.cls_token = Tensor(
            rng.normal(0.0, c.init_std, size=(c.dim,)), requires_grad=True
        )
        self.time_embed = Tensor(np.zeros((c.pretrain_frames, c.dim)), requires_grad=True)
        self.blocks = [
            SpaceTimeBlock(c.dim, c.heads, c.mlp_ratio, rng, std=c.init_std)
            for _ in range(c.depth)
        ]
        self.ln_final = LayerNorm(c.dim)

    def patch_embed(self, frames: Tensor) -> Tensor:
        """(B, T, C, H, W) -> patch tokens (B, T, N, dim) with position added."""
        c = self.config
        b, t, ch, h, w = frames.shape
        if (ch, h, w) != (c.channels, c.image_size, c.image_size):
            raise ContractError(
                f"frames {(ch, h, w)} do not match config "
                f"{(c.channels, c.image_size, c.image_size)}"
            )
        p = c.patch_size
        grid = c.image_size // p
        x = frames.reshape(b, t, ch, grid, p, grid, p)
        x = x.transpose(0, 1, 3, 5, 2, 4, 6)  # (B, T, gh, gw, C, p, p)
        x = x.reshape(b, t, grid * grid, c.patch_dim)
        return self.patch_proj(x) + self.pos_spatial[1:]

    def forward(self, frames: Tensor) -> Tensor:
        """Encode a batch of clips (B, T, C, H, W) to features (B, dim)."""
        if frames.ndim != 5:
            raise ContractError(f"expected (B, T, C, H, W) frames, got {frames.shape}")
        b, t = frames.shape[:2]
        tokens = self.patch_embed(frames)
        cls = (self.cls_token + self.pos_spatial[0]).broadcast_to((b, t, 1, self.config.dim))
        tokens = concat([cls, tokens], axis=2)  # (B, T, N+1, dim)
        tte = interpolate_time_embeddings(self.time_embed, t)
        tokens = tokens + tte.reshape(1, t, 1, self.config.dim)
        for block in self.blocks:
            tokens = block(tokens)
        cls_per_frame = tokens[:, :, 0, :]  # (B, T, dim)
        return self.ln_final(cls_per_frame.mean(axis=1))

    def encode_video(self, clip: Tensor) -> Tensor:
        """Single clip (T, C, H, W) -> feature (dim,)."""
        if clip.ndim != 4:
            raise ContractError(f"expected (T, C, H, W) clip, got {clip.shape}")
        return self.forward(clip.reshape(1, *clip.shape))[0]
