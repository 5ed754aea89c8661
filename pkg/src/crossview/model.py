"""Multi-view proficiency classifier.

A frozen video encoder turns each camera view's clip into one feature vector;
low-rank adapters on the encoder's dense layers carry the task-specific
updates; an attention block fuses the per-view features into a single vector;
and an affine head maps it to the four proficiency classes.

Presets bundle the published (frames, rank, alpha, fusion width, learning
rate) recipes for the one-view, exocentric-only, and combined camera setups,
plus a small ``desk`` recipe sized for the synthetic benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, VideoEncoder
from .errors import ConfigError, ContractError
from .fusion import CrossViewFusion
from .lora import apply_lora, freeze
from .nn import Linear, Module
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "PRESETS", "preset", "ProficiencyClassifier"]


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one training recipe. Defaults are the desk recipe."""

    views: int = 5
    frames: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    fusion_hidden: int = 128
    fusion_dim: int = 64  # width of the fused multi-view feature
    fusion_heads: int = 4
    # The desk recipe turns dropout off: with a frozen random encoder the
    # class signal is a small modulation on top of a large constant feature
    # component, and multiplicative dropout noise (which scales with the
    # whole activation, constant included) buries that modulation.  The
    # published recipes keep the conventional 0.1.
    dropout: float = 0.0
    # Tuned on the synthetic benchmark: the trainable path sits behind a
    # re-standardizing fusion stage, and adaptive sign-scale steps above
    # ~1e-3 reliably walk it into a basin where per-sample logit variation
    # is suppressed before the head can align with the class signal.
    base_lr: float = 1e-3
    num_classes: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.views < 1:
            raise ConfigError(f"need at least one view, got {self.views}")
        if self.frames < 1:
            raise ConfigError(f"need at least one frame, got {self.frames}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.num_classes}")
        if self.fusion_dim < 2:
            raise ConfigError(f"fused feature width must be >= 2, got {self.fusion_dim}")
        if self.fusion_hidden < 1:
            raise ConfigError(f"fusion hidden width must be >= 1, got {self.fusion_hidden}")
        if self.lora_rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.lora_rank}")
        if self.lora_alpha <= 0:
            raise ConfigError(f"adapter alpha must be positive, got {self.lora_alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.base_lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.base_lr}")


# Published recipes (frames, rank, alpha, fusion hidden, learning rate) per
# camera setup, laid over the desk-scale encoder; plus the desk recipe whose
# learning rate is tuned for the synthetic benchmark.
PRESETS: dict[str, ModelConfig] = {
    "Ego": ModelConfig(
        views=1, frames=32, lora_rank=32, lora_alpha=64.0,
        fusion_hidden=1536, base_lr=5e-5, dropout=0.1,
    ),
    "Exos": ModelConfig(
        views=4, frames=24, lora_rank=48, lora_alpha=96.0,
        fusion_hidden=2048, base_lr=3e-5, dropout=0.1,
    ),
    "EgoExos": ModelConfig(
        views=5, frames=16, lora_rank=64, lora_alpha=128.0,
        fusion_hidden=2560, base_lr=2e-5, dropout=0.1,
    ),
    "desk": ModelConfig(),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None


class ProficiencyClassifier(Module):
    """Frozen encoder + low-rank adapters + view fusion + affine head.

    Parameter names follow the encoder's own namespace at top level
    (``blocks.0.t_attn.qkv.weight``, ``patch_proj.bias``, ...) with the
    fusion block under ``fusion.`` and the head under ``head.``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.encoder = VideoEncoder(config.backbone, rng)
        freeze(self.encoder)
        self.adapted_layers = apply_lora(
            self.encoder, config.lora_rank, config.lora_alpha, rng
        )
        self.fusion = CrossViewFusion(
            config.backbone.dim,
            config.fusion_hidden,
            config.fusion_dim,
            heads=config.fusion_heads,
            dropout=config.dropout,
            rng=rng,
        )
        self.head = Linear(config.fusion_dim, config.num_classes, rng, std=0.01)

    def named_parameters(self, prefix: str = ""):
        # Flatten the encoder namespace so checkpoint names read
        # blocks.0...., fusion...., head.... rather than encoder.blocks....
        yield from self.encoder.named_parameters(prefix)
        yield from self.fusion.named_parameters(f"{prefix}fusion.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def forward(self, clips: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Clips (B, V, T, C, H, W) -> class logits (B, num_classes).

        The frame count may differ from the recipe's (the encoder resamples
        its time embeddings), but the view count is part of the data contract.
        """
        if clips.ndim != 6:
            raise ContractError(f"expected (B, V, T, C, H, W) clips, got {clips.shape}")
        b, v = clips.shape[:2]
        if v != self.config.views:
            raise ContractError(
                f"model built for {self.config.views} views, got {v}"
            )
        flat = clips.reshape(b * v, *clips.shape[2:])
        feats = self.encoder(flat)  # (B*V, dim)
        feats = feats.reshape(b, v, feats.shape[-1])
        fused = self.fusion(feats, rng)  # (B, fusion_dim)
        return self.head(fused)

    def predict(self, clips: Tensor) -> np.ndarray:
        """Class indices (B,), ties resolved to the lowest class index."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                logits = self.forward(clips)
        finally:
            self.train(was_training)
        return np.argmax(logits.data, axis=-1)
