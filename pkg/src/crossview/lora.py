"""Low-rank adaptation of frozen dense layers.

A wrapped layer computes ``y = x W^T + b + (alpha/r) (x A^T) B^T`` with the
base weight and bias frozen and only the rank-r factors A, B trainable. B
starts at zero, so a freshly wrapped layer is bitwise identical to its base.
For inference the update folds into the base weight: W' = W + (alpha/r) B A,
after which the adapter disappears entirely.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .backbone import VideoEncoder
from .errors import ConfigError, ContractError
from .nn import Linear, Module
from .tensor import Tensor

__all__ = ["LoraLinear", "apply_lora", "merge_lora", "freeze", "count_params", "ParamCounts"]


class LoraLinear(Module):
    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        super().__init__()
        if isinstance(base, LoraLinear):
            raise ContractError("layer is already wrapped with low-rank factors")
        max_rank = min(base.in_features, base.out_features)
        if not 1 <= rank <= max_rank:
            raise ConfigError(
                f"rank {rank} outside [1, {max_rank}] for a "
                f"{base.in_features}->{base.out_features} layer"
            )
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = self.alpha / rank
        base.weight.requires_grad = False
        base.bias.requires_grad = False
        self.weight = base.weight
        self.bias = base.bias
        self.lora_A = Tensor(
            rng.normal(0.0, 0.02, size=(rank, base.in_features)), requires_grad=True
        )
        self.lora_B = Tensor(np.zeros((base.out_features, rank)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ContractError(
                f"LoraLinear expected last dim {self.in_features}, got {x.shape}"
            )
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_features) if x.ndim != 2 else x
        out = flat @ self.weight.T + self.bias
        out = out + ((flat @ self.lora_A.T) @ self.lora_B.T) * self.scaling
        if x.ndim != 2:
            out = out.reshape(*lead, self.out_features)
        return out

    def merged(self) -> Linear:
        """Fold the low-rank update into a plain (frozen) dense layer."""
        fused = Linear(self.in_features, self.out_features, np.random.default_rng(0),
                       trainable=False)
        fused.weight.data = self.weight.data + self.scaling * (
            self.lora_B.data @ self.lora_A.data
        )
        fused.bias.data = self.bias.data.copy()
        return fused


def _wrapped_layers(block) -> list[tuple[Module, str]]:
    """The distinct dense layers adapted in one block: both attention qkv
    projections, both attention output projections, and the two MLP layers."""
    return [
        (block.t_attn, "qkv"),
        (block.t_attn, "proj"),
        (block.s_attn, "qkv"),
        (block.s_attn, "proj"),
        (block.mlp, "fc1"),
        (block.mlp, "fc2"),
    ]


def apply_lora(
    encoder: VideoEncoder, rank: int, alpha: float, rng: np.random.Generator
) -> list[str]:
    """Wrap every adapted dense layer of the encoder exactly once.

    Returns the dotted layer names that were wrapped (relative to the
    encoder). The encoder must not already be wrapped.
    """
    wrapped = []
    for i, block in enumerate(encoder.blocks):
        for owner, attr in _wrapped_layers(block):
            layer = getattr(owner, attr)
            setattr(owner, attr, LoraLinear(layer, rank, alpha, rng))
            prefix = "t_attn" if owner is block.t_attn else (
                "s_attn" if owner is block.s_attn else "mlp")
            wrapped.append(f"blocks.{i}.{prefix}.{attr}")
    return wrapped


def merge_lora(root: Module) -> int:
    """Replace every adapted layer under ``root`` with its fused equivalent,
    in place. Returns the number of layers merged."""
    merged = 0
    for module in root.modules():
        for attr, value in list(vars(module).items()):
            if isinstance(value, LoraLinear):
                setattr(module, attr, value.merged())
                merged += 1
    return merged


def merged_copy(root: Module) -> Module:
    """A deep copy of ``root`` with all adapters folded away."""
    clone = copy.deepcopy(root)
    merge_lora(clone)
    return clone


def freeze(module: Module) -> None:
    for p in module.parameters():
        p.requires_grad = False


@dataclass(frozen=True)
class ParamCounts:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total


def count_params(module: Module) -> ParamCounts:
    trainable = frozen = 0
    for _, p in module.named_parameters():
        if p.requires_grad:
            trainable += p.size
        else:
            frozen += p.size
    return ParamCounts(trainable, frozen)
