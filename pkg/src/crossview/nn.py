"""Small neural-net layer toolkit over the autodiff tensor.

Modules discover their parameters by attribute introspection (insertion
order), which also fixes the dotted names used in checkpoints, e.g.
``blocks.0.t_attn.qkv.weight``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor, layer_norm, softmax

__all__ = ["Module", "Linear", "LayerNorm", "Dropout", "MultiheadAttention"]


class Module:
    def __init__(self):
        self.training = True

    # -- parameter / submodule discovery ------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_") or attr == "training":
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- serialization ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise DataError(
                f"parameter name mismatch: missing={missing[:5]} unexpected={extra[:5]}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DataError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}"
                )
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map ``y = x @ W.T + b`` with weight shape (out, in)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        std: float = 0.02,
        trainable: bool = True,
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            rng.normal(0.0, std, size=(out_features, in_features)), requires_grad=trainable
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=trainable)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ContractError(
                f"Linear expected last dim {self.in_features}, got {x.shape}"
            )
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_features) if x.ndim != 2 else x
        out = flat @ self.weight.T + self.bias
        if x.ndim != 2:
            out = out.reshape(*lead, self.out_features)
        return out


class LayerNorm(Module):
    """Per-last-axis standardization with learned scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5, trainable: bool = True):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=trainable)
        self.beta = Tensor(np.zeros(dim), requires_grad=trainable)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout: scales kept activations by 1/(1-p) during training,
    exact identity in eval mode (and hence in every gradient check)."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if rng is None:
            raise ContractError("Dropout in training mode needs an explicit generator")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask


class MultiheadAttention(Module):
    """Self-attention over the second-to-last axis of ``x`` (any leading dims).

    Queries, keys and values all come from ``x`` via one fused projection;
    with a single position the softmax weight is exactly 1, so the output
    collapses to the value path followed by the output projection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng, std=std)
        self.proj = Linear(dim, dim, rng, std=std)

    def forward(self, x: Tensor) -> Tensor:
        *lead, length, dim = x.shape
        if dim != self.dim:
            raise ContractError(f"attention expected dim {self.dim}, got {dim}")
        qkv = self.qkv(x)
        q = qkv[..., : self.dim]
        k = qkv[..., self.dim : 2 * self.dim]
        v = qkv[..., 2 * self.dim :]

        def split_heads(t: Tensor) -> Tensor:
            t = t.reshape(*lead, length, self.heads, self.head_dim)
            return t.swapaxes(-3, -2)  # (..., heads, length, head_dim)

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        scores = (q @ k.swapaxes(-1, -2)) * (self.head_dim**-0.5)
        attn = softmax(scores)
        ctx = attn @ v
        ctx = ctx.swapaxes(-3, -2).reshape(*lead, length, self.dim)
        return self.proj(ctx)
