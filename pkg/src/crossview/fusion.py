"""Cross-view fusion: attention over per-view clip features.

Pipeline for input features X of shape (batch, views, dim):

  1. one shared LayerNorm standardizes every view's feature vector,
  2. multi-head self-attention mixes information across the view axis
     (queries = keys = values; no view-order embeddings, so the whole block
     is invariant to view permutation),
  3. the attended views are mean-pooled,
  4. a projection to the hidden width, then GELU -> LayerNorm -> Dropout,
  5. a learned sigmoid gate modulates the hidden state elementwise,
  6. a projection to the output width followed by LayerNorm,
  7. the result is re-standardized along features (subtract mean, divide by
     population std) and mapped through learned output statistics
     (scale sigma, shift mu).

There are no residual connections anywhere in this block.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Dropout, LayerNorm, Linear, Module, MultiheadAttention
from .tensor import Tensor, gelu, sigmoid

__all__ = ["CrossViewFusion"]

# Guard for a zero-spread feature row in the final standardization. Kept far
# below the LayerNorm eps so the re-standardized rows have unit variance to
# much better than 1e-6 (a zero-spread row also has a zero numerator, so the
# division stays exact).
_CALIBRATION_EPS = 1e-12


class _ProjNorm(Module):
    """Dense projection followed by LayerNorm (used for both fusion stages)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(in_dim, out_dim, rng)
        self.ln = LayerNorm(out_dim)


class CrossViewFusion(Module):
    def __init__(
        self,
        dim: int,
        hidden: int,
        out_dim: int,
        heads: int = 4,
        dropout: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        if out_dim < 2:
            raise ConfigError(f"output dim must be >= 2 for calibration, got {out_dim}")
        if hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {hidden}")
        self.dim = dim
        self.hidden = hidden
        self.out_dim = out_dim
        self.view_ln = LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, rng)
        self.w1 = _ProjNorm(dim, hidden, rng)
        self.drop = Dropout(dropout)
        self.gate = Linear(hidden, hidden, rng)
        self.w2 = _ProjNorm(hidden, out_dim, rng)
        self.mu_learn = Tensor(np.zeros(out_dim), requires_grad=True)
        self.sigma_learn = Tensor(np.ones(out_dim), requires_grad=True)

    # -- pipeline stages (split out for inspection and tests) ----------------
    def view_attend(self, x_norm: Tensor) -> Tensor:
        """Self-attention across the view axis of (B, V, dim) features."""
        return self.attn(x_norm)

    def aggregate_transform(self, pooled: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden projection: Dropout(LayerNorm(GELU(Linear(pooled))))."""
        return self.drop(self.w1.ln(gelu(self.w1.linear(pooled))), rng)

    def gate_values(self, h_trans: Tensor) -> Tensor:
        return sigmoid(self.gate(h_trans))

    def gate_mix(self, h_trans: Tensor) -> Tensor:
        """Elementwise sigmoid gate applied to the hidden state."""
        return self.gate_values(h_trans) * h_trans

    def calibrate(self, h_gated: Tensor) -> Tensor:
        """Output projection, LayerNorm, feature re-standardization, and the
        learned output statistics."""
        h_norm = self.w2.ln(self.w2.linear(h_gated))
        mu = h_norm.mean(axis=-1, keepdims=True)
        centered = h_norm - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        scaled = centered / (var.sqrt() + _CALIBRATION_EPS)
        return scaled * self.sigma_learn + self.mu_learn

    def forward(self, views: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """(B, V, dim) per-view features -> (B, out_dim) fused feature."""
        if views.ndim != 3 or views.shape[-1] != self.dim:
            raise ContractError(
                f"fusion expects (B, V, {self.dim}) features, got {views.shape}"
            )
        x_norm = self.view_ln(views)
        attended = self.view_attend(x_norm)
        pooled = attended.mean(axis=1)
        h_trans = self.aggregate_transform(pooled, rng)
        return self.calibrate(self.gate_mix(h_trans))
