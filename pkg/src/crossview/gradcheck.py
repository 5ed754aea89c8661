"""Finite-difference gradient verification.

The checker is an independent oracle: it never uses the tape, only repeated
forward evaluations under central differences (f(x+e) - f(x-e)) / 2e.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ContractError
from .nn import Linear, Module, MultiheadAttention
from .tensor import Tensor, no_grad

__all__ = ["grad_check", "gradcheck_suite"]


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float | tuple[float, ...] = (1e-5, 1e-3),
) -> float:
    """Compare tape adjoints of a scalar function against central differences.

    Returns the maximum relative error over every element of every parameter,
    with relative error |a - n| / max(|a|, |n|, 1e-8). Each element is scored
    at the best of the given step sizes: the central difference carries a
    roundoff noise floor of roughly |f| * ulp / eps, so an element whose true
    derivative sits near that floor needs a large step, while a large step
    inflates truncation error where curvature is high. A wrong adjoint
    disagrees at every step size; estimator noise does not. The function is
    evaluated twice up front; if the two values differ bitwise the function is
    not deterministic and the check is meaningless, so that is a hard error.
    """
    steps = (float(eps),) if isinstance(eps, (int, float)) else tuple(eps)
    params = list(params)
    with no_grad():
        f0 = fn().item()
        f1 = fn().item()
    if f0 != f1:
        raise ContractError("grad_check target is non-deterministic between calls")

    for _, p in params:
        p.grad = None
    loss = fn()
    if loss.shape != ():
        raise ContractError(f"grad_check target must be scalar, got shape {loss.shape}")
    loss.backward()

    worst = 0.0
    for _, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            best = np.inf
            for step in steps:
                flat[i] = orig + step
                with no_grad():
                    f_plus = fn().item()
                flat[i] = orig - step
                with no_grad():
                    f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
                best = min(best, abs(a_flat[i] - numeric) / denom)
            worst = max(worst, best)
    return worst


def _trainable(module: Module) -> list[tuple[str, Tensor]]:
    """Parameters the tape actually tracks; frozen tensors have no adjoint,
    so comparing them against finite differences would always 'fail'."""
    return [(n, p) for n, p in module.named_parameters() if p.requires_grad]


def _jitter(module: Module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Nudge every parameter off its initial value.

    Fresh modules sit at special points -- LayerNorm scales at exactly 1,
    gates and low-rank up-projections at exactly 0 -- where entire gradient
    paths vanish identically and a check would pass vacuously.
    """
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)


def gradcheck_suite(
    seed: int, eps: float | tuple[float, ...] = (1e-5, 1e-3)
) -> dict[str, float]:
    """Finite-difference audit of every differentiable building block.

    Each stage builds a small randomized instance and reads the output out
    through a fixed random weighting so every output element contributes to
    the scalar under test. Returns the worst relative error per stage.
    """
    from .backbone import SpaceTimeBlock
    from .fusion import CrossViewFusion
    from .lora import LoraLinear
    from .training import cross_entropy

    rng = np.random.default_rng(seed)
    errs: dict[str, float] = {}

    def check(name: str, fn: Callable[[], Tensor], params) -> None:
        errs[name] = grad_check(fn, params, eps)

    layer = Linear(3, 2, rng, std=0.5)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    r = Tensor(rng.standard_normal((2, 2)))
    check("linear", lambda: (layer(x) * r).sum(), [("x", x), *_trainable(layer)])

    attn = MultiheadAttention(4, 2, rng)
    _jitter(attn, rng)
    xa = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    ra = Tensor(rng.standard_normal((1, 3, 4)))
    check("attention", lambda: (attn(xa) * ra).sum(), [("x", xa), *_trainable(attn)])

    block = SpaceTimeBlock(4, heads=2, mlp_ratio=2, rng=rng)
    _jitter(block, rng)
    tokens = Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
    rb = Tensor(rng.standard_normal((1, 2, 3, 4)))
    check(
        "space_time_block",
        lambda: (block(tokens) * rb).sum(),
        [("tokens", tokens), *_trainable(block)],
    )

    wrapped = LoraLinear(Linear(4, 4, rng, std=0.3), rank=2, alpha=4.0, rng=rng)
    _jitter(wrapped, rng)  # move the up-projection off its all-zero start
    xl = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    rl = Tensor(rng.standard_normal((2, 4)))
    check(
        "lora_linear",
        lambda: (wrapped(xl) * rl).sum(),
        [("x", xl), *_trainable(wrapped)],
    )

    fusion = CrossViewFusion(6, hidden=8, out_dim=4, heads=2, dropout=0.0, rng=rng)
    fusion.eval()
    _jitter(fusion, rng)
    views = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    rf = Tensor(rng.standard_normal((2, 4)))
    check(
        "fusion",
        lambda: (fusion(views) * rf).sum(),
        [("views", views), *_trainable(fusion)],
    )

    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    labels = np.array([0, 2, 1])
    check("cross_entropy", lambda: cross_entropy(logits, labels), [("logits", logits)])

    return errs
