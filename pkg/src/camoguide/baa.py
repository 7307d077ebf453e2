"""Bidirectional attention alignment between query features and guidance.

One step couples a ``C x H x W`` feature map X with a guidance vector v:

1. attention scores between projected, layer-normed positions and guidance,
   softmax over positions, reshaped into a spatial gate G;
2. guidance-conditioned scaling gamma/beta (tanh-squashed projections);
3. gated feature modulation  X' = X + G * ((1 + gamma) * X + beta);
4. reverse refinement  v' = v + W_o (sum_p alpha_p W_c F_p);
5. residual position-wise FFNs on both branches (two linears + GELU).

The multi-scale policy runs the step three times on the coarsest stage,
then once per remaining stage, threading the refined guidance through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, concat, layer_norm, matmul, randn, softmax, zeros

LN_EPS = 1e-5


class BaaParams:
    """Projections, layer norms, and FFNs for one alignment instance."""

    FIELDS = ("w_x", "w_v", "w_gamma", "w_beta", "w_c", "w_o",
              "ln_f_g", "ln_f_b", "ln_v_g", "ln_v_b",
              "ln_x2_g", "ln_x2_b", "ln_v2_g", "ln_v2_b",
              "ffn_x_w1", "ffn_x_b1", "ffn_x_w2", "ffn_x_b2",
              "ffn_v_w1", "ffn_v_b1", "ffn_v_w2", "ffn_v_b2")

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.channels = c
        s = float(math.sqrt(1.0 / c))
        sh = float(math.sqrt(1.0 / (2 * c)))
        for name in ("w_x", "w_v", "w_gamma", "w_beta", "w_c", "w_o"):
            setattr(self, name, randn(rng, (c, c), scale=s, requires_grad=True))
        for name in ("ln_f", "ln_v", "ln_x2", "ln_v2"):
            setattr(self, name + "_g", Tensor(np.ones(c, dtype=np.float32), requires_grad=True))
            setattr(self, name + "_b", zeros(c, requires_grad=True))
        for branch in ("ffn_x", "ffn_v"):
            setattr(self, branch + "_w1", randn(rng, (c, 2 * c), scale=s, requires_grad=True))
            setattr(self, branch + "_b1", zeros(2 * c, requires_grad=True))
            setattr(self, branch + "_w2", randn(rng, (2 * c, c), scale=sh, requires_grad=True))
            setattr(self, branch + "_b2", zeros(c, requires_grad=True))

    def parameters(self, prefix: str = "baa") -> dict:
        return {f"{prefix}.{name}": getattr(self, name) for name in self.FIELDS}

    def zero_degenerate(self) -> "BaaParams":
        """Zero every projection and FFN output layer (test/identity setting)."""
        for name in ("w_x", "w_v", "w_gamma", "w_beta", "w_c", "w_o",
                     "ffn_x_w1", "ffn_x_w2", "ffn_v_w1", "ffn_v_w2"):
            getattr(self, name).data[...] = 0.0
        for name in ("ffn_x_b1", "ffn_x_b2", "ffn_v_b1", "ffn_v_b2"):
            getattr(self, name).data[...] = 0.0
        return self


@dataclass
class AttentionState:
    scores: Tensor      # HW x 1
    alpha: Tensor       # HW x 1 probability column
    gate: Tensor        # 1 x H x W, reshaped alpha


def _as_row(v: Tensor) -> Tensor:
    return v.reshape(1, -1) if v.ndim == 1 else v


def coupled_attention(f: Tensor, v: Tensor, p: BaaParams,
                      spatial: tuple[int, int]) -> AttentionState:
    """Scores between every position of F (HW x C) and the guidance vector."""
    h, w = spatial
    if f.ndim != 2 or f.shape[0] != h * w or f.shape[1] != p.channels:
        raise ValueError(f"feature shape {f.shape} incompatible with HW={h * w}, C={p.channels}")
    fq = matmul(layer_norm(f, p.ln_f_g, p.ln_f_b, LN_EPS), p.w_x)
    vq = matmul(layer_norm(_as_row(v), p.ln_v_g, p.ln_v_b, LN_EPS), p.w_v)
    scores = matmul(fq, vq.transpose()) * (1.0 / math.sqrt(p.channels))
    alpha = softmax(scores, axis=0)
    return AttentionState(scores=scores, alpha=alpha, gate=alpha.reshape(1, h, w))


def guidance_scaling(v: Tensor, p: BaaParams) -> tuple[Tensor, Tensor]:
    """Per-channel scale and shift, tanh-squashed into (-1, 1)."""
    row = _as_row(v)
    gamma = matmul(row, p.w_gamma).tanh().reshape(-1)
    beta = matmul(row, p.w_beta).tanh().reshape(-1)
    return gamma, beta


def modulate_features(x: Tensor, gate: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """X' = X + G * ((1 + gamma) * X + beta) with broadcast over C / HW."""
    c = x.shape[0]
    if gate.shape != (1,) + x.shape[1:]:
        raise ValueError(f"gate shape {gate.shape} does not match features {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"scaling shapes {gamma.shape}/{beta.shape} != ({c},)")
    gcol = gamma.reshape(c, 1, 1)
    bcol = beta.reshape(c, 1, 1)
    return x + gate * ((gcol + 1.0) * x + bcol)


def refine_guidance(f: Tensor, alpha: Tensor, v: Tensor, p: BaaParams) -> Tensor:
    """Reverse direction: v' = v + W_o (sum_p alpha_p W_c F_p)."""
    ctx = matmul(alpha.transpose(), matmul(f, p.w_c))
    dv = matmul(ctx, p.w_o)
    return (_as_row(v) + dv).reshape(-1)


def _ffn(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return matmul((matmul(z, w1) + b1).gelu(), w2) + b2


def ffn_residual(v: Tensor, x: Tensor, p: BaaParams) -> tuple[Tensor, Tensor]:
    """Residual FFN update on both branches; X handled per position."""
    row = _as_row(v)
    v2 = (row + _ffn(layer_norm(row, p.ln_v2_g, p.ln_v2_b, LN_EPS),
                     p.ffn_v_w1, p.ffn_v_b1, p.ffn_v_w2, p.ffn_v_b2)).reshape(-1)
    c, h, w = x.shape
    rows = x.reshape(c, h * w).transpose()
    rows2 = rows + _ffn(layer_norm(rows, p.ln_x2_g, p.ln_x2_b, LN_EPS),
                        p.ffn_x_w1, p.ffn_x_b1, p.ffn_x_w2, p.ffn_x_b2)
    return v2, rows2.transpose().reshape(c, h, w)


def baa_step(x: Tensor, v: Tensor, p: BaaParams, one_way: bool = False,
             gate_override: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One full alignment step; returns (refined features, refined guidance).

    ``one_way`` skips the reverse direction entirely, leaving v unchanged.
    ``gate_override`` substitutes the attention gate (test hook).
    """
    c, h, w = x.shape
    if v.reshape(-1).shape[0] != c:
        raise ValueError(f"guidance width {v.shape} != channels {c}")
    f = x.reshape(c, h * w).transpose()
    att = coupled_attention(f, v, p, (h, w))
    gate = att.gate if gate_override is None else gate_override
    gamma, beta = guidance_scaling(v, p)
    x1 = modulate_features(x, gate, gamma, beta)
    if one_way:
        rows = x1.reshape(c, h * w).transpose()
        rows2 = rows + _ffn(layer_norm(rows, p.ln_x2_g, p.ln_x2_b, LN_EPS),
                            p.ffn_x_w1, p.ffn_x_b1, p.ffn_x_w2, p.ffn_x_b2)
        return rows2.transpose().reshape(c, h, w), v
    v1 = refine_guidance(f, att.alpha, v, p)
    v2, x2 = ffn_residual(v1, x1, p)
    return x2, v2


def multi_scale_guidance(stages: Sequence[Tensor], v: Tensor,
                         params: Sequence[BaaParams], iters_top: int = 3,
                         one_way: bool = False,
                         on_step: Callable[[int], None] | None = None
                         ) -> tuple[list[Tensor], Tensor]:
    """Apply alignment across the pyramid: iters_top times on stage 4, then
    once per lower stage (4 -> 3 -> 2 -> 1), threading the refined guidance.

    ``stages`` is (x1, x2, x3, x4); ``params`` provides one BaaParams per
    application, coarsest iterations first (length ``iters_top + 3``).
    """
    if len(stages) != 4:
        raise ValueError(f"expected 4 pyramid stages, got {len(stages)}")
    if len(params) != iters_top + 3:
        raise ValueError(f"expected {iters_top + 3} param sets, got {len(params)}")
    x1, x2, x3, x4 = stages
    cur = v
    idx = 0
    for _ in range(iters_top):
        if on_step:
            on_step(4)
        x4, cur = baa_step(x4, cur, params[idx], one_way=one_way)
        idx += 1
    refined = [x4]
    for stage_no, xs in ((3, x3), (2, x2), (1, x1)):
        if on_step:
            on_step(stage_no)
        xs, cur = baa_step(xs, cur, params[idx], one_way=one_way)
        refined.append(xs)
        idx += 1
    refined.reverse()  # back to (x1, x2, x3, x4)
    return refined, cur
