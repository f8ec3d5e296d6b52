"""Hybrid attention: layer layouts, sliding-window masks, partial RoPE,
grouped-query attention with a full trace, and head-wise output gates.

Head tensors are laid out ``(batch, heads, time, head_dim)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .numerics import DTYPE, TensorValue, rms_normalize


class LayerKind(str, enum.Enum):
    FULL = "FULL"
    SWA = "SWA"


_MOTIFS = {
    "S3F1": (LayerKind.SWA, LayerKind.SWA, LayerKind.SWA, LayerKind.FULL),
    "S1F1": (LayerKind.SWA, LayerKind.FULL),
    "FFFF": (LayerKind.FULL,),
}


def build_layout(n_layers: int, pattern: str) -> list[LayerKind]:
    """A leading FULL layer followed by repeats of the pattern's motif."""
    if pattern not in _MOTIFS:
        raise ValueError(f"unknown layout pattern {pattern!r}; expected one of {sorted(_MOTIFS)}")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    motif = _MOTIFS[pattern]
    if (n_layers - 1) % len(motif):
        raise ValueError(
            f"pattern {pattern} needs n_layers = 1 + {len(motif)}*k, got {n_layers} "
            f"({n_layers - 1} layers after the leading FULL layer do not divide into "
            f"motifs of length {len(motif)})"
        )
    return [LayerKind.FULL] + list(motif) * ((n_layers - 1) // len(motif))


def causal_mask(seq_len: int) -> torch.Tensor:
    return torch.ones(seq_len, seq_len, dtype=torch.bool).tril()


def swa_mask(seq_len: int, window: int) -> torch.Tensor:
    """Boolean (T, T) mask; entry (i, j) is True iff ``i - window < j <= i``."""
    if seq_len < 1 or window < 1:
        raise ValueError("seq_len and window must be >= 1")
    i = torch.arange(seq_len).unsqueeze(1)
    j = torch.arange(seq_len).unsqueeze(0)
    return (j <= i) & (j > i - window)


@dataclass
class AttentionSpec:
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    window: Optional[int] = None
    rope_theta: float = 10_000.0
    rope_dims: Optional[int] = None  # None -> head_dim
    gated: bool = True
    qk_norm: bool = True

    def __post_init__(self):
        if self.rope_dims is None:
            self.rope_dims = self.head_dim
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.rope_dims % 2 or self.rope_dims > self.head_dim:
            raise ValueError(f"rope_dims={self.rope_dims} must be even and <= head_dim={self.head_dim}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def mask(self, seq_len: int) -> torch.Tensor:
        if self.window is None:
            return causal_mask(seq_len)
        return swa_mask(seq_len, self.window)


def apply_rope(
    vectors: TensorValue, positions: torch.Tensor, theta: float, rope_dims: int
) -> TensorValue:
    """Rotate adjacent pairs (2m, 2m+1) of the first ``rope_dims`` dimensions
    by ``pos * theta**(-2m / rope_dims)``; the rest pass through.

    ``vectors`` is ``(..., T, head_dim)`` and ``positions`` has length T.
    """
    if rope_dims % 2 or rope_dims > vectors.shape[-1]:
        raise ValueError(f"rope_dims={rope_dims} must be even and <= {vectors.shape[-1]}")
    if rope_dims == 0:
        return vectors
    m = torch.arange(rope_dims // 2, dtype=DTYPE)
    inv_freq = theta ** (-2.0 * m / rope_dims)
    angles = positions.to(DTYPE).unsqueeze(-1) * inv_freq  # (T, r/2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    rot = vectors[..., :rope_dims]
    x1, x2 = rot[..., 0::2], rot[..., 1::2]
    y1 = x1 * cos - x2 * sin
    y2 = x1 * sin + x2 * cos
    rotated = torch.stack((y1, y2), dim=-1).flatten(-2)
    return torch.cat((rotated, vectors[..., rope_dims:]), dim=-1)


@dataclass
class AttentionTrace:
    scores: TensorValue  # s_ij, masked entries -inf
    normalizers: TensorValue  # Z_i = sum_j exp(s_ij) over allowed j
    weights: TensorValue  # alpha_ij
    head_outputs: TensorValue  # y_i before gating
    gates: Optional[TensorValue] = None  # g_i, shape (B, H, T)
    sink_logits: Optional[TensorValue] = None


def gqa_attention(
    q: TensorValue,
    k: TensorValue,
    v: TensorValue,
    mask: torch.Tensor,
    spec: AttentionSpec,
    sink_logits: Optional[TensorValue] = None,
) -> tuple[TensorValue, AttentionTrace]:
    """Masked scaled dot-product attention where each KV head serves
    ``n_q_heads / n_kv_heads`` consecutive query heads.

    ``sink_logits`` (one per query head) adds a learnable, input-independent
    sink to every row's normalizer; it contributes no value.
    """
    B, Hq, T, d = q.shape
    if Hq != spec.n_q_heads or k.shape[1] != spec.n_kv_heads or v.shape[1] != spec.n_kv_heads:
        raise ValueError(
            f"head counts q={Hq}, k={k.shape[1]}, v={v.shape[1]} do not match spec "
            f"({spec.n_q_heads}, {spec.n_kv_heads})"
        )
    if mask.shape != (T, T):
        raise ValueError(f"mask shape {tuple(mask.shape)} != ({T}, {T})")
    k = k.repeat_interleave(spec.group_size, dim=1)
    v = v.repeat_interleave(spec.group_size, dim=1)

    s = q @ k.transpose(-1, -2) / math.sqrt(d)
    s = s.masked_fill(~mask, -math.inf)
    row_max = s.amax(dim=-1, keepdim=True).detach()
    if sink_logits is not None:
        sink = sink_logits.view(1, Hq, 1, 1).expand(B, Hq, T, 1)
        row_max = torch.maximum(row_max, sink.detach())
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    e = torch.exp(s - row_max)  # exp(-inf) = 0 on masked entries
    row_sum = e.sum(dim=-1, keepdim=True)
    denom = row_sum if sink_logits is None else row_sum + torch.exp(sink - row_max)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    alpha = e / safe  # fully masked rows -> all-zero weights, zero output
    y = alpha @ v
    Z = (row_sum * torch.exp(row_max)).squeeze(-1)
    return y, AttentionTrace(s, Z, alpha, y, sink_logits=sink_logits)


def head_gate(y: TensorValue, x: TensorValue, w_gate: TensorValue) -> tuple[TensorValue, TensorValue]:
    """Scale each head's output by ``sigmoid(<w_gate[h], x_t>)``.

    ``y`` is (B, H, T, d), ``x`` the layer input (B, T, D), ``w_gate`` (H, D).
    Returns the gated output and the gates (B, H, T).
    """
    g = torch.sigmoid(torch.einsum("btd,hd->bht", x, w_gate))
    return g.unsqueeze(-1) * y, g


@dataclass
class AttentionParams:
    w_q: TensorValue  # (D, Hq*d)
    w_k: TensorValue  # (D, Hkv*d)
    w_v: TensorValue  # (D, Hkv*d)
    w_o: TensorValue  # (Hq*d, D)
    w_gate: Optional[TensorValue] = None  # (Hq, D)
    sink_logits: Optional[TensorValue] = None  # (Hq,)


def attention_layer_forward(
    x: TensorValue,
    spec: AttentionSpec,
    params: AttentionParams,
    positions: Optional[torch.Tensor] = None,
    return_trace: bool = False,
) -> tuple[TensorValue, Optional[AttentionTrace]]:
    """Project, normalize, rotate, attend, gate and project back.

    Returns the layer's contribution to the residual stream, shape (B, T, D).
    The gate reads the same input ``x`` that the projections see.
    """
    B, T, D = x.shape
    Hq, Hkv, d = spec.n_q_heads, spec.n_kv_heads, spec.head_dim
    for name, w, shape in (
        ("w_q", params.w_q, (D, Hq * d)),
        ("w_k", params.w_k, (D, Hkv * d)),
        ("w_v", params.w_v, (D, Hkv * d)),
        ("w_o", params.w_o, (Hq * d, D)),
    ):
        if tuple(w.shape) != shape:
            raise ValueError(f"{name} has shape {tuple(w.shape)}, expected {shape}")
    if positions is None:
        positions = torch.arange(T)

    q = (x @ params.w_q).view(B, T, Hq, d).transpose(1, 2)
    k = (x @ params.w_k).view(B, T, Hkv, d).transpose(1, 2)
    v = (x @ params.w_v).view(B, T, Hkv, d).transpose(1, 2)
    if spec.qk_norm:
        q, k = rms_normalize(q), rms_normalize(k)
    q = apply_rope(q, positions, spec.rope_theta, spec.rope_dims)
    k = apply_rope(k, positions, spec.rope_theta, spec.rope_dims)

    y, trace = gqa_attention(q, k, v, spec.mask(T), spec, params.sink_logits)
    if spec.gated:
        if params.w_gate is None:
            raise ValueError("spec.gated is set but params.w_gate is missing")
        y, trace.gates = head_gate(y, x, params.w_gate)
    out = y.transpose(1, 2).reshape(B, T, Hq * d) @ params.w_o
    return out, (trace if return_trace else None)


class Attention(nn.Module):
    """Parameter container around :func:`attention_layer_forward`.

    ``sink=True`` adds the learnable per-head sink used as the comparison arm
    to head-wise gating.
    """

    def __init__(self, d_model: int, spec: AttentionSpec, sink: bool = False, init_std: float | None = None):
        super().__init__()
        self.spec = spec
        Hq, Hkv, d = spec.n_q_heads, spec.n_kv_heads, spec.head_dim
        std = init_std if init_std is not None else d_model**-0.5

        def mat(rows, cols, scale=std):
            return nn.Parameter(torch.randn(rows, cols, dtype=DTYPE) * scale)

        self.w_q = mat(d_model, Hq * d)
        self.w_k = mat(d_model, Hkv * d)
        self.w_v = mat(d_model, Hkv * d)
        self.w_o = mat(Hq * d, d_model, (Hq * d) ** -0.5)
        self.head_gate = nn.Parameter(torch.zeros(Hq, d_model, dtype=DTYPE)) if spec.gated else None
        self.sink_logits = nn.Parameter(torch.zeros(Hq, dtype=DTYPE)) if sink else None

    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.head_gate, self.sink_logits)

    def forward(self, x, positions=None, return_trace=False):
        return attention_layer_forward(x, self.spec, self.params(), positions, return_trace)
