"""Multi-token prediction heads.

Head ``h`` reads the backbone's final hidden state at position ``t`` together
with the embedding of token ``t + h`` and predicts token ``t + 1 + h``.
Each head is a small SWA block plus a dense SwiGLU FFN; all heads share the
backbone's unembedding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .attention import Attention, AttentionSpec
from .moe import SwiGLU
from .numerics import DTYPE, NormParams, TensorValue, zero_centered_rmsnorm


@dataclass
class MTPConfig:
    n_heads: int = 1
    offset_weights: Optional[list[float]] = None  # defaults to 0.5**(h-1)
    global_weight: float = 0.3

    def __post_init__(self):
        if not 1 <= self.n_heads <= 3:
            raise ValueError("n_heads must be in 1..3")
        if self.offset_weights is None:
            self.offset_weights = [0.5 ** (h - 1) for h in range(1, self.n_heads + 1)]
        if len(self.offset_weights) < self.n_heads or any(w <= 0 for w in self.offset_weights):
            raise ValueError("need one positive offset weight per head")
        if self.global_weight < 0:
            raise ValueError("global_weight must be >= 0")


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return zero_centered_rmsnorm(x, NormParams(self.gamma, self.eps))


class MTPHead(nn.Module):
    """Parameters of one head (the MTPHeadParams of the design)."""

    def __init__(self, d_model: int, attn_spec: AttentionSpec, ffn_hidden: int):
        super().__init__()
        self.norm_hidden = RMSNorm(d_model)
        self.norm_embed = RMSNorm(d_model)
        self.combine = nn.Parameter(torch.randn(2 * d_model, d_model, dtype=DTYPE) * (2 * d_model) ** -0.5)
        self.attn_norm = RMSNorm(d_model)
        self.attn = Attention(d_model, attn_spec)
        self.ffn_norm = RMSNorm(d_model)
        self.ffn = SwiGLU(d_model, ffn_hidden)
        self.out_norm = RMSNorm(d_model)

    def forward(self, hidden: TensorValue, next_embeds: TensorValue) -> TensorValue:
        z = torch.cat((self.norm_hidden(hidden), self.norm_embed(next_embeds)), dim=-1) @ self.combine
        a, _ = self.attn(self.attn_norm(z))
        z = z + a
        z = z + self.ffn(self.ffn_norm(z))
        return self.out_norm(z)


def supervised_positions(length: int, h: int) -> int:
    return max(length - (1 + h), 0)


def mtp_forward(
    backbone_hidden: TensorValue,
    head: MTPHead,
    h: int,
    tokens: torch.Tensor,
    embedding: TensorValue,
    unembedding: TensorValue,
) -> TensorValue:
    """Logits of shape (B, n - 1 - h, V); row ``t`` scores token ``t + 1 + h``.

    ``embedding`` is (V, D) and ``unembedding`` (D, V), both shared with the
    backbone.  Sequences too short to supervise give an empty time axis.
    """
    if h < 1:
        raise ValueError("MTP offsets start at 1")
    B, n = tokens.shape
    m = supervised_positions(n, h)
    V = unembedding.shape[-1]
    if m == 0:
        return backbone_hidden.new_zeros(B, 0, V)
    next_embeds = embedding[tokens[:, h : h + m]]
    z = head(backbone_hidden[:, :m], next_embeds)
    return z @ unembedding


def mtp_targets(tokens: torch.Tensor, h: int) -> torch.Tensor:
    return tokens[:, 1 + h :]


def masked_cross_entropy(logits: TensorValue, targets: torch.Tensor, mask: Optional[torch.Tensor] = None) -> TensorValue:
    """Mean CE over positions where ``mask`` is True (all when None)."""
    if logits.shape[1] == 0:
        return logits.sum() * 0.0
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    if mask is None:
        return ce.mean()
    m = mask.reshape(-1).to(ce.dtype)
    n = m.sum()
    if n == 0:
        return ce.sum() * 0.0
    return (ce * m).sum() / n


def mtp_loss(
    per_head_logits: Sequence[TensorValue],
    targets: Sequence[torch.Tensor],
    config: MTPConfig,
    masks: Optional[Sequence[Optional[torch.Tensor]]] = None,
) -> TensorValue:
    """``global_weight * sum_h offset_weights[h] * CE_h``."""
    total = None
    for i, (logits, tgt) in enumerate(zip(per_head_logits, targets)):
        mask = masks[i] if masks is not None else None
        term = config.offset_weights[i] * masked_cross_entropy(logits, tgt, mask)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=DTYPE)
    return config.global_weight * total


def clone_heads(head1: MTPHead, H: int) -> list[MTPHead]:
    """Head 1 followed by ``H - 1`` independent parameter copies of it."""
    if H < 2:
        raise ValueError("cloning needs H >= 2")
    return [head1] + [copy.deepcopy(head1) for _ in range(H - 1)]
