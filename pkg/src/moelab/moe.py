"""Fine-grained MoE layer.

Routing uses softmax affinities with a selection-only bias (loss-free
balancing), an expert-parallel group balance loss, SwiGLU experts with
optional element-wise activation clipping, offline weight clipping and
per-expert health statistics.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, TensorValue


@dataclass
class RouterParams:
    expert_embeddings: TensorValue  # (E, D)
    bias: torch.Tensor  # (E,), selection only
    update_rate: float = 1e-3

    @property
    def n_experts(self) -> int:
        return self.expert_embeddings.shape[0]


@dataclass
class MoEConfig:
    n_experts: int = 16
    top_k: int = 4
    n_groups: int = 4
    group_map: Optional[list[int]] = None  # expert -> group; contiguous blocks when None
    shared_scale: float = 1.0
    routed_scale: float = 1.0
    act_clip: Optional[float] = 50.0
    ep_loss_coeff: float = 1e-3
    expert_hidden: int = 64
    shared_hidden: int = 64
    bias_update_rate: float = 1e-3

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must be in [1, n_experts={self.n_experts}]")
        if self.shared_scale <= 0 or self.routed_scale < 0:
            raise ValueError("shared_scale must be > 0 and routed_scale >= 0")
        if self.group_map is None:
            if self.n_experts % self.n_groups:
                raise ValueError(f"n_experts={self.n_experts} not divisible into {self.n_groups} groups")
            size = self.n_experts // self.n_groups
            self.group_map = [e // size for e in range(self.n_experts)]
        if len(self.group_map) != self.n_experts:
            raise ValueError("group_map must list one group per expert")
        counts = [self.group_map.count(g) for g in range(self.n_groups)]
        if sum(counts) != self.n_experts or len(set(counts)) != 1:
            raise ValueError(f"groups must be disjoint, equal-sized and covering; sizes {counts}")


@dataclass
class ExpertWeights:
    w_gate: TensorValue  # (H, D)
    w_up: TensorValue  # (H, D)
    w_down: TensorValue  # (D, H)

    def __post_init__(self):
        h = self.w_gate.shape[0]
        if self.w_up.shape[0] != h or self.w_down.shape[1] != h:
            raise ValueError("w_gate, w_up and w_down disagree on the hidden width")

    def tensors(self) -> tuple[TensorValue, TensorValue, TensorValue]:
        return self.w_gate, self.w_up, self.w_down


@dataclass
class RoutingBatchStats:
    T: int
    K: int
    G: int
    p_e: TensorValue  # (E,) differentiable
    f_e: torch.Tensor  # (E,) constant
    p_g: TensorValue  # (G,)
    f_g: torch.Tensor  # (G,)
    selection: torch.Tensor  # (T, E) bool


@dataclass
class ExpertHealthReport:
    output_norms: list[Optional[float]]  # per expert; None when no tokens
    dispatch_counts: list[int]
    median: float
    max: float
    min: float
    max_to_median: float
    min_to_median: float
    dead_experts: list[int] = field(default_factory=list)
    param_norms: list[float] = field(default_factory=list)

    def as_metrics(self, prefix: str) -> dict[str, float]:
        return {
            f"{prefix}/expert_norm_max": self.max,
            f"{prefix}/expert_norm_median": self.median,
            f"{prefix}/expert_norm_min": self.min,
            f"{prefix}/max_to_median": self.max_to_median,
            f"{prefix}/min_to_median": self.min_to_median,
            f"{prefix}/dead_experts": float(len(self.dead_experts)),
        }


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------


def router_probs(x: TensorValue, rp: RouterParams) -> TensorValue:
    """Softmax over expert affinities ``<x, e_i>``; x is (..., D)."""
    if x.shape[-1] != rp.expert_embeddings.shape[-1]:
        raise ValueError(f"token width {x.shape[-1]} != embedding width {rp.expert_embeddings.shape[-1]}")
    return torch.softmax(x @ rp.expert_embeddings.T, dim=-1)


def _top_k_lowest_index(scores: torch.Tensor, k: int) -> torch.Tensor:
    # stable descending sort keeps the lower expert index first among ties
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def build_stats(
    probs: TensorValue, selected: torch.Tensor, group_map: Sequence[int], n_groups: int
) -> RoutingBatchStats:
    T, E = probs.shape
    K = selected.shape[-1]
    sel = torch.zeros(T, E, dtype=torch.bool)
    sel.scatter_(1, selected, True)
    p_e = probs.mean(dim=0)
    f_e = sel.to(DTYPE).sum(dim=0) / (T * K)
    onehot = F.one_hot(torch.as_tensor(list(group_map)), n_groups).to(DTYPE)  # (E, G)
    return RoutingBatchStats(T, K, n_groups, p_e, f_e, p_e @ onehot, f_e @ onehot, sel)


def route(
    probs: TensorValue,
    rp: RouterParams,
    K: int,
    group_map: Optional[Sequence[int]] = None,
    n_groups: int = 1,
) -> tuple[torch.Tensor, TensorValue, RoutingBatchStats]:
    """Top-K of ``probs + bias`` (ties -> lowest index); combine weights are
    the unbiased probabilities of the selected experts, renormalized.

    ``probs`` is (T, E).  Returns indices (T, K), weights (T, K) and stats.
    """
    E = probs.shape[-1]
    if K > E:
        raise ValueError(f"K={K} > E={E}")
    if group_map is None:
        group_map = [0] * E
        n_groups = 1
    selected = _top_k_lowest_index(probs.detach() + rp.bias, K)
    chosen = probs.gather(-1, selected)
    weights = chosen / chosen.sum(dim=-1, keepdim=True)
    return selected, weights, build_stats(probs, selected, group_map, n_groups)


def update_bias(f_e: torch.Tensor, rp: RouterParams) -> torch.Tensor:
    """``b_e += u * sign(mean(f) - f_e)``; overloaded experts lose bias."""
    with torch.no_grad():
        rp.bias += rp.update_rate * torch.sign(f_e.mean() - f_e)
    return rp.bias


def ep_group_balance_loss(stats: RoutingBatchStats) -> TensorValue:
    """``G * sum_g f_g p_g`` with f treated as a constant of the selection."""
    return stats.G * (stats.f_g.detach() * stats.p_g).sum()


def routing_confidence(probs: torch.Tensor, selected: torch.Tensor) -> float:
    """Mean over tokens of the probability mass on the activated experts."""
    return probs.detach().gather(-1, selected).sum(dim=-1).mean().item()


# ---------------------------------------------------------------------------
# Experts
# ---------------------------------------------------------------------------


def swiglu_hidden(x: TensorValue, w: ExpertWeights, act_clip: Optional[float] = None) -> TensorValue:
    h = F.silu(x @ w.w_gate.T) * (x @ w.w_up.T)
    if act_clip is not None:
        h = h.clamp(-act_clip, act_clip)
    return h


def swiglu_forward(x: TensorValue, w: ExpertWeights, act_clip: Optional[float] = None) -> TensorValue:
    """``W_down (SiLU(W_gate x) * W_up x)``, the hidden clamped to
    ``[-act_clip, act_clip]`` when a clip is given."""
    return swiglu_hidden(x, w, act_clip) @ w.w_down.T


def weight_clip(W: torch.Tensor, calibration_inputs: torch.Tensor, tau: float) -> torch.Tensor:
    """Rescale ``W`` so that ``max_x ||W x||`` over the calibration rows does
    not exceed ``tau``.  ``W`` is (out, in), inputs are (N, in)."""
    if calibration_inputs.numel() == 0:
        raise ValueError("calibration set is empty")
    if not torch.any(calibration_inputs != 0):
        raise ValueError("calibration inputs are all zero; the activation bound is undefined")
    with torch.no_grad():
        peak = torch.linalg.vector_norm(calibration_inputs @ W.T, dim=-1).max().item()
        if peak <= tau:
            return W.clone()
        return W * (tau / peak)


def expert_health(
    per_expert_outputs: Sequence[Optional[torch.Tensor]],
    expert_params: Sequence[ExpertWeights] = (),
    total_tokens: Optional[int] = None,
    top_k: int = 1,
) -> ExpertHealthReport:
    """Dispersion of per-expert output norms (mean RMS over dispatched tokens).

    Experts that received no tokens are excluded from the ratios and listed
    as dead, as are experts whose dispatch fraction falls under ``1/(10E)``.
    """
    E = len(per_expert_outputs)
    norms: list[Optional[float]] = []
    counts: list[int] = []
    for out in per_expert_outputs:
        if out is None or out.shape[0] == 0:
            norms.append(None)
            counts.append(0)
            continue
        rms = out.detach().pow(2).mean(dim=-1).sqrt()
        norms.append(rms.mean().item())
        counts.append(out.shape[0])
    live = [n for n in norms if n is not None]
    if not live:
        raise ValueError("no expert received any token")
    med = statistics.median(live)
    hi, lo = max(live), min(live)
    denom = total_tokens * top_k if total_tokens else sum(counts)
    dead = [e for e in range(E) if counts[e] == 0 or counts[e] / denom < 1.0 / (10 * E)]
    param_norms = [
        math.sqrt(sum(t.detach().pow(2).sum().item() for t in w.tensors())) for w in expert_params
    ]
    return ExpertHealthReport(
        output_norms=norms,
        dispatch_counts=counts,
        median=med,
        max=hi,
        min=lo,
        max_to_median=hi / med if med > 0 else math.inf,
        min_to_median=lo / med if med > 0 else 0.0,
        dead_experts=dead,
        param_norms=param_norms,
    )


@dataclass
class MoEOutput:
    output: TensorValue
    ep_loss: TensorValue
    stats: RoutingBatchStats
    health: ExpertHealthReport
    probs: TensorValue
    selected: torch.Tensor
    weights: TensorValue


def moe_layer_forward(
    x: TensorValue,
    config: MoEConfig,
    router: RouterParams,
    experts: Sequence[ExpertWeights],
    shared_expert: Optional[ExpertWeights],
) -> MoEOutput:
    """``shared_scale * shared(x) + routed_scale * sum_{e in S_t} w_e expert_e(x)``.

    ``x`` is (T, D) or (B, T, D); statistics are computed over all tokens.
    """
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    T = flat.shape[0]
    if T == 0:
        raise ValueError("empty token batch")
    probs = router_probs(flat, router)
    selected, weights, stats = route(probs, router, config.top_k, config.group_map, config.n_groups)

    routed = torch.zeros_like(flat)
    per_expert: list[Optional[torch.Tensor]] = []
    for e, w in enumerate(experts):
        rows, slot = torch.nonzero(selected == e, as_tuple=True)
        if rows.numel() == 0:
            per_expert.append(None)
            continue
        y = swiglu_forward(flat[rows], w, config.act_clip)
        per_expert.append(y)
        routed = routed.index_add(0, rows, weights[rows, slot].unsqueeze(-1) * y)

    out = config.routed_scale * routed
    if shared_expert is not None:
        out = out + config.shared_scale * swiglu_forward(flat, shared_expert, config.act_clip)
    health = expert_health(per_expert, experts, total_tokens=T, top_k=config.top_k)
    return MoEOutput(
        out.reshape(*lead, -1), ep_group_balance_loss(stats), stats, health, probs, selected, weights
    )


def _init_expert(d_model: int, hidden: int, gen: Optional[torch.Generator] = None) -> list[nn.Parameter]:
    def mat(rows, cols, fan_in):
        return nn.Parameter(torch.randn(rows, cols, dtype=DTYPE, generator=gen) * fan_in**-0.5)

    return [mat(hidden, d_model, d_model), mat(hidden, d_model, d_model), mat(d_model, hidden, hidden)]


class SwiGLU(nn.Module):
    def __init__(self, d_model: int, hidden: int, act_clip: Optional[float] = None):
        super().__init__()
        self.w_gate, self.w_up, self.w_down = _init_expert(d_model, hidden)
        self.act_clip = act_clip

    def weights(self) -> ExpertWeights:
        return ExpertWeights(self.w_gate, self.w_up, self.w_down)

    def forward(self, x):
        return swiglu_forward(x, self.weights(), self.act_clip)


class MoELayer(nn.Module):
    """Routed experts plus one shared expert."""

    def __init__(self, d_model: int, config: MoEConfig):
        super().__init__()
        self.config = config
        self.experts = nn.ModuleList(
            SwiGLU(d_model, config.expert_hidden) for _ in range(config.n_experts)
        )
        self.shared = SwiGLU(d_model, config.shared_hidden)
        self.expert_embeddings = nn.Parameter(
            torch.randn(config.n_experts, d_model, dtype=DTYPE) * d_model**-0.5
        )
        self.register_buffer("bias", torch.zeros(config.n_experts, dtype=DTYPE))

    def router(self) -> RouterParams:
        return RouterParams(self.expert_embeddings, self.bias, self.config.bias_update_rate)

    def forward(self, x: TensorValue) -> MoEOutput:
        return moe_layer_forward(
            x, self.config, self.router(), [m.weights() for m in self.experts], self.shared.weights()
        )
