"""Toy sparse-MoE transformer: dense-first then MoE blocks over a hybrid
attention layout, MTP heads, the composite pre-training loss and the
training step.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .attention import Attention, AttentionSpec, AttentionTrace, LayerKind, build_layout
from .moe import ExpertHealthReport, MoEConfig, MoELayer, RoutingBatchStats, SwiGLU, routing_confidence, update_bias
from .mtp import MTPConfig, MTPHead, RMSNorm, clone_heads, masked_cross_entropy, mtp_forward, mtp_loss, mtp_targets
from .muon import Muon, MuonState, clip_grads_, param_partition
from .numerics import DTYPE, PrecisionMode


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 9
    layout: str = "S3F1"
    n_dense_first: int = 1
    dense_hidden: int = 256
    head_dim: int = 16
    n_kv_heads: int = 4
    full_q_heads: int = 8
    swa_q_heads: int = 12
    swa_window: int = 16
    rope_theta_full: float = 10_000.0
    rope_theta_swa: float = 10_000.0
    rope_dims_full: int = 8
    rope_dims_swa: int = 16
    gated: bool = True
    qk_norm: bool = True
    attention_sink: bool = False
    context: int = 512
    mtp_ffn_hidden: int = 128
    router_frozen: bool = False
    moe: MoEConfig = field(default_factory=MoEConfig)
    mtp: MTPConfig = field(default_factory=MTPConfig)

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoEConfig(**self.moe)
        if isinstance(self.mtp, dict):
            self.mtp = MTPConfig(**self.mtp)
        if not 0 <= self.n_dense_first <= self.n_layers:
            raise ValueError("n_dense_first must lie in [0, n_layers]")
        build_layout(self.n_layers, self.layout)

    @property
    def ep_loss_coeff(self) -> float:
        return self.moe.ep_loss_coeff

    def layer_kinds(self) -> list[LayerKind]:
        return build_layout(self.n_layers, self.layout)

    def attention_spec(self, kind: LayerKind) -> AttentionSpec:
        if kind is LayerKind.FULL:
            return AttentionSpec(self.full_q_heads, self.n_kv_heads, self.head_dim, None,
                                 self.rope_theta_full, self.rope_dims_full, self.gated, self.qk_norm)
        return AttentionSpec(self.swa_q_heads, self.n_kv_heads, self.head_dim, self.swa_window,
                             self.rope_theta_swa, self.rope_dims_swa, self.gated, self.qk_norm)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Block(nn.Module):
    def __init__(self, config: ModelConfig, kind: LayerKind, moe: bool):
        super().__init__()
        self.kind = kind
        self.attn_norm = RMSNorm(config.d_model)
        self.attn = Attention(config.d_model, config.attention_spec(kind), sink=config.attention_sink)
        self.ffn_norm = RMSNorm(config.d_model)
        self.is_moe = moe
        self.ffn = MoELayer(config.d_model, config.moe) if moe else SwiGLU(config.d_model, config.dense_hidden)

    def forward(self, x, positions=None, return_trace=False):
        a, trace = self.attn(self.attn_norm(x), positions, return_trace)
        x = x + a
        h = self.ffn_norm(x)
        if self.is_moe:
            moe_out = self.ffn(h)
            return x + moe_out.output, trace, moe_out
        return x + self.ffn(h), trace, None


@dataclass
class ModelOutput:
    logits: torch.Tensor
    hidden: torch.Tensor
    mtp_logits: list[torch.Tensor]
    ep_loss: torch.Tensor
    routing: list[RoutingBatchStats]
    health: list[ExpertHealthReport]
    routing_confidence: list[float]
    traces: list[Optional[AttentionTrace]]
    moe_layers: list[int]


class Model(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        D, V = config.d_model, config.vocab_size
        self.embed = nn.Parameter(torch.randn(V, D, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            Block(config, kind, moe=i >= config.n_dense_first) for i, kind in enumerate(config.layer_kinds())
        )
        self.final_norm = RMSNorm(D)
        self.unembed = nn.Parameter(torch.randn(D, V, dtype=DTYPE) * D**-0.5)
        swa = config.attention_spec(LayerKind.SWA)
        swa = dataclasses.replace(swa, gated=config.gated)
        self.mtp_heads = nn.ModuleList([MTPHead(D, swa, config.mtp_ffn_hidden)])
        if config.mtp.n_heads > 1:
            self.mtp_heads = nn.ModuleList(clone_heads(self.mtp_heads[0], config.mtp.n_heads))
        if config.router_frozen:
            self.freeze_router()

    def freeze_router(self):
        for b in self.blocks:
            if b.is_moe:
                b.ffn.expert_embeddings.requires_grad_(False)

    def moe_blocks(self) -> list[MoELayer]:
        return [b.ffn for b in self.blocks if b.is_moe]

    def forward(self, tokens: torch.Tensor, return_traces: bool = False, with_mtp: bool = True) -> ModelOutput:
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.config.vocab_size})")
        B, T = tokens.shape
        positions = torch.arange(T)
        x = self.embed[tokens]
        ep = torch.zeros((), dtype=DTYPE)
        routing, health, conf, traces, moe_idx = [], [], [], [], []
        for i, block in enumerate(self.blocks):
            x, trace, moe_out = block(x, positions, return_traces)
            traces.append(trace)
            if moe_out is not None:
                ep = ep + moe_out.ep_loss
                routing.append(moe_out.stats)
                health.append(moe_out.health)
                conf.append(routing_confidence(moe_out.probs, moe_out.selected))
                moe_idx.append(i)
        hidden = self.final_norm(x)
        logits = hidden @ self.unembed
        mtp_logits = []
        if with_mtp and self.config.mtp.global_weight > 0:
            for h, head in enumerate(self.mtp_heads[: self.config.mtp.n_heads], start=1):
                mtp_logits.append(mtp_forward(hidden, head, h, tokens, self.embed, self.unembed))
        return ModelOutput(logits, hidden, mtp_logits, ep, routing, health, conf, traces, moe_idx)


# ---------------------------------------------------------------------------
# Data and loss
# ---------------------------------------------------------------------------


@dataclass
class SequenceExample:
    payload: list[int]
    meta: list[int] = field(default_factory=list)

    def tokens(self) -> list[int]:
        return list(self.meta) + list(self.payload)

    def loss_mask(self, meta_mask_on: bool) -> list[bool]:
        return [not meta_mask_on] * len(self.meta) + [True] * len(self.payload)


def collate(batch: Sequence[SequenceExample], meta_mask_on: bool, pad: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to a (B, T) token tensor and a (B, T) per-position loss mask."""
    T = max(len(ex.tokens()) for ex in batch)
    tokens = torch.full((len(batch), T), pad, dtype=torch.long)
    mask = torch.zeros(len(batch), T, dtype=torch.bool)
    for i, ex in enumerate(batch):
        toks = ex.tokens()
        tokens[i, : len(toks)] = torch.as_tensor(toks)
        mask[i, : len(toks)] = torch.as_tensor(ex.loss_mask(meta_mask_on))
    return tokens, mask


@dataclass
class LossBreakdown:
    total: torch.Tensor
    lm: torch.Tensor
    mtp: torch.Tensor
    ep: torch.Tensor
    supervised: int
    output: ModelOutput


def pretrain_loss(
    model: Model,
    tokens: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Next-token CE over mask-true targets + MTP loss + ``ep_coeff * sum L_EP``.

    ``mask`` marks positions whose token is a loss target; a meta prefix
    with False entries still conditions the payload (the masked variant).
    """
    if tokens.shape[0] == 0:
        raise ValueError("empty batch")
    if mask is None:
        mask = torch.ones_like(tokens, dtype=torch.bool)
    out = model(tokens)
    target_mask = mask[:, 1:]
    lm = masked_cross_entropy(out.logits[:, :-1], tokens[:, 1:], target_mask)
    cfg = model.config
    if out.mtp_logits:
        targets = [mtp_targets(tokens, h) for h in range(1, len(out.mtp_logits) + 1)]
        masks = [mask[:, 1 + h:] for h in range(1, len(out.mtp_logits) + 1)]
        mtp = mtp_loss(out.mtp_logits, targets, cfg.mtp, masks)
    else:
        mtp = torch.zeros((), dtype=DTYPE)
    ep = out.ep_loss
    total = lm
    if out.mtp_logits:
        total = total + mtp
    if cfg.ep_loss_coeff and out.routing:
        total = total + cfg.ep_loss_coeff * ep
    return LossBreakdown(total, lm, mtp, ep, int(target_mask.sum()), out)


def sequence_loss(model: Model, batch: Sequence[SequenceExample], meta_mask_on: bool) -> LossBreakdown:
    tokens, mask = collate(batch, meta_mask_on)
    return pretrain_loss(model, tokens, mask)


class CorpusSampler:
    """Random fixed-length windows from a byte corpus (deterministic per seed)."""

    def __init__(self, data: bytes, seq_len: int, batch_size: int, seed: int):
        if len(data) <= seq_len:
            raise ValueError(f"corpus of {len(data)} bytes is shorter than seq_len+1={seq_len + 1}")
        self.data = torch.as_tensor(np.frombuffer(data, dtype=np.uint8).astype(np.int64))
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.gen = torch.Generator().manual_seed(seed)

    def next(self) -> torch.Tensor:
        starts = torch.randint(0, len(self.data) - self.seq_len, (self.batch_size,), generator=self.gen)
        return torch.stack([self.data[s : s + self.seq_len] for s in starts.tolist()])


def read_corpus(path: str | Path) -> bytes:
    """UTF-8 text file, byte-tokenized."""
    raw = Path(path).read_bytes()
    raw.decode("utf-8")  # reject non-UTF-8 input early
    return raw


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.02
    fallback_lr: Optional[float] = 3e-3
    weight_decay: float = 0.1
    momentum: float = 0.95
    grad_clip: float = 1.0
    polar_steps: int = 6
    precision: str = "EXACT64"
    polar_schedule: str = "exact"
    warmup_steps: int = 0
    batch_size: int = 8
    seq_len: int = 64
    steps: int = 200
    meta_mask_on: bool = False
    log_every: int = 1


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, message: str, health: Optional[ExpertHealthReport], layer: Optional[int]):
        super().__init__(message)
        self.step = step
        self.health = health
        self.layer = layer


@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    seed: int
    step: int = 0
    muon: Optional[Muon] = None
    fallback: Optional[torch.optim.Optimizer] = None
    emitter: object = None

    def __post_init__(self):
        muon_params, fb_params = param_partition(
            (n, p) for n, p in self.model.named_parameters() if p.requires_grad
        )
        cfg = self.config
        self.muon = Muon(
            list(muon_params.values()),
            MuonState(lr=cfg.lr, beta=cfg.momentum, weight_decay=cfg.weight_decay, steps=cfg.polar_steps,
                      precision=PrecisionMode(cfg.precision), grad_clip_norm=cfg.grad_clip,
                      schedule=cfg.polar_schedule),
        )
        fb_lr = cfg.lr if cfg.fallback_lr is None else cfg.fallback_lr
        self.fallback = torch.optim.AdamW(list(fb_params.values()), lr=fb_lr, weight_decay=cfg.weight_decay)
        self._base_lrs = [g["lr"] for g in self.muon.param_groups], [g["lr"] for g in self.fallback.param_groups]


def init_model(config: ModelConfig, seed: int) -> Model:
    torch.manual_seed(seed)
    return Model(config)


def _lr_factor(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / cfg.warmup_steps)


def train_step(tokens: torch.Tensor, state: TrainState, mask: Optional[torch.Tensor] = None) -> dict[str, float]:
    """Forward, loss, backward, clip, bias update, Muon + fallback steps.

    A non-finite loss raises :class:`NumericalAbort` before any parameter or
    bias changes.
    """
    model, cfg = state.model, state.config
    model.train()
    loss = pretrain_loss(model, tokens, mask)
    out = loss.output
    if not torch.isfinite(loss.total):
        worst = max(range(len(out.health)), key=lambda i: out.health[i].max, default=None)
        raise NumericalAbort(
            state.step, f"non-finite loss at step {state.step}",
            out.health[worst] if worst is not None else None,
            out.moe_layers[worst] if worst is not None else None,
        )
    state.muon.zero_grad(set_to_none=True)
    state.fallback.zero_grad(set_to_none=True)
    loss.total.backward()
    grad_norm = clip_grads_(model.parameters(), cfg.grad_clip)

    frozen = model.config.router_frozen
    for layer, stats in zip(model.moe_blocks(), out.routing):
        rp = layer.router()
        if frozen:
            rp.update_rate = 0.0
        update_bias(stats.f_e, rp)

    factor = _lr_factor(cfg, state.step)
    for g, base in zip(state.muon.param_groups, state._base_lrs[0]):
        g["lr"] = base * factor
    for g, base in zip(state.fallback.param_groups, state._base_lrs[1]):
        g["lr"] = base * factor
    diags = state.muon.step()
    state.fallback.step()

    metrics = {
        "loss": loss.total.item(),
        "lm_loss": loss.lm.item(),
        "mtp_loss": loss.mtp.item(),
        "ep_loss": loss.ep.item(),
        "grad_norm": grad_norm,
    }
    if diags:
        peaks = [max(d.step_max_abs) for d in diags if d.step_max_abs]
        if peaks:
            metrics["polar_max_abs"] = max(peaks)
        metrics["polar_residual_max"] = max(d.residual for d in diags)
    for idx, health, conf in zip(out.moe_layers, out.health, out.routing_confidence):
        metrics.update(health.as_metrics(f"layer{idx}"))
        metrics[f"layer{idx}/routing_confidence"] = conf
    if state.emitter is not None:
        for key, value in metrics.items():
            agg = "max" if key.endswith(("max", "max_to_median", "max_abs")) else "mean"
            state.emitter.emit(key, value, agg, state.step)
        state.emitter.end_iteration(state.step)
    state.step += 1
    return metrics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Model, step: int) -> None:
    """NumPy ``.npz`` archive: ``param/<name>`` float64 arrays (parameters
    and buffers), ``config`` (UTF-8 JSON bytes) and ``step`` (int64)."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["config"] = np.frombuffer(json.dumps(model.config.to_dict()).encode(), dtype=np.uint8)
    arrays["step"] = np.array(step, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Model, int]:
    with np.load(path) as z:
        config = ModelConfig.from_dict(json.loads(bytes(z["config"]).decode()))
        model = Model(config)
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        model.load_state_dict(state)
        step = int(z["step"])
    return model, step


def count_params(model: Model) -> int:
    return sum(p.numel() for p in model.parameters())


def uniform_ce(vocab_size: int) -> float:
    return math.log(vocab_size)
