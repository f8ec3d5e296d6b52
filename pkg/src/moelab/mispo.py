"""RL post-training objectives: dual-level masked policy optimization
(MIS-PO), a GSPO baseline, an unmasked PPO comparison arm, truncation-aware
value bootstrapping, and a synthetic addition environment with emulated
train/inference mismatch.

Ratios are handled in log space throughout.  Per-trajectory quantities live
on :class:`TrajectoryRecord`; losses work on a padded :class:`RolloutBatch`.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .model import Model, ModelConfig
from .moe import MoEConfig
from .mtp import MTPConfig
from .muon import global_grad_norm
from .numerics import DTYPE

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bounds:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise ValueError(f"need 0 < lo <= hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class MISPOBounds:
    token: Bounds = Bounds(0.5, 2.0)
    trajectory: Bounds = Bounds(0.996, 1.001)


@dataclass
class RLConfig:
    gamma: float = 1.0
    lam: float = 1.0
    kl_coeff: float = 1e-3
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gspo_eps: float = 1e-4
    ppo_clip: float = 0.2
    sigma: float = 0.0
    group_size: int = 8
    prompts_per_iter: int = 8
    max_len: int = 4
    truncation_bootstrap: bool = True
    objective: str = "mispo"  # mispo | gspo | ppo
    grad_clip: float = 1.0
    target_outside: Optional[float] = None  # hold the out-of-bounds token fraction here by adapting sigma
    sigma_gain: float = 2.0
    critic_warmup: int = 0  # leading iterations that train only the critic
    critic_epochs: int = 1

    def __post_init__(self):
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.objective not in ("mispo", "gspo", "ppo"):
            raise ValueError(f"unknown objective {self.objective!r}")


# ---------------------------------------------------------------------------
# Scalar building blocks
# ---------------------------------------------------------------------------


def indicator(x, lo: float, hi: float):
    """1 iff ``lo <= x <= hi`` (closed on both ends); tensors map elementwise."""
    if isinstance(x, torch.Tensor):
        return ((x >= lo) & (x <= hi)).to(DTYPE)
    return int(lo <= x <= hi)


def log_indicator(log_x: torch.Tensor, b: Bounds) -> torch.Tensor:
    """:func:`indicator` evaluated from log-ratios."""
    return ((log_x >= math.log(b.lo)) & (log_x <= math.log(b.hi))).to(DTYPE)


def traj_geo_mean(x) -> float:
    """``exp(mean(log x))`` of a positive ratio sequence."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.numel() == 0:
        raise ValueError("empty ratio sequence")
    if torch.any(x <= 0):
        raise ValueError("ratios must be positive")
    return math.exp(torch.log(x).mean().item())


def truncation_reward(R: float, truncated: bool, v_last: float) -> float:
    return v_last if truncated else R


def advantage(r_hat, values):
    """``A_t = R_hat - V_t`` (Monte-Carlo return minus baseline)."""
    return r_hat - values


def gae(rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float) -> torch.Tensor:
    """Generalized advantage estimation for one trajectory; ``values`` has one
    more entry than ``rewards`` (the final state's value, 0 if terminal)."""
    T = rewards.shape[0]
    adv = torch.zeros(T, dtype=DTYPE)
    running = 0.0
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    prompt: tuple[int, ...]
    actions: tuple[int, ...]
    behavior_logp: tuple[float, ...]
    old_logp: tuple[float, ...]
    reward: float
    truncated: bool
    values: tuple[float, ...] = ()  # V(s_0) .. V(s_T), T + 1 entries
    current_logp: tuple[float, ...] = ()

    @property
    def log_ratios(self) -> tuple[float, ...]:
        return tuple(o - b for o, b in zip(self.old_logp, self.behavior_logp))

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(math.exp(r) for r in self.log_ratios)

    @property
    def log_geo_mean(self) -> float:
        lr = self.log_ratios
        return math.fsum(lr) / len(lr) if lr else 0.0

    @property
    def geo_mean(self) -> float:
        return math.exp(self.log_geo_mean)

    @property
    def r_hat(self) -> float:
        if not self.values:
            raise ValueError("values not attached")
        return truncation_reward(self.reward, self.truncated, self.values[-1])

    @property
    def advantages(self) -> tuple[float, ...]:
        rh = self.r_hat
        return tuple(rh - v for v in self.values[: len(self.actions)])

    def with_values(self, values: Sequence[float]) -> "TrajectoryRecord":
        if len(values) != len(self.actions) + 1:
            raise ValueError("need one value per state, including the final state")
        return TrajectoryRecord(self.prompt, self.actions, self.behavior_logp, self.old_logp, self.reward,
                                self.truncated, tuple(float(v) for v in values), self.current_logp)

    def to_json(self) -> str:
        d = dict(prompt=list(self.prompt), actions=list(self.actions), reward=self.reward,
                 truncated=self.truncated, ratios=list(self.ratios), geo_mean=self.geo_mean)
        if self.values:
            d.update(values=list(self.values), r_hat=self.r_hat, advantages=list(self.advantages))
        return json.dumps(d)


@dataclass
class RolloutBatch:
    """Padded tensors for a list of trajectories sharing one prompt length."""

    tokens: torch.Tensor  # (B, P + T) prompt followed by actions, padded
    prompt_len: int
    valid: torch.Tensor  # (B, T) bool
    behavior_logp: torch.Tensor  # (B, T)
    old_logp: torch.Tensor  # (B, T)
    advantages: torch.Tensor  # (B, T)
    r_hat: torch.Tensor  # (B,)
    records: list[TrajectoryRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[TrajectoryRecord], pad: int = 0) -> "RolloutBatch":
        if not records:
            raise ValueError("empty batch")
        P = len(records[0].prompt)
        if any(len(r.prompt) != P for r in records):
            raise ValueError("all prompts in a batch must share one length")
        B, T = len(records), max(len(r.actions) for r in records)
        tokens = torch.full((B, P + T), pad, dtype=torch.long)
        valid = torch.zeros(B, T, dtype=torch.bool)
        blp = torch.zeros(B, T, dtype=DTYPE)
        olp = torch.zeros(B, T, dtype=DTYPE)
        adv = torch.zeros(B, T, dtype=DTYPE)
        r_hat = torch.zeros(B, dtype=DTYPE)
        for i, r in enumerate(records):
            n = len(r.actions)
            tokens[i, :P] = torch.as_tensor(r.prompt)
            tokens[i, P : P + n] = torch.as_tensor(r.actions)
            valid[i, :n] = True
            blp[i, :n] = torch.as_tensor(r.behavior_logp, dtype=DTYPE)
            olp[i, :n] = torch.as_tensor(r.old_logp, dtype=DTYPE)
            if r.values:
                adv[i, :n] = torch.as_tensor(r.advantages, dtype=DTYPE)
                r_hat[i] = r.r_hat
        return cls(tokens, P, valid, blp, olp, adv, r_hat, list(records))

    @property
    def log_token_ratio(self) -> torch.Tensor:
        return (self.old_logp - self.behavior_logp) * self.valid

    @property
    def log_geo_mean(self) -> torch.Tensor:
        n = self.valid.sum(1).clamp(min=1)
        return self.log_token_ratio.sum(1) / n

    def masks(self, bounds: MISPOBounds) -> torch.Tensor:
        """Combined token x trajectory mask, zero on padding."""
        tok = log_indicator(self.log_token_ratio, bounds.token)
        traj = log_indicator(self.log_geo_mean, bounds.trajectory).unsqueeze(1)
        return tok * traj * self.valid


def action_logp(model: Model, tokens: torch.Tensor, prompt_len: int) -> torch.Tensor:
    """(B, T) log-probabilities of the action tokens under ``model``."""
    out = model(tokens, with_mtp=False)
    logits = out.logits[:, prompt_len - 1 : -1]
    return torch.log_softmax(logits, -1).gather(-1, tokens[:, prompt_len:].unsqueeze(-1)).squeeze(-1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, what: str) -> torch.Tensor:
    n = mask.sum()
    if n == 0:
        warnings.warn(f"{what}: zero retained tokens", RuntimeWarning, stacklevel=3)
        return (values * 0.0).sum()
    return (values * mask).sum() / n


def mispo_actor_loss(batch: RolloutBatch, logp: torch.Tensor, bounds: MISPOBounds = MISPOBounds()) -> torch.Tensor:
    """Mean over retained tokens of ``-I(x_t) I(rho(tau)) log pi(a_t|s_t) A_t``.

    Masks and advantages are constants; gradient flows only through ``logp``.
    Masked entries are removed with ``torch.where`` so they contribute exactly
    zero even when ``logp`` is extreme.
    """
    m = batch.masks(bounds)
    terms = torch.where(m > 0, -logp * batch.advantages, torch.zeros_like(logp))
    return _masked_mean(terms, m, "mispo_actor_loss")


def gspo_actor_loss(batch: RolloutBatch, logp: torch.Tensor, eps: float = 1e-4,
                    bounds: MISPOBounds = MISPOBounds()) -> torch.Tensor:
    """Masked clipped surrogate with the trajectory-level geometric-mean
    ratio ``r = exp(mean_t (log pi - log pi_old))``."""
    m = batch.masks(bounds)
    n = batch.valid.sum(1).clamp(min=1)
    log_r = ((logp - batch.old_logp) * batch.valid).sum(1) / n
    r = torch.exp(log_r).unsqueeze(1)
    A = batch.advantages
    surrogate = torch.minimum(r * A, r.clamp(1 - eps, 1 + eps) * A)
    terms = torch.where(m > 0, -surrogate, torch.zeros_like(surrogate))
    return _masked_mean(terms, m, "gspo_actor_loss")


def ppo_actor_loss(batch: RolloutBatch, logp: torch.Tensor, clip: float = 0.2) -> torch.Tensor:
    """Unmasked token-level PPO against the behavior policy:
    ``r_t = pi / pi_behavior`` with standard clipping."""
    r = torch.exp(logp - batch.behavior_logp)
    A = batch.advantages
    surrogate = torch.minimum(r * A, r.clamp(1 - clip, 1 + clip) * A)
    m = batch.valid.to(DTYPE)
    terms = torch.where(m > 0, -surrogate, torch.zeros_like(surrogate))
    return _masked_mean(terms, m, "ppo_actor_loss")


def kl_estimator(logp: torch.Tensor, ref_logp: torch.Tensor) -> torch.Tensor:
    """Per-token ``r - log r - 1`` with ``r = pi_ref / pi``; always >= 0."""
    log_r = ref_logp - logp
    return torch.exp(log_r) - log_r - 1.0


def kl_regularizer(logp: torch.Tensor, ref_logp: torch.Tensor, coeff: float = 1e-3,
                   valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    k = kl_estimator(logp, ref_logp)
    if valid is None:
        return coeff * k.mean()
    return coeff * _masked_mean(k, valid.to(DTYPE), "kl_regularizer")


def critic_loss(values: torch.Tensor, r_hat: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error between ``V(s_t)`` and ``R_hat``."""
    err = (values - r_hat) ** 2
    if valid is None:
        return err.mean()
    return _masked_mean(err, valid.to(DTYPE), "critic_loss")


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


@dataclass
class AdditionEnv:
    """``a + b =`` followed by the decimal digits of the sum and EOS.

    Token ids: digits 0-9, then ``+``, ``=``, EOS, PAD.  The reward is 1 iff
    the emitted digits (before EOS) spell the sum exactly.  An episode ends
    at EOS or after :attr:`horizon` tokens (the longest well-formed answer);
    a rollout budget below the horizon truncates it instead.
    """

    a_max: int = 9
    b_max: int = 9

    PLUS, EQ, EOS, PAD = 10, 11, 12, 13
    VOCAB = 14

    def __post_init__(self):
        if not (0 <= self.a_max <= 9 and 0 <= self.b_max <= 9):
            raise ValueError("operands are single digit tokens; a_max and b_max must lie in [0, 9]")

    def prompts(self) -> list[tuple[int, int]]:
        return [(a, b) for a in range(self.a_max + 1) for b in range(self.b_max + 1)]

    @property
    def horizon(self) -> int:
        return len(str(self.a_max + self.b_max)) + 1

    def encode(self, a: int, b: int) -> tuple[int, ...]:
        return (a, self.PLUS, b, self.EQ)

    def answer(self, a: int, b: int) -> tuple[int, ...]:
        return tuple(int(c) for c in str(a + b)) + (self.EOS,)

    def reward(self, prompt: Sequence[int], actions: Sequence[int]) -> float:
        a, b = prompt[0], prompt[2]
        return float(tuple(actions) == self.answer(a, b))

    def sample(self, n: int, gen: torch.Generator) -> list[tuple[int, ...]]:
        pairs = self.prompts()
        idx = torch.randint(0, len(pairs), (n,), generator=gen).tolist()
        return [self.encode(*pairs[i]) for i in idx]


def policy_config(vocab: int, d_model: int = 32, moe: bool = True) -> ModelConfig:
    """Two-layer policy/critic backbone; the second layer is MoE when ``moe``."""
    return ModelConfig(
        vocab_size=vocab, d_model=d_model, n_layers=2, layout="FFFF", n_dense_first=1 if moe else 2,
        dense_hidden=2 * d_model, head_dim=8, n_kv_heads=2, full_q_heads=4, swa_q_heads=4, swa_window=8,
        rope_dims_full=8, rope_dims_swa=8, context=32, mtp_ffn_hidden=d_model,
        moe=MoEConfig(n_experts=4, top_k=2, n_groups=2, expert_hidden=d_model, shared_hidden=d_model,
                      ep_loss_coeff=0.0),
        mtp=MTPConfig(global_weight=0.0),
    )


class Critic(nn.Module):
    """Backbone plus a scalar value head; ``forward`` returns (B, T) values.

    With ``bounded`` the head is squashed into (0, 1), the range of the
    environment's returns.
    """

    def __init__(self, config: ModelConfig, bounded: bool = True):
        super().__init__()
        self.backbone = Model(config)
        self.value_head = nn.Parameter(torch.zeros(config.d_model, dtype=DTYPE))
        self.value_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.bounded = bounded

    @classmethod
    def from_policy(cls, policy: Model, bounded: bool = True) -> "Critic":
        """Critic whose backbone starts as a copy of ``policy``."""
        critic = cls(policy.config, bounded)
        critic.backbone.load_state_dict(policy.state_dict())
        return critic

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        hidden = self.backbone(tokens, with_mtp=False).hidden
        v = hidden @ self.value_head + self.value_bias
        return torch.sigmoid(v) if self.bounded else v


def state_values(critic: Critic, batch: RolloutBatch) -> torch.Tensor:
    """(B, T + 1) values of states ``s_0 .. s_T`` (state ``s_t`` ends at
    token position ``P - 1 + t``)."""
    v = critic(batch.tokens)
    return v[:, batch.prompt_len - 1 :]


@torch.no_grad()
def rollout(
    policy: Model,
    env: AdditionEnv,
    prompts: Sequence[tuple[int, ...]],
    sigma: float,
    max_len: int | Sequence[int],
    gen: torch.Generator,
) -> list[TrajectoryRecord]:
    """Sample one trajectory per prompt from the behavior policy, i.e. the
    current policy with ``N(0, sigma^2)`` noise added to its logits.

    Both behavior and clean (snapshot) log-probs of the sampled actions are
    recorded.  ``max_len`` may be per prompt; running out of budget before
    the episode ends sets ``truncated``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    B = len(prompts)
    budgets = [max_len] * B if isinstance(max_len, int) else list(max_len)
    if len(budgets) != B or min(budgets) < 1:
        raise ValueError("need one max_len >= 1 per prompt")
    limits = [min(b, env.horizon) for b in budgets]
    was_training = policy.training
    policy.eval()
    tokens = torch.as_tensor(prompts, dtype=torch.long)
    actions = [[] for _ in range(B)]
    blp = [[] for _ in range(B)]
    olp = [[] for _ in range(B)]
    done = [False] * B
    for t in range(max(limits)):
        active = [i for i in range(B) if not done[i] and t < limits[i]]
        if not active:
            break
        logits = policy(tokens, with_mtp=False).logits[:, -1]
        noisy = logits + sigma * torch.randn(logits.shape, generator=gen, dtype=DTYPE) if sigma > 0 else logits
        b_logp = torch.log_softmax(noisy, -1)
        o_logp = torch.log_softmax(logits, -1)
        step = torch.multinomial(b_logp.exp(), 1, generator=gen).squeeze(1)
        for i in active:
            a = int(step[i])
            actions[i].append(a)
            blp[i].append(float(b_logp[i, a]))
            olp[i].append(float(o_logp[i, a]))
            if a == env.EOS:
                done[i] = True
        keep = torch.zeros(B, dtype=torch.bool)
        keep[active] = True
        nxt = torch.where(keep, step, torch.full_like(step, env.PAD))
        tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
    policy.train(was_training)
    out = []
    for i, p in enumerate(prompts):
        finished = bool(actions[i]) and actions[i][-1] == env.EOS
        truncated = not finished and len(actions[i]) < env.horizon
        R = 0.0 if truncated else env.reward(p, actions[i])
        out.append(TrajectoryRecord(tuple(p), tuple(actions[i]), tuple(blp[i]), tuple(olp[i]), R, truncated))
    return out


@torch.no_grad()
def greedy_accuracy(policy: Model, env: AdditionEnv, max_len: int = 4) -> float:
    """Fraction of all prompts answered exactly under greedy decoding."""
    was_training = policy.training
    policy.eval()
    pairs = env.prompts()
    tokens = torch.as_tensor([env.encode(a, b) for a, b in pairs], dtype=torch.long)
    outs = [[] for _ in pairs]
    for _ in range(max_len):
        nxt = policy(tokens, with_mtp=False).logits[:, -1].argmax(-1)
        for i, a in enumerate(nxt.tolist()):
            if not outs[i] or outs[i][-1] != env.EOS:
                outs[i].append(a)
        tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
    policy.train(was_training)
    ok = sum(env.reward(env.encode(a, b), o) for (a, b), o in zip(pairs, outs))
    return ok / len(pairs)


def supervised_warmstart(policy: Model, env: AdditionEnv, steps: int, lr: float, gen: torch.Generator,
                         batch: int = 32) -> float:
    """Teacher-forced cross-entropy on correct answers; returns final loss."""
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    loss = torch.zeros(())
    for _ in range(steps):
        prompts = env.sample(batch, gen)
        answers = [env.answer(p[0], p[2]) for p in prompts]
        T = max(len(a) for a in answers)
        seqs = [list(p) + list(a) + [env.PAD] * (T - len(a)) for p, a in zip(prompts, answers)]
        tokens = torch.as_tensor(seqs, dtype=torch.long)
        mask = torch.zeros(len(seqs), T, dtype=torch.bool)
        for i, a in enumerate(answers):
            mask[i, : len(a)] = True
        logits = policy(tokens, with_mtp=False).logits[:, len(prompts[0]) - 1 : -1]
        ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, len(prompts[0]):].reshape(-1),
                             reduction="none")
        loss = (ce * mask.reshape(-1)).sum() / mask.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class RLIterationStats:
    iteration: int
    sigma: float
    mean_reward: float
    actor_loss: float
    critic_loss: float
    actor_grad_norm: float
    retained_fraction: float
    token_outside_fraction: float
    truncation_rate: float
    routing_confidence: float


class RLTrainer:
    """Actor-critic loop: rollout with mismatch, attach values, one actor
    and one critic update per rollout batch.  ``pi_old`` is the policy
    snapshot taken once per rollout generation."""

    def __init__(self, policy: Model, critic: Critic, env: AdditionEnv, config: RLConfig,
                 bounds: MISPOBounds = MISPOBounds(), seed: int = 0,
                 max_len_sampler: Optional[Callable[[int, torch.Generator], list[int]]] = None):
        self.policy, self.critic, self.env, self.config, self.bounds = policy, critic, env, config, bounds
        self.reference = copy.deepcopy(policy).requires_grad_(False)
        self.actor_opt = torch.optim.Adam(policy.parameters(), lr=config.actor_lr)
        self.critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
        self.gen = torch.Generator().manual_seed(seed)
        self.max_len_sampler = max_len_sampler
        self.iteration = 0
        self.history: list[RLIterationStats] = []

    def collect(self) -> list[TrajectoryRecord]:
        cfg = self.config
        base = self.env.sample(cfg.prompts_per_iter, self.gen)
        prompts = [p for p in base for _ in range(cfg.group_size)]
        limits = self.max_len_sampler(len(prompts), self.gen) if self.max_len_sampler else cfg.max_len
        return rollout(self.policy, self.env, prompts, cfg.sigma, limits, self.gen)

    def attach_values(self, records: list[TrajectoryRecord]) -> list[TrajectoryRecord]:
        batch = RolloutBatch.from_records(records, pad=self.env.PAD)
        with torch.no_grad():
            v = state_values(self.critic, batch)
        out = []
        for i, r in enumerate(records):
            vals = v[i, : len(r.actions) + 1].tolist()
            if not self.config.truncation_bootstrap and r.truncated:
                r = TrajectoryRecord(r.prompt, r.actions, r.behavior_logp, r.old_logp, 0.0, False)
            out.append(r.with_values(vals))
        return out

    def actor_objective(self, batch: RolloutBatch, logp: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if cfg.objective == "mispo":
            loss = mispo_actor_loss(batch, logp, self.bounds)
        elif cfg.objective == "gspo":
            loss = gspo_actor_loss(batch, logp, cfg.gspo_eps, self.bounds)
        else:
            loss = ppo_actor_loss(batch, logp, cfg.ppo_clip)
        if cfg.kl_coeff:
            with torch.no_grad():
                ref = action_logp(self.reference, batch.tokens, batch.prompt_len)
            loss = loss + kl_regularizer(logp, ref, cfg.kl_coeff, batch.valid)
        return loss

    def step(self) -> RLIterationStats:
        cfg = self.config
        raw = self.collect()
        truncation_rate = sum(r.truncated for r in raw) / len(raw)
        records = self.attach_values(raw)
        batch = RolloutBatch.from_records(records, pad=self.env.PAD)

        out = self.policy(batch.tokens, with_mtp=False)
        logits = out.logits[:, batch.prompt_len - 1 : -1]
        logp = torch.log_softmax(logits, -1).gather(-1, batch.tokens[:, batch.prompt_len:].unsqueeze(-1)).squeeze(-1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            actor = self.actor_objective(batch, logp)
        self.actor_opt.zero_grad()
        actor.backward()
        grad_norm = global_grad_norm(p.grad for p in self.policy.parameters())
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.grad_clip)
        if self.iteration >= cfg.critic_warmup:
            self.actor_opt.step()

        for _ in range(cfg.critic_epochs):
            values = state_values(self.critic, batch)[:, :-1]
            closs = critic_loss(values, batch.r_hat.unsqueeze(1).expand_as(values), batch.valid)
            self.critic_opt.zero_grad()
            closs.backward()
            self.critic_opt.step()

        valid = batch.valid.sum().item()
        outside = 1.0 - (log_indicator(batch.log_token_ratio, self.bounds.token) * batch.valid).sum().item() / valid
        stats = RLIterationStats(
            iteration=self.iteration,
            sigma=cfg.sigma,
            mean_reward=sum(r.reward for r in raw) / len(raw),
            actor_loss=float(actor.detach()),
            critic_loss=float(closs.detach()),
            actor_grad_norm=grad_norm,
            retained_fraction=batch.masks(self.bounds).sum().item() / valid,
            token_outside_fraction=outside,
            truncation_rate=truncation_rate,
            routing_confidence=sum(out.routing_confidence) / max(len(out.routing_confidence), 1),
        )
        self.history.append(stats)
        if cfg.target_outside is not None:
            cfg.sigma *= math.exp(cfg.sigma_gain * (cfg.target_outside - outside))
        self.iteration += 1
        return stats


def token_outside_fraction(policy: Model, env: AdditionEnv, sigma: float, n: int, max_len: int,
                           bounds: Bounds, seed: int) -> float:
    """Fraction of sampled tokens whose snapshot/behavior ratio leaves ``bounds``."""
    gen = torch.Generator().manual_seed(seed)
    recs = rollout(policy, env, env.sample(n, gen), sigma, max_len, gen)
    lr = torch.tensor([x for r in recs for x in r.log_ratios], dtype=DTYPE)
    return 1.0 - log_indicator(lr, bounds).mean().item()


def calibrate_sigma(policy: Model, env: AdditionEnv, target: float = 0.1, bounds: Bounds = Bounds(0.5, 2.0),
                    n: int = 512, max_len: int = 4, seed: int = 0, iters: int = 20) -> float:
    """Bisection on ``sigma`` so that about ``target`` of tokens fall outside
    the token bounds (monotone in expectation; a fixed seed makes it stable)."""
    lo, hi = 0.0, 8.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if token_outside_fraction(policy, env, mid, n, max_len, bounds, seed) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
