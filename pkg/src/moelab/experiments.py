"""Experiment recipes behind the command-line runner: the adversarial bigram
corpus, the clipping / gating / layout ablations, the two RL studies and the
finite-difference gradient suite.

Every recipe takes a dataclass config and a seed and returns plain data
(lists and dicts) so that callers can write CSV series or assert on them.
"""

from __future__ import annotations

import dataclasses
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch

from .attention import AttentionParams, AttentionSpec, attention_layer_forward
from .mispo import (
    AdditionEnv,
    Bounds,
    Critic,
    MISPOBounds,
    RLConfig,
    RLTrainer,
    RolloutBatch,
    TrajectoryRecord,
    calibrate_sigma,
    critic_loss,
    gspo_actor_loss,
    greedy_accuracy,
    kl_regularizer,
    mispo_actor_loss,
    policy_config,
    ppo_actor_loss,
    supervised_warmstart,
)
from .model import CorpusSampler, Model, ModelConfig, TrainConfig, TrainState, init_model, train_step
from .moe import ExpertWeights, MoEConfig, RouterParams, moe_layer_forward, weight_clip
from .mtp import MTPConfig, mtp_loss
from .numerics import DTYPE, CheckReport, NormParams, grad_check, zero_centered_rmsnorm


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

LOWERCASE = bytes(range(ord("a"), ord("z") + 1))


def make_adversarial_corpus(size: int, bigram: bytes = b"qz", frequency: float = 0.3, seed: int = 0,
                            alphabet: bytes = LOWERCASE) -> bytes:
    """Byte corpus in which copies of ``bigram`` cover ``frequency`` of the
    bytes; the rest is drawn uniformly from ``alphabet``.

    Units are emitted independently: the bigram with probability
    ``f / (2 - f)``, otherwise a single byte, which makes the expected byte
    coverage exactly ``f``.
    """
    if not 0 < frequency <= 1:
        raise ValueError("frequency must lie in (0, 1]")
    if len(bigram) != 2:
        raise ValueError("bigram must be two bytes")
    if size < 0:
        raise ValueError("size must be >= 0")
    rng = random.Random(seed)
    p = frequency / (2 - frequency)
    out = bytearray()
    while len(out) < size:
        if rng.random() < p:
            out += bigram
        else:
            out.append(rng.choice(alphabet))
    return bytes(out[:size])


def bigram_rate(data: bytes, bigram: bytes) -> float:
    """Fraction of bytes covered by non-overlapping left-to-right matches."""
    if not data:
        return 0.0
    return 2 * data.count(bigram) / len(data)


# ---------------------------------------------------------------------------
# Clipping ablation
# ---------------------------------------------------------------------------


def toy_moe_config(**overrides) -> ModelConfig:
    """The small MoE model used by the timed ablations."""
    base = dict(
        d_model=64, n_layers=5, dense_hidden=128, mtp_ffn_hidden=64,
        moe=MoEConfig(n_experts=8, top_k=2, n_groups=2, expert_hidden=32, shared_hidden=32),
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ClipAblationConfig:
    model: ModelConfig = field(default_factory=toy_moe_config)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8, seq_len=32, steps=2000))
    corpus_size: int = 200_000
    bigram: str = "qz"
    frequency: float = 0.3
    tau_act: float = 10.0
    weight_clip_every: int = 200
    weight_clip_quantile: float = 0.5  # tau_w = this quantile of per-expert calibration peaks
    calibration_batches: int = 4
    arms: tuple[str, ...] = ("none", "weight", "activation")

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.arms = tuple(self.arms)
        unknown = set(self.arms) - {"none", "weight", "activation"}
        if unknown:
            raise ValueError(f"unknown clipping arms {sorted(unknown)}")


@dataclass
class ArmResult:
    name: str
    config: dict
    losses: list[float]
    max_to_median: dict[int, list[float]]  # layer -> per-step series
    expert_norm_max: dict[int, list[float]]
    ceiling: dict[int, list[float]] = field(default_factory=dict)
    clip_events: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _moe_inputs(model: Model, tokens: torch.Tensor) -> dict[int, torch.Tensor]:
    """Normalized inputs reaching each MoE layer, flattened to (N, D)."""
    captured: dict[int, torch.Tensor] = {}
    hooks = []
    for i, block in enumerate(model.blocks):
        if block.is_moe:
            hooks.append(block.ffn.register_forward_pre_hook(
                lambda mod, args, i=i: captured.__setitem__(i, args[0].detach().reshape(-1, args[0].shape[-1]))
            ))
    try:
        with torch.no_grad():
            model(tokens, with_mtp=False)
    finally:
        for h in hooks:
            h.remove()
    return captured


def apply_weight_clipping(model: Model, calibration: torch.Tensor, quantile: float) -> dict[int, float]:
    """Rescale every routed expert's up-projection so its peak calibration
    activation norm is at most ``tau``, the given quantile of the per-expert
    peaks in that layer.  Returns tau per layer."""
    inputs = _moe_inputs(model, calibration)
    taus = {}
    with torch.no_grad():
        for i, x in inputs.items():
            layer = model.blocks[i].ffn
            peaks = [torch.linalg.vector_norm(x @ e.w_up.T, dim=-1).max().item() for e in layer.experts]
            tau = float(torch.quantile(torch.tensor(peaks, dtype=DTYPE), quantile))
            for e in layer.experts:
                e.w_up.copy_(weight_clip(e.w_up, x, tau))
            taus[i] = tau
    return taus


def activation_ceiling(layer, tau_act: float) -> float:
    """Largest per-expert output RMS allowed by an elementwise hidden clamp:
    ``||W_down||_2 * tau * sqrt(H) / sqrt(D)``."""
    best = 0.0
    for e in layer.experts:
        H = e.w_down.shape[1]
        D = e.w_down.shape[0]
        s = torch.linalg.matrix_norm(e.w_down.detach(), ord=2).item()
        best = max(best, s * tau_act * math.sqrt(H / D))
    return best


def run_clip_arm(arm: str, cfg: ClipAblationConfig, seed: int, corpus: bytes,
                 emitter=None, log: Optional[Callable[[str], None]] = None) -> ArmResult:
    act_clip = cfg.tau_act if arm == "activation" else None
    mcfg = dataclasses.replace(cfg.model, moe=dataclasses.replace(cfg.model.moe, act_clip=act_clip))
    model = init_model(mcfg, seed)
    state = TrainState(model, cfg.train, seed, emitter=emitter)
    sampler = CorpusSampler(corpus, cfg.train.seq_len, cfg.train.batch_size, seed)
    calib_sampler = CorpusSampler(corpus, cfg.train.seq_len, cfg.train.batch_size, seed + 10_007)
    calibration = torch.cat([calib_sampler.next() for _ in range(cfg.calibration_batches)])
    moe_idx = [i for i, b in enumerate(model.blocks) if b.is_moe]
    result = ArmResult(arm, {"model": mcfg.to_dict(), "train": dataclasses.asdict(cfg.train), "arm": arm,
                             "tau_act": act_clip},
                       [], {i: [] for i in moe_idx}, {i: [] for i in moe_idx},
                       {i: [] for i in moe_idx} if arm == "activation" else {})
    taus = []
    for step in range(cfg.train.steps):
        if arm == "weight" and step > 0 and step % cfg.weight_clip_every == 0:
            taus.append(apply_weight_clipping(model, calibration, cfg.weight_clip_quantile))
            result.clip_events.append(step)
        if arm == "activation":
            # the bound holds for the weights used by this step's forward pass
            for i in moe_idx:
                result.ceiling[i].append(activation_ceiling(model.blocks[i].ffn, cfg.tau_act))
        m = train_step(sampler.next(), state)
        result.losses.append(m["loss"])
        for i in moe_idx:
            result.max_to_median[i].append(m[f"layer{i}/max_to_median"])
            result.expert_norm_max[i].append(m[f"layer{i}/expert_norm_max"])
        if log and (step % 100 == 0 or step == cfg.train.steps - 1):
            log(f"[{arm}] step {step} loss {m['loss']:.4f} " + " ".join(
                f"L{i}:{result.max_to_median[i][-1]:.2f}" for i in moe_idx))
    result.extra["weight_clip_tau"] = taus
    return result


def window_mean(series: Sequence[float], center: int, half: int) -> float:
    lo, hi = max(0, center - half), min(len(series), center + half + 1)
    return statistics.fmean(series[lo:hi])


def smooth(series: Sequence[float], width: int) -> list[float]:
    """Trailing moving average."""
    out, acc = [], 0.0
    for i, v in enumerate(series):
        acc += v
        if i >= width:
            acc -= series[i - width]
        out.append(acc / min(i + 1, width))
    return out


def clip_ablation(cfg: ClipAblationConfig, seed: int, emitter_factory=None,
                  log: Optional[Callable[[str], None]] = None) -> dict[str, ArmResult]:
    """Run every configured arm on one corpus, seed and batch order."""
    corpus = make_adversarial_corpus(cfg.corpus_size, cfg.bigram.encode(), cfg.frequency, seed)
    results = {}
    for arm in cfg.arms:
        emitter = emitter_factory(arm) if emitter_factory else None
        try:
            results[arm] = run_clip_arm(arm, cfg, seed, corpus, emitter, log)
        finally:
            if emitter is not None:
                emitter.close()
    return results


# ---------------------------------------------------------------------------
# Paired architecture ablations (gate vs sink, layouts)
# ---------------------------------------------------------------------------


@dataclass
class PairedAblationConfig:
    model: ModelConfig = field(default_factory=toy_moe_config)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8, seq_len=32, steps=300))
    corpus_size: int = 200_000
    layouts: tuple[str, ...] = ("S3F1", "S1F1", "FFFF")

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.layouts = tuple(self.layouts)


def train_curve(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: bytes, seed: int,
                emitter=None, log: Optional[Callable[[str], None]] = None, name: str = "") -> list[float]:
    model = init_model(model_cfg, seed)
    state = TrainState(model, train_cfg, seed, emitter=emitter)
    sampler = CorpusSampler(corpus, train_cfg.seq_len, train_cfg.batch_size, seed)
    losses = []
    for step in range(train_cfg.steps):
        losses.append(train_step(sampler.next(), state)["loss"])
        if log and step % 100 == 0:
            log(f"[{name}] step {step} loss {losses[-1]:.4f}")
    return losses


def gate_ablation(cfg: PairedAblationConfig, seed: int, corpus: bytes, emitter_factory=None, log=None) -> dict:
    """Head-wise gating against a learnable per-head sink, same seed and data."""
    arms = {
        "gate": dataclasses.replace(cfg.model, gated=True, attention_sink=False),
        "sink": dataclasses.replace(cfg.model, gated=False, attention_sink=True),
    }
    return _paired(arms, cfg, seed, corpus, emitter_factory, log)


def layout_ablation(cfg: PairedAblationConfig, seed: int, corpus: bytes, emitter_factory=None, log=None) -> dict:
    arms = {name: dataclasses.replace(cfg.model, layout=name) for name in cfg.layouts}
    return _paired(arms, cfg, seed, corpus, emitter_factory, log)


def _paired(arms: dict[str, ModelConfig], cfg: PairedAblationConfig, seed: int, corpus: bytes,
            emitter_factory, log) -> dict:
    out = {}
    for name, mcfg in arms.items():
        emitter = emitter_factory(name) if emitter_factory else None
        try:
            losses = train_curve(mcfg, cfg.train, corpus, seed, emitter, log, name)
        finally:
            if emitter is not None:
                emitter.close()
        out[name] = {"config": {"model": mcfg.to_dict(), "train": dataclasses.asdict(cfg.train)}, "losses": losses}
    return out


# ---------------------------------------------------------------------------
# RL studies
# ---------------------------------------------------------------------------


@dataclass
class RLStudyConfig:
    a_max: int = 9
    b_max: int = 9
    d_model: int = 32
    warmstart_steps: int = 40
    warmstart_lr: float = 3e-3
    iterations: int = 300
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    target_outside: float = 0.1
    token_bounds: tuple[float, float] = (0.5, 2.0)
    trajectory_bounds: tuple[float, float] = (0.8, 1.25)
    short_budget: int = 2
    short_budget_prob: float = 0.45
    critic_warmup: int = 50
    critic_epochs: int = 4
    rl: RLConfig = field(default_factory=RLConfig)

    def __post_init__(self):
        if isinstance(self.rl, dict):
            self.rl = RLConfig(**self.rl)
        self.seeds = tuple(self.seeds)
        self.token_bounds = tuple(self.token_bounds)
        self.trajectory_bounds = tuple(self.trajectory_bounds)
        if not 0 <= self.short_budget_prob <= 1:
            raise ValueError("short_budget_prob must lie in [0, 1]")

    @property
    def bounds(self) -> MISPOBounds:
        return MISPOBounds(Bounds(*self.token_bounds), Bounds(*self.trajectory_bounds))


def _warm_policy(cfg: RLStudyConfig, env: AdditionEnv, seed: int) -> Model:
    torch.manual_seed(seed)
    policy = Model(policy_config(env.VOCAB, cfg.d_model))
    supervised_warmstart(policy, env, cfg.warmstart_steps, cfg.warmstart_lr, torch.Generator().manual_seed(seed))
    return policy


def mismatch_arm(cfg: RLStudyConfig, objective: str, seed: int, log=None) -> dict:
    """One seed of the masked-vs-unmasked study under emulated mismatch."""
    env = AdditionEnv(cfg.a_max, cfg.b_max)
    policy = _warm_policy(cfg, env, seed)
    sigma = calibrate_sigma(policy, env, cfg.target_outside, Bounds(*cfg.token_bounds), seed=seed, iters=12)
    torch.manual_seed(seed + 1)
    critic = Critic(policy_config(env.VOCAB, cfg.d_model))
    rl = dataclasses.replace(cfg.rl, objective=objective, sigma=sigma, target_outside=cfg.target_outside)
    trainer = RLTrainer(policy, critic, env, rl, cfg.bounds, seed=seed)
    for it in range(cfg.iterations):
        s = trainer.step()
        if log and it % 50 == 0:
            log(f"[{objective} seed {seed}] it {it} reward {s.mean_reward:.3f} gnorm {s.actor_grad_norm:.3f} "
                f"outside {s.token_outside_fraction:.3f} retained {s.retained_fraction:.3f}")
    norms = [h.actor_grad_norm for h in trainer.history]
    return {
        "objective": objective, "seed": seed, "initial_sigma": sigma,
        "grad_norm_variance": statistics.pvariance(norms),
        "final_accuracy": greedy_accuracy(policy, env, env.horizon),
        "final_reward": statistics.fmean(h.mean_reward for h in trainer.history[-20:]),
        "history": [dataclasses.asdict(h) for h in trainer.history],
    }


def mismatch_study(cfg: RLStudyConfig, log=None) -> dict[str, list[dict]]:
    return {obj: [mismatch_arm(cfg, obj, s, log) for s in cfg.seeds] for obj in ("mispo", "ppo")}


def truncation_arm(cfg: RLStudyConfig, bootstrap: bool, seed: int, log=None) -> dict:
    """One seed of the truncation study: each rollout gets the short budget
    with probability ``short_budget_prob`` and the full horizon otherwise."""
    env = AdditionEnv(cfg.a_max, cfg.b_max)
    policy = _warm_policy(cfg, env, seed)
    critic = Critic.from_policy(policy)

    def budgets(n: int, gen: torch.Generator) -> list[int]:
        u = torch.rand(n, generator=gen).tolist()
        return [cfg.short_budget if x < cfg.short_budget_prob else env.horizon for x in u]

    rl = dataclasses.replace(cfg.rl, objective="mispo", sigma=0.0, truncation_bootstrap=bootstrap,
                             critic_warmup=cfg.critic_warmup, critic_epochs=cfg.critic_epochs)
    trainer = RLTrainer(policy, critic, env, rl, cfg.bounds, seed=seed, max_len_sampler=budgets)
    for it in range(cfg.critic_warmup + cfg.iterations):
        s = trainer.step()
        if log and it % 50 == 0:
            log(f"[bootstrap={bootstrap} seed {seed}] it {it} reward {s.mean_reward:.3f} "
                f"truncated {s.truncation_rate:.3f}")
    return {
        "bootstrap": bootstrap, "seed": seed,
        "truncation_rate": statistics.fmean(h.truncation_rate for h in trainer.history),
        "final_accuracy": greedy_accuracy(policy, env, env.horizon),
        "final_reward": statistics.fmean(h.mean_reward for h in trainer.history[-20:]),
        "history": [dataclasses.asdict(h) for h in trainer.history],
    }


def truncation_study(cfg: RLStudyConfig, log=None) -> dict[str, list[dict]]:
    return {
        name: [truncation_arm(cfg, boot, s, log) for s in cfg.seeds]
        for name, boot in (("bootstrap", True), ("zero", False))
    }


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------


def _rand(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale


def gradient_suite(seed: int = 0, eps: float = 1e-6, tol: float = 1e-5) -> dict[str, CheckReport]:
    """Central finite-difference checks of every differentiable operation."""
    g = torch.Generator().manual_seed(seed)
    reports: dict[str, CheckReport] = {}

    # zero-centred rmsnorm
    x, gamma = _rand(g, 3, 6), _rand(g, 6, scale=0.1)
    w = _rand(g, 3, 6)
    reports["rmsnorm"] = grad_check(lambda x, gm: (zero_centered_rmsnorm(x, NormParams(gm)) * w).sum(),
                                    [x, gamma], eps, tol)

    # attention layer: SWA, GQA, partial RoPE, qk-norm, head gate, sink
    B, T, D = 1, 5, 8
    spec = AttentionSpec(n_q_heads=4, n_kv_heads=2, head_dim=4, window=3, rope_dims=2, gated=True, qk_norm=True)
    xs = _rand(g, B, T, D)
    wq, wk, wv = _rand(g, D, 16, scale=0.4), _rand(g, D, 8, scale=0.4), _rand(g, D, 8, scale=0.4)
    wo, wg, sink = _rand(g, 16, D, scale=0.3), _rand(g, 4, D, scale=0.3), _rand(g, 4, scale=0.5)
    proj = _rand(g, B, T, D)

    def attn(x, wq, wk, wv, wo, wg, sink):
        out, _ = attention_layer_forward(x, spec, AttentionParams(wq, wk, wv, wo, wg, sink))
        return (out * proj).sum()

    reports["attention_layer"] = grad_check(attn, [xs, wq, wk, wv, wo, wg, sink], eps, tol)

    # MoE layer with the group balance loss
    mcfg = MoEConfig(n_experts=4, top_k=2, n_groups=2, expert_hidden=3, shared_hidden=3, act_clip=None)
    Tm, Dm = 6, 5
    xm = _rand(g, Tm, Dm)
    emb = _rand(g, 4, Dm, scale=0.5)
    bias = torch.zeros(4, dtype=DTYPE)
    experts = [[_rand(g, 3, Dm, scale=0.5), _rand(g, 3, Dm, scale=0.5), _rand(g, Dm, 3, scale=0.5)] for _ in range(4)]
    shared = [_rand(g, 3, Dm, scale=0.5), _rand(g, 3, Dm, scale=0.5), _rand(g, Dm, 3, scale=0.5)]
    pm = _rand(g, Tm, Dm)
    flat = [t for e in experts for t in e] + shared

    def moe(x, emb, *ws):
        ex = [ExpertWeights(*ws[3 * i: 3 * i + 3]) for i in range(4)]
        sh = ExpertWeights(*ws[12:15])
        out = moe_layer_forward(x, mcfg, RouterParams(emb, bias), ex, sh)
        return (out.output * pm).sum() + out.ep_loss

    reports["moe_layer"] = grad_check(moe, [xm, emb, *flat], eps, tol)

    # MTP loss over three heads with masks
    cfg3 = MTPConfig(n_heads=3, global_weight=0.3)
    V = 5
    logits = [_rand(g, 2, n, V) for n in (4, 3, 2)]
    targets = [torch.randint(0, V, (2, n), generator=g) for n in (4, 3, 2)]
    masks = [torch.rand(2, n, generator=g) > 0.3 for n in (4, 3, 2)]
    for m in masks:
        m[0, 0] = True
    reports["mtp_loss"] = grad_check(lambda a, b, c: mtp_loss([a, b, c], targets, cfg3, masks), logits, eps, tol)

    # RL losses on a hand-built batch
    recs = []
    for i in range(4):
        n = 3 if i % 2 else 2
        blp = tuple((-0.5 - 0.3 * _rand(g, n).abs()).tolist())
        olp = tuple((torch.tensor(blp, dtype=DTYPE) + 0.2 * _rand(g, n)).tolist())
        recs.append(TrajectoryRecord((1, 2), tuple(range(n)), blp, olp, float(i % 2), i == 2).with_values(
            torch.rand(n + 1, generator=g, dtype=DTYPE).tolist()))
    batch = RolloutBatch.from_records(recs)
    wide = MISPOBounds(Bounds(0.5, 2.0), Bounds(0.5, 2.0))
    logp0 = (batch.old_logp + 0.05 * _rand(g, *batch.old_logp.shape)) * batch.valid
    ref = logp0 + 0.1 * _rand(g, *logp0.shape)
    reports["mispo_loss"] = grad_check(lambda lp: mispo_actor_loss(batch, lp, wide), [logp0], eps, tol)
    reports["gspo_loss"] = grad_check(lambda lp: gspo_actor_loss(batch, lp, 0.2, wide), [logp0], eps, tol)
    reports["ppo_loss"] = grad_check(lambda lp: ppo_actor_loss(batch, lp, 0.2), [logp0], eps, tol)
    reports["kl_loss"] = grad_check(lambda lp: kl_regularizer(lp, ref, 1e-3, batch.valid), [logp0], eps, tol)
    values = torch.rand(4, batch.valid.shape[1], generator=g, dtype=DTYPE)
    reports["critic_loss"] = grad_check(
        lambda v: critic_loss(v, batch.r_hat.unsqueeze(1).expand_as(v), batch.valid), [values], eps, tol)
    return reports
