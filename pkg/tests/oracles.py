"""Independent reference computations used across the test suite.

Everything here is written from definitions with explicit loops where that
keeps the oracle obviously correct.
"""

from __future__ import annotations

import math

import torch

from moelab.attention import AttentionSpec, head_gate
from moelab.numerics import DTYPE


def augmented_sink_attention(q, k, v, mask, spec: AttentionSpec, x, w_gate):
    """Gated attention rebuilt as an ungated softmax with one extra virtual key
    per (head, row) whose unnormalized weight is ``exp(-a) * Z`` and whose
    value is zero, ``a`` being the gate pre-activation."""
    B, Hq, T, d = q.shape
    k = k.repeat_interleave(spec.group_size, dim=1)
    v = v.repeat_interleave(spec.group_size, dim=1)
    out = torch.zeros(B, Hq, T, d, dtype=DTYPE)
    for b in range(B):
        for h in range(Hq):
            for i in range(T):
                logits = [(q[b, h, i] @ k[b, h, j]).item() / math.sqrt(d) for j in range(T) if mask[i, j]]
                cols = [j for j in range(T) if mask[i, j]]
                Z = sum(math.exp(s) for s in logits)
                a = (w_gate[h] @ x[b, i]).item()
                sink = math.exp(-a) * Z
                denom = Z + sink
                for s, j in zip(logits, cols):
                    out[b, h, i] += math.exp(s) / denom * v[b, h, j]
    return out


def gated_reference(q, k, v, mask, spec, x, w_gate):
    from moelab.attention import gqa_attention

    y, _ = gqa_attention(q, k, v, mask, spec)
    return head_gate(y, x, w_gate)[0]


def ep_loss_bruteforce(probs: torch.Tensor, selected: torch.Tensor, group_map, G: int) -> float:
    """``G * sum_g f_g p_g`` by explicit loops over tokens and experts."""
    T, E = probs.shape
    K = selected.shape[1]
    p_g = [0.0] * G
    f_g = [0.0] * G
    for t in range(T):
        chosen = set(selected[t].tolist())
        for e in range(E):
            g = group_map[e]
            p_g[g] += probs[t, e].item() / T
            if e in chosen:
                f_g[g] += 1.0 / (T * K)
    return G * sum(f * p for f, p in zip(f_g, p_g))


def dense_moe(x, config, router, experts, shared):
    """Evaluate every expert on every token, then mask by the selection."""
    from moelab.moe import route, router_probs, swiglu_forward

    probs = router_probs(x, router)
    selected, weights, _ = route(probs, router, config.top_k, config.group_map, config.n_groups)
    all_out = torch.stack([swiglu_forward(x, w, config.act_clip) for w in experts], dim=1)  # (T, E, D)
    combine = torch.zeros(x.shape[0], len(experts), dtype=DTYPE)
    combine.scatter_(1, selected, weights)
    routed = (combine.unsqueeze(-1) * all_out).sum(dim=1)
    out = config.routed_scale * routed
    if shared is not None:
        out = out + config.shared_scale * swiglu_forward(x, shared, config.act_clip)
    return out


def skewed_router_stream(E: int, T: int, skew: float, gen: torch.Generator):
    """A stationary router whose affinities favour low-index experts."""
    base = -skew * torch.arange(E, dtype=DTYPE) / E

    def batch():
        logits = base + 0.3 * torch.randn(T, E, generator=gen, dtype=DTYPE)
        return torch.softmax(logits, dim=-1)

    return batch
