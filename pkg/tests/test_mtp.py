import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from moelab.attention import AttentionSpec
from moelab.mtp import (
    MTPConfig,
    MTPHead,
    clone_heads,
    masked_cross_entropy,
    mtp_forward,
    mtp_loss,
    mtp_targets,
    supervised_positions,
)
from moelab.numerics import DTYPE

V, D = 7, 8


def make_head(seed=0):
    torch.manual_seed(seed)
    return MTPHead(D, AttentionSpec(2, 1, 4, window=3), 12)


def inputs(seed=0, B=2, n=6):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(B, n, D, generator=g, dtype=DTYPE), torch.randint(0, V, (B, n), generator=g),
            torch.randn(V, D, generator=g, dtype=DTYPE), torch.randn(D, V, generator=g, dtype=DTYPE))


def perfect_logits(targets):
    return torch.nn.functional.one_hot(targets, V).to(DTYPE) * 1e4


def test_alignment_length_three():
    hidden, tokens, emb, unemb = inputs(n=3)
    logits = mtp_forward(hidden, make_head(), 1, tokens, emb, unemb)
    assert logits.shape == (2, 1, V)
    assert torch.equal(mtp_targets(tokens, 1), tokens[:, 2:])


@given(st.integers(1, 3), st.integers(0, 12))
def test_supervised_position_counts(h, n):
    assert supervised_positions(n, h) == max(n - 1 - h, 0)


def test_short_sequence_gives_empty_loss():
    hidden, tokens, emb, unemb = inputs(n=2)
    logits = mtp_forward(hidden, make_head(), 1, tokens, emb, unemb)
    assert logits.shape == (2, 0, V)
    assert mtp_loss([logits], [mtp_targets(tokens, 1)], MTPConfig()).item() == 0.0


def test_head_reads_embedding_of_token_t_plus_h():
    hidden, tokens, emb, unemb = inputs(n=6)
    head = make_head()
    base = mtp_forward(hidden, head, 2, tokens, emb, unemb)
    changed = tokens.clone()
    changed[:, 5] = (changed[:, 5] + 1) % V  # never read by head 2 (reads t+2 for t < 3)
    assert torch.equal(mtp_forward(hidden, head, 2, changed, emb, unemb), base)
    changed = tokens.clone()
    changed[:, 2] = (changed[:, 2] + 1) % V  # read at t=0
    assert not torch.equal(mtp_forward(hidden, head, 2, changed, emb, unemb)[:, 0], base[:, 0])


def test_offset_must_be_positive():
    hidden, tokens, emb, unemb = inputs()
    with pytest.raises(ValueError):
        mtp_forward(hidden, make_head(), 0, tokens, emb, unemb)


def test_loss_perfect_predictions_zero():
    tgt = torch.randint(0, V, (2, 4))
    assert mtp_loss([perfect_logits(tgt)], [tgt], MTPConfig()).item() == 0.0


def test_loss_single_head_mu_03():
    g = torch.Generator().manual_seed(0)
    logits, tgt = torch.randn(2, 4, V, generator=g, dtype=DTYPE), torch.randint(0, V, (2, 4), generator=g)
    c = torch.nn.functional.cross_entropy(logits.reshape(-1, V), tgt.reshape(-1)).item()
    got = mtp_loss([logits], [tgt], MTPConfig(n_heads=1, global_weight=0.3)).item()
    assert abs(got - 0.3 * c) < 1e-14


def test_loss_three_heads_mu_01():
    # zero logits give CE = log V on every head
    logits = [torch.zeros(1, 3, V, dtype=DTYPE) for _ in range(3)]
    tgts = [torch.zeros(1, 3, dtype=torch.long)] * 3
    cfg = MTPConfig(n_heads=3, global_weight=0.1)
    assert cfg.offset_weights == [1.0, 0.5, 0.25]
    assert abs(mtp_loss(logits, tgts, cfg).item() - 0.175 * math.log(V)) < 1e-14


@given(st.floats(0.0, 2.0), st.floats(0.1, 3.0))
def test_loss_linear_in_weights(mu, scale):
    g = torch.Generator().manual_seed(1)
    logits = [torch.randn(1, 3, V, generator=g, dtype=DTYPE) for _ in range(2)]
    tgts = [torch.randint(0, V, (1, 3), generator=g) for _ in range(2)]
    base = mtp_loss(logits, tgts, MTPConfig(n_heads=2, global_weight=1.0)).item()
    assert math.isclose(mtp_loss(logits, tgts, MTPConfig(n_heads=2, global_weight=mu)).item(), mu * base,
                        rel_tol=1e-12, abs_tol=1e-14)
    scaled = MTPConfig(n_heads=2, global_weight=1.0, offset_weights=[scale, 0.5 * scale])
    assert math.isclose(mtp_loss(logits, tgts, scaled).item(), scale * base, rel_tol=1e-12)


def test_masked_cross_entropy_mask():
    logits = torch.zeros(1, 2, V, dtype=DTYPE)
    logits[0, 0, 3] = 10.0
    tgt = torch.tensor([[3, 1]])
    full = masked_cross_entropy(logits, tgt).item()
    only_first = masked_cross_entropy(logits, tgt, torch.tensor([[True, False]])).item()
    assert only_first < 1e-3 < full
    assert masked_cross_entropy(logits, tgt, torch.zeros(1, 2, dtype=torch.bool)).item() == 0.0


@pytest.mark.parametrize("kwargs", [dict(n_heads=0), dict(n_heads=4), dict(offset_weights=[0.0]),
                                    dict(global_weight=-1.0)])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        MTPConfig(**kwargs)


def test_clone_heads_identical_then_independent():
    hidden, tokens, emb, unemb = inputs()
    heads = clone_heads(make_head(), 3)
    outs = [mtp_forward(hidden, hd, 1, tokens, emb, unemb) for hd in heads]
    assert all(torch.equal(outs[0], o) for o in outs[1:])

    before = [p.detach().clone() for p in heads[0].parameters()]
    opt = torch.optim.SGD(heads[1].parameters(), lr=0.1)
    mtp_forward(hidden, heads[1], 1, tokens, emb, unemb).sum().backward()
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, heads[0].parameters()))
    assert not torch.equal(mtp_forward(hidden, heads[1], 1, tokens, emb, unemb), outs[0])


def test_clone_of_clone_matches():
    hidden, tokens, emb, unemb = inputs()
    first = clone_heads(make_head(), 2)[1]
    again = clone_heads(first, 2)[1]
    assert torch.equal(mtp_forward(hidden, first, 1, tokens, emb, unemb),
                       mtp_forward(hidden, again, 1, tokens, emb, unemb))


def test_clone_needs_two():
    with pytest.raises(ValueError):
        clone_heads(make_head(), 1)
