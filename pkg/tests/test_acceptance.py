"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The three training studies (criteria 6 to 8) carry the ``slow`` marker and
take most of the runtime; deselect them with ``-m "not slow"``.
"""

import collections
import json
import math
import random
import statistics
import threading
import time

import pytest
import torch

from criteria_log import CRITERIA
from moelab.attention import AttentionSpec, LayerKind, build_layout
from moelab.experiments import (
    ClipAblationConfig,
    RLStudyConfig,
    clip_ablation,
    gradient_suite,
    make_adversarial_corpus,
    mismatch_study,
    toy_moe_config,
    truncation_study,
    window_mean,
)
from moelab.model import CorpusSampler, TrainConfig, TrainState, init_model, train_step
from moelab.moe import RouterParams, build_stats, ep_group_balance_loss, route, update_bias
from moelab.mtp import MTPConfig, MTPHead, clone_heads, mtp_forward, mtp_loss
from moelab.muon import orthogonality_residual, polar_express
from moelab.numerics import DTYPE, PrecisionMode
from moelab.telemetry import MetricsClient, MetricsServer
from oracles import augmented_sink_attention, ep_loss_bruteforce, gated_reference, skewed_router_stream


def verdict(n: int, ok: bool, detail: str, elapsed: float, limit: float):
    ok = ok and elapsed < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s, limit {limit:g}s]"
    CRITERIA[n] = line
    print(line)
    assert ok, line


def rand(g, *shape, scale=1.0):
    return torch.randn(*shape, generator=g, dtype=DTYPE) * scale


# ---------------------------------------------------------------------------
# 1. layout
# ---------------------------------------------------------------------------


def test_criterion_01_layout():
    F, S = LayerKind.FULL, LayerKind.SWA
    t0 = time.perf_counter()
    layout = build_layout(45, "S3F1")
    elapsed = time.perf_counter() - t0
    ok = layout == [F] + [S, S, S, F] * 11
    verdict(1, ok, f"45 layers, {layout.count(F)} full / {layout.count(S)} sliding-window", elapsed, 1e-3)


# ---------------------------------------------------------------------------
# 2. EP-group balance loss
# ---------------------------------------------------------------------------


def test_criterion_02_ep_loss():
    t0 = time.perf_counter()
    probs = torch.full((8, 4), 0.25, dtype=DTYPE)
    uniform = ep_group_balance_loss(build_stats(probs, torch.tensor([[e] for e in [0, 1, 2, 3] * 2]),
                                                [0, 0, 1, 1], 2)).item()
    G = 4
    conc = torch.zeros(3, 8, dtype=DTYPE)
    conc[:, 0] = 1.0
    single = ep_group_balance_loss(build_stats(conc, torch.zeros(3, 1, dtype=torch.long),
                                               [0, 0, 1, 1, 2, 2, 3, 3], G)).item()
    worst = 0.0
    for seed in range(200):
        g = torch.Generator().manual_seed(seed)
        E, Gs = [(4, 2), (8, 4), (8, 2), (6, 3), (16, 4)][seed % 5]
        K = 1 + seed % min(E, 3)
        p = torch.softmax(rand(g, 1 + seed % 13, E, scale=2.0), -1)
        gmap = [e * Gs // E for e in range(E)]
        rp = RouterParams(torch.zeros(E, 1, dtype=DTYPE), torch.zeros(E, dtype=DTYPE))
        sel, _, stats = route(p, rp, K, gmap, Gs)
        worst = max(worst, abs(ep_group_balance_loss(stats).item() - ep_loss_bruteforce(p, sel, gmap, Gs)))
    elapsed = time.perf_counter() - t0
    ok = abs(uniform - 1.0) <= 1e-12 and abs(single - G) <= 1e-12 and worst <= 1e-12
    verdict(2, ok, f"uniform {uniform!r}, single group {single!r} (G={G}), brute-force max diff {worst:.1e}",
            elapsed, 10.0)


# ---------------------------------------------------------------------------
# 3. sink-mass identity
# ---------------------------------------------------------------------------


def test_criterion_03_sink_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        rng = random.Random(seed)
        kv = rng.choice([1, 2])
        hq = kv * rng.choice([1, 2, 3])
        dh = rng.choice([2, 4, 6])
        T = rng.randint(1, 8)
        D = rng.randint(2, 8)
        spec = AttentionSpec(hq, kv, dh, window=rng.choice([None, 1, 2, 3, 5]))
        B = rng.randint(1, 2)
        q, k, v = rand(g, B, hq, T, dh), rand(g, B, kv, T, dh), rand(g, B, kv, T, dh)
        x, w = rand(g, B, T, D), rand(g, hq, D, scale=rng.choice([0.1, 1.0, 3.0]))
        mask = spec.mask(T)
        diff = (gated_reference(q, k, v, mask, spec, x, w) - augmented_sink_attention(q, k, v, mask, spec, x, w))
        worst = max(worst, diff.abs().max().item())
    elapsed = time.perf_counter() - t0
    verdict(3, worst <= 1e-10, f"100 seeded cases, max |gated - augmented sink| = {worst:.1e}", elapsed, 30.0)


# ---------------------------------------------------------------------------
# 4. gradient suite
# ---------------------------------------------------------------------------


def test_criterion_04_gradient_suite():
    t0 = time.perf_counter()
    reports = gradient_suite(0, tol=1e-5)
    elapsed = time.perf_counter() - t0
    required = {"attention_layer", "moe_layer", "mtp_loss", "rmsnorm", "mispo_loss", "gspo_loss",
                "critic_loss", "kl_loss"}
    ok = required <= set(reports) and all(r.passed and r.max_rel_error <= 1e-5 for r in reports.values())
    worst = max(reports.values(), key=lambda r: r.max_rel_error)
    detail = f"{len(reports)} ops, worst rel error {worst.max_rel_error:.1e}"
    failed = [name for name, r in reports.items() if not r.passed]
    if failed:
        detail += f", failed: {failed}"
    verdict(4, ok, detail, elapsed, 120.0)


# ---------------------------------------------------------------------------
# 5. polar factor
# ---------------------------------------------------------------------------


def svd_polar(G):
    U, _, Vh = torch.linalg.svd(G, full_matrices=False)
    return U @ Vh


def conditioned(g, m, n, cond):
    k = min(m, n)
    U, _ = torch.linalg.qr(torch.randn(m, k, generator=g, dtype=DTYPE))
    V, _ = torch.linalg.qr(torch.randn(n, k, generator=g, dtype=DTYPE))
    s = torch.logspace(0, math.log10(cond), k, dtype=DTYPE)
    return U @ torch.diag(s) @ V.T


def test_criterion_05_polar_factor():
    t0 = time.perf_counter()
    shapes = [(2, 2), (4, 4), (8, 4), (4, 8), (16, 16), (32, 16), (16, 48), (64, 17), (64, 64)]
    err = res = 0.0
    for i, (m, n) in enumerate(shapes):
        for cond in (1.0, 10.0, 100.0):
            G = conditioned(torch.Generator().manual_seed(i), m, n, cond)
            O, diag = polar_express(G, T=6)
            err = max(err, (O - svd_polar(G)).abs().max().item())
            res = max(res, diag.residual, orthogonality_residual(O))
    g = torch.Generator().manual_seed(3)
    suite = [conditioned(g, m, n, 50.0) for m, n in [(8, 8), (16, 8), (32, 16), (24, 24), (64, 64)]]
    dominated, peaks = True, {}
    for G in suite:
        exact = polar_express(G, T=6, mode=PrecisionMode.EXACT64)[1]
        peaks.setdefault("EXACT64", []).append(max(exact.step_max_abs))
        for mode in (PrecisionMode.EMULATED_FP16, PrecisionMode.EMULATED_BF16):
            d = polar_express(G, T=6, mode=mode)[1]
            dominated &= d.residual >= exact.residual and len(d.step_max_abs) == 6
            peaks.setdefault(mode.value, []).append(max(d.step_max_abs))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-5 and res <= 1e-6 and dominated
    peak_str = ", ".join(f"{k} peak {max(v):.3f}" for k, v in peaks.items())
    verdict(5, ok, f"max |O - UV^T| {err:.1e}, max residual {res:.1e}, reduced >= exact: {dominated}; {peak_str}",
            elapsed, 60.0)


# ---------------------------------------------------------------------------
# 6. clipping ablation
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_clip_ablation():
    cfg = ClipAblationConfig()
    assert cfg.frequency == 0.3 and cfg.train.steps == 2000
    t0 = time.perf_counter()
    results = clip_ablation(cfg, seed=0)
    elapsed = time.perf_counter() - t0
    final = max(results["none"].max_to_median)

    none = results["none"].max_to_median[final]
    early = window_mean(none, 100, 50)
    late = statistics.fmean(none[-100:])
    growth = late / early

    act = results["activation"]
    bound = max(a / c for a, c in zip(act.expert_norm_max[final], act.ceiling[final]))

    weight = results["weight"]
    w = weight.max_to_median[final]
    regrow = [statistics.fmean(w[e + 150:e + 200]) > statistics.fmean(w[e:e + 20])
              for e in weight.clip_events if e + 200 <= len(w)]

    base = results["none"].losses
    drift = {arm: max(abs(a - b) / b for a, b in zip(results[arm].losses, base)) for arm in ("weight", "activation")}

    ok = growth > 5 and bound <= 1.0 and regrow and sum(regrow) > len(regrow) / 2 and max(drift.values()) <= 0.05
    verdict(6, ok, f"layer {final}: no-clip ratio grew {growth:.1f}x ({early:.2f} -> {late:.2f}); "
                   f"activation norm / ceiling <= {bound:.2f}; weight arm re-grew after {sum(regrow)}/{len(regrow)} "
                   f"clip events; max per-step loss gap weight {drift['weight']:.2%}, "
                   f"activation {drift['activation']:.2%}", elapsed, 1800.0)


# ---------------------------------------------------------------------------
# 7. MIS-PO vs PPO
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_mispo_vs_ppo():
    cfg = RLStudyConfig()
    assert cfg.iterations == 300 and len(cfg.seeds) == 5 and cfg.token_bounds == (0.5, 2.0)
    t0 = time.perf_counter()
    runs = mismatch_study(cfg)
    elapsed = time.perf_counter() - t0

    def mean(arm, key):
        return statistics.fmean(r[key] for r in runs[arm])

    outside = statistics.fmean(h["token_outside_fraction"] for r in runs["ppo"] for h in r["history"])
    var_m, var_p = mean("mispo", "grad_norm_variance"), mean("ppo", "grad_norm_variance")
    rew_m, rew_p = mean("mispo", "final_reward"), mean("ppo", "final_reward")
    ok = var_m < var_p and rew_m >= rew_p
    verdict(7, ok, f"grad-norm variance MIS-PO {var_m:.4f} vs PPO {var_p:.4f}; final reward {rew_m:.3f} vs "
                   f"{rew_p:.3f}; greedy accuracy {mean('mispo', 'final_accuracy'):.3f} vs "
                   f"{mean('ppo', 'final_accuracy'):.3f}; tokens outside bounds {outside:.1%}", elapsed, 1800.0)


# ---------------------------------------------------------------------------
# 8. truncation bootstrapping
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_truncation_bootstrap():
    cfg = RLStudyConfig()
    t0 = time.perf_counter()
    runs = truncation_study(cfg)
    elapsed = time.perf_counter() - t0

    def mean(arm, key):
        return statistics.fmean(r[key] for r in runs[arm])

    rate = statistics.fmean(r["truncation_rate"] for arm in runs.values() for r in arm)
    rew_b, rew_z = mean("bootstrap", "final_reward"), mean("zero", "final_reward")
    ok = rew_b >= rew_z
    verdict(8, ok, f"final reward bootstrap {rew_b:.3f} vs zero {rew_z:.3f}; greedy accuracy "
                   f"{mean('bootstrap', 'final_accuracy'):.3f} vs {mean('zero', 'final_accuracy'):.3f}; "
                   f"truncation rate {rate:.1%}", elapsed, 1200.0)


# ---------------------------------------------------------------------------
# 9. telemetry
# ---------------------------------------------------------------------------


def test_criterion_09_telemetry(tmp_path):
    ranks, per_iter, iterations = 8, 10_000, 20
    keys, aggs = ["loss", "grad_norm", "tokens", "lr", "ratio"], ["sum", "mean", "max", "min"]
    out = tmp_path / "metrics.jsonl"
    # per-rank message plans; emission order within a rank is the canonical order
    plans = {}
    for r in range(ranks):
        rng = random.Random(1000 + r)
        plans[r] = [[(rng.choice(keys), rng.choice(aggs), rng.uniform(-1e3, 1e3)) for _ in range(per_iter)]
                    for _ in range(iterations)]
    oracle_vals = collections.defaultdict(list)
    for r in range(ranks):
        for it, plan in enumerate(plans[r]):
            for key, agg, v in plan:
                oracle_vals[(it, key, agg)].append(v)
    oracle = {}
    for k, vals in oracle_vals.items():
        agg = k[2]
        if agg in ("sum", "mean"):
            total = 0.0
            for v in vals:
                total += v
            oracle[k] = total / len(vals) if agg == "mean" else total
        else:
            oracle[k] = max(vals) if agg == "max" else min(vals)

    t0 = time.perf_counter()
    violations = []
    with MetricsServer(range(ranks), out) as server:
        agg = server.aggregator
        eoi_seen = collections.Counter()
        lock = threading.Lock()
        signal, persist = agg.signal_eoi, agg._persist

        def counted_eoi(rank, iteration):
            with lock:
                eoi_seen[iteration] += 1
            return signal(rank, iteration)

        def checked_persist(records):
            with lock:
                violations.extend(r.iteration for r in records if eoi_seen[r.iteration] < ranks)
            persist(records)

        agg.signal_eoi, agg._persist = counted_eoi, checked_persist

        def worker(r):
            rng = random.Random(r)
            client = MetricsClient(server.address, r)
            for it, plan in enumerate(plans[r]):
                for i, (key, a, v) in enumerate(plan):
                    client.emit(key, v, a, it)
                    if rng.random() < 1e-3:
                        time.sleep(rng.random() * 1e-3)  # shuffle cross-rank arrival order
                client.end_iteration(it)
            client.close()

        threads = [threading.Thread(target=worker, args=(r,)) for r in range(ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        deadline = time.monotonic() + 60
        while len(agg.records) < len(oracle) and time.monotonic() < deadline:
            time.sleep(0.02)
    elapsed = time.perf_counter() - t0

    persisted = [json.loads(line) for line in out.read_text().splitlines()]
    counts = collections.Counter((d["iteration"], d["key"], d["agg"]) for d in persisted)
    mismatches = 0
    for d in persisted:
        want = oracle.get((d["iteration"], d["key"], d["agg"]))
        if want is None:
            mismatches += 1
        elif d["agg"] == "mean":
            mismatches += abs(d["value"] - want) > 1e-9 * abs(want)
        else:
            mismatches += d["value"] != want
    ok = (not violations and set(counts) == set(oracle) and all(c == 1 for c in counts.values())
          and mismatches == 0 and not any(d.get("partial") for d in persisted))
    verdict(9, ok, f"{ranks * per_iter * iterations} messages, {len(persisted)} records "
                   f"({len(oracle)} expected), {mismatches} oracle mismatches, {len(violations)} pre-barrier writes",
            elapsed, 120.0)


# ---------------------------------------------------------------------------
# 10. loss-free balancing
# ---------------------------------------------------------------------------


def test_criterion_10_bias_balancing():
    E, K = 8, 2
    rp = RouterParams(torch.zeros(E, 1, dtype=DTYPE), torch.zeros(E, dtype=DTYPE))
    assert rp.update_rate == 1e-3
    stream = skewed_router_stream(E, 256, 3.0, torch.Generator().manual_seed(0))
    t0 = time.perf_counter()
    # dispatch counts pooled over the trailing 100 updates, so per-batch
    # sampling noise does not masquerade as imbalance
    window = collections.deque(maxlen=100)
    first, reached = None, None
    for step in range(1, 5001):
        _, _, stats = route(stream(), rp, K)
        window.append(stats.f_e.clone())
        update_bias(stats.f_e, rp)
        if len(window) == window.maxlen:
            pooled = torch.stack(tuple(window)).sum(0)
            ratio = (pooled.max() / pooled.min().clamp_min(1e-12)).item()
            first = ratio if first is None else first
            if reached is None and ratio < 1.5:
                reached = step
    elapsed = time.perf_counter() - t0
    verdict(10, reached is not None and ratio < 1.5,
            f"pooled max/min dispatch ratio {first:.2f} over the first 100 updates, below 1.5 at update "
            f"{reached}, {ratio:.3f} at update 5000", elapsed, 60.0)


# ---------------------------------------------------------------------------
# 11. MTP composition
# ---------------------------------------------------------------------------


def test_criterion_11_mtp():
    V, D = 7, 8
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    hidden, tokens = rand(g, 2, 6, D), torch.randint(0, V, (2, 6), generator=g)
    emb, unemb = rand(g, V, D), rand(g, D, V)
    torch.manual_seed(0)
    heads = clone_heads(MTPHead(D, AttentionSpec(2, 1, 4, window=3), 12), 3)
    outs = [mtp_forward(hidden, h, 1, tokens, emb, unemb) for h in heads]
    identical = all(torch.equal(outs[0], o) for o in outs[1:])

    tgt = torch.randint(0, V, (2, 4), generator=g)
    perfect = mtp_loss([torch.nn.functional.one_hot(tgt, V).to(DTYPE) * 1e4], [tgt], MTPConfig()).item()
    logits = rand(g, 2, 4, V)
    ce = torch.nn.functional.cross_entropy(logits.reshape(-1, V), tgt.reshape(-1)).item()
    single = mtp_loss([logits], [tgt], MTPConfig(n_heads=1, global_weight=0.3)).item()
    zeros = [torch.zeros(1, 3, V, dtype=DTYPE)] * 3
    three = mtp_loss(zeros, [torch.zeros(1, 3, dtype=torch.long)] * 3, MTPConfig(n_heads=3, global_weight=0.1)).item()
    elapsed = time.perf_counter() - t0
    ok = (identical and perfect == 0.0 and abs(single - 0.3 * ce) < 1e-14
          and abs(three - 0.175 * math.log(V)) < 1e-14)
    verdict(11, ok, f"clone logits identical: {identical}; perfect {perfect}; mu=0.3 {single:.6f} "
                    f"(0.3*CE={0.3 * ce:.6f}); 3 heads mu=0.1 {three:.6f} (0.175 log V={0.175 * math.log(V):.6f})",
            elapsed, 60.0)


# ---------------------------------------------------------------------------
# 12. determinism
# ---------------------------------------------------------------------------


def test_criterion_12_determinism():
    tcfg = TrainConfig(steps=200)
    corpus = make_adversarial_corpus(200_000, b"qz", 0.3, seed=0)

    def run():
        state = TrainState(init_model(toy_moe_config(), 0), tcfg, 0)
        sampler = CorpusSampler(corpus, tcfg.seq_len, tcfg.batch_size, 0)
        return [train_step(sampler.next(), state)["loss"] for _ in range(tcfg.steps)]

    t0 = time.perf_counter()
    a, b = run(), run()
    elapsed = time.perf_counter() - t0
    same = sum(x == y for x, y in zip(a, b))
    verdict(12, len(a) == 200 and a == b, f"{same}/200 losses identical (final {a[-1]:.4f})", elapsed, 600.0)
