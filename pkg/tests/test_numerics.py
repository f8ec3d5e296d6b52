import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from moelab.numerics import (
    DTYPE,
    NormParams,
    PrecisionMode,
    grad_check,
    quantize_round,
    rms_normalize,
    stable_softmax,
    tensor,
    zero_centered_rmsnorm,
)


def all_values(np_dtype, bits_dtype):
    bits = np.arange(1 << 16, dtype=np.uint32).astype(bits_dtype)
    vals = bits.view(np_dtype).astype(np.float64)
    return np.sort(np.unique(vals[np.isfinite(vals)]))


def bf16_values():
    # bfloat16 is the top half of a float32 bit pattern
    with np.errstate(invalid="ignore"):  # NaN payloads in the bit sweep
        bits = (np.arange(1 << 16, dtype=np.uint32) << 16).view(np.float32).astype(np.float64)
    return np.sort(np.unique(bits[np.isfinite(bits)]))


def nearest_even_oracle(x: np.ndarray, grid: np.ndarray, mantissa_of) -> np.ndarray:
    """Brute-force round to nearest representable, ties to the even pattern."""
    idx = np.searchsorted(grid, x)
    idx = np.clip(idx, 1, len(grid) - 1)
    lo, hi = grid[idx - 1], grid[idx]
    out = np.where(x - lo < hi - x, lo, hi)
    tie = (x - lo) == (hi - x)
    out = np.where(tie, np.where(mantissa_of(lo) % 2 == 0, lo, hi), out)
    return out


def fp16_mantissa(v):
    return v.astype(np.float16).view(np.uint16).astype(np.int64)


def bf16_mantissa(v):
    return (v.astype(np.float32).view(np.uint32) >> 16).astype(np.int64)


@pytest.mark.parametrize(
    "mode,grid_fn,mant",
    [
        (PrecisionMode.EMULATED_FP16, lambda: all_values(np.float16, np.uint16), fp16_mantissa),
        (PrecisionMode.EMULATED_BF16, bf16_values, bf16_mantissa),
    ],
)
def test_quantize_matches_exhaustive_grid(mode, grid_fn, mant):
    grid = grid_fn()
    rng = np.random.default_rng(0)
    mags = grid[grid > 0]
    # random points inside the representable range plus every exact midpoint sample
    x = rng.uniform(-1, 1, 20000) * np.exp(rng.uniform(np.log(mags[0]), np.log(mags[-1]), 20000))
    mids = (grid[:-1] + grid[1:]) / 2
    x = np.concatenate([x, rng.choice(mids, 5000), rng.choice(grid, 2000)])
    got = quantize_round(torch.from_numpy(x), mode).numpy()
    want = nearest_even_oracle(x, grid, mant)
    np.testing.assert_array_equal(got, want)


def test_quantize_every_fp16_value_is_fixed_point():
    grid = all_values(np.float16, np.uint16)
    t = torch.from_numpy(grid)
    assert torch.equal(quantize_round(t, PrecisionMode.EMULATED_FP16), t)


def test_quantize_matches_native_float32_cast():
    x = torch.randn(5000, dtype=DTYPE) * 10.0 ** torch.randint(-30, 30, (5000,)).to(DTYPE)
    want = x.to(torch.float32).to(DTYPE)
    assert torch.equal(quantize_round(x, PrecisionMode.EMULATED32), want)


def test_quantize_examples():
    q = lambda v, m: quantize_round(tensor([v]), m).item()
    assert q(1.0 + 2**-12, PrecisionMode.EMULATED_FP16) == 1.0  # half ulp above 1 ties to even
    assert q(1.0 + 3 * 2**-11, PrecisionMode.EMULATED_FP16) == 1.0 + 2**-9
    assert q(70000.0, PrecisionMode.EMULATED_FP16) == math.inf
    assert q(-70000.0, PrecisionMode.EMULATED_FP16) == -math.inf
    assert q(65504.0, PrecisionMode.EMULATED_FP16) == 65504.0
    assert q(2**-24, PrecisionMode.EMULATED_FP16) == 2**-24  # smallest subnormal
    assert q(1.0 / 3.0, PrecisionMode.EMULATED_BF16) == 0.333984375
    assert q(0.1, PrecisionMode.EXACT64) == 0.1


def test_quantize_passes_specials_through():
    x = tensor([0.0, -0.0, math.inf, -math.inf, math.nan])
    y = quantize_round(x, PrecisionMode.EMULATED_BF16)
    assert y[0] == 0 and y[2] == math.inf and y[3] == -math.inf and math.isnan(y[4])
    assert math.copysign(1.0, y[1].item()) == -1.0


@given(st.floats(min_value=-6e4, max_value=6e4, allow_nan=False))
def test_quantize_idempotent(v):
    for mode in PrecisionMode:
        once = quantize_round(tensor([v]), mode)
        assert torch.equal(quantize_round(once, mode), once)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=50))
def test_quantize_monotone(values):
    x = torch.sort(tensor(values)).values
    y = quantize_round(x, PrecisionMode.EMULATED_BF16)
    assert torch.all(y[1:] >= y[:-1])


def test_rmsnorm_hand_value():
    x = tensor([[3.0, 4.0]])
    y = zero_centered_rmsnorm(x, NormParams.zeros(2, eps=0.0))
    rms = math.sqrt(12.5)
    assert torch.allclose(y, tensor([[3 / rms, 4 / rms]]), atol=1e-15)


def test_rmsnorm_gain_is_one_plus_gamma():
    x = torch.randn(4, 6, dtype=DTYPE)
    gamma = torch.randn(6, dtype=DTYPE)
    y = zero_centered_rmsnorm(x, NormParams(gamma))
    assert torch.allclose(y, rms_normalize(x) * (1 + gamma))


def test_rmsnorm_rejects_width_mismatch():
    with pytest.raises(ValueError, match="gamma"):
        zero_centered_rmsnorm(torch.ones(2, 3, dtype=DTYPE), NormParams.zeros(4))


@given(st.floats(0.1, 100.0))
def test_rmsnorm_scale_invariant(scale):
    x = torch.randn(3, 8, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    p = NormParams.zeros(8, eps=0.0)
    assert torch.allclose(zero_centered_rmsnorm(x * scale, p), zero_centered_rmsnorm(x, p), atol=1e-12)


def test_stable_softmax_large_logits():
    s = stable_softmax(tensor([1000.0, 1000.0, -1000.0]))
    assert torch.allclose(s, tensor([0.5, 0.5, 0.0]))


def test_grad_check_passes_on_smooth_function():
    r = grad_check(lambda a, b: (a.sin() * b).sum(), [torch.randn(4, dtype=DTYPE), torch.randn(4, dtype=DTYPE)])
    assert r.passed and r.max_rel_error < 1e-8 and len(r.per_input) == 2


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # true derivative is 2x

    r = grad_check(Bad.apply, [torch.randn(5, dtype=DTYPE)])
    assert not r.passed and r.max_rel_error > 0.1


def test_grad_check_reports_nonfinite():
    r = grad_check(lambda x: torch.log(x).sum(), [tensor([0.5, 1e-300])], eps=1e-6)
    assert not r.passed and "input 0" in r.message


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), [torch.ones(2, dtype=DTYPE)], eps=1e-2)


def test_tensor_accumulates_grad():
    x = tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    (x * 3).sum().backward()
    assert torch.equal(x.grad, tensor([2.0 + 3.0, 4.0 + 3.0]))
