"""Dense float64 tensor substrate, precision emulation and gradient checking.

All math in the package runs on float64 ``torch.Tensor`` objects; torch's
autograd provides the reverse mode.  Reduced precision exists only through
:func:`quantize_round`, which rounds to a narrower format and widens back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

DTYPE = torch.float64

# Reverse-mode tensors: shape, row-major float64 data, optional .grad that
# accumulates additively across backward passes.
TensorValue = torch.Tensor


def tensor(data, requires_grad: bool = False) -> TensorValue:
    """Build a float64 tensor (copying ``data``)."""
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------------------
# Precision emulation
# ---------------------------------------------------------------------------


class PrecisionMode(str, enum.Enum):
    EXACT64 = "EXACT64"
    EMULATED32 = "EMULATED32"
    EMULATED_BF16 = "EMULATED_BF16"
    EMULATED_FP16 = "EMULATED_FP16"


@dataclass(frozen=True)
class FloatFormat:
    precision: int  # significand bits including the implicit one
    emin: int
    emax: int

    @property
    def max_value(self) -> float:
        return (2.0 - 2.0 ** (1 - self.precision)) * 2.0**self.emax


FORMATS = {
    PrecisionMode.EMULATED32: FloatFormat(24, -126, 127),
    PrecisionMode.EMULATED_BF16: FloatFormat(8, -126, 127),
    PrecisionMode.EMULATED_FP16: FloatFormat(11, -14, 15),
}


def quantize_round(t: TensorValue, mode: PrecisionMode | str) -> TensorValue:
    """Round every element to the nearest value of ``mode``'s format (ties to
    even) and return it widened back to float64.

    Subnormals of the target format are honoured.  Values whose rounded
    magnitude exceeds the format maximum become +-inf; callers that care
    inspect the result with ``torch.isinf``.
    """
    mode = PrecisionMode(mode)
    if mode is PrecisionMode.EXACT64:
        return t
    fmt = FORMATS[mode]
    with torch.no_grad():
        x = t.detach().to(DTYPE)
        finite = torch.isfinite(x) & (x != 0)
        _, exp = torch.frexp(torch.where(finite, x, torch.ones_like(x)))
        # frexp: x = m * 2**exp with 0.5 <= |m| < 1, so the leading bit is 2**(exp-1)
        e = torch.clamp(exp.to(torch.int64) - 1, min=fmt.emin)
        quantum = torch.ldexp(torch.ones_like(x), e - (fmt.precision - 1))
        # division by a power of two is exact in float64; torch.round is half-to-even
        y = torch.round(x / quantum) * quantum
        y = torch.where(y.abs() > fmt.max_value, torch.copysign(torch.full_like(y, math.inf), y), y)
        return torch.where(finite, y, x)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormParams:
    gamma: TensorValue
    eps: float = 1e-6

    @classmethod
    def zeros(cls, dim: int, eps: float = 1e-6, requires_grad: bool = False) -> "NormParams":
        return cls(torch.zeros(dim, dtype=DTYPE, requires_grad=requires_grad), eps)


def zero_centered_rmsnorm(x: TensorValue, p: NormParams) -> TensorValue:
    """RMS-normalize along the last dimension with gain ``1 + gamma``."""
    if x.shape[-1] != p.gamma.shape[-1]:
        raise ValueError(f"last dimension {x.shape[-1]} != gamma length {p.gamma.shape[-1]}")
    rms = torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + p.eps)
    return x / rms * (1.0 + p.gamma)


def rms_normalize(x: TensorValue, eps: float = 1e-6) -> TensorValue:
    """Gainless RMS normalization over the last dimension."""
    return x / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def stable_softmax(scores: TensorValue, dim: int = -1) -> TensorValue:
    m = scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(scores - m)
    return e / e.sum(dim=dim, keepdim=True)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    passed: bool
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tol: float = 1e-5
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item())
    if scale == 0.0:
        return 0.0
    return (analytic - numeric).abs().max().item() / scale


def grad_check(
    function: Callable[..., TensorValue],
    inputs: Sequence[TensorValue],
    eps: float = 1e-6,
    tol: float = 1e-5,
) -> CheckReport:
    """Compare reverse-mode gradients of a scalar ``function(*inputs)`` with
    central finite differences.

    The error for each input is normwise: ``max|a - n| / max(max|a|, max|n|)``,
    so elements with tiny gradients do not dominate.  Inputs are perturbed in
    place and restored afterwards.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    leaves = [x.detach().clone().to(DTYPE).requires_grad_(True) for x in inputs]
    for i, x in enumerate(leaves):
        if not torch.isfinite(x).all():
            return CheckReport(False, math.inf, tol=tol, message=f"input {i} is not finite")

    out = function(*leaves)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        return CheckReport(False, math.inf, tol=tol, message="non-finite output at the unperturbed point")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    errors = []
    with torch.no_grad():
        for i, x in enumerate(leaves):
            a = analytic[i] if analytic[i] is not None else torch.zeros_like(x)
            numeric = torch.zeros_like(x)
            flat = x.view(-1)
            nflat = numeric.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                fp = function(*leaves)
                flat[j] = orig - eps
                fm = function(*leaves)
                flat[j] = orig
                if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                    return CheckReport(
                        False, math.inf, errors, tol,
                        message=f"non-finite output while perturbing input {i} (element {j})",
                    )
                nflat[j] = (fp.item() - fm.item()) / (2 * eps)
            errors.append(_rel_error(a, numeric))
    worst = max(errors) if errors else 0.0
    return CheckReport(worst <= tol, worst, errors, tol)
