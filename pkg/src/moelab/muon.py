"""Muon with a fixed-step Polar Express polar-factor iteration.

The iteration can run under emulated reduced precision (every intermediate
is rounded through :func:`moelab.numerics.quantize_round`) so the outlier
behaviour of narrow formats can be observed deterministically.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch

from .numerics import DTYPE, PrecisionMode, quantize_round

# Odd quintic steps X <- a X + (b A + c A^2) X with A = X X^T.

# Published Polar Express schedule (lower bound 1e-3) with its 1.01 safety
# factor folded into all but the final entry.  Tuned for bfloat16.
_PUBLISHED_RAW = [
    (8.28721201814563, -23.595886519098837, 17.300387312530933),
    (4.107059111542203, -2.9478499167379106, 0.5448431082926601),
    (3.9486908534822946, -2.908902115962949, 0.5518191394370137),
    (3.3184196573706015, -2.488488024314874, 0.51004894012372),
    (2.300652019954817, -1.6689039845747493, 0.4188073119525673),
    (1.891301407787398, -1.2679958271945868, 0.37680408948524835),
    (1.8750014808534479, -1.2500016453999487, 0.3750001645474248),
    (1.875, -1.25, 0.375),
]
PUBLISHED_COEFFS = [(a / 1.01, b / 1.01**3, c / 1.01**5) for a, b, c in _PUBLISHED_RAW[:-1]] + [
    _PUBLISHED_RAW[-1]
]

# Minimax schedule for singular values in [0.004, 1] (scripts/polar_coefficients.py).
# With Schatten-8 normalization this covers condition numbers up to ~150 at
# 64x64 and converges to ~1e-9 in six steps.
EXACT_COEFFS = [
    (8.340981084124353, -24.597368893481764, 18.22302545917533),
    (3.9779944085039047, -2.965433874207951, 0.5642718730604506),
    (3.327478632931417, -2.495236755574208, 0.5108133172995036),
    (2.308564932232708, -1.6759948988404845, 0.4195740404076847),
    (1.8921134032826135, -1.268886279266621, 0.37689361789707615),
    (1.8749279495310383, -1.2498540006787795, 0.3749260513021539),
]

SCHEDULES = {"exact": EXACT_COEFFS, "published": PUBLISHED_COEFFS}


@dataclass
class PolarDiagnostics:
    step_max_abs: list[float]
    residual: float  # ||O O^T - I||_inf on the thin side
    overflow: bool
    mode: PrecisionMode = PrecisionMode.EXACT64


def orthogonality_residual(O: torch.Tensor) -> float:
    X = O if O.shape[0] <= O.shape[1] else O.T
    return (X @ X.T - torch.eye(X.shape[0], dtype=X.dtype)).abs().max().item()


def _normalizer(X: torch.Tensor, schedule: str) -> torch.Tensor:
    """Per-matrix upper bound on the spectral norm of a (..., m, n) stack."""
    if schedule == "published":
        return 1.01 * torch.linalg.matrix_norm(X, keepdim=True) + 1e-7
    # sigma_max <= (sum sigma^8)^(1/8) = ||(X X^T)^2||_F^(1/4)
    A = X @ X.mT
    return torch.linalg.matrix_norm(A @ A, keepdim=True) ** 0.25


def polar_express_batched(
    G: torch.Tensor,
    T: int = 6,
    mode: PrecisionMode | str = PrecisionMode.EXACT64,
    schedule: str = "exact",
    track_extrema: bool = True,
) -> tuple[torch.Tensor, PolarDiagnostics]:
    """:func:`polar_express` over a (N, m, n) stack; diagnostics aggregate
    the worst case across the stack.  ``track_extrema=False`` skips the
    per-step peak bookkeeping (``step_max_abs`` is then empty)."""
    mode = PrecisionMode(mode)
    if G.ndim != 3:
        raise ValueError("expected a (N, m, n) stack of matrices")
    if T < 1:
        raise ValueError("T must be >= 1")
    coeffs = SCHEDULES[schedule]
    with torch.no_grad():
        X = G.detach().to(DTYPE)
        tall = X.shape[-2] > X.shape[-1]
        if tall:
            X = X.mT
        scale = _normalizer(X, schedule)
        if torch.any(scale == 0):
            raise ValueError("polar factor of a zero matrix is undefined")

        def q(t):
            return quantize_round(t, mode)

        X = q(X / scale)
        peaks = []
        for step in range(T):
            a, b, c = coeffs[min(step, len(coeffs) - 1)]
            A = q(X @ X.mT)
            AA = q(A @ A)
            B = q(q(b * A) + q(c * AA))
            BX = q(B @ X)
            X = q(q(a * X) + BX)
            if track_extrema:
                peaks.append(torch.stack([torch.linalg.vector_norm(t, math.inf) for t in (A, AA, B, BX, X)]).amax())
        extrema = torch.stack(peaks).tolist() if peaks else []
        overflow = not bool(torch.isfinite(X).all())
        if overflow:
            residual = math.inf
        else:
            eye = torch.eye(X.shape[-2], dtype=X.dtype)
            residual = (X @ X.mT - eye).abs().amax().item()
        O = X.mT if tall else X
    return O.clone(), PolarDiagnostics(extrema, residual, overflow, mode)


def polar_express(
    G: torch.Tensor,
    T: int = 6,
    mode: PrecisionMode | str = PrecisionMode.EXACT64,
    schedule: str = "exact",
) -> tuple[torch.Tensor, PolarDiagnostics]:
    """Approximate the polar factor ``U V^T`` of ``G = U S V^T``.

    The spectral-norm normalization happens in float64; the ``T`` polynomial
    steps and every intermediate are rounded to ``mode``.  Steps beyond the
    schedule length reuse its final entry.  Overflow sets
    ``diagnostics.overflow`` and the non-finite result is returned as-is.
    """
    if G.ndim != 2:
        raise ValueError("polar_express needs a matrix")
    if not torch.any(G != 0):
        raise ValueError("polar factor of a zero matrix is undefined")
    O, diag = polar_express_batched(G.unsqueeze(0), T, mode, schedule)
    return O[0], diag


def update_scale(rows: int, cols: int) -> float:
    """``sqrt(max/min)`` of the matrix shape; 1 for square matrices."""
    return math.sqrt(max(rows, cols) / min(rows, cols))


@dataclass
class MuonState:
    lr: float = 0.02
    beta: float = 0.95
    weight_decay: float = 0.1
    steps: int = 6
    precision: PrecisionMode = PrecisionMode.EXACT64
    grad_clip_norm: float = 1.0
    schedule: str = "exact"
    momentum: dict[int, torch.Tensor] = field(default_factory=dict)
    last_diagnostics: Optional[PolarDiagnostics] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        self.precision = PrecisionMode(self.precision)


def muon_step(param: torch.Tensor, grad: torch.Tensor, state: MuonState, key: Optional[int] = None) -> torch.Tensor:
    """One in-place Muon update of a matrix parameter.

    ``m <- beta m + grad``; ``param <- param - lr (s O + wd param)`` with
    ``O`` the polar factor of ``m``.  A zero momentum only applies decay.
    """
    if param.ndim != 2:
        raise ValueError(f"Muon handles matrices only; got shape {tuple(param.shape)}")
    key = id(param) if key is None else key
    with torch.no_grad():
        m = state.momentum.get(key)
        m = grad.detach().clone() if m is None else state.beta * m + grad
        state.momentum[key] = m
        update = torch.zeros_like(param)
        if torch.any(m != 0):
            O, diag = polar_express(m, state.steps, state.precision, state.schedule)
            state.last_diagnostics = diag
            update = update_scale(*param.shape) * O
        param -= state.lr * (update + state.weight_decay * param)
    return param


def global_grad_norm(grads: Iterable[Optional[torch.Tensor]]) -> float:
    return math.sqrt(sum(g.detach().pow(2).sum().item() for g in grads if g is not None))


def clip_global_grad_norm(grads: Sequence[Optional[torch.Tensor]], max_norm: float) -> list[Optional[torch.Tensor]]:
    """Scale all gradients by ``max_norm / norm`` when the joint L2 norm
    exceeds ``max_norm``; otherwise return them untouched."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads)
    factor = max_norm / norm
    return [None if g is None else g * factor for g in grads]


def clip_grads_(params: Iterable[torch.nn.Parameter], max_norm: float) -> float:
    """In-place variant on ``.grad`` fields; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(p.grad for p in params)
    if norm > max_norm and norm > 0:
        for p in params:
            p.grad.mul_(max_norm / norm)
    return norm


_FALLBACK_NAMES = re.compile(r"(^|\.)(embed|unembed|expert_embeddings|head_gate|sink_logits|gamma|bias|value_head)($|\.)")


def param_partition(named_params: Iterable[tuple[str, torch.Tensor]]) -> tuple[dict, dict]:
    """Split parameters into the Muon set (2-D weight matrices) and the
    elementwise fallback set (embeddings, unembedding, norms, gates, router
    embeddings, biases and anything not 2-D)."""
    muon, fallback = {}, {}
    for name, p in named_params:
        if p.ndim == 2 and not _FALLBACK_NAMES.search(name):
            muon[name] = p
        else:
            fallback[name] = p
    return muon, fallback


class Muon(torch.optim.Optimizer):
    """``torch.optim`` version of :func:`muon_step` that runs same-shaped
    matrices through one stacked polar iteration."""

    def __init__(self, params, state: MuonState):
        super().__init__(params, dict(lr=state.lr, weight_decay=state.weight_decay))
        self.muon_state = state

    @torch.no_grad()
    def step(self, closure=None) -> list[PolarDiagnostics]:
        st = self.muon_state
        diags = []
        for group in self.param_groups:
            lr, wd = group["lr"], group["weight_decay"]
            by_shape: dict[tuple, list] = {}
            for p in group["params"]:
                if p.grad is None:
                    continue
                if p.ndim != 2:
                    raise ValueError(f"Muon handles matrices only; got shape {tuple(p.shape)}")
                buf = self.state[p].get("momentum")
                buf = p.grad.detach().clone() if buf is None else buf.mul_(st.beta).add_(p.grad)
                self.state[p]["momentum"] = buf
                by_shape.setdefault(tuple(p.shape), []).append(p)
            for shape, ps in by_shape.items():
                ms = torch.stack([self.state[p]["momentum"] for p in ps])
                live = (ms.flatten(1) != 0).any(dim=1)
                updates = torch.zeros_like(ms)
                if live.any():
                    O, diag = polar_express_batched(ms[live], st.steps, st.precision, st.schedule,
                                                    track_extrema=st.precision is not PrecisionMode.EXACT64)
                    updates[live] = update_scale(*shape) * O
                    diags.append(diag)
                for p, u in zip(ps, updates):
                    p.sub_(lr * (u + wd * p))
        return diags
