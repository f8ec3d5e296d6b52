"""Desk-scale sparse MoE language-model research kit: hybrid attention,
loss-free routing, MTP heads, Muon with Polar Express, masked RL objectives
and a barrier-synchronized metrics pipeline."""

from .numerics import DTYPE, PrecisionMode, grad_check, quantize_round

__version__ = "0.1.0"

__all__ = ["DTYPE", "PrecisionMode", "grad_check", "quantize_round", "__version__"]
