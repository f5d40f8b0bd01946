"""
Symmetric uniform per-token activation quantizer with a gated straight-through
estimator.

For a token vector z (last axis of the input):

    s      = max(||z||_inf, scale_epsilon) / q_max,   q_max = 2^(b-1) - 1
    Q_b(z) = s * clip(round(z / s), -q_max, q_max)

Rounding is round-half-to-even (`torch.round`). It is odd-symmetric, so
Q_b(-z) == -Q_b(z) holds even on ties.

The top grid point `q_max * s` is emitted as the token's own max magnitude
(mathematically the same number). That keeps the scale reproducible bit for bit
when a quantized token is quantized again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from app import diffcore as dc
from app.errors import ConfigError, NonFiniteError

DEFAULT_BITS = 8
DEFAULT_G_MIN = 0.1
DEFAULT_SCALE_EPSILON = 1e-12


@dataclass(frozen=True)
class QuantConfig:
    """Bit-width and gate floor for the prefix quantizer."""

    bits: int = DEFAULT_BITS
    g_min: float = DEFAULT_G_MIN
    scale_epsilon: float = DEFAULT_SCALE_EPSILON

    def __post_init__(self) -> None:
        if int(self.bits) != self.bits or self.bits < 2:
            raise ConfigError(f"bits must be an integer >= 2, got {self.bits!r}")
        if not (0.0 < self.g_min <= 1.0):
            raise ConfigError(f"g_min must lie in (0, 1], got {self.g_min!r}")
        if not self.scale_epsilon > 0.0:
            raise ConfigError("scale_epsilon must be positive")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_default(cls) -> "QuantConfig":
        return cls()


@dataclass(frozen=True)
class GateState:
    """Trainable gate logit; one per quantization layer."""

    alpha: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha):
            raise ConfigError("gate alpha must be finite")


def quantize(z: torch.Tensor, cfg: QuantConfig) -> torch.Tensor:
    """Quantize every token vector along the last axis."""
    if not bool(torch.isfinite(z).all()):
        raise NonFiniteError("quantize", "quantize received non-finite input")
    q_max = cfg.q_max
    top = z.abs().amax(dim=-1, keepdim=True).clamp_min(cfg.scale_epsilon)
    s = top / q_max
    levels = torch.clamp(torch.round(z / s), -q_max, q_max)
    return torch.where(levels.abs() == q_max, torch.sign(levels) * top, levels * s)


def token_scale(z: torch.Tensor, cfg: QuantConfig) -> torch.Tensor:
    """Per-token step size s, shaped for broadcasting against z."""
    return z.abs().amax(dim=-1, keepdim=True).clamp_min(cfg.scale_epsilon) / cfg.q_max


def gate_value(alpha: float | torch.Tensor, cfg: QuantConfig) -> torch.Tensor | float:
    """g = g_min + (1 - g_min) * logistic(alpha), in [g_min, 1]."""
    if isinstance(alpha, torch.Tensor):
        return dc.add(dc.scale(dc.logistic(alpha), 1.0 - cfg.g_min), cfg.g_min)
    if isinstance(alpha, GateState):
        alpha = alpha.alpha
    # Numerically stable logistic for plain floats.
    if alpha >= 0:
        sig = 1.0 / (1.0 + math.exp(-alpha))
    else:
        e = math.exp(alpha)
        sig = e / (1.0 + e)
    return cfg.g_min + (1.0 - cfg.g_min) * sig


def ste_quantize(
    z: torch.Tensor,
    cfg: QuantConfig,
    alpha: torch.Tensor | GateState,
    *,
    adaptive: bool = True,
) -> torch.Tensor:
    """Quantize in the forward pass; pull cotangents back as g·v.

    With `adaptive=False` the gate is pinned to 1 (plain straight-through) and
    alpha receives no gradient.
    """
    if adaptive:
        if isinstance(alpha, GateState):
            alpha = torch.tensor(alpha.alpha, dtype=z.dtype)
        g = gate_value(alpha, cfg)
    else:
        g = 1.0
    return dc.scaled_straight_through(lambda x: quantize(x, cfg), g, z)
