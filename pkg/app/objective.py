"""
Flow-matching targets, dual-branch losses, the relative temporal-complexity
regularizer and Euler sampling.

Linear probability path, for an expert chunk a and unit-normal noise eps:

    x_tau = tau * eps + (1 - tau) * a,     u_tau = eps - a

Quantized branch: v_q = G(x_tau, tau | block(H)), trained with ||v_q - u_tau||^2.
Raw branch:       v_r = sg[G(x_tau, tau | H)], same expert weights, reference only.

    L = L_q + lambda_tc * [ C(N(v_q)) - C(N(v_r)) ]_+

Batch reduction: every per-chunk term is averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch

from app import diffcore as dc
from app.config import Dims, TCWeights, TrainConfig
from app.diffcore import ParamSet
from app.errors import ConfigError, ShapeError
from app.policy import expert_velocity, init_params, prefix_block_forward
from app.quantizer import QuantConfig

VelocityField = Callable[[torch.Tensor, float], torch.Tensor]


@dataclass(frozen=True)
class FlowSample:
    """One flow-matching draw (batched along leading axes)."""

    epsilon: torch.Tensor
    tau: torch.Tensor
    x_tau: torch.Tensor
    u_tau: torch.Tensor


def make_flow_sample(a: torch.Tensor, epsilon: torch.Tensor, tau: float | torch.Tensor) -> FlowSample:
    """Point on the straight path from a (tau=0) to eps (tau=1) and its velocity."""
    if a.shape != epsilon.shape:
        raise ShapeError(f"action {tuple(a.shape)} and noise {tuple(epsilon.shape)} shapes differ")
    t = torch.as_tensor(tau, dtype=a.dtype)
    if not bool(((t >= 0.0) & (t <= 1.0)).all()):
        raise ConfigError(f"tau must lie in [0, 1], got {tau!r}")
    if t.ndim and tuple(t.shape) != tuple(a.shape[:-2]):
        raise ShapeError("tau must be a scalar or have one entry per chunk")
    tb = t.reshape(*t.shape, 1, 1) if t.ndim else t
    x_tau = tb * epsilon + (1.0 - tb) * a
    u_tau = epsilon - a
    return FlowSample(epsilon=epsilon, tau=t, x_tau=x_tau, u_tau=u_tau)


def fm_loss(v: torch.Tensor, u: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared error per chunk over all T*D entries (sum, or mean with `reduction="mean"`)."""
    if v.shape != u.shape:
        raise ShapeError(f"velocity {tuple(v.shape)} and target {tuple(u.shape)} shapes differ")
    sq = dc.square(dc.sub(v, u))
    if reduction == "sum":
        return dc.sum_(sq, dim=(-2, -1))
    if reduction == "mean":
        return dc.mean(sq, dim=(-2, -1))
    raise ConfigError(f"unknown fm reduction {reduction!r}")


@dataclass(frozen=True)
class NormStats:
    """Per-dimension quantile range [lower, upper] mapped to [-1, 1]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ShapeError("NormStats bounds must be matching 1-d arrays")
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)) or np.any(upper <= lower):
            raise ConfigError("NormStats requires finite bounds with upper > lower")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(lower=-np.ones(dim), upper=np.ones(dim))

    @classmethod
    def from_actions(
        cls,
        actions: np.ndarray,
        *,
        low_quantile: float = 0.01,
        high_quantile: float = 0.99,
        min_range: float = 1e-8,
    ) -> "NormStats":
        """Quantiles of every action dimension; degenerate columns get a unit range."""
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])
        lower, upper = np.quantile(flat, [low_quantile, high_quantile], axis=0)
        flat_cols = (upper - lower) < min_range
        mid = 0.5 * (upper + lower)
        lower = np.where(flat_cols, mid - 0.5, lower)
        upper = np.where(flat_cols, mid + 0.5, upper)
        return cls(lower=lower, upper=upper)


def normalize_actions(v: torch.Tensor, stats: NormStats) -> torch.Tensor:
    """Affine per-dimension map sending [lower, upper] to [-1, 1]."""
    if v.shape[-1] != stats.dim:
        raise ShapeError(f"action dim {v.shape[-1]} does not match NormStats dim {stats.dim}")
    mid = torch.as_tensor(stats.upper + stats.lower, dtype=v.dtype)
    inv_range = torch.as_tensor(1.0 / (stats.upper - stats.lower), dtype=v.dtype)
    return dc.mul(dc.sub(dc.scale(v, 2.0), mid), inv_range)


def temporal_complexity(v: torch.Tensor, w: TCWeights) -> torch.Tensor:
    """lambda1 * mean(first diff^2) + lambda2 * mean(second diff^2), per chunk."""
    T = v.shape[-2]
    if v.ndim < 2 or T < 3:
        raise ShapeError(f"temporal complexity needs T >= 3, got shape {tuple(v.shape)}")
    d1 = dc.sub(dc.slice_(v, -2, 1, T), dc.slice_(v, -2, 0, T - 1))
    d2 = dc.sub(dc.slice_(d1, -2, 1, T - 1), dc.slice_(d1, -2, 0, T - 2))
    first = dc.mean(dc.square(d1), dim=(-2, -1))
    second = dc.mean(dc.square(d2), dim=(-2, -1))
    return dc.add(dc.scale(first, w.lambda1), dc.scale(second, w.lambda2))


def tc_hinge(c_q: torch.Tensor | float, c_r: torch.Tensor | float) -> torch.Tensor:
    """[c_q - c_r]_+ ."""
    c_q = c_q if isinstance(c_q, torch.Tensor) else torch.tensor(float(c_q), dtype=torch.float64)
    c_r = c_r if isinstance(c_r, torch.Tensor) else torch.tensor(float(c_r), dtype=c_q.dtype)
    return dc.relu(dc.sub(c_q, c_r))


def total_objective(l_q: torch.Tensor, l_tc: torch.Tensor, lambda_tc: float) -> torch.Tensor:
    """L = L_q + lambda_tc * L_tc."""
    return dc.add(l_q, dc.scale(l_tc, lambda_tc))


@dataclass(frozen=True)
class LossTerms:
    """Scalar loss breakdown; every field is a 0-d tensor."""

    total: torch.Tensor
    fm: torch.Tensor
    tc: torch.Tensor
    c_q: torch.Tensor
    c_r: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        """Plain floats for logging and metrics rows."""
        return {name: float(getattr(self, name).detach()) for name in ("total", "fm", "tc", "c_q", "c_r")}


def conditioning_prefix(
    params: ParamSet,
    H: torch.Tensor,
    dims: Dims,
    quant: QuantConfig,
    *,
    quantization_enabled: bool,
    adaptive_ste: bool = True,
) -> torch.Tensor:
    """Prefix the quantized branch (and the deployed policy) conditions on."""
    return prefix_block_forward(
        H, params, dims, quant, quantization_enabled=quantization_enabled, adaptive_ste=adaptive_ste
    )


def branch_velocities(
    params: ParamSet,
    H: torch.Tensor,
    sample: FlowSample,
    dims: Dims,
    quant: QuantConfig,
    *,
    quantization_enabled: bool = True,
    adaptive_ste: bool = True,
    raw_branch_mode: str = "bypass_block",
    compute_raw: bool = True,
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """(v_q, v_r). v_r is wrapped in stop_gradient; None when not computed."""
    prefix_q = conditioning_prefix(
        params, H, dims, quant, quantization_enabled=quantization_enabled, adaptive_ste=adaptive_ste
    )
    v_q = expert_velocity(sample.x_tau, sample.tau, prefix_q, params, dims)
    if not compute_raw:
        return v_q, None
    if raw_branch_mode == "bypass_block":
        raw_prefix = H
    elif raw_branch_mode == "bypass_quant":
        raw_prefix = prefix_block_forward(H, params, dims, quant, quantization_enabled=False)
    else:
        raise ConfigError(f"unknown raw_branch_mode {raw_branch_mode!r}")
    v_r = dc.stop_gradient(expert_velocity(sample.x_tau, sample.tau, raw_prefix, params, dims))
    return v_q, v_r


def dual_branch_loss(
    params: ParamSet,
    H: torch.Tensor,
    a: torch.Tensor,
    sample: FlowSample,
    config: TrainConfig,
    stats: NormStats,
    *,
    raw_velocity: Optional[torch.Tensor] = None,
) -> LossTerms:
    """Batch-averaged L = L_q + lambda_tc * L_tc.

    With the dual branch disabled only L_q is trained (L_tc reported as 0).
    `raw_velocity` replaces the raw branch by a constant.
    """
    if a.shape != sample.u_tau.shape:
        raise ShapeError("action chunk and flow sample shapes differ")
    need_raw = config.dual_branch_enabled and raw_velocity is None
    v_q, v_r = branch_velocities(
        params,
        H,
        sample,
        config.dims,
        config.quant,
        quantization_enabled=config.quantization_enabled,
        adaptive_ste=config.adaptive_ste_enabled,
        raw_branch_mode=config.raw_branch_mode,
        compute_raw=need_raw,
    )
    l_q = dc.mean(fm_loss(v_q, sample.u_tau, config.fm_reduction))
    if not config.dual_branch_enabled:
        zero = torch.zeros((), dtype=l_q.dtype)
        return LossTerms(total=l_q, fm=l_q, tc=zero, c_q=zero, c_r=zero)

    if raw_velocity is not None:
        v_r = raw_velocity
    c_q = temporal_complexity(normalize_actions(v_q, stats), config.tc)
    c_r = temporal_complexity(normalize_actions(v_r, stats), config.tc)
    l_tc = dc.mean(tc_hinge(c_q, c_r))
    total = total_objective(l_q, l_tc, config.tc.lambda_tc)
    return LossTerms(total=total, fm=l_q, tc=l_tc, c_q=dc.mean(c_q), c_r=dc.mean(c_r))


class Instance(NamedTuple):
    """A random, fully specified dual-branch problem."""

    params: ParamSet
    H: torch.Tensor
    a: torch.Tensor
    sample: FlowSample
    stats: NormStats
    config: TrainConfig


def random_instance(seed: int, config: TrainConfig, *, batch_size: int = 3) -> Instance:
    """Random parameters, prefixes, chunks and flow draws in float64."""
    dims = config.dims
    block, expert, gates = init_params(seed, dims)
    gen = torch.Generator().manual_seed(10_000 + int(seed))
    # Nonzero gate logits so the gate gradient is exercised off its midpoint.
    gates = gates.map(lambda t: t + (torch.rand(t.shape, generator=gen, dtype=t.dtype) - 0.5))
    H = torch.randn((batch_size, dims.M, dims.d), generator=gen, dtype=torch.float64)
    a = torch.randn((batch_size, dims.T, dims.D), generator=gen, dtype=torch.float64)
    eps = torch.randn((batch_size, dims.T, dims.D), generator=gen, dtype=torch.float64)
    tau = 0.05 + 0.9 * torch.rand((batch_size,), generator=gen, dtype=torch.float64)
    stats = NormStats.from_actions(a.numpy())
    return Instance(ParamSet.merge(block, expert, gates), H, a, make_flow_sample(a, eps, tau), stats, config)


def raw_branch_gradient_isolation_check(instance: Instance) -> bool:
    """Gradient of L equals the gradient with v_r replaced by a constant, bit for bit."""
    params, H, a, sample, stats, config = instance

    def live(p: ParamSet) -> torch.Tensor:
        return dual_branch_loss(p, H, a, sample, config, stats).total

    with torch.no_grad():
        _, frozen_raw = branch_velocities(
            params,
            H,
            sample,
            config.dims,
            config.quant,
            quantization_enabled=config.quantization_enabled,
            adaptive_ste=config.adaptive_ste_enabled,
            raw_branch_mode=config.raw_branch_mode,
        )
    frozen_raw = frozen_raw.detach().clone()

    def frozen(p: ParamSet) -> torch.Tensor:
        return dual_branch_loss(p, H, a, sample, config, stats, raw_velocity=frozen_raw).total

    _, grads_live = dc.value_and_grad(live, params)
    _, grads_frozen = dc.value_and_grad(frozen, params)
    return all(torch.equal(grads_live[name], grads_frozen[name]) for name in grads_live)


def initial_noise(shape: tuple[int, ...], seed: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """The x_1 ~ N(0, I) draw `sample_actions` starts from."""
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=generator, dtype=dtype)


def sample_actions(
    prefix: torch.Tensor,
    params: Optional[ParamSet],
    dims: Dims,
    n_steps: int,
    seed: int,
    *,
    velocity_fn: Optional[VelocityField] = None,
) -> torch.Tensor:
    """Euler-integrate the velocity field from tau=1 (noise) down to tau=0.

    `velocity_fn(x, tau)` replaces the learned expert, e.g. with an oracle field.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if velocity_fn is None:
        if params is None:
            raise ConfigError("sample_actions needs params or a velocity_fn")

        def expert_field(x: torch.Tensor, tau: float) -> torch.Tensor:
            return expert_velocity(x, tau, prefix, params, dims)

        velocity_fn = expert_field

    x = initial_noise((*prefix.shape[:-2], dims.T, dims.D), seed, prefix.dtype)
    dt = 1.0 / n_steps
    with torch.no_grad():
        for k in range(n_steps):
            tau = 1.0 - k / n_steps
            x = x - dt * velocity_fn(x, tau)
    return x
