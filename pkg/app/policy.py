"""
Quantized prefix transformer block and flow-matching action expert.

Parameter names (all live in one flat ParamSet):

    block.<l>.ln1.scale / ln1.offset          per-token layer norm after attention
    block.<l>.attn.query|key|value|output     d x d projections
    block.<l>.gate.alpha                      gate logit of the layer's quantizer
    block.<l>.ln2.scale / ln2.offset          layer norm after the MLP
    block.<l>.mlp.in.weight|bias              d -> d_ff
    block.<l>.mlp.out.weight|bias             d_ff -> d
    expert.tau.weight                         Fourier(tau) -> hidden
    expert.cond.weight                        pooled prefix -> hidden
    expert.hidden1|hidden2.weight|bias        two GELU layers
    expert.head.weight|bias                   hidden -> T*D velocity

One layer is

    H_att = LN1(H + MHA(H))
    H_hat = ste_quantize(H_att)      (identity when quantization is disabled)
    out   = LN2(H_hat + MLP(H_hat))

Attention is full over prefix tokens with no positional terms, so the block is
equivariant under token permutations.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

from app import diffcore as dc
from app.config import Dims
from app.diffcore import ParamSet
from app.errors import ConfigError, ShapeError
from app.quantizer import QuantConfig, ste_quantize


def block_param_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of the L_q prefix-block layers, keyed by name."""
    shapes: dict[str, tuple[int, ...]] = {}
    d, d_ff = dims.d, dims.d_ff
    for layer in range(dims.L_q):
        p = f"block.{layer}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.offset"] = (d,)
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}"] = (d, d)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.offset"] = (d,)
        shapes[p + "mlp.in.weight"] = (d, d_ff)
        shapes[p + "mlp.in.bias"] = (d_ff,)
        shapes[p + "mlp.out.weight"] = (d_ff, d)
        shapes[p + "mlp.out.bias"] = (d,)
    return shapes


def gate_param_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """One scalar gate logit per quantization layer."""
    return {f"block.{layer}.gate.alpha": () for layer in range(dims.L_q)}


def expert_param_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of the flow-matching expert."""
    hidden, chunk = dims.expert_hidden, dims.T * dims.D
    return {
        "expert.tau.weight": (2 * dims.n_freqs, hidden),
        "expert.cond.weight": (dims.d, hidden),
        "expert.hidden1.weight": (chunk + 2 * hidden, hidden),
        "expert.hidden1.bias": (hidden,),
        "expert.hidden2.weight": (hidden, hidden),
        "expert.hidden2.bias": (hidden,),
        "expert.head.weight": (hidden, chunk),
        "expert.head.bias": (chunk,),
    }


def count_parameters(dims: Dims) -> int:
    """Number of trainable scalars implied by `dims`."""
    total = 0
    for shapes in (block_param_shapes(dims), gate_param_shapes(dims), expert_param_shapes(dims)):
        total += sum(math.prod(shape) for shape in shapes.values())
    return total


def _init_tensor(name: str, shape: tuple[int, ...], fan_in: int, generator: torch.Generator) -> torch.Tensor:
    if name.endswith(("ln1.scale", "ln2.scale")):
        return torch.ones(shape, dtype=torch.float64)
    if name.endswith(("ln1.offset", "ln2.offset", "gate.alpha")):
        return torch.zeros(shape, dtype=torch.float64)
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict[str, tuple[int, ...]]) -> int:
    # A bias takes the fan-in of the weight it is added to.
    if name.endswith(".bias"):
        return shapes[name[: -len("bias")] + "weight"][0]
    return shape[0] if shape else 1


def init_params(seed: int, dims: Dims, *, dtype: torch.dtype = torch.float64) -> tuple[ParamSet, ParamSet, ParamSet]:
    """Scaled-uniform initialization; returns (block, expert, gates).

    Deterministic for a fixed seed and dims. Values are drawn in float64 and
    then cast, so float32 runs start from the rounded float64 draw.
    """
    generator = torch.Generator().manual_seed(int(seed))
    groups = []
    for shapes in (block_param_shapes(dims), expert_param_shapes(dims), gate_param_shapes(dims)):
        entries = {
            name: _init_tensor(name, shape, _fan_in(name, shape, shapes), generator).to(dtype)
            for name, shape in shapes.items()
        }
        groups.append(ParamSet(entries))
    return groups[0], groups[1], groups[2]


def _check_prefix(H: torch.Tensor, dims: Dims) -> None:
    if H.ndim < 2 or H.shape[-1] != dims.d or H.shape[-2] < 1:
        raise ShapeError(f"prefix must have shape (..., M, {dims.d}), got {tuple(H.shape)}")


def _attention(h: torch.Tensor, params: ParamSet, prefix: str, n_heads: int) -> torch.Tensor:
    d = h.shape[-1]
    head_dim = d // n_heads
    q = dc.matmul(h, params[prefix + "attn.query"])
    k = dc.matmul(h, params[prefix + "attn.key"])
    v = dc.matmul(h, params[prefix + "attn.value"])
    heads = []
    for j in range(n_heads):
        lo, hi = j * head_dim, (j + 1) * head_dim
        qj, kj, vj = (dc.slice_(t, -1, lo, hi) for t in (q, k, v))
        scores = dc.scale(dc.matmul(qj, dc.transpose(kj)), 1.0 / math.sqrt(head_dim))
        heads.append(dc.matmul(dc.softmax(scores, dim=-1), vj))
    return dc.matmul(dc.concat(heads, dim=-1), params[prefix + "attn.output"])


def _mlp(h: torch.Tensor, params: ParamSet, prefix: str) -> torch.Tensor:
    hidden = dc.gelu(dc.add(dc.matmul(h, params[prefix + "mlp.in.weight"]), params[prefix + "mlp.in.bias"]))
    return dc.add(dc.matmul(hidden, params[prefix + "mlp.out.weight"]), params[prefix + "mlp.out.bias"])


def prefix_block_forward(
    H: torch.Tensor,
    params: ParamSet,
    dims: Dims,
    cfg: QuantConfig,
    *,
    quantization_enabled: bool = True,
    adaptive_ste: bool = True,
) -> torch.Tensor:
    """Run the L_q-layer quantized prefix block on (..., M, d) latents."""
    _check_prefix(H, dims)
    h = H
    for layer in range(dims.L_q):
        p = f"block.{layer}."
        h_att = dc.layer_norm(dc.add(h, _attention(h, params, p, dims.n_heads)), params[p + "ln1.scale"], params[p + "ln1.offset"])
        if quantization_enabled:
            h_hat = ste_quantize(h_att, cfg, params[p + "gate.alpha"], adaptive=adaptive_ste)
        else:
            h_hat = h_att
        h = dc.layer_norm(dc.add(h_hat, _mlp(h_hat, params, p)), params[p + "ln2.scale"], params[p + "ln2.offset"])
    return h


def fourier_features(tau: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """sin/cos of tau at frequencies pi * 2^k, k < n_freqs; shape (..., 2 * n_freqs)."""
    freqs = math.pi * (2.0 ** torch.arange(n_freqs, dtype=tau.dtype))
    angles = tau.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _as_tau(tau: float | torch.Tensor, batch_shape: Sequence[int], dtype: torch.dtype) -> torch.Tensor:
    t = torch.as_tensor(tau, dtype=dtype)
    if not bool(((t >= 0.0) & (t <= 1.0)).all()):
        raise ConfigError(f"tau must lie in [0, 1], got {tau!r}")
    return t.expand(tuple(batch_shape)) if t.ndim == 0 else t


def expert_velocity(
    x_tau: torch.Tensor,
    tau: float | torch.Tensor,
    prefix: torch.Tensor,
    params: ParamSet,
    dims: Dims,
) -> torch.Tensor:
    """Velocity field v(x_tau, tau | prefix), shaped like x_tau (..., T, D)."""
    if tuple(x_tau.shape[-2:]) != (dims.T, dims.D):
        raise ShapeError(f"x_tau must have shape (..., {dims.T}, {dims.D}), got {tuple(x_tau.shape)}")
    _check_prefix(prefix, dims)
    batch = tuple(x_tau.shape[:-2])
    if tuple(prefix.shape[:-2]) != batch:
        raise ShapeError(f"prefix batch {tuple(prefix.shape[:-2])} does not match chunk batch {batch}")

    tau_t = _as_tau(tau, batch, x_tau.dtype)
    x_flat = dc.reshape(x_tau, (*batch, dims.T * dims.D))
    tau_emb = dc.matmul(fourier_features(tau_t, dims.n_freqs), params["expert.tau.weight"])
    cond = dc.matmul(dc.mean(prefix, dim=-2), params["expert.cond.weight"])

    h = dc.concat([x_flat, tau_emb, cond], dim=-1)
    for layer in ("hidden1", "hidden2"):
        h = dc.gelu(dc.add(dc.matmul(h, params[f"expert.{layer}.weight"]), params[f"expert.{layer}.bias"]))
    v = dc.add(dc.matmul(h, params["expert.head.weight"]), params["expert.head.bias"])
    return dc.reshape(v, (*batch, dims.T, dims.D))
