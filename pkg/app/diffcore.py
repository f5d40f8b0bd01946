"""
Reverse-mode differentiation contract for QuoVLA.

This module is the only place that talks to `torch.autograd` directly. It
provides:

- `ParamSet` / `GradSet`: name-ordered, read-only collections of tensors.
- A closed set of registered primitives. Every model and loss in the package is
  composed from them, and each one checks its output for NaN/inf so a failure
  names the primitive that produced it.
- `stop_gradient` and `scaled_straight_through`, the two surrogate-gradient
  hooks the quantized prefix path needs.
- `value_and_grad` and the `finite_difference_check` oracle.

Surrogate contract: at a straight-through site the backward rule is `g·I`
(and zero at a stop-gradient site). The finite-difference oracle therefore
checks gradients against the surrogate, not against the a.e.-zero derivative of
round/clip.
"""

from __future__ import annotations

import contextvars
import functools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from app.errors import ConfigError, NonFiniteError, ShapeError

DTYPES = {"float64": torch.float64, "float32": torch.float32}

_CHECK_FINITE: contextvars.ContextVar[bool] = contextvars.ContextVar("check_finite", default=True)


def resolve_dtype(name: str) -> torch.dtype:
    """Map a config precision string to a torch dtype."""
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}") from None


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Temporarily switch the per-primitive NaN/inf check on or off."""
    token = _CHECK_FINITE.set(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class ParamSet(Mapping[str, torch.Tensor]):
    """Read-only mapping of parameter name -> tensor, iterated in name order."""

    def __init__(self, entries: Mapping[str, torch.Tensor], *, check_finite: bool = True) -> None:
        ordered: dict[str, torch.Tensor] = {}
        for name in sorted(entries):
            tensor = entries[name]
            if not isinstance(tensor, torch.Tensor):
                raise ConfigError(f"parameter {name!r} is not a tensor")
            if check_finite and not bool(torch.isfinite(tensor).all()):
                raise NonFiniteError(name, f"parameter {name!r} contains non-finite values")
            ordered[name] = tensor
        self._entries = ordered

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} entries, {self.num_parameters()} values)"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape for every entry."""
        return {name: tuple(t.shape) for name, t in self._entries.items()}

    def num_parameters(self) -> int:
        """Total number of scalars."""
        return sum(t.numel() for t in self._entries.values())

    def subset(self, prefix: str) -> "ParamSet":
        """Entries whose name starts with `prefix`."""
        return type(self)({n: t for n, t in self._entries.items() if n.startswith(prefix)}, check_finite=False)

    def replace(self, name: str, tensor: torch.Tensor) -> "ParamSet":
        """Copy with one entry swapped; the shape must not change."""
        if tuple(tensor.shape) != tuple(self._entries[name].shape):
            raise ShapeError(f"cannot change shape of {name!r}")
        entries = dict(self._entries)
        entries[name] = tensor
        return type(self)(entries, check_finite=False)

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamSet":
        """New set with fn applied to every entry."""
        return type(self)({n: fn(t) for n, t in self._entries.items()})

    def detached(self) -> "ParamSet":
        """Copy cut from any autograd graph."""
        return self.map(lambda t: t.detach().clone())

    @classmethod
    def merge(cls, *sets: Mapping[str, torch.Tensor]) -> "ParamSet":
        """Union of sets with disjoint names."""
        entries: dict[str, torch.Tensor] = {}
        for part in sets:
            for name, tensor in part.items():
                if name in entries:
                    raise ConfigError(f"duplicate parameter name {name!r}")
                entries[name] = tensor
        return cls(entries)


class GradSet(ParamSet):
    """Gradients with the same names and shapes as the ParamSet they came from."""

    def check_parity(self, params: ParamSet) -> None:
        """Raise ShapeError unless names and shapes match params."""
        if self.shapes() != params.shapes():
            raise ShapeError("gradient set does not match parameter set")

    def global_norm(self) -> float:
        """Euclidean norm over all entries."""
        total = sum(float(torch.sum(g.detach().double() ** 2)) for g in self.values())
        return math.sqrt(total)


# ---------------------------------------------------------------------------
# Frozen replay (finite-difference support)
# ---------------------------------------------------------------------------


@dataclass
class _FrozenTape:
    """Values of every surrogate site, recorded once and replayed afterwards."""

    values: list[torch.Tensor] = field(default_factory=list)
    recording: bool = True
    cursor: int = 0

    def frozen(self, compute: Callable[[], torch.Tensor]) -> torch.Tensor:
        if self.recording:
            value = compute().detach().clone()
            self.values.append(value)
            return value
        if self.cursor >= len(self.values):
            raise ShapeError("surrogate replay saw more sites than were recorded")
        value = self.values[self.cursor]
        self.cursor += 1
        return value


_TAPE: contextvars.ContextVar[Optional[_FrozenTape]] = contextvars.ContextVar("frozen_tape", default=None)


@contextmanager
def _use_tape(tape: _FrozenTape, *, recording: bool) -> Iterator[_FrozenTape]:
    tape.recording = recording
    tape.cursor = 0
    token = _TAPE.set(tape)
    try:
        yield tape
    finally:
        _TAPE.reset(token)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable[..., torch.Tensor]] = {}


def primitive(name: str) -> Callable[[Callable[..., torch.Tensor]], Callable[..., torch.Tensor]]:
    """Register a differentiable primitive and guard its output."""

    def decorate(fn: Callable[..., torch.Tensor]) -> Callable[..., torch.Tensor]:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> torch.Tensor:
            out = fn(*args, **kwargs)
            if _CHECK_FINITE.get() and not bool(torch.isfinite(out).all()):
                raise NonFiniteError(name)
            return out

        PRIMITIVES[name] = wrapper
        return wrapper

    return decorate


@primitive("add")
def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


@primitive("sub")
def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a - b


@primitive("mul")
def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


@primitive("scale")
def scale(x: torch.Tensor, c: float | torch.Tensor) -> torch.Tensor:
    return x * c


@primitive("square")
def square(x: torch.Tensor) -> torch.Tensor:
    return x * x


@primitive("matmul")
def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


@primitive("transpose")
def transpose(x: torch.Tensor) -> torch.Tensor:
    """Swap the last two axes."""
    return x.transpose(-1, -2)


@primitive("reshape")
def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    return x.reshape(tuple(shape))


@primitive("layer_norm")
def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-token normalization over the last axis."""
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


@primitive("softmax")
def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


@primitive("gelu")
def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


@primitive("tanh")
def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


@primitive("logistic")
def logistic(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


@primitive("relu")
def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


@primitive("sum")
def sum_(x: torch.Tensor, dim: int | Sequence[int] | None = None) -> torch.Tensor:
    if dim is None:
        return x.sum()
    return x.sum(dim=dim)


@primitive("mean")
def mean(x: torch.Tensor, dim: int | Sequence[int] | None = None) -> torch.Tensor:
    if dim is None:
        return x.mean()
    return x.mean(dim=dim)


@primitive("concat")
def concat(xs: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(list(xs), dim=dim)


@primitive("slice")
def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    return x.narrow(dim, start, stop - start)


@primitive("stop_gradient")
def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Forward identity, zero pullback."""
    tape = _TAPE.get()
    if tape is not None:
        return tape.frozen(lambda: x)
    return x.detach()


class _ScaledStraightThrough(torch.autograd.Function):
    """Forward `forward_fn(x)`; backward `g·v` for x and `<v, x>` for g.

    Equivalent to `sg(forward_fn(x) - g·x) + g·x`, but the forward value is
    `forward_fn(x)` bit for bit.
    """

    @staticmethod
    def forward(ctx: Any, x: torch.Tensor, g: torch.Tensor, forward_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
        ctx.save_for_backward(x, g)
        return forward_fn(x)

    @staticmethod
    def backward(ctx: Any, grad_output: torch.Tensor) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor], None]:
        x, g = ctx.saved_tensors
        grad_x = g * grad_output if ctx.needs_input_grad[0] else None
        grad_g = None
        if ctx.needs_input_grad[1]:
            grad_g = torch.sum(grad_output * x).reshape(g.shape)
        return grad_x, grad_g, None


@primitive("scaled_straight_through")
def scaled_straight_through(
    forward_fn: Callable[[torch.Tensor], torch.Tensor],
    scale: float | torch.Tensor,
    x: torch.Tensor,
) -> torch.Tensor:
    """Apply `forward_fn` with a surrogate Jacobian of `scale·I`."""
    g = scale if isinstance(scale, torch.Tensor) else torch.tensor(float(scale), dtype=x.dtype)
    tape = _TAPE.get()
    if tape is not None:
        residual = tape.frozen(lambda: forward_fn(x) - g * x)
        return residual + g * x
    return _ScaledStraightThrough.apply(x, g, forward_fn)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

LossFn = Callable[[ParamSet], Any]


def value_and_grad(loss_fn: LossFn, params: ParamSet, *, has_aux: bool = False) -> tuple[Any, GradSet]:
    """Evaluate `loss_fn(params)` and its reverse-mode gradient.

    With `has_aux=True` the loss function returns `(scalar, aux)` and the
    first element of the result is `(value, aux)`.
    """
    leaves = {name: t.detach().requires_grad_(True) for name, t in params.items()}
    out = loss_fn(ParamSet(leaves, check_finite=False))
    loss, aux = out if has_aux else (out, None)
    if not isinstance(loss, torch.Tensor) or loss.ndim != 0:
        raise ShapeError("loss function must return a 0-d tensor")
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteError("loss")

    names = list(leaves)
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    else:
        raw = tuple(None for _ in names)

    entries: dict[str, torch.Tensor] = {}
    for name, grad in zip(names, raw):
        if grad is None:
            grad = torch.zeros_like(leaves[name])
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteError(f"grad:{name}")
        entries[name] = grad.detach()
    grads = GradSet(entries, check_finite=False)
    return ((value, aux) if has_aux else value), grads


@dataclass(frozen=True)
class FDReport:
    """Outcome of a finite-difference comparison."""

    max_rel_error: float
    worst_name: Optional[str]
    per_param: dict[str, float]
    surrogate_sites: tuple[str, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _directions(numel: int, *, max_coords: int, n_probes: int, generator: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    if numel <= max_coords:
        return torch.eye(numel, dtype=dtype)
    probes = torch.randn((n_probes, numel), generator=generator, dtype=dtype)
    return probes / probes.norm(dim=1, keepdim=True)


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor, atol: float) -> float:
    diff = float(torch.linalg.vector_norm(analytic - numeric))
    if diff == 0.0:
        return 0.0
    denom = max(float(torch.linalg.vector_norm(analytic)), float(torch.linalg.vector_norm(numeric)), atol)
    return diff / denom


def finite_difference_check(
    loss_fn: LossFn,
    params: ParamSet,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    *,
    max_coords: int = 64,
    n_probes: int = 6,
    seed: int = 0,
    check_raw: bool = True,
    atol: float = 1e-9,
) -> FDReport:
    """Compare `value_and_grad` against central differences.

    Small tensors are probed coordinate by coordinate, larger ones along
    `n_probes` random unit directions. Perturbed losses are evaluated in frozen
    replay: stop-gradient values and straight-through residuals keep their
    base-point values, so the numerical derivative is that of the surrogate.
    With `check_raw`, a second unfrozen pass reports parameters whose plain
    numerical derivative disagrees while the surrogate one agrees.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")

    _, grads = value_and_grad(loss_fn, params)
    tape = _FrozenTape()
    with torch.no_grad(), _use_tape(tape, recording=True):
        loss_fn(params)

    def surrogate_loss(p: ParamSet) -> float:
        with torch.no_grad(), _use_tape(tape, recording=False):
            return float(loss_fn(p))

    def raw_loss(p: ParamSet) -> float:
        with torch.no_grad():
            return float(loss_fn(p))

    generator = torch.Generator().manual_seed(seed)
    per_param: dict[str, float] = {}
    surrogate_sites: list[str] = []
    for name, tensor in params.items():
        base = tensor.detach()
        flat = base.reshape(-1)
        dirs = _directions(flat.numel(), max_coords=max_coords, n_probes=n_probes, generator=generator, dtype=base.dtype)
        analytic = dirs @ grads[name].reshape(-1).to(base.dtype)

        numeric = torch.empty(dirs.shape[0], dtype=base.dtype)
        numeric_raw = torch.empty(dirs.shape[0], dtype=base.dtype)
        for k in range(dirs.shape[0]):
            delta = (step * dirs[k]).reshape(base.shape)
            plus = params.replace(name, base + delta)
            minus = params.replace(name, base - delta)
            numeric[k] = (surrogate_loss(plus) - surrogate_loss(minus)) / (2.0 * step)
            if check_raw:
                numeric_raw[k] = (raw_loss(plus) - raw_loss(minus)) / (2.0 * step)

        err = _rel_error(analytic, numeric, atol)
        per_param[name] = err
        if check_raw and err <= tolerance and _rel_error(analytic, numeric_raw, atol) > tolerance:
            surrogate_sites.append(name)

    worst = max(per_param, key=per_param.__getitem__) if per_param else None
    return FDReport(
        max_rel_error=per_param[worst] if worst is not None else 0.0,
        worst_name=worst,
        per_param=per_param,
        surrogate_sites=tuple(surrogate_sites),
        tolerance=tolerance,
    )
