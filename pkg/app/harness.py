"""
Training, evaluation, ablation sweeps and checkpoints.

Metrics CSV (first line is a schema marker, then a header row):

    #metrics_schema=1
    step,loss,l_q,l_tc,gate,lr,grad_norm,clipped_norm,eval_train,eval_shift

`eval_train` / `eval_shift` are empty unless `train.eval_every > 0`.

Ablation CSV:

    #ablation_schema=1
    knob,value,seed,final_l_q,train_success,heldout_success,heldout_error

Checkpoints are artifact files (see `app.db`) of kind "checkpoint" holding the
config snapshot, every parameter as `param.<name>`, the NormStats, the step
counter, the batch-sampler RNG state and the AdamW moments, so training can be
resumed bit-exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
import torch

from app import diffcore as dc
from app.config import Dims, TrainConfig
from app.db import read_artifact, write_artifact
from app.diffcore import GradSet, ParamSet
from app.errors import (
    CheckpointCorruptError,
    ConfigError,
    DimensionMismatchError,
    NonFiniteError,
    QuoVLAError,
    TrainingDivergedError,
)
from app.logs import log_event
from app.objective import (
    Instance,
    LossTerms,
    NormStats,
    conditioning_prefix,
    dual_branch_loss,
    make_flow_sample,
    normalize_actions,
    random_instance,
    raw_branch_gradient_isolation_check,
    sample_actions,
)
from app.policy import block_param_shapes, expert_param_shapes, gate_param_shapes, init_params
from app.quantizer import gate_value
from app.synthtask import Dataset, Episode, noisy_copy, stack_episodes

CHECKPOINT_KIND = "checkpoint"
METRICS_SCHEMA_VERSION = 1
ABLATION_SCHEMA_VERSION = 1

_NOISE_STREAM = 7
_PROBE_STREAM = 11


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def cosine_warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then half-cosine peak -> lr_floor at total_steps."""
    if not (0 <= step <= config.total_steps):
        raise ConfigError(f"step {step} outside [0, {config.total_steps}]")
    peak, floor = config.learning_rate, config.lr_floor
    warmup = config.warmup_steps
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    decay_steps = config.total_steps - warmup
    if decay_steps <= 0:
        return peak
    progress = (step - warmup) / decay_steps
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to rebuild the policy or resume training."""

    config: TrainConfig
    params: ParamSet
    stats: NormStats
    step: int
    rng_state: torch.Tensor
    optimizer_state: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype


def expected_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape a checkpoint with these dims must hold."""
    return {**block_param_shapes(dims), **expert_param_shapes(dims), **gate_param_shapes(dims)}


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write a checkpoint artifact (replacing any file at path)."""
    arrays: dict[str, np.ndarray] = {
        f"param.{name}": tensor.detach().cpu().numpy() for name, tensor in checkpoint.params.items()
    }
    arrays["stats.lower"] = checkpoint.stats.lower
    arrays["stats.upper"] = checkpoint.stats.upper
    arrays["rng_state"] = checkpoint.rng_state.cpu().numpy()
    arrays.update({f"adam.{key}": value for key, value in checkpoint.optimizer_state.items()})
    meta = {"config": checkpoint.config.to_dict(), "step": checkpoint.step}
    write_artifact(Path(path), CHECKPOINT_KIND, meta, arrays)


def load_checkpoint(path: Path, expected_dims: Optional[Dims] = None) -> Checkpoint:
    """Read a checkpoint; raises DimensionMismatchError if dims disagree."""
    meta, arrays = read_artifact(Path(path), CHECKPOINT_KIND)
    try:
        config = TrainConfig.from_dict(meta["config"])
        stats = NormStats(lower=arrays["stats.lower"], upper=arrays["stats.upper"])
        step = int(meta["step"])
        rng_state = torch.from_numpy(arrays["rng_state"])
    except QuoVLAError:
        raise
    except (KeyError, TypeError, IndexError, ValueError, AttributeError) as exc:
        raise CheckpointCorruptError(f"checkpoint file {path} is incomplete: {exc!r}") from exc
    if expected_dims is not None and expected_dims != config.dims:
        raise DimensionMismatchError(f"checkpoint {path} has dims {config.dims}, expected {expected_dims}")

    params = ParamSet(
        {name[len("param."):]: torch.from_numpy(arr) for name, arr in arrays.items() if name.startswith("param.")}
    )
    if params.shapes() != expected_shapes(config.dims):
        raise DimensionMismatchError(f"parameter shapes in {path} do not match its own dims {config.dims}")
    return Checkpoint(
        config=config,
        params=params,
        stats=stats,
        step=step,
        rng_state=rng_state,
        optimizer_state={name[len("adam."):]: arr for name, arr in arrays.items() if name.startswith("adam.")},
    )


def init_checkpoint(config: TrainConfig, stats: NormStats) -> Checkpoint:
    """Untrained policy at step 0."""
    block, expert, gates = init_params(config.seed, config.dims, dtype=dc.resolve_dtype(config.precision))
    return Checkpoint(
        config=config,
        params=ParamSet.merge(block, expert, gates),
        stats=stats,
        step=0,
        rng_state=torch.Generator().manual_seed(config.seed).get_state(),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    l_q: float
    l_tc: float
    gate: float
    lr: float
    grad_norm: float
    clipped_norm: float
    eval_train: Optional[float] = None
    eval_shift: Optional[float] = None


METRICS_FIELDS = tuple(f.name for f in fields(MetricsRow))


def write_metrics_csv(rows: Iterable[MetricsRow], path: Path) -> None:
    """Write metrics rows behind the schema marker line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"#metrics_schema={METRICS_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({name: "" if value is None else value for name, value in vars(row).items()})


def read_metrics_csv(path: Path) -> list[MetricsRow]:
    """Read a file written by write_metrics_csv; missing evaluations come back as None."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        marker = fh.readline().strip()
        if marker != f"#metrics_schema={METRICS_SCHEMA_VERSION}":
            raise ConfigError(f"{path} is not a metrics file of schema {METRICS_SCHEMA_VERSION}")
        rows = []
        for record in csv.DictReader(fh):
            values: dict[str, Any] = {}
            for name in METRICS_FIELDS:
                raw = record[name]
                if name == "step":
                    values[name] = int(raw)
                else:
                    values[name] = None if raw == "" else float(raw)
            rows.append(MetricsRow(**values))
    return rows


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    metrics: tuple[MetricsRow, ...]
    initial_l_q: float
    final_l_q: float


def _check_data_dims(dims: Dims, prefixes: np.ndarray, experts: np.ndarray) -> None:
    got = (prefixes.shape[-2], prefixes.shape[-1], experts.shape[-2], experts.shape[-1])
    want = (dims.M, dims.d, dims.T, dims.D)
    if got != want:
        raise DimensionMismatchError(f"data has (M, d, T, D) = {got}, model expects {want}")


def _mean_gate(params: ParamSet, config: TrainConfig) -> float:
    if not config.quantization_enabled:
        return 1.0
    if not config.adaptive_ste_enabled:
        return 1.0
    alphas = params.subset("block.").items()
    values = [float(gate_value(float(t), config.quant)) for name, t in alphas if name.endswith("gate.alpha")]
    return sum(values) / len(values)


def _decay_groups(named: Mapping[str, torch.Tensor], weight_decay: float) -> list[dict[str, Any]]:
    # Decoupled weight decay on projection matrices only.
    decay = [t for name, t in named.items() if name.endswith(".weight") or ".attn." in name]
    no_decay = [t for name, t in named.items() if not (name.endswith(".weight") or ".attn." in name)]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def _optimizer_arrays(optimizer: torch.optim.Optimizer, named: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in named.items():
        state = optimizer.state.get(tensor)
        if not state:
            continue
        arrays[f"exp_avg.{name}"] = state["exp_avg"].detach().clone().numpy()
        arrays[f"exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().clone().numpy()
        arrays[f"step.{name}"] = np.asarray(float(state["step"]), dtype=np.float64)
    return arrays


def _restore_optimizer(
    optimizer: torch.optim.Optimizer, named: Mapping[str, torch.Tensor], arrays: Mapping[str, np.ndarray]
) -> None:
    for name, tensor in named.items():
        if f"exp_avg.{name}" not in arrays:
            continue
        optimizer.state[tensor] = {
            "step": torch.tensor(float(arrays[f"step.{name}"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"exp_avg.{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"exp_avg_sq.{name}"].copy()),
        }


@dataclass(frozen=True)
class _Probe:
    """Fixed batch for comparing L_q across the run."""

    H: torch.Tensor
    a: torch.Tensor
    epsilon: torch.Tensor
    tau: torch.Tensor


def _make_probe(prefixes: torch.Tensor, experts: torch.Tensor, config: TrainConfig) -> _Probe:
    gen = torch.Generator().manual_seed(config.seed * 1000 + _PROBE_STREAM)
    n = min(config.batch_size, prefixes.shape[0])
    idx = torch.randperm(prefixes.shape[0], generator=gen)[:n]
    a = experts[idx]
    eps = torch.randn(a.shape, generator=gen, dtype=a.dtype)
    tau = config.tau_min + (config.tau_max - config.tau_min) * torch.rand((n,), generator=gen, dtype=a.dtype)
    return _Probe(H=prefixes[idx], a=a, epsilon=eps, tau=tau)


def probe_l_q(params: ParamSet, probe: _Probe, config: TrainConfig, stats: NormStats) -> float:
    """Flow-matching loss on the fixed probe batch (NaN if it cannot be computed)."""
    sample = make_flow_sample(probe.a, probe.epsilon, probe.tau)
    plain = replace(config, dual_branch_enabled=False)
    try:
        with torch.no_grad():
            return float(dual_branch_loss(params, probe.H, probe.a, sample, plain, stats).fm)
    except NonFiniteError:
        return float("nan")


def train(
    config: TrainConfig,
    dataset: Dataset,
    *,
    resume: Optional[Checkpoint] = None,
    stop_after: Optional[int] = None,
    diagnostic_path: Optional[Path] = None,
    on_row: Optional[Callable[[MetricsRow], None]] = None,
) -> TrainResult:
    """AdamW on the dual-branch loss with cosine warmup and global-norm clipping.

    Deterministic for a fixed config and dataset. With `resume`, training
    continues from the checkpoint's step, parameters, sampler state and
    optimizer moments up to `config.total_steps`. `stop_after` ends the run early
    without changing the schedule, which is still laid out over `total_steps`.
    """
    dtype = dc.resolve_dtype(config.precision)
    prefixes_np, experts_np = stack_episodes(dataset.train)
    _check_data_dims(config.dims, prefixes_np, experts_np)
    prefixes = torch.from_numpy(prefixes_np).to(dtype)
    experts = torch.from_numpy(experts_np).to(dtype)
    stats = dataset.stats

    start = init_checkpoint(config, stats) if resume is None else resume
    if resume is not None:
        if resume.config.dims != config.dims:
            raise DimensionMismatchError("resume checkpoint dims differ from the run config")
        if resume.step > config.total_steps:
            raise ConfigError(f"checkpoint step {resume.step} is past total_steps={config.total_steps}")
    last = config.total_steps if stop_after is None else stop_after
    if not (start.step <= last <= config.total_steps):
        raise ConfigError(f"stop_after={stop_after} outside [{start.step}, {config.total_steps}]")
    named = {name: t.detach().clone().to(dtype).requires_grad_(True) for name, t in start.params.items()}
    optimizer = torch.optim.AdamW(
        _decay_groups(named, config.weight_decay), lr=config.learning_rate, foreach=False
    )
    _restore_optimizer(optimizer, named, start.optimizer_state)
    generator = torch.Generator()
    generator.set_state(start.rng_state.clone())

    probe = _make_probe(prefixes, experts, config)
    initial_l_q = probe_l_q(ParamSet(named, check_finite=False), probe, config, stats)

    log_event(
        "INFO",
        "TRAIN_START",
        source="harness",
        steps=config.total_steps,
        start_step=start.step,
        n_train=prefixes.shape[0],
        params=sum(t.numel() for t in named.values()),
        quantization=config.quantization_enabled,
        dual_branch=config.dual_branch_enabled,
    )

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=config,
            params=ParamSet({n: t.detach().clone() for n, t in named.items()}, check_finite=False),
            stats=stats,
            step=step,
            rng_state=generator.get_state(),
            optimizer_state=_optimizer_arrays(optimizer, named),
        )

    rows: list[MetricsRow] = []
    for step in range(start.step + 1, last + 1):
        idx = torch.randint(prefixes.shape[0], (config.batch_size,), generator=generator)
        H, a = prefixes[idx], experts[idx]
        eps = torch.randn(a.shape, generator=generator, dtype=dtype)
        tau = config.tau_min + (config.tau_max - config.tau_min) * torch.rand(
            (config.batch_size,), generator=generator, dtype=dtype
        )
        sample = make_flow_sample(a, eps, tau)

        def loss_fn(p: ParamSet) -> tuple[torch.Tensor, LossTerms]:
            terms = dual_branch_loss(p, H, a, sample, config, stats)
            return terms.total, terms

        try:
            (_, terms), grads = dc.value_and_grad(loss_fn, ParamSet(named, check_finite=False), has_aux=True)
        except NonFiniteError as exc:
            if diagnostic_path is not None:
                save_checkpoint(snapshot(step - 1), diagnostic_path)
            log_event("ERROR", "TRAIN_DIVERGED", source="harness", step=step, site=exc.site, diagnostic=diagnostic_path)
            raise TrainingDivergedError(step, diagnostic_path) from exc

        lr = cosine_warmup_lr(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for name, tensor in named.items():
            tensor.grad = grads[name].to(dtype).clone()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(list(named.values()), config.grad_clip, foreach=False))
        clipped_norm = GradSet({n: t.grad for n, t in named.items()}, check_finite=False).global_norm()
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)

        due_eval = bool(config.eval_every) and step % config.eval_every == 0
        if step == start.step + 1 or step % config.log_every == 0 or step == last or due_eval:
            values = terms.as_floats()
            row = MetricsRow(
                step=step,
                loss=values["total"],
                l_q=values["fm"],
                l_tc=values["tc"],
                gate=_mean_gate(ParamSet(named, check_finite=False), config),
                lr=lr,
                grad_norm=grad_norm,
                clipped_norm=clipped_norm,
            )
            if due_eval:
                current = snapshot(step)
                row = replace(
                    row,
                    eval_train=evaluate(current, dataset.train, Shift.clean()).success_rate,
                    eval_shift=evaluate(current, dataset.test, Shift.heldout()).success_rate,
                )
            rows.append(row)
            log_event("INFO", "TRAIN_STEP", source="harness", **vars(row))
            if on_row is not None:
                on_row(row)

    final = snapshot(last)
    final_l_q = probe_l_q(final.params, probe, config, stats)
    log_event("INFO", "TRAIN_DONE", source="harness", initial_l_q=initial_l_q, final_l_q=final_l_q)
    return TrainResult(checkpoint=final, metrics=tuple(rows), initial_l_q=initial_l_q, final_l_q=final_l_q)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shift:
    """Evaluation condition: clean split, held-out nuisances, or gaussian prefix noise."""

    kind: Literal["clean", "heldout", "gaussian"]
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("clean", "heldout", "gaussian"):
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if self.sigma < 0 or (self.kind != "gaussian" and self.sigma != 0):
            raise ConfigError("sigma must be nonnegative and only set for gaussian shifts")

    @classmethod
    def clean(cls) -> "Shift":
        return cls("clean")

    @classmethod
    def heldout(cls) -> "Shift":
        return cls("heldout")

    @classmethod
    def gaussian(cls, sigma: float) -> "Shift":
        return cls("gaussian", sigma)

    @classmethod
    def parse(cls, text: str, *, default_sigma: float = 0.0) -> "Shift":
        """`clean`, `heldout`, `gaussian:<sigma>`, or bare `gaussian` for `default_sigma`."""
        kind, _, value = text.partition(":")
        if kind == "gaussian":
            if not value:
                return cls.gaussian(default_sigma)
            try:
                return cls.gaussian(float(value))
            except ValueError:
                raise ConfigError(f"bad gaussian shift {text!r}; expected gaussian:<sigma>") from None
        if value:
            raise ConfigError(f"shift {kind!r} takes no value")
        return cls(kind)  # type: ignore[arg-type]

    def label(self) -> str:
        return f"gaussian:{self.sigma:g}" if self.kind == "gaussian" else self.kind

    def episodes(self, dataset: Dataset) -> tuple[Episode, ...]:
        """Clean evaluates the training split; the other shifts use held-out nuisances."""
        return dataset.train if self.kind == "clean" else dataset.test


@dataclass(frozen=True)
class EvalResult:
    shift: str
    success_rate: float
    mean_error: float
    endpoint_error: float
    n: int


def evaluate(
    checkpoint: Checkpoint,
    episodes: Sequence[Episode],
    shift: Shift = Shift("clean"),
    *,
    seed: Optional[int] = None,
) -> EvalResult:
    """Sample one chunk per episode and score it against the expert.

    Errors are Euclidean distances per step in normalized action units. An
    episode succeeds when its endpoint error is at most `eval.rho` and its mean
    per-step error is at most `eval.step_error_threshold`.
    """
    config = checkpoint.config
    seed = config.eval.seed if seed is None else seed
    prefixes, experts = stack_episodes(episodes)
    _check_data_dims(config.dims, prefixes, experts)
    if shift.kind == "gaussian":
        rng = np.random.default_rng([seed, _NOISE_STREAM])
        prefixes = np.stack([noisy_copy(p, shift.sigma, rng) for p in prefixes])

    dtype = checkpoint.dtype
    with torch.no_grad():
        H = torch.from_numpy(prefixes).to(dtype)
        prefix = conditioning_prefix(
            checkpoint.params,
            H,
            config.dims,
            config.quant,
            quantization_enabled=config.quantization_enabled,
            adaptive_ste=config.adaptive_ste_enabled,
        )
        actions = sample_actions(prefix, checkpoint.params, config.dims, config.eval.flow_steps, seed)
        pred = normalize_actions(actions, checkpoint.stats)
        target = normalize_actions(torch.from_numpy(experts).to(dtype), checkpoint.stats)
        per_step = torch.linalg.vector_norm(pred - target, dim=-1).double().numpy()

    endpoint = per_step[:, -1]
    mean_step = per_step.mean(axis=1)
    success = (endpoint <= config.eval.rho) & (mean_step <= config.eval.step_error_threshold)
    return EvalResult(
        shift=shift.label(),
        success_rate=float(success.mean()),
        mean_error=float(mean_step.mean()),
        endpoint_error=float(endpoint.mean()),
        n=len(episodes),
    )


DEFAULT_SIGMAS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)


def noise_sweep(
    checkpoint: Checkpoint,
    dataset: Dataset,
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    *,
    seed: Optional[int] = None,
) -> list[EvalResult]:
    """Held-out evaluation under increasing gaussian prefix noise."""
    results = []
    for sigma in sigmas:
        shift = Shift.gaussian(sigma)
        results.append(evaluate(checkpoint, shift.episodes(dataset), shift, seed=seed))
    return results


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def _lambda_grid() -> tuple[float, ...]:
    return tuple(round(0.1 * k, 1) for k in range(11))


def _set_dims(config: TrainConfig, **changes: Any) -> TrainConfig:
    return replace(config, dims=replace(config.dims, **changes))


def _set_quantization(config: TrainConfig, on: bool) -> TrainConfig:
    if on:
        return replace(config, quantization_enabled=True)
    return replace(config, quantization_enabled=False, dual_branch_enabled=False)


def _set_dual_branch(config: TrainConfig, on: bool) -> TrainConfig:
    if on and not config.quantization_enabled:
        raise ConfigError("dual_branch=on needs quantization enabled in the base config")
    return replace(config, dual_branch_enabled=on)


def _set_constraints(config: TrainConfig, on: bool) -> TrainConfig:
    # Constraints off keeps the raw reference branch but removes its penalty.
    lambda_tc = config.tc.lambda_tc if on else 0.0
    return replace(config, tc=replace(config.tc, lambda_tc=lambda_tc))


@dataclass(frozen=True)
class Knob:
    grid: tuple[Any, ...]
    apply: Callable[[TrainConfig, Any], TrainConfig]
    kind: type


KNOBS: dict[str, Knob] = {
    "L_q": Knob((1, 2, 6), lambda c, v: _set_dims(c, L_q=v), int),
    "b_q": Knob((4, 8, 16), lambda c, v: replace(c, quant=replace(c.quant, bits=v)), int),
    "adaptive_ste": Knob((True, False), lambda c, v: replace(c, adaptive_ste_enabled=v), bool),
    "dual_branch": Knob((True, False), _set_dual_branch, bool),
    "constraints": Knob((True, False), _set_constraints, bool),
    "lambda_tc": Knob(_lambda_grid(), lambda c, v: replace(c, tc=replace(c.tc, lambda_tc=v)), float),
    "quantization": Knob((True, False), _set_quantization, bool),
}


def _knob(name: str) -> Knob:
    if name not in KNOBS:
        raise ConfigError(f"unknown ablation knob {name!r}; valid knobs: {', '.join(KNOBS)}")
    return KNOBS[name]


def parse_knob_value(knob: str, text: str) -> Any:
    """Parse one CLI value for `knob` (`on`/`off` for switches)."""
    kind = _knob(knob).kind
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("on", "true", "1", "yes"):
            return True
        if lowered in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"knob {knob} takes on/off, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"knob {knob} takes {kind.__name__} values, got {text!r}") from None


def default_grid(knob: str) -> tuple[Any, ...]:
    """Values swept for knob when none are given."""
    return _knob(knob).grid


def configure_ablation(base: TrainConfig, knob: str, value: Any) -> TrainConfig:
    """Run config for one knob value."""
    return _knob(knob).apply(base, value)


@dataclass(frozen=True)
class AblationRow:
    knob: str
    value: Any
    seed: int
    final_l_q: float
    train_success: float
    heldout_success: float
    heldout_error: float


def ablate(
    base: TrainConfig,
    knob: str,
    values: Optional[Sequence[Any]],
    dataset: Dataset,
    seeds: Sequence[int] = (0,),
) -> list[AblationRow]:
    """One train + evaluate run per (value, seed)."""
    spec = _knob(knob)
    grid = tuple(values) if values else spec.grid
    configs = [(value, spec.apply(base, value)) for value in grid]
    log_event("INFO", "ABLATE_START", source="harness", knob=knob, values=len(grid), seeds=len(seeds))
    rows: list[AblationRow] = []
    for value, config in configs:
        for seed in seeds:
            run_config = replace(config, seed=seed)
            result = train(run_config, dataset)
            clean = evaluate(result.checkpoint, dataset.train, Shift.clean())
            heldout = evaluate(result.checkpoint, dataset.test, Shift.heldout())
            row = AblationRow(
                knob=knob,
                value=value,
                seed=seed,
                final_l_q=result.final_l_q,
                train_success=clean.success_rate,
                heldout_success=heldout.success_rate,
                heldout_error=heldout.mean_error,
            )
            rows.append(row)
            log_event("INFO", "ABLATE_RUN", source="harness", **vars(row))
    log_event("INFO", "ABLATE_DONE", source="harness", knob=knob, runs=len(rows))
    return rows


@dataclass(frozen=True)
class AblationSummary:
    value: Any
    n: int
    mean_heldout: float
    std_heldout: float
    mean_train: float
    mean_l_q: float


@dataclass(frozen=True)
class EffectSize:
    """First grid value minus second: mean difference and pooled-sd standardized size."""

    mean_difference: float
    standardized: Optional[float]


def summarize_ablation(rows: Sequence[AblationRow]) -> tuple[list[AblationSummary], Optional[EffectSize]]:
    """Per-value means across seeds; an effect size when exactly two values ran."""
    order: list[Any] = []
    for row in rows:
        if row.value not in order:
            order.append(row.value)
    summaries = []
    groups: dict[Any, np.ndarray] = {}
    for value in order:
        picked = [r for r in rows if r.value == value]
        heldout = np.array([r.heldout_success for r in picked])
        groups[value] = heldout
        summaries.append(
            AblationSummary(
                value=value,
                n=len(picked),
                mean_heldout=float(heldout.mean()),
                std_heldout=float(heldout.std(ddof=1)) if len(picked) > 1 else 0.0,
                mean_train=float(np.mean([r.train_success for r in picked])),
                mean_l_q=float(np.mean([r.final_l_q for r in picked])),
            )
        )
    if len(order) != 2:
        return summaries, None
    first, second = (groups[v] for v in order)
    diff = float(first.mean() - second.mean())
    if len(first) < 2 or len(second) < 2:
        return summaries, EffectSize(diff, None)
    pooled = math.sqrt(
        ((len(first) - 1) * first.var(ddof=1) + (len(second) - 1) * second.var(ddof=1)) / (len(first) + len(second) - 2)
    )
    return summaries, EffectSize(diff, diff / pooled if pooled > 0 else None)


ABLATION_FIELDS = tuple(f.name for f in fields(AblationRow))


def write_ablation_csv(rows: Iterable[AblationRow], path: Path) -> None:
    """Write ablation rows behind the schema marker line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"#ablation_schema={ABLATION_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(vars(row))


def format_ablation_table(summaries: Sequence[AblationSummary], knob: str, effect: Optional[EffectSize]) -> str:
    """Plain-text comparison table, one line per knob value."""
    header = f"{knob:>12} {'n':>3} {'heldout':>8} {'sd':>6} {'train':>6} {'l_q':>9}"
    lines = [header, "-" * len(header)]
    for s in summaries:
        lines.append(
            f"{str(s.value):>12} {s.n:>3} {s.mean_heldout:>8.3f} {s.std_heldout:>6.3f} {s.mean_train:>6.3f} {s.mean_l_q:>9.4g}"
        )
    if effect is not None:
        std = "n/a" if effect.standardized is None else f"{effect.standardized:.3f}"
        lines.append(f"effect: mean difference {effect.mean_difference:+.3f}, standardized {std}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

GRADCHECK_DIMS = Dims(M=3, d=4, n_heads=2, d_ff=6, L_q=1, T=4, D=2, expert_hidden=6, n_freqs=2)


@dataclass(frozen=True)
class GradcheckResult:
    seed: int
    max_rel_error: float
    worst_name: Optional[str]
    hinge_active: bool
    isolated: bool

    def passed(self, tolerance: float) -> bool:
        return self.isolated and self.max_rel_error <= tolerance


def gradcheck(
    config: TrainConfig,
    n_instances: int = 20,
    *,
    seed: int = 0,
    tolerance: float = 1e-6,
    step: float = 1e-5,
) -> list[GradcheckResult]:
    """Finite differences and raw-branch isolation on random float64 instances."""
    if n_instances < 1:
        raise ConfigError("gradcheck needs at least one instance")
    config = replace(config, precision="float64")
    results = []
    for k in range(n_instances):
        instance = random_instance(seed + k, config)

        def terms_at(p: ParamSet, instance: Instance = instance) -> LossTerms:
            return dual_branch_loss(p, instance.H, instance.a, instance.sample, instance.config, instance.stats)

        def loss_fn(p: ParamSet) -> torch.Tensor:
            return terms_at(p).total

        with torch.no_grad():
            terms = terms_at(instance.params)
        report = dc.finite_difference_check(
            loss_fn, instance.params, step=step, tolerance=tolerance, max_coords=16, n_probes=4, seed=k, check_raw=False
        )
        result = GradcheckResult(
            seed=seed + k,
            max_rel_error=report.max_rel_error,
            worst_name=report.worst_name,
            hinge_active=float(terms.tc) > 0.0,
            isolated=raw_branch_gradient_isolation_check(instance),
        )
        results.append(result)
        log_event("INFO", "GRADCHECK_INSTANCE", source="harness", **vars(result))
    return results
