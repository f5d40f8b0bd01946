"""
Finite-world oracles for the action quotient and action-sensitive complexity.

- `bayes_law`: the conditional trajectory law P(A | latent). For proper scoring
  losses (log, Brier) this is exactly the Bayes-optimal prediction, so no
  numerical minimization is needed.
- `build_quotient`: latents grouped by equal laws (total variation within tol).
  Classes are formed leader-style: a latent joins the first class whose
  representative law is within tol, which always yields an equivalence
  relation.
- `check_sufficiency` / `check_minimality` / `is_refinement`: the factorization
  and coarseness properties of the quotient.
- `estimate_action_complexity`: Monte-Carlo empirical Rademacher complexity
  of a trajectory-prediction class under the normalized inner product
  <u, v>_T = (1/T) sum_t <u_t, v_t>, scaled by sqrt(T).
- `check_injectivity`: exact pairwise collision search over an encoder.

World files are JSON:

    {
      "inputs": ["x0", "x1", ...],
      "latent_of": {"x0": "h0", "x1": "h0", ...},
      "trajectories": ["a0", "a1", ...],
      "joint": [[p(x0,a0), p(x0,a1), ...], ...]      # rows follow "inputs"
    }
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from app.errors import ConfigError, ShapeError, WorldError

LAW_ATOL = 1e-12
DEFAULT_TOL = 1e-9

ActionLaw = np.ndarray
Predictor = Callable[[Hashable], np.ndarray]


@dataclass(frozen=True)
class DiscreteWorld:
    """Finite joint law over (input, trajectory) plus a latent map on inputs."""

    inputs: tuple[Hashable, ...]
    latent_of: Mapping[Hashable, Hashable]
    trajectories: tuple[Hashable, ...]
    joint: np.ndarray

    def __post_init__(self) -> None:
        joint = np.asarray(self.joint, dtype=np.float64)
        object.__setattr__(self, "joint", joint)
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if len(set(self.inputs)) != len(self.inputs) or len(set(self.trajectories)) != len(self.trajectories):
            raise WorldError("input and trajectory ids must be unique")
        if joint.shape != (len(self.inputs), len(self.trajectories)):
            raise WorldError(f"joint table shape {joint.shape} does not match |X| x |A|")
        if not np.all(np.isfinite(joint)) or np.any(joint < 0):
            raise WorldError("joint table must be finite and nonnegative")
        if abs(float(joint.sum()) - 1.0) > LAW_ATOL * max(1, joint.size):
            raise WorldError(f"joint table sums to {joint.sum()!r}, not 1")
        if np.any(joint.sum(axis=1) <= 0):
            raise WorldError("every input needs positive marginal probability")
        missing = [x for x in self.inputs if x not in self.latent_of]
        if missing:
            raise WorldError(f"inputs without latent: {missing[:5]}")

    def latents(self) -> tuple[Hashable, ...]:
        """Latent ids in order of first appearance."""
        return tuple(dict.fromkeys(self.latent_of[x] for x in self.inputs))


def _check_law(law: np.ndarray, where: str) -> None:
    if np.any(law < 0) or abs(float(law.sum()) - 1.0) > LAW_ATOL:
        raise WorldError(f"{where} is not a normalized law")


def bayes_law(world: DiscreteWorld) -> dict[Hashable, ActionLaw]:
    """P(A | latent) for every latent of the world."""
    mass: dict[Hashable, np.ndarray] = {}
    for row, x in enumerate(world.inputs):
        h = world.latent_of[x]
        mass[h] = mass[h] + world.joint[row] if h in mass else world.joint[row].copy()
    laws: dict[Hashable, ActionLaw] = {}
    for h in world.latents():
        total = float(mass[h].sum())
        if total <= 0:
            raise WorldError(f"latent {h!r} has zero probability mass")
        law = mass[h] / total
        _check_law(law, f"law of latent {h!r}")
        laws[h] = law
    return laws


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Half the L1 distance between two laws."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class Partition:
    """Total map latent -> class id."""

    assignment: Mapping[Hashable, Hashable]

    def classes(self) -> dict[Hashable, list[Hashable]]:
        groups: dict[Hashable, list[Hashable]] = defaultdict(list)
        for latent, cls in self.assignment.items():
            groups[cls].append(latent)
        return dict(groups)

    @property
    def n_classes(self) -> int:
        return len(set(self.assignment.values()))

    @classmethod
    def from_map(cls, representation: Mapping[Hashable, Hashable]) -> "Partition":
        """Partition induced by the fibers of a representation."""
        return cls(dict(representation))

    def merged(self, a: Hashable, b: Hashable) -> "Partition":
        return Partition({h: (a if c == b else c) for h, c in self.assignment.items()})


def build_quotient(laws: Mapping[Hashable, ActionLaw], tol: float = DEFAULT_TOL) -> Partition:
    """Group latents whose laws agree within `tol` in total variation."""
    if tol < 0:
        raise ConfigError("quotient tolerance must be nonnegative")
    representatives: list[tuple[int, np.ndarray]] = []
    assignment: dict[Hashable, int] = {}
    for h, law in laws.items():
        for cls, rep in representatives:
            if total_variation(law, rep) <= tol:
                assignment[h] = cls
                break
        else:
            cls = len(representatives)
            representatives.append((cls, law))
            assignment[h] = cls
    return Partition(assignment)


def _representatives(partition: Partition, laws: Mapping[Hashable, ActionLaw]) -> dict[Hashable, ActionLaw]:
    return {cls: laws[members[0]] for cls, members in partition.classes().items()}


def check_sufficiency(partition: Partition, laws: Mapping[Hashable, ActionLaw], tol: float = DEFAULT_TOL) -> bool:
    """True iff every law equals its class representative within tol."""
    if set(partition.assignment) != set(laws):
        raise WorldError("partition and laws cover different latents")
    reps = _representatives(partition, laws)
    return all(total_variation(laws[h], reps[c]) <= tol for h, c in partition.assignment.items())


def check_minimality(partition: Partition, laws: Mapping[Hashable, ActionLaw], tol: float = DEFAULT_TOL) -> bool:
    """True iff merging any two classes breaks sufficiency."""
    if not check_sufficiency(partition, laws, tol):
        raise WorldError("minimality is only defined for sufficient partitions")
    reps = _representatives(partition, laws)
    ids = list(reps)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if check_sufficiency(partition.merged(a, b), laws, tol):
                return False
    return True


def is_refinement(fine: Partition, coarse: Partition) -> bool:
    """True iff every class of `fine` sits inside one class of `coarse`."""
    if set(fine.assignment) != set(coarse.assignment):
        raise WorldError("partitions cover different latents")
    return all(len({coarse.assignment[h] for h in members}) == 1 for members in fine.classes().values())


def class_decoder(partition: Partition, laws: Mapping[Hashable, ActionLaw]) -> dict[Hashable, ActionLaw]:
    """Map each quotient class to its action law."""
    return _representatives(partition, laws)


def factor_law(partition: Partition, decoder: Mapping[Hashable, ActionLaw], latent: Hashable) -> ActionLaw:
    """Law of a latent recovered through its quotient class."""
    return decoder[partition.assignment[latent]]


# ---------------------------------------------------------------------------
# Random worlds (used by the sufficiency / minimality sweep)
# ---------------------------------------------------------------------------


def random_world(
    rng: np.random.Generator,
    *,
    max_inputs: int = 64,
    max_trajectories: int = 8,
) -> DiscreteWorld:
    """World whose latents share a few distinct action laws.

    Every input of a latent gets the latent's prototype law, so P(A | h) equals
    the prototype and several latents can share it.
    """
    n_traj = int(rng.integers(2, max_trajectories + 1))
    n_inputs = int(rng.integers(2, max_inputs + 1))
    n_latents = int(rng.integers(1, n_inputs + 1))
    n_protos = int(rng.integers(1, n_latents + 1))

    prototypes = rng.dirichlet(np.ones(n_traj), size=n_protos)
    proto_of_latent = np.concatenate([np.arange(n_protos), rng.integers(0, n_protos, n_latents - n_protos)])
    latent_of_input = np.concatenate([np.arange(n_latents), rng.integers(0, n_latents, n_inputs - n_latents)])
    rng.shuffle(latent_of_input)

    p_x = rng.dirichlet(np.ones(n_inputs))
    joint = p_x[:, None] * prototypes[proto_of_latent[latent_of_input]]
    joint = joint / joint.sum()
    inputs = tuple(f"x{i}" for i in range(n_inputs))
    return DiscreteWorld(
        inputs=inputs,
        latent_of={x: f"h{latent_of_input[i]}" for i, x in enumerate(inputs)},
        trajectories=tuple(f"a{j}" for j in range(n_traj)),
        joint=joint,
    )


def random_refinement(partition: Partition, rng: np.random.Generator) -> Partition:
    """Split each class into random sub-classes."""
    assignment: dict[Hashable, Hashable] = {}
    for cls, members in partition.classes().items():
        n_parts = int(rng.integers(1, len(members) + 1))
        for h in members:
            assignment[h] = (cls, int(rng.integers(0, n_parts)))
    return Partition(assignment)


def random_partition(latents: Sequence[Hashable], rng: np.random.Generator) -> Partition:
    """Arbitrary labelling of latents with up to len(latents) codes."""
    n_codes = int(rng.integers(1, len(latents) + 1))
    return Partition({h: int(rng.integers(0, n_codes)) for h in latents})


@dataclass(frozen=True)
class SweepReport:
    n_worlds: int
    n_representations: int
    failures: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.failures


def sufficiency_sweep(
    n_worlds: int,
    seed: int,
    *,
    n_representations: int = 100,
    max_inputs: int = 64,
    max_trajectories: int = 8,
    tol: float = DEFAULT_TOL,
) -> SweepReport:
    """Check quotient sufficiency, minimality and coarseness on random worlds.

    For each world, `n_representations` sufficient representations are drawn
    (alternating refinements of the quotient and arbitrary partitions that
    happen to be sufficient) and each must refine the quotient.
    """
    rng = np.random.default_rng(seed)
    failures: list[str] = []
    checked = 0
    for w in range(n_worlds):
        world = random_world(rng, max_inputs=max_inputs, max_trajectories=max_trajectories)
        laws = bayes_law(world)
        quotient = build_quotient(laws, tol)
        if not check_sufficiency(quotient, laws, tol):
            failures.append(f"world {w}: quotient is not sufficient")
            continue
        if not check_minimality(quotient, laws, tol):
            failures.append(f"world {w}: quotient is not minimal")
        latents = list(laws)
        drawn = 0
        attempts = 0
        while drawn < n_representations and attempts < 20 * n_representations:
            attempts += 1
            candidate = random_refinement(quotient, rng) if attempts % 2 else random_partition(latents, rng)
            if not check_sufficiency(candidate, laws, tol):
                continue
            drawn += 1
            if not is_refinement(candidate, quotient):
                failures.append(f"world {w}: sufficient representation does not refine the quotient")
        checked += drawn
    return SweepReport(n_worlds=n_worlds, n_representations=checked, failures=tuple(failures))


# ---------------------------------------------------------------------------
# Action-sensitive complexity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionClass:
    """Finite class of trajectory predictors input id -> (T, D) array."""

    predictors: tuple[Predictor, ...]
    names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.predictors:
            raise ConfigError("function class must be nonempty")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"f{i}" for i in range(len(self.predictors))))

    def subclass(self, indices: Iterable[int]) -> "FunctionClass":
        idx = list(indices)
        return FunctionClass(tuple(self.predictors[i] for i in idx), tuple(self.names[i] for i in idx))


def _outputs(fc: FunctionClass, inputs: Sequence[Hashable]) -> list[np.ndarray]:
    outputs = []
    shape: Optional[tuple[int, ...]] = None
    for f in fc.predictors:
        out = np.stack([np.asarray(f(x), dtype=np.float64) for x in inputs])
        if out.ndim != 3 or not np.all(np.isfinite(out)):
            raise ShapeError("predictors must return finite (T, D) arrays")
        if shape is not None and out.shape != shape:
            raise ShapeError("predictors disagree on trajectory shape")
        shape = out.shape
        outputs.append(out)
    return outputs


def rademacher_signs(n_draws: int, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """(n_draws, *shape) array of +-1; draw k uses its own child seed."""
    children = np.random.SeedSequence(seed).spawn(n_draws)
    return np.stack([np.random.default_rng(child).integers(0, 2, size=shape) * 2 - 1 for child in children]).astype(
        np.float64
    )


def action_complexity_draws(fc: FunctionClass, inputs: Sequence[Hashable], n_draws: int, seed: int) -> np.ndarray:
    """Per-draw sup_f (1/n) sum_i <sigma_i, f(x_i)>_T, shape (n_draws,)."""
    if n_draws < 1:
        raise ConfigError("n_draws must be >= 1")
    if not inputs:
        raise ConfigError("need at least one input")
    outputs = _outputs(fc, inputs)
    n, T, D = outputs[0].shape
    sigma = rademacher_signs(n_draws, (n, T, D), seed)
    # Each predictor's correlations are computed on their own, so a predictor
    # scores the same number in any class that contains it.
    scores = np.stack([np.einsum("kitd,itd->k", sigma, out) / (n * T) for out in outputs])
    return scores.max(axis=0)


def estimate_action_complexity(fc: FunctionClass, inputs: Sequence[Hashable], n_draws: int, seed: int) -> float:
    """sqrt(T) * mean over draws of the per-draw supremum."""
    sups = action_complexity_draws(fc, inputs, n_draws, seed)
    T = np.asarray(fc.predictors[0](inputs[0])).shape[0]
    return math.sqrt(T) * float(np.mean(sups))


def induced_function_class(
    inputs: Sequence[Hashable],
    representation: Mapping[Hashable, Hashable],
    *,
    n_heads: int,
    T: int,
    D: int,
    seed: int,
    scale: float = 1.0,
) -> FunctionClass:
    """Predictors x -> g(r(x)) with g a random lookup table over codes of r.

    Heads are bounded (uniform in [-scale, scale]), so classes built on
    different representations are comparable.
    """
    codes = list(dict.fromkeys(representation[x] for x in inputs))
    rng = np.random.default_rng(seed)
    predictors = []
    for _ in range(n_heads):
        table = {c: rng.uniform(-scale, scale, size=(T, D)) for c in codes}
        predictors.append(lambda x, table=table: table[representation[x]])
    return FunctionClass(tuple(predictors))


def complexity_gap(
    inputs: Sequence[Hashable],
    quotient_rep: Mapping[Hashable, Hashable],
    raw_rep: Mapping[Hashable, Hashable],
    *,
    n_heads: int = 32,
    T: int = 8,
    D: int = 2,
    n_draws: int = 200,
    seed: int = 0,
) -> dict[str, float]:
    """Complexity estimates for classes factoring through two representations."""
    fc_q = induced_function_class(inputs, quotient_rep, n_heads=n_heads, T=T, D=D, seed=seed)
    fc_r = induced_function_class(inputs, raw_rep, n_heads=n_heads, T=T, D=D, seed=seed)
    est_q = estimate_action_complexity(fc_q, inputs, n_draws, seed)
    est_r = estimate_action_complexity(fc_r, inputs, n_draws, seed)
    return {"quotient": est_q, "raw": est_r, "gap": est_r - est_q}


# ---------------------------------------------------------------------------
# Injectivity
# ---------------------------------------------------------------------------


def _canonical_bytes(array: Any) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    # Normalize -0.0 so equal values serialize identically.
    arr = arr + 0.0
    return repr(arr.shape).encode() + b"|" + arr.tobytes()


def check_injectivity(
    encoder: Callable[[Hashable], Any] | Mapping[Hashable, Any],
    inputs: Iterable[Hashable],
) -> list[tuple[Hashable, Hashable]]:
    """All pairs of inputs with identical encodings (empty means injective)."""
    encode = encoder.__getitem__ if isinstance(encoder, Mapping) else encoder
    seen: dict[bytes, list[Hashable]] = defaultdict(list)
    for x in inputs:
        seen[_canonical_bytes(encode(x))].append(x)
    collisions: list[tuple[Hashable, Hashable]] = []
    for group in seen.values():
        for i, a in enumerate(group):
            for b in group[i + 1 :]:
                collisions.append((a, b))
    return collisions


# ---------------------------------------------------------------------------
# Reports and world files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuotientReport:
    n_inputs: int
    n_latents: int
    n_classes: int
    sufficient: bool
    minimal: bool
    round_trip: bool

    @property
    def ok(self) -> bool:
        return self.sufficient and self.minimal and self.round_trip


def verify_world(world: DiscreteWorld, tol: float = DEFAULT_TOL) -> QuotientReport:
    """Run every quotient oracle on one world."""
    laws = bayes_law(world)
    partition = build_quotient(laws, tol)
    sufficient = check_sufficiency(partition, laws, tol)
    minimal = check_minimality(partition, laws, tol) if sufficient else False
    decoder = class_decoder(partition, laws)
    round_trip = all(total_variation(factor_law(partition, decoder, h), law) <= tol for h, law in laws.items())
    return QuotientReport(
        n_inputs=len(world.inputs),
        n_latents=len(laws),
        n_classes=partition.n_classes,
        sufficient=sufficient,
        minimal=minimal,
        round_trip=round_trip,
    )


def _json_id(value: Hashable) -> Any:
    return list(value) if isinstance(value, tuple) else value


def _from_json_id(value: Any) -> Hashable:
    return tuple(_from_json_id(v) for v in value) if isinstance(value, list) else value


def save_world(world: DiscreteWorld, path: Path) -> None:
    """Write a world file readable by load_world."""
    data = {
        "inputs": [_json_id(x) for x in world.inputs],
        "latent_of": [[_json_id(x), _json_id(world.latent_of[x])] for x in world.inputs],
        "trajectories": [_json_id(a) for a in world.trajectories],
        "joint": world.joint.tolist(),
    }
    Path(path).write_text(json.dumps(data, indent=2), encoding="utf-8")


def load_world(path: Path) -> DiscreteWorld:
    """Read a JSON world file; `latent_of` may be an object or a list of pairs."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise WorldError(f"world file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise WorldError(f"world file {path} is not valid JSON: {exc}") from exc
    try:
        raw_latents = data["latent_of"]
        pairs = raw_latents.items() if isinstance(raw_latents, dict) else raw_latents
        return DiscreteWorld(
            inputs=tuple(_from_json_id(x) for x in data["inputs"]),
            latent_of={_from_json_id(x): _from_json_id(h) for x, h in pairs},
            trajectories=tuple(_from_json_id(a) for a in data["trajectories"]),
            joint=np.asarray(data["joint"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, WorldError):
            raise
        raise WorldError(f"world file {path} does not follow the schema: {exc}") from exc
