"""
Command-line entry point for QuoVLA.

    quovla gen-data --out data/synth.db [--set task.n_tasks=4]
    quovla train --data data/synth.db --out runs/ckpt.db [--metrics runs/metrics.csv] [--plot runs/]
    quovla eval --checkpoint runs/ckpt.db --data data/synth.db [--shift heldout] [--sweep] [--plot runs/]
    quovla ablate --data data/synth.db --knob b_q [--values 4,8,16] [--seeds 0,1,2] [--out runs/ablate.csv]
    quovla gradcheck [--instances 20]
    quovla quotient-verify (--world world.json | --random 100 | --data data/synth.db)

Config flags (`--config`, `--preset`, `--set section.key=value` and the
shortcuts `--steps`, `--seed`, `--lr`) apply to every subcommand that builds a
TrainConfig; `task.*` keys configure the synthetic data.

Exit codes: 0 success, 1 usage error, 2 runtime failure. On failure one JSON
object `{"error": <class>, "message": <text>}` is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from app import harness
from app.config import TrainConfig, load_config, parse_override, read_table
from app.errors import ConfigError, QuoVLAError
from app.logs import configure_logging, log_event
from app.quotientlab import (
    DiscreteWorld,
    Partition,
    bayes_law,
    build_quotient,
    complexity_gap,
    load_world,
    sufficiency_sweep,
    verify_world,
)
from app.synthtask import (
    TaskSpec,
    generate_dataset,
    identity_discretizer,
    load_dataset,
    save_dataset,
    task_signature_discretizer,
    world_from_dataset,
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML config file.")
    parser.add_argument("--preset", default="desk", help="Base preset (desk or reported).")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value; may be repeated.",
    )
    parser.add_argument("--steps", type=int, default=None, help="Shortcut for train.total_steps.")
    parser.add_argument("--seed", type=int, default=None, help="Shortcut for train.seed.")
    parser.add_argument("--lr", type=float, default=None, help="Shortcut for train.learning_rate.")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quovla",
        description="Quantized action-quotient bottleneck: training, evaluation and theory checks.",
    )
    parser.add_argument("--log-dir", type=Path, default=Path("logs"), help="Directory for quovla.log.")
    parser.add_argument("--no-log-file", action="store_true", help="Do not write a log file.")
    parser.add_argument("--quiet", action="store_true", help="Only print ERROR log lines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a synthetic dataset file.")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="Train a policy on a dataset file.")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Checkpoint path.")
    p.add_argument("--metrics", type=Path, default=None, help="Metrics CSV path.")
    p.add_argument("--resume", type=Path, default=None, help="Continue from this checkpoint.")
    p.add_argument(
        "--stop-after", type=int, default=None, metavar="STEP", help="End early at STEP; the schedule still spans --steps."
    )
    p.add_argument("--plot", type=Path, default=None, metavar="DIR", help="Write loss curves into DIR.")

    p = sub.add_parser("eval", help="Evaluate a checkpoint.")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument(
        "--shift",
        action="append",
        default=[],
        help=(
            "clean, heldout, gaussian:<sigma>, or gaussian for the task sigma_obs; "
            "may be repeated (default: clean and heldout)."
        ),
    )
    p.add_argument("--sweep", action="store_true", help="Held-out gaussian sweep over sigma 0..0.10.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plot", type=Path, default=None, metavar="DIR", help="Write the robustness curve into DIR.")

    p = sub.add_parser("ablate", help="Train and evaluate one run per knob value and seed.")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--knob", required=True, help=f"One of: {', '.join(harness.KNOBS)}.")
    p.add_argument("--values", default=None, help="Comma-separated values (default: the knob's grid).")
    p.add_argument("--seeds", default="0", help="Comma-separated training seeds.")
    p.add_argument("--out", type=Path, default=None, help="Ablation CSV path.")
    p.add_argument("--plot", type=Path, default=None, metavar="DIR")

    p = sub.add_parser("gradcheck", help="Finite-difference and stop-gradient checks of the full loss.")
    _add_config_flags(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--fd-step", type=float, default=1e-5)

    p = sub.add_parser("quotient-verify", help="Run the quotient oracles.")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--world", type=Path, help="JSON world file.")
    source.add_argument("--random", type=int, metavar="N", help="Sweep N random worlds.")
    source.add_argument("--data", type=Path, help="Dataset file; checks the synthetic quotient.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-9)
    return parser


def _split_overrides(overrides: Sequence[str]) -> tuple[list[str], list[str]]:
    train, task = [], []
    for text in overrides:
        (task if text.strip().startswith("task.") else train).append(text)
    return train, task


def _train_config(args: argparse.Namespace, *, extra: Sequence[str] = ()) -> TrainConfig:
    overrides, _ = _split_overrides(args.overrides)
    config = load_config(args.config, [*extra, *overrides], preset=args.preset)
    changes: dict[str, Any] = {}
    if args.steps is not None:
        changes["total_steps"] = args.steps
        if config.warmup_steps > args.steps:
            changes["warmup_steps"] = args.steps // 10
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.lr is not None:
        changes["learning_rate"] = args.lr
    return replace(config, **changes) if changes else config


def _task_spec(args: argparse.Namespace) -> TaskSpec:
    values: dict[str, Any] = read_table(args.config, "task")
    _, overrides = _split_overrides(args.overrides)
    for text in overrides:
        _, key, value = parse_override(text)
        values[key] = value
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TaskSpec(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid [task] values: {exc}") from exc


def _fit_to_data(config: TrainConfig, spec: TaskSpec) -> TrainConfig:
    return config.with_data_dims(M=spec.M, d=spec.d, T=spec.T, D=spec.D)


def _emit(payload: dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, default=str) + "\n")
    sys.stdout.flush()


def _cmd_gen_data(args: argparse.Namespace) -> None:
    spec = _task_spec(args)
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    _emit({"out": str(args.out), "train": len(dataset.train), "test": len(dataset.test), "spec": asdict(spec)})


def _cmd_train(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.data)
    config = _fit_to_data(_train_config(args), dataset.spec)
    resume = harness.load_checkpoint(args.resume, expected_dims=config.dims) if args.resume else None
    diagnostic = args.out.with_name(args.out.stem + ".diverged" + args.out.suffix)
    result = harness.train(config, dataset, resume=resume, stop_after=args.stop_after, diagnostic_path=diagnostic)
    harness.save_checkpoint(result.checkpoint, args.out)
    if args.metrics is not None:
        harness.write_metrics_csv(result.metrics, args.metrics)
    if args.plot is not None:
        from app.plots import plot_loss_curves

        plot_loss_curves(result.metrics, args.plot / "loss_curves.png")
    _emit(
        {
            "checkpoint": str(args.out),
            "steps": result.checkpoint.step,
            "total_steps": config.total_steps,
            "initial_l_q": result.initial_l_q,
            "final_l_q": result.final_l_q,
        }
    )


def _cmd_eval(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.data)
    checkpoint = harness.load_checkpoint(args.checkpoint)
    texts = args.shift or ["clean", "heldout"]
    shifts = [harness.Shift.parse(text, default_sigma=dataset.spec.sigma_obs) for text in texts]
    results = [harness.evaluate(checkpoint, s.episodes(dataset), s, seed=args.seed) for s in shifts]
    payload: dict[str, Any] = {"results": [asdict(r) for r in results]}
    if args.sweep or args.plot is not None:
        sweep = harness.noise_sweep(checkpoint, dataset, seed=args.seed)
        payload["sweep"] = [asdict(r) for r in sweep]
        if args.plot is not None:
            from app.plots import plot_robustness

            plot_robustness(sweep, harness.DEFAULT_SIGMAS, args.plot / "robustness.png")
    _emit(payload)


def _parse_list(text: str, parse: Any) -> list[Any]:
    return [parse(item) for item in text.split(",") if item.strip()]


def _cmd_ablate(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.data)
    config = _fit_to_data(_train_config(args), dataset.spec)
    values = _parse_list(args.values, lambda v: harness.parse_knob_value(args.knob, v)) if args.values else None
    try:
        seeds = _parse_list(args.seeds, int)
    except ValueError:
        raise ConfigError(f"--seeds takes comma-separated integers, got {args.seeds!r}") from None
    rows = harness.ablate(config, args.knob, values, dataset, seeds)
    summaries, effect = harness.summarize_ablation(rows)
    if args.out is not None:
        harness.write_ablation_csv(rows, args.out)
    if args.plot is not None:
        from app.plots import plot_ablation

        plot_ablation(summaries, args.knob, args.plot / f"ablation_{args.knob}.png")
    if not args.quiet:
        sys.stdout.write(harness.format_ablation_table(summaries, args.knob, effect) + "\n")
    _emit(
        {
            "knob": args.knob,
            "summaries": [asdict(s) for s in summaries],
            "effect": asdict(effect) if effect is not None else None,
        }
    )


def _cmd_gradcheck(args: argparse.Namespace) -> bool:
    defaults = [f"dims.{key}={value}" for key, value in asdict(harness.GRADCHECK_DIMS).items()]
    config = _train_config(args, extra=defaults)
    results = harness.gradcheck(
        config, args.instances, seed=config.seed, tolerance=args.tolerance, step=args.fd_step
    )
    passed = all(r.passed(args.tolerance) for r in results)
    _emit(
        {
            "passed": passed,
            "instances": len(results),
            "max_rel_error": max(r.max_rel_error for r in results),
            "hinge_active": sum(r.hinge_active for r in results),
            "isolated": sum(r.isolated for r in results),
        }
    )
    return passed


def _quotient_summary(world: DiscreteWorld, tol: float) -> dict[str, Any]:
    report = verify_world(world, tol)
    return {**asdict(report), "ok": report.ok}


def _cmd_quotient_verify(args: argparse.Namespace) -> bool:
    if args.world is not None:
        summary = _quotient_summary(load_world(args.world), args.tol)
        _emit({"world": str(args.world), **summary})
        return bool(summary["ok"])

    if args.random is not None:
        report = sufficiency_sweep(args.random, args.seed, tol=args.tol)
        _emit({"worlds": report.n_worlds, "representations": report.n_representations, "failures": list(report.failures)})
        return report.ok

    dataset = load_dataset(args.data)
    episodes = dataset.train + dataset.test
    spec = dataset.spec
    payload: dict[str, Any] = {"data": str(args.data), "expected_classes": spec.n_tasks}
    ok = True
    for label, discretizer in (("ideal", task_signature_discretizer(spec)), ("identity", identity_discretizer)):
        summary = _quotient_summary(world_from_dataset(episodes, discretizer), args.tol)
        payload[label] = summary
        ok = ok and summary["ok"] and summary["n_classes"] == spec.n_tasks

    world = world_from_dataset(episodes, identity_discretizer)
    quotient: Partition = build_quotient(bayes_law(world), args.tol)
    quotient_rep = {x: quotient.assignment[world.latent_of[x]] for x in world.inputs}
    payload["complexity"] = complexity_gap(
        world.inputs, quotient_rep, {x: x for x in world.inputs}, T=spec.T, D=spec.D, seed=args.seed
    )
    _emit(payload)
    return ok


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "quotient-verify": _cmd_quotient_verify,
}


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    if argv is None:
        argv = sys.argv[1:]

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed a message (or help).
        if exc.code == 0:
            return 0
        log_event("ERROR", "USAGE_ERROR", source="cli", reason="missing-or-invalid-arguments")
        return 1

    configure_logging(log_dir=None if args.no_log_file else args.log_dir, quiet=args.quiet)
    event = args.command.upper().replace("-", "_")
    log_event("INFO", f"{event}_START", source="cli")
    try:
        outcome = COMMANDS[args.command](args)
    except (QuoVLAError, FileNotFoundError) as exc:
        log_event("ERROR", "ERROR", source="cli", command=args.command, error=type(exc).__name__, message=str(exc))
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2

    if outcome is False:
        log_event("ERROR", f"{event}_FAILED", source="cli")
        sys.stderr.write(json.dumps({"error": "CheckFailed", "message": f"{args.command} found violations"}) + "\n")
        return 2
    log_event("INFO", f"{event}_DONE", source="cli")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
