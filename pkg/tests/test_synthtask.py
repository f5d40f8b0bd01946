from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from app.db import write_artifact
from app.errors import CheckpointCorruptError, ConfigError
from app.quotientlab import check_injectivity, verify_world
from app.synthtask import (
    TaskSpec,
    encode_prompt,
    expert_trajectory,
    generate_dataset,
    identity_discretizer,
    load_dataset,
    min_jerk_profile,
    noisy_copy,
    save_dataset,
    split_nuisances,
    stack_episodes,
    task_signature_discretizer,
    task_target,
    world_from_dataset,
)

from tests.conftest import TINY_SPEC

SMALL = TaskSpec(n_tasks=4, n_nuisances=8, T=6, D=2, M=4, d=6, train_fraction=0.75, seed=1)


def test_split_sizes():
    dataset = generate_dataset(SMALL)
    assert len(dataset.train) == 24
    assert len(dataset.test) == 8


def test_splits_are_disjoint_and_cover_every_nuisance():
    for task in range(SMALL.n_tasks):
        train, test = split_nuisances(SMALL, task)
        assert not set(train) & set(test)
        assert sorted(train + test) == list(range(SMALL.n_nuisances))


def test_empty_split_is_rejected():
    spec = TaskSpec(n_nuisances=2, train_fraction=0.1)
    with pytest.raises(ConfigError):
        generate_dataset(spec)


@pytest.mark.parametrize(
    "kwargs",
    [{"n_tasks": 0}, {"n_tasks": 1}, {"n_nuisances": 1}, {"T": 2}, {"M": 1}, {"train_fraction": 1.0}, {"sigma_obs": -0.1}],
)
def test_invalid_task_specs(kwargs):
    with pytest.raises(ConfigError):
        TaskSpec(**kwargs)


def test_prompts_are_injective():
    dataset = generate_dataset(SMALL)
    episodes = dataset.train + dataset.test
    encodings = {ep.input_id: ep.prefix for ep in episodes}
    assert check_injectivity(encodings, list(encodings)) == []


def test_expert_depends_on_task_only():
    dataset = generate_dataset(SMALL)
    for ep in dataset.train + dataset.test:
        assert np.array_equal(ep.expert, expert_trajectory(ep.task, SMALL))
    assert not np.array_equal(expert_trajectory(0, SMALL), expert_trajectory(1, SMALL))


def test_prompt_encoding_is_deterministic_and_seeded():
    assert np.array_equal(encode_prompt(2, 3, SMALL), encode_prompt(2, 3, SMALL))
    assert not np.array_equal(encode_prompt(2, 3, SMALL), encode_prompt(2, 3, SMALL, seed=99))
    assert encode_prompt(0, 0, SMALL).shape == (SMALL.M, SMALL.d)


def test_task_rows_are_shared_across_nuisances():
    a, b = encode_prompt(1, 0, SMALL), encode_prompt(1, 5, SMALL)
    rows = SMALL.task_rows
    assert np.array_equal(a[:rows], b[:rows])
    assert not np.array_equal(a[rows:], b[rows:])


def test_min_jerk_closed_form():
    T = 9
    s = np.linspace(0.0, 1.0, T)
    expected = s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    profile = min_jerk_profile(T)
    assert np.max(np.abs(profile - expected)) <= 1e-12
    assert profile[0] == 0.0 and profile[-1] == 1.0
    assert bool(np.all(np.diff(profile) > 0))


def test_expert_starts_at_origin_and_ends_at_target():
    for task in range(SMALL.n_tasks):
        traj = expert_trajectory(task, SMALL)
        assert traj.shape == (SMALL.T, SMALL.D)
        assert np.array_equal(traj[0], np.zeros(SMALL.D))
        assert np.allclose(traj[-1], task_target(task, SMALL), rtol=0, atol=1e-15)


def test_targets_beyond_the_plane_are_seeded_offsets():
    spec = replace(SMALL, D=4)
    target = task_target(1, spec)
    assert target.shape == (4,)
    assert np.hypot(target[0], target[1]) == pytest.approx(spec.target_radius)
    assert bool(np.all(np.abs(target[2:]) <= 0.5 * spec.target_radius))


@pytest.mark.parametrize("task, nuisance", [(-1, 0), (4, 0), (0, 8), (0, -1)])
def test_out_of_range_ids(task, nuisance):
    with pytest.raises(ConfigError):
        encode_prompt(task, nuisance, SMALL)


def test_expert_rejects_unknown_task():
    with pytest.raises(ConfigError):
        expert_trajectory(SMALL.n_tasks, SMALL)


def test_noisy_copy():
    prefix = encode_prompt(0, 0, SMALL)
    rng = np.random.default_rng(0)
    noisy = noisy_copy(prefix, 0.05, rng)
    assert not np.array_equal(noisy, prefix)
    assert np.array_equal(noisy_copy(prefix, 0.0, rng), prefix)
    with pytest.raises(ConfigError):
        noisy_copy(prefix, -1.0, rng)


@pytest.mark.parametrize("discretizer", ["identity", "task_signature"])
def test_quotient_of_the_task_world_has_one_class_per_task(discretizer):
    dataset = generate_dataset(SMALL)
    key = identity_discretizer if discretizer == "identity" else task_signature_discretizer(SMALL)
    world = world_from_dataset(dataset.train + dataset.test, key)
    report = verify_world(world)
    assert report.ok
    assert report.n_classes == SMALL.n_tasks
    expected_latents = SMALL.n_tasks * SMALL.n_nuisances if discretizer == "identity" else SMALL.n_tasks
    assert report.n_latents == expected_latents


@pytest.mark.parametrize("discretizer", ["identity", "task_signature"])
def test_default_task_world_has_one_class_per_task(discretizer):
    spec = TaskSpec()
    dataset = generate_dataset(spec)
    key = identity_discretizer if discretizer == "identity" else task_signature_discretizer(spec)
    report = verify_world(world_from_dataset(dataset.train + dataset.test, key))
    assert (spec.n_tasks, spec.n_nuisances) == (8, 16)
    assert report.ok
    assert report.n_classes == 8


def test_world_needs_episodes():
    with pytest.raises(ConfigError):
        world_from_dataset((), identity_discretizer)
    with pytest.raises(ConfigError):
        stack_episodes(())


def test_norm_stats_come_from_training_chunks():
    dataset = generate_dataset(SMALL)
    _, experts = stack_episodes(dataset.train)
    assert dataset.stats.dim == SMALL.D
    assert bool(np.all(dataset.stats.lower <= experts.max(axis=(0, 1))))
    assert bool(np.all(dataset.stats.upper >= experts.min(axis=(0, 1))))


def test_dataset_round_trip_is_bit_exact(tmp_artifact):
    dataset = generate_dataset(TINY_SPEC)
    save_dataset(dataset, tmp_artifact)
    loaded = load_dataset(tmp_artifact)
    assert loaded.spec == dataset.spec
    for split in ("train", "test"):
        ours, theirs = getattr(dataset, split), getattr(loaded, split)
        assert [ep.input_id for ep in ours] == [ep.input_id for ep in theirs]
        for a, b in zip(ours, theirs):
            assert a.prefix.tobytes() == b.prefix.tobytes()
            assert a.expert.tobytes() == b.expert.tobytes()
    assert np.array_equal(loaded.stats.lower, dataset.stats.lower)
    assert np.array_equal(loaded.stats.upper, dataset.stats.upper)


def test_loading_the_wrong_artifact_kind(tmp_artifact):
    write_artifact(tmp_artifact, "checkpoint", {}, {"x": np.zeros(2)})
    with pytest.raises(CheckpointCorruptError):
        load_dataset(tmp_artifact)


def test_loading_an_incomplete_dataset(tmp_artifact):
    write_artifact(tmp_artifact, "dataset", {"spec": {}}, {"x": np.zeros(2)})
    with pytest.raises(CheckpointCorruptError):
        load_dataset(tmp_artifact)


def test_missing_dataset_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.db")
