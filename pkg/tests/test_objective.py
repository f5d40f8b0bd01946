from __future__ import annotations

import numpy as np
import pytest
import torch

from app.config import TCWeights, TrainConfig
from app.diffcore import ParamSet
from app.errors import ConfigError, ShapeError
from app.objective import (
    NormStats,
    branch_velocities,
    dual_branch_loss,
    fm_loss,
    initial_noise,
    make_flow_sample,
    normalize_actions,
    random_instance,
    raw_branch_gradient_isolation_check,
    sample_actions,
    tc_hinge,
    temporal_complexity,
)
from app.policy import init_params

from tests.conftest import TINY_DIMS

UNIT = TCWeights(lambda1=1.0, lambda2=1.0)


def _chunks(seed: int, batch: int = 3) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((batch, TINY_DIMS.T, TINY_DIMS.D), generator=gen, dtype=torch.float64)


def test_temporal_complexity_hand_computed():
    v = torch.tensor([[0.0], [1.0], [3.0]], dtype=torch.float64)
    # d1 = (1, 2), d2 = (1,)
    assert float(temporal_complexity(v, UNIT)) == pytest.approx(3.5, abs=1e-15)
    weighted = temporal_complexity(v, TCWeights(lambda1=2.0, lambda2=0.5))
    assert float(weighted) == pytest.approx(5.5, abs=1e-15)


def test_temporal_complexity_is_quadratically_homogeneous():
    v = _chunks(1)
    for k in (0.5, 2.0, -3.0):
        assert torch.allclose(temporal_complexity(k * v, UNIT), k**2 * temporal_complexity(v, UNIT), rtol=1e-12)


def test_temporal_complexity_needs_three_steps():
    with pytest.raises(ShapeError):
        temporal_complexity(torch.zeros((2, 1)), UNIT)


def test_high_frequency_perturbation_increases_complexity():
    ramp = torch.linspace(0.0, 1.0, 8, dtype=torch.float64).reshape(8, 1)
    wiggle = 0.05 * torch.tensor([(-1.0) ** t for t in range(8)], dtype=torch.float64).reshape(8, 1)
    assert float(temporal_complexity(ramp + wiggle, UNIT)) > float(temporal_complexity(ramp, UNIT))


def test_hinge_clamps_at_zero():
    assert float(tc_hinge(1.0, 2.0)) == 0.0
    assert float(tc_hinge(3.0, 1.0)) == 2.0
    assert float(tc_hinge(torch.tensor(0.5), torch.tensor(0.5))) == 0.0


def test_flow_sample_endpoints_and_velocity():
    a, eps = _chunks(2), _chunks(3)
    at_action = make_flow_sample(a, eps, 0.0)
    at_noise = make_flow_sample(a, eps, 1.0)
    assert torch.equal(at_action.x_tau, a)
    assert torch.equal(at_noise.x_tau, eps)
    assert torch.equal(at_action.u_tau, eps - a)


def test_flow_sample_accepts_per_chunk_tau():
    a, eps = _chunks(2), _chunks(3)
    tau = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    sample = make_flow_sample(a, eps, tau)
    assert torch.equal(sample.x_tau[0], a[0])
    assert torch.allclose(sample.x_tau[1], 0.5 * (a[1] + eps[1]), rtol=0, atol=1e-15)
    assert torch.equal(sample.x_tau[2], eps[2])


def test_flow_sample_validation():
    a = _chunks(2)
    with pytest.raises(ConfigError):
        make_flow_sample(a, a, 1.2)
    with pytest.raises(ShapeError):
        make_flow_sample(a, a[:2], 0.3)
    with pytest.raises(ShapeError):
        make_flow_sample(a, a, torch.full((2,), 0.3, dtype=torch.float64))


def test_fm_loss_sum_and_mean_differ_by_chunk_size():
    v, u = _chunks(4), _chunks(5)
    summed = fm_loss(v, u)
    averaged = fm_loss(v, u, "mean")
    assert summed.shape == (3,)
    assert torch.allclose(summed, averaged * TINY_DIMS.T * TINY_DIMS.D, rtol=1e-13)
    with pytest.raises(ConfigError):
        fm_loss(v, u, "median")


def test_norm_stats_bracket_most_samples():
    rng = np.random.default_rng(0)
    actions = rng.normal(size=(5000, 2, 2)) * np.array([1.0, 10.0])
    stats = NormStats.from_actions(actions)
    normed = normalize_actions(torch.as_tensor(actions), stats)
    inside = (normed.abs() <= 1.0).double().mean(dim=(0, 1))
    assert bool((inside >= 0.975).all())


def test_norm_stats_maps_bounds_to_unit_interval():
    stats = NormStats(lower=np.array([-2.0, 0.0]), upper=np.array([2.0, 4.0]))
    v = torch.tensor([[-2.0, 0.0], [2.0, 4.0]], dtype=torch.float64)
    assert torch.equal(normalize_actions(v, stats), torch.tensor([[-1.0, -1.0], [1.0, 1.0]], dtype=torch.float64))


def test_norm_stats_degenerate_column_gets_unit_range():
    actions = np.zeros((10, 3, 1))
    stats = NormStats.from_actions(actions)
    assert stats.upper[0] - stats.lower[0] == pytest.approx(1.0)


def test_norm_stats_validation():
    with pytest.raises(ConfigError):
        NormStats(lower=np.array([1.0]), upper=np.array([1.0]))
    with pytest.raises(ShapeError):
        NormStats(lower=np.zeros(2), upper=np.ones(3))
    with pytest.raises(ShapeError):
        normalize_actions(torch.zeros((2, 3)), NormStats.identity(2))


@pytest.mark.parametrize("mode", ["bypass_block", "bypass_quant"])
def test_raw_branch_receives_no_gradient(mode):
    config = TrainConfig(dims=TINY_DIMS, raw_branch_mode=mode, tc=TCWeights(lambda_tc=1.0))
    for seed in range(20):
        assert raw_branch_gradient_isolation_check(random_instance(seed, config))


def test_disabled_dual_branch_trains_only_flow_matching():
    config = TrainConfig(dims=TINY_DIMS, dual_branch_enabled=False)
    params, H, a, sample, stats, _ = random_instance(4, config)
    terms = dual_branch_loss(params, H, a, sample, config, stats)
    assert float(terms.tc) == 0.0
    assert torch.equal(terms.total, terms.fm)


def test_zero_lambda_leaves_total_equal_to_flow_matching():
    config = TrainConfig(dims=TINY_DIMS, tc=TCWeights(lambda_tc=0.0))
    params, H, a, sample, stats, _ = random_instance(5, config)
    terms = dual_branch_loss(params, H, a, sample, config, stats)
    assert torch.equal(terms.total, terms.fm)
    assert float(terms.c_q) > 0.0 and float(terms.c_r) > 0.0


def test_loss_terms_combine_with_lambda():
    config = TrainConfig(dims=TINY_DIMS, tc=TCWeights(lambda_tc=0.7))
    params, H, a, sample, stats, _ = random_instance(6, config)
    terms = dual_branch_loss(params, H, a, sample, config, stats)
    values = terms.as_floats()
    assert values["total"] == pytest.approx(values["fm"] + 0.7 * values["tc"], rel=1e-13)
    assert values["tc"] >= 0.0


def test_sampler_recovers_target_under_oracle_field():
    prefix = torch.zeros((3, TINY_DIMS.M, TINY_DIMS.d), dtype=torch.float64)
    target = _chunks(8)
    for n_steps in (1, 5, 10, 50):
        eps = initial_noise(tuple(target.shape), seed=13)
        out = sample_actions(prefix, None, TINY_DIMS, n_steps, 13, velocity_fn=lambda x, tau: eps - target)
        assert torch.allclose(out, target, rtol=0, atol=1e-9)


def test_sampler_with_learned_expert_is_seeded():
    params = ParamSet.merge(*init_params(0, TINY_DIMS))
    prefix = torch.randn((2, TINY_DIMS.M, TINY_DIMS.d), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    first = sample_actions(prefix, params, TINY_DIMS, 4, seed=2)
    again = sample_actions(prefix, params, TINY_DIMS, 4, seed=2)
    other = sample_actions(prefix, params, TINY_DIMS, 4, seed=3)
    assert first.shape == (2, TINY_DIMS.T, TINY_DIMS.D)
    assert torch.equal(first, again)
    assert not torch.equal(first, other)


def test_sampler_validation():
    prefix = torch.zeros((1, TINY_DIMS.M, TINY_DIMS.d), dtype=torch.float64)
    with pytest.raises(ConfigError):
        sample_actions(prefix, None, TINY_DIMS, 0, 0, velocity_fn=lambda x, tau: x)
    with pytest.raises(ConfigError):
        sample_actions(prefix, None, TINY_DIMS, 3, 0)


def test_random_instance_is_reproducible():
    config = TrainConfig(dims=TINY_DIMS)
    first, second = random_instance(9, config), random_instance(9, config)
    assert torch.equal(first.H, second.H)
    assert torch.equal(first.sample.x_tau, second.sample.x_tau)
    assert all(torch.equal(first.params[n], second.params[n]) for n in first.params)


def test_fm_loss_matches_elementwise_sum():
    v, u = _chunks(6), _chunks(7)
    summed = fm_loss(v, u)
    for b in range(v.shape[0]):
        expected = 0.0
        for t in range(TINY_DIMS.T):
            for k in range(TINY_DIMS.D):
                expected += (float(v[b, t, k]) - float(u[b, t, k])) ** 2
        assert float(summed[b]) == pytest.approx(expected, rel=1e-13)


def test_branches_coincide_without_quantization():
    params = ParamSet.merge(*init_params(3, TINY_DIMS))
    gen = torch.Generator().manual_seed(8)
    H = torch.randn((2, TINY_DIMS.M, TINY_DIMS.d), generator=gen, dtype=torch.float64)
    sample = make_flow_sample(_chunks(9, batch=2), _chunks(10, batch=2), 0.4)
    v_q, v_r = branch_velocities(
        params,
        H,
        sample,
        TINY_DIMS,
        TrainConfig().quant,
        quantization_enabled=False,
        raw_branch_mode="bypass_quant",
    )
    assert torch.equal(v_q, v_r)
