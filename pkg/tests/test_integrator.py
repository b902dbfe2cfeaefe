import json

import numpy as np
import pytest

from taylorflow.ensemble import ParticleEnsemble, sample_prior
from taylorflow.errors import ConfigError, NumericalFailure
from taylorflow.flows import FlowEval, FlowKind
from taylorflow.integrator import FlowConfig, diffusion_increment, flow_update, lambda_grid

GROMOV = FlowKind("gromov")


def constant_field(drift, q, valid=True):
    drift, q = np.asarray(drift, float), np.asarray(q, float)

    def field(states, lam):
        count = len(states)
        return FlowEval(
            np.broadcast_to(drift, (count, drift.size)).copy(),
            np.broadcast_to(q, (count,) + q.shape).copy(),
            valid,
        )

    return field


def test_lambda_grid():
    grid = lambda_grid(1 / 50)
    assert len(grid) == 51
    assert grid[0] == 0.0 and grid[-1] == 1.0
    np.testing.assert_allclose(np.diff(grid), 1 / 50)
    short = lambda_grid(0.3)
    np.testing.assert_allclose(short, [0.0, 0.3, 0.6, 0.9, 1.0])
    assert len(lambda_grid(1.0)) == 2


def test_config_validation():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            FlowConfig(dlambda=bad)
    with pytest.raises(ConfigError):
        FlowConfig(lambda_point="middle")


def test_zero_field_is_identity(range_scenario):
    ens = sample_prior(range_scenario.prior, 30, 0)
    field = constant_field([0.0, 0.0], np.zeros((2, 2)))
    out, traj = flow_update(ens, GROMOV, range_scenario.prior, range_scenario.model, FlowConfig(), field)
    assert out.states.tobytes() == ens.states.tobytes()
    assert traj.diagnostics["steps"] == 50


def test_single_particle_zero_field_without_diffusion(range_scenario):
    ens = ParticleEnsemble([[0.25, -1.0]])
    field = constant_field([0.0, 0.0], np.eye(2))
    cfg = FlowConfig(diffusion=False)
    out, _ = flow_update(ens, GROMOV, range_scenario.prior, range_scenario.model, cfg, field)
    np.testing.assert_array_equal(out.states, ens.states)


def test_constant_drift_is_integrated_exactly(range_scenario):
    ens = ParticleEnsemble(np.zeros((3, 2)))
    field = constant_field([1.0, -2.0], np.zeros((2, 2)))
    out, _ = flow_update(ens, GROMOV, range_scenario.prior, range_scenario.model, FlowConfig(dlambda=0.1), field)
    np.testing.assert_allclose(out.states, np.tile([1.0, -2.0], (3, 1)), atol=1e-12)


@pytest.mark.parametrize("point, expected", [("start", 0.0), ("mid", 0.125), ("end", 0.25)])
def test_lambda_point_selects_evaluation_time(range_scenario, point, expected):
    seen = []

    def field(states, lam):
        seen.append(lam)
        return FlowEval(np.zeros_like(states), np.zeros(states.shape + (2,)), True)

    cfg = FlowConfig(dlambda=0.25, lambda_point=point, diffusion=False)
    flow_update(ParticleEnsemble(np.zeros((1, 2))), GROMOV, range_scenario.prior, range_scenario.model, cfg, field)
    assert len(seen) == 4
    assert seen[0] == pytest.approx(expected)
    assert seen[-1] == pytest.approx(0.75 + expected)


def test_constant_diffusion_covariance(range_scenario):
    q = np.array([[2.0, 0.6], [0.6, 1.0]])
    ens = ParticleEnsemble(np.zeros((10_000, 2)))
    field = constant_field([0.0, 0.0], q)
    out, traj = flow_update(ens, GROMOV, range_scenario.prior, range_scenario.model, FlowConfig(dlambda=0.1), field)
    # the increments over the unit pseudo-time interval sum to N(0, Q)
    cov = np.cov(out.states.T)
    assert np.linalg.norm(cov - q) / np.linalg.norm(q) < 0.1
    assert traj.diagnostics["indefinite_diffusion"] == 0


def test_bitwise_determinism(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = sample_prior(prior, 40, 3)
    cfg = FlowConfig(seed=3)
    a, _ = flow_update(ens, GROMOV, prior, model, cfg)
    b, _ = flow_update(ens, GROMOV, prior, model, cfg)
    assert a.states.tobytes() == b.states.tobytes()
    c, _ = flow_update(ens, GROMOV, prior, model, FlowConfig(seed=4))
    assert not np.array_equal(a.states, c.states)


def test_drift_only_ignores_seed(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = sample_prior(prior, 40, 3)
    a, _ = flow_update(ens, GROMOV, prior, model, FlowConfig(seed=1, diffusion=False))
    b, _ = flow_update(ens, GROMOV, prior, model, FlowConfig(seed=2, diffusion=False))
    assert a.states.tobytes() == b.states.tobytes()


def test_exact_flow_never_diffuses(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = sample_prior(prior, 20, 0)
    kind = FlowKind("exact")
    a, _ = flow_update(ens, kind, prior, model, FlowConfig(seed=1))
    b, _ = flow_update(ens, kind, prior, model, FlowConfig(seed=2, diffusion=False))
    assert a.states.tobytes() == b.states.tobytes()


def test_first_order_convergence_in_step_size(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = sample_prior(prior, 100, 0)

    def run(dl):
        return flow_update(ens, GROMOV, prior, model, FlowConfig(dlambda=dl, diffusion=False))[0].states

    coarse, mid, fine = run(1 / 25), run(1 / 50), run(1 / 100)
    gap_coarse = np.median(np.linalg.norm(coarse - mid, axis=1))
    gap_fine = np.median(np.linalg.norm(mid - fine, axis=1))
    assert gap_fine < gap_coarse


def test_invalid_particles_are_frozen(range_scenario):
    ens = ParticleEnsemble([[0.0, 0.0], [1.0, 1.0]])

    def field(states, lam):
        return FlowEval(np.ones_like(states), np.zeros(states.shape + (2,)), np.array([False, True]))

    cfg = FlowConfig(dlambda=0.5)
    out, traj = flow_update(ens, GROMOV, range_scenario.prior, range_scenario.model, cfg, field)
    np.testing.assert_array_equal(out.states[0], [0.0, 0.0])
    np.testing.assert_allclose(out.states[1], [2.0, 2.0])
    assert traj.diagnostics["frozen_particle_steps"] == 2


def test_range_singularity_freezes_instead_of_failing(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = ParticleEnsemble([[0.0, 0.0], [-3.5, 0.0]])
    out, traj = flow_update(ens, GROMOV, prior, model, FlowConfig(diffusion=False))
    np.testing.assert_array_equal(out.states[0], [0.0, 0.0])
    assert traj.diagnostics["frozen_particle_steps"] == 50


def test_non_finite_state_raises(range_scenario):
    field = constant_field([np.inf, 0.0], np.zeros((2, 2)))
    with pytest.raises(NumericalFailure) as info:
        flow_update(
            ParticleEnsemble(np.zeros((2, 2))), GROMOV, range_scenario.prior, range_scenario.model, FlowConfig(), field
        )
    assert info.value.particle == 0


def test_indefinite_diffusion_is_clamped_and_counted(range_scenario):
    field = constant_field([0.0, 0.0], np.diag([1.0, -0.5]))
    cfg = FlowConfig(dlambda=0.25)
    out, traj = flow_update(
        ParticleEnsemble(np.zeros((5, 2))), GROMOV, range_scenario.prior, range_scenario.model, cfg, field
    )
    assert np.all(np.isfinite(out.states))
    assert traj.diagnostics["indefinite_diffusion"] == 20
    # the negative direction is dropped, not reflected
    np.testing.assert_array_equal(out.states[:, 1], 0.0)


def test_diffusion_increment_uses_root():
    q = np.array([[[4.0, 0.0], [0.0, 9.0]]])
    np.testing.assert_allclose(diffusion_increment(q, np.array([[1.0, 1.0]])), [[2.0, 3.0]])


def test_trajectory_jsonl(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    ens = sample_prior(prior, 4, 0)
    cfg = FlowConfig(dlambda=0.25, record_trajectories=True)
    out, traj = flow_update(ens, GROMOV, prior, model, cfg)
    lines = traj.to_jsonl().splitlines()
    assert len(lines) == 5
    records = [json.loads(line) for line in lines]
    assert [r["lambda"] for r in records] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert records[0]["diagnostics"] == {}
    assert set(records[1]["diagnostics"]) == {"frozen", "ldl_clamps", "indefinite_diffusion"}
    np.testing.assert_array_equal(records[0]["states"], ens.states)
    np.testing.assert_array_equal(records[-1]["states"], out.states)


def test_reconstruction_error_recorded(range_scenario):
    prior, model = range_scenario.prior, range_scenario.model
    _, traj = flow_update(sample_prior(prior, 50, 0), GROMOV, prior, model, FlowConfig())
    diag = traj.diagnostics
    assert diag["indefinite_diffusion"] == 0
    assert diag["max_ldl_relative_error"] < 1e-8
