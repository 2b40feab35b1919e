import jax
import jax.numpy as jnp
import numpy as np
import pytest

from cfil.envs import (
    PENDULUM,
    PM_DT,
    PM_FRICTION,
    PM_GOAL,
    PM_MASS,
    POINT_MASS,
    ExpertQualityError,
    get_env,
    measure_reference_returns,
    random_policy,
    read_demos,
    record_demos,
    step,
    write_demos,
)


@pytest.fixture(scope="module")
def pm_demo():
    return record_demos(POINT_MASS, n_traj=1, seed=0)


def test_point_mass_fixed_point():
    s = np.array([0.3, -0.2, 0.0, 0.0])
    nxt, done = step(POINT_MASS, s, np.zeros(2))
    np.testing.assert_array_equal(nxt, s)
    assert not done


def test_point_mass_two_steps_by_hand():
    # semi-implicit Euler: v1 = dt*a/m; p1 = dt*v1; v2 = v1 + dt*(a/m - fr*v1); p2 = p1 + dt*v2
    a, dt, fr, m = 1.0, PM_DT, PM_FRICTION, PM_MASS
    v1 = dt * a / m
    p1 = dt * v1
    v2 = v1 + dt * (a / m - fr * v1)
    p2 = p1 + dt * v2
    s = np.zeros(4)
    for _ in range(2):
        s, _ = step(POINT_MASS, s, np.array([1.0, 0.0]))
    np.testing.assert_allclose(s, [p2, 0.0, v2, 0.0], rtol=1e-14)
    assert p2 == pytest.approx(dt * dt * (2 - fr * dt) * a / m + dt * dt * a / m, rel=1e-14)


def test_out_of_box_action_clipped(caplog):
    s = np.zeros(4)
    clipped, _ = step(POINT_MASS, s, np.array([5.0, -3.0]))
    ref, _ = step(POINT_MASS, s, np.array([1.0, -1.0]))
    np.testing.assert_array_equal(clipped, ref)
    assert "clipped" in caplog.text


def test_pendulum_rest_equilibrium():
    s = np.zeros(2)
    for t in range(10):
        s, _ = step(PENDULUM, s, np.zeros(1), t)
    np.testing.assert_array_equal(s, np.zeros(2))


def test_horizon_done_flag():
    _, done = step(POINT_MASS, np.zeros(4), np.zeros(2), t=199)
    assert done


def test_expert_at_goal_is_quiet():
    obs = jnp.asarray([*PM_GOAL, 0.0, 0.0])
    np.testing.assert_allclose(POINT_MASS.expert(obs), 0.0, atol=1e-15)


def test_expert_quality(pm_demo):
    assert pm_demo.mean_return >= -15.0
    assert len(pm_demo) == 200


def test_pendulum_swing_up_time():
    demo = record_demos(PENDULUM, n_traj=1, seed=0)
    theta = np.arctan2(demo.trajectories[0].obs[:, 1], demo.trajectories[0].obs[:, 0])
    up = np.abs(np.abs(theta) - np.pi) < 0.1
    assert up.any() and np.argmax(up) <= 150
    # measured once and frozen
    assert np.argmax(up) == 124


def test_frozen_references():
    for spec in (POINT_MASS, PENDULUM):
        exp, rand, std = measure_reference_returns(spec)
        assert exp == pytest.approx(spec.expert_ref, rel=1e-12)
        assert rand == pytest.approx(spec.random_ref, rel=1e-12)
        assert std == pytest.approx(spec.expert_ref_std, rel=1e-9)


def test_quality_gate_fires():
    bad = lambda params, obs, key: jnp.zeros(2)  # noqa: E731
    # a non-scripted policy bypasses the gate; a broken expert does not
    record_demos(POINT_MASS, policy=bad)
    broken = POINT_MASS.__class__(**{**POINT_MASS.__dict__, "expert": lambda obs: jnp.zeros(2)})
    with pytest.raises(ExpertQualityError):
        record_demos(broken)


def test_quality_gate_one_sided():
    # seeds whose episodes beat the reference pass
    for seed in range(4):
        record_demos(POINT_MASS, n_traj=10, seed=seed)


def test_strides(pm_demo):
    assert len(pm_demo.with_stride(10)) == 20
    assert len(pm_demo.with_stride(100)) == 2
    assert pm_demo.with_stride(10).inputs().shape == (20, 6)


def test_views_consistent(pm_demo):
    sa = pm_demo.with_view("state-action").inputs()
    sp = pm_demo.with_view("state-pair").inputs()
    ss = pm_demo.with_view("single-state").inputs()
    np.testing.assert_array_equal(sa[:, :4], ss)
    np.testing.assert_array_equal(sp[:, :4], ss)
    np.testing.assert_array_equal(sp[:-1, 4:], ss[1:])
    assert sp.shape[1] == 8 and ss.shape[1] == 4  # no action columns
    assert pm_demo.view == "state-action"  # views do not mutate


def test_demo_file_roundtrip_and_determinism(tmp_path, pm_demo):
    write_demos(tmp_path / "a.csv", pm_demo)
    write_demos(tmp_path / "b.csv", record_demos(POINT_MASS, n_traj=1, seed=0))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = read_demos(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.state_action(), pm_demo.state_action())
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "# env pointmass" and len(lines) == 6 + 1 + 200


def test_multi_trajectory_file(tmp_path):
    demos = record_demos(POINT_MASS, n_traj=3, seed=2)
    write_demos(tmp_path / "m.csv", demos)
    back = read_demos(tmp_path / "m.csv")
    assert len(back.trajectories) == 3 and len(back) == 600


def test_random_policy_in_box():
    key = jax.random.PRNGKey(0)
    a = random_policy(PENDULUM)(None, jnp.zeros(3), key)
    assert a.shape == (1,) and abs(float(a[0])) <= 1


def test_unknown_env():
    with pytest.raises(ValueError):
        get_env("cartpole")
