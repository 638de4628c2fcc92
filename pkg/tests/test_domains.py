from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hipmdp.domains import (
    HivParams,
    ToyClass,
    ToyEnv,
    ToyParams,
    hiv_reward,
    hiv_step,
    load_domain_config,
    make_domain,
    sample_task,
    toy_step,
)
from hipmdp.domains import hiv
from hipmdp.domains.toy import DOWN, LEFT, RIGHT, UP, gate_crossed

CFG = load_domain_config()
HIV = CFG["hiv"]


def nominal():
    return HivParams.nominal(HIV)


def oracle_equilibrium(params):
    # Long untreated run at a fine step without stiffness refinement.
    return hiv.integrate(np.array(HIV["initial_state"], float), params, 0.0, 0.0, 4000.0, 0.01)


# -- toy --------------------------------------------------------------------------


def test_toy_blue_enters_through_blue_gate():
    s, r, done = toy_step([0.45, 0.78], UP, ToyParams("blue", 0.0))
    assert done and r == 1.0
    np.testing.assert_allclose(s, [0.45, 0.83])


def test_toy_red_blocked_at_blue_gate():
    start = np.array([0.45, 0.78])
    s, r, done = toy_step(start, UP, ToyParams("red", 0.0))
    assert not done and r == -0.01
    np.testing.assert_array_equal(s, start)


def test_toy_red_enters_red_gate_blue_blocked():
    assert toy_step([0.55, 0.78], UP, ToyParams("red", 0.0))[2]
    s, _, done = toy_step([0.55, 0.78], UP, ToyParams("blue", 0.0))
    assert not done and s[1] == 0.78


@pytest.mark.parametrize("start,action", [([0.37, 0.9], RIGHT), ([0.63, 0.9], LEFT)])
@pytest.mark.parametrize("cls", ["red", "blue"])
def test_toy_side_walls_block_everyone(start, action, cls):
    s, r, done = toy_step(start, action, ToyParams(cls, 0.0))
    assert not done and r == -0.01
    np.testing.assert_array_equal(s, start)


def test_toy_exact_displacement_without_noise():
    for a, d in [(UP, (0, 0.05)), (DOWN, (0, -0.05)), (LEFT, (-0.05, 0)), (RIGHT, (0.05, 0))]:
        s, _, _ = toy_step([0.2, 0.4], a, ToyParams("red", 0.0))
        np.testing.assert_allclose(s - [0.2, 0.4], d, atol=1e-15)


def test_toy_clips_to_square_and_validates():
    s, _, _ = toy_step([0.0, 0.02], DOWN, ToyParams("red", 0.0))
    np.testing.assert_array_equal(s, [0.0, 0.0])
    with pytest.raises(ValueError):
        toy_step([1.5, 0.0], UP, ToyParams("red", 0.0))
    with pytest.raises(ValueError):
        toy_step([0.5, 0.5], 4, ToyParams("red", 0.0))
    with pytest.raises(ValueError):
        toy_step([0.5, 0.5], UP, ToyParams("red", 0.01))


def test_gate_classification():
    assert gate_crossed([0.3, 0.5], [0.3, 0.55]) is None
    assert gate_crossed([0.42, 0.79], [0.42, 0.84]) == "blue"
    assert gate_crossed([0.58, 0.79], [0.58, 0.84]) == "red"
    assert gate_crossed([0.38, 0.9], [0.43, 0.9]) == "wall"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["red", "blue"]))
def test_toy_episode_stays_in_square_and_class_fixed(seed, cls):
    rng = np.random.default_rng(seed)
    env = ToyEnv(ToyParams(cls), rng)
    s = env.reset()
    assert 0 <= s[0] <= 1 and 0 <= s[1] <= 0.3
    for _ in range(100):
        s, r, term, trunc = env.step(int(rng.integers(4)))
        assert np.all((s >= 0) & (s <= 1))
        if term:
            assert env.last_entry == cls
            break
        if trunc:
            break
    assert env.params.latent_class == ToyClass(cls)


def test_toy_class_prior():
    reds = sum(sample_task("toy", CFG["toy"], s).latent_class == ToyClass.RED for s in range(1000))
    assert 0.45 <= reds / 1000 <= 0.55


def test_sample_task_deterministic():
    a, b = sample_task("hiv", HIV, 42), sample_task("hiv", HIV, 42)
    assert a.to_dict() == b.to_dict()
    assert sample_task("toy", CFG["toy"], 3) == sample_task("toy", CFG["toy"], 3)
    with pytest.raises(ValueError):
        sample_task("maze", {}, 0)


# -- HIV parameters ------------------------------------------------------------------


def test_hiv_zero_delta_gives_nominal():
    cfg = dict(HIV, delta=0.0)
    p = sample_task("hiv", cfg, 7)
    assert dict(p.coefficients) == {k: float(v) for k, v in HIV["coefficients"].items()}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hiv_multipliers_within_bounds(seed):
    p = sample_task("hiv", HIV, seed)
    d = HIV["delta"]
    assert set(p.multipliers) == set(HIV["perturbed"])
    for name, m in p.multipliers.items():
        assert 1 - d <= m <= 1 + d
        assert p.coefficients[name] == pytest.approx(HIV["coefficients"][name] * m)
    assert all(v > 0 for v in p.coefficients.values())


def test_hiv_bad_delta_rejected():
    with pytest.raises(ValueError):
        sample_task("hiv", dict(HIV, delta=1.2), 0)


# -- HIV dynamics ---------------------------------------------------------------------


def test_hiv_unhealthy_equilibrium_stationary():
    p = nominal()
    eq = oracle_equilibrium(p)
    after = hiv.integrate(eq, p, 0.0, 0.0, 100.0, HIV["dt"], HIV["max_stiffness_step"])
    assert np.max(np.abs(after - eq) / eq) < 1e-3
    np.testing.assert_allclose(hiv.hiv_derivatives(eq, p, 0, 0) / eq, 0, atol=1e-6)


def test_hiv_step_halving():
    p = sample_task("hiv", HIV, 1)
    s0 = np.array(HIV["initial_state"], float)
    for action in range(4):
        e1, e2 = hiv.action_efficacies(action, HIV)
        a = hiv.integrate(s0, p, e1, e2, 5.0, 0.05)
        b = hiv.integrate(s0, p, e1, e2, 5.0, 0.025)
        assert np.max(np.abs(a - b) / np.abs(b)) < 1e-4


def test_hiv_no_spontaneous_infection():
    s = np.array([1e6, 3000.0, 0.0, 0.0, 0.0, 10.0])
    for t in range(20):
        s, _, _ = hiv_step(s, 0, nominal(), HIV, t)
        assert s[2] == s[3] == s[4] == 0.0


def test_hiv_step_done_at_horizon_and_validates():
    s = np.array(HIV["initial_state"], float)
    assert hiv_step(s, 0, nominal(), HIV, t=HIV["n_decisions"] - 1)[2]
    assert not hiv_step(s, 0, nominal(), HIV, t=0)[2]
    with pytest.raises(ValueError):
        hiv_step(-s, 0, nominal(), HIV)
    with pytest.raises(ValueError):
        hiv_step(s, 7, nominal(), HIV)


def test_hiv_treatment_lowers_virus():
    s = np.array(HIV["initial_state"], float)
    untreated, _, _ = hiv_step(s, 0, nominal(), HIV)
    treated, _, _ = hiv_step(s, 3, nominal(), HIV)
    assert treated[4] < untreated[4]


def test_hiv_nonnegative_random_walk():
    rng = np.random.default_rng(0)
    env = hiv.HivEnv(sample_task("hiv", HIV, 3), HIV)
    env.reset()
    for _ in range(2000):
        _, _, _, trunc = env.step(int(rng.integers(4)))
        assert np.all(env.state >= 0)
        if trunc:
            env.reset()


def test_hiv_env_deterministic_and_log_observation():
    p = sample_task("hiv", HIV, 5)
    runs = []
    for _ in range(2):
        env = hiv.HivEnv(p, HIV)
        obs = [env.reset()] + [env.step(a % 4)[0] for a in range(10)]
        runs.append(np.array(obs))
    np.testing.assert_array_equal(runs[0], runs[1])
    np.testing.assert_allclose(hiv.unobserve(hiv.observe(env.state, HIV), HIV), env.state, rtol=1e-12)


# -- HIV reward -------------------------------------------------------------------------


def test_reward_zero_state():
    assert hiv_reward(np.zeros(6), 0, HIV) == 0.0


def test_reward_linear_in_virus():
    s = np.array([1e5, 10, 1e4, 40, 5e4, 30.0])
    s2 = s.copy()
    s2[4] *= 2
    assert hiv_reward(s, 1, HIV) - hiv_reward(s2, 1, HIV) == pytest.approx(HIV["reward"]["c_V"] * s[4])


def test_reward_full_treatment_cost():
    s = np.array([1e5, 10, 1e4, 40, 5e4, 30.0])
    rc = HIV["reward"]
    expected = -(rc["c_1"] * HIV["eps1_max"] ** 2 + rc["c_2"] * HIV["eps2_max"] ** 2)
    assert hiv_reward(s, 3, HIV) - hiv_reward(s, 0, HIV) == pytest.approx(expected)


# -- adapters ---------------------------------------------------------------------------


def test_domain_adapters_agree_with_envs():
    dom = make_domain("hiv")
    p = dom.sample_task(2)
    env = dom.make_env(p, None)
    s = env.reset()
    s2, r, _, _ = env.step(3)
    sim, rs, _ = dom.simulate(p, s[None], [3], None)
    np.testing.assert_allclose(sim[0], s2)
    assert rs[0] == pytest.approx(r)
    mr, _ = dom.model_reward(s[None], np.array([3]), s2[None])
    assert mr[0] == pytest.approx(r, rel=1e-9)

    toy = make_domain("toy")
    r, done = toy.model_reward(np.zeros((2, 2)), np.zeros(2, int), np.array([[0.5, 0.9], [0.1, 0.1]]))
    np.testing.assert_array_equal(done, [True, False])
    np.testing.assert_allclose(r, [1.0, -0.01])


def test_domain_overrides():
    cfg = load_domain_config({"toy": {"step_size": 0.1}})
    assert cfg["toy"]["step_size"] == 0.1 and CFG["toy"]["step_size"] == 0.05
    with pytest.raises(ValueError):
        load_domain_config({"maze": {}})
    with pytest.raises(ValueError):
        make_domain("maze")
