from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np
import pytest
import yaml

from hipmdp.domains import ToyParams
from hipmdp.harness import (
    DOMAIN_DEFAULTS,
    ConfigError,
    ExperimentConfig,
    ExperimentLog,
    emit_results,
    make_domain,
    run_baseline,
    run_episode,
    run_experiment,
    run_hipmdp,
)
from hipmdp.policy import QNetworks, train

pytestmark = pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")

TINY = dict(domain="toy", n_instances=2, episodes_per_instance=2, support_size=60, max_candidates=120,
            anneal_steps=50, refit_anneal_steps=30, gp_max_iter=30, n_rollouts=10, rollout_horizon=3,
            train_steps=10, policy={"hidden": [16], "batch_size": 16})


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_mapping({**TINY, **kw})


def record(instance, episode, reward, agent="hipmdp", domain="toy"):
    return {"run_id": "x", "agent": agent, "domain": domain, "instance_id": instance, "episode": episode,
            "steps": 1, "cumulative_reward": reward, "mu_b": None, "model_rmse": None, "loss": None}


def make_log(rewards, agent="hipmdp", domain="toy"):
    """``rewards[b][e]`` becomes the record for instance b, episode e."""
    log = ExperimentLog()
    for b, row in enumerate(rewards):
        for e, r in enumerate(row):
            log.append(record(b, e, r, agent, domain))
    return log


# -- configuration ---------------------------------------------------------------------


def test_defaults():
    toy = ExperimentConfig()
    assert (toy.n_instances, toy.episodes_per_instance, toy.n_rollouts, toy.rollout_horizon) == (20, 15, 100, 10)
    hiv = ExperimentConfig(domain="hiv")
    assert (hiv.n_instances, hiv.episodes_per_instance, hiv.n_rollouts, hiv.rollout_horizon) == (5, 30, 30, 5)
    assert toy.train_steps == 200 and toy.evict_threshold == 0.5 and toy.latent_dim == 2
    assert (toy.epsilon_start, toy.epsilon_end, toy.epsilon_fraction) == (1.0, 0.05, 0.2)
    assert toy.policy_config.gamma == 0.98
    assert set(DOMAIN_DEFAULTS) == {"toy", "hiv"}


@pytest.mark.parametrize("kw", [
    {"domain": "maze"}, {"agent": "oracle"}, {"model_mode": "exact"},
    {"agent": "hipmdp", "model_mode": "sim"}, {"n_instances": 0}, {"episodes_per_instance": 1.5},
    {"seed": -1}, {"epsilon_end": 0.9, "epsilon_start": 0.5}, {"evict_threshold": -1.0},
    {"policy": {"gamma": 0.0}}, {"policy": {"colour": 1}}, {"domain_overrides": {"maze": {}}},
    {"latent_dim": -1}, {"no_such_key": 1},
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(kw)


def test_yaml_roundtrip(tmp_path):
    cfg = tiny(seed=3)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    back = ExperimentConfig.from_yaml(path)
    assert back.to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_yaml(path, seed=9).seed == 9
    (tmp_path / "bad.yaml").write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(tmp_path / "missing.yaml")


def test_packaged_configs_load():
    from importlib import resources
    for name in ("example.yaml", "smoke.yaml", "hiv_compare.yaml"):
        text = resources.files("hipmdp").joinpath("configs").joinpath(name).read_text()
        ExperimentConfig.from_mapping(yaml.safe_load(text))


def test_seed_streams_are_distinct_and_stable():
    cfg = tiny(seed=4)
    assert cfg.stream_seed(1, 2) == tiny(seed=4).stream_seed(1, 2)
    assert cfg.stream_seed(1, 2) != cfg.stream_seed(2, 1)
    assert cfg.rng(0).random() == tiny(seed=4).rng(0).random()


# -- log ---------------------------------------------------------------------------------


def test_log_order_enforced():
    log = ExperimentLog()
    with pytest.raises(ValueError):
        log.append(record(0, 1, 0.0))
    log.append(record(0, 0, 0.0))
    log.append(record(0, 1, 0.0))
    with pytest.raises(ValueError):
        log.append(record(0, 3, 0.0))
    with pytest.raises(ValueError):
        log.append(record(2, 0, 0.0))
    log.append(record(1, 0, 0.0))
    assert len(log) == 3


def test_log_roundtrip(tmp_path):
    log = ExperimentLog(tmp_path / "log.jsonl", tmp_path / "t.csv")
    log.append(record(0, 0, float("nan")), wall_ms=3.0)
    back = ExperimentLog.read(tmp_path / "log.jsonl")
    assert back.records[0]["cumulative_reward"] is None
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "instance_id,episode,wall_ms"


# -- runs --------------------------------------------------------------------------------


def test_single_episode_single_record():
    log = run_hipmdp(tiny(n_instances=1, episodes_per_instance=1))
    assert len(log) == 1
    assert (log.records[0]["instance_id"], log.records[0]["episode"]) == (0, 0)


@pytest.mark.parametrize("agent,mode", [("hipmdp", "gp"), ("onesize", "gp"), ("onesize", "sim"),
                                        ("personal", "gp"), ("personal", "sim")])
def test_schema_and_outputs(tmp_path, agent, mode):
    cfg = tiny(agent=agent, model_mode=mode)
    log = run_experiment(cfg, tmp_path)
    assert len(log) == 4
    assert all(tuple(r) == ExperimentLog.FIELDS for r in log.records)
    assert [(r["instance_id"], r["episode"]) for r in log.records] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    for name in ("config.yaml", "log.jsonl", "timings.csv", "trajectories.csv", "instances.json", "policy.pt"):
        assert (tmp_path / name).exists()
    with (tmp_path / "trajectories.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["instance_id", "episode", "step", "state_0", "state_1", "action", "reward", "done"]
    assert len(rows) - 1 == sum(r["steps"] for r in log.records)
    assert ExperimentConfig.from_yaml(tmp_path / "config.yaml").to_dict() == cfg.to_dict()
    if agent == "hipmdp":
        inst = json.loads((tmp_path / "instances.json").read_text())
        assert all("latent_weights" in i for i in inst)
        assert log.records[-1]["mu_b"] is not None and len(log.records[-1]["mu_b"]) == 2
    if mode == "gp":
        assert (tmp_path / "model.json").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = tiny(seed=11)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("log.jsonl", "trajectories.csv", "instances.json", "model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_equal_real_step_budget():
    # HIV episodes never terminate early, so equal episode counts mean equal real steps
    kw = dict(domain="hiv", n_instances=2, episodes_per_instance=1, support_size=30, max_candidates=60,
              anneal_steps=20, refit_anneal_steps=20, gp_max_iter=10, n_rollouts=5, rollout_horizon=2,
              train_steps=5, policy={"hidden": [8], "batch_size": 8})
    steps = {}
    for agent in ("hipmdp", "personal", "onesize"):
        log = run_experiment(ExperimentConfig.from_mapping(dict(kw, agent=agent)))
        steps[agent] = [(r["instance_id"], r["steps"]) for r in log.records]
    assert steps["hipmdp"] == steps["personal"] == steps["onesize"] == [(0, 200), (1, 200)]


def test_zero_latent_hipmdp_matches_personal_on_one_instance():
    cfg = tiny(n_instances=1, episodes_per_instance=3, latent_dim=0)
    a = run_hipmdp(cfg)
    b = run_baseline("personal", cfg)
    ra = [r["cumulative_reward"] for r in a.records]
    rb = [r["cumulative_reward"] for r in b.records]
    assert ra == rb
    with pytest.raises(ConfigError):
        run_baseline("oracle", cfg)


def test_onesize_cannot_serve_both_gates():
    # one deterministic greedy policy, evaluated on a red and a blue instance from the same starts
    cfg = tiny(agent="onesize", model_mode="sim", n_instances=2, episodes_per_instance=3)
    dom = make_domain("toy")
    nets = QNetworks(2, 4, cfg.policy_config, seed=0)
    rates = {}
    for cls in ("red", "blue"):
        env = dom.make_env(ToyParams(cls, 0.0), np.random.default_rng(0))
        wins = 0
        for _ in range(50):
            out = run_episode(env, nets, np.random.default_rng(0), lambda: 0.0, 100)
            wins += out[-1].done
        rates[cls] = wins / 50
    assert rates["red"] + rates["blue"] <= 1.0


# -- result tables --------------------------------------------------------------------


def test_emit_single_log(tmp_path):
    out = emit_results([make_log([[1.0, 2.0, 3.0]])], tmp_path, final_window=2)
    assert [e["mean"] for e in out["episodes"]] == [1.0, 2.0, 3.0]
    assert all(e["se"] == 0.0 for e in out["episodes"])
    assert (tmp_path / "episodes.csv").exists() and (tmp_path / "summary.csv").exists()


def test_emit_hand_computed(tmp_path):
    logs = [make_log([[1.0, 4.0], [3.0, 8.0]], "personal"), make_log([[2.0, 6.0]], "personal"),
            make_log([[5.0, 7.0], [5.0, 7.0]], "hipmdp")]
    out = emit_results(logs, tmp_path, final_window=1)
    rows = {(e["agent"], e["episode"]): e for e in out["episodes"]}
    assert rows["personal", 0]["mean"] == 2.0
    assert rows["personal", 0]["se"] == pytest.approx(1.0 / np.sqrt(3))
    assert rows["personal", 1]["mean"] == 6.0
    assert rows["personal", 1]["se"] == pytest.approx(2.0 / np.sqrt(3))
    summary = {s["agent"]: s for s in out["summary"]}
    assert summary["personal"]["final_mean"] == 6.0 and summary["personal"]["threshold"] == 6.0
    assert summary["hipmdp"]["episodes_to_threshold"] == 2
    assert summary["personal"]["episodes_to_threshold"] == 2


def test_emit_order_invariant(tmp_path):
    logs = [make_log([[1.0, 2.0]], "personal"), make_log([[0.5, 3.0]], "hipmdp"), make_log([[4.0, 1.0]], "personal")]
    a = emit_results(logs, tmp_path / "a")
    b = emit_results(logs[::-1], tmp_path / "b")
    assert a == b
    assert (tmp_path / "a" / "episodes.csv").read_bytes() == (tmp_path / "b" / "episodes.csv").read_bytes()


def test_emit_rejects_mixed_domains(tmp_path):
    with pytest.raises(ValueError):
        emit_results([make_log([[1.0]]), make_log([[1.0]], domain="hiv")], tmp_path)
    with pytest.raises(ValueError):
        emit_results([], tmp_path)


def test_emit_threshold_without_reference(tmp_path):
    out = emit_results([make_log([[0.0, 1.0]], "onesize"), make_log([[2.0, 3.0]], "hipmdp")], tmp_path,
                       threshold_agent="personal", final_window=1)
    summary = {s["agent"]: s for s in out["summary"]}
    assert summary["hipmdp"]["threshold"] == 3.0
    assert summary["onesize"]["episodes_to_threshold"] is None


def test_config_replace_keeps_validation():
    cfg = tiny()
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, agent="hipmdp", model_mode="sim")


def _net_checksum(networks):
    return [p.detach().numpy().copy() for p in networks.online.parameters()]


def test_personal_rebuilds_state_at_each_instance():
    from hipmdp.harness import PersonalAgent

    cfg = tiny(agent="personal")
    dom = make_domain("toy")
    agent = PersonalAgent(cfg, dom)
    agent.begin_instance(0, dom.sample_task(0))
    env = dom.make_env(agent.params_seen[-1], np.random.default_rng(0))
    agent.observe_episode(0, 0, run_episode(env, agent.networks, np.random.default_rng(1), lambda: 1.0, 100))
    agent.buffer.extend(agent.synthetic(0, np.random.default_rng(2), 1.0))
    train(agent.networks, agent.buffer, 20, np.random.default_rng(3))
    agent.begin_instance(1, dom.sample_task(1))
    fresh = QNetworks(dom.state_dim, dom.n_actions, cfg.policy_config, seed=cfg.stream_seed(5, 1))
    for a, b in zip(_net_checksum(agent.networks), _net_checksum(fresh)):
        np.testing.assert_array_equal(a, b)
    assert len(agent.buffer) == 0 and len(agent.data) == 0 and agent.model is None


def test_six_toy_instances_separate_by_class(tmp_path):
    from sklearn.svm import SVC

    from hipmdp.latent import LatentTransitionModel

    cfg = tiny(seed=5, n_instances=6, episodes_per_instance=4, support_size=150, max_candidates=300,
               anneal_steps=300, n_rollouts=20, rollout_horizon=5, train_steps=30)
    run_experiment(cfg, tmp_path)
    instances = json.loads((tmp_path / "instances.json").read_text())
    labels = [i["params"]["latent_class"] for i in instances]
    assert sorted(labels) == ["blue"] * 3 + ["red"] * 3  # seed chosen for a 3/3 split
    model = LatentTransitionModel.load(tmp_path / "model.json")
    mu = np.array([model.latent_table_[b].mean for b in range(6)])
    svm = SVC(kernel="linear", C=1e6).fit(mu, labels)
    assert svm.score(mu, labels) == 1.0
