"""Experiment orchestration: the HiP-MDP agent loop, the two baselines, logging and result tables.

Every random stream is derived from the master seed and a fixed role key, so a
run is fully determined by its configuration. Wall-clock timings go to a
separate sidecar file so the main log stays byte-identical across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from sklearn.exceptions import ConvergenceWarning

from .domains import load_domain_config, make_domain
from .latent import (LatentTransitionModel, LatentWeights, TransitionTuple, augment_batch, infer_latent_weights,
                     update_global_model)
from .policy import PolicyConfig, PrioritizedBuffer, QNetworks, epsilon_at, synthetic_rollout, train

AGENTS = ("hipmdp", "onesize", "personal")
MODEL_MODES = ("sim", "gp")
AGENT_LABELS = {"hipmdp": "HiP-MDP", "onesize": "OneSizeFitsAll", "personal": "PersonallyTailored"}

# Per-domain budgets used when the config leaves them unset.
DOMAIN_DEFAULTS = {
    "toy": {"n_instances": 20, "episodes_per_instance": 15, "n_rollouts": 100, "rollout_horizon": 10},
    "hiv": {"n_instances": 5, "episodes_per_instance": 30, "n_rollouts": 30, "rollout_horizon": 5},
}

# Stream keys for seed derivation.
_TASK, _ENV, _ACT, _SYNTH, _TRAIN, _NET = range(6)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Everything that determines a run. See ``configs/example.yaml`` for an annotated copy."""

    domain: str = "toy"
    agent: str = "hipmdp"
    model_mode: str = "gp"
    seed: int = 0
    n_instances: int | None = None
    episodes_per_instance: int | None = None
    latent_dim: int = 2
    support_size: int = 300
    max_candidates: int = 500
    anneal_steps: int = 2000
    refit_anneal_steps: int = 200
    gp_max_iter: int = 200
    model_refit_every: int = 1
    infer_every: int = 1
    n_rollouts: int | None = None
    rollout_horizon: int | None = None
    train_steps: int = 200
    evict_threshold: float = 0.5
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.2
    policy: dict = field(default_factory=dict)
    domain_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAIN_DEFAULTS:
            raise ConfigError(f"domain must be one of {sorted(DOMAIN_DEFAULTS)}, got {self.domain!r}")
        if self.agent not in AGENTS:
            raise ConfigError(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.model_mode not in MODEL_MODES:
            raise ConfigError(f"model must be one of {MODEL_MODES}, got {self.model_mode!r}")
        if self.agent == "hipmdp" and self.model_mode != "gp":
            raise ConfigError("the HiP-MDP agent always plans with its latent GP model; use --model gp")
        for key, value in DOMAIN_DEFAULTS[self.domain].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        counts = ("n_instances", "episodes_per_instance", "support_size", "max_candidates", "gp_max_iter",
                  "model_refit_every", "infer_every", "n_rollouts", "rollout_horizon")
        for key in counts:
            if not isinstance(getattr(self, key), int) or getattr(self, key) < 1:
                raise ConfigError(f"{key} must be a positive integer, got {getattr(self, key)!r}")
        for key in ("latent_dim", "anneal_steps", "refit_anneal_steps", "train_steps"):
            if not isinstance(getattr(self, key), int) or getattr(self, key) < 0:
                raise ConfigError(f"{key} must be a nonnegative integer, got {getattr(self, key)!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1 or not 0 < self.epsilon_fraction <= 1:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1 and 0 < epsilon_fraction <= 1")
        if self.evict_threshold < 0:
            raise ConfigError("evict_threshold must be nonnegative")
        try:
            self.policy_config = PolicyConfig(**self.policy)
            self.domain_config = load_domain_config(self.domain_overrides)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_mapping(cls, data: dict | None, **overrides) -> ExperimentConfig:
        data = dict(data or {})
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path, **overrides) -> ExperimentConfig:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_mapping(data, **overrides)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @property
    def run_id(self) -> str:
        return f"{self.domain}-{self.agent}-{self.model_mode}-s{self.seed}"

    def rng(self, *key) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])

    def stream_seed(self, *key) -> int:
        return int(np.random.SeedSequence([self.seed, *key]).generate_state(1)[0])


class ExperimentLog:
    """Append-only episode records, optionally mirrored to a JSON-lines file flushed per episode."""

    FIELDS = ("run_id", "agent", "domain", "instance_id", "episode", "steps", "cumulative_reward", "mu_b",
              "model_rmse", "loss")

    def __init__(self, path=None, timings_path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self.timings_path = Path(timings_path) if timings_path else None
        for p in (self.path, self.timings_path):
            if p is not None:
                p.write_text("")
        if self.timings_path is not None:
            self.timings_path.write_text("instance_id,episode,wall_ms\n")

    def append(self, record: dict, wall_ms: float | None = None):
        if self.records:
            last = self.records[-1]
            key, prev = (record["instance_id"], record["episode"]), (last["instance_id"], last["episode"])
            expected = (prev[0], prev[1] + 1) if record["instance_id"] == prev[0] else (prev[0] + 1, 0)
            if key != expected:
                raise ValueError(f"log record {key} breaks (instance, episode) order after {prev}")
        elif (record["instance_id"], record["episode"]) != (0, 0):
            raise ValueError("the first log record must be instance 0, episode 0")
        record = {k: record.get(k) for k in self.FIELDS}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(_clean(record), allow_nan=False) + "\n")
        if self.timings_path is not None and wall_ms is not None:
            with self.timings_path.open("a") as fh:
                fh.write(f"{record['instance_id']},{record['episode']},{wall_ms:.1f}\n")

    @classmethod
    def read(cls, path) -> ExperimentLog:
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.records.append(json.loads(line))
        return log

    def __len__(self):
        return len(self.records)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    return obj


# ---------------------------------------------------------------------------
# transition data
# ---------------------------------------------------------------------------


class TransitionLog:
    """Real transitions of one or more instances, kept as growing arrays."""

    def __init__(self):
        self.states, self.actions, self.next_states = [], [], []
        self.instance = []

    def extend(self, transitions, instance_id):
        for t in transitions:
            self.states.append(t.state)
            self.actions.append(t.action)
            self.next_states.append(t.next_state)
            self.instance.append(instance_id)

    def __len__(self):
        return len(self.states)

    def arrays(self, instance_id=None):
        idx = [i for i, b in enumerate(self.instance) if instance_id is None or b == instance_id]
        S = np.array([self.states[i] for i in idx], dtype=float)
        return S, np.array([self.actions[i] for i in idx], dtype=int), np.array([self.next_states[i] for i in idx])


def _fit_pooled_model(cfg: ExperimentConfig, domain, data: TransitionLog, refit_round: int, instance_id=None,
                      init=None):
    """Latent-free GP transition model on (a subsample of) real data."""
    S, A, S2 = data.arrays(instance_id)
    rng = cfg.rng(_SYNTH, 1000 + refit_round)
    if len(S) > cfg.max_candidates:
        keep = np.sort(rng.choice(len(S), size=cfg.max_candidates, replace=False))
        S, A, S2 = S[keep], A[keep], S2[keep]
    model = LatentTransitionModel(n_actions=domain.n_actions, latent_dim=0, support_size=min(cfg.support_size, len(S)),
                                  max_candidates=cfg.max_candidates, anneal_steps=cfg.refit_anneal_steps,
                                  gp_max_iter=cfg.gp_max_iter, random_state=cfg.seed)
    X = augment_batch(S, A, np.zeros(0), domain.n_actions)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit(X, S2 - S, init_hypers=init, fit_round=refit_round)


def _interim_latent_model(cfg, domain, data: TransitionLog, instance_id, refit_round, init=None):
    """Single-instance model with the latent inputs pinned at the prior mean.

    Uses the same subsample stream as the first instance of the
    PersonallyTailored baseline, so with ``latent_dim=0`` the two coincide.
    """
    S, A, S2 = data.arrays(instance_id)
    rng = cfg.rng(_SYNTH, 1000 + refit_round)
    if len(S) > cfg.max_candidates:
        keep = np.sort(rng.choice(len(S), size=cfg.max_candidates, replace=False))
        S, A, S2 = S[keep], A[keep], S2[keep]
    model = _hipmdp_model(cfg, domain, anneal_steps=cfg.refit_anneal_steps, support=min(cfg.support_size, len(S)))
    X = augment_batch(S, A, np.zeros(cfg.latent_dim), domain.n_actions)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit(X, S2 - S, init_hypers=init, fit_round=refit_round)


def _hipmdp_model(cfg, domain, anneal_steps=None, support=None):
    return LatentTransitionModel(n_actions=domain.n_actions, latent_dim=cfg.latent_dim,
                                 support_size=support or cfg.support_size, max_candidates=cfg.max_candidates,
                                 anneal_steps=cfg.anneal_steps if anneal_steps is None else anneal_steps,
                                 gp_max_iter=cfg.gp_max_iter, random_state=cfg.seed)


def simulator_rollout(domain, params_list, policy: QNetworks, start_states, horizon: int, rng, epsilon: float):
    """Synthetic transitions from true simulators; each rollout picks one of ``params_list``."""
    out = []
    for s in np.atleast_2d(start_states):
        params = params_list[int(rng.integers(len(params_list)))]
        for _ in range(horizon):
            a = policy.act(s, epsilon, rng)
            s2, r, term = domain.simulate(params, s[None], [a], rng)
            out.append(TransitionTuple(s.copy(), a, s2[0], float(r[0]), bool(term[0]), synthetic=True))
            if term[0]:
                break
            s = s2[0]
    return out


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------


class _Agent:
    """Shared plumbing: networks, replay buffer and the per-instance data log."""

    kind = ""

    def __init__(self, cfg: ExperimentConfig, domain):
        self.cfg = cfg
        self.domain = domain
        self.data = TransitionLog()
        self.networks = None
        self.buffer = None
        self.model = None
        self.mu = None
        self.params_seen = []

    def _fresh_policy(self, key):
        pc = self.cfg.policy_config
        self.networks = QNetworks(self.domain.state_dim, self.domain.n_actions, pc, seed=self.cfg.stream_seed(_NET, key))
        self._fresh_buffer()

    def _fresh_buffer(self):
        pc = self.cfg.policy_config
        self.buffer = PrioritizedBuffer(pc.capacity, self.domain.state_dim, pc.alpha)

    def begin_instance(self, b: int, params):
        self.params_seen.append(params)

    def observe_episode(self, b, episode, transitions):
        """Store real data; returns (mu or None, one-step RMSE of the planning model)."""
        rmse = self._model_rmse(transitions)
        self.data.extend(transitions, b)
        self.buffer.extend(self._train_tuples(transitions))
        self.update_model(b, episode)
        return self.mu, rmse

    def update_model(self, b, episode):
        pass

    def end_instance(self, b):
        pass

    def _model_rmse(self, transitions):
        if self.model is None:
            return None
        return self.model.one_step_rmse(transitions, self._weights())

    def _weights(self):
        if self.mu is None:
            return np.zeros(self.model.latent_dim)
        return self.mu

    def _train_tuples(self, transitions):
        return [dataclasses.replace(t, reward=float(self.domain.train_reward(t.reward))) for t in transitions]

    def synthetic(self, b, rng, epsilon):
        cfg = self.cfg
        S, _, _ = self.data.arrays(b)
        if len(S) == 0:
            return []
        starts = S[rng.choice(len(S), size=cfg.n_rollouts, replace=True)]
        if self.cfg.model_mode == "sim":
            raw = simulator_rollout(self.domain, self._sim_params(), self.networks, starts, cfg.rollout_horizon,
                                    rng, epsilon)
        elif self.model is None:
            return []
        else:
            raw = synthetic_rollout(self.model, self.networks, self._weights(), starts, cfg.rollout_horizon, rng,
                                    self.domain.model_reward, epsilon, self.domain.clip_state)
        return self._train_tuples(raw)

    def _sim_params(self):
        return self.params_seen[-1:]


class HipMdpAgent(_Agent):
    """Latent GP model shared across instances.

    The policy and the real replay data carry over between instances. Synthetic
    replay is dropped at each boundary, since it was imagined under the
    previous instance's latent weights.
    """

    kind = "hipmdp"

    def __init__(self, cfg, domain):
        super().__init__(cfg, domain)
        self.global_model = None
        self._fresh_policy(0)
        self.weights = None
        self._refits = 0

    def begin_instance(self, b, params):
        super().begin_instance(b, params)
        self.buffer.evict_synthetic()
        self.weights = LatentWeights.prior(self.cfg.latent_dim, b)
        self.model = self.global_model
        self.mu = self.weights.mean.copy() if self.global_model is not None else None

    def update_model(self, b, episode):
        cfg = self.cfg
        if self.global_model is None:
            # No shared model yet: refit a single-instance model on this instance's data.
            if episode % cfg.model_refit_every == 0:
                init = self.model.hypers if self.model is not None else None
                self.model = _interim_latent_model(cfg, self.domain, self.data, b, self._refits, init)
                self._refits += 1
            return
        if episode % cfg.infer_every == 0:
            S, A, S2 = self.data.arrays(b)
            previous = self.weights
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                self.weights = infer_latent_weights(self.global_model, (S, A, S2),
                                                    LatentWeights.prior(cfg.latent_dim, b), init=previous)
            self.weights.instance_id = b
            if np.linalg.norm(self.weights.mean - previous.mean) > cfg.evict_threshold:
                self.buffer.evict_synthetic()
            self.mu = self.weights.mean.copy()

    def end_instance(self, b):
        transitions = self.data.arrays(b)
        base = self.global_model if self.global_model is not None else _hipmdp_model(self.cfg, self.domain)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.global_model = update_global_model(base, b, transitions, self.weights)
        # the refit may move every stored instance, including this one
        self.weights = self.global_model.latent_table_[b]


class OneSizeAgent(_Agent):
    """One policy and one latent-free model over the pooled data of every instance."""

    kind = "onesize"

    def __init__(self, cfg, domain):
        super().__init__(cfg, domain)
        self._fresh_policy(0)
        self._refits = 0

    def update_model(self, b, episode):
        if self.cfg.model_mode == "gp" and episode % self.cfg.model_refit_every == 0:
            init = self.model.hypers if self.model is not None else None
            self.model = _fit_pooled_model(self.cfg, self.domain, self.data, self._refits, init=init)
            self._refits += 1

    def _sim_params(self):
        return self.params_seen


class PersonalAgent(_Agent):
    """Fresh policy, buffer and model for every instance, built from that instance alone."""

    kind = "personal"

    def begin_instance(self, b, params):
        super().begin_instance(b, params)
        self._fresh_policy(b)
        self.data = TransitionLog()
        self.model = None
        self._refits = 0

    def update_model(self, b, episode):
        if self.cfg.model_mode == "gp" and episode % self.cfg.model_refit_every == 0:
            init = self.model.hypers if self.model is not None else None
            self.model = _fit_pooled_model(self.cfg, self.domain, self.data, 100 * b + self._refits, b, init)
            self._refits += 1


_AGENT_CLASSES = {"hipmdp": HipMdpAgent, "onesize": OneSizeAgent, "personal": PersonalAgent}


# ---------------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------------


def run_episode(env, networks: QNetworks, rng, epsilon_fn, max_steps: int):
    """One real episode. ``done`` on each tuple marks true termination only."""
    s = env.reset()
    out = []
    for _ in range(max_steps):
        a = networks.act(s, epsilon_fn(), rng)
        s2, r, terminal, truncated = env.step(a)
        out.append(TransitionTuple(np.asarray(s, float).copy(), a, np.asarray(s2, float).copy(), float(r),
                                   bool(terminal)))
        s = s2
        if terminal or truncated:
            break
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentLog:
    """Run ``cfg.agent`` over ``cfg.n_instances`` sequential instances.

    With ``out_dir`` the log, timings, trajectories and final checkpoints are
    written there; the log is flushed after every episode.
    """
    torch.set_num_threads(1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    log = ExperimentLog(out / "log.jsonl" if out else None, out / "timings.csv" if out else None)
    traj = TrajectoryWriter(out / "trajectories.csv", make_domain(cfg.domain).state_dim) if out else None

    domain = make_domain(cfg.domain, cfg.domain_config)
    agent = _AGENT_CLASSES[cfg.agent](cfg, domain)
    instances = []
    steps_per_instance = cfg.episodes_per_instance * domain.max_steps
    try:
        for b in range(cfg.n_instances):
            params = domain.sample_task(cfg.stream_seed(_TASK, b))
            instances.append({"instance_id": b, "params": domain.describe(params)})
            agent.begin_instance(b, params)
            env = domain.make_env(params, cfg.rng(_ENV, b))
            act_rng, synth_rng, train_rng = cfg.rng(_ACT, b), cfg.rng(_SYNTH, b), cfg.rng(_TRAIN, b)
            counter = [0]

            def epsilon():
                e = epsilon_at(counter[0], steps_per_instance, cfg.epsilon_start, cfg.epsilon_end,
                               cfg.epsilon_fraction)
                counter[0] += 1
                return e

            for episode in range(cfg.episodes_per_instance):
                t0 = time.perf_counter()
                transitions = run_episode(env, agent.networks, act_rng, epsilon, domain.max_steps)
                mu, rmse = agent.observe_episode(b, episode, transitions)
                eps_now = epsilon_at(counter[0], steps_per_instance, cfg.epsilon_start, cfg.epsilon_end,
                                     cfg.epsilon_fraction)
                agent.buffer.extend(agent.synthetic(b, synth_rng, eps_now))
                progress = (b * cfg.episodes_per_instance + episode + 1) / (cfg.n_instances * cfg.episodes_per_instance)
                loss = train(agent.networks, agent.buffer, cfg.train_steps, train_rng, progress)
                if traj is not None:
                    traj.write(b, episode, transitions)
                log.append({
                    "run_id": cfg.run_id, "agent": cfg.agent, "domain": cfg.domain, "instance_id": b,
                    "episode": episode, "steps": len(transitions),
                    "cumulative_reward": float(sum(t.reward for t in transitions)),
                    "mu_b": None if mu is None else [float(v) for v in mu],
                    "model_rmse": rmse, "loss": loss,
                }, wall_ms=1000 * (time.perf_counter() - t0))
            agent.end_instance(b)
    finally:
        if out is not None:
            _write_checkpoints(out, cfg, agent, instances)
    return log


def _write_checkpoints(out: Path, cfg, agent, instances):
    for inst in instances:
        table = getattr(agent, "global_model", None)
        b = inst["instance_id"]
        if table is not None and b in table.latent_table_:
            inst["latent_weights"] = table.latent_table_[b].to_dict()
    (out / "instances.json").write_text(json.dumps(_clean(instances), indent=1))
    model = getattr(agent, "global_model", None) or agent.model
    if model is not None and model.is_fitted:
        model.save(out / "model.json")
    if agent.networks is not None:
        agent.networks.save(out / "policy.pt")


class TrajectoryWriter:
    """CSV dump of real transitions: instance_id, episode, step, state..., action, reward, done."""

    def __init__(self, path, state_dim: int):
        self.path = Path(path)
        names = [f"state_{i}" for i in range(state_dim)]
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(["instance_id", "episode", "step", *names, "action", "reward", "done"])

    def write(self, instance_id, episode, transitions):
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for step, t in enumerate(transitions):
                w.writerow([instance_id, episode, step, *[repr(float(v)) for v in t.state], t.action,
                            repr(float(t.reward)), int(t.done)])


def run_hipmdp(cfg: ExperimentConfig, out_dir=None) -> ExperimentLog:
    return run_experiment(dataclasses.replace(cfg, agent="hipmdp", model_mode="gp"), out_dir)


def run_baseline(kind: str, cfg: ExperimentConfig, model_mode: str = "gp", out_dir=None) -> ExperimentLog:
    """``kind`` is ``"onesize"`` or ``"personal"``; ``model_mode`` is ``"sim"`` or ``"gp"``."""
    if kind not in ("onesize", "personal"):
        raise ConfigError(f"unknown baseline {kind!r}")
    return run_experiment(dataclasses.replace(cfg, agent=kind, model_mode=model_mode), out_dir)


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------


def reward_curves(logs) -> dict:
    """Per agent: matrix (n_logs x n_instances, episodes) of cumulative rewards."""
    rows = {}
    for log in logs:
        records = log.records if isinstance(log, ExperimentLog) else log
        per_instance = {}
        for r in records:
            per_instance.setdefault(r["instance_id"], {})[r["episode"]] = r["cumulative_reward"]
        for inst in sorted(per_instance):
            eps = per_instance[inst]
            rows.setdefault(records[0]["agent"], []).append([eps[e] for e in sorted(eps)])
    return rows


def emit_results(logs, out_path, threshold_agent: str = "personal", final_window: int = 5) -> dict:
    """Write ``episodes.csv`` and ``summary.csv`` under ``out_path`` and return both tables.

    ``episodes.csv`` holds, per agent and within-instance episode index, the
    mean and standard error of cumulative reward over every (log, instance)
    pair. ``summary.csv`` holds each agent's mean over the last
    ``final_window`` episodes and the first episode whose mean reaches the
    threshold: the final performance of ``threshold_agent`` when present,
    otherwise the best final performance of any agent.
    """
    logs = list(logs)
    if not logs:
        raise ValueError("emit_results needs at least one log")
    domains = {(lg.records if isinstance(lg, ExperimentLog) else lg)[0]["domain"] for lg in logs}
    if len(domains) != 1:
        raise ValueError(f"logs mix domains: {sorted(domains)}")
    curves = reward_curves(logs)
    episodes, stats = [], {}
    for agent in sorted(curves):
        lengths = {len(c) for c in curves[agent]}
        n_ep = min(lengths)
        M = np.array([c[:n_ep] for c in curves[agent]], dtype=float)
        mean = M.mean(axis=0)
        se = M.std(axis=0, ddof=1) / np.sqrt(len(M)) if len(M) > 1 else np.zeros(n_ep)
        stats[agent] = mean
        for e in range(n_ep):
            episodes.append({"agent": agent, "episode": e, "n": len(M), "mean": float(mean[e]), "se": float(se[e])})

    finals = {a: float(np.mean(m[-final_window:])) for a, m in stats.items()}
    threshold = finals[threshold_agent] if threshold_agent in finals else max(finals.values())
    summary = []
    for agent in sorted(stats):
        hit = np.flatnonzero(stats[agent] >= threshold)
        summary.append({"agent": agent, "episodes": len(stats[agent]), "final_mean": finals[agent],
                        "threshold": threshold, "episodes_to_threshold": int(hit[0]) + 1 if len(hit) else None})

    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "episodes.csv", episodes, ["agent", "episode", "n", "mean", "se"])
    _write_csv(out / "summary.csv", summary, ["agent", "episodes", "final_mean", "threshold", "episodes_to_threshold"])
    return {"episodes": episodes, "summary": summary}


def _write_csv(path, rows, columns):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in columns})
