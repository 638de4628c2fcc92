"""Double-DQN trained on prioritized replay of real and model-generated transitions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import IllegalStateError, NumericalFailure
from .latent import LatentWeights, TransitionTuple

PRIORITY_EPS = 1e-6


@dataclass
class PolicyConfig:
    """Hyperparameters of the Q-learner.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths of the Q network.
    gamma : float
        Discount factor in (0, 1].
    lr : float
        Adam learning rate.
    batch_size : int
        Minibatch size per train step.
    alpha : float
        Prioritization exponent; 0 gives uniform replay.
    beta_start, beta_end : float
        Importance-correction exponent, annealed linearly over training.
    target_sync : int
        Train steps between hard target-network syncs.
    capacity : int
        Replay buffer capacity.
    grad_clip : float or None
        Max gradient norm.
    """

    hidden: tuple = (64, 64)
    gamma: float = 0.98
    lr: float = 1e-3
    batch_size: int = 64
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    target_sync: int = 500
    capacity: int = 50_000
    grad_clip: float | None = 10.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.alpha < 0 or self.beta_start < 0 or self.beta_end < 0:
            raise ValueError("replay exponents must be nonnegative")
        if min(self.batch_size, self.target_sync, self.capacity) < 1 or self.lr <= 0:
            raise ValueError("batch_size, target_sync, capacity and lr must be positive")


class QNetwork(nn.Module):
    """Fully connected state -> action-value network with ReLU hidden layers."""

    def __init__(self, state_dim: int, n_actions: int, hidden=(64, 64)):
        super().__init__()
        layers, width = [], state_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, n_actions))
        self.net = nn.Sequential(*layers)
        self.state_dim = state_dim
        self.n_actions = n_actions

    def forward(self, x):
        return self.net(x)

    def values(self, states) -> np.ndarray:
        with torch.no_grad():
            q = self(torch.as_tensor(np.atleast_2d(states), dtype=torch.float64)).numpy()
        if not np.all(np.isfinite(q)):
            raise NumericalFailure("Q network produced non-finite values")
        return q


class QNetworks:
    """Online and target networks, their optimizer and the train-step counter."""

    def __init__(self, state_dim: int, n_actions: int, config: PolicyConfig | None = None, seed=0):
        self.config = config or PolicyConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
        try:
            self.online = QNetwork(state_dim, n_actions, self.config.hidden).double()
            self.target = QNetwork(state_dim, n_actions, self.config.hidden).double()
        finally:
            torch.random.set_rng_state(gen_state)
        self.sync()
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=self.config.lr)
        self.steps = 0

    @property
    def n_actions(self) -> int:
        return self.online.n_actions

    def sync(self):
        self.target.load_state_dict(self.online.state_dict())

    def greedy(self, state) -> int:
        return int(np.argmax(self.online.values(state)[0]))

    def act(self, state, epsilon: float, rng: np.random.Generator) -> int:
        """Epsilon-greedy action; one uniform draw always, a second only when exploring."""
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return self.greedy(state)

    def state_dict(self) -> dict:
        return {"online": self.online.state_dict(), "target": self.target.state_dict(),
                "optimizer": self.optimizer.state_dict(), "steps": self.steps}

    def load_state_dict(self, d: dict):
        self.online.load_state_dict(d["online"])
        self.target.load_state_dict(d["target"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.steps = int(d["steps"])

    def save(self, path):
        """Write a ``torch.save`` archive of both networks, optimizer state and step count."""
        torch.save(self.state_dict(), path)

    def load(self, path):
        self.load_state_dict(torch.load(path, weights_only=True))
        return self


def epsilon_at(step: int, total_steps: int, start=1.0, end=0.05, fraction=0.2) -> float:
    """Linear exploration schedule over the first ``fraction`` of ``total_steps``."""
    horizon = max(1, int(round(fraction * total_steps)))
    if step >= horizon:
        return end
    return start + (end - start) * step / horizon


class PrioritizedBuffer:
    """Fixed-capacity ring buffer with proportional priorities.

    New entries get the current maximum priority (1 for an empty buffer), so
    every stored transition is sampled at least with positive probability.
    """

    def __init__(self, capacity: int, state_dim: int, alpha: float = 0.6):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.synthetic = np.zeros(capacity, dtype=bool)
        self.priorities = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, t: TransitionTuple, default_priority: float | None = None):
        i = self._next
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.synthetic[i] = t.synthetic
        p = t.priority
        if p is None:
            p = default_priority if default_priority is not None else self.max_priority()
        if not p > 0:
            raise ValueError("priorities must be positive")
        self.priorities[i] = p
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def max_priority(self) -> float:
        return float(self.priorities[: self.size].max()) if self.size else 1.0

    def extend(self, transitions):
        p = self.max_priority()
        for t in transitions:
            self.add(t, p)

    def update_priorities(self, indices, priorities):
        priorities = np.asarray(priorities, dtype=float)
        if np.any(~(priorities > 0)):
            raise ValueError("priorities must be positive")
        self.priorities[np.asarray(indices)] = priorities

    def evict_synthetic(self) -> int:
        """Drop every synthetic entry, compacting the rest in insertion order."""
        if self.size == 0:
            return 0
        order = (np.arange(self.size) + (self._next if self.size == self.capacity else 0)) % self.capacity
        keep = order[~self.synthetic[order]]
        removed = self.size - len(keep)
        if removed == 0:
            return 0
        for name in ("states", "next_states", "actions", "rewards", "dones", "synthetic", "priorities"):
            arr = getattr(self, name)
            kept = arr[keep].copy()
            arr[: len(keep)] = kept
        self.size = len(keep)
        self._next = self.size % self.capacity
        return removed

    def clear(self):
        self.size = 0
        self._next = 0


def sampling_probabilities(buffer: PrioritizedBuffer) -> np.ndarray:
    scaled = buffer.priorities[: buffer.size] ** buffer.alpha
    return scaled / scaled.sum()


def prioritized_sample(buffer: PrioritizedBuffer, batch_size: int, beta: float, rng: np.random.Generator):
    """Draw ``batch_size`` indices with replacement, P(i) proportional to p_i^alpha.

    Returns ``(indices, weights)`` with importance weights ``(N P(i))^-beta``
    divided by their batch maximum.
    """
    if buffer.size == 0:
        raise IllegalStateError("cannot sample from an empty replay buffer")
    probs = sampling_probabilities(buffer)
    idx = rng.choice(buffer.size, size=batch_size, replace=True, p=probs)
    w = (buffer.size * probs[idx]) ** (-beta)
    return idx, w / w.max()


def ddqn_target(r, s_next, done, online: QNetwork, target: QNetwork, gamma: float):
    """Double-Q bootstrap target, vectorized over rows of ``s_next``.

    The online network picks the action (lowest index on ties) and the
    target network evaluates it. Terminal rows return ``r``.
    """
    r = np.asarray(r, dtype=float)
    done = np.asarray(done, dtype=bool)
    q_online = online.values(s_next)
    q_target = target.values(s_next)
    best = np.argmax(q_online, axis=1)
    boot = q_target[np.arange(len(best)), best]
    out = np.where(done, r, r + gamma * boot.reshape(r.shape))
    return float(out) if out.ndim == 0 else out


def train_step(networks: QNetworks, buffer: PrioritizedBuffer, batch_size: int, gamma: float,
               rng: np.random.Generator, beta: float | None = None) -> float:
    """One prioritized minibatch update. Returns the weighted squared TD loss."""
    if buffer.size < batch_size:
        raise IllegalStateError(f"buffer holds {buffer.size} transitions, need {batch_size}")
    cfg = networks.config
    beta = cfg.beta_start if beta is None else beta
    idx, weights = prioritized_sample(buffer, batch_size, beta, rng)

    s = torch.as_tensor(buffer.states[idx])
    a = torch.as_tensor(buffer.actions[idx])
    s2 = torch.as_tensor(buffer.next_states[idx])
    r = torch.as_tensor(buffer.rewards[idx])
    done = torch.as_tensor(buffer.dones[idx])
    with torch.no_grad():
        best = networks.online(s2).argmax(dim=1, keepdim=True)
        boot = networks.target(s2).gather(1, best).squeeze(1)
        y = torch.where(done, r, r + gamma * boot)
    q = networks.online(s).gather(1, a.unsqueeze(1)).squeeze(1)
    td = y - q
    loss = (torch.as_tensor(weights) * td.pow(2)).mean()
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite TD loss at train step {networks.steps}")
    networks.optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip:
        nn.utils.clip_grad_norm_(networks.online.parameters(), cfg.grad_clip)
    networks.optimizer.step()

    buffer.update_priorities(idx, np.abs(td.detach().numpy()) + PRIORITY_EPS)
    networks.steps += 1
    if networks.steps % cfg.target_sync == 0:
        networks.sync()
    return loss.item()


def train(networks: QNetworks, buffer: PrioritizedBuffer, n_steps: int, rng: np.random.Generator,
          progress: float = 0.0) -> float:
    """Run ``n_steps`` train steps; ``progress`` in [0, 1] sets the beta annealing point.

    Returns the mean loss, or NaN when the buffer is still smaller than a batch.
    """
    cfg = networks.config
    if buffer.size < cfg.batch_size or n_steps < 1:
        return math.nan
    beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * min(max(progress, 0.0), 1.0)
    losses = [train_step(networks, buffer, cfg.batch_size, cfg.gamma, rng, beta) for _ in range(n_steps)]
    return float(np.mean(losses))


def synthetic_rollout(model, policy: QNetworks, weights: LatentWeights, start_states, horizon: int,
                      rng: np.random.Generator, reward_fn, epsilon: float = 0.0, clip_fn=None):
    """Imagined transitions from the learned model under an epsilon-greedy policy.

    All rollouts advance in lockstep; the result is grouped by start state.

    ``reward_fn(states, actions, next_states) -> (rewards, terminal)`` scores
    each imagined step; a rollout stops early on a terminal step.
    ``clip_fn`` projects sampled states back into the valid state set.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    S = np.atleast_2d(np.array(start_states, dtype=float))
    steps = [[] for _ in range(len(S))]
    alive = np.arange(len(S))
    for _ in range(horizon):
        if len(alive) == 0:
            break
        s = S[alive]
        explore = rng.random(len(alive)) < epsilon
        random_actions = rng.integers(policy.n_actions, size=len(alive))
        actions = np.where(explore, random_actions, np.argmax(policy.online.values(s), axis=1))
        mean, var = model.predict_next(s, actions, weights)
        s2 = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        if clip_fn is not None:
            s2 = clip_fn(s2)
        r, term = reward_fn(s, actions, s2)
        for j, i in enumerate(alive):
            steps[i].append(TransitionTuple(s[j].copy(), int(actions[j]), s2[j].copy(), float(r[j]), bool(term[j]),
                                            synthetic=True))
        S[alive] = s2
        alive = alive[~np.asarray(term, dtype=bool)]
    return [t for rollout in steps for t in rollout]
