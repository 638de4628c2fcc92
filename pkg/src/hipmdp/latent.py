"""Latent-variable GP transition model shared across task instances.

Each GP input is a state, a one-hot action and the instance's latent
weights, concatenated in that order. One GP per state dimension regresses the
state change ``s' - s``. Instances are told apart only through their latent
weights. A new instance's weights are inferred by maximizing the predictive
likelihood of its observed transitions under the shared model.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import ConvergenceWarning

from .exceptions import IllegalStateError, NumericalFailure
from .gp import (LOG_BOUNDS, GPModel, KernelHyper, gp_fit, gp_predict_batch, kernel_matrix, mll_input_gradient,
                 stable_cholesky)


@dataclass
class LatentWeights:
    """Gaussian belief over one instance's latent weights (diagonal covariance)."""

    mean: np.ndarray
    covariance: np.ndarray
    instance_id: object = None
    converged: bool = True

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.asarray(self.covariance, dtype=float)
        self.covariance = np.diag(cov) if cov.ndim == 1 else cov.copy()
        k = self.mean.shape[0]
        if self.covariance.shape != (k, k):
            raise ValueError(f"covariance must be {k}x{k}, got {self.covariance.shape}")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("latent weights must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def prior(cls, dim: int, instance_id=None) -> LatentWeights:
        return cls(np.zeros(dim), np.eye(dim), instance_id)

    @classmethod
    def sample_prior(cls, dim: int, rng: np.random.Generator, instance_id=None) -> LatentWeights:
        return cls(rng.standard_normal(dim), np.eye(dim), instance_id)

    def to_dict(self) -> dict:
        return {
            "instance_id": _plain(self.instance_id),
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LatentWeights:
        return cls(d["mean"], d["covariance"], d["instance_id"])


def _plain(v):
    # numpy scalars (e.g. int64 group labels) become JSON-friendly Python values
    return v.item() if isinstance(v, np.generic) else v


@dataclass
class TransitionTuple:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward: float
    done: bool
    priority: float | None = None
    synthetic: bool = False


def as_arrays(transitions):
    """Split transitions into ``(states, actions, next_states)`` arrays.

    Accepts a list of :class:`TransitionTuple` or an already-split triple.
    """
    if isinstance(transitions, tuple) and len(transitions) == 3 and not isinstance(transitions[0], TransitionTuple):
        s, a, s2 = transitions
        return np.atleast_2d(np.asarray(s, float)), np.asarray(a, int).ravel(), np.atleast_2d(np.asarray(s2, float))
    transitions = list(transitions)
    if not transitions:
        return np.empty((0, 0)), np.empty(0, dtype=int), np.empty((0, 0))
    return (
        np.array([t.state for t in transitions], dtype=float),
        np.array([t.action for t in transitions], dtype=int),
        np.array([t.next_state for t in transitions], dtype=float),
    )


def encode_actions(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    if np.any(actions < 0) or np.any(actions >= n_actions):
        raise ValueError(f"actions must lie in [0, {n_actions})")
    return np.eye(n_actions)[actions]


def augment(state, action, weights, n_actions: int) -> np.ndarray:
    """Concatenate ``[state, one-hot(action), weights.mean]``."""
    w = weights.mean if isinstance(weights, LatentWeights) else np.atleast_1d(np.asarray(weights, float))
    state = np.atleast_1d(np.asarray(state, dtype=float))
    if state.ndim != 1:
        raise ValueError("augment expects a single state vector")
    return np.concatenate([state, encode_actions(action, n_actions), w])


def augment_batch(states, actions, weights, n_actions: int) -> np.ndarray:
    """Row-wise :func:`augment`; ``weights`` is one vector or one row per state."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    W = np.asarray(weights.mean if isinstance(weights, LatentWeights) else weights, dtype=float)
    if W.ndim <= 1:
        W = np.broadcast_to(W.reshape(1, -1), (len(states), W.size))
    if len(W) != len(states):
        raise ValueError("need one weight row per state")
    return np.hstack([states, encode_actions(actions, n_actions), W])


# ---------------------------------------------------------------------------
# support-point selection
# ---------------------------------------------------------------------------


@dataclass
class AnnealConfig:
    """Simulated-annealing schedule for support-point selection.

    ``initial_temperature=None`` starts at the initial objective value; ``0``
    gives a greedy search that only accepts non-worsening swaps.
    """

    n_steps: int = 2000
    cooling: float = 0.95
    holdout_fraction: float = 0.2
    initial_temperature: float | None = None
    seed: int = 0


@dataclass
class SelectionResult:
    indices: np.ndarray
    objective: float
    trace: list = field(default_factory=list)
    holdout: np.ndarray = None


class _ReconstructionObjective:
    """Max abs held-out error of GPs conditioned on a subset of candidate rows."""

    def __init__(self, X, Y, cand, hold, hypers):
        self.blocks = []
        for d, h in enumerate(hypers):
            K_cc = kernel_matrix(X[cand], X[cand], h)
            K_cc[np.diag_indices_from(K_cc)] += h.noise_variance
            self.blocks.append((K_cc, kernel_matrix(X[hold], X[cand], h), Y[cand, d], Y[hold, d]))

    def __call__(self, subset) -> float:
        worst = 0.0
        for K_cc, K_hc, y_c, y_h in self.blocks:
            L, _ = stable_cholesky(K_cc[np.ix_(subset, subset)])
            alpha = linalg.cho_solve((L, True), y_c[subset], check_finite=False)
            worst = max(worst, float(np.max(np.abs(K_hc[:, subset] @ alpha - y_h))))
        return worst


def _initial_hypers(X, Y, m, rng, max_iter):
    idx = np.sort(rng.choice(len(X), size=min(m, len(X)), replace=False))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return [gp_fit(X[idx], Y[idx, d], max_iter=max_iter).hyper for d in range(Y.shape[1])]


def select_support_points(inputs, targets, m: int, anneal_config: AnnealConfig | None = None,
                          hypers=None, full_output=False):
    """Choose ``m`` rows whose GP best reconstructs a held-out split (min-max error).

    Rows are canonically sorted before any random draw, so the selected points
    do not depend on input row order. ``hypers`` gives one :class:`KernelHyper`
    per target column; when omitted they are fitted on a random subset.
    Returns sorted row indices, or a :class:`SelectionResult` with
    ``full_output=True``.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.asarray(targets, dtype=float).reshape(len(X), -1)
    N = len(X)
    if not 1 <= m <= N:
        raise ValueError(f"support size m={m} must lie in [1, N={N}]")
    if m == N:
        res = SelectionResult(np.arange(N), 0.0)
        return res if full_output else res.indices
    cfg = anneal_config or AnnealConfig()
    rng = np.random.default_rng(cfg.seed)

    order = np.lexsort(np.hstack([X, Y]).T[::-1])
    Xc, Yc = X[order], Y[order]
    perm = rng.permutation(N)
    n_hold = min(max(1, int(round(cfg.holdout_fraction * N))), N - m)
    hold, cand = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    if hypers is None:
        hypers = _initial_hypers(Xc[cand], Yc[cand], m, rng, max_iter=100)
    objective = _ReconstructionObjective(Xc, Yc, cand, hold, hypers)

    n_c = len(cand)
    in_set = np.zeros(n_c, dtype=bool)
    current = np.sort(rng.choice(n_c, size=m, replace=False))
    in_set[current] = True
    f_cur = objective(current)
    best, f_best = current.copy(), f_cur
    trace = [f_cur]
    T = f_cur if cfg.initial_temperature is None else float(cfg.initial_temperature)
    if m < n_c:
        for _ in range(cfg.n_steps):
            out_pos = rng.integers(m)
            outside = np.flatnonzero(~in_set)
            new_idx = outside[rng.integers(len(outside))]
            proposal = current.copy()
            proposal[out_pos] = new_idx
            proposal.sort()
            f_new = objective(proposal)
            u = rng.random()
            if f_new <= f_cur or (T > 0 and u < np.exp(-(f_new - f_cur) / T)):
                in_set[current[out_pos]] = False
                in_set[new_idx] = True
                current, f_cur = proposal, f_new
                if f_cur < f_best:
                    best, f_best = current.copy(), f_cur
            trace.append(f_cur)
            T *= cfg.cooling

    chosen = np.sort(order[cand[best]])
    if not full_output:
        return chosen
    return SelectionResult(chosen, f_best, trace, np.sort(order[hold]))


def reconstruction_error(inputs, targets, subset, holdout, hypers) -> float:
    """Objective used by :func:`select_support_points`, for arbitrary subsets."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.asarray(targets, dtype=float).reshape(len(X), -1)
    subset = np.asarray(subset)
    obj = _ReconstructionObjective(X, Y, subset, np.asarray(holdout), hypers)
    return obj(np.arange(len(subset)))


def group_quotas(counts, m: int) -> np.ndarray:
    """Split a budget of ``m`` rows as evenly as possible across groups of the given sizes."""
    counts = np.asarray(counts, dtype=int)
    if m > counts.sum():
        raise ValueError(f"budget {m} exceeds the {counts.sum()} available rows")
    quota = np.zeros_like(counts)
    left = m
    while left > 0:
        open_ = np.flatnonzero(quota < counts)
        share = max(1, left // len(open_))
        for g in open_:
            take = min(share, counts[g] - quota[g], left)
            quota[g] += take
            left -= take
            if left == 0:
                break
    return quota


def factorize_groups(groups):
    """Group labels in order of first appearance and each row's integer code.

    Labels only need to be hashable, so mixed types (or ``None``) are fine.
    """
    codes, labels = {}, []
    idx = np.empty(len(groups), dtype=int)
    for i, g in enumerate(groups):
        if g not in codes:
            codes[g] = len(labels)
            labels.append(g)
        idx[i] = codes[g]
    return labels, idx


def fit_group_models(X_sa, Y, groups, max_rows: int = 150, max_iter: int = 200):
    """Latent-free GPs, one per group and output column, on evenly thinned rows.

    Returns ``(labels, rows, models)`` where ``rows[g]`` are the row indices
    used for group ``labels[g]`` and ``models[g][d]`` its GP for column ``d``.
    """
    X_sa = np.asarray(X_sa, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X_sa), -1)
    labels, idx = factorize_groups(groups)
    rows = []
    for g in range(len(labels)):
        r = np.flatnonzero(idx == g)
        rows.append(r[np.unique(np.linspace(0, len(r) - 1, min(len(r), max_rows)).round().astype(int))])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        models = [[gp_fit(X_sa[r], Y[r, d], max_iter=max_iter) for d in range(Y.shape[1])] for r in rows]
    return labels, rows, models


def embed_groups(X_sa, Y, groups, latent_dim: int, max_rows: int = 150, max_iter: int = 200,
                 group_models=None) -> dict:
    """Initial latent coordinates from how badly each group's GP predicts the others.

    Fits a latent-free GP per group and output column (or reuses
    ``group_models`` from :func:`fit_group_models`), scores every group's
    rows under every other group's model (mean negative log predictive
    density), symmetrizes the excess over self-prediction into a
    dissimilarity matrix and embeds it with classical multidimensional
    scaling. Coordinates are rescaled so the widest axis has unit spread,
    matching the standard-normal latent prior.
    """
    X_sa = np.asarray(X_sa, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X_sa), -1)
    labels, rows, models = group_models or fit_group_models(X_sa, Y, groups, max_rows, max_iter)
    G = len(labels)

    C = np.zeros((G, G))
    for i in range(G):
        for j in range(G):
            for d, gp in enumerate(models[i]):
                mean, var = gp_predict_batch(gp, X_sa[rows[j]])
                var = var + gp.hyper.noise_variance
                C[i, j] += np.mean(0.5 * np.log(2 * np.pi * var) + 0.5 * (Y[rows[j], d] - mean) ** 2 / var)
    excess = C - np.diag(C)[None, :]
    D = np.maximum(0.5 * (excess + excess.T), 0.0)
    np.fill_diagonal(D, 0.0)

    J = np.eye(G) - 1.0 / G
    B = -0.5 * J @ D @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:latent_dim]
    coords = np.zeros((G, latent_dim))
    k = len(order)
    coords[:, :k] = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    # eigenvector signs are arbitrary; fix them so the output is reproducible
    for j in range(k):
        if coords[np.argmax(np.abs(coords[:, j])), j] < 0:
            coords[:, j] *= -1
    spread = coords.std(axis=0).max()
    if spread > 0:
        coords /= spread
    return {lab: coords[g] for g, lab in enumerate(labels)}


def refine_latent_positions(X, Y, groups, hypers, latent_dim: int, max_iter: int = 200,
                            fix_latent_lengthscales: bool = False):
    """Jointly optimize per-group latent coordinates and all output-GP hyperparameters.

    Maximizes the summed marginal log likelihood of every output column plus
    a standard-normal log prior on each group's coordinates. The last
    ``latent_dim`` columns of ``X`` are overwritten by the coordinates of the row's
    group. Returns ``(group_means, hypers, objective)`` where ``group_means`` maps
    each group label to its optimized coordinates.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    labels, group_idx = factorize_groups(groups)
    G, K, D = len(labels), latent_dim, Y.shape[1]
    d_in = X.shape[1]
    cols = list(range(d_in - K, d_in))
    n_h = d_in + 2
    W0 = np.zeros((G, K))
    for g in range(G):
        W0[g] = X[group_idx == g][0, d_in - K:]

    def unpack(params):
        thetas = params[: D * n_h].reshape(D, n_h)
        W = params[D * n_h:].reshape(G, K)
        return thetas, W

    def negobj(params):
        thetas, W = unpack(params)
        Xw = X.copy()
        Xw[:, d_in - K:] = W[group_idx]
        value = -0.5 * np.sum(W**2)
        g_theta = np.zeros_like(thetas)
        g_W = -W.copy()
        try:
            for d in range(D):
                mll, gt, gx = mll_input_gradient(KernelHyper.from_log(thetas[d]), Xw, Y[:, d], cols)
                value += mll
                g_theta[d] = gt
                np.add.at(g_W, group_idx, gx)
        except NumericalFailure:
            return 1e25, np.zeros_like(params)
        return -value, -np.concatenate([g_theta.ravel(), g_W.ravel()])

    x0 = np.concatenate([np.clip(np.array([h.to_log() for h in hypers]), *LOG_BOUNDS).ravel(), W0.ravel()])
    bounds = [LOG_BOUNDS] * (D * n_h) + [(None, None)] * (G * K)
    if fix_latent_lengthscales:
        # Latent lengthscales of at least 1 tie the latent scale to the standard-normal
        # prior; larger values still let an output ignore the latent inputs.
        for d in range(D):
            for j in range(d_in - K, d_in):
                bounds[d * n_h + 1 + j] = (0.0, LOG_BOUNDS[1])
                x0[d * n_h + 1 + j] = max(x0[d * n_h + 1 + j], 0.0)
    res = optimize.minimize(negobj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "gtol": 1e-6, "ftol": 1e-12})
    f0 = negobj(x0)[0]
    best = res.x if res.fun <= f0 else x0
    thetas, W = unpack(best)
    means = {lab: W[g].copy() for g, lab in enumerate(labels)}
    return means, [KernelHyper.from_log(t) for t in thetas], -min(res.fun, f0)


# ---------------------------------------------------------------------------
# transition model
# ---------------------------------------------------------------------------


class LatentTransitionModel(BaseEstimator):
    """One ARD GP per state dimension over ``[state, one-hot action, latent weights]``.

    Parameters
    ----------
    n_actions : int
        Size of the discrete action set.
    latent_dim : int
        Number of latent weight dimensions (0 pools all instances).
    support_size : int
        Maximum number of support points shared by all output GPs.
    max_candidates : int
        New-instance rows kept (random subsample) before support selection.
    anneal_steps, cooling, holdout_fraction :
        Support-selection schedule, see :class:`AnnealConfig`.
    gp_max_iter : int
        Hyperparameter optimizer iterations per output GP.
    max_infer_points : int
        Transitions used when inferring latent weights (evenly thinned).
    refine_latents : bool
        Re-optimize the stored instances' latent coordinates jointly with the
        hyperparameters whenever the support set is refit.
    n_latent_restarts : int
        Extra refinement starts from random coordinates; the best objective wins.
    unit_latent_scale : bool
        Hold the latent-input lengthscales at 1 during refinement so latent
        distances are measured on the prior's scale.
    embed_rows : int
        Rows per instance used for the pairwise-dissimilarity embedding that
        seeds the latent refinement.
    random_state : int
    """

    def __init__(self, n_actions=4, latent_dim=2, support_size=200, max_candidates=500, anneal_steps=2000,
                 cooling=0.95, holdout_fraction=0.2, gp_max_iter=200, max_infer_points=400, refine_latents=True,
                 n_latent_restarts=0, unit_latent_scale=True, embed_rows=150, random_state=0):
        self.n_actions = n_actions
        self.latent_dim = latent_dim
        self.support_size = support_size
        self.max_candidates = max_candidates
        self.anneal_steps = anneal_steps
        self.cooling = cooling
        self.holdout_fraction = holdout_fraction
        self.gp_max_iter = gp_max_iter
        self.max_infer_points = max_infer_points
        self.refine_latents = refine_latents
        self.n_latent_restarts = n_latent_restarts
        self.unit_latent_scale = unit_latent_scale
        self.embed_rows = embed_rows
        self.random_state = random_state

    # -- fitting ----------------------------------------------------------

    def fit(self, X, Y, groups=None, init_hypers=None, fit_round: int = 0):
        """Select support points from augmented rows ``X`` and fit one GP per column of ``Y``.

        ``groups`` labels each row with its task instance. When given (and
        ``refine_latents`` is on), the latent columns of the support rows are
        re-optimized jointly with the hyperparameters, one coordinate vector per
        group; the results land in ``group_means_``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
        if len(X) == 0:
            raise ValueError("cannot fit a transition model on zero transitions")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("transition data must be finite")
        self.state_dim_ = Y.shape[1]
        if X.shape[1] != self.state_dim_ + self.n_actions + self.latent_dim:
            raise ValueError(f"augmented inputs have {X.shape[1]} columns, expected "
                             f"{self.state_dim_ + self.n_actions + self.latent_dim}")
        m = min(self.support_size, len(X))
        seed = [int(self.random_state), int(fit_round)]
        cfg = AnnealConfig(self.anneal_steps, self.cooling, self.holdout_fraction, seed=seed)
        if init_hypers is None:
            init_hypers = _initial_hypers(X, Y, m, np.random.default_rng(seed), max_iter=self.gp_max_iter)
        self.group_means_ = {}
        self.support_groups_ = None
        if groups is None:
            support = select_support_points(X, Y, m, cfg, hypers=init_hypers)
        else:
            groups = np.asarray(groups)
            X_sa = X[:, :X.shape[1] - self.latent_dim]
            group_models = fit_group_models(X_sa, Y, groups, self.embed_rows, self.gp_max_iter)
            support = self._select_balanced(X, Y, groups, m, cfg, group_models[2])
            self.support_groups_ = groups[support]
        Xs, Ys = X[support], Y[support]
        if (self.refine_latents and self.latent_dim > 0 and self.support_groups_ is not None
                and len(factorize_groups(self.support_groups_)[0]) > 1):
            embedded = embed_groups(X_sa, Y, groups, self.latent_dim, group_models=group_models)
            Xs, hypers = self._refine(Xs, Ys, init_hypers, embedded, np.random.default_rng(seed))
            self._set_support(Xs, Ys, hypers, optimize_hypers=False)
        else:
            self._set_support(Xs, Ys, init_hypers, optimize_hypers=True)
        if not hasattr(self, "latent_table_"):
            self.latent_table_ = {}
        return self

    def _select_balanced(self, X, Y, groups, m, cfg, group_models):
        # Each instance is its own batch: an equal share of the support, chosen
        # with that instance's own latent-free hyperparameters (its latent
        # columns are constant, so their lengthscales do not matter).
        labels, idx = factorize_groups(groups)
        counts = np.bincount(idx, minlength=len(labels))
        quota = group_quotas(counts, m)
        pad = np.ones(self.latent_dim)
        chosen = []
        for g in range(len(labels)):
            rows = np.flatnonzero(idx == g)
            hypers = [KernelHyper(gp.hyper.signal_variance, np.concatenate([gp.hyper.lengthscales, pad]),
                                  gp.hyper.noise_variance) for gp in group_models[g]]
            sub_cfg = replace(cfg, seed=[*np.atleast_1d(cfg.seed).tolist(), g])
            chosen.append(rows[select_support_points(X[rows], Y[rows], int(quota[g]), sub_cfg, hypers=hypers)])
        return np.sort(np.concatenate(chosen))

    def _refine(self, Xs, Ys, init_hypers, embedded, rng):
        # Starts: the dissimilarity embedding, the stored coordinates with warm
        # hypers (when they differ across groups), then random coordinates.
        # The best joint objective wins.
        fresh = [KernelHyper.initial(Xs, Ys[:, d]) for d in range(Ys.shape[1])]
        groups = self.support_groups_
        labels, codes = factorize_groups(groups)

        def placed(coords):
            X0 = Xs.copy()
            X0[:, -self.latent_dim:] = np.array([coords[g] for g in labels])[codes]
            return X0

        starts = [(placed(embedded), fresh)]
        stored = Xs[:, -self.latent_dim:]
        if np.ptp(stored, axis=0).max() > 0:
            starts.append((Xs, init_hypers))
        starts += [(placed({g: rng.normal(size=self.latent_dim) for g in labels}), fresh)
                   for _ in range(self.n_latent_restarts)]
        best = None
        for X0, h0 in starts:
            means, hypers, value = refine_latent_positions(X0, Ys, groups, h0, self.latent_dim,
                                                           max_iter=self.gp_max_iter,
                                                           fix_latent_lengthscales=self.unit_latent_scale)
            if best is None or value > best[2]:
                best = (means, hypers, value)
        means, hypers, _ = best
        self.group_means_ = means
        return placed(means), hypers

    def _set_support(self, Xs, Ys, hypers, optimize_hypers):
        gps = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            for d in range(Ys.shape[1]):
                if optimize_hypers:
                    gps.append(gp_fit(Xs, Ys[:, d], init=hypers[d], max_iter=self.gp_max_iter))
                else:
                    gps.append(GPModel.build(hypers[d], Xs, Ys[:, d]))
        self.gps_ = gps
        self.support_inputs_ = gps[0].inputs
        self.support_targets_ = np.column_stack([g.targets for g in gps])
        self.state_dim_ = Ys.shape[1]

    @property
    def is_fitted(self) -> bool:
        return getattr(self, "gps_", None) is not None

    def _check_fitted(self):
        if not self.is_fitted:
            raise IllegalStateError("transition model has not been fitted")

    @property
    def hypers(self) -> list:
        self._check_fitted()
        return [g.hyper for g in self.gps_]

    @property
    def noise_variances(self) -> np.ndarray:
        return np.array([g.hyper.noise_variance for g in self.gps_])

    # -- prediction -------------------------------------------------------

    def predict(self, X):
        """Per-dimension delta means and predictive variances (noise included)."""
        self._check_fitted()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        means, variances = [], []
        for g in self.gps_:
            mu, var = gp_predict_batch(g, X)
            means.append(mu)
            variances.append(var + g.hyper.noise_variance)
        return np.column_stack(means), np.column_stack(variances)

    def predict_next(self, states, actions, weights):
        """Batched :func:`predict_transition`: next-state means and variances."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        mu, var = self.predict(augment_batch(states, actions, self._weights_vec(weights), self.n_actions))
        return states + mu, var

    def _weights_vec(self, weights):
        w = weights.mean if isinstance(weights, LatentWeights) else np.asarray(weights, dtype=float)
        if w.shape[-1] != self.latent_dim:
            raise ValueError(f"latent weights have dimension {w.shape[-1]}, model expects {self.latent_dim}")
        return w

    def one_step_rmse(self, transitions, weights) -> float:
        states, actions, next_states = as_arrays(transitions)
        if len(states) == 0:
            return float("nan")
        pred, _ = self.predict_next(states, actions, weights)
        return float(np.sqrt(np.mean((pred - next_states) ** 2)))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "params": self.get_params(),
            "state_dim": self.state_dim_,
            "hypers": [h.to_dict() for h in self.hypers],
            "support_inputs": self.support_inputs_.tolist(),
            "support_targets": self.support_targets_.tolist(),
            "support_groups": None if self.support_groups_ is None else [_plain(g) for g in self.support_groups_],
            "latent_table": [w.to_dict() for w in self.latent_table_.values()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LatentTransitionModel:
        model = cls(**d["params"])
        Xs = np.asarray(d["support_inputs"], dtype=float)
        Ys = np.asarray(d["support_targets"], dtype=float).reshape(len(Xs), -1)
        model._set_support(Xs, Ys, [KernelHyper.from_dict(h) for h in d["hypers"]], optimize_hypers=False)
        groups = d.get("support_groups")
        model.support_groups_ = None if groups is None else np.array(groups, dtype=object)
        model.group_means_ = {}
        model.latent_table_ = {}
        for entry in d["latent_table"]:
            w = LatentWeights.from_dict(entry)
            model.latent_table_[w.instance_id] = w
        return model

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> LatentTransitionModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict_transition(model: LatentTransitionModel, state, action, weights):
    """Mean next state and per-dimension predictive variance for one transition."""
    mean, var = model.predict_next(np.atleast_1d(np.asarray(state, dtype=float))[None, :], [action], weights)
    return mean[0], var[0]


# ---------------------------------------------------------------------------
# latent weight inference
# ---------------------------------------------------------------------------


class _WeightObjective:
    """Predictive log likelihood of observed deltas plus log prior, as a function of w.

    The SE kernel factorizes over input dimensions, so the state-action part
    of the cross-covariance is computed once and only the latent factor
    changes with w.
    """

    def __init__(self, model: LatentTransitionModel, X_sa, Y, prior: LatentWeights):
        d_sa = X_sa.shape[1]
        self.prior_mean = prior.mean
        self.prior_prec = np.linalg.inv(prior.covariance)
        self.W_sup = model.support_inputs_[:, d_sa:]
        self.blocks = []
        for d, g in enumerate(model.gps_):
            h = g.hyper
            ls_sa, ls_w = h.lengthscales[:d_sa], h.lengthscales[d_sa:]
            K_sa = h.signal_variance * np.exp(
                -0.5 * cdist(X_sa / ls_sa, model.support_inputs_[:, :d_sa] / ls_sa, "sqeuclidean"))
            K_inv = linalg.cho_solve((g.chol, True), np.eye(len(g.alpha)), check_finite=False)
            self.blocks.append((K_sa, ls_w, g.alpha, K_inv, h.signal_variance, h.noise_variance, Y[:, d]))

    def __call__(self, w):
        diff0 = w - self.prior_mean
        value = -0.5 * diff0 @ self.prior_prec @ diff0
        grad = -self.prior_prec @ diff0
        for K_sa, ls_w, alpha, K_inv, sf2, sn2, y in self.blocks:
            G = -(w - self.W_sup) / ls_w**2                       # (m, K): d log k_w / d w
            k_w = np.exp(-0.5 * np.sum(((w - self.W_sup) / ls_w) ** 2, axis=1))
            Kx = K_sa * k_w
            mean = Kx @ alpha
            B = Kx @ K_inv
            BK = B * Kx
            var_f = sf2 - BK.sum(axis=1)
            clipped = var_f < 0
            v = np.where(clipped, 0.0, var_f) + sn2
            r = y - mean
            value += float(np.sum(-0.5 * np.log(2 * np.pi * v) - 0.5 * r**2 / v))
            dmean = Kx @ (G * alpha[:, None])                        # (n, K)
            dvar = -2.0 * (BK @ G)
            dvar[clipped] = 0.0
            grad += (r / v) @ dmean + (0.5 * (r**2 / v - 1.0) / v) @ dvar
        return value, grad


def infer_latent_weights(model: LatentTransitionModel, transitions, prior: LatentWeights,
                         init=None, n_starts: int = 3, full_output=False):
    """MAP latent weights for one instance's transitions, with a Laplace covariance.

    ``prior`` is the Gaussian prior on the weights; with no transitions it is
    returned unchanged. Optimization starts from ``init`` (if given), the prior
    mean and each latent-table entry, keeping the ``n_starts`` best starting
    points. With ``full_output=True`` returns ``(weights, info)`` where
    ``info["trace"]`` holds the objective at each accepted iterate of the
    winning run.
    """
    model._check_fitted()
    states, actions, next_states = as_arrays(transitions)
    if len(states) == 0 or model.latent_dim == 0:
        out = LatentWeights(prior.mean, prior.covariance, prior.instance_id)
        return (out, {"trace": [], "objective": None}) if full_output else out
    if len(states) > model.max_infer_points:
        keep = np.unique(np.linspace(0, len(states) - 1, model.max_infer_points).round().astype(int))
        states, actions, next_states = states[keep], actions[keep], next_states[keep]
    X_sa = np.hstack([states, encode_actions(actions, model.n_actions)])
    objective = _WeightObjective(model, X_sa, next_states - states, prior)

    starts = [prior.mean]
    if init is not None:
        starts.insert(0, init.mean if isinstance(init, LatentWeights) else np.asarray(init, float))
    starts += [w.mean for w in model.latent_table_.values()]
    scored = []
    for s in starts:
        f, _ = objective(s)
        if not np.isfinite(f):
            raise NumericalFailure("latent-weight objective is not finite")
        scored.append((-f, len(scored), s))
    scored.sort(key=lambda t: (t[0], t[1]))

    best = None
    for _, _, w0 in scored[:n_starts]:
        trace = []

        def neg(w):
            f, g = objective(w)
            return -f, -g

        def record(intermediate_result):
            trace.append(-float(intermediate_result.fun))

        res = optimize.minimize(neg, w0, jac=True, method="L-BFGS-B", callback=record,
                                options={"maxiter": 200, "gtol": 1e-6})
        if not np.isfinite(res.fun):
            raise NumericalFailure("latent-weight objective became non-finite during optimization")
        trace.insert(0, -neg(w0)[0])
        if best is None or res.fun < best[0].fun:
            best = (res, trace)
    res, trace = best
    if not res.success:
        warnings.warn(f"latent weight inference did not converge: {res.message}", ConvergenceWarning, stacklevel=2)

    cov = _laplace_covariance(objective, res.x, prior)
    out = LatentWeights(res.x, cov, prior.instance_id, converged=bool(res.success))
    return (out, {"trace": trace, "objective": -float(res.fun)}) if full_output else out


def _laplace_covariance(objective, w, prior: LatentWeights, h=1e-4) -> np.ndarray:
    k = len(w)
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (objective(w + e)[1] - objective(w - e)[1]) / (2 * h)
    H = -0.5 * (H + H.T)
    prior_var = np.diag(prior.covariance)
    try:
        np.linalg.cholesky(H)
        var = np.diag(np.linalg.inv(H))
    except np.linalg.LinAlgError:
        var = 1.0 / np.maximum(np.diag(H), 1.0 / prior_var)
    return np.diag(np.clip(var, 1e-10, prior_var))


# ---------------------------------------------------------------------------
# global model maintenance
# ---------------------------------------------------------------------------


def update_global_model(model: LatentTransitionModel, instance_id, transitions,
                        weights: LatentWeights) -> LatentTransitionModel:
    """Merge a finished instance into the shared model and return the new model.

    The instance's transitions, augmented with its final weights, join the
    current support set as candidates; support points are reselected and
    every output GP is refit. The input model is left untouched.
    """
    states, actions, next_states = as_arrays(transitions)
    if len(states) == 0:
        raise ValueError("cannot merge an instance without transitions")
    fit_round = len(getattr(model, "latent_table_", {}))
    rng = np.random.default_rng([int(model.random_state), fit_round, 7])
    X_new = augment_batch(states, actions, weights, model.n_actions)
    Y_new = next_states - states
    if len(X_new) > model.max_candidates:
        keep = np.sort(rng.choice(len(X_new), size=model.max_candidates, replace=False))
        X_new, Y_new = X_new[keep], Y_new[keep]

    new = clone(model)
    table = dict(getattr(model, "latent_table_", {}))
    groups_new = np.full(len(X_new), instance_id, dtype=object)
    if model.is_fitted:
        X = np.vstack([model.support_inputs_, X_new])
        Y = np.vstack([model.support_targets_, Y_new])
        old_groups = model.support_groups_
        if old_groups is None:
            old_groups = np.full(len(model.support_inputs_), None, dtype=object)
        groups = np.concatenate([old_groups.astype(object), groups_new])
        init = model.hypers
    else:
        X, Y, groups, init = X_new, Y_new, groups_new, None
    new.fit(X, Y, groups=groups, init_hypers=init, fit_round=fit_round)
    table[instance_id] = LatentWeights(weights.mean, weights.covariance, instance_id)
    for g, w in new.group_means_.items():
        if g in table:
            table[g] = LatentWeights(w, table[g].covariance, g)
    new.latent_table_ = table
    return new


def uncertainty_probe(model: LatentTransitionModel, state, action, class_weights) -> np.ndarray:
    """Mean (over state dimensions) predictive variance at ``state, action`` for each weight vector."""
    class_weights = list(class_weights)
    if not class_weights:
        raise ValueError("uncertainty_probe needs at least one latent weight vector")
    out = []
    for w in class_weights:
        _, var = predict_transition(model, state, action, w)
        out.append(float(np.mean(var)))
    return np.array(out)
