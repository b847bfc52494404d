"""Trajectory likelihood, intent posterior and trajectory sampling."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .mdp_solver import (
    GridMDP,
    QTable,
    nearest_action,
    policy_distribution,
    policy_log_probs,
    solve_q,
)
from .reward_model import Goal, GoalSet, ModelParams
from .semantic_map import SemanticGrid

POSTERIOR_OFFSET = 10.0
DEFAULT_N_SAMPLES = 100


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled 2-D track: times ``t`` (n,) and positions ``xy`` (n, 2)."""

    t: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(-1)
        xy = np.array(self.xy, dtype=float).reshape(-1, 2)
        if t.shape[0] != xy.shape[0]:
            raise ValueError("t and xy lengths differ")
        if t.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 samples")
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.max(np.abs(dt - dt[0])) > 1e-6 * max(1.0, dt[0]):
            raise ValueError("samples must be uniformly spaced in time")
        if not np.all(np.isfinite(xy)):
            raise ValueError("non-finite coordinates")
        t.setflags(write=False)
        xy.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xy", xy)

    def __len__(self):
        return self.t.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self) - 1

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def headings(self) -> np.ndarray:
        """Per-step heading atan2(dy, dx); a zero-length step keeps the previous heading."""
        d = np.diff(self.xy, axis=0)
        h = np.arctan2(d[:, 1], d[:, 0])
        still = np.hypot(d[:, 0], d[:, 1]) < 1e-12
        for k in np.flatnonzero(still):
            h[k] = h[k - 1] if k > 0 else 0.0
        return h

    @property
    def speeds(self) -> np.ndarray:
        d = np.diff(self.xy, axis=0)
        return np.hypot(d[:, 0], d[:, 1]) / np.diff(self.t)

    def until(self, t_end: float) -> "Trajectory":
        """Prefix with timestamps <= t_end (absolute time)."""
        return Trajectory(self.t[self.t <= t_end + 1e-9], self.xy[self.t <= t_end + 1e-9])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.xy, other.xy)

    __hash__ = None


@dataclass(frozen=True)
class IntentPosterior(Mapping):
    goal_ids: tuple[str, ...]
    probs: np.ndarray = field(repr=False)

    def __getitem__(self, gid):
        return float(self.probs[self.goal_ids.index(gid)])

    def __iter__(self):
        return iter(self.goal_ids)

    def __len__(self):
        return len(self.goal_ids)

    def __repr__(self):
        inner = ", ".join(f"{g}: {p:.4f}" for g, p in zip(self.goal_ids, self.probs))
        return f"IntentPosterior({inner})"


def step_data(traj: Trajectory, grid: SemanticGrid, n_actions: int):
    """Per-step (cell, snapped action, previous heading) arrays; first step has NaN."""
    h = traj.headings
    cells = grid.flat_index(traj.xy[:-1])
    actions = nearest_action(h, n_actions)
    prev = np.concatenate([[np.nan], h[:-1]])
    return cells, np.asarray(actions), prev


def step_log_probs(traj: Trajectory, qtable: QTable, params: ModelParams, grid: SemanticGrid) -> np.ndarray:
    """log Q_a(x_k, phi_k) for every step of ``traj``."""
    cells, actions, prev = step_data(traj, grid, qtable.n_actions)
    lp = policy_log_probs(qtable.q[cells], qtable.headings, prev, params)
    return lp[np.arange(len(cells)), actions]


def trajectory_log_likelihood(traj: Trajectory, qtables: Mapping[str, QTable], params: ModelParams,
                              lam: str, grid: SemanticGrid) -> float:
    """Sum of per-step log action probabilities under goal ``lam``."""
    if len(traj) < 2:
        raise ValueError("trajectory must have at least 2 samples")
    return float(step_log_probs(traj, qtables[lam], params, grid).sum())


def posterior_from_loglik(loglik, n_steps: int) -> np.ndarray:
    """Tempered softmax over goals: softmax(loglik / (sqrt(n_steps) + 10))."""
    return softmax(np.asarray(loglik, dtype=float) / (math.sqrt(n_steps) + POSTERIOR_OFFSET))


def intent_posterior(traj: Trajectory, qtables: Mapping[str, QTable], params: ModelParams,
                     goals: Sequence[Goal], grid: SemanticGrid) -> IntentPosterior:
    if len(goals) == 0:
        raise ValueError("goal set must be non-empty")
    ll = [trajectory_log_likelihood(traj, qtables, params, g.id, grid) for g in goals]
    return IntentPosterior(tuple(g.id for g in goals), posterior_from_loglik(ll, traj.n_steps))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one index from a probability vector."""
    c = np.cumsum(probs)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(probs) - 1)


def sample_rng(root_seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a run seeded with ``root_seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), int(index)]))


def policy_cdf(qtable: QTable, params: ModelParams) -> np.ndarray:
    """Cumulative action probabilities for every (cell, previous action), shape (n_cells, N_a, N_a).

    After the first step of a rollout the previous heading is always one of
    the discrete actions, so the whole policy can be tabulated once per goal.
    """
    n_cells, n_a = qtable.q.shape
    rows = np.repeat(qtable.q, n_a, axis=0)
    prev = np.tile(qtable.headings, n_cells)
    lp = policy_log_probs(rows, qtable.headings, prev, params)
    return np.cumsum(np.exp(lp), axis=1).reshape(n_cells, n_a, n_a)


def _draw(cdf_row: np.ndarray, rng: np.random.Generator) -> int:
    return min(int(np.searchsorted(cdf_row, rng.random() * cdf_row[-1], side="right")), len(cdf_row) - 1)


def sample_rollout(start, prev_heading: float | None, goal: Goal, qtables: Mapping[str, QTable],
                   params: ModelParams, horizon: float, rng_seed, grid: SemanticGrid, *,
                   t0: float = 0.0, speed: float | None = None, cdf: np.ndarray | None = None) -> Trajectory:
    """Sample a trajectory from the Boltzmann policy toward ``goal``.

    Runs for ``horizon`` seconds or until a step lands inside the goal disk,
    whichever is first; at least one step is always taken.  ``cdf`` is the
    goal's :func:`policy_cdf`, computed here when not supplied.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    qt = qtables[goal.id]
    if cdf is None:
        cdf = policy_cdf(qt, params)
    v = params.speed if speed is None else speed
    dt = params.delta_t
    n_steps = max(1, int(math.floor(horizon / dt + 1e-9)))
    moves = v * dt * np.column_stack([np.cos(qt.headings), np.sin(qt.headings)])
    xmin, ymin, xmax, ymax = grid.bounds
    ox, oy = grid.origin
    cs, w, h = grid.cell_size, grid.width, grid.height
    x, y = (float(c) for c in np.asarray(start, dtype=float))
    pts = [(x, y)]
    for k in range(n_steps):
        ix = min(max(math.floor((x - ox) / cs), 0), w - 1)
        iy = min(max(math.floor((y - oy) / cs), 0), h - 1)
        cell = iy * w + ix
        if k == 0:
            a = _draw(np.cumsum(policy_distribution(qt, cell, prev_heading, params)), rng)
        else:
            a = _draw(cdf[cell, a], rng)
        x = min(max(x + moves[a, 0], xmin), xmax)
        y = min(max(y + moves[a, 1], ymin), ymax)
        pts.append((x, y))
        if math.hypot(x - goal.x, y - goal.y) <= goal.d:
            break
    t = t0 + dt * np.arange(len(pts))
    return Trajectory(t, np.array(pts))


@dataclass
class Prediction:
    samples: list[Trajectory]
    posterior: IntentPosterior
    sampled_goals: list[str]


def predict_distribution(partial: Trajectory, qtables: Mapping[str, QTable], params: ModelParams,
                         goals: Sequence[Goal], horizon: float, n: int, rng_seed: int,
                         grid: SemanticGrid, cdfs: Mapping[str, np.ndarray] | None = None) -> Prediction:
    """Mixture prediction: goal ~ posterior, then a policy rollout from the last observed state.

    Sample ``i`` draws from the generator :func:`sample_rng` (rng_seed, i).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    post = intent_posterior(partial, qtables, params, goals, grid)
    start = partial.xy[-1]
    prev = float(partial.headings[-1])
    cdfs = dict(cdfs or {})
    samples, drawn = [], []
    for i in range(n):
        rng = sample_rng(rng_seed, i)
        g = goals[sample_index(post.probs, rng)]
        drawn.append(g.id)
        if g.id not in cdfs:
            cdfs[g.id] = policy_cdf(qtables[g.id], params)
        samples.append(sample_rollout(start, prev, g, qtables, params, horizon, rng, grid,
                                      t0=float(partial.t[-1]), cdf=cdfs[g.id]))
    return Prediction(samples, post, drawn)


@dataclass
class IRLPredictor:
    """A learned parameter set bound to one intersection's map and goals."""

    grid: SemanticGrid
    goals: GoalSet
    params: ModelParams
    mdp: GridMDP
    qtables: dict[str, QTable]
    _cdfs: dict = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def build(cls, grid: SemanticGrid, goals: Sequence[Goal], params: ModelParams,
              mdp: GridMDP | None = None, **solve_kw) -> "IRLPredictor":
        goals = GoalSet(goals)
        if mdp is None:
            mdp = GridMDP.for_params(grid, params)
        qtables = {g.id: solve_q(grid, params, g, mdp=mdp, **solve_kw) for g in goals}
        return cls(grid, goals, params, mdp, qtables)

    def log_likelihood(self, traj: Trajectory, goal_id: str) -> float:
        return trajectory_log_likelihood(traj, self.qtables, self.params, goal_id, self.grid)

    def posterior(self, traj: Trajectory) -> IntentPosterior:
        return intent_posterior(traj, self.qtables, self.params, self.goals, self.grid)

    def policy_cdf(self, goal_id: str) -> np.ndarray:
        if goal_id not in self._cdfs:
            self._cdfs[goal_id] = policy_cdf(self.qtables[goal_id], self.params)
        return self._cdfs[goal_id]

    def rollout(self, start, prev_heading, goal_id: str, horizon: float, rng_seed, **kw) -> Trajectory:
        kw.setdefault("cdf", self.policy_cdf(goal_id))
        return sample_rollout(start, prev_heading, self.goals.by_id(goal_id), self.qtables, self.params,
                              horizon, rng_seed, self.grid, **kw)

    def predict(self, partial: Trajectory, horizon: float, n: int = DEFAULT_N_SAMPLES, rng_seed: int = 0) -> Prediction:
        cdfs = {g.id: self.policy_cdf(g.id) for g in self.goals}
        return predict_distribution(partial, self.qtables, self.params, self.goals, horizon, n, rng_seed,
                                    self.grid, cdfs)
