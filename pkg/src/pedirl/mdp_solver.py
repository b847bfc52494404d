"""Tabular MDP over the map raster and its value-iteration solver.

States are grid cells, actions are ``n_actions`` uniformly spaced headings.
A step moves a pedestrian ``speed * delta_t`` meters along the heading from
the cell center; the successor state is the cell containing the landing
point (clamped to the map).  Reward is collected on arrival, at the center
of the successor cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.special import logsumexp

from .reward_model import Goal, ModelParams, goal_reward, turn_penalty, wrap_angle
from .semantic_map import DEFAULT_R1, DEFAULT_R2, DEFAULT_SAMPLES, SemanticGrid, feature_vectors

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 10_000


class ConvergenceError(RuntimeError):
    """Value iteration hit its sweep cap above the residual tolerance."""

    def __init__(self, msg, qtable=None):
        super().__init__(msg)
        self.qtable = qtable


def action_headings(n_actions: int) -> np.ndarray:
    """Headings 2*pi*j/n_actions, wrapped to (-pi, pi]."""
    if n_actions < 2:
        raise ValueError("need at least 2 actions")
    return wrap_angle(2.0 * np.pi * np.arange(n_actions) / n_actions)


def nearest_action(phi, n_actions: int):
    """Index of the discrete heading closest to ``phi``."""
    j = np.rint(np.mod(np.asarray(phi, dtype=float), 2 * np.pi) / (2 * np.pi / n_actions)).astype(np.int64)
    j = j % n_actions
    return j if j.ndim else int(j)


def step_dynamics(p, phi: float, v: float, delta_t: float, grid: SemanticGrid) -> np.ndarray:
    """Constant-speed step along ``phi``, clamped to the map bounds."""
    p = np.asarray(p, dtype=float)
    q = p + v * delta_t * np.array([np.cos(phi), np.sin(phi)])
    xmin, ymin, xmax, ymax = grid.bounds
    return np.clip(q, [xmin, ymin], [xmax, ymax])


@dataclass(frozen=True, eq=False)
class GridMDP:
    """Transition table and per-cell features for one map and discretization."""

    grid: SemanticGrid
    n_actions: int
    speed: float
    delta_t: float
    headings: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    next_state: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "next_state_t", np.ascontiguousarray(self.next_state.T))
        object.__setattr__(self, "successors", np.unique(self.next_state))

    @classmethod
    def build(cls, grid: SemanticGrid, n_actions: int = 16, speed: float = 1.4, delta_t: float = 0.5,
              r1: float = DEFAULT_R1, r2: float = DEFAULT_R2, n_samples: int = DEFAULT_SAMPLES) -> "GridMDP":
        if not (speed > 0 and delta_t > 0):
            raise ValueError("speed and delta_t must be positive")
        headings = action_headings(n_actions)
        centers = grid.cell_centers()
        step = speed * delta_t * np.column_stack([np.cos(headings), np.sin(headings)])
        xmin, ymin, xmax, ymax = grid.bounds
        land = np.clip(centers[:, None, :] + step[None, :, :], [xmin, ymin], [xmax, ymax])
        next_state = grid.flat_index(land)
        features = feature_vectors(grid, centers, r1, r2, n_samples)
        return cls(grid, n_actions, float(speed), float(delta_t), headings, centers, next_state, features)

    @classmethod
    def for_params(cls, grid: SemanticGrid, params: ModelParams, speed: float | None = None, **kw) -> "GridMDP":
        return cls.build(grid, params.n_actions, params.speed if speed is None else speed, params.delta_t, **kw)

    @property
    def n_states(self) -> int:
        return self.centers.shape[0]

    def state_rewards(self, params: ModelParams, goal: Goal) -> np.ndarray:
        """Reward of every cell, evaluated at its center."""
        return self.features @ params.w + goal_reward(goal, self.centers)

    def state_of(self, p) -> np.ndarray:
        return self.grid.flat_index(p)


@dataclass(frozen=True, eq=False)
class QTable:
    goal_id: str
    q: np.ndarray = field(repr=False)
    headings: np.ndarray = field(repr=False)
    residual: float = 0.0
    sweeps: int = 0
    converged: bool = True
    residual_history: np.ndarray = field(default=None, repr=False)

    @property
    def v(self) -> np.ndarray:
        return self.q.max(axis=1)

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]


def bellman_residual(q: np.ndarray, mdp: GridMDP, rewards: np.ndarray, gamma: float) -> float:
    """Sup-norm |Q - (R(s') + gamma * max Q(s', .))| over all state-action pairs."""
    v = q.max(axis=1)
    target = rewards[mdp.next_state] + gamma * v[mdp.next_state]
    return float(np.max(np.abs(q - target)))


def solve_q(grid: SemanticGrid, params: ModelParams, goal: Goal, speed: float | None = None, *,
            mdp: GridMDP | None = None, tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
            q_init: np.ndarray | None = None, strict: bool = True, polish: bool = False) -> QTable:
    """Optimal Q-function for one goal by synchronous value iteration.

    Stops once the sup-norm change between sweeps is at most ``tol``.  With
    ``strict`` a :class:`ConvergenceError` is raised if ``max_sweeps`` is hit
    first; otherwise the unconverged table is returned with
    ``converged=False``.

    ``polish`` finishes a converged solve with policy iteration (exact
    linear solves for the greedy policy), which lands on the fixed point to
    rounding error.  Learning uses it so finite differences in the weights
    are not swamped by the iteration tolerance.
    """
    if mdp is None:
        mdp = GridMDP.for_params(grid, params, speed)
    elif mdp.grid is not grid and mdp.grid != grid:
        raise ValueError("mdp was built for a different grid")
    gamma = params.gamma
    rewards = mdp.state_rewards(params, goal)
    nxt = mdp.next_state
    nxt_t = mdp.next_state_t
    succ = mdp.successors
    if q_init is None:
        q0 = np.zeros(nxt.shape)
    else:
        q0 = np.asarray(q_init, dtype=float)
        if q0.shape != nxt.shape:
            raise ValueError("q_init has the wrong shape")
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    # Synchronous updates on Q only need V: Q_k = (R + gamma * V_{k-1})[next] and
    # |Q_k - Q_{k-1}| = gamma * |V_{k-1} - V_{k-2}| on successor states.
    v_pp = q0.max(axis=1)
    q1 = (rewards + gamma * v_pp)[nxt]
    residual = float(np.max(np.abs(q1 - q0)))
    v_p = q1.max(axis=1)
    history = [residual]
    sweeps = 1
    while residual > tol and sweeps < max_sweeps:
        sweeps += 1
        residual = gamma * float(np.max(np.abs(v_p[succ] - v_pp[succ])))
        history.append(residual)
        v_pp, v_p = v_p, (rewards + gamma * v_p)[nxt_t].max(axis=0)
    q = q1 if sweeps == 1 else (rewards + gamma * v_pp)[nxt]
    converged = residual <= tol
    if polish and converged:
        q, residual = _policy_iteration(q, mdp, rewards, gamma, residual)
    q.setflags(write=False)
    table = QTable(goal.id, q, mdp.headings, residual, sweeps, converged, np.asarray(history))
    if not converged:
        msg = f"value iteration for goal {goal.id!r} did not converge: residual {residual:.3g} after {sweeps} sweeps"
        if strict:
            raise ConvergenceError(msg, table)
        log.warning(msg)
    return table


def _policy_iteration(q: np.ndarray, mdp: GridMDP, rewards: np.ndarray, gamma: float, residual: float,
                      max_iter: int = 50):
    """Refine ``q`` by policy iteration; returns the best (q, residual) seen."""
    n = q.shape[0]
    rows = np.arange(n)
    best_q, best_res = q, residual
    policy = np.argmax(q, axis=1)
    for _ in range(max_iter):
        succ = mdp.next_state[rows, policy]
        mat = sparse.identity(n, format="csr") - gamma * sparse.csr_matrix(
            (np.ones(n), (rows, succ)), shape=(n, n))
        v = spsolve(mat.tocsc(), rewards[succ])
        q_new = (rewards + gamma * v)[mdp.next_state]
        res = bellman_residual(q_new, mdp, rewards, gamma)
        if res < best_res:
            best_q, best_res = q_new, res
        greedy = np.argmax(q_new, axis=1)
        # keep the current action unless another is strictly better
        improve = q_new[rows, greedy] > q_new[rows, policy] + 1e-12 * (1.0 + np.abs(q_new[rows, policy]))
        if not improve.any():
            break
        policy = np.where(improve, greedy, policy)
    return best_q, best_res


def resolve_from(q_init: np.ndarray, params: ModelParams, goal: Goal, mdp: GridMDP, *,
                 tol: float = DEFAULT_TOL) -> QTable:
    """Re-solve after a reward change, starting policy iteration from the greedy policy of ``q_init``.

    Used when a nearby solution is at hand (e.g. finite-difference probes);
    falls back to value iteration plus polishing if policy iteration does
    not reach the residual tolerance.
    """
    rewards = mdp.state_rewards(params, goal)
    q, res = _policy_iteration(np.asarray(q_init, dtype=float), mdp, rewards, params.gamma, np.inf)
    if res > tol:
        return solve_q(mdp.grid, params, goal, mdp=mdp, q_init=q_init, polish=True, tol=tol)
    q.setflags(write=False)
    return QTable(goal.id, q, mdp.headings, res, 0, True, np.asarray([res]))


def surrogate_q(qtable: QTable, cell: int, action: int, prev_heading: float | None, params: ModelParams) -> float:
    """Q(cell, action) plus the turn penalty relative to ``prev_heading``."""
    val = float(qtable.q[cell, action])
    if prev_heading is None:
        return val
    return val + turn_penalty(params, qtable.headings[action] - prev_heading)


def surrogate_rows(q_rows: np.ndarray, headings: np.ndarray, prev_headings, params: ModelParams) -> np.ndarray:
    """Batched surrogate Q; ``prev_headings`` entries that are NaN mean "no previous heading"."""
    prev = np.asarray(prev_headings, dtype=float).reshape(-1, 1)
    pen = turn_penalty(params, headings[None, :] - np.nan_to_num(prev))
    pen = np.where(np.isnan(prev), 0.0, pen)
    return q_rows + pen


def policy_log_probs(q_rows: np.ndarray, headings: np.ndarray, prev_headings, params: ModelParams) -> np.ndarray:
    """Log of the Boltzmann policy exp(eta*Qs) / sum exp(eta*Qs), row-wise."""
    z = params.eta * surrogate_rows(np.atleast_2d(q_rows), headings, prev_headings, params)
    return z - logsumexp(z, axis=1, keepdims=True)


def policy_distribution(qtable: QTable, cell: int, prev_heading: float | None, params: ModelParams) -> np.ndarray:
    prev = np.nan if prev_heading is None else prev_heading
    lp = policy_log_probs(qtable.q[cell][None, :], qtable.headings, [prev], params)[0]
    return np.exp(lp)
