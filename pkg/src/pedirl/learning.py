"""EM fitting of the transferable reward parameters.

E-step: tempered intent posterior of every training trajectory.  M-step:
spectral projected gradient ascent on the posterior-weighted log-likelihood with
central finite-difference gradients.  Q-tables are cached by the weight
vector, so probes that only move C_phi, beta, alpha or eta reuse solves.
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .inference import POSTERIOR_OFFSET, IntentPosterior, step_data
from .mdp_solver import ConvergenceError, GridMDP, QTable, resolve_from, solve_q
from .reward_model import (
    FREE_NAMES,
    INEQ_TOL,
    ModelParams,
    check_constraints,
    default_params,
    project_to_constraints,
    turn_penalty,
)
from .synthetic import TrainingSet

log = logging.getLogger(__name__)

FD_STEP = 1e-4
PG_TOL = 1e-4
MAX_INNER = 200
EM_INNER = 10  # M-step iterations per EM cycle (generalized EM)
EM_TOL = 1e-4
MAX_EM_ITERS = 50


class EMError(RuntimeError):
    def __init__(self, msg: str, iteration: int):
        super().__init__(f"EM iteration {iteration}: {msg}")
        self.iteration = iteration


class QCache:
    """LRU cache of Q-tables keyed by (goal id, weight vector).

    Lookups may run concurrently; inserts take a lock.  The first solve per
    goal is value iteration polished to the exact fixed point; later ones
    start policy iteration from the most recent table for that goal.  Either
    way the stored table is the fixed point to rounding error, so values do
    not depend on solve order.
    """

    def __init__(self, mdp: GridMDP, goals, maxsize: int = 256):
        self.mdp = mdp
        self.goals = goals
        self.maxsize = maxsize
        self._tables: OrderedDict = OrderedDict()
        self._last: dict[str, QTable] = {}
        self._lock = threading.Lock()
        self.solves = 0

    def get(self, params: ModelParams) -> dict[str, QTable]:
        return {g.id: self._get_one(params, g) for g in self.goals}

    def _get_one(self, params: ModelParams, goal) -> QTable:
        key = (goal.id, params.w_key(), params.gamma)
        hit = self._tables.get(key)
        if hit is not None:
            return hit
        last = self._last.get(goal.id)
        if last is None:
            table = solve_q(self.mdp.grid, params, goal, mdp=self.mdp, polish=True)
        else:
            table = resolve_from(last.q, params, goal, self.mdp)
        with self._lock:
            self.solves += 1
            self._tables[key] = table
            self._last[goal.id] = table
            while len(self._tables) > self.maxsize:
                self._tables.popitem(last=False)
        return table


class DatasetObjective:
    """Vectorized likelihood machinery for one training set."""

    def __init__(self, dataset: TrainingSet, template: ModelParams, *, cache_size: int = 256):
        self.dataset = dataset
        self.goals = dataset.goals
        self.template = template
        self.mdp = GridMDP.for_params(dataset.grid, template)
        self.cache = QCache(self.mdp, self.goals, cache_size)
        cells, actions, prev, owner = [], [], [], []
        for i, tr in enumerate(dataset.trajectories):
            c, a, p = step_data(tr, dataset.grid, template.n_actions)
            cells.append(c)
            actions.append(a)
            prev.append(p)
            owner.append(np.full(len(c), i))
        self.cells = np.concatenate(cells)
        self.actions = np.concatenate(actions)
        self.prev = np.concatenate(prev)
        self.owner = np.concatenate(owner)
        self.n_steps = np.array([tr.n_steps for tr in dataset.trajectories])
        self.temperature = np.sqrt(self.n_steps) + POSTERIOR_OFFSET
        self._first = np.isnan(self.prev)
        self._dphi = self.mdp.headings[None, :] - np.nan_to_num(self.prev)[:, None]
        self._rows = np.arange(len(self.cells))

    @property
    def total_steps(self) -> int:
        return int(self.n_steps.sum())

    def _penalty(self, params: ModelParams) -> np.ndarray:
        pen = turn_penalty(params, self._dphi)
        pen[self._first] = 0.0
        return pen

    def step_log_probs(self, params: ModelParams) -> np.ndarray:
        """(n_goals, n_steps_total) log action probabilities of the observed actions."""
        tables = self.cache.get(params)
        pen = self._penalty(params)
        out = np.empty((len(self.goals), len(self.cells)))
        for k, g in enumerate(self.goals):
            z = params.eta * (tables[g.id].q[self.cells] + pen)
            zmax = z.max(axis=1)
            lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
            out[k] = z[self._rows, self.actions] - lse
        return out

    def loglik_matrix(self, params: ModelParams) -> np.ndarray:
        """(n_traj, n_goals) per-trajectory log-likelihoods."""
        lp = self.step_log_probs(params)
        n = len(self.dataset.trajectories)
        return np.stack([np.bincount(self.owner, weights=row, minlength=n) for row in lp], axis=1)

    def posteriors(self, params: ModelParams) -> np.ndarray:
        return softmax(self.loglik_matrix(params) / self.temperature[:, None], axis=1)

    def ell(self, params: ModelParams, post: np.ndarray) -> float:
        return float((post * self.loglik_matrix(params)).sum())

    def regularized(self, params: ModelParams, post: np.ndarray) -> float:
        """ELL plus the temperature-weighted posterior entropies.

        The tempered E-step maximizes this over the posteriors exactly and the
        M-step raises it through the ELL term, so it never decreases under EM.
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(post > 0, post * np.log(post), 0.0).sum(axis=1)
        return self.ell(params, post) + float((self.temperature * ent).sum())


def _as_matrix(posteriors, goals) -> np.ndarray:
    if isinstance(posteriors, np.ndarray):
        return posteriors
    return np.array([[p[g.id] for g in goals] for p in posteriors])


def _objective_for(dataset, theta, objective):
    return objective if objective is not None else DatasetObjective(dataset, theta)


def e_step(dataset: TrainingSet, theta: ModelParams, objective: DatasetObjective | None = None) -> list[IntentPosterior]:
    obj = _objective_for(dataset, theta, objective)
    ids = tuple(g.id for g in dataset.goals)
    return [IntentPosterior(ids, row) for row in obj.posteriors(theta)]


def expected_log_likelihood(dataset: TrainingSet, theta: ModelParams, posteriors,
                            objective: DatasetObjective | None = None) -> float:
    """Sum over trajectories and goals of posterior weight times trajectory log-likelihood."""
    obj = _objective_for(dataset, theta, objective)
    return obj.ell(theta, _as_matrix(posteriors, dataset.goals))


@dataclass
class MStepInfo:
    theta: ModelParams
    ell_start: float
    ell_end: float
    iterations: int
    status: str  # "converged", "max_iter" or "no_ascent"
    pg_norm: float


def _free_mask(free) -> np.ndarray:
    if free is None:
        return np.ones(len(FREE_NAMES), dtype=bool)
    unknown = set(free) - set(FREE_NAMES)
    if unknown:
        raise ValueError(f"unknown free parameters: {sorted(unknown)}")
    return np.array([n in free for n in FREE_NAMES])


def m_step_detail(dataset: TrainingSet, theta: ModelParams, posteriors, *,
                  objective: DatasetObjective | None = None, free=None, fd_step: float = FD_STEP,
                  pg_tol: float = PG_TOL, max_inner: int = MAX_INNER) -> MStepInfo:
    """Projected finite-difference gradient ascent on the ELL with posteriors held fixed.

    Step lengths follow Barzilai-Borwein; each step backtracks along the
    projected direction until the Armijo condition holds, so the ELL rises
    monotonically.  Stops when the projected-gradient norm drops below
    ``pg_tol``, after ``max_inner`` steps, or when no ascent step is found.
    """
    obj = _objective_for(dataset, theta, objective)
    post = _as_matrix(posteriors, dataset.goals)
    mask = _free_mask(free)

    def f(x):
        return obj.ell(theta.with_free(x), post)

    def project(x):
        xp = project_to_constraints(theta.with_free(x)).free_vector()
        xp[~mask] = x0[~mask]
        return xp

    def grad(x):
        g = np.zeros_like(x)
        for i in np.flatnonzero(mask):
            e = np.zeros_like(x)
            e[i] = fd_step
            g[i] = (f(x + e) - f(x - e)) / (2.0 * fd_step)
        return g

    x0 = theta.free_vector()
    x = project(x0)
    fx = f(x)
    f0 = fx
    g = grad(x)
    step = 0.1 / max(float(np.max(np.abs(g))), 1e-12)
    status, pg = "max_iter", float("nan")
    it = 0
    for it in range(1, max_inner + 1):
        pg = float(np.linalg.norm(project(x + g) - x))
        if pg < pg_tol:
            status = "converged"
            it -= 1
            break
        d = project(x + step * g) - x
        slope = float(g @ d)
        lam = 1.0
        accepted = False
        for _ in range(50):
            xn = x + lam * d
            if np.array_equal(xn, x):
                break
            fn = f(xn)
            if fn > fx and fn >= fx + 1e-4 * lam * slope:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            status = "no_ascent"
            break
        gn = grad(xn)
        s_, y_ = xn - x, gn - g
        sy = float(s_ @ y_)
        # ascent on a locally concave objective has s.y < 0
        step = min(max(-float(s_ @ s_) / sy, 1e-10), 1e10) if sy < 0 else 1e10 if lam == 1.0 else step
        x, fx, g = xn, fn, gn
    theta_new = project_to_constraints(theta.with_free(x))
    return MStepInfo(theta_new, f0, f(theta_new.free_vector()), it, status, pg)


def m_step(dataset: TrainingSet, theta: ModelParams, posteriors, **kw) -> ModelParams:
    return m_step_detail(dataset, theta, posteriors, **kw).theta


def active_constraints(theta: ModelParams, tol: float = 1e-9) -> list[str]:
    w = theta.w_at
    act = []
    if abs(w(2) + 0.5) <= tol:
        act.append("(17-2) w2 <= -0.5")
    if abs(w(7)) <= tol:
        act.append("(17-3) w7 = w8 >= 0")
    if abs(w(11)) <= tol:
        act.append("(17-4) w11 = w12 >= 0")
    for k, i in zip((5, 6, 7, 8), (13, 14, 17, 18)):
        if abs(w(i)) <= tol:
            act.append(f"(17-{k}) w{i} <= 0")
    if abs(2 * w(2) + w(7) + w(11) - w(14) - w(18)) <= tol:
        act.append("(17-9) 2*w2 + w7 + w11 <= w14 + w18")
    for k, name in zip((10, 11, 12, 13), ("C_phi", "beta", "alpha", "eta")):
        if abs(getattr(theta, name)) <= tol:
            act.append(f"(17-{k}) {name} >= 0")
    return act


@dataclass
class FitReport:
    theta: ModelParams
    ell_trace: list[float]
    objective_trace: list[float]
    posteriors: list[IntentPosterior]
    converged: bool
    iterations: int
    theta_trace: list[ModelParams] = field(default_factory=list)
    m_step_status: list[str] = field(default_factory=list)
    active: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "expected_log_likelihood": self.ell_trace,
            "objective": self.objective_trace,
            "m_step_status": self.m_step_status,
            "active_constraints": self.active,
            "theta_trace": [t.to_dict() for t in self.theta_trace],
            "posteriors": [{g: float(p[g]) for g in p} for p in self.posteriors],
        }


def em_train(dataset: TrainingSet, theta0: ModelParams | None = None, max_iters: int = MAX_EM_ITERS, *,
             tol: float = EM_TOL, free=None, max_inner: int = EM_INNER,
             objective: DatasetObjective | None = None) -> FitReport:
    """Alternate E- and M-steps until the objective gains less than ``tol``.

    ``objective_trace[k]`` is the entropy-regularized ELL after iteration k
    (non-decreasing); ``ell_trace[k]`` is the plain ELL of the same
    parameters and posteriors.  Each M-step takes at most ``max_inner``
    ascent steps; a partial M-step still raises the objective, and
    refreshing the posteriors often converges much faster than solving each
    M-step to optimality along the flat C_phi/beta ridge.
    """
    theta = default_params() if theta0 is None else theta0
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    bad = check_constraints(theta)
    if bad:
        raise ValueError(f"initial parameters are infeasible: {bad}")
    obj = objective if objective is not None else DatasetObjective(dataset, theta)
    ell_trace, obj_trace, thetas, statuses = [], [], [], []
    converged = False
    post = None
    it = 0
    for it in range(1, max_iters + 1):
        try:
            post = obj.posteriors(theta)
            info = m_step_detail(dataset, theta, post, objective=obj, free=free, max_inner=max_inner)
            theta = info.theta
            post = obj.posteriors(theta)
            value = obj.regularized(theta, post)
        except ConvergenceError as exc:
            raise EMError(str(exc), it) from exc
        if check_constraints(theta, INEQ_TOL):
            raise EMError(f"M-step left the feasible set: {check_constraints(theta)}", it)
        thetas.append(theta)
        statuses.append(info.status)
        ell_trace.append(obj.ell(theta, post))
        obj_trace.append(value)
        log.info("EM iteration %d: objective %.6f, ELL %.6f, M-step %s after %d steps",
                 it, value, ell_trace[-1], info.status, info.iterations)
        if len(obj_trace) > 1 and obj_trace[-1] - obj_trace[-2] < tol:
            converged = True
            break
        if info.status == "no_ascent" and info.iterations <= 1 and len(obj_trace) > 1:
            converged = True
            break
    ids = tuple(g.id for g in dataset.goals)
    return FitReport(theta, ell_trace, obj_trace, [IntentPosterior(ids, r) for r in post], converged, it,
                     thetas, statuses, active_constraints(theta))


def per_step_ell(dataset: TrainingSet, theta: ModelParams, objective: DatasetObjective | None = None) -> float:
    """ELL under the model's own posteriors, divided by the number of steps."""
    obj = _objective_for(dataset, theta, objective)
    return obj.ell(theta, obj.posteriors(theta)) / obj.total_steps

