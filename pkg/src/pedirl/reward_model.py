"""Transferable reward parameters, the reward function and its constraints."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .semantic_map import FEATURE_DIM, SemanticGrid, feature_vector

PARAMS_SCHEMA_VERSION = 1

# 1-based indices of weights allowed to be non-zero
ACTIVE_W = (1, 2, 7, 8, 11, 12, 13, 14, 17, 18)
W_MASK = np.zeros(FEATURE_DIM, dtype=bool)
W_MASK[[i - 1 for i in ACTIVE_W]] = True
W_OBSTACLE = -2.5
W_ROAD_MAX = -0.5
INEQ_TOL = 1e-12

# names of the coordinates the M-step optimizes over, in order
FREE_NAMES = ("w2", "w7", "w11", "w13", "w14", "w17", "w18", "C_phi", "beta", "alpha", "eta")


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    # leave in-range angles untouched so wrap(-a) == -wrap(a) exactly there
    out = np.where((a > -np.pi) & (a <= np.pi), a, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """theta = {w, C_phi, beta, alpha, eta} plus discretization settings.

    ``w[j]`` holds the weight with 1-based index ``j + 1``.
    """

    w: np.ndarray = field(default_factory=lambda: default_w())
    C_phi: float = 0.5
    beta: float = 1.0
    alpha: float = 1.0
    eta: float = 1.0
    gamma: float = 0.99
    n_actions: int = 16
    delta_t: float = 0.5
    speed: float = 1.4

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.shape != (FEATURE_DIM,):
            raise ValueError(f"w must have {FEATURE_DIM} entries, got {w.shape[0]}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        for name in ("C_phi", "beta", "alpha", "eta", "gamma", "delta_t", "speed"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "n_actions", int(self.n_actions))
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not (self.delta_t > 0 and self.speed > 0):
            raise ValueError("delta_t and speed must be positive")

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.w, other.w) and all(
            getattr(self, f.name) == getattr(other, f.name) for f in dataclasses.fields(self) if f.name != "w"
        )

    __hash__ = None

    def replace(self, **kw) -> "ModelParams":
        return dataclasses.replace(self, **kw)

    def w_at(self, i: int) -> float:
        """Weight by 1-based index."""
        return float(self.w[i - 1])

    def w_key(self) -> bytes:
        return self.w.tobytes()

    def free_vector(self) -> np.ndarray:
        w = self.w
        return np.array([w[1], w[6], w[10], w[12], w[13], w[16], w[17],
                         self.C_phi, self.beta, self.alpha, self.eta])

    def with_free(self, x) -> "ModelParams":
        """Rebuild from a free vector (tied pairs and fixed entries filled in)."""
        x = np.asarray(x, dtype=float)
        w = np.zeros(FEATURE_DIM)
        w[0] = W_OBSTACLE
        w[1] = x[0]
        w[6] = w[7] = x[1]
        w[10] = w[11] = x[2]
        w[12], w[13], w[16], w[17] = x[3], x[4], x[5], x[6]
        return self.replace(w=w, C_phi=x[7], beta=x[8], alpha=x[9], eta=x[10])

    def to_dict(self) -> dict:
        return {
            "schema_version": PARAMS_SCHEMA_VERSION,
            "w": [float(v) for v in self.w],
            "C_phi": self.C_phi,
            "beta": self.beta,
            "alpha": self.alpha,
            "eta": self.eta,
            "gamma": self.gamma,
            "N_a": self.n_actions,
            "delta_t": self.delta_t,
            "speed": self.speed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        version = d.get("schema_version")
        if version != PARAMS_SCHEMA_VERSION:
            raise ValueError(f"unsupported parameter schema_version {version!r}")
        kw = dict(w=d["w"], C_phi=d["C_phi"], beta=d["beta"], alpha=d["alpha"], eta=d["eta"])
        for key, name in (("gamma", "gamma"), ("N_a", "n_actions"), ("delta_t", "delta_t"), ("speed", "speed")):
            if key in d:
                kw[name] = d[key]
        return cls(**kw)


def default_w() -> np.ndarray:
    w = np.zeros(FEATURE_DIM)
    w[0] = W_OBSTACLE
    w[1] = -0.5
    w[[6, 7, 10, 11]] = 0.1
    w[[12, 13, 16, 17]] = -0.1
    return w


def default_params(**kw) -> ModelParams:
    """Interior-feasible starting point for learning."""
    return ModelParams(**kw)


@dataclass(frozen=True)
class Goal:
    id: str
    x: float
    y: float
    d: float = 0.0

    def __post_init__(self):
        if not self.d >= 0:
            raise ValueError(f"goal {self.id!r}: radius must be >= 0")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"goal {self.id!r}: non-finite location")

    @property
    def location(self) -> np.ndarray:
        return np.array([self.x, self.y])


class GoalSet(tuple):
    """Ordered, non-empty collection of goals with unique ids."""

    def __new__(cls, goals):
        goals = tuple(goals)
        if not goals:
            raise ValueError("goal set must be non-empty")
        ids = [g.id for g in goals]
        if len(set(ids)) != len(ids):
            raise ValueError("goal ids must be unique")
        return super().__new__(cls, goals)

    @property
    def ids(self) -> list[str]:
        return [g.id for g in self]

    def by_id(self, gid: str) -> Goal:
        for g in self:
            if g.id == gid:
                return g
        raise KeyError(gid)

    def check_in_bounds(self, grid: SemanticGrid) -> None:
        for g in self:
            if not grid.contains(g.location):
                raise ValueError(f"goal {g.id!r} at ({g.x}, {g.y}) is outside the map")


def semantic_reward(params: ModelParams, psi) -> float | np.ndarray:
    """Linear context reward w^T psi; accepts one feature vector or a stack."""
    out = np.asarray(psi, dtype=float) @ params.w
    return out if np.ndim(out) else float(out)


def goal_reward(goal: Goal, p) -> float | np.ndarray:
    """Radial goal reward: zero inside the goal disk, -sqrt(excess distance)/2 outside."""
    p = np.asarray(p, dtype=float)
    dist = np.hypot(p[..., 0] - goal.x, p[..., 1] - goal.y)
    out = np.where(dist > goal.d, -0.5 * np.sqrt(np.maximum(dist - goal.d, 0.0)), 0.0)
    return out if out.ndim else float(out)


def total_reward(params: ModelParams, grid: SemanticGrid, goal: Goal, p) -> float:
    return semantic_reward(params, feature_vector(grid, p)) + goal_reward(goal, p)


def turn_penalty(params: ModelParams, delta_phi):
    """-C_phi * tanh(beta * |dphi|^alpha) with dphi wrapped to (-pi, pi]."""
    d = np.abs(wrap_angle(delta_phi))
    # |dphi|^alpha may overflow for large alpha; tanh saturates, and beta = 0 means no penalty at all
    with np.errstate(over="ignore", under="ignore"):
        arg = params.beta * np.power(d, params.alpha) if params.beta != 0.0 else np.zeros_like(d)
    out = -params.C_phi * np.tanh(arg)
    # 0**0 is 1 in numpy; keep "no turn, no penalty" for alpha = 0 as well
    out = np.where(d == 0.0, 0.0, out)
    return out if np.ndim(out) else float(out)


def check_constraints(params: ModelParams, tol: float = INEQ_TOL) -> list[str]:
    """List every violated parameter constraint; empty when feasible."""
    w = lambda i: params.w_at(i)  # noqa: E731
    out = []
    for j in range(FEATURE_DIM):
        if not W_MASK[j] and params.w[j] != 0.0:
            out.append(f"sparsity: w{j + 1} must be 0 (got {params.w[j]:g})")
    if w(1) != W_OBSTACLE:
        out.append(f"(17-1) w1 = -2.5 (got {w(1):g})")
    if w(2) > W_ROAD_MAX + tol:
        out.append(f"(17-2) w2 <= -0.5 (got {w(2):g})")
    if w(7) != w(8) or w(7) < -tol:
        out.append(f"(17-3) w7 = w8 >= 0 (got w7={w(7):g}, w8={w(8):g})")
    if w(11) != w(12) or w(11) < -tol:
        out.append(f"(17-4) w11 = w12 >= 0 (got w11={w(11):g}, w12={w(12):g})")
    for k, i in zip((5, 6, 7, 8), (13, 14, 17, 18)):
        if w(i) > tol:
            out.append(f"(17-{k}) w{i} <= 0 (got {w(i):g})")
    lhs = 2 * w(2) + w(7) + w(11)
    rhs = w(14) + w(18)
    if lhs > rhs + tol:
        out.append(f"(17-9) 2*w2 + w7 + w11 <= w14 + w18 (got {lhs:g} > {rhs:g})")
    for k, name in zip((10, 11, 12, 13), ("C_phi", "beta", "alpha", "eta")):
        v = getattr(params, name)
        if v < -tol:
            out.append(f"(17-{k}) {name} >= 0 (got {v:g})")
    return out


def _project_coupled(x0: np.ndarray) -> np.ndarray:
    """Weighted projection of (w2, w7, w11, w14, w18) onto box + coupled halfspace.

    w7 and w11 stand for tied pairs, hence weight 2 in the squared distance.
    """
    weight = np.array([1.0, 2.0, 2.0, 1.0, 1.0])
    normal = np.array([2.0, 1.0, 1.0, -1.0, -1.0])
    lo = np.array([-np.inf, 0.0, 0.0, -np.inf, -np.inf])
    hi = np.array([W_ROAD_MAX, np.inf, np.inf, 0.0, 0.0])

    def at(mu):
        return np.clip(x0 - mu * normal / weight, lo, hi)

    x = at(0.0)
    if normal @ x <= 0.0:
        return x
    mu_lo, mu_hi = 0.0, 1.0
    while normal @ at(mu_hi) > 0.0:
        mu_lo, mu_hi = mu_hi, 2.0 * mu_hi
    for _ in range(200):
        mid = 0.5 * (mu_lo + mu_hi)
        if mid <= mu_lo or mid >= mu_hi:
            break
        if normal @ at(mid) > 0.0:
            mu_lo = mid
        else:
            mu_hi = mid
    return at(mu_hi)


def project_to_constraints(params: ModelParams) -> ModelParams:
    """Nearest feasible parameters in Euclidean distance over the free entries."""
    w0 = params.w
    w = np.zeros(FEATURE_DIM)
    w[0] = W_OBSTACLE
    b = 0.5 * (w0[6] + w0[7])
    c = 0.5 * (w0[10] + w0[11])
    a, b, c, f, h = _project_coupled(np.array([w0[1], b, c, w0[13], w0[17]]))
    w[1] = a
    w[6] = w[7] = b
    w[10] = w[11] = c
    w[13], w[17] = f, h
    w[12] = min(w0[12], 0.0)
    w[16] = min(w0[16], 0.0)
    # keep bit-identity on feasible input
    if np.array_equal(w, w0) and not check_constraints(params, tol=0.0):
        return params
    return params.replace(
        w=w,
        C_phi=max(params.C_phi, 0.0),
        beta=max(params.beta, 0.0),
        alpha=max(params.alpha, 0.0),
        eta=max(params.eta, 0.0),
    )
