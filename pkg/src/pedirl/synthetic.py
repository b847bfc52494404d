"""Synthetic intersections and labeled trajectory datasets drawn from a known model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .inference import IRLPredictor, Trajectory, sample_index
from .reward_model import Goal, GoalSet, ModelParams, check_constraints
from .semantic_map import SemanticClass, SemanticGrid

OB, ROAD, SIDE, CROSS = (int(c) for c in SemanticClass)


def _bands(n: int, road_width: int, sidewalk_width: int):
    lo = n // 2 - road_width // 2
    hi = lo + road_width
    return lo, hi, lo - sidewalk_width, hi + sidewalk_width


def four_way_intersection(size: int = 40, road_width: int = 8, sidewalk_width: int = 2,
                          crosswalk_width: int = 2, cell_size: float = 0.5,
                          goal_radius: float = 1.0) -> tuple[SemanticGrid, GoalSet]:
    """Two crossing roads with sidewalks on both sides and a crosswalk on every arm.

    One goal sits at the far end of a sidewalk on each arm; the layout has
    four-fold rotational symmetry about the map center.
    """
    lo, hi, slo, shi = _bands(size, road_width, sidewalk_width)
    lab = np.full((size, size), OB, dtype=np.int8)
    lab[slo:shi, :] = SIDE
    lab[:, slo:shi] = SIDE
    lab[lo:hi, :] = ROAD
    lab[:, lo:hi] = ROAD
    cw = crosswalk_width
    lab[hi:hi + cw, lo:hi] = CROSS       # north arm
    lab[lo - cw:lo, lo:hi] = CROSS       # south arm
    lab[lo:hi, hi:hi + cw] = CROSS       # east arm
    lab[lo:hi, lo - cw:lo] = CROSS       # west arm
    grid = SemanticGrid((0.0, 0.0), cell_size, lab)
    side_mid = (slo + sidewalk_width / 2.0) * cell_size
    edge = (size - 0.5 * sidewalk_width) * cell_size
    center = size * cell_size / 2.0
    goals = []
    # north-arm goal on the west sidewalk, then rotate by quarter turns
    gx, gy = side_mid - center, edge - center
    for k, name in enumerate(("north", "west", "south", "east")):
        x, y = gx, gy
        for _ in range(k):
            x, y = -y, x
        goals.append(Goal(name, x + center, y + center, goal_radius))
    return grid, GoalSet(goals)


def t_junction(width: int = 44, height: int = 32, road_width: int = 8, sidewalk_width: int = 2,
               crosswalk_width: int = 2, cell_size: float = 0.5,
               goal_radius: float = 1.0) -> tuple[SemanticGrid, GoalSet]:
    """A through road (west-east) with a side road joining from the north."""
    lab = np.full((height, width), OB, dtype=np.int8)
    rlo = height // 3
    rhi = rlo + road_width
    clo = width // 2 - road_width // 2
    chi = clo + road_width
    sw = sidewalk_width
    lab[rlo - sw:rlo, :] = SIDE
    lab[rhi:rhi + sw, :] = SIDE
    lab[rhi:, clo - sw:chi + sw] = SIDE
    lab[rlo:rhi, :] = ROAD
    lab[rhi:, clo:chi] = ROAD
    cw = crosswalk_width
    lab[rhi:rhi + cw, clo:chi] = CROSS           # across the side road
    lab[rlo:rhi, clo - cw:clo] = CROSS           # across the through road, west of the junction
    lab[rlo:rhi, chi:chi + cw] = CROSS           # and east of it
    grid = SemanticGrid((0.0, 0.0), cell_size, lab)
    cs = cell_size
    goals = GoalSet([
        Goal("west", 0.5 * sw * cs, (rlo - 0.5 * sw) * cs, goal_radius),
        Goal("east", (width - 0.5 * sw) * cs, (rhi + 0.5 * sw) * cs, goal_radius),
        Goal("north", (clo - 0.5 * sw) * cs, (height - 0.5 * sw) * cs, goal_radius),
    ])
    return grid, goals


@dataclass
class LabeledTrajectory:
    traj: Trajectory
    goal_id: str


@dataclass
class TrainingSet:
    """Trajectories with their map and goals; ``labels`` holds generator goals when known."""

    grid: SemanticGrid
    goals: GoalSet
    trajectories: list[Trajectory]
    labels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a training set needs at least one trajectory")
        if self.labels is not None and len(self.labels) != len(self.trajectories):
            raise ValueError("labels and trajectories differ in length")

    def __len__(self):
        return len(self.trajectories)

    def subset(self, idx) -> "TrainingSet":
        idx = list(idx)
        return TrainingSet(self.grid, self.goals, [self.trajectories[i] for i in idx],
                           None if self.labels is None else [self.labels[i] for i in idx], dict(self.meta))


def synth_generate(grid: SemanticGrid, goals, theta_star: ModelParams, count: int, rng_seed: int, *,
                   horizon: float = 30.0, noise: float = 0.0, min_goal_distance: float = 6.0,
                   predictor: IRLPredictor | None = None) -> TrainingSet:
    """Labeled rollouts from ``theta_star``.

    Each trajectory starts at the center of a random sidewalk cell at least
    ``min_goal_distance`` from its uniformly drawn goal, heads out along a
    uniformly random discrete heading (no turn penalty on the first step)
    and is simulated until it reaches the goal disk or ``horizon`` elapses.
    ``noise`` adds isotropic Gaussian position noise (meters) to the
    recorded samples.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    bad = check_constraints(theta_star)
    if bad:
        raise ValueError(f"theta_star is infeasible: {bad}")
    goals = GoalSet(goals)
    side = grid.cells_of_class(SemanticClass.SIDEWALK)
    if side.size == 0:
        raise ValueError("map has no sidewalk cells to start from")
    if predictor is None:
        predictor = IRLPredictor.build(grid, goals, theta_star)
    centers = grid.cell_centers()[side]
    rng = np.random.default_rng(rng_seed)
    trajs, labels = [], []
    uniform = np.full(len(goals), 1.0 / len(goals))
    for _ in range(count):
        g = goals[sample_index(uniform, rng)]
        far = np.hypot(centers[:, 0] - g.x, centers[:, 1] - g.y) >= max(min_goal_distance, g.d)
        pool = centers[far] if far.any() else centers
        start = pool[rng.integers(len(pool))]
        tr = predictor.rollout(start, None, g.id, horizon, rng)
        if noise > 0:
            tr = Trajectory(tr.t, tr.xy + rng.normal(0.0, noise, tr.xy.shape))
        trajs.append(tr)
        labels.append(g.id)
    return TrainingSet(grid, goals, trajs, labels, {"seed": rng_seed, "count": count})


def mirror_pair_scenario(length: int = 30, half_width: int = 8, cell_size: float = 0.5,
                         goal_radius: float = 1.0):
    """Sidewalk plaza with two goals placed mirror-symmetric about the line y = center."""
    lab = np.full((2 * half_width + 1, length), SIDE, dtype=np.int8)
    lab[0, :] = OB
    lab[-1, :] = OB
    grid = SemanticGrid((0.0, 0.0), cell_size, lab)
    # the symmetry line runs through the middle of row ``half_width``
    cy = (half_width + 0.5) * cell_size
    gx = (length - 2) * cell_size
    off = (half_width - 3) * cell_size
    goals = GoalSet([Goal("up", gx, cy + off, goal_radius), Goal("down", gx, cy - off, goal_radius)])
    return grid, goals


def straight_path(start, heading: float, n_steps: int, step: float, dt: float) -> Trajectory:
    d = np.array([math.cos(heading), math.sin(heading)]) * step
    xy = np.asarray(start, dtype=float) + np.arange(n_steps + 1)[:, None] * d
    return Trajectory(dt * np.arange(n_steps + 1), xy)
