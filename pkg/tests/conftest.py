import math

import numpy as np
import pytest

from pedirl.reward_model import ModelParams, W_OBSTACLE, total_reward
from pedirl.semantic_map import grid_from_strings

# (criterion, description, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def make_theta_star(**kw) -> ModelParams:
    """Feasible reference parameters used to generate synthetic data."""
    w = np.zeros(20)
    w[0] = W_OBSTACLE
    w[1] = -1.0
    w[6] = w[7] = 0.2
    w[10] = w[11] = 0.1
    w[12] = w[13] = -0.2
    w[16] = w[17] = -0.1
    base = dict(w=w, C_phi=1.0, beta=1.0, alpha=1.0, eta=3.0)
    base.update(kw)
    return ModelParams(**base)


def corridor(n: int, cls: str = "s", cell_size: float = 0.5):
    return grid_from_strings([cls * n], cell_size=cell_size)


def off_grid_lines(grid, p, radii=(1.0, 3.0), m=36, eps=1e-9):
    """True when p and all its shell samples keep clear of cell boundaries.

    On a boundary the half-open cell rule picks a side, and no single rule
    is symmetric under all four quarter turns.
    """
    pts = [np.asarray(p, dtype=float)]
    for r in radii:
        a = 2 * np.pi * np.arange(m) / m
        pts.append(np.asarray(p) + r * np.column_stack([np.cos(a), np.sin(a)]))
    pts = np.vstack(pts)
    rel = (pts - np.asarray(grid.origin)) / grid.cell_size
    return bool(np.all(np.abs(rel - np.rint(rel)) > eps))


@pytest.fixture
def theta_star():
    return make_theta_star()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def oracle_step_terms(traj, qtable, params, grid):
    """Per-step log action probabilities recomputed from scratch with scalar math."""
    n_a = qtable.q.shape[1]
    width = 2 * math.pi / n_a
    out = []
    prev = None
    for k in range(len(traj.t) - 1):
        (x0, y0), (x1, y1) = traj.xy[k], traj.xy[k + 1]
        if math.hypot(x1 - x0, y1 - y0) < 1e-12:
            phi = prev if prev is not None else 0.0
        else:
            phi = math.atan2(y1 - y0, x1 - x0)
        ix = min(max(math.floor((x0 - grid.origin[0]) / grid.cell_size), 0), grid.width - 1)
        iy = min(max(math.floor((y0 - grid.origin[1]) / grid.cell_size), 0), grid.height - 1)
        cell = iy * grid.width + ix
        action = int(round((phi % (2 * math.pi)) / width)) % n_a
        z = []
        for a in range(n_a):
            s = float(qtable.q[cell, a])
            if prev is not None:
                d = (2 * math.pi * a / n_a - prev) % (2 * math.pi)
                d = min(d, 2 * math.pi - d)
                if d > 0:
                    s -= params.C_phi * math.tanh(params.beta * d ** params.alpha)
            z.append(params.eta * s)
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        out.append(z[action] - lse)
        prev = phi
    return out


def oracle_posterior(traj, qtables, params, goal_ids, grid):
    ll = [sum(oracle_step_terms(traj, qtables[g], params, grid)) for g in goal_ids]
    temp = math.sqrt(len(traj.t) - 1) + 10.0
    m = max(ll)
    e = [math.exp((v - m) / temp) for v in ll]
    return [v / sum(e) for v in e]


def dp_oracle(grid, params, goal, horizon=200):
    """Finite-horizon DP written from scratch: loops, math.cos/sin, scalar rewards."""
    n_a = params.n_actions
    xmin, ymin = grid.origin
    xmax, ymax = xmin + grid.width * grid.cell_size, ymin + grid.height * grid.cell_size
    centers = [(xmin + (ix + 0.5) * grid.cell_size, ymin + (iy + 0.5) * grid.cell_size)
               for iy in range(grid.height) for ix in range(grid.width)]
    step = params.speed * params.delta_t

    def cell_of(x, y):
        ix = min(max(math.floor((x - xmin) / grid.cell_size), 0), grid.width - 1)
        iy = min(max(math.floor((y - ymin) / grid.cell_size), 0), grid.height - 1)
        return iy * grid.width + ix

    nxt = []
    for (cx, cy) in centers:
        row = []
        for j in range(n_a):
            phi = 2 * math.pi * j / n_a
            x = min(max(cx + step * math.cos(phi), xmin), xmax)
            y = min(max(cy + step * math.sin(phi), ymin), ymax)
            row.append(cell_of(x, y))
        nxt.append(row)
    reward = [total_reward(params, grid, goal, c) for c in centers]
    v = [0.0] * len(centers)
    q = None
    for _ in range(horizon):
        q = [[reward[s2] + params.gamma * v[s2] for s2 in row] for row in nxt]
        v = [max(r) for r in q]
    return np.array(q)
