"""Trajectory distance metrics and the observe/predict evaluation protocol."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .inference import IRLPredictor, Trajectory

log = logging.getLogger(__name__)


def _points(a) -> np.ndarray:
    if isinstance(a, Trajectory):
        a = a.xy
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    if a.shape[0] == 0:
        raise ValueError("point set is empty")
    return a


def mhd(a, b) -> float:
    """Modified Hausdorff distance between two 2-D point sets.

    max(mean_a min_b |a - b|, mean_b min_a |a - b|); the sets may differ in size.
    """
    a, b = _points(a), _points(b)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return float(max(d.min(axis=1).mean(), d.min(axis=0).mean()))


def emhd(samples: Sequence, truth) -> tuple[float, float]:
    """Monte Carlo expected MHD of sampled futures against the true future.

    Returns (mean, standard error of the mean).
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    vals = np.array([mhd(s, truth) for s in samples])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


@dataclass(frozen=True)
class EvalProtocol:
    observe_horizon: float = 2.5
    predict_horizon: float = 5.0
    truncate_at: float = 7.5
    n_samples: int = 100

    def __post_init__(self):
        if not (self.observe_horizon > 0 and self.predict_horizon > 0 and self.truncate_at > 0):
            raise ValueError("protocol horizons must be positive")
        if abs(self.observe_horizon + self.predict_horizon - self.truncate_at) > 1e-9:
            raise ValueError("observe_horizon + predict_horizon must equal truncate_at")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def split_trajectory(traj: Trajectory, protocol: EvalProtocol) -> tuple[Trajectory, np.ndarray] | None:
    """Observed prefix (t <= t0 + observe) and true future points in (t0 + observe, t0 + truncate].

    Returns None when the trajectory is too short to score.
    """
    t0 = traj.t[0]
    rel = traj.t - t0
    eps = 1e-9
    obs = rel <= protocol.observe_horizon + eps
    fut = (rel > protocol.observe_horizon + eps) & (rel <= protocol.truncate_at + eps)
    if traj.duration < protocol.observe_horizon - eps or obs.sum() < 2 or not fut.any():
        return None
    return Trajectory(traj.t[obs], traj.xy[obs]), traj.xy[fut]


@dataclass
class EvalResult:
    per_trajectory: list[float]
    per_trajectory_se: list[float]
    per_trajectory_time: list[float]
    scored: list[int]
    skipped: list[int] = field(default_factory=list)

    @property
    def mean_emhd(self) -> float:
        return float(np.mean(self.per_trajectory))

    @property
    def mean_time(self) -> float:
        return float(np.mean(self.per_trajectory_time))

    @property
    def mc_standard_error(self) -> float:
        """Monte Carlo standard error of :attr:`mean_emhd` (independent per-trajectory estimates)."""
        se = np.asarray(self.per_trajectory_se)
        return float(np.sqrt((se ** 2).sum()) / len(se))

    def summary(self) -> str:
        return (f"trajectories scored: {len(self.scored)} (skipped {len(self.skipped)})\n"
                f"mean EMHD (m): {self.mean_emhd:.2f}\n"
                f"Monte Carlo s.e. (m): {self.mc_standard_error:.4f}\n"
                f"mean prediction time (s): {self.mean_time:.3f}")

    def to_rows(self) -> list[dict]:
        return [
            {"index": i, "emhd": e, "se": s, "time_s": t}
            for i, e, s, t in zip(self.scored, self.per_trajectory, self.per_trajectory_se, self.per_trajectory_time)
        ]


def trajectory_seed(root_seed: int, index: int) -> int:
    """Seed for test trajectory ``index`` of a protocol run."""
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1)[0])


def _score_one(model, observed, future, protocol, seed):
    start = time.perf_counter()
    pred = model.predict(observed, protocol.predict_horizon, protocol.n_samples, seed)
    elapsed = time.perf_counter() - start
    futures = [s.xy[1:] if isinstance(s, Trajectory) else np.asarray(s)[1:] for s in pred.samples]
    m, se = emhd(futures, future)
    return m, se, elapsed


def run_protocol(testset: Sequence[Trajectory], model, protocol: EvalProtocol = EvalProtocol(),
                 rng_seed: int = 0, threads: int = 1) -> EvalResult:
    """Observe the first seconds of each test trajectory, predict the rest, score with EMHD.

    ``model`` needs ``predict(partial, horizon, n, rng_seed)`` returning an
    object with a ``samples`` list of trajectories that start at the last
    observed point; that start point is dropped before scoring.  Trajectory
    ``j`` is predicted with seed :func:`trajectory_seed` (rng_seed, j), so
    results do not depend on ``threads``.
    """
    jobs, skipped = [], []
    for j, traj in enumerate(testset):
        parts = split_trajectory(traj, protocol)
        if parts is None:
            log.warning("skipping test trajectory %d: shorter than the observation window", j)
            skipped.append(j)
            continue
        jobs.append((j, *parts))
    if not jobs:
        raise ValueError("every test trajectory was skipped")

    def score(job):
        j, observed, future = job
        return _score_one(model, observed, future, protocol, trajectory_seed(rng_seed, j))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(score, jobs))
    else:
        out = [score(job) for job in jobs]
    ems, ses, times = (list(col) for col in zip(*out))
    return EvalResult(ems, ses, times, [j for j, _, _ in jobs], skipped)


@dataclass
class MapBundle:
    """One intersection: map, goals, training and test trajectories."""

    name: str
    grid: object
    goals: object
    train: list[Trajectory]
    test: list[Trajectory]


@dataclass
class TransferRow:
    train: str
    test: str
    mean_emhd: float = float("nan")
    mc_se: float = float("nan")
    mean_time: float = float("nan")
    n_scored: int = 0
    error: str | None = None


def transfer_eval(train_bundles: Sequence[MapBundle], test_bundles: Sequence[MapBundle],
                  protocol: EvalProtocol = EvalProtocol(), *, theta0=None, rng_seed: int = 0,
                  train_fn=None, trained: Mapping | None = None, threads: int = 1) -> list[TransferRow]:
    """Train on each training bundle, evaluate on every test bundle with that bundle's own goals.

    ``trained`` may supply already-fitted parameters by bundle name.  A
    failure in one (train, test) pair is recorded in its row and the other
    pairs still run.
    """
    from .learning import em_train
    from .synthetic import TrainingSet

    train_fn = train_fn or (lambda ds: em_train(ds, theta0).theta)
    thetas: dict = dict(trained or {})
    errors: dict = {}
    for b in train_bundles:
        if b.name in thetas:
            continue
        try:
            thetas[b.name] = train_fn(TrainingSet(b.grid, b.goals, list(b.train)))
        except Exception as exc:  # noqa: BLE001 - reported per pair
            log.error("training on %s failed: %s", b.name, exc)
            errors[b.name] = f"training failed: {exc}"
    rows = []
    for b in train_bundles:
        for tb in test_bundles:
            row = TransferRow(b.name, tb.name)
            if b.name in errors:
                row.error = errors[b.name]
                rows.append(row)
                continue
            try:
                predictor = IRLPredictor.build(tb.grid, tb.goals, thetas[b.name])
                res = run_protocol(tb.test, predictor, protocol, rng_seed, threads)
                row.mean_emhd, row.mc_se, row.mean_time = res.mean_emhd, res.mc_standard_error, res.mean_time
                row.n_scored = len(res.scored)
            except Exception as exc:  # noqa: BLE001 - reported per pair
                log.error("evaluating %s -> %s failed: %s", b.name, tb.name, exc)
                row.error = str(exc)
            rows.append(row)
    return rows


def format_table(rows: Sequence[TransferRow]) -> str:
    lines = ["train,test,emhd_m,mc_se_m,cpu_time_s,n_scored,error"]
    for r in rows:
        err = (r.error or "").replace(",", ";").replace("\n", " ")
        lines.append(f"{r.train},{r.test},{r.mean_emhd:.2f},{r.mc_se:.4f},{r.mean_time:.3f},{r.n_scored},{err}")
    return "\n".join(lines) + "\n"
