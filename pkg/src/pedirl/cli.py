"""Command-line interface: ``pedirl {synth,train,predict,eval,transfer,inspect}``.

Exit codes: 0 success, 2 bad arguments or unreadable input files, 3 when
generation, training or every evaluation pair fails.  Every command writes
``run.json`` next to its outputs with the resolved inputs, seed and package
versions.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .evaluation import EvalProtocol, EvalResult, MapBundle, emhd, format_table, run_protocol, split_trajectory, \
    transfer_eval
from .inference import IRLPredictor, Trajectory
from .learning import EMError, em_train
from .mdp_solver import ConvergenceError, solve_q
from .reward_model import check_constraints, default_params
from .semantic_map import SemanticClass, feature_vector
from .synthetic import TrainingSet, four_way_intersection, mirror_pair_scenario, synth_generate, t_junction

log = logging.getLogger("pedirl")

EXIT_OK, EXIT_INPUT, EXIT_FAILURE = 0, 2, 3

SCENARIOS = {
    "four-way": four_way_intersection,
    "t-junction": t_junction,
    "mirror": mirror_pair_scenario,
}


class CommandError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def write_run_echo(out_dir: Path, command: str, inputs: dict, seed, extra: dict | None = None) -> None:
    """Record what produced a directory's contents; no timestamps, so reruns are byte-identical."""
    doc = {
        "command": command,
        "inputs": {k: (str(v) if v is not None else None) for k, v in sorted(inputs.items())},
        "seed": seed,
        "versions": versions(),
    }
    if extra:
        doc.update(extra)
    io.dump_json(out_dir / "run.json", doc)


# -- input resolution -----------------------------------------------------------

def _manifest(args) -> io.Manifest:
    m = io.Manifest.load(args.manifest) if getattr(args, "manifest", None) else io.Manifest()
    for key in ("map", "goals", "params"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(m, key, Path(v))
    if getattr(args, "trajectories", None) is not None:
        m.trajectories = Path(args.trajectories)
    if getattr(args, "seed", None) is None and m.seed is not None and hasattr(args, "seed"):
        args.seed = m.seed
    return m


def _require_seed(args) -> int:
    if args.seed is None:
        raise CommandError("this command samples and needs --seed (or a 'seed' entry in the manifest)", EXIT_INPUT)
    return int(args.seed)


def _map_and_goals(m: io.Manifest):
    m.require("map", "goals")
    grid = io.read_map(m.map)
    goals = io.read_goals(m.goals)
    try:
        goals.check_in_bounds(grid)
    except ValueError as exc:
        raise io.FormatError(m.goals, str(exc)) from None
    return grid, goals


def _params(m: io.Manifest, required: bool = True):
    if m.params is None:
        if required:
            m.require("params")
        return None
    m.require("params")
    return io.read_params(m.params)


def _trajectories(path) -> list[tuple[str, Trajectory]]:
    items = io.read_trajectory_dir(path)
    if not items:
        raise io.FormatError(path, "no trajectory files (*.csv) found")
    return items


def _protocol(m: io.Manifest, args) -> EvalProtocol:
    kw = dict(m.protocol)
    if getattr(args, "n", None) is not None:
        kw["n_samples"] = args.n
    try:
        return EvalProtocol(**kw)
    except (TypeError, ValueError) as exc:
        raise io.FormatError(m.path or "protocol", f"bad protocol settings: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    """Generate labeled rollouts from a known parameter file."""
    if args.scenario:
        grid, goals = SCENARIOS[args.scenario]()
        m = io.Manifest()
        if args.params:
            m.params = Path(args.params)
    else:
        m = _manifest(args)
        grid, goals = _map_and_goals(m)
    seed = _require_seed(args)
    theta_path = args.theta_star or m.params
    theta = io.read_params(theta_path) if theta_path else default_params()
    out = _out_dir(args)
    try:
        ds = synth_generate(grid, goals, theta, args.count, seed, horizon=args.horizon, noise=args.noise,
                            min_goal_distance=args.min_goal_distance)
    except (ValueError, ConvergenceError) as exc:
        raise CommandError(f"generation failed: {exc}", EXIT_FAILURE) from exc
    io.write_map(out / "map.txt", grid)
    io.write_goals(out / "goals.json", goals)
    io.write_params(out / "theta_star.json", theta)
    tdir = out / "trajectories"
    names = [f"traj_{i:04d}" for i in range(len(ds))]
    for name, tr in zip(names, ds.trajectories):
        io.write_trajectory(tdir / f"{name}.csv", tr)
    io.write_labels(out / "labels.csv", names, ds.labels)
    io.Manifest(out / "manifest.json", out / "map.txt", out / "goals.json", tdir, None, None,
                args.scenario or m.name, seed).save(out / "manifest.json")
    write_run_echo(out, "synth", {"map": m.map, "goals": m.goals, "theta_star": theta_path,
                                  "scenario": args.scenario}, seed,
                   {"count": args.count, "horizon": args.horizon, "noise": args.noise})
    print(f"wrote {len(ds)} trajectories to {tdir}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Fit parameters by EM and write them with the fit report."""
    m = _manifest(args)
    grid, goals = _map_and_goals(m)
    m.require("trajectories")
    items = _trajectories(m.trajectories)
    theta0 = io.read_params(args.theta0) if args.theta0 else default_params()
    ds = TrainingSet(grid, goals, [tr for _, tr in items])
    try:
        report = em_train(ds, theta0, max_iters=args.max_iters)
    except EMError as exc:
        raise CommandError(f"training failed at EM iteration {exc.iteration}: {exc}", EXIT_FAILURE) from exc
    except (ValueError, ConvergenceError) as exc:
        raise CommandError(f"training failed: {exc}", EXIT_FAILURE) from exc
    out = _out_dir(args)
    io.write_params(out / "params.json", report.theta)
    report_doc = report.to_dict()
    report_doc["trajectories"] = [name for name, _ in items]
    io.dump_json(out / "fit_report.json", report_doc)
    write_run_echo(out, "train", {"map": m.map, "goals": m.goals, "trajectories": m.trajectories,
                                  "theta0": args.theta0}, None, {"max_iters": args.max_iters})
    print(f"EM finished after {report.iterations} iterations (converged: {report.converged})")
    print(f"final objective {report.objective_trace[-1]:.6f}, expected log-likelihood {report.ell_trace[-1]:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    """Intent posterior and sampled futures for one partial trajectory."""
    m = _manifest(args)
    seed = _require_seed(args)
    grid, goals = _map_and_goals(m)
    params = _params(m)
    partial = io.read_trajectory(args.partial)
    model = IRLPredictor.build(grid, goals, params)
    pred = model.predict(partial, args.horizon, args.n, seed)
    out = _out_dir(args)
    for i, s in enumerate(pred.samples):
        io.write_trajectory(out / "samples" / f"sample_{i:04d}.csv", s)
    io.write_posterior(out / "posterior.json", pred.posterior, {"sampled_goals": list(pred.sampled_goals)})
    write_run_echo(out, "predict", {"map": m.map, "goals": m.goals, "params": m.params,
                                    "partial": args.partial}, seed, {"n": args.n, "horizon": args.horizon})
    for g in pred.posterior:
        print(f"{g}: {pred.posterior[g]:.4f}")
    return EXIT_OK


def _eval_external(pred_dir: Path, items, protocol: EvalProtocol) -> EvalResult:
    ems, ses, times, scored, skipped = [], [], [], [], []
    for j, (name, traj) in enumerate(items):
        parts = split_trajectory(traj, protocol)
        if parts is None:
            skipped.append(j)
            continue
        sub = pred_dir / name
        samples = io.read_trajectory_dir(sub) if sub.is_dir() else []
        if not samples:
            raise io.FormatError(sub, "no prediction samples for this test trajectory")
        m, se = emhd([s.xy for _, s in samples], parts[1])
        ems.append(m)
        ses.append(se)
        times.append(0.0)
        scored.append(j)
    if not scored:
        raise CommandError("every test trajectory was skipped", EXIT_FAILURE)
    return EvalResult(ems, ses, times, scored, skipped)


def cmd_eval(args) -> int:
    """Observe/predict protocol on a test set, with the model or external predictions."""
    m = _manifest(args)
    protocol = _protocol(m, args)
    test_dir = Path(args.test) if args.test else m.test_trajectories
    if test_dir is None:
        raise io.FormatError(m.path or "manifest", "no test trajectories given (--test or 'test_trajectories')")
    items = _trajectories(test_dir)
    if args.predictions:
        seed = args.seed
        res = _eval_external(Path(args.predictions), items, protocol)
    else:
        seed = _require_seed(args)
        grid, goals = _map_and_goals(m)
        params = _params(m)
        model = IRLPredictor.build(grid, goals, params)
        try:
            res = run_protocol([tr for _, tr in items], model, protocol, seed, threads=args.threads)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_FAILURE) from exc
    out = _out_dir(args)
    lines = ["trajectory,emhd_m,se_m,cpu_time_s"]
    for j, e, s, t in zip(res.scored, res.per_trajectory, res.per_trajectory_se, res.per_trajectory_time):
        lines.append(f"{items[j][0]},{e:.2f},{s:.4f},{t:.3f}")
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "summary.txt").write_text(res.summary() + "\n", encoding="utf-8")
    write_run_echo(out, "eval", {"map": m.map, "goals": m.goals, "params": m.params, "test": test_dir,
                                 "predictions": args.predictions}, seed,
                   {"protocol": protocol.__dict__})
    print(res.summary())
    return EXIT_OK


def _bundle(path) -> tuple[MapBundle, object]:
    m = io.Manifest.load(path)
    grid, goals = _map_and_goals(m)
    train = [tr for _, tr in _trajectories(m.trajectories)] if m.trajectories else []
    test = [tr for _, tr in _trajectories(m.test_trajectories)] if m.test_trajectories else []
    params = io.read_params(m.params) if m.params else None
    return MapBundle(m.name, grid, goals, train, test), params


def cmd_transfer(args) -> int:
    """Train on every --train bundle and evaluate on every --test bundle."""
    seed = _require_seed(args)
    trains, fitted = [], {}
    for p in args.train:
        b, params = _bundle(p)
        if params is not None and not args.retrain:
            fitted[b.name] = params
        elif not b.train:
            raise io.FormatError(p, "bundle has neither 'params' nor 'trajectories' to train on")
        trains.append(b)
    tests = [_bundle(p)[0] for p in (args.test or args.train)]
    for b, p in zip(tests, args.test or args.train):
        if not b.test:
            raise io.FormatError(p, "bundle has no 'test_trajectories'")
    protocol = EvalProtocol(n_samples=args.n) if args.n else EvalProtocol()
    theta0 = io.read_params(args.theta0) if args.theta0 else None
    rows = transfer_eval(trains, tests, protocol, theta0=theta0, rng_seed=seed, trained=fitted,
                         threads=args.threads)
    out = _out_dir(args)
    table = format_table(rows)
    (out / "transfer.csv").write_text(table, encoding="utf-8")
    write_run_echo(out, "transfer", {f"train{i}": p for i, p in enumerate(args.train)}
                   | {f"test{i}": p for i, p in enumerate(args.test or [])}, seed,
                   {"protocol": protocol.__dict__})
    sys.stdout.write(table)
    if all(r.error for r in rows):
        raise CommandError("every (train, test) pair failed", EXIT_FAILURE)
    return EXIT_OK


def cmd_inspect(args) -> int:
    """Human-readable summary of a map, goals and parameters, optionally a Q-table dump."""
    m = _manifest(args)
    m.require("map")
    grid = io.read_map(m.map)
    x0, y0, x1, y1 = grid.bounds
    print(f"map: {grid.width} x {grid.height} cells of {grid.cell_size:g} m, "
          f"extent [{x0:g}, {x1:g}] x [{y0:g}, {y1:g}]")
    counts = np.bincount(grid.labels.ravel(), minlength=len(SemanticClass))
    for cls in SemanticClass:
        print(f"  {cls.name.lower():10s} {counts[cls]:6d}")
    goals = io.read_goals(m.goals) if m.goals else None
    if goals is not None:
        for g in goals:
            print(f"goal {g.id}: ({g.x:.2f}, {g.y:.2f}) radius {g.d:.2f}")
    params = _params(m, required=False)
    if params is not None:
        bad = check_constraints(params)
        print(f"params: C_phi={params.C_phi:g} beta={params.beta:g} alpha={params.alpha:g} eta={params.eta:g} "
              f"gamma={params.gamma:g} N_a={params.n_actions}")
        print("constraints: " + ("all satisfied" if not bad else "; ".join(bad)))
    if args.point is not None:
        psi = feature_vector(grid, args.point)
        print("psi(" + ", ".join(f"{v:g}" for v in args.point) + ") = " + " ".join(f"{v:.4f}" for v in psi))
    if args.qtable:
        if goals is None or params is None:
            raise CommandError("--qtable needs --goals and --params", EXIT_INPUT)
        table = solve_q(grid, params, goals.by_id(args.qtable))
        out = _out_dir(args)
        io.write_qtable(out / f"qtable_{args.qtable}.txt", table)
        write_run_echo(out, "inspect", {"map": m.map, "goals": m.goals, "params": m.params}, None,
                       {"qtable": args.qtable})
        print(f"Q-table for goal {args.qtable}: {table.sweeps} sweeps, residual {table.residual:.3e}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_default: str | None = "out") -> None:
    p.add_argument("--manifest", help="dataset manifest (JSON)")
    p.add_argument("--map", help="semantic map file; overrides the manifest")
    p.add_argument("--goals", help="goals file (JSON); overrides the manifest")
    p.add_argument("--params", help="parameter file (JSON); overrides the manifest")
    p.add_argument("--seed", type=int, help="root random seed (required by sampling commands)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for evaluation (default 1)")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedirl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled trajectories from known parameters")
    _common(p)
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="built-in synthetic map instead of --map/--goals")
    p.add_argument("--theta-star", help="generating parameters (default: --params, else the default init)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--horizon", type=float, default=30.0, help="maximum rollout duration (s)")
    p.add_argument("--noise", type=float, default=0.0, help="position noise standard deviation (m)")
    p.add_argument("--min-goal-distance", type=float, default=6.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit parameters by EM")
    _common(p)
    p.add_argument("--trajectories", help="directory of training trajectories; overrides the manifest")
    p.add_argument("--theta0", help="initial parameters (default: built-in initialization)")
    p.add_argument("--max-iters", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="intent posterior and sampled futures for a partial trajectory")
    _common(p)
    p.add_argument("--partial", required=True, help="observed trajectory file (t,x,y)")
    p.add_argument("-n", "--n", type=int, default=100, help="number of samples")
    p.add_argument("--horizon", type=float, default=5.0, help="prediction horizon (s)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions on test trajectories")
    _common(p)
    p.add_argument("--test", help="directory of test trajectories; overrides the manifest")
    p.add_argument("--predictions", help="directory of external predictions, one subdirectory per test trajectory")
    p.add_argument("-n", "--n", type=int, help="samples per trajectory (default 100)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="train on some bundles, evaluate on others")
    _common(p)
    p.add_argument("--train", nargs="+", required=True, help="training bundle manifests")
    p.add_argument("--test", nargs="+", help="test bundle manifests (default: the training bundles)")
    p.add_argument("--retrain", action="store_true", help="ignore 'params' entries and train anyway")
    p.add_argument("--theta0", help="initial parameters for training")
    p.add_argument("-n", "--n", type=int, help="samples per trajectory (default 100)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("inspect", help="summarize a map, goals and parameters")
    _common(p)
    p.add_argument("--point", type=float, nargs=2, metavar=("X", "Y"), help="print the feature vector at a point")
    p.add_argument("--qtable", metavar="GOAL", help="solve and dump the Q-table for one goal")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
