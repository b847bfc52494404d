import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pedirl import io
from pedirl.cli import EXIT_FAILURE, EXIT_INPUT, EXIT_OK, main
from pedirl.inference import Trajectory
from pedirl.reward_model import Goal, check_constraints
from pedirl.semantic_map import grid_from_strings

from conftest import make_theta_star


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def toy(tmp_path):
    """A 7 m x 5 m sidewalk plaza with one goal, written as a manifest bundle."""
    d = tmp_path / "toy"
    io.write_map(d / "map.txt", grid_from_strings(["#" * 14] + ["s" * 14] * 8 + ["#" * 14]))
    io.write_goals(d / "goals.json", [Goal("exit", 6.0, 2.5, 0.75)])
    io.write_params(d / "theta.json", make_theta_star())
    (d / "manifest.json").write_text(json.dumps({"map": "map.txt", "goals": "goals.json", "params": "theta.json",
                                                 "seed": 4}))
    return d


def synth(toy, out, count=5, seed=1):
    return main(["synth", "--manifest", str(toy / "manifest.json"), "--count", str(count), "--seed", str(seed),
                 "--min-goal-distance", "3", "--horizon", "10", "--out", str(out)])


class TestSynth:
    def test_count(self, toy, tmp_path):
        assert synth(toy, tmp_path / "s") == EXIT_OK
        files = sorted((tmp_path / "s" / "trajectories").glob("*.csv"))
        assert len(files) == 5
        labels = io.read_labels(tmp_path / "s" / "labels.csv")
        assert sorted(labels) == [f.stem for f in files] and set(labels.values()) == {"exit"}
        assert (tmp_path / "s" / "run.json").is_file()

    def test_missing_map(self, toy, tmp_path, capsys):
        (toy / "map.txt").unlink()
        assert synth(toy, tmp_path / "s") == EXIT_INPUT
        assert str(toy / "map.txt") in capsys.readouterr().err

    def test_malformed_map_names_line(self, toy, tmp_path, capsys):
        text = (toy / "map.txt").read_text().splitlines()
        text[3] = text[3][:-1] + "x"
        (toy / "map.txt").write_text("\n".join(text) + "\n")
        assert synth(toy, tmp_path / "s") == EXIT_INPUT
        assert "map.txt:4" in capsys.readouterr().err

    def test_byte_identical_reruns(self, toy, tmp_path):
        synth(toy, tmp_path / "a")
        synth(toy, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_seed_required(self, toy, tmp_path, capsys):
        (toy / "manifest.json").write_text(json.dumps({"map": "map.txt", "goals": "goals.json"}))
        rc = main(["synth", "--manifest", str(toy / "manifest.json"), "--count", "1", "--out", str(tmp_path / "s")])
        assert rc == EXIT_INPUT and "seed" in capsys.readouterr().err

    def test_scenario(self, tmp_path):
        rc = main(["synth", "--scenario", "mirror", "--count", "2", "--seed", "3", "--horizon", "2",
                   "--out", str(tmp_path / "m")])
        assert rc == EXIT_OK and len(list((tmp_path / "m" / "trajectories").glob("*.csv"))) == 2

    def test_infeasible_theta_star(self, toy, tmp_path):
        io.write_params(toy / "theta.json", make_theta_star(eta=-1.0))
        assert synth(toy, tmp_path / "s") == EXIT_FAILURE


@pytest.fixture
def synthesized(toy, tmp_path):
    synth(toy, tmp_path / "data")
    return tmp_path / "data"


def train(data, out, iters=2):
    return main(["train", "--manifest", str(data / "manifest.json"), "--max-iters", str(iters), "--out", str(out)])


class TestTrain:
    def test_feasible(self, synthesized, tmp_path):
        assert train(synthesized, tmp_path / "fit") == EXIT_OK
        theta = io.read_params(tmp_path / "fit" / "params.json")
        assert check_constraints(theta) == []
        report = json.loads((tmp_path / "fit" / "fit_report.json").read_text())
        assert len(report["trajectories"]) == 5 and report["iterations"] <= 2

    def test_rerun_identical(self, synthesized, tmp_path):
        train(synthesized, tmp_path / "a")
        train(synthesized, tmp_path / "b")
        assert (tmp_path / "a" / "params.json").read_bytes() == (tmp_path / "b" / "params.json").read_bytes()

    def test_empty_dir(self, synthesized, tmp_path):
        for f in (synthesized / "trajectories").glob("*.csv"):
            f.unlink()
        assert train(synthesized, tmp_path / "fit") == EXIT_INPUT

    def test_inputs_untouched(self, synthesized, tmp_path):
        before = tree_bytes(synthesized)
        train(synthesized, tmp_path / "fit", iters=1)
        assert tree_bytes(synthesized) == before

    def test_em_failure_exit_code(self, synthesized, tmp_path, monkeypatch, capsys):
        import pedirl.cli as cli
        from pedirl.learning import EMError

        def failing(*a, **k):
            raise EMError("solver diverged", 2)

        monkeypatch.setattr(cli, "em_train", failing)
        assert train(synthesized, tmp_path / "fit") == EXIT_FAILURE
        assert "iteration 2" in capsys.readouterr().err


class TestPredict:
    def test_posterior_and_samples(self, toy, tmp_path):
        io.write_trajectory(tmp_path / "p.csv", Trajectory([0, 0.5, 1.0], [[1.0, 2.5], [1.7, 2.5], [2.4, 2.5]]))
        rc = main(["predict", "--manifest", str(toy / "manifest.json"), "--partial", str(tmp_path / "p.csv"),
                   "-n", "7", "--out", str(tmp_path / "pr")])
        assert rc == EXIT_OK
        post = json.loads((tmp_path / "pr" / "posterior.json").read_text())["posterior"]
        assert abs(sum(post.values()) - 1.0) <= 1e-12
        samples = io.read_trajectory_dir(tmp_path / "pr" / "samples")
        assert len(samples) == 7
        assert all(np.array_equal(s.xy[0], [2.4, 2.5]) for _, s in samples)
        echo = json.loads((tmp_path / "pr" / "run.json").read_text())
        assert echo["seed"] == 4 and echo["command"] == "predict"

    def test_malformed_partial(self, toy, tmp_path):
        (tmp_path / "p.csv").write_text("t,x,y\n0,1,1\n0.5,oops,1\n")
        rc = main(["predict", "--manifest", str(toy / "manifest.json"), "--partial", str(tmp_path / "p.csv"),
                   "--out", str(tmp_path / "pr")])
        assert rc == EXIT_INPUT


class TestEval:
    def test_oracle_predictions_score_zero(self, synthesized, tmp_path):
        items = io.read_trajectory_dir(synthesized / "trajectories")
        preds = tmp_path / "preds"
        for name, tr in items:
            future = tr.t > tr.t[0] + 2.5 + 1e-9
            for k in range(3):
                io.write_trajectory(preds / name / f"s{k}.csv", Trajectory(tr.t[future][:10], tr.xy[future][:10])
                                    if future.sum() >= 2 else tr)
        rc = main(["eval", "--manifest", str(synthesized / "manifest.json"), "--test",
                   str(synthesized / "trajectories"), "--predictions", str(preds), "--out", str(tmp_path / "ev")])
        assert rc == EXIT_OK
        rows = (tmp_path / "ev" / "eval.csv").read_text().splitlines()[1:]
        assert rows and all(r.split(",")[1] == "0.00" for r in rows)
        assert "mean EMHD (m): 0.00" in (tmp_path / "ev" / "summary.txt").read_text()

    def test_model_eval(self, synthesized, toy, tmp_path):
        rc = main(["eval", "--manifest", str(synthesized / "manifest.json"), "--params", str(toy / "theta.json"),
                   "--test", str(synthesized / "trajectories"), "-n", "5", "--seed", "2",
                   "--out", str(tmp_path / "ev")])
        assert rc == EXIT_OK
        assert len((tmp_path / "ev" / "eval.csv").read_text().splitlines()) >= 2


class TestTransfer:
    def test_single_diagonal_row(self, synthesized, toy, tmp_path):
        bundle = tmp_path / "bundle.json"
        bundle.write_text(json.dumps({"name": "A", "map": str(synthesized / "map.txt"),
                                      "goals": str(synthesized / "goals.json"), "params": str(toy / "theta.json"),
                                      "test_trajectories": str(synthesized / "trajectories")}))
        rc = main(["transfer", "--train", str(bundle), "-n", "3", "--seed", "1", "--out", str(tmp_path / "tr")])
        assert rc == EXIT_OK
        lines = (tmp_path / "tr" / "transfer.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("A,A,")


class TestInspect:
    def test_summary(self, toy, capsys):
        rc = main(["inspect", "--manifest", str(toy / "manifest.json"), "--point", "3.1", "2.2"])
        out = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "map: 14 x 10 cells" in out and "constraints: all satisfied" in out and "psi(3.1, 2.2)" in out

    def test_qtable(self, toy, tmp_path):
        rc = main(["inspect", "--manifest", str(toy / "manifest.json"), "--qtable", "exit",
                   "--out", str(tmp_path / "q")])
        assert rc == EXIT_OK and (tmp_path / "q" / "qtable_exit.txt").is_file()


def test_bad_arguments():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--count", "notanumber"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pedirl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
