import json
import os

import pytest

import pipeline
from errors import NumericalAbort
from main import EXIT_ERROR, EXIT_NUMERICAL_ABORT, EXIT_OK, main, parse_cell
from storage import RunDirectory, RunStorage

TINY = ["--set", "n_pool=8", "--set", "model.hidden=8"]


def run_cli(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    return excinfo.value.code


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "run"
    code = run_cli(["--no-index", "train", "--preset", "mazebase-small", "--steps", "3",
                    "--seed", "1", "--out", str(out)] + TINY)
    assert code == EXIT_OK
    return out


def test_parse_cell():
    assert parse_cell("2,3") == (2, 3)
    for bad in ("2", "a,b", "1,2,3"):
        with pytest.raises(Exception):
            parse_cell(bad)


def test_train_writes_run_directory(trained_run):
    assert sorted(os.listdir(trained_run)) == ["checkpoints", "config.json", "exports", "metrics.csv"]
    assert sorted(os.listdir(trained_run / "checkpoints")) == ["latest.icf", "step_0000003.icf"]
    config = json.loads((trained_run / "config.json").read_text())
    assert config["seed"] == 1 and config["n_pool"] == 8
    assert RunDirectory(str(trained_run)).read_metrics()["step"].tolist() == [1, 2, 3]


def test_resume_continues_step_numbering(trained_run, tmp_path):
    out = tmp_path / "resumed"
    ckpt = trained_run / "checkpoints" / "step_0000003.icf"
    assert run_cli(["--no-index", "train", "--resume", str(ckpt), "--steps", "5", "--out", str(out)]) == EXIT_OK
    assert RunDirectory(str(out)).read_metrics()["step"].tolist() == [4, 5]


def test_train_indexes_run(tmp_path):
    db = tmp_path / "runs.db"
    out = tmp_path / "run"
    assert run_cli(["--db", str(db), "train", "--preset", "mazebase-small", "--steps", "2",
                    "--out", str(out)] + TINY) == EXIT_OK
    storage = RunStorage(str(db))
    run = storage.get_latest_run()
    assert run["status"] == "completed"
    assert run["steps_completed"] == 2
    storage.close()


def test_eval_writes_exports(trained_run, tmp_path):
    out = tmp_path / "exports"
    code = run_cli(["--no-index", "eval", "--ckpt", str(trained_run / "checkpoints" / "latest.icf"),
                    "--variations", "60", "--out", str(out)])
    assert code == EXIT_OK
    names = set(os.listdir(out))
    assert {"variations.csv", "latent_grid.csv", "feature_recovery.csv", "cluster_report.json",
            "policy_table.csv", "eval_report.json"} <= names
    report = json.loads((out / "eval_report.json").read_text())
    assert report["step"] == 3
    assert report["variations"] == 60
    assert isinstance(report["gates"], list)


def test_eval_preset_mismatch_exits_one(trained_run, capsys):
    code = run_cli(["--no-index", "eval", "--ckpt", str(trained_run / "checkpoints" / "latest.icf"),
                    "--preset", "two-digit-grid", "--variations", "10"])
    assert code == EXIT_ERROR
    assert "does not match" in capsys.readouterr().out


def test_plan_prints_and_writes_json(trained_run, tmp_path, capsys):
    out = tmp_path / "plan.json"
    code = run_cli(["--no-index", "plan", "--ckpt", str(trained_run / "checkpoints" / "latest.icf"),
                    "--start", "0,0", "--goal", "2,1", "--execute", "--variations", "200", "--out", str(out)])
    assert code == EXIT_OK
    plan = json.loads(out.read_text())
    assert plan["start"] == [0, 0] and plan["goal"] == [2, 1]
    assert set(plan["execution"]) == {"executed", "remaining", "final_cell", "reached"}
    assert len(plan["predictions"]) == len(plan["labels"]) + 1
    for k, path in enumerate(plan["predictions"]):
        assert path == str(tmp_path / f"predicted_{k}.ppm")
        assert (tmp_path / f"predicted_{k}.ppm").read_bytes().startswith(b"P6\n")
    assert '"labels"' in capsys.readouterr().out


def test_plan_to_blocked_cell_exits_one(trained_run):
    code = run_cli(["--no-index", "plan", "--ckpt", str(trained_run / "checkpoints" / "latest.icf"),
                    "--start", "0,0", "--goal", "5,2"])
    assert code == EXIT_ERROR


def test_render_writes_three_images(trained_run):
    code = run_cli(["--no-index", "render", "--ckpt", str(trained_run / "checkpoints" / "latest.icf"),
                    "--state", "1,1"])
    assert code == EXIT_OK
    exports = trained_run / "exports"
    for name in ("render_1_1.ppm", "render_1_1_observation.ppm", "render_1_1_reconstruction.ppm"):
        assert (exports / name).read_bytes().startswith(b"P6\n")


def test_config_errors_exit_one(tmp_path, capsys):
    assert run_cli(["--no-index", "train", "--out", str(tmp_path / "r")]) == EXIT_ERROR
    assert "preset" in capsys.readouterr().out
    assert run_cli(["--no-index", "train", "--preset", "mazebase-small", "--set", "n_pool=1",
                    "--out", str(tmp_path / "r")]) == EXIT_ERROR
    assert run_cli(["--no-index", "train", "--preset", "mazebase-small", "--set", "nonsense",
                    "--out", str(tmp_path / "r")]) == EXIT_ERROR


def test_config_file_and_flags(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"preset": "mazebase-small", "steps": 1, "n_pool": 8, "model": {"hidden": 4}}))
    out = tmp_path / "run"
    assert run_cli(["--no-index", "train", "--config", str(path), "--seed", "9", "--out", str(out)]) == EXIT_OK
    config = json.loads((out / "config.json").read_text())
    assert (config["seed"], config["steps"], config["model"]["hidden"]) == (9, 1, 4)


def test_usage_errors_exit_one():
    assert run_cli(["frobnicate"]) == EXIT_ERROR
    assert run_cli(["--no-index", "eval"]) == EXIT_ERROR


def test_missing_checkpoint_exits_one(tmp_path):
    assert run_cli(["--no-index", "eval", "--ckpt", str(tmp_path / "nope.icf")]) == EXIT_ERROR


def test_numerical_abort_exits_two(tmp_path, monkeypatch):
    def explode(self, on_step=None, steps=None):
        raise NumericalAbort("loss is nan", {"step": 1, "total_loss": float("nan")})

    monkeypatch.setattr(pipeline.Trainer, "train", explode)
    out = tmp_path / "run"
    code = run_cli(["--no-index", "train", "--preset", "mazebase-small", "--out", str(out)] + TINY)
    assert code == EXIT_NUMERICAL_ABORT
    assert (out / "metrics.csv").exists()


def test_list_and_stats(tmp_path, capsys):
    db = str(tmp_path / "runs.db")
    assert run_cli(["--db", db, "list"]) == EXIT_OK
    assert "No runs saved yet." in capsys.readouterr().out
    storage = RunStorage(db)
    storage.save_run({"preset": "mazebase-small", "mode": "joint", "seed": 0}, str(tmp_path / "r"), run_id="run_x")
    storage.close()
    assert run_cli(["--db", db, "list"]) == EXIT_OK
    assert "run_x" in capsys.readouterr().out
    assert run_cli(["--db", db, "stats"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["total_runs"] == 1
