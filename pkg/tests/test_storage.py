import json
import math

import numpy as np
import pandas as pd
import pytest

from storage import RunDirectory, RunStorage, atomic_write_text, format_cell, frame_to_csv_text


def config(preset="mazebase-small", seed=0):
    return {"preset": preset, "mode": "joint", "seed": seed, "steps": 10}


@pytest.fixture
def storage(tmp_path):
    store = RunStorage(str(tmp_path / "index" / "runs.db"))
    yield store
    store.close()


# --- files ----------------------------------------------------------------------

def test_format_cell():
    assert format_cell(None) == ""
    assert format_cell(True) == "true"
    assert format_cell(0.1) == "0.1"
    assert format_cell(np.float64(1 / 3)) == repr(1 / 3)
    assert format_cell(np.int64(7)) == "7"
    assert format_cell("up") == "up"


def test_frame_to_csv_text_keeps_float_precision():
    frame = pd.DataFrame({"a": [1 / 3, None], "b": ["x", "y"]})
    lines = frame_to_csv_text(frame).splitlines()
    assert lines[0] == "a,b"
    assert float(lines[1].split(",")[0]) == 1 / 3
    assert lines[2] == "nan,y"


def test_atomic_write_creates_directories(tmp_path):
    path = tmp_path / "a" / "b" / "out.txt"
    atomic_write_text(str(path), "hello")
    assert path.read_text() == "hello"
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]


def test_run_directory_layout(tmp_path):
    run = RunDirectory(str(tmp_path / "run")).ensure()
    assert (tmp_path / "run" / "checkpoints").is_dir()
    assert (tmp_path / "run" / "exports").is_dir()
    assert run.checkpoint_path(42).endswith("step_0000042.icf")
    assert run.latest_checkpoint.endswith("latest.icf")
    run.write_json(run.config_path, {"b": 1, "a": [1, 2]})
    assert json.loads((tmp_path / "run" / "config.json").read_text()) == {"a": [1, 2], "b": 1}


def test_metrics_round_trip(tmp_path):
    run = RunDirectory(str(tmp_path / "run")).ensure()
    rows = [{"step": s, "selectivity": 0.1 * s, "mb_loss": None} for s in (1, 2)]
    run.write_metrics(rows, ["step", "selectivity", "mb_loss"])
    frame = run.read_metrics()
    assert list(frame.columns) == ["step", "selectivity", "mb_loss"]
    assert frame["selectivity"].tolist() == [0.1, 0.2]
    assert frame["mb_loss"].isna().all()


def test_metrics_truncated_on_resume(tmp_path):
    run = RunDirectory(str(tmp_path / "run")).ensure()
    columns = ["step", "loss"]
    run.write_metrics([{"step": s, "loss": float(s)} for s in range(1, 5)], columns)
    run.write_metrics([{"step": 3, "loss": 30.0}, {"step": 4, "loss": 40.0}], columns, keep_until_step=2)
    frame = run.read_metrics()
    assert frame["step"].tolist() == [1, 2, 3, 4]
    assert frame["loss"].tolist() == [1.0, 2.0, 30.0, 40.0]


def test_read_metrics_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunDirectory(str(tmp_path / "nothing")).read_metrics()


# --- index ----------------------------------------------------------------------

def test_save_and_load_run(storage, tmp_path):
    run_id = storage.save_run(config(seed=3), str(tmp_path / "run"))
    run = storage.load_run(run_id)
    assert run["status"] == "running"
    assert run["seed"] == 3
    assert run["config"]["steps"] == 10
    assert storage.find_run_by_dir(str(tmp_path / "run")) == run_id
    assert storage.find_run_by_dir(str(tmp_path / "other")) is None


def test_update_run(storage, tmp_path):
    run_id = storage.save_run(config(), str(tmp_path / "run"))
    storage.update_run(run_id, "completed", {"steps_completed": 10, "final_selectivity": 0.4, "dv_bound": 0.3})
    run = storage.load_run(run_id)
    assert (run["status"], run["steps_completed"], run["final_selectivity"]) == ("completed", 10, 0.4)
    with pytest.raises(FileNotFoundError):
        storage.update_run("run_missing", "completed")


def test_list_and_history(storage, tmp_path):
    first = storage.save_run(config(), str(tmp_path / "a"), run_id="run_a")
    second = storage.save_run(config(), str(tmp_path / "b"), status="completed", run_id="run_b")
    assert set(storage.list_runs()) == {first, second}
    assert storage.list_runs(status="completed") == ["run_b"]
    assert len(storage.list_runs(limit=1)) == 1
    assert len(storage.get_run_history(limit=5)) == 2
    assert storage.get_latest_run()["run_id"] in {"run_a", "run_b"}


def test_latest_run_of_empty_index(storage):
    assert storage.get_latest_run() is None
    assert storage.get_run_history() == []


def test_evaluations(storage, tmp_path):
    run_id = storage.save_run(config(), str(tmp_path / "run"))
    storage.record_evaluation(run_id, "eval", {"cluster": {"ratio": 0.1}})
    storage.record_evaluation(run_id, "eval", {"cluster": {"ratio": 0.05}})
    evaluations = storage.get_evaluations_for_run(run_id)
    assert [e["report"]["cluster"]["ratio"] for e in evaluations] == [0.1, 0.05]
    assert all(e["kind"] == "eval" for e in evaluations)


def test_statistics(storage, tmp_path):
    a = storage.save_run(config(), str(tmp_path / "a"), run_id="run_a")
    b = storage.save_run(config("two-digit-grid"), str(tmp_path / "b"), run_id="run_b")
    storage.save_run(config(), str(tmp_path / "c"), run_id="run_c", status="aborted")
    storage.update_run(a, "completed", {"final_selectivity": 0.2})
    storage.update_run(b, "completed", {"final_selectivity": 0.4})
    stats = storage.get_run_statistics()
    assert stats["total_runs"] == 3
    assert stats["status_counts"] == {"completed": 2, "aborted": 1}
    assert stats["preset_counts"] == {"mazebase-small": 2, "two-digit-grid": 1}
    assert math.isclose(stats["avg_final_selectivity"], 0.3)


def test_delete_run(storage, tmp_path):
    run_id = storage.save_run(config(), str(tmp_path / "run"))
    storage.record_evaluation(run_id, "eval", {})
    storage.delete_run(run_id)
    assert storage.list_runs() == []
    assert storage.get_evaluations_for_run(run_id) == []
    with pytest.raises(FileNotFoundError):
        storage.load_run(run_id)
