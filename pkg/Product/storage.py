import sqlite3
import json
import os
import sys
import tempfile
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config


def atomic_write_bytes(path: str, payload: bytes):
    """Write to a temp file in the target directory, then rename over `path`"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_cell(value: Any) -> str:
    """CSV cell text; floats use repr so files are bit-reproducible, None is blank"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):
        return format_cell(value.item())
    return str(value)


def frame_to_csv_text(frame: pd.DataFrame) -> str:
    text_frame = frame.apply(lambda col: col.map(format_cell)) if len(frame) else frame
    return text_frame.to_csv(index=False, lineterminator="\n")


class RunDirectory:
    """
    Artifacts of one run:

        config.json
        checkpoints/step_XXXXXXX.icf, checkpoints/latest.icf
        metrics.csv
        exports/  (CSVs, PPMs, plan and report JSONs)
    """

    def __init__(self, root: str):
        self.root = root
        self.checkpoints = os.path.join(root, "checkpoints")
        self.exports = os.path.join(root, "exports")

    def ensure(self) -> "RunDirectory":
        os.makedirs(self.checkpoints, exist_ok=True)
        os.makedirs(self.exports, exist_ok=True)
        return self

    @property
    def config_path(self) -> str:
        return os.path.join(self.root, "config.json")

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.root, "metrics.csv")

    @property
    def latest_checkpoint(self) -> str:
        return os.path.join(self.checkpoints, "latest.icf")

    def checkpoint_path(self, step: int) -> str:
        return os.path.join(self.checkpoints, f"step_{step:07d}.icf")

    def export_path(self, name: str) -> str:
        return os.path.join(self.exports, name)

    def write_bytes(self, path: str, payload: bytes) -> str:
        atomic_write_bytes(path, payload)
        return path

    def write_json(self, path: str, data: Any) -> str:
        atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, path: str, frame: pd.DataFrame) -> str:
        atomic_write_text(path, frame_to_csv_text(frame))
        return path

    def write_metrics(self, rows: Sequence[Dict[str, Any]], columns: Sequence[str],
                      keep_until_step: Optional[int] = None) -> str:
        """
        Write metrics.csv; with keep_until_step, rows of an existing file up to
        that step are kept and the new rows appended after them
        """
        new = pd.DataFrame([{c: format_cell(r.get(c)) for c in columns} for r in rows], columns=list(columns))
        if keep_until_step is not None and os.path.exists(self.metrics_path):
            old = pd.read_csv(self.metrics_path, dtype=str, keep_default_na=False)
            old = old[old["step"].astype(int) <= keep_until_step]
            new = pd.concat([old.reindex(columns=list(columns), fill_value=""), new], ignore_index=True)
        atomic_write_text(self.metrics_path, new.to_csv(index=False, lineterminator="\n"))
        return self.metrics_path

    def read_metrics(self) -> pd.DataFrame:
        if not os.path.exists(self.metrics_path):
            raise FileNotFoundError(f"no metrics.csv in {self.root}")
        return pd.read_csv(self.metrics_path)


class RunDatabase:
    """SQLite index of training runs and their evaluations"""

    def __init__(self, db_path: str = "icf_runs.db"):
        self.db_path = db_path
        self.conn = None
        self.init_database()

    def init_database(self):
        """Create all tables if they don't exist"""
        self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row

        cursor = self.conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                timestamp TEXT NOT NULL,
                preset TEXT NOT NULL,
                mode TEXT NOT NULL,
                seed INTEGER NOT NULL,
                status TEXT NOT NULL,
                steps_completed INTEGER DEFAULT 0,
                final_selectivity REAL,
                dv_bound REAL,
                run_dir TEXT NOT NULL,
                config_json TEXT NOT NULL,
                created_at TEXT DEFAULT CURRENT_TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS evaluations (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                timestamp TEXT NOT NULL,
                kind TEXT NOT NULL,
                report_json TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        ''')

        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_timestamp ON runs(timestamp DESC)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_status ON runs(status)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_evaluations_run ON evaluations(run_id)')

        self.conn.commit()

    def close(self):
        """Close database connection"""
        if self.conn:
            self.conn.close()
            self.conn = None

    def __del__(self):
        self.close()


class RunStorage:
    """Persistent index of runs (the artifacts themselves live in run directories)"""

    def __init__(self, db_path: str = None):
        """
        Args:
            db_path: SQLite file (default: Config.STORAGE_DB)
        """
        if db_path is None:
            db_path = Config.STORAGE_DB

        db_dir = os.path.dirname(db_path)
        if db_dir and not os.path.exists(db_dir):
            os.makedirs(db_dir, exist_ok=True)

        self.db = RunDatabase(db_path)

    def save_run(
        self,
        config: Dict[str, Any],
        run_dir: str,
        status: str = "running",
        summary: Optional[Dict[str, Any]] = None,
        run_id: str = None,
    ) -> str:
        """
        Insert or replace a run entry

        Args:
            config: TrainConfig as a JSON-ready dict
            run_dir: run directory path
            status: running | completed | aborted
            summary: optional steps_completed / final_selectivity / dv_bound
            run_id: optional run ID (generated if not provided)

        Returns:
            Run ID
        """
        if not run_id:
            run_id = f"run_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}"
        summary = summary or {}

        cursor = self.db.conn.cursor()
        cursor.execute('''
            INSERT OR REPLACE INTO runs
            (run_id, timestamp, preset, mode, seed, status, steps_completed,
             final_selectivity, dv_bound, run_dir, config_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            run_id,
            datetime.now().isoformat(),
            config["preset"],
            config.get("mode", "joint"),
            int(config.get("seed", 0)),
            status,
            int(summary.get("steps_completed", 0)),
            summary.get("final_selectivity"),
            summary.get("dv_bound"),
            os.path.abspath(run_dir),
            json.dumps(config, sort_keys=True),
        ))
        self.db.conn.commit()
        return run_id

    def update_run(self, run_id: str, status: str, summary: Optional[Dict[str, Any]] = None):
        summary = summary or {}
        cursor = self.db.conn.cursor()
        cursor.execute('''
            UPDATE runs
            SET status = ?, steps_completed = ?, final_selectivity = ?, dv_bound = ?
            WHERE run_id = ?
        ''', (
            status,
            int(summary.get("steps_completed", 0)),
            summary.get("final_selectivity"),
            summary.get("dv_bound"),
            run_id,
        ))
        if cursor.rowcount == 0:
            raise FileNotFoundError(f"Run {run_id} not found in database")
        self.db.conn.commit()

    def find_run_by_dir(self, run_dir: str) -> Optional[str]:
        cursor = self.db.conn.cursor()
        cursor.execute('''
            SELECT run_id FROM runs WHERE run_dir = ?
            ORDER BY timestamp DESC LIMIT 1
        ''', (os.path.abspath(run_dir),))
        row = cursor.fetchone()
        return row["run_id"] if row else None

    def record_evaluation(self, run_id: str, kind: str, report: Dict[str, Any]) -> int:
        cursor = self.db.conn.cursor()
        cursor.execute('''
            INSERT INTO evaluations (run_id, timestamp, kind, report_json)
            VALUES (?, ?, ?, ?)
        ''', (run_id, datetime.now().isoformat(), kind, json.dumps(report, sort_keys=True)))
        self.db.conn.commit()
        return cursor.lastrowid

    def load_run(self, run_id: str) -> Dict[str, Any]:
        """
        Load a run by ID

        Returns:
            Run summary with the parsed config
        """
        cursor = self.db.conn.cursor()
        cursor.execute('SELECT * FROM runs WHERE run_id = ?', (run_id,))

        row = cursor.fetchone()
        if not row:
            raise FileNotFoundError(f"Run {run_id} not found in database")

        run = dict(row)
        run["config"] = json.loads(run.pop("config_json"))
        return run

    def list_runs(self, limit: int = None, status: str = None) -> List[str]:
        """
        List saved run IDs, newest first

        Args:
            limit: Maximum number of runs to return
            status: Filter by status (running, completed, aborted)
        """
        cursor = self.db.conn.cursor()

        query = 'SELECT run_id FROM runs'
        params = []

        if status:
            query += ' WHERE status = ?'
            params.append(status)

        query += ' ORDER BY timestamp DESC'

        if limit:
            query += ' LIMIT ?'
            params.append(limit)

        cursor.execute(query, params)
        return [row['run_id'] for row in cursor.fetchall()]

    def get_latest_run(self) -> Optional[Dict[str, Any]]:
        runs = self.list_runs(limit=1)
        if not runs:
            return None
        return self.load_run(runs[0])

    def get_run_history(self, limit: int = 10) -> List[Dict[str, Any]]:
        cursor = self.db.conn.cursor()
        cursor.execute('''
            SELECT run_id, timestamp, preset, mode, seed, status,
                   steps_completed, final_selectivity, dv_bound, run_dir
            FROM runs
            ORDER BY timestamp DESC
            LIMIT ?
        ''', (limit,))

        return [dict(row) for row in cursor.fetchall()]

    def get_evaluations_for_run(self, run_id: str) -> List[Dict[str, Any]]:
        cursor = self.db.conn.cursor()
        cursor.execute('''
            SELECT id, run_id, timestamp, kind, report_json FROM evaluations
            WHERE run_id = ?
            ORDER BY id
        ''', (run_id,))

        evaluations = []
        for row in cursor.fetchall():
            entry = dict(row)
            entry["report"] = json.loads(entry.pop("report_json"))
            evaluations.append(entry)
        return evaluations

    def get_run_statistics(self) -> Dict[str, Any]:
        """Counts per status and preset plus mean final selectivity of completed runs"""
        cursor = self.db.conn.cursor()

        cursor.execute('SELECT COUNT(*) as total FROM runs')
        total_runs = cursor.fetchone()['total']

        cursor.execute('''
            SELECT status, COUNT(*) as count
            FROM runs
            GROUP BY status
        ''')
        status_counts = {row['status']: row['count'] for row in cursor.fetchall()}

        cursor.execute('''
            SELECT preset, COUNT(*) as count
            FROM runs
            GROUP BY preset
        ''')
        preset_counts = {row['preset']: row['count'] for row in cursor.fetchall()}

        cursor.execute('''
            SELECT AVG(final_selectivity) as avg_selectivity
            FROM runs
            WHERE status = 'completed'
        ''')
        avg_selectivity = cursor.fetchone()['avg_selectivity'] or 0

        return {
            'total_runs': total_runs,
            'status_counts': status_counts,
            'preset_counts': preset_counts,
            'avg_final_selectivity': round(avg_selectivity, 4),
        }

    def delete_run(self, run_id: str):
        """Remove a run and its evaluations from the index (files are left alone)"""
        cursor = self.db.conn.cursor()

        cursor.execute('DELETE FROM evaluations WHERE run_id = ?', (run_id,))
        cursor.execute('DELETE FROM runs WHERE run_id = ?', (run_id,))

        self.db.conn.commit()
        print(f"🗑️  Deleted run {run_id}")

    def close(self):
        self.db.close()
