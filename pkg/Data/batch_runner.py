import os
import glob
import subprocess
import re
import json
import sys

import pandas as pd

# Set UTF-8 encoding for Windows compatibility
if os.name == 'nt':  # Windows
    import io
    if sys.stdout.encoding != 'utf-8':
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

# ================= CONFIGURATION =================
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))  # This is Project/Data/
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)               # This is Project/

CLI_SCRIPT = os.path.join(PROJECT_ROOT, "Product", "main.py")
CONFIG_DIR = os.path.join(CURRENT_DIR, "batch_configs")
RUNS_DIR = os.path.join(PROJECT_ROOT, "Results", "runs")
TRACKING_DIR = os.path.join(PROJECT_ROOT, "Results", "tracking_logs")

# Seeds that must pass a gate for an experiment to count as reproduced
MIN_PASSING_SEEDS = 2

# ================= REGEX PATTERNS =================
# Matches: "🔄 step 500/50000 selectivity=0.1234 dv_bound=0.1100 total_loss=..."
REGEX_PROGRESS = re.compile(r"step\s+(\d+)/(\d+)\s+selectivity=(-?[\d\.eE+-]+)\s+dv_bound=(-?[\d\.eE+-]+)")


def ensure_dirs():
    os.makedirs(RUNS_DIR, exist_ok=True)
    os.makedirs(TRACKING_DIR, exist_ok=True)


def run_cli(args):
    """Run the CLI in a subprocess and stream its progress lines"""
    command = [sys.executable, CLI_SCRIPT, "--no-index"] + args
    process = subprocess.Popen(
        command, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        text=True, encoding="utf-8", errors="replace",
    )
    progress = []
    for line in iter(process.stdout.readline, ''):
        line = line.strip()
        match = REGEX_PROGRESS.search(line)
        if match:
            progress.append({
                "step": int(match.group(1)),
                "selectivity": float(match.group(3)),
                "dv_bound": float(match.group(4)),
            })
        if line.startswith(("✅", "❌", "⚠️")):
            print(f"      {line}")
    process.wait()
    return process.returncode, progress


def run_batch():
    ensure_dirs()

    config_files = sorted(glob.glob(os.path.join(CONFIG_DIR, "*.json")))
    if not config_files:
        print(f"❌ No JSON files found in {CONFIG_DIR}")
        print("   Please run generate_configs.py first.")
        return []

    print(f"Found {len(config_files)} configs in {CONFIG_DIR}")
    print("=" * 60)

    summary = []
    for i, config_path in enumerate(config_files):
        name = os.path.splitext(os.path.basename(config_path))[0]
        run_dir = os.path.join(RUNS_DIR, name)
        print(f"[{i + 1}/{len(config_files)}] Training: {name}")

        code, progress = run_cli(["train", "--config", config_path, "--out", run_dir])
        with open(os.path.join(TRACKING_DIR, f"{name}_log.json"), "w", encoding="utf-8") as f:
            json.dump({"name": name, "exit_code": code, "checkpoints": progress}, f, indent=2)

        entry = {"name": name, "train_exit_code": code}
        if code == 0:
            print(f"   ... Evaluating {name}")
            ckpt = os.path.join(run_dir, "checkpoints", "latest.icf")
            eval_code, _ = run_cli(["eval", "--ckpt", ckpt])
            entry["eval_exit_code"] = eval_code
            report_path = os.path.join(run_dir, "exports", "eval_report.json")
            if eval_code == 0 and os.path.exists(report_path):
                with open(report_path, "r", encoding="utf-8") as f:
                    report = json.load(f)
                for gate in report.get("gates", []):
                    entry[gate["gate"]] = gate["passed"]
        summary.append(entry)

    df = pd.DataFrame(summary)
    csv_path = os.path.join(TRACKING_DIR, "batch_summary.csv")
    df.to_csv(csv_path, index=False)
    print(f"📄 Saved: {csv_path}")
    report_reproduction(df)
    return summary


def report_reproduction(df):
    """Per experiment and gate: how many seeds passed"""
    if df.empty:
        return
    df = df.copy()
    df["experiment"] = df["name"].str.replace(r"_seed\d+$", "", regex=True)
    gate_columns = [c for c in df.columns if c.startswith("G")]
    print("\n" + "=" * 60)
    print("REPRODUCTION SUMMARY")
    print("=" * 60)
    for experiment, group in df.groupby("experiment"):
        for gate in gate_columns:
            results = group[gate].dropna()
            if results.empty:
                continue
            passed = int(results.astype(bool).sum())
            icon = "✅" if passed >= min(MIN_PASSING_SEEDS, len(results)) else "❌"
            print(f"{icon} {experiment} {gate}: {passed}/{len(results)} seeds")
    print("=" * 60)


if __name__ == "__main__":
    run_batch()
