import os
import glob
import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from scipy import interpolate

# ================= CONFIGURATION =================
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)

RUNS_DIR = os.path.join(PROJECT_ROOT, "Results", "runs")
PLOTS_DIR = os.path.join(PROJECT_ROOT, "Results", "plots")

# Columns of metrics.csv to aggregate
METRICS = ("selectivity", "dv_bound")

# Rolling window applied to the noisy per-step selectivity before interpolating
SMOOTHING = 50


def load_metrics(runs_dir, pattern="*"):
    all_data = []
    for run_dir in sorted(glob.glob(os.path.join(runs_dir, pattern))):
        path = os.path.join(run_dir, "metrics.csv")
        name = os.path.basename(run_dir)
        if os.path.exists(path):
            df = pd.read_csv(path)
            all_data.append({"name": name, "metrics": df})
            print(f"  ✓ Loaded: {name} ({len(df)} steps)")
        else:
            print(f"  ⚠ Missing: {name}/metrics.csv")
    return all_data


def interpolate_to_common_steps(all_data, column, num_points=100, smoothing=SMOOTHING):
    if not all_data:
        return None, None, []

    max_steps = [data["metrics"]["step"].max() for data in all_data if len(data["metrics"]) >= 2]
    if not max_steps:
        return None, None, []

    common_steps = np.linspace(1, np.median(max_steps), num_points)
    interpolated_values = []
    valid_runs = []

    for data in all_data:
        df = data["metrics"].dropna(subset=[column])
        if len(df) < 2:
            continue
        steps = df["step"].to_numpy(dtype=np.float64)
        values = df[column].rolling(smoothing, min_periods=1).mean().to_numpy()
        try:
            f = interpolate.interp1d(
                steps, values,
                kind="linear",
                bounds_error=False,
                fill_value=(values[0], values[-1]),
            )
            interpolated_values.append(f(common_steps))
            valid_runs.append(data["name"])
        except ValueError as e:
            print(f"  ⚠ Error interpolating {data['name']}: {e}")

    if not interpolated_values:
        return None, None, []

    return common_steps, np.array(interpolated_values), valid_runs


def compute_statistics(interpolated_values):
    mean = np.mean(interpolated_values, axis=0)
    std = np.std(interpolated_values, axis=0)
    n = interpolated_values.shape[0]
    ci = 1.96 * std / np.sqrt(n)

    return {
        "mean": mean,
        "std": std,
        "ci_lower": mean - ci,
        "ci_upper": mean + ci,
        "median": np.median(interpolated_values, axis=0),
        "q25": np.percentile(interpolated_values, 25, axis=0),
        "q75": np.percentile(interpolated_values, 75, axis=0),
    }


def plot_combined(common_steps, stats, num_runs, column, plots_dir):
    os.makedirs(plots_dir, exist_ok=True)

    fig, ax = plt.subplots(figsize=(14, 8))

    ax.fill_between(common_steps, stats["q25"], stats["q75"],
                    alpha=0.25, color="#9b59b6", label="IQR (25th-75th)")
    ax.fill_between(common_steps, stats["ci_lower"], stats["ci_upper"],
                    alpha=0.4, color="#3498db", label="95% CI")
    ax.plot(common_steps, stats["median"], linewidth=2, color="#27ae60",
            linestyle="--", label="Median")
    ax.plot(common_steps, stats["mean"], linewidth=3, color="#2c3e50",
            label=f"Mean (n={num_runs})")

    ax.set_xlabel("Training step", fontsize=12)
    ax.set_ylabel(column, fontsize=12)
    ax.set_title(f"{column} across runs (n={num_runs})", fontsize=14)
    ax.grid(True, linestyle="--", alpha=0.7)
    ax.legend(loc="lower right", fontsize=10)

    final_mean = stats["mean"][-1]
    final_ci = (stats["ci_upper"][-1] - stats["ci_lower"][-1]) / 2
    ax.annotate(f"Final: {final_mean:.3f} ± {final_ci:.3f}",
                xy=(common_steps[-1], final_mean),
                xytext=(-120, 20), textcoords="offset points", fontsize=11,
                arrowprops=dict(arrowstyle="->", color="gray"))

    plt.tight_layout()
    plot_path = os.path.join(plots_dir, f"aggregate_{column}.png")
    plt.savefig(plot_path, dpi=150)
    plt.close()
    print(f"📊 Saved: {plot_path}")


def generate_summary_table(all_data, plots_dir):
    rows = []
    for data in all_data:
        df = data["metrics"]
        if df.empty:
            continue
        tail = df.tail(SMOOTHING)
        rows.append({
            "run": data["name"],
            "steps": int(df["step"].max()),
            "final_selectivity": tail["selectivity"].mean(),
            "final_dv_bound": df["dv_bound"].iloc[-1],
            "degenerate_pools": int(df["degenerate_pools"].sum()),
        })

    df = pd.DataFrame(rows)
    csv_path = os.path.join(plots_dir, "run_summary.csv")
    df.to_csv(csv_path, index=False)
    print(f"📄 Saved: {csv_path}")

    print("\n" + "=" * 60)
    print("SUMMARY STATISTICS")
    print("=" * 60)
    print(f"Total runs: {len(df)}")
    if not df.empty:
        print(f"Final selectivity: Mean={df['final_selectivity'].mean():.4f}, Std={df['final_selectivity'].std():.4f}")
        print(f"Final DV bound:    Mean={df['final_dv_bound'].mean():.4f}, Std={df['final_dv_bound'].std():.4f}")
    print("=" * 60)
    return df


def main():
    print("=" * 60)
    print("AGGREGATE RESULTS")
    print("=" * 60)
    print(f"Runs Dir:  {RUNS_DIR}")
    print(f"Plots Dir: {PLOTS_DIR}")

    if not os.path.exists(RUNS_DIR):
        print(f"\n❌ Runs directory not found: {RUNS_DIR}")
        return

    os.makedirs(PLOTS_DIR, exist_ok=True)

    print("\n📂 Loading metrics...")
    all_data = load_metrics(RUNS_DIR)
    if not all_data:
        print("\n❌ No metrics.csv files found!")
        return

    for column in METRICS:
        print(f"\n📈 Interpolating {column}...")
        common_steps, values, valid_runs = interpolate_to_common_steps(all_data, column)
        if common_steps is None:
            print(f"\n❌ Failed to interpolate {column}!")
            continue
        print(f"✓ Interpolated {len(valid_runs)} runs")
        plot_combined(common_steps, compute_statistics(values), len(valid_runs), column, PLOTS_DIR)

    generate_summary_table(all_data, PLOTS_DIR)
    print(f"\n✅ Done! Results saved to: {PLOTS_DIR}")


if __name__ == "__main__":
    main()
