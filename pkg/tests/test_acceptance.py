"""
End-to-end reproductions. The training runs take minutes each and are
skipped unless ICF_RUN_SLOW=1; the format checks at the bottom always run.
"""

import numpy as np
import pytest

from analysis import bound_gap_report, random_tabular_mdp
from conftest import small_config
from pipeline import ICFPipeline
from trainer import build_config


def train_run(tmp_path, experiment, overrides=None):
    pipeline = ICFPipeline(index_runs=False)
    return pipeline.train(build_config(experiment, overrides or {}), out_dir=str(tmp_path / experiment))


def evaluate_run(result, **eval_kwargs):
    return ICFPipeline(index_runs=False).evaluate(f"{result.run_dir}/checkpoints/latest.icf", **eval_kwargs)


def train_and_evaluate(tmp_path, experiment, overrides=None, **eval_kwargs):
    return evaluate_run(train_run(tmp_path, experiment, overrides), **eval_kwargs)


def gates(report):
    return {g["gate"]: g for g in report["gates"]}


@pytest.mark.slow
def test_disentangles_four_movement_factors(tmp_path):
    result = train_run(tmp_path, "disentangle")
    selectivity = np.array([r["selectivity"] for r in result.records])
    tenth = len(selectivity) // 10
    assert selectivity[-tenth:].mean() > selectivity[:tenth].mean()

    report = evaluate_run(result)
    results = gates(report)
    assert report["cluster"]["n_clusters"] == 4
    assert results["G1_cluster_separation"]["passed"], report["cluster"]
    assert results["G2_redundant_merge"]["passed"], report["cluster"]
    assert results["G3_latent_grid"]["passed"], report["latent_grid"]


@pytest.mark.slow
def test_plans_reach_every_nearby_goal(tmp_path):
    report = train_and_evaluate(tmp_path, "disentangle-open", plan_sweep=True)
    assert gates(report)["G1_cluster_separation"]["passed"]
    assert report["planning"]["success_rate"] == 1.0, report["planning"]


@pytest.mark.slow
def test_discrete_factors_recover_object_coordinates(tmp_path):
    successes = 0
    for seed in range(3):
        report = train_and_evaluate(tmp_path / f"seed{seed}", "discrete", {"seed": seed}, variations=200)
        value = report["feature_recovery"]["min_best_spearman"]
        successes += int(value is not None and value > 0.9)
    assert successes >= 2


@pytest.mark.slow
def test_bound_never_exceeds_exact_mi():
    rng = np.random.default_rng(2024)
    for instance in range(100):
        n_states = int(rng.integers(2, 21))
        n_factors = int(rng.integers(2, 5))
        mdp = random_tabular_mdp(rng, n_states=n_states, n_factors=n_factors, n_actions=3)
        scores = rng.uniform(0.0, 1.0, size=(n_states, n_factors, n_states))
        report = bound_gap_report(mdp, scores, samples=100_000, seed=instance)
        assert report.holds, (instance, report.to_dict())


# --- determinism and file formats --------------------------------------------------

def read_ppm(payload: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while payload[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not payload[pos:pos + 1].isspace():
            pos += 1
        tokens.append(payload[start:pos].decode("ascii"))
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = payload[pos + 1:]
    assert magic == "P6" and maxval == 255
    assert len(pixels) == width * height * 3
    return width, height


def test_identical_runs_write_identical_files(tmp_path):
    config = small_config(steps=4, seed=5, checkpoint_every=2)
    for name in ("a", "b"):
        ICFPipeline(index_runs=False).train(config, out_dir=str(tmp_path / name))
    for rel in ("metrics.csv", "checkpoints/latest.icf", "checkpoints/step_0000002.icf"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_rendered_images_parse(tmp_path):
    pipeline = ICFPipeline(index_runs=False)
    result = pipeline.train(small_config(steps=1), out_dir=str(tmp_path / "run"))
    paths = pipeline.render(f"{result.run_dir}/checkpoints/latest.icf", (2, 3), str(tmp_path / "img.ppm"))
    cell = result.trainer.env.cell_px
    width, height = read_ppm(open(paths["observation"], "rb").read())
    assert (width, height) == (8 * cell, 8 * cell)
    assert read_ppm(open(paths["combined"], "rb").read()) == (2 * 8 * cell + 1, 8 * cell)
