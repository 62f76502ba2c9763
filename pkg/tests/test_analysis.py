import numpy as np
import pytest

from analysis import (
    ACTION_ALIASES,
    TabularMDP,
    VariationRecord,
    affine_r2,
    bound_gap_report,
    cluster_by_action,
    collect_variations,
    deterministic_two_factor_mdp,
    dh_density_modes,
    directed_information,
    exact_conditional_mi,
    factor_diversity,
    factor_space_view,
    feature_recovery,
    feature_recovery_from_arrays,
    indicator_scores,
    latent_grid,
    policy_table,
    random_tabular_mdp,
    reachable_outcomes,
    tabular_reduction,
    variations_frame,
)
from conftest import small_config
from environments import EnvState, GridEnv, preset
from errors import ConfigurationError, DegenerateClusterError
from trainer import Trainer

ONE_HOT = {"up": (0.0, -1.0), "down": (0.0, 1.0), "left": (-1.0, 0.0), "right": (1.0, 0.0)}


def synthetic_records(rng, per_action=50, noise=0.01, actions=ONE_HOT):
    records = []
    for name, direction in actions.items():
        for _ in range(per_action):
            h = rng.normal(size=2)
            dh = np.asarray(direction) + rng.normal(scale=noise, size=2)
            records.append(VariationRecord(
                h=h, h_prime=h + dh, dh=(h + dh) - h, phi=np.zeros(2), actions=[name],
                truth_before=np.zeros(2), truth_after=np.zeros(2),
            ))
    return records


@pytest.fixture(scope="module")
def trainer():
    return Trainer(small_config(preset="mazebase-switches"))


# --- variations and clustering ---------------------------------------------

def test_variation_record_checks_difference():
    with pytest.raises(ValueError):
        VariationRecord(h=np.zeros(2), h_prime=np.ones(2), dh=np.zeros(2), phi=np.zeros(2),
                        actions=["up"], truth_before=np.zeros(2), truth_after=np.zeros(2))


def test_collect_variations_count_and_consistency(trainer):
    records = collect_variations(trainer, 1000, seed=1)
    assert len(records) == 1000
    first = records[0]
    np.testing.assert_array_equal(first.dh, first.h_prime - first.h)
    assert len(first.actions) == trainer.config.t_option
    assert set(r.actions[0] for r in records) <= set(trainer.spec.action_set)


def test_collect_variations_is_seeded(trainer):
    a = variations_frame(collect_variations(trainer, 20, seed=5))
    b = variations_frame(collect_variations(trainer, 20, seed=5))
    assert a.equals(b)
    assert list(a.columns) == ["dh_0", "dh_1", "phi_0", "phi_1", "action"]


def test_collect_variations_from_given_states(trainer):
    start = EnvState(agent=(0, 0), switches=(0, 0))
    records = collect_variations(trainer, 3, states=[start] * 3)
    np.testing.assert_array_equal(records[0].truth_before, [0, 0, 0, 0])


def test_synthetic_clusters_are_separated():
    report = cluster_by_action(synthetic_records(np.random.default_rng(0)))
    assert report.ratio < 0.05
    assert report.n_clusters == 4
    assert report.counts == {"down": 50, "left": 50, "right": 50, "up": 50}
    assert report.distance("up", "down") == pytest.approx(2.0, abs=0.01)


def test_identical_dh_is_degenerate():
    records = synthetic_records(np.random.default_rng(0), per_action=3, noise=0.0,
                                actions={"up": (1.0, 1.0), "down": (1.0, 1.0)})
    report = cluster_by_action(records)
    assert report.B == 0.0
    assert report.degenerate
    assert report.to_dict()["ratio"] == "inf"


def test_cluster_needs_two_groups():
    records = synthetic_records(np.random.default_rng(0), actions={"up": (0.0, 1.0)})
    with pytest.raises(DegenerateClusterError):
        cluster_by_action(records)


def test_aliases_merge_redundant_actions():
    rng = np.random.default_rng(1)
    actions = dict(ONE_HOT, up2=(0.0, -1.0))
    records = synthetic_records(rng, actions=actions)
    unmerged = cluster_by_action(records)
    merged = cluster_by_action(records, ACTION_ALIASES)
    assert unmerged.n_clusters == 5 and merged.n_clusters == 4
    assert merged.counts["up"] == 100
    assert unmerged.distance("up", "up2") < 0.2 * unmerged.distance("up", "down")


def test_cluster_order_independent():
    records = synthetic_records(np.random.default_rng(2), noise=0.1)
    a = cluster_by_action(records)
    b = cluster_by_action(list(reversed(records)))
    assert a.W == b.W and a.B == b.B


def test_cluster_rejects_multistep_records():
    records = synthetic_records(np.random.default_rng(0))
    records[0].actions = ["up", "left"]
    with pytest.raises(ConfigurationError):
        cluster_by_action(records)


# --- latent structure ------------------------------------------------------

def test_affine_r2_exact_and_constant():
    x = np.arange(10.0)[:, None]
    r2 = affine_r2(x, np.stack([3 * x[:, 0] + 1, np.ones(10)], axis=1))
    assert r2[0] == pytest.approx(1.0)
    assert np.isnan(r2[1])


def test_latent_grid_covers_all_states(trainer):
    report = latent_grid(trainer)
    assert len(report.frame) == trainer.env.state_count() == 64
    assert set(report.r2_features_from_latent) == {"agent_x", "agent_y", "switch1", "switch2"}
    assert all(0.0 <= v <= 1.0 + 1e-9 for v in report.r2_latent_from_features.values())


def test_feature_recovery_of_monotone_latent():
    features = np.array([[x, y] for x in range(5) for y in range(5)], dtype=np.float64)
    latents = np.stack([np.tanh(features[:, 0] - 2), -features[:, 1] ** 3], axis=1)
    report = feature_recovery_from_arrays(features, latents, ["obj_x", "obj_y"])
    assert report.best_spearman("obj_x") == pytest.approx(1.0)
    assert report.best_spearman("obj_y") == pytest.approx(1.0)
    assert report.summary.set_index("feature").loc["obj_x", "best_latent"] == "h_0"


def test_feature_recovery_constant_feature_is_na():
    features = np.stack([np.arange(6.0), np.zeros(6)], axis=1)
    report = feature_recovery_from_arrays(features, features[:, :1] * 2, ["a", "b"])
    assert report.best_spearman("b") is None


def test_feature_recovery_on_trainer(trainer):
    report = feature_recovery(trainer)
    assert len(report.table) == len(trainer.env.feature_names) * 2


# --- MI oracle -------------------------------------------------------------

def test_deterministic_two_factor_mi_is_log_two():
    mdp = deterministic_two_factor_mdp()
    assert exact_conditional_mi(mdp) == pytest.approx(np.log(2))
    report = bound_gap_report(mdp, indicator_scores(mdp), samples=100_000)
    assert report.samples == 100_000
    assert report.estimate == pytest.approx(np.log(2), abs=1e-6)
    assert abs(report.gap) < 1e-6
    assert report.holds


def test_identical_factors_have_zero_mi():
    mdp = deterministic_two_factor_mdp()
    same = TabularMDP(np.stack([mdp.policies[0], mdp.policies[0]]), mdp.transitions)
    assert exact_conditional_mi(same) == pytest.approx(0.0)


def shared_latent_mdp():
    """s0 and s1 share latent 0; factor 0 sends s0->s2, s1->s3 and factor 1 the reverse"""
    transitions = np.zeros((4, 2, 4))
    transitions[0, 0, 2] = transitions[1, 0, 3] = 1.0
    transitions[0, 1, 3] = transitions[1, 1, 2] = 1.0
    transitions[2, :, 2] = transitions[3, :, 3] = 1.0
    policies = np.zeros((2, 4, 2))
    policies[0, :, 0] = 1.0
    policies[1, :, 1] = 1.0
    return TabularMDP(policies, transitions, h_map=np.array([0, 0, 1, 2]))


PRIOR = np.array([0.5, 0.5, 0.0, 0.0])


def test_factors_indistinguishable_given_latent_have_zero_mi():
    mdp = shared_latent_mdp()
    conditional = mdp.latent_outcome_distribution(start_prior=PRIOR)
    np.testing.assert_allclose(conditional[0, 0], [0.0, 0.5, 0.5])
    np.testing.assert_allclose(conditional[1, 0], conditional[0, 0])
    np.testing.assert_allclose(mdp.latent_prior(PRIOR), [1.0, 0.0, 0.0])
    assert exact_conditional_mi(mdp, start_prior=PRIOR) < 1e-12

    # the same dynamics with every state distinguishable carry one bit per start
    distinct = TabularMDP(mdp.policies, mdp.transitions)
    assert exact_conditional_mi(distinct, start_prior=PRIOR) == pytest.approx(np.log(2))


def test_bound_samples_condition_on_latent():
    mdp = shared_latent_mdp()
    report = bound_gap_report(mdp, indicator_scores(mdp, start_prior=PRIOR), samples=20_000, start_prior=PRIOR)
    assert report.oracle < 1e-12
    assert report.estimate == pytest.approx(0.0, abs=1e-9)

    # a critic keyed on the latent cannot tell which start produced h'
    scores = np.zeros((3, 2, 3))
    scores[0, 0, 1] = scores[0, 1, 2] = 1.0
    report = bound_gap_report(mdp, scores, samples=20_000, start_prior=PRIOR)
    assert report.estimate < 0.0
    assert report.holds


def test_score_shape_follows_latent_ids():
    mdp = shared_latent_mdp()
    with pytest.raises(ConfigurationError, match="scores"):
        bound_gap_report(mdp, np.ones((4, 2, 3)), samples=10, start_prior=PRIOR)
    with pytest.raises(ConfigurationError, match="start_prior"):
        exact_conditional_mi(mdp, start_prior=np.array([1.0, 1.0, 0.0, 0.0]))
    with pytest.raises(ConfigurationError, match="h_map"):
        TabularMDP(mdp.policies, mdp.transitions, h_map=np.array([0, 1]))


def test_constant_scores_give_zero_estimate():
    mdp = deterministic_two_factor_mdp()
    report = bound_gap_report(mdp, np.ones((3, 2, 3)), samples=500)
    assert report.estimate == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(5))
def test_bound_holds_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    mdp = random_tabular_mdp(rng, n_states=4, n_factors=3, n_actions=3)
    scores = rng.uniform(0.0, 1.0, size=(4, 3, 4))
    for steps in (1, 2):
        report = bound_gap_report(mdp, scores, samples=20_000, steps=steps, seed=seed)
        assert report.holds, report.to_dict()


def test_tabular_mdp_validation():
    with pytest.raises(ConfigurationError):
        TabularMDP(np.full((1, 2, 2), 0.5), np.full((2, 2, 3), 1 / 3))
    with pytest.raises(ConfigurationError):
        TabularMDP(np.full((1, 2, 2), 0.7), np.full((2, 2, 2), 0.5))


def test_tabular_reduction_of_trainer(trainer):
    reduction = tabular_reduction(trainer, n_factors=3)
    S = trainer.env.state_count()
    assert reduction.mdp.policies.shape == (3, S, trainer.env.n_actions)
    assert reduction.scores.shape == (S, 3, S)
    report = bound_gap_report(reduction.mdp, reduction.scores, samples=5000)
    assert report.holds


# --- diagnostics -------------------------------------------------------------

def test_directed_information_sums_episodes():
    report = directed_information([0.1, 0.2, 0.3, 0.4, 0.5], options_per_episode=2)
    assert report.n_episodes == 2
    assert report.mean == pytest.approx(0.5)
    assert report.per_option_mean == pytest.approx(0.3)
    with pytest.raises(ConfigurationError):
        directed_information([0.1], 0)


def test_density_modes_count_clusters():
    dh = np.stack([r.dh for r in synthetic_records(np.random.default_rng(0), per_action=100, noise=0.05)])
    assert dh_density_modes(dh).n_modes == 4


def test_reachable_outcomes_one_step():
    env = GridEnv(preset("mazebase-small"))
    outcomes = reachable_outcomes(env, EnvState(agent=(0, 0)), 1)
    assert outcomes == {EnvState(agent=(0, 0)), EnvState(agent=(1, 0)), EnvState(agent=(0, 1))}


def test_factor_diversity_bounded_by_reachable(trainer):
    result = factor_diversity(trainer, EnvState(agent=(1, 1), switches=(0, 0)), count=64)
    assert 1 <= result.n_distinct_outcomes <= result.n_reachable_outcomes
    assert sum(result.outcome_counts.values()) == 64


def test_factor_space_view_columns(trainer):
    frame = factor_space_view(trainer, EnvState(agent=(1, 1), switches=(0, 0)), count=10)
    assert len(frame) == 10
    assert {"pc_0", "pc_1", "phi_0", "pred_h_1", "pred_x", "pred_y"} <= set(frame.columns)


def test_policy_table_rows_are_distributions(trainer):
    frame = policy_table(trainer, EnvState(agent=(1, 1), switches=(0, 0)), count=5)
    probs = frame[[f"p_{a}" for a in trainer.spec.action_set]].to_numpy()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert len(frame) == 5
