import json

import numpy as np
import pytest
from scipy import stats

import trainer as trainer_module
from autodiff import Tensor, current_tape
from checkpoint import decode_checkpoint, encode_checkpoint
from conftest import small_config
from errors import ConfigurationError, NumericalAbort, UnknownPresetError
from trainer import (
    EXPERIMENTS,
    SGD,
    Adam,
    Trainer,
    build_config,
    load_config_file,
    make_optimizer,
    optimizer_update,
)


# --- configuration ----------------------------------------------------------

def test_experiment_templates_validate():
    for name in EXPERIMENTS:
        config = build_config(name)
        assert config.preset in ("mazebase-small", "two-digit-grid")
    assert build_config("discrete").mode == "discrete_only"
    assert build_config("disentangle").redundant_actions


def test_overrides_merge_into_template():
    config = build_config("disentangle", {"steps": 10, "model": {"hidden": 4}})
    assert config.steps == 10
    assert config.model.hidden == 4
    assert config.model.latent_dim == 2


def test_missing_preset_names_field():
    with pytest.raises(ConfigurationError, match="preset: Field required"):
        build_config(None, {})


def test_bad_field_reports_dotted_path():
    with pytest.raises(ConfigurationError, match=r"model\.latent_dim"):
        build_config(None, {"preset": "mazebase-small", "model": {"latent_dim": 0}})
    with pytest.raises(ConfigurationError, match="n_pool"):
        build_config(None, {"preset": "mazebase-small", "n_pool": 1})
    with pytest.raises(ConfigurationError, match="unknown preset"):
        build_config(None, {"preset": "atari"})


def test_unknown_field_rejected():
    with pytest.raises(ConfigurationError, match="learning_rate"):
        build_config(None, {"preset": "mazebase-small", "learning_rate": 0.1})


def test_unknown_experiment():
    with pytest.raises(UnknownPresetError):
        build_config("nope")


def test_factor_dim_must_match_latent_in_joint_mode():
    with pytest.raises(ConfigurationError, match="factor_dim"):
        build_config(None, {"preset": "mazebase-small", "model": {"latent_dim": 2, "factor_dim": 3}})


def test_config_file_syntax_error_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "preset": "mazebase-small",\n  "steps": ,\n}\n')
    with pytest.raises(ConfigurationError, match="line 3, column"):
        load_config_file(str(path))


def test_config_file_round_trip(tmp_path):
    config = build_config("multistep", {"seed": 4})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.model_dump(mode="json")))
    assert build_config(None, load_config_file(str(path))) == config


# --- optimizers -------------------------------------------------------------

def named(value):
    return [("w", Tensor(np.array([value]), requires_grad=True))]


def test_sgd_step():
    params = named(1.0)
    optimizer_update([params[0][1]], [np.array([1.0])], SGD(params, lr=0.1))
    assert params[0][1].data[0] == pytest.approx(0.9)


def test_sgd_zero_gradient_keeps_params():
    params = named(1.0)
    optimizer_update([params[0][1]], [np.array([0.0])], SGD(params, lr=0.1))
    assert params[0][1].data[0] == 1.0


def test_adam_first_step_moves_by_lr():
    params = named(1.0)
    optimizer = Adam(params, lr=0.01)
    optimizer_update([params[0][1]], [np.array([1.0])], optimizer)
    assert params[0][1].data[0] == pytest.approx(0.99, abs=1e-6)
    assert optimizer.t == 1


def test_adam_state_round_trip():
    params = named(1.0)
    optimizer = Adam(params, lr=0.01)
    optimizer_update([params[0][1]], [np.array([0.5])], optimizer)
    other = Adam(named(1.0), lr=0.01)
    other.load_state_tensors(optimizer.state_tensors(), optimizer.t)
    np.testing.assert_array_equal(other.m["w"], optimizer.m["w"])
    assert other.t == 1


def test_unknown_optimizer():
    with pytest.raises(ConfigurationError):
        make_optimizer("rmsprop", named(0.0), 0.1)


# --- training steps ---------------------------------------------------------

def test_train_step_record_columns():
    trainer = Trainer(small_config())
    record = trainer.train_step()
    assert list(record) == trainer.metric_columns
    assert record["step"] == 1
    assert sum(record[f"act_{a}"] for a in trainer.spec.action_set) == trainer.config.n_workers
    assert record["mb_loss"] is None
    assert np.isfinite(record["selectivity"])
    assert trainer.step == 1


def test_train_runs_to_configured_steps():
    trainer = Trainer(small_config(steps=4))
    seen = []
    records = trainer.train(on_step=lambda t, r: seen.append(r["step"]))
    assert [r["step"] for r in records] == [1, 2, 3, 4] == seen
    assert trainer.train() == []


def test_training_updates_parameters():
    trainer = Trainer(small_config())
    before = {name: p.data.copy() for name, p in trainer.model.named_parameters()}
    trainer.train_step()
    changed = [name for name, p in trainer.model.named_parameters() if not np.array_equal(p.data, before[name])]
    assert any(name.startswith("encoder") for name in changed)
    assert any(name.startswith("policy_net") for name in changed)


def test_same_seed_same_metrics():
    first = Trainer(small_config(steps=3, seed=11)).train()
    second = Trainer(small_config(steps=3, seed=11)).train()
    assert first == second
    third = Trainer(small_config(steps=3, seed=12)).train()
    assert first != third


def test_resume_matches_uninterrupted_run():
    config = small_config(steps=6, n_workers=2, optimizer="adam")
    full = Trainer(config).train()

    first = Trainer(config)
    first.train(steps=3)
    payload = encode_checkpoint(first.state())
    resumed = Trainer.from_checkpoint(decode_checkpoint(payload))
    assert resumed.step == 3
    assert resumed.train() == full[3:]


def test_checkpoint_state_is_byte_stable():
    trainer = Trainer(small_config(steps=2))
    trainer.train()
    payload = encode_checkpoint(trainer.state())
    restored = Trainer.from_checkpoint(decode_checkpoint(payload))
    assert encode_checkpoint(restored.state()) == payload


def test_episode_reset_after_episode_len():
    trainer = Trainer(small_config(episode_len=2, steps=2))
    trainer.train()
    assert trainer.episode_step == 0


def test_discrete_mode_step():
    config = small_config(preset="two-digit-grid", mode="discrete_only", model={"latent_dim": 4},
                          coefficients={"autoencoder": 0.0, "model_based": 0.0})
    trainer = Trainer(config)
    assert trainer.pool_size == 4
    record = trainer.train_step()
    assert record["ae_loss"] is None
    assert sum(record[f"act_obj{k}_{d}"] for k in (1, 2) for d in ("up", "down", "left", "right")) == 1


def _capture_surrogate(monkeypatch):
    captured = []
    real = trainer_module.reinforce_surrogate

    def capture(batch, baseline):
        captured.append((batch, current_tape()))
        return real(batch, baseline)

    monkeypatch.setattr(trainer_module, "reinforce_surrogate", capture)
    return captured


def _off_behavior(batch):
    mask = np.ones(batch.weights.shape, dtype=bool)
    mask[np.arange(batch.n_rollouts), batch.behavior] = False
    return mask


def test_pool_updates_are_importance_weighted_by_default(monkeypatch):
    calls = []
    real_weights = trainer_module.importance_weights
    monkeypatch.setattr(trainer_module, "importance_weights",
                        lambda *args, **kwargs: calls.append(1) or real_weights(*args, **kwargs))
    captured = _capture_surrogate(monkeypatch)
    trainer = Trainer(small_config(n_workers=2))
    assert trainer.config.importance_sampling
    trainer.train_step()

    assert len(calls) == 1
    batch, tape = captured[0]
    off = _off_behavior(batch)
    assert np.all(batch.weights[off] > 0.0)
    np.testing.assert_array_equal(batch.weights[~off], 1.0)
    grad = tape.grad(batch.log_prob_sum)
    assert np.count_nonzero(grad[off]) == off.sum()


def test_behavior_only_ablation(monkeypatch):
    captured = _capture_surrogate(monkeypatch)
    Trainer(small_config(n_workers=2, importance_sampling=False)).train_step()
    batch, tape = captured[0]
    off = _off_behavior(batch)
    np.testing.assert_array_equal(batch.weights[off], 0.0)
    np.testing.assert_array_equal(tape.grad(batch.log_prob_sum)[off], 0.0)


def test_full_exploration_samples_actions_uniformly():
    trainer = Trainer(small_config())
    trainer.config = trainer.config.model_copy(update={"epsilon_greedy": 1.0})
    A = trainer.env.n_actions
    peaked = np.zeros((20_000, A))
    peaked[:, 0] = 1.0
    counts = np.bincount(trainer._sample_actions(peaked), minlength=A)
    assert stats.chisquare(counts).pvalue > 0.01


def test_every_parameter_receives_a_gradient(monkeypatch):
    trainer = Trainer(small_config(steps=4, n_workers=2, use_transition=True))
    seen = set()
    step = trainer.optimizer.step

    def recording_step():
        seen.update(name for name, p in trainer.model.named_parameters()
                    if p.grad is not None and np.any(p.grad != 0.0))
        step()

    monkeypatch.setattr(trainer.optimizer, "step", recording_step)
    trainer.train()
    assert seen == {name for name, _ in trainer.model.named_parameters()}


def test_multistep_with_transition():
    config = small_config(t_option=3, use_transition=True, n_workers=2, open_grid=True)
    record = Trainer(config).train_step()
    assert record["mb_loss"] is not None and record["mb_loss"] >= 0.0
    assert sum(record[f"act_{a}"] for a in ("up", "down", "left", "right")) == 6


def test_pixel_observations_with_conv_encoder():
    config = small_config(observation="pixels", cell_px=5, preset="mazebase-switches",
                          model={"encoder": "conv4", "conv_channels": [4, 4]})
    record = Trainer(config).train_step()
    assert np.isfinite(record["ae_loss"])


def test_batchnorm_needs_several_workers():
    with pytest.raises(ConfigurationError, match="batchnorm"):
        Trainer(small_config(model={"use_batchnorm": True})).train_step()
    record = Trainer(small_config(model={"use_batchnorm": True}, n_workers=3)).train_step()
    assert np.isfinite(record["total_loss"])


def test_nonfinite_loss_aborts_with_record(monkeypatch):
    trainer = Trainer(small_config())
    monkeypatch.setattr(trainer.model, "baseline", lambda h: Tensor(np.full(h.shape[0], np.nan)))
    with pytest.raises(NumericalAbort) as excinfo:
        trainer.train_step()
    assert excinfo.value.record["step"] == 1
    assert trainer.step == 0


def test_aborted_step_leaves_bound_window_finite(monkeypatch):
    trainer = Trainer(small_config(n_workers=2))
    trainer.train_step()
    window = list(trainer.bound_window)
    real = trainer_module.selectivity_matrix

    def poisoned(scores, eps_floor):
        matrix, degenerate = real(scores, eps_floor)
        return matrix * np.nan, degenerate

    monkeypatch.setattr(trainer_module, "selectivity_matrix", poisoned)
    with pytest.raises(NumericalAbort) as excinfo:
        trainer.train_step()
    assert np.isnan(excinfo.value.record["selectivity"])
    assert list(trainer.bound_window) == window
    assert np.all(np.isfinite(trainer.state().meta["bound_window"]))


def test_checkpoint_with_mismatched_workers_rejected():
    trainer = Trainer(small_config(n_workers=2))
    data = trainer.state()
    data.meta["worker_rngs"] = data.meta["worker_rngs"][:1]
    with pytest.raises(ConfigurationError):
        Trainer.from_checkpoint(data)
