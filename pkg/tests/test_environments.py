import numpy as np
import pytest

from environments import (
    EnvState,
    GridEnv,
    GridSpec,
    encode_ppm,
    preset,
)
from errors import ConfigurationError, InvalidActionError, StateSpaceTooLargeError, UnknownPresetError


def open_grid(width=4, height=4, **kwargs):
    return GridEnv(GridSpec(width=width, height=height, action_set=("up", "down", "left", "right"), **kwargs))


# --- dynamics -----------------------------------------------------------

def test_step_moves_agent_right():
    env = open_grid()
    state = env.step(EnvState(agent=(0, 0)), env.action_index("right"))
    assert state.agent == (1, 0)


def test_step_into_blocked_cell_is_noop():
    env = GridEnv(preset("mazebase-small"))
    start = EnvState(agent=(4, 2))
    assert env.step(start, env.action_index("right")) == start


def test_step_off_grid_is_noop():
    env = open_grid()
    start = EnvState(agent=(0, 0))
    assert env.step(start, env.action_index("up")) == start
    assert env.step(start, env.action_index("left")) == start


def test_toggle_flips_switch_only_on_switch_cell():
    env = GridEnv(preset("mazebase-switches"))
    toggle = env.action_index("toggle")
    on_switch = EnvState(agent=(3, 3), switches=(0, 0))
    flipped = env.step(on_switch, toggle)
    assert flipped == EnvState(agent=(3, 3), switches=(0, 1))
    assert env.step(flipped, toggle) == on_switch
    off_switch = EnvState(agent=(1, 1), switches=(0, 0))
    assert env.step(off_switch, toggle) == off_switch


def test_pass_leaves_state_unchanged():
    env = GridEnv(preset("mazebase-switches"))
    state = env.initial_state()
    assert env.step(state, env.action_index("pass")) == state


def test_object_moves_do_not_overlap():
    env = GridEnv(preset("two-digit-grid"))
    state = EnvState(objects=((1, 1), (2, 1)))
    assert env.step(state, env.action_index("obj1_right")) == state
    moved = env.step(state, env.action_index("obj2_down"))
    assert moved.objects == ((1, 1), (2, 2))


def test_redundant_actions_share_effects():
    env = GridEnv(preset("mazebase-small", redundant_actions=True))
    state = EnvState(agent=(3, 3))
    assert env.step(state, env.action_index("up")) == env.step(state, env.action_index("up2"))
    assert env.step(state, env.action_index("down+left")).agent == (2, 4)


@pytest.mark.parametrize("action", [-1, 4, 1.5])
def test_invalid_action_index_raises(action):
    with pytest.raises(InvalidActionError):
        open_grid().step(EnvState(agent=(0, 0)), action)


def test_unknown_action_name_raises():
    with pytest.raises(InvalidActionError):
        open_grid().action_index("jump")


# --- observations ---------------------------------------------------------

def test_symbolic_agent_plane_is_one_hot():
    env = open_grid()
    planes = env.observe(EnvState(agent=(1, 2))).data.data
    assert planes.shape == (2, 4, 4)
    assert planes[0].sum() == 1.0
    assert planes[0, 2, 1] == 1.0


def test_observation_is_deterministic():
    env = GridEnv(preset("mazebase-switches"))
    state = EnvState(agent=(2, 1), switches=(1, 0))
    for mode in ("symbolic", "pixels"):
        np.testing.assert_array_equal(env.observe(state, mode).data.data, env.observe(state, mode).data.data)


def test_symbolic_observation_is_injective():
    env = GridEnv(preset("mazebase-switches"))
    seen = {env.symbolic_planes(s).tobytes() for s in env.enumerate_states()}
    assert len(seen) == env.state_count()


def test_pixel_shape_and_agent_colour():
    env = GridEnv(preset("mazebase-small"), cell_px=8)
    image = env.render_pixels(EnvState(agent=(0, 0)))
    assert image.shape == (3, 64, 64)
    # centre of the agent disc is red, blocked cell (5, 2) is orange
    np.testing.assert_allclose(image[:, 4, 4], (1.0, 0.0, 0.0))
    np.testing.assert_allclose(image[:, 2 * 8 + 4, 5 * 8 + 4], (1.0, 0.55, 0.0))
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_cell_px_below_sprite_size_rejected():
    with pytest.raises(ConfigurationError):
        GridEnv(preset("mazebase-small"), cell_px=4)


def test_unknown_observation_mode_rejected():
    with pytest.raises(ConfigurationError):
        open_grid().observe(EnvState(agent=(0, 0)), "depth")


@pytest.mark.parametrize("name", ["mazebase-small", "mazebase-switches", "two-digit-grid"])
def test_state_from_observation_inverts_symbolic(name):
    env = GridEnv(preset(name))
    rng = np.random.default_rng(3)
    for _ in range(10):
        state = env.sample_state(rng)
        assert env.state_from_observation(env.symbolic_planes(state)) == state


def test_state_from_pixels_recovers_state():
    env = GridEnv(preset("mazebase-switches"))
    state = EnvState(agent=(2, 3), switches=(1, 0))
    assert env.state_from_observation(env.render_pixels(state), "pixels") == state


# --- presets ------------------------------------------------------------

def test_preset_action_counts():
    assert preset("two-digit-grid").n_actions == 8
    assert preset("mazebase-switches").action_set == ("up", "left", "pass", "right", "toggle", "down")
    assert preset("mazebase-small", redundant_actions=True).action_set == (
        "up", "up2", "down", "left", "right", "down+left",
    )
    assert preset("mazebase-small").n_actions == 4


def test_preset_without_noop_drops_pass():
    spec = preset("mazebase-switches", allow_noop=False)
    assert "pass" not in spec.action_set
    assert spec.n_actions == 5


def test_open_grid_has_no_blocked_cells():
    assert preset("mazebase-small").blocked == ((5, 2),)
    assert preset("mazebase-small", open_grid=True).blocked == ()


def test_unknown_preset_raises():
    with pytest.raises(UnknownPresetError, match="mazebase-small"):
        preset("atari")


def test_spec_json_round_trip():
    spec = preset("two-digit-grid")
    assert GridSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("kwargs", [
    {"width": 0, "height": 3, "action_set": ("up",)},
    {"width": 3, "height": 3, "action_set": ()},
    {"width": 3, "height": 3, "action_set": ("up",), "blocked": ((0, 0),)},
    {"width": 3, "height": 3, "action_set": ("jump",)},
    {"width": 3, "height": 3, "action_set": ("pass",), "allow_noop": False},
    {"width": 3, "height": 3, "action_set": ("obj1_up",)},
])
def test_invalid_grid_spec_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        GridSpec(**kwargs)


def test_switch_on_blocked_cell_rejected():
    with pytest.raises(ConfigurationError, match="switch placed on blocked cell"):
        GridSpec(width=3, height=3, action_set=("up", "toggle"), blocked=((2, 2),), switches=((2, 2),))
    with pytest.raises(ConfigurationError, match="outside"):
        GridSpec(width=3, height=3, action_set=("up", "toggle"), switches=((3, 0),))


# --- enumeration / features ---------------------------------------------

def test_enumerate_counts():
    assert len(open_grid().enumerate_states()) == 16
    assert len(open_grid(blocked=((2, 2),)).enumerate_states()) == 15
    switches = GridEnv(GridSpec(width=2, height=2, action_set=("up", "toggle"), switches=((0, 0),)))
    assert len(switches.enumerate_states()) == 8


def test_enumerate_two_objects_is_ordered_pairs():
    env = GridEnv(preset("two-digit-grid"))
    states = env.enumerate_states()
    assert len(states) == 25 * 24 == env.state_count()
    assert len(set(states)) == len(states)


def test_enumerate_refuses_huge_spaces(monkeypatch):
    from config import Config
    monkeypatch.setattr(Config, "MAX_ENUMERATED_STATES", 10)
    with pytest.raises(StateSpaceTooLargeError):
        open_grid().enumerate_states()


def test_ground_truth_vectors():
    np.testing.assert_array_equal(open_grid().ground_truth(EnvState(agent=(2, 3))), [2, 3])
    two = GridEnv(preset("two-digit-grid"))
    np.testing.assert_array_equal(two.ground_truth(EnvState(objects=((0, 1), (2, 2)))), [0, 1, 2, 2])
    switches = GridEnv(preset("mazebase-switches"))
    truth = switches.ground_truth(EnvState(agent=(1, 1), switches=(0, 1)))
    assert truth[-1] == 1
    assert switches.feature_names == ["agent_x", "agent_y", "switch1", "switch2"]


def test_state_dict_round_trip():
    state = EnvState(agent=(1, 2), objects=((0, 0),), switches=(1,))
    assert EnvState.from_dict(state.to_dict()) == state


def test_validate_state_rejects_blocked_agent():
    env = GridEnv(preset("mazebase-small"))
    with pytest.raises(ConfigurationError):
        env.validate_state(EnvState(agent=(5, 2)))


def test_encode_ppm_header_and_size():
    image = np.zeros((3, 2, 3))
    image[0, 0, 0] = 1.0
    payload = encode_ppm(image)
    header = b"P6\n3 2\n255\n"
    assert payload.startswith(header)
    assert len(payload) == len(header) + 2 * 3 * 3
    assert payload[len(header):len(header) + 3] == b"\xff\x00\x00"
