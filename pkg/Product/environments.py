"""
Deterministic gridworlds used by the experiments.

Coordinates are (x, y) with x the column and y the row; "up" decreases y.
Symbolic observations are C x H x W one-hot planes, indexed [channel, y, x].
Channel order: agent (if present), blocked, one plane per object,
switch_off, switch_on (if the grid has switches).
"""

import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config
from autodiff import Tensor
from errors import ConfigurationError, InvalidActionError, StateSpaceTooLargeError, UnknownPresetError

Cell = Tuple[int, int]

PRESETS = ("mazebase-small", "mazebase-switches", "two-digit-grid")
OBSERVATION_MODES = ("symbolic", "pixels")

# Displacement of the agent for each movement action
MOVES: Dict[str, Cell] = {
    "up": (0, -1),
    "up2": (0, -1),
    "down": (0, 1),
    "left": (-1, 0),
    "right": (1, 0),
    "down+left": (-1, 1),
}
DIRECTIONS = ("up", "down", "left", "right")
SPECIAL_ACTIONS = ("pass", "toggle")

# 5x5 sprite bitmaps: odd digit looks like "1", even digit like "2"
SPRITES: Dict[str, np.ndarray] = {
    "odd": np.array([
        [0, 0, 1, 0, 0],
        [0, 1, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 1, 1, 1, 0],
    ], dtype=np.float64),
    "even": np.array([
        [0, 1, 1, 1, 0],
        [1, 0, 0, 0, 1],
        [0, 0, 1, 1, 0],
        [0, 1, 0, 0, 0],
        [1, 1, 1, 1, 1],
    ], dtype=np.float64),
}
AGENT_DISC = np.array([
    [0, 1, 1, 1, 0],
    [1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1],
    [0, 1, 1, 1, 0],
], dtype=np.float64)

COLORS = {
    "agent": (1.0, 0.0, 0.0),
    "blocked": (1.0, 0.55, 0.0),
    "switch_off": (0.0, 0.4, 0.0),
    "switch_on": (0.55, 1.0, 0.55),
    "object": (1.0, 1.0, 1.0),
}


def _object_action(name: str) -> Optional[Tuple[int, Cell]]:
    """Parse 'obj<k>_<dir>' into (object index, displacement)"""
    if not name.startswith("obj") or "_" not in name:
        return None
    head, direction = name.split("_", 1)
    if not head[3:].isdigit() or direction not in DIRECTIONS:
        return None
    return int(head[3:]) - 1, MOVES[direction]


@dataclass(frozen=True)
class GridSpec:
    """Static description of a gridworld; action_set order defines action indices"""

    width: int
    height: int
    action_set: Tuple[str, ...]
    blocked: Tuple[Cell, ...] = ()
    switches: Tuple[Cell, ...] = ()
    objects: Tuple[Tuple[str, Cell], ...] = ()
    allow_noop: bool = True
    has_agent: bool = True
    agent_start: Cell = (0, 0)
    name: str = "custom"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"grid size must be positive, got {self.width}x{self.height}")
        if not self.action_set:
            raise ConfigurationError("action_set must not be empty")
        for cell in self.blocked:
            self._check_in_bounds(cell)
        for cell in self.switches:
            self._check_free(cell, "switch")
        if self.has_agent:
            self._check_free(self.agent_start, "agent start")
        for sprite, cell in self.objects:
            if sprite not in SPRITES:
                raise ConfigurationError(f"unknown sprite '{sprite}'; known: {sorted(SPRITES)}")
            self._check_free(cell, f"object '{sprite}'")
        for action in self.action_set:
            self._check_action(action)
        if len(set(self.action_set)) != len(self.action_set):
            raise ConfigurationError(f"duplicate action names in {list(self.action_set)}")

    def _check_in_bounds(self, cell: Cell):
        x, y = cell
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ConfigurationError(f"cell {cell} outside {self.width}x{self.height} grid")

    def _check_free(self, cell: Cell, what: str):
        self._check_in_bounds(cell)
        if cell in self.blocked:
            raise ConfigurationError(f"{what} placed on blocked cell {cell}")

    def _check_action(self, action: str):
        if action in MOVES or action == "toggle":
            if not self.has_agent:
                raise ConfigurationError(f"action '{action}' needs an agent")
            return
        if action == "pass":
            if not self.allow_noop:
                raise ConfigurationError("'pass' listed while allow_noop is false")
            return
        parsed = _object_action(action)
        if parsed is None:
            raise ConfigurationError(f"unknown action name '{action}'")
        if parsed[0] >= len(self.objects):
            raise ConfigurationError(f"action '{action}' refers to a missing object")

    @property
    def n_actions(self) -> int:
        return len(self.action_set)

    def free_cells(self) -> List[Cell]:
        """Non-blocked cells in row-major order"""
        blocked = set(self.blocked)
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in blocked]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "blocked": [list(c) for c in self.blocked],
            "switches": [list(c) for c in self.switches],
            "objects": [{"sprite": s, "cell": list(c)} for s, c in self.objects],
            "action_set": list(self.action_set),
            "allow_noop": self.allow_noop,
            "has_agent": self.has_agent,
            "agent_start": list(self.agent_start),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        try:
            return cls(
                width=int(data["width"]),
                height=int(data["height"]),
                action_set=tuple(data["action_set"]),
                blocked=tuple(tuple(c) for c in data.get("blocked", [])),
                switches=tuple(tuple(c) for c in data.get("switches", [])),
                objects=tuple((o["sprite"], tuple(o["cell"])) for o in data.get("objects", [])),
                allow_noop=bool(data.get("allow_noop", True)),
                has_agent=bool(data.get("has_agent", True)),
                agent_start=tuple(data.get("agent_start", (0, 0))),
                name=data.get("name", "custom"),
            )
        except KeyError as exc:
            raise ConfigurationError(f"grid spec missing field {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "GridSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class EnvState:
    """Exact simulator state (value type)"""

    agent: Optional[Cell] = None
    objects: Tuple[Cell, ...] = ()
    switches: Tuple[int, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent": None if self.agent is None else list(self.agent),
            "objects": [list(c) for c in self.objects],
            "switches": list(self.switches),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnvState":
        agent = data.get("agent")
        return cls(
            agent=None if agent is None else tuple(agent),
            objects=tuple(tuple(c) for c in data.get("objects", [])),
            switches=tuple(int(b) for b in data.get("switches", [])),
        )


@dataclass
class Observation:
    mode: str
    data: Tensor = field(repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


class GridEnv:
    """Pure step/observe functions over a GridSpec"""

    def __init__(self, spec: GridSpec, cell_px: int = 5):
        if cell_px < 5:
            raise ConfigurationError(f"cell_px must be at least 5 to fit sprites, got {cell_px}")
        self.spec = spec
        self.cell_px = cell_px
        self._blocked = frozenset(spec.blocked)
        self._switch_index = {cell: i for i, cell in enumerate(spec.switches)}

    # --- dynamics ------------------------------------------------------
    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    def action_index(self, name: str) -> int:
        try:
            return self.spec.action_set.index(name)
        except ValueError:
            raise InvalidActionError(f"unknown action '{name}'; actions: {list(self.spec.action_set)}")

    def initial_state(self) -> EnvState:
        return EnvState(
            agent=self.spec.agent_start if self.spec.has_agent else None,
            objects=tuple(cell for _, cell in self.spec.objects),
            switches=tuple(0 for _ in self.spec.switches),
        )

    def _open(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.spec.width and 0 <= y < self.spec.height and cell not in self._blocked

    def step(self, state: EnvState, action: int) -> EnvState:
        """
        Apply one action. Moves into blocked or out-of-bounds cells leave the
        state unchanged; composite moves are checked on the final cell only.
        """
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise InvalidActionError(f"action index {action} outside [0, {self.n_actions})")
        name = self.spec.action_set[int(action)]

        if name in MOVES:
            dx, dy = MOVES[name]
            target = (state.agent[0] + dx, state.agent[1] + dy)
            return EnvState(target, state.objects, state.switches) if self._open(target) else state
        if name == "pass":
            return state
        if name == "toggle":
            i = self._switch_index.get(state.agent)
            if i is None:
                return state
            bits = list(state.switches)
            bits[i] = 1 - bits[i]
            return EnvState(state.agent, state.objects, tuple(bits))

        k, (dx, dy) = _object_action(name)
        x, y = state.objects[k]
        target = (x + dx, y + dy)
        others = state.objects[:k] + state.objects[k + 1:]
        if not self._open(target) or target in others:
            return state
        moved = state.objects[:k] + (target,) + state.objects[k + 1:]
        return EnvState(state.agent, moved, state.switches)

    def validate_state(self, state: EnvState) -> EnvState:
        cells = ([state.agent] if self.spec.has_agent else []) + list(state.objects)
        for cell in cells:
            if cell is None or not self._open(tuple(cell)):
                raise ConfigurationError(f"state cell {cell} is blocked or out of bounds")
        if len(state.objects) != len(self.spec.objects):
            raise ConfigurationError(f"state has {len(state.objects)} objects, grid has {len(self.spec.objects)}")
        if len(state.switches) != len(self.spec.switches):
            raise ConfigurationError(f"state has {len(state.switches)} switch bits, grid has {len(self.spec.switches)}")
        return state

    # --- observations --------------------------------------------------
    @property
    def channel_names(self) -> List[str]:
        names = ["agent"] if self.spec.has_agent else []
        names.append("blocked")
        names += [f"object_{sprite}" for sprite, _ in self.spec.objects]
        if self.spec.switches:
            names += ["switch_off", "switch_on"]
        return names

    def observation_shape(self, mode: str) -> Tuple[int, ...]:
        if mode == "symbolic":
            return (len(self.channel_names), self.spec.height, self.spec.width)
        if mode == "pixels":
            return (3, self.spec.height * self.cell_px, self.spec.width * self.cell_px)
        raise ConfigurationError(f"unknown observation mode '{mode}'; expected one of {OBSERVATION_MODES}")

    def symbolic_planes(self, state: EnvState) -> np.ndarray:
        planes = np.zeros(self.observation_shape("symbolic"))
        c = 0
        if self.spec.has_agent:
            planes[0, state.agent[1], state.agent[0]] = 1.0
            c = 1
        for x, y in self.spec.blocked:
            planes[c, y, x] = 1.0
        c += 1
        for k, (x, y) in enumerate(state.objects):
            planes[c + k, y, x] = 1.0
        c += len(state.objects)
        for (x, y), bit in zip(self.spec.switches, state.switches):
            planes[c + int(bit), y, x] = 1.0
        return planes

    def render_pixels(self, state: EnvState) -> np.ndarray:
        """RGB image in [0, 1] with shape 3 x H_px x W_px"""
        px = self.cell_px
        image = np.zeros(self.observation_shape("pixels"))

        def paint(cell: Cell, mask: np.ndarray, color: Sequence[float]):
            x, y = cell
            for ch in range(3):
                patch = image[ch, y * px:(y + 1) * px, x * px:(x + 1) * px]
                patch[mask > 0] = color[ch]

        full = np.ones((px, px))
        for cell in self.spec.blocked:
            paint(cell, full, COLORS["blocked"])
        for cell, bit in zip(self.spec.switches, state.switches):
            paint(cell, full, COLORS["switch_on" if bit else "switch_off"])
        for (sprite, _), cell in zip(self.spec.objects, state.objects):
            paint(cell, self._scaled(SPRITES[sprite]), COLORS["object"])
        if self.spec.has_agent:
            paint(state.agent, self._scaled(AGENT_DISC), COLORS["agent"])
        return image

    def _scaled(self, bitmap: np.ndarray) -> np.ndarray:
        factor = self.cell_px // bitmap.shape[0]
        big = np.kron(bitmap, np.ones((factor, factor)))
        pad = self.cell_px - big.shape[0]
        return np.pad(big, ((pad // 2, pad - pad // 2), (pad // 2, pad - pad // 2)))

    def observe(self, state: EnvState, mode: str = "symbolic") -> Observation:
        if mode == "symbolic":
            return Observation(mode, Tensor(self.symbolic_planes(state)))
        if mode == "pixels":
            return Observation(mode, Tensor(self.render_pixels(state)))
        raise ConfigurationError(f"unknown observation mode '{mode}'; expected one of {OBSERVATION_MODES}")

    def observe_batch(self, states: Sequence[EnvState], mode: str = "symbolic") -> np.ndarray:
        render = self.symbolic_planes if mode == "symbolic" else self.render_pixels
        if mode not in OBSERVATION_MODES:
            raise ConfigurationError(f"unknown observation mode '{mode}'")
        return np.stack([render(s) for s in states])

    def state_from_observation(self, data: np.ndarray, mode: str = "symbolic") -> EnvState:
        """Closest valid state to an observation-shaped array (e.g. a decoder output)"""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.observation_shape(mode):
            raise ConfigurationError(f"observation shape {data.shape} != {self.observation_shape(mode)}")
        if mode == "pixels":
            states = self.enumerate_states()
            errors = [np.sum((self.render_pixels(s) - data) ** 2) for s in states]
            return states[int(np.argmin(errors))]

        free = self.spec.free_cells()
        ys, xs = np.array([c[1] for c in free]), np.array([c[0] for c in free])
        c = 0
        agent = None
        if self.spec.has_agent:
            agent = free[int(np.argmax(data[0, ys, xs]))]
            c = 1
        c += 1
        objects: List[Cell] = []
        for k in range(len(self.spec.objects)):
            scores = data[c + k, ys, xs].copy()
            for taken in objects:
                scores[free.index(taken)] = -np.inf
            objects.append(free[int(np.argmax(scores))])
        c += len(self.spec.objects)
        switches = tuple(int(data[c + 1, y, x] > data[c, y, x]) for x, y in self.spec.switches)
        return EnvState(agent, tuple(objects), switches)

    # --- enumeration / features ----------------------------------------
    def state_count(self) -> int:
        n_free = len(self.spec.free_cells())
        count = n_free if self.spec.has_agent else 1
        for k in range(len(self.spec.objects)):
            count *= max(n_free - k, 0)
        return count * 2 ** len(self.spec.switches)

    def enumerate_states(self) -> List[EnvState]:
        """All reachable-by-construction states in a fixed deterministic order"""
        count = self.state_count()
        if count > Config.MAX_ENUMERATED_STATES:
            raise StateSpaceTooLargeError(
                f"{count} states exceed the enumeration limit of {Config.MAX_ENUMERATED_STATES}"
            )
        free = self.spec.free_cells()
        agents: Sequence[Optional[Cell]] = free if self.spec.has_agent else [None]
        placements = list(itertools.permutations(free, len(self.spec.objects)))
        bits = list(itertools.product((0, 1), repeat=len(self.spec.switches)))
        return [
            EnvState(agent, objects, switch_bits)
            for agent in agents
            for objects in placements
            for switch_bits in bits
        ]

    def sample_state(self, rng: np.random.Generator) -> EnvState:
        free = self.spec.free_cells()
        agent = free[int(rng.integers(len(free)))] if self.spec.has_agent else None
        picks = rng.choice(len(free), size=len(self.spec.objects), replace=False)
        objects = tuple(free[int(i)] for i in picks)
        switches = tuple(int(b) for b in rng.integers(0, 2, size=len(self.spec.switches)))
        return EnvState(agent, objects, switches)

    @property
    def feature_names(self) -> List[str]:
        names = ["agent_x", "agent_y"] if self.spec.has_agent else []
        for k, (sprite, _) in enumerate(self.spec.objects):
            names += [f"obj{k + 1}_x", f"obj{k + 1}_y"]
        names += [f"switch{i + 1}" for i in range(len(self.spec.switches))]
        return names

    def ground_truth(self, state: EnvState) -> np.ndarray:
        values: List[float] = list(state.agent) if self.spec.has_agent else []
        for cell in state.objects:
            values += list(cell)
        values += list(state.switches)
        return np.array(values, dtype=np.float64)


def preset(
    name: str,
    redundant_actions: bool = False,
    allow_noop: bool = True,
    open_grid: bool = False,
) -> GridSpec:
    """
    Build one of the named experiment grids

    Args:
        name: mazebase-small, mazebase-switches or two-digit-grid
        redundant_actions: mazebase-small only; adds up2 and down+left
        allow_noop: when false the 'pass' action is removed
        open_grid: mazebase-small only; drops the single blocked cell

    Returns:
        GridSpec
    """
    if name == "mazebase-small":
        actions = ("up", "up2", "down", "left", "right", "down+left") if redundant_actions else DIRECTIONS
        return GridSpec(
            width=8, height=8, action_set=tuple(actions),
            blocked=() if open_grid else ((5, 2),),
            allow_noop=allow_noop, agent_start=(0, 0), name=name,
        )
    if name == "mazebase-switches":
        actions = ("up", "left", "pass", "right", "toggle", "down")
        if not allow_noop:
            actions = tuple(a for a in actions if a != "pass")
        return GridSpec(
            width=4, height=4, action_set=actions,
            switches=((0, 0), (3, 3)),
            allow_noop=allow_noop, agent_start=(1, 1), name=name,
        )
    if name == "two-digit-grid":
        actions = tuple(f"obj{k}_{d}" for k in (1, 2) for d in DIRECTIONS)
        return GridSpec(
            width=5, height=5, action_set=actions,
            objects=(("odd", (0, 0)), ("even", (4, 4))),
            allow_noop=allow_noop, has_agent=False, name=name,
        )
    raise UnknownPresetError(f"unknown preset '{name}'; known presets: {', '.join(PRESETS)}")


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary PPM (P6) bytes for a 3 x H x W image in [0, 1]"""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"PPM export expects a 3 x H x W image, got {image.shape}")
    _, height, width = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + np.transpose(pixels, (1, 2, 0)).tobytes()
