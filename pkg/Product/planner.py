"""
Latent-space prediction and one-step plan inference.

Prototypes are per-action centroids of dh. A start/goal latent difference
is decomposed greedily into a multiset of prototype labels; the multiset is
executed in the environment in whatever order the grid allows.
"""

import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from autodiff import Tensor
from analysis import ACTION_ALIASES, VariationRecord, encode_states, evaluation_mode
from environments import EnvState, GridEnv
from errors import ConfigurationError, PlanningError

ZERO_NORM = 1e-12


@dataclass
class FactorPrototypeSet:
    """
    Active prototypes (pairwise distinct) plus the labels flagged as
    duplicates of an active one
    """

    labels: List[str]
    modes: np.ndarray
    factors: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    duplicates: Dict[str, str] = field(default_factory=dict)
    duplicate_modes: Dict[str, np.ndarray] = field(default_factory=dict)
    source: str = "clustered"

    def __post_init__(self):
        self.modes = np.atleast_2d(np.asarray(self.modes, dtype=np.float64))
        if not self.labels:
            raise PlanningError("prototype set is empty")
        if len(self.labels) != len(self.modes):
            raise ConfigurationError("one mode per prototype label is required")

    @classmethod
    def from_mapping(cls, modes: Dict[str, Sequence[float]], source: str = "canonical") -> "FactorPrototypeSet":
        labels = list(modes)
        return cls(labels=labels, modes=np.array([modes[l] for l in labels], dtype=np.float64), source=source)

    def mode(self, label: str) -> np.ndarray:
        if label in self.labels:
            return self.modes[self.labels.index(label)]
        if label in self.duplicate_modes:
            return self.duplicate_modes[label]
        raise PlanningError(f"unknown prototype label '{label}'; known: {self.labels}")

    def factor(self, label: str) -> np.ndarray:
        canonical = self.duplicates.get(label, label)
        if canonical not in self.factors:
            raise PlanningError(f"no mean factor recorded for '{label}'")
        return self.factors[canonical]

    @property
    def min_norm(self) -> float:
        norms = np.linalg.norm(self.modes, axis=1)
        norms = norms[norms > ZERO_NORM]
        return float(norms.min()) if norms.size else 0.0


def _sorted_rows(values: np.ndarray) -> np.ndarray:
    return values[np.lexsort(values.T[::-1])]


def extract_prototypes(records: Sequence[VariationRecord], min_count: int = 5,
                       duplicate_fraction: float = 0.2, duplicate_tol: Optional[float] = None) -> FactorPrototypeSet:
    """
    Per-action dh centroids from single-step variation records

    Args:
        records: VariationRecords with one action each
        min_count: actions with fewer records are dropped
        duplicate_fraction: tolerance as a fraction of the median centroid distance
        duplicate_tol: explicit tolerance (overrides duplicate_fraction)

    Returns:
        FactorPrototypeSet; a centroid within tolerance of an earlier-accepted
        one is flagged as its duplicate. Canonical action names are accepted
        before aliases, then larger clusters first.
    """
    if not records:
        raise PlanningError("cannot extract prototypes from an empty record list")
    dh_groups: Dict[str, List[np.ndarray]] = {}
    phi_groups: Dict[str, List[np.ndarray]] = {}
    for r in records:
        if len(r.actions) != 1:
            raise ConfigurationError("prototype extraction needs single-step records")
        dh_groups.setdefault(r.actions[0], []).append(np.asarray(r.dh, dtype=np.float64))
        phi_groups.setdefault(r.actions[0], []).append(np.asarray(r.phi, dtype=np.float64))

    kept = {label: rows for label, rows in dh_groups.items() if len(rows) >= min_count}
    if not kept:
        raise PlanningError(f"no action has at least {min_count} records")
    centroids = {label: _sorted_rows(np.stack(rows)).mean(axis=0) for label, rows in kept.items()}
    factors = {label: _sorted_rows(np.stack(phi_groups[label])).mean(axis=0) for label in kept}

    if duplicate_tol is None:
        names = sorted(centroids)
        pairwise = [np.linalg.norm(centroids[a] - centroids[b]) for i, a in enumerate(names) for b in names[i + 1:]]
        duplicate_tol = duplicate_fraction * float(np.median(pairwise)) if pairwise else 0.0

    order = sorted(kept, key=lambda l: (l in ACTION_ALIASES, -len(kept[l]), l))
    labels: List[str] = []
    duplicates: Dict[str, str] = {}
    for label in order:
        nearest = min(labels, key=lambda a: np.linalg.norm(centroids[a] - centroids[label]), default=None)
        if nearest is not None and np.linalg.norm(centroids[nearest] - centroids[label]) < duplicate_tol:
            duplicates[label] = nearest
        else:
            labels.append(label)
    labels.sort()
    return FactorPrototypeSet(
        labels=labels,
        modes=np.stack([centroids[l] for l in labels]),
        factors=factors,
        counts={l: len(kept[l]) for l in sorted(kept)},
        duplicates=duplicates,
        duplicate_modes={l: centroids[l] for l in duplicates},
        source="clustered",
    )


# --- prediction -------------------------------------------------------------

def predict(h: np.ndarray, label: str, prototypes: FactorPrototypeSet, mode: str = "additive",
            trainer=None) -> np.ndarray:
    """
    Predicted latent after executing the factor behind `label`

    additive: h + dh_prototype(label); learned: T(h, mean phi of label)
    """
    h = np.asarray(h, dtype=np.float64)
    if mode == "additive":
        return h + prototypes.mode(label)
    if mode == "learned":
        if trainer is None or trainer.discrete or not trainer.config.use_transition:
            raise ConfigurationError("learned prediction needs a joint-mode run trained with use_transition")
        with evaluation_mode(trainer.model) as model:
            return model.transition(Tensor(h), Tensor(prototypes.factor(label))).data
    raise ConfigurationError(f"unknown prediction mode '{mode}'; expected additive or learned")


def predicted_trajectory(h: np.ndarray, labels: Sequence[str], prototypes: FactorPrototypeSet,
                         mode: str = "additive", trainer=None) -> List[np.ndarray]:
    """Latents h_0, h_1, ..., h_k: the start and the prediction after each label"""
    trajectory = [np.asarray(h, dtype=np.float64)]
    for label in labels:
        trajectory.append(predict(trajectory[-1], label, prototypes, mode, trainer))
    return trajectory


def predict_sequence(h: np.ndarray, labels: Sequence[str], prototypes: FactorPrototypeSet,
                     mode: str = "additive", trainer=None) -> np.ndarray:
    return predicted_trajectory(h, labels, prototypes, mode, trainer)[-1]


def decode_prediction(trainer, h_pred: np.ndarray) -> np.ndarray:
    """Observation-shaped decoder output for a predicted latent"""
    with evaluation_mode(trainer.model) as model:
        return model.decode(Tensor(np.asarray(h_pred, dtype=np.float64))).data


# --- decomposition ------------------------------------------------------------

@dataclass
class Plan:
    labels: List[str]
    residual_norm: float
    converged: bool

    def multiset(self) -> Dict[str, int]:
        return dict(Counter(self.labels))

    def to_dict(self, start: Any = None, goal: Any = None) -> Dict[str, Any]:
        return {
            "start": start,
            "goal": goal,
            "labels": list(self.labels),
            "residual_norm": self.residual_norm,
            "converged": self.converged,
        }


def decompose(h_start: np.ndarray, h_goal: np.ndarray, prototypes: FactorPrototypeSet,
              max_steps: int = 32, tau: Optional[float] = None) -> Plan:
    """
    Greedy residual matching of h_goal - h_start against the prototypes

    Each step picks the prototype maximizing <r, m> / ||m||^2 and subtracts
    it. Stops when ||r|| < tau (default 0.25 * smallest prototype norm), when
    no prototype scores above 1/2 (none would shrink the residual), or after
    max_steps. Labels come back sorted (the plan is a multiset).
    """
    residual = np.asarray(h_goal, dtype=np.float64) - np.asarray(h_start, dtype=np.float64)
    norms = np.linalg.norm(prototypes.modes, axis=1)
    usable = norms > ZERO_NORM
    if not usable.any():
        raise PlanningError("every prototype has zero norm")
    modes = prototypes.modes[usable]
    labels = [l for l, ok in zip(prototypes.labels, usable) if ok]
    sq_norms = norms[usable] ** 2
    tau = 0.25 * float(norms[usable].min()) if tau is None else tau

    chosen: List[str] = []
    while np.linalg.norm(residual) >= tau and len(chosen) < max_steps:
        scores = modes @ residual / sq_norms
        best = int(np.argmax(scores))
        if scores[best] <= 0.5:
            break
        residual = residual - modes[best]
        chosen.append(labels[best])
    norm = float(np.linalg.norm(residual))
    return Plan(sorted(chosen), norm, norm < tau)


def decompose_learned(trainer, h_start: np.ndarray, h_goal: np.ndarray, prototypes: FactorPrototypeSet,
                      max_steps: int = 32, tau: Optional[float] = None) -> Plan:
    """Greedy composition through the learned transition: take the label whose T-prediction lands closest to the goal"""
    h_goal = np.asarray(h_goal, dtype=np.float64)
    h = np.asarray(h_start, dtype=np.float64)
    tau = 0.25 * prototypes.min_norm if tau is None else tau
    chosen: List[str] = []
    distance = float(np.linalg.norm(h_goal - h))
    while distance >= tau and len(chosen) < max_steps:
        candidates = [(float(np.linalg.norm(h_goal - predict(h, l, prototypes, "learned", trainer))), l)
                      for l in prototypes.labels]
        best_distance, best_label = min(candidates)
        if best_distance >= distance:
            break
        h = predict(h, best_label, prototypes, "learned", trainer)
        distance = best_distance
        chosen.append(best_label)
    return Plan(sorted(chosen), distance, distance < tau)


# --- execution ------------------------------------------------------------------

@dataclass
class ExecutionResult:
    final_state: EnvState
    executed: List[str]
    remaining: List[str]

    @property
    def complete(self) -> bool:
        return not self.remaining


def execute_plan(env: GridEnv, start: EnvState, labels: Sequence[str]) -> ExecutionResult:
    """
    Apply a label multiset in an order the grid allows

    Orders are searched depth-first (distinct labels in sorted order); a
    label whose move leaves the state unchanged is never taken. When no
    order executes every label, the longest executable prefix is kept.
    """
    remaining = tuple(sorted(labels))
    for label in remaining:
        env.action_index(label)
    best: List[Any] = [[], start]
    dead = set()

    def search(state: EnvState, left: Tuple[str, ...], done: List[str]) -> bool:
        if len(done) > len(best[0]):
            best[0], best[1] = list(done), state
        if not left:
            return True
        if (state, left) in dead:
            return False
        for label in sorted(set(left)):
            nxt = env.step(state, env.action_index(label))
            if nxt == state:
                continue
            i = left.index(label)
            done.append(label)
            if search(nxt, left[:i] + left[i + 1:], done):
                return True
            done.pop()
        dead.add((state, left))
        return False

    search(start, remaining, [])
    executed, final_state = best
    rest = list(remaining)
    for label in executed:
        rest.remove(label)
    return ExecutionResult(final_state, executed, rest)


def state_at(env: GridEnv, cell: Tuple[int, int]) -> EnvState:
    """Initial state with the agent moved to `cell`; rejects blocked or out-of-bounds cells"""
    if not env.spec.has_agent:
        raise PlanningError(f"preset '{env.spec.name}' has no agent to place")
    cell = (int(cell[0]), int(cell[1]))
    x, y = cell
    if not (0 <= x < env.spec.width and 0 <= y < env.spec.height):
        raise PlanningError(f"cell {cell} is outside the {env.spec.width}x{env.spec.height} grid")
    if cell in env.spec.blocked:
        raise PlanningError(f"cell {cell} is blocked and cannot be reached")
    base = env.initial_state()
    return EnvState(cell, base.objects, base.switches)


def plan_between_cells(trainer, prototypes: FactorPrototypeSet, start: Tuple[int, int], goal: Tuple[int, int],
                       mode: str = "additive", max_steps: int = 32) -> Tuple[Plan, EnvState, EnvState]:
    env = trainer.env
    start_state, goal_state = state_at(env, start), state_at(env, goal)
    h = encode_states(trainer, [start_state, goal_state])
    if mode == "additive":
        plan = decompose(h[0], h[1], prototypes, max_steps)
    elif mode == "learned":
        plan = decompose_learned(trainer, h[0], h[1], prototypes, max_steps)
    else:
        raise ConfigurationError(f"unknown plan mode '{mode}'; expected additive or learned")
    return plan, start_state, goal_state


def states_within(env: GridEnv, start: EnvState, max_moves: int) -> Dict[EnvState, int]:
    """Breadth-first move distance to every state reachable in at most max_moves steps"""
    distance = {start: 0}
    frontier = [start]
    for depth in range(1, max_moves + 1):
        nxt = []
        for state in frontier:
            for a in range(env.n_actions):
                child = env.step(state, a)
                if child not in distance:
                    distance[child] = depth
                    nxt.append(child)
        frontier = nxt
    return distance


def planning_success_rate(trainer, prototypes: FactorPrototypeSet, max_moves: int = 3,
                          mode: str = "additive", max_steps: int = 32) -> Dict[str, Any]:
    """
    Plan and execute between every free start cell and every state 1..max_moves
    moves away; success means execution lands exactly on the goal state
    """
    env = trainer.env
    cache: Dict[EnvState, np.ndarray] = {}

    def latent(state: EnvState) -> np.ndarray:
        if state not in cache:
            cache[state] = encode_states(trainer, [state])[0]
        return cache[state]

    pairs, reached, failures = 0, 0, []
    for cell in env.spec.free_cells():
        start = state_at(env, cell)
        for goal, depth in sorted(states_within(env, start, max_moves).items(), key=lambda kv: (kv[1], str(kv[0]))):
            if depth == 0:
                continue
            if mode == "learned":
                plan = decompose_learned(trainer, latent(start), latent(goal), prototypes, max_steps)
            else:
                plan = decompose(latent(start), latent(goal), prototypes, max_steps)
            pairs += 1
            if execute_plan(env, start, plan.labels).final_state == goal:
                reached += 1
            elif len(failures) < 20:
                failures.append({"start": start.to_dict(), "goal": goal.to_dict(), "labels": plan.labels})
    return {
        "pairs": pairs,
        "reached": reached,
        "success_rate": reached / pairs if pairs else None,
        "failures": failures,
    }
