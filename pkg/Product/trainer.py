"""
Training loop for controllable factors.

One ``train_step`` encodes the current state of every worker environment,
samples a factor pool per worker, executes one behavior factor for
``t_option`` steps, scores the resulting latent variation against the whole
pool and applies a single optimizer update.
"""

import copy
import json
import os
import sys
from collections import deque
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

import autodiff as ad
from autodiff import Tape, Tensor
from checkpoint import CheckpointData
from environments import PRESETS, EnvState, GridEnv, preset
from errors import ConfigurationError, NumericalAbort, UnknownPresetError
from models import ICFModel, ModelConfig
from objective import (
    KernelSpec,
    SelectivityBatch,
    autoencoder_loss,
    behavior_weights,
    entropy_loss,
    importance_weights,
    kernel_score,
    model_based_loss,
    reinforce_surrogate,
    selectivity_matrix,
)


class LossCoefficients(BaseModel):
    model_config = ConfigDict(extra="forbid")

    selectivity: float = 1.0
    autoencoder: float = 1.0
    entropy: float = 0.01
    model_based: float = 1.0


class TrainConfig(BaseModel):
    """Complete, archivable description of a training run"""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    preset: str
    mode: Literal["joint", "discrete_only"] = "joint"
    steps: int = Field(1000, ge=0)
    n_pool: int = Field(1024, ge=2)
    t_option: int = Field(1, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    epsilon_greedy: float = Field(0.05, ge=0.0, lt=1.0)
    seed: int = 0
    coefficients: LossCoefficients = Field(default_factory=LossCoefficients)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    observation: Literal["symbolic", "pixels"] = "symbolic"
    cell_px: int = Field(5, ge=5)
    episode_len: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    n_workers: int = Field(1, ge=1)
    importance_sampling: bool = True
    w_max: float = Field(10.0, gt=0.0)
    pathwise_encoder: bool = True
    use_transition: bool = False
    mb_encoder_grad: bool = False
    redundant_actions: bool = False
    allow_noop: bool = True
    open_grid: bool = False
    bound_window: int = Field(100, ge=1)

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in PRESETS:
            raise ValueError(f"unknown preset '{value}'; known presets: {', '.join(PRESETS)}")
        return value


# Named experiment templates; CLI flags and config files override fields
EXPERIMENTS: Dict[str, Dict[str, Any]] = {
    "disentangle": {
        "preset": "mazebase-small",
        "redundant_actions": True,
        "n_pool": 256,
        "t_option": 1,
        "steps": 50000,
        "model": {"latent_dim": 2},
    },
    "disentangle-open": {
        "preset": "mazebase-small",
        "redundant_actions": False,
        "open_grid": True,
        "n_pool": 256,
        "t_option": 1,
        "steps": 50000,
        "model": {"latent_dim": 2},
    },
    "multistep": {
        "preset": "mazebase-small",
        "open_grid": True,
        "n_pool": 256,
        "t_option": 3,
        "steps": 50000,
        "use_transition": True,
        "model": {"latent_dim": 2},
    },
    "discrete": {
        "preset": "two-digit-grid",
        "mode": "discrete_only",
        "steps": 100000,
        "coefficients": {"autoencoder": 0.0, "model_based": 0.0},
        "model": {"latent_dim": 4},
    },
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def format_validation_error(exc: ValidationError) -> str:
    """One 'dotted.path: message' line per pydantic error"""
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def build_config(experiment: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """
    Validate a run configuration from an optional template plus overrides

    Args:
        experiment: name in EXPERIMENTS or None
        overrides: nested dict of fields (config file contents, CLI flags)

    Returns:
        TrainConfig
    """
    data: Dict[str, Any] = {}
    if experiment is not None:
        if experiment not in EXPERIMENTS:
            raise UnknownPresetError(f"unknown experiment '{experiment}'; known: {', '.join(EXPERIMENTS)}")
        data = copy.deepcopy(EXPERIMENTS[experiment])
    data = _deep_merge(data, overrides or {})
    try:
        config = TrainConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(format_validation_error(exc)) from exc
    if config.mode == "joint" and config.model.factor_dim != config.model.latent_dim:
        raise ConfigurationError(
            f"model.factor_dim ({config.model.factor_dim}) must equal model.latent_dim "
            f"({config.model.latent_dim}) so factors can be compared with latent variations"
        )
    if config.mode == "discrete_only" and config.model.latent_dim < 2:
        raise ConfigurationError("discrete_only mode needs model.latent_dim >= 2 factors")
    return config


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a JSON config file; syntax errors report line and column"""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top-level JSON value must be an object")
    return data


# --- optimizers -----------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, params: Sequence[Tuple[str, Tensor]], lr: float):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self):
        self.t += 1
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int):
        self.t = t


class Adam:
    kind = "adam"

    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors = {f"m.{name}": m for name, m in self.m.items()}
        tensors.update({f"v.{name}": v for name, v in self.v.items()})
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int):
        for name in self.m:
            self.m[name][...] = tensors[f"m.{name}"]
            self.v[name][...] = tensors[f"v.{name}"]
        self.t = t


def make_optimizer(kind: str, params: Sequence[Tuple[str, Tensor]], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ConfigurationError(f"unknown optimizer '{kind}'")


def optimizer_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], optimizer) -> None:
    """Install gradients on parameters and take one optimizer step"""
    for p, g in zip(params, grads):
        p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    optimizer.step()


# --- trainer --------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: Dict[str, Any]):
    rng.bit_generator.state = state


def _finite(value: Optional[float]) -> bool:
    return value is None or bool(np.isfinite(value))


class Trainer:
    """Owns model, optimizer, environments and RNG streams for one run"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.spec = preset(
            config.preset,
            redundant_actions=config.redundant_actions,
            allow_noop=config.allow_noop,
            open_grid=config.open_grid,
        )
        self.env = GridEnv(self.spec, cell_px=config.cell_px)
        self.discrete = config.mode == "discrete_only"

        init_seq, sample_seq, env_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.model = ICFModel(
            config.model,
            self.env.observation_shape(config.observation),
            self.env.n_actions,
            np.random.default_rng(init_seq),
            discrete=self.discrete,
        )
        self.optimizer = make_optimizer(config.optimizer, list(self.model.named_parameters()), config.lr)
        self.rng = np.random.default_rng(sample_seq)
        self.worker_rngs = [np.random.default_rng(s) for s in env_seq.spawn(config.n_workers)]
        self.states: List[EnvState] = [self.env.sample_state(r) for r in self.worker_rngs]
        self.step = 0
        self.episode_step = 0
        self.bound_window: deque = deque(maxlen=config.bound_window)

    @property
    def pool_size(self) -> int:
        return self.config.model.latent_dim if self.discrete else self.config.n_pool

    @property
    def metric_columns(self) -> List[str]:
        actions = [f"act_{name}" for name in self.spec.action_set]
        return (["step", "selectivity", "ae_loss", "mb_loss", "entropy", "dv_bound"] + actions
                + ["total_loss", "baseline_loss", "degenerate_pools"])

    def observe(self, states: Sequence[EnvState]) -> Tensor:
        return Tensor(self.env.observe_batch(states, self.config.observation))

    # --- pieces of a step ---
    def _pool_factors(self, h: Tensor) -> Tensor:
        """[W * n, d] factors; row w * n + i is pool member i of worker w"""
        W, n = h.shape[0], self.pool_size
        if self.discrete:
            return Tensor(np.tile(np.eye(n), (W, 1)))
        z = Tensor(self.rng.standard_normal((W * n, self.config.model.noise_dim)))
        return self.model.generate_factor(ad.repeat(h, n), z).vector

    def _pool_log_probs(self, h_t: Tensor, phi: Tensor) -> Tensor:
        """[W * n, A] log pi(. | h_t, phi_i) for every pool member"""
        W, n = h_t.shape[0], self.pool_size
        if self.discrete:
            heads = self.model.discrete_mode_policies(h_t)
            stacked = ad.concat([ad.reshape(d.log_probs, (W, 1, -1)) for d in heads], axis=1)
            return ad.reshape(stacked, (W * n, self.env.n_actions))
        return self.model.policy(ad.repeat(h_t, n), phi).log_probs

    def _sample_actions(self, probs: np.ndarray) -> np.ndarray:
        """Epsilon-greedy sampling; all random draws happen regardless of branch"""
        W, A = probs.shape
        explore = self.rng.random(W) < self.config.epsilon_greedy
        random_actions = self.rng.integers(A, size=W)
        u = self.rng.random(W)
        cumulative = np.cumsum(probs, axis=1)
        cumulative[:, -1] = 1.0
        policy_actions = (u[:, None] >= cumulative).sum(axis=1)
        return np.where(explore, random_actions, policy_actions)

    def train_step(self) -> Dict[str, Any]:
        """One pool/rollout/update cycle; returns the metrics record"""
        cfg, coef = self.config, self.config.coefficients
        W, n, A, K = cfg.n_workers, self.pool_size, self.env.n_actions, cfg.model.latent_dim
        rows = np.arange(W)
        start_states = list(self.states)
        action_counts = np.zeros(A, dtype=np.int64)

        with Tape() as tape:
            obs0 = self.observe(start_states)
            h = self.model.encode(obs0)
            phi = self._pool_factors(h)
            behavior = self.rng.integers(n, size=W)

            log_prob_sum = Tensor(np.zeros((W, n)))
            entropy = Tensor(0.0)
            states, h_t = start_states, h
            for t in range(cfg.t_option):
                if t > 0:
                    h_t = self.model.encode(self.observe(states))
                log_probs = self._pool_log_probs(h_t, phi)
                behavior_rows = ad.index(log_probs, (rows * n + behavior,))
                actions = self._sample_actions(np.exp(behavior_rows.data))
                flat = (rows[:, None] * n + np.arange(n)[None, :]) * A + actions[:, None]
                log_prob_sum = log_prob_sum + ad.take(log_probs, flat)
                entropy = entropy + entropy_loss(ad.exp(behavior_rows)) * (1.0 / cfg.t_option)
                np.add.at(action_counts, actions, 1)
                states = [self.env.step(s, int(a)) for s, a in zip(states, actions)]

            obs_end = self.observe(states)
            h_prime = self.model.encode(obs_end)
            h_in, hp_in = (h, h_prime) if cfg.pathwise_encoder else (h.detach(), h_prime.detach())
            scores = kernel_score(
                ad.reshape(hp_in, (W, 1, K)), ad.reshape(h_in, (W, 1, K)),
                ad.reshape(phi, (W, n, K)), cfg.kernel, latent_dim=K,
            )
            s_matrix, degenerate = selectivity_matrix(scores, cfg.kernel.eps_floor)
            if cfg.importance_sampling:
                weights = importance_weights(log_prob_sum.data, behavior, cfg.w_max)
            else:
                weights = behavior_weights(behavior, n)
            batch = SelectivityBatch(s_matrix, log_prob_sum, behavior, weights)
            value = self.model.baseline(h.detach())
            surrogate, parts = reinforce_surrogate(batch, value)
            total = surrogate * coef.selectivity - entropy * coef.entropy

            ae = None
            if not self.discrete and coef.autoencoder > 0:
                recon = self.model.decode(ad.concat([h, h_prime], axis=0))
                ae = autoencoder_loss(ad.concat([obs0, obs_end], axis=0), recon)
                total = total + ae * coef.autoencoder

            mb = None
            if not self.discrete and cfg.use_transition:
                phi_behavior = ad.index(phi, (rows * n + behavior,)).detach()
                mb = model_based_loss(h_prime, h, phi_behavior, self.model.transition, cfg.mb_encoder_grad)
                total = total + mb * coef.model_based

        s_behavior = batch.behavior_selectivity().data
        window = deque(self.bound_window, maxlen=cfg.bound_window)
        window.extend(float(s) for s in s_behavior)
        record: Dict[str, Any] = {
            "step": self.step + 1,
            "selectivity": float(s_behavior.mean()),
            "ae_loss": None if ae is None else ae.item(),
            "mb_loss": None if mb is None else mb.item(),
            "entropy": entropy.item(),
            "dv_bound": float(np.mean(window)),
        }
        for name, count in zip(self.spec.action_set, action_counts):
            record[f"act_{name}"] = int(count)
        record["total_loss"] = total.item()
        record["baseline_loss"] = parts["baseline"].item()
        record["degenerate_pools"] = int(degenerate.sum())

        if not all(_finite(record[k]) for k in ("selectivity", "ae_loss", "mb_loss", "entropy", "total_loss")):
            raise NumericalAbort(f"non-finite loss at step {record['step']}", record)

        self.model.zero_grad()
        tape.backward(total)
        self.optimizer.step()

        self.bound_window = window
        self.states = states
        self.step += 1
        self.episode_step += 1
        if self.episode_step >= cfg.episode_len:
            self.episode_step = 0
            self.states = [self.env.sample_state(r) for r in self.worker_rngs]
        return record

    def train(
        self,
        steps: Optional[int] = None,
        on_step: Optional[Callable[["Trainer", Dict[str, Any]], None]] = None,
    ) -> List[Dict[str, Any]]:
        """
        Run train_step until config.steps (or `steps` more steps)

        Args:
            steps: number of additional steps; defaults to the remainder of config.steps
            on_step: callback after every step (progress, periodic checkpoints)

        Returns:
            Metrics records of the steps run
        """
        remaining = self.config.steps - self.step if steps is None else steps
        records = []
        for _ in range(max(remaining, 0)):
            record = self.train_step()
            records.append(record)
            if on_step is not None:
                on_step(self, record)
        return records

    # --- checkpoint state ---
    def state(self) -> CheckpointData:
        meta = {
            "config": self.config.model_dump(mode="json"),
            "step": self.step,
            "episode_step": self.episode_step,
            "optimizer": {"kind": self.optimizer.kind, "t": self.optimizer.t},
            "rng": _rng_state(self.rng),
            "worker_rngs": [_rng_state(r) for r in self.worker_rngs],
            "env_states": [s.to_dict() for s in self.states],
            "bound_window": list(self.bound_window),
        }
        return CheckpointData(
            tensors={name: arr.copy() for name, arr in self.model.state_dict().items()},
            optimizer={name: arr.copy() for name, arr in self.optimizer.state_tensors().items()},
            meta=meta,
        )

    def load_state(self, data: CheckpointData):
        meta = data.meta
        self.model.load_state_dict(data.tensors)
        self.optimizer.load_state_tensors(data.optimizer, int(meta["optimizer"]["t"]))
        _set_rng_state(self.rng, meta["rng"])
        if len(meta["worker_rngs"]) != len(self.worker_rngs):
            raise ConfigurationError("checkpoint worker count does not match the config")
        for rng, state in zip(self.worker_rngs, meta["worker_rngs"]):
            _set_rng_state(rng, state)
        self.states = [self.env.validate_state(EnvState.from_dict(s)) for s in meta["env_states"]]
        self.step = int(meta["step"])
        self.episode_step = int(meta["episode_step"])
        self.bound_window = deque(meta["bound_window"], maxlen=self.config.bound_window)

    @classmethod
    def from_checkpoint(cls, data: CheckpointData) -> "Trainer":
        try:
            config = TrainConfig.model_validate(data.meta["config"])
        except ValidationError as exc:
            raise ConfigurationError(f"checkpoint config invalid: {format_validation_error(exc)}") from exc
        except KeyError as exc:
            raise ConfigurationError(f"checkpoint meta is missing {exc}") from exc
        trainer = cls(config)
        trainer.load_state(data)
        return trainer
