"""
Learned function stack: encoder f, decoder g, factor generator Phi(h, z),
policy pi(a | h, phi), baseline V(h) and latent transition T(h, phi).

All public methods accept a single example (rank-1 latent, C x H x W
observation) or a batch with a leading batch axis, and return the matching
rank. Every parameter is a leaf Tensor; no randomness is drawn here except at
initialization.
"""

import os
import sys
import warnings
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config
import autodiff as ad
from autodiff import Tensor
from environments import Observation
from errors import ConfigurationError, DimensionError

PROJECTIONS = ("hypercube", "hypersphere", "simplex", "scaled_simplex")


class ModelConfig(BaseModel):
    """Architecture settings; factor_dim defaults to latent_dim"""

    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(2, ge=1)
    noise_dim: int = Field(2, ge=1)
    factor_dim: Optional[int] = Field(None, ge=1)
    hidden: int = Field(32, ge=1)
    encoder: Literal["mlp", "conv4"] = "mlp"
    projection: Literal["hypercube", "hypersphere", "simplex", "scaled_simplex"] = "hypercube"
    slope: float = Field(0.01, ge=0.0, lt=1.0)
    use_batchnorm: bool = False
    fusion_bias: bool = True
    conv_channels: Tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _default_factor_dim(self) -> "ModelConfig":
        if self.factor_dim is None:
            self.factor_dim = self.latent_dim
        return self

    @property
    def factor_size(self) -> int:
        """Width of the generator's raw output (one extra scale for scaled_simplex)"""
        return self.factor_dim + 1 if self.projection == "scaled_simplex" else self.factor_dim


@dataclass
class Factor:
    vector: Tensor
    projection: str

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


@dataclass
class PolicyDist:
    probs: Tensor
    log_probs: Tensor

    @property
    def n_actions(self) -> int:
        return self.probs.shape[-1]


# --- building blocks ----------------------------------------------------

class Module:
    """Parameter container; attributes that are Tensors with requires_grad or Modules are registered"""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: Tensor):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module"):
        setattr(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Feature batchnorm for B x F inputs, channel batchnorm for B x C x H x W"""

    def __init__(self, features: int, momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.register_buffer("running_mean", Tensor(np.zeros(features)))
        self.register_buffer("running_var", Tensor(np.ones(features)))
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batchnorm(
            x, self.gamma, self.beta,
            training=self.training,
            running_mean=self.running_mean.data,
            running_var=self.running_var.data,
            momentum=self.momentum,
        )


class MLP(Module):
    """Linear layers with leaky-ReLU (optionally batchnorm) between them; linear output"""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, slope: float = 0.01, batchnorm: bool = False):
        super().__init__()
        self.slope = slope
        self.depth = len(sizes) - 1
        self.use_batchnorm = batchnorm
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.add_module(f"fc{i}", Linear(n_in, n_out, rng))
            if batchnorm and i < self.depth - 1:
                self.add_module(f"bn{i}", BatchNorm(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"fc{i}")(x)
            if i < self.depth - 1:
                if self.use_batchnorm:
                    x = getattr(self, f"bn{i}")(x)
                x = ad.leaky_relu(x, self.slope)
        return x


def _conv_sizes(size: int, n_layers: int, k: int, s: int) -> List[int]:
    sizes = [size]
    for _ in range(n_layers):
        if sizes[-1] < k:
            raise ConfigurationError(
                f"conv encoder input {size} shrinks below kernel {k} after {len(sizes) - 1} layers; "
                f"use fewer conv_channels, a larger cell_px or the mlp encoder"
            )
        sizes.append((sizes[-1] - k) // s + 1)
    return sizes


class ConvEncoder(Module):
    def __init__(self, obs_shape: Tuple[int, int, int], cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        channels, height, width = obs_shape
        k, s = cfg.kernel_size, cfg.stride
        self.heights = _conv_sizes(height, len(cfg.conv_channels), k, s)
        self.widths = _conv_sizes(width, len(cfg.conv_channels), k, s)
        self.stride, self.slope = s, cfg.slope
        self.n_layers = len(cfg.conv_channels)
        self.use_batchnorm = cfg.use_batchnorm
        c_prev = channels
        for i, c in enumerate(cfg.conv_channels):
            setattr(self, f"conv{i}", _uniform(rng, c_prev * k * k, (c, c_prev, k, k)))
            setattr(self, f"conv{i}_bias", _uniform(rng, c_prev * k * k, (c, 1, 1)))
            if cfg.use_batchnorm:
                self.add_module(f"conv{i}_bn", BatchNorm(c))
            c_prev = c
        self.flat = c_prev * self.heights[-1] * self.widths[-1]
        self.head = MLP([self.flat, cfg.hidden, cfg.latent_dim], rng, cfg.slope, cfg.use_batchnorm)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = ad.conv2d(x, getattr(self, f"conv{i}"), stride=self.stride) + getattr(self, f"conv{i}_bias")
            if self.use_batchnorm:
                x = getattr(self, f"conv{i}_bn")(x)
            x = ad.leaky_relu(x, self.slope)
        return self.head(ad.reshape(x, (x.shape[0], self.flat)))


class ConvDecoder(Module):
    """Transposed mirror of ConvEncoder with ReLU; output paddings restore the exact input size"""

    def __init__(self, encoder: ConvEncoder, obs_shape: Tuple[int, int, int], cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        k, s = cfg.kernel_size, cfg.stride
        chans = [obs_shape[0]] + list(cfg.conv_channels)
        self.top = (chans[-1], encoder.heights[-1], encoder.widths[-1])
        self.stride = s
        self.n_layers = len(cfg.conv_channels)
        self.head = MLP([cfg.latent_dim, cfg.hidden, encoder.flat], rng, 0.0)
        self.paddings = []
        for j, i in enumerate(reversed(range(self.n_layers))):
            c_out, c_in = chans[i + 1], chans[i]
            setattr(self, f"deconv{j}", _uniform(rng, c_out * k * k, (c_out, c_in, k, k)))
            setattr(self, f"deconv{j}_bias", _uniform(rng, c_out * k * k, (c_in, 1, 1)))
            pad_h = encoder.heights[i] - ((encoder.heights[i + 1] - 1) * s + k)
            pad_w = encoder.widths[i] - ((encoder.widths[i + 1] - 1) * s + k)
            self.paddings.append((pad_h, pad_w))

    def __call__(self, h: Tensor) -> Tensor:
        x = ad.relu(self.head(h))
        x = ad.reshape(x, (h.shape[0],) + self.top)
        for j in range(self.n_layers):
            x = ad.conv_transpose2d(x, getattr(self, f"deconv{j}"), self.stride, self.paddings[j])
            x = x + getattr(self, f"deconv{j}_bias")
            if j < self.n_layers - 1:
                x = ad.relu(x)
        return x


# --- factor projection ---------------------------------------------------

def project_factor(raw: Tensor, mode: str) -> Factor:
    """
    Map a raw generator output onto the configured factor manifold

    Args:
        raw: [d] or [B, d] tensor (d = factor_dim, plus one for scaled_simplex)
        mode: hypercube | hypersphere | simplex | scaled_simplex

    Returns:
        Factor with the projected vector
    """
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    if mode == "hypercube":
        return Factor(ad.tanh(raw), mode)
    if mode == "hypersphere":
        norms = np.sqrt((raw.data ** 2).sum(axis=-1))
        if np.any(norms <= Config.NORM_EPSILON):
            warnings.warn("zero-norm factor projected onto the hypersphere; using the epsilon floor", RuntimeWarning)
        return Factor(ad.l2_normalize(raw, axis=-1), mode)
    if mode == "simplex":
        return Factor(ad.softmax(raw, axis=-1), mode)
    if mode == "scaled_simplex":
        if raw.shape[-1] < 2:
            raise DimensionError("scaled_simplex needs at least one simplex component plus a scale")
        lead = (slice(None),) * (raw.ndim - 1)
        weights = ad.softmax(raw[lead + (slice(None, -1),)], axis=-1)
        scale = ad.tanh(raw[lead + (slice(-1, None),)])
        return Factor(weights * scale, mode)
    raise ConfigurationError(f"unknown projection '{mode}'; expected one of {PROJECTIONS}")


def _with_bias(x: Tensor) -> Tensor:
    """Append a constant 1 so bilinear fusion keeps the linear terms of both inputs"""
    return ad.concat([x, Tensor(np.ones((x.shape[0], 1)))], axis=1)


# --- full model ----------------------------------------------------------

class ICFModel(Module):
    """
    Encoder/decoder plus factor-conditioned heads.

    Joint mode owns generator, policy, baseline and transition over bilinear
    fusions. Discrete mode replaces generator and policy with latent_dim
    independent policy heads over h and has no decoder.
    """

    def __init__(
        self,
        config: ModelConfig,
        obs_shape: Tuple[int, ...],
        n_actions: int,
        rng: np.random.Generator,
        discrete: bool = False,
    ):
        super().__init__()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "obs_shape", tuple(obs_shape))
        object.__setattr__(self, "n_actions", n_actions)
        object.__setattr__(self, "discrete", discrete)
        cfg = config
        K, hidden, slope, bn = cfg.latent_dim, cfg.hidden, cfg.slope, cfg.use_batchnorm
        obs_size = int(np.prod(obs_shape))

        if cfg.encoder == "conv4":
            if len(obs_shape) != 3:
                raise ConfigurationError(f"conv4 encoder needs C x H x W observations, got {obs_shape}")
            self.encoder = ConvEncoder(tuple(obs_shape), cfg, rng)
            if not discrete:
                self.decoder = ConvDecoder(self.encoder, tuple(obs_shape), cfg, rng)
        else:
            self.encoder = MLP([obs_size, hidden, hidden, K], rng, slope, bn)
            if not discrete:
                self.decoder = MLP([K, hidden, hidden, obs_size], rng, 0.0)

        if discrete:
            object.__setattr__(self, "n_factors", K)
            for i in range(K):
                self.add_module(f"head{i}", MLP([K, hidden, n_actions], rng, slope))
        else:
            object.__setattr__(self, "n_factors", None)
            d = cfg.factor_dim
            pad = 1 if cfg.fusion_bias else 0
            self.generator = MLP([(K + pad) * (cfg.noise_dim + pad), hidden, cfg.factor_size], rng, slope, bn)
            self.policy_net = MLP([(K + pad) * (d + pad), hidden, n_actions], rng, slope, bn)
            self.transition_net = MLP([(K + pad) * (d + pad), hidden, K], rng, slope)
        self.baseline_net = MLP([K, hidden, 1], rng, slope)

    # --- shape helpers ---
    def _latent_batch(self, h: Tensor, width: int, what: str) -> Tuple[Tensor, bool]:
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.shape[-1] != width or h.ndim not in (1, 2):
            raise DimensionError(f"{what} expects [{width}] or [B, {width}], got {h.shape}")
        if h.ndim == 1:
            return ad.reshape(h, (1, width)), True
        return h, False

    @staticmethod
    def _unbatch(x: Tensor, single: bool) -> Tensor:
        return ad.reshape(x, x.shape[1:]) if single else x

    def fuse(self, a: Tensor, b: Tensor) -> Tensor:
        """Bilinear fusion of two [B, .] inputs; with fusion_bias both carry an appended 1"""
        if self.config.fusion_bias:
            return ad.bilinear(_with_bias(a), _with_bias(b))
        return ad.bilinear(a, b)

    # --- operations ---
    def encode(self, obs: Union[Observation, Tensor, np.ndarray]) -> Tensor:
        x = obs.data if isinstance(obs, Observation) else obs
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.shape == self.obs_shape
        if not single and x.shape[1:] != self.obs_shape:
            raise DimensionError(f"encoder expects observations of shape {self.obs_shape}, got {x.shape}")
        if single:
            x = ad.reshape(x, (1,) + self.obs_shape)
        if self.config.encoder == "mlp":
            x = ad.reshape(x, (x.shape[0], int(np.prod(self.obs_shape))))
        return self._unbatch(self.encoder(x), single)

    def decode(self, h: Tensor) -> Tensor:
        if self.discrete:
            raise ConfigurationError("discrete-mode models have no decoder")
        h, single = self._latent_batch(h, self.config.latent_dim, "decode")
        out = ad.reshape(self.decoder(h), (h.shape[0],) + self.obs_shape)
        return self._unbatch(out, single)

    def generate_factor(self, h: Tensor, z: Tensor) -> Factor:
        self._require_joint("generate_factor")
        h, single = self._latent_batch(h, self.config.latent_dim, "generate_factor")
        z, _ = self._latent_batch(z, self.config.noise_dim, "generate_factor noise")
        if z.shape[0] != h.shape[0]:
            raise DimensionError(f"generate_factor batch mismatch: h {h.shape}, z {z.shape}")
        raw = self.generator(self.fuse(h, z))
        factor = project_factor(raw, self.config.projection)
        return Factor(self._unbatch(factor.vector, single), factor.projection)

    def _fused(self, h: Tensor, phi: Union[Factor, Tensor], what: str) -> Tuple[Tensor, bool]:
        vector = phi.vector if isinstance(phi, Factor) else phi
        h, single = self._latent_batch(h, self.config.latent_dim, what)
        vector, _ = self._latent_batch(vector, self.config.factor_dim, f"{what} factor")
        if vector.shape[0] != h.shape[0]:
            raise DimensionError(f"{what} batch mismatch: h {h.shape}, phi {vector.shape}")
        return self.fuse(h, vector), single

    def policy(self, h: Tensor, phi: Union[Factor, Tensor]) -> PolicyDist:
        self._require_joint("policy")
        fused, single = self._fused(h, phi, "policy")
        log_probs = ad.log_softmax(self.policy_net(fused), axis=-1)
        log_probs = self._unbatch(log_probs, single)
        return PolicyDist(ad.exp(log_probs), log_probs)

    def baseline(self, h: Tensor) -> Tensor:
        h, single = self._latent_batch(h, self.config.latent_dim, "baseline")
        values = ad.reshape(self.baseline_net(h), (h.shape[0],))
        return ad.reshape(values, ()) if single else values

    def transition(self, h: Tensor, phi: Union[Factor, Tensor]) -> Tensor:
        self._require_joint("transition")
        fused, single = self._fused(h, phi, "transition")
        return self._unbatch(self.transition_net(fused), single)

    def discrete_mode_policies(self, h: Tensor) -> List[PolicyDist]:
        """One distribution per factor; factor i is the i-th coordinate direction of the latent"""
        if not self.discrete:
            raise ConfigurationError("discrete_mode_policies called on a joint-mode model")
        h, single = self._latent_batch(h, self.config.latent_dim, "discrete_mode_policies")
        dists = []
        for i in range(self.n_factors):
            log_probs = self._unbatch(ad.log_softmax(getattr(self, f"head{i}")(h), axis=-1), single)
            dists.append(PolicyDist(ad.exp(log_probs), log_probs))
        return dists

    def discrete_factors(self) -> Tensor:
        """One-hot coordinate directions used as factors in discrete mode"""
        return Tensor(np.eye(self.config.latent_dim))

    def _require_joint(self, what: str):
        if self.discrete:
            raise ConfigurationError(f"{what} is not available in discrete mode")

    def state_dict(self) -> Dict[str, np.ndarray]:
        tensors = {name: p.data for name, p in self.named_parameters()}
        tensors.update({name: b.data for name, b in self.named_buffers()})
        return tensors

    def load_state_dict(self, tensors: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        own.update(dict(self.named_buffers()))
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise ConfigurationError(f"state is missing tensors: {missing[:5]}")
        for name, target in own.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != target.data.shape:
                raise DimensionError(f"tensor '{name}' has shape {value.shape}, model expects {target.data.shape}")
            target.data[...] = value
