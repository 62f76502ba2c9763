"""
Attribution kernels, the selectivity reward, the REINFORCE surrogate and the
auxiliary losses.

Scores are computed for a whole factor pool at once: for W rollouts with n
pool factors each, ``kernel_score`` takes h, h' shaped [W, 1, K] and factors
shaped [W, n, K] and returns a [W, n] score matrix.
"""

import os
import sys
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

import autodiff as ad
from autodiff import Tensor
from errors import DimensionError
from models import Factor, PolicyDist


class KernelSpec(BaseModel):
    """Attribution score A(h', h, phi); sigma defaults to sqrt(latent_dim)"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["gaussian", "rectified_inner"] = "gaussian"
    sigma: Optional[float] = Field(None, gt=0.0)
    eps_floor: float = Field(1e-8, ge=0.0)

    def resolved_sigma(self, latent_dim: int) -> float:
        return self.sigma if self.sigma is not None else float(np.sqrt(latent_dim))


class DegenerateCounter:
    """Running count of pools whose scores all fall below the epsilon floor"""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def reset(self):
        self.count = 0


degenerate_pools = DegenerateCounter()


@dataclass
class SelectivitySample:
    h: Tensor
    h_prime: Tensor
    pool: Tensor
    behavior: int
    log_probs: Sequence[float] = ()
    entropy: Sequence[float] = ()

    def __post_init__(self):
        if self.pool.ndim != 2 or self.pool.shape[0] < 2:
            raise DimensionError(f"factor pool must be [n >= 2, d], got {self.pool.shape}")
        if not 0 <= self.behavior < self.pool.shape[0]:
            raise DimensionError(f"behavior index {self.behavior} outside pool of {self.pool.shape[0]}")


@dataclass
class SelectivityBatch:
    """Everything the surrogate needs for W rollouts against n-factor pools"""

    selectivity: Tensor       # [W, n], S as if each pool factor had been the behavior
    log_prob_sum: Tensor      # [W, n], sum over option steps of log pi(a_t | h_t, phi_i)
    behavior: np.ndarray      # [W] pool index that was executed
    weights: np.ndarray       # [W, n] importance weights (constant)

    @property
    def n_rollouts(self) -> int:
        return self.selectivity.shape[0]

    @property
    def pool_size(self) -> int:
        return self.selectivity.shape[1]

    def behavior_selectivity(self) -> Tensor:
        return self.selectivity[(np.arange(self.n_rollouts), self.behavior)]


def kernel_score(h_prime, h, phi, spec: KernelSpec, latent_dim: Optional[int] = None) -> Tensor:
    """
    Gaussian: exp(-||h' - (h + phi)||^2 / (2 sigma^2)); rectified_inner: max(0, <h' - h, phi>)

    Inputs broadcast against each other along leading axes; the last axis is
    the latent axis and must agree.
    """
    phi = phi.vector if isinstance(phi, Factor) else phi
    h_prime, h, phi = (x if isinstance(x, Tensor) else Tensor(x) for x in (h_prime, h, phi))
    if not (h_prime.shape[-1] == h.shape[-1] == phi.shape[-1]):
        raise DimensionError(f"kernel_score dim mismatch: h' {h_prime.shape}, h {h.shape}, phi {phi.shape}")
    dh = h_prime - h
    if spec.kind == "gaussian":
        sigma = spec.resolved_sigma(latent_dim or h.shape[-1])
        diff = dh - phi
        return ad.exp((diff * diff).sum(axis=-1) * (-1.0 / (2.0 * sigma * sigma)))
    return ad.relu((dh * phi).sum(axis=-1))


def selectivity_matrix(scores: Tensor, eps_floor: float) -> Tuple[Tensor, np.ndarray]:
    """
    S[w, i] = log(A[w, i] + eps) - log(mean_j A[w, j] + eps)

    Rows whose scores are all at or below eps_floor are degenerate: their
    selectivity is exactly 0 and carries no gradient.

    Returns:
        (S [W, n], degenerate mask [W])
    """
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise DimensionError(f"pool scores must be [W, n >= 2], got {scores.shape}")
    degenerate = scores.data.max(axis=1) <= eps_floor
    shift = Tensor(degenerate.astype(np.float64)[:, None])
    keep = Tensor((~degenerate).astype(np.float64)[:, None])
    numerator = ad.log(scores + shift, eps=eps_floor)
    denominator = ad.log(scores.mean(axis=1, keepdims=True) + shift, eps=eps_floor)
    return (numerator - denominator) * keep, degenerate


def selectivity(sample: SelectivitySample, spec: KernelSpec) -> Tensor:
    """Selectivity of the behavior factor for one rollout (scalar Tensor)"""
    h = ad.reshape(sample.h, (1, 1, sample.h.shape[-1]))
    h_prime = ad.reshape(sample.h_prime, (1, 1, sample.h_prime.shape[-1]))
    scores = kernel_score(h_prime, h, ad.reshape(sample.pool, (1,) + sample.pool.shape), spec)
    matrix, degenerate = selectivity_matrix(scores, spec.eps_floor)
    degenerate_pools.add(degenerate.sum())
    return matrix[(0, sample.behavior)]


def importance_weights(log_prob_sums: np.ndarray, behavior: np.ndarray, w_max: float = 10.0) -> np.ndarray:
    """
    Trajectory likelihood ratios pi_i(traj) / pi_behavior(traj), clipped to [0, w_max]

    Args:
        log_prob_sums: [W, n] summed log-probs of the executed actions under every pool factor
        behavior: [W] index of the executed factor
        w_max: upper clip
    """
    log_prob_sums = np.asarray(log_prob_sums, dtype=np.float64)
    rows = np.arange(log_prob_sums.shape[0])
    ratio = np.exp(log_prob_sums - log_prob_sums[rows, behavior][:, None])
    ratio[rows, behavior] = 1.0
    return np.clip(ratio, 0.0, w_max)


def behavior_weights(behavior: np.ndarray, pool_size: int) -> np.ndarray:
    """Weights that reduce the pool estimator to the behavior factor alone"""
    weights = np.zeros((len(behavior), pool_size))
    weights[np.arange(len(behavior)), behavior] = float(pool_size)
    return weights


def reinforce_surrogate(batch: SelectivityBatch, baseline: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Surrogate loss whose gradient is the (importance-weighted) REINFORCE estimator

        - sum_{w,i} c[w,i] * S[w,i] / W
        - sum_{w,i} c[w,i] * (S_det[w,i] - V_det[w]) * logp[w,i] / W
        + mean_w (S_det[w, b_w] - V[w])^2

    with c = weights / n. Minimizing it ascends selectivity; the baseline term
    only trains V.

    Returns:
        (loss, {"pathwise", "score_function", "baseline"})
    """
    W, n = batch.n_rollouts, batch.pool_size
    if W == 0:
        raise DimensionError("reinforce_surrogate needs a non-empty batch")
    coeff = Tensor(batch.weights / float(n * W))
    advantage = Tensor(batch.selectivity.data - baseline.data[:, None])

    pathwise = -(coeff * batch.selectivity).sum()
    score_function = -(coeff * advantage * batch.log_prob_sum).sum()
    target = Tensor(batch.behavior_selectivity().data)
    residual = target - baseline
    baseline_loss = (residual * residual).mean()
    loss = pathwise + score_function + baseline_loss
    return loss, {"pathwise": pathwise, "score_function": score_function, "baseline": baseline_loss}


def entropy_loss(dist: Union[PolicyDist, Tensor], eps: Optional[float] = None) -> Tensor:
    """Entropy -sum p log(p + eps), averaged over a leading batch axis if present"""
    probs = dist.probs if isinstance(dist, PolicyDist) else dist
    entropy = -(probs * ad.log(probs, eps=eps)).sum(axis=-1)
    return entropy.mean() if entropy.ndim else entropy


def autoencoder_loss(obs: Tensor, reconstruction: Tensor) -> Tensor:
    if obs.shape != reconstruction.shape:
        raise DimensionError(f"reconstruction shape {reconstruction.shape} != observation shape {obs.shape}")
    diff = obs - reconstruction
    return (diff * diff).mean()


def model_based_loss(
    h_end: Tensor,
    h_start: Tensor,
    phi: Union[Factor, Tensor],
    transition: Callable[[Tensor, Union[Factor, Tensor]], Tensor],
    encoder_grad: bool = True,
) -> Tensor:
    """
    Squared L2 distance between the observed terminal latent and T(h_start, phi)

    Summed over the latent axis, averaged over a leading batch axis. With
    encoder_grad=False both latents are detached so only T learns.
    """
    if h_end.shape != h_start.shape:
        raise DimensionError(f"model_based_loss latent mismatch: {h_end.shape} vs {h_start.shape}")
    if not encoder_grad:
        h_end, h_start = h_end.detach(), h_start.detach()
    diff = h_end - transition(h_start, phi)
    sq = (diff * diff).sum(axis=-1)
    return sq.mean() if sq.ndim else sq


@dataclass
class BoundEstimate:
    mean: float
    se: float
    n: int


def dv_bound_estimate(values: Iterable[Union[float, SelectivitySample]], spec: Optional[KernelSpec] = None) -> BoundEstimate:
    """
    Empirical mean of behavior selectivities: a lower-bound estimate of I(phi; h' | h)

    Accepts precomputed selectivity values or SelectivitySamples (then spec is required).
    """
    collected = []
    for v in values:
        if isinstance(v, SelectivitySample):
            if spec is None:
                raise ValueError("dv_bound_estimate needs a KernelSpec to score samples")
            v = selectivity(v, spec).item()
        collected.append(float(v))
    arr = np.asarray(collected, dtype=np.float64)
    if arr.size == 0:
        return BoundEstimate(mean=float("nan"), se=float("nan"), n=0)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else float("inf")
    return BoundEstimate(mean=float(arr.mean()), se=se, n=int(arr.size))
