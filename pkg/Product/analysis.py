"""
Evaluation of trained runs.

Covers latent variations and their clustering by action, the latent grid
and feature-recovery views, the exact conditional mutual-information oracle
for tabular reductions, and diagnostics over the factor space (density
modes, mode collapse, PCA view, per-factor policy tables).
"""

import itertools
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import rel_entr

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from autodiff import Tensor
from environments import EnvState, GridEnv
from errors import ConfigurationError, DegenerateClusterError, StateSpaceTooLargeError
from objective import dv_bound_estimate, kernel_score

# Action names that denote the same movement
ACTION_ALIASES = {"up2": "up"}

MAX_TABULAR_STATES = 5000


@contextmanager
def evaluation_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


# --- variations ------------------------------------------------------------

@dataclass
class VariationRecord:
    h: np.ndarray
    h_prime: np.ndarray
    dh: np.ndarray
    phi: np.ndarray
    actions: List[str]
    truth_before: np.ndarray
    truth_after: np.ndarray
    factor_index: Optional[int] = None

    def __post_init__(self):
        if not np.array_equal(self.dh, self.h_prime - self.h):
            raise ValueError("VariationRecord.dh must equal h_prime - h")


def _rollout_factors(trainer, states: List[EnvState], phi: Optional[np.ndarray],
                     factor_index: Optional[np.ndarray], rng: np.random.Generator):
    """Execute each factor for t_option steps from its start state (no exploration)"""
    model, env, cfg = trainer.model, trainer.env, trainer.config
    actions_taken: List[List[int]] = [[] for _ in states]
    current = list(states)
    for _ in range(cfg.t_option):
        h_t = model.encode(Tensor(env.observe_batch(current, cfg.observation)))
        if trainer.discrete:
            heads = model.discrete_mode_policies(h_t)
            probs = np.stack([heads[int(i)].probs.data[row] for row, i in enumerate(factor_index)])
        else:
            probs = model.policy(h_t, Tensor(phi)).probs.data
        cumulative = np.cumsum(probs, axis=1)
        cumulative[:, -1] = 1.0
        actions = (rng.random(len(current))[:, None] >= cumulative).sum(axis=1)
        for row, a in enumerate(actions):
            actions_taken[row].append(int(a))
        current = [env.step(s, int(a)) for s, a in zip(current, actions)]
    return current, actions_taken


def sample_factors(trainer, h: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Fresh factors for each latent row: generator output, or a random one-hot in discrete mode"""
    if trainer.discrete:
        index = rng.integers(trainer.pool_size, size=len(h))
        return np.eye(trainer.pool_size)[index], index
    z = rng.standard_normal((len(h), trainer.config.model.noise_dim))
    return trainer.model.generate_factor(Tensor(h), Tensor(z)).vector.data, None


def collect_variations(trainer, count: int, seed: int = 0,
                       states: Optional[Sequence[EnvState]] = None) -> List[VariationRecord]:
    """
    Run `count` options from random states with random factors

    Args:
        trainer: Trainer holding the model and environment
        count: number of records
        seed: sampling seed (states, noise, actions)
        states: optional explicit start states (length count)

    Returns:
        List of VariationRecord
    """
    rng = np.random.default_rng(seed)
    env, cfg = trainer.env, trainer.config
    starts = list(states) if states is not None else [env.sample_state(rng) for _ in range(count)]
    if not starts:
        return []
    with evaluation_mode(trainer.model) as model:
        h = model.encode(Tensor(env.observe_batch(starts, cfg.observation))).data
        phi, index = sample_factors(trainer, h, rng)
        ends, actions = _rollout_factors(trainer, starts, phi, index, rng)
        h_prime = model.encode(Tensor(env.observe_batch(ends, cfg.observation))).data
    names = env.spec.action_set
    return [
        VariationRecord(
            h=h[i], h_prime=h_prime[i], dh=h_prime[i] - h[i], phi=phi[i],
            actions=[names[a] for a in actions[i]],
            truth_before=env.ground_truth(starts[i]), truth_after=env.ground_truth(ends[i]),
            factor_index=None if index is None else int(index[i]),
        )
        for i in range(len(starts))
    ]


def variations_frame(records: Sequence[VariationRecord]) -> pd.DataFrame:
    if not records:
        return pd.DataFrame()
    K, d = len(records[0].dh), len(records[0].phi)
    rows = []
    for r in records:
        row = {f"dh_{k}": r.dh[k] for k in range(K)}
        row.update({f"phi_{k}": r.phi[k] for k in range(d)})
        row["action"] = "|".join(r.actions)
        rows.append(row)
    return pd.DataFrame(rows, columns=[f"dh_{k}" for k in range(K)] + [f"phi_{k}" for k in range(d)] + ["action"])


@dataclass
class ClusterReport:
    centroids: Dict[str, np.ndarray]
    counts: Dict[str, int]
    W: float
    B: float
    ratio: float
    n_clusters: int
    degenerate: bool
    centroid_distances: Dict[str, float] = field(default_factory=dict)

    def distance(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.centroids[a] - self.centroids[b]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "W": self.W,
            "B": self.B,
            "ratio": self.ratio if np.isfinite(self.ratio) else "inf",
            "n_clusters": self.n_clusters,
            "degenerate": self.degenerate,
            "counts": self.counts,
            "centroids": {k: v.tolist() for k, v in self.centroids.items()},
            "centroid_distances": self.centroid_distances,
        }


def _sorted_rows(values: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order so reductions do not depend on input order"""
    return values[np.lexsort(values.T[::-1])]


def cluster_by_action(records: Sequence[VariationRecord], aliases: Optional[Dict[str, str]] = None) -> ClusterReport:
    """
    Group dh by executed action and measure cluster separation

    W is the mean distance of each dh to its group centroid, B the smallest
    distance between two centroids, ratio = W / B (inf with degenerate flag
    when B is 0). Aliased actions (e.g. up2 -> up) are merged when `aliases`
    is given; unmerged groups are reported with pairwise centroid distances.
    """
    groups: Dict[str, List[np.ndarray]] = {}
    for r in records:
        if len(r.actions) != 1:
            raise ConfigurationError("cluster_by_action needs single-step records (t_option = 1)")
        label = r.actions[0]
        if aliases:
            label = aliases.get(label, label)
        groups.setdefault(label, []).append(np.asarray(r.dh, dtype=np.float64))
    if len(groups) < 2:
        raise DegenerateClusterError(f"need at least 2 action groups, got {len(groups)}")

    labels = sorted(groups)
    members = {label: _sorted_rows(np.stack(groups[label])) for label in labels}
    centroids = {label: members[label].mean(axis=0) for label in labels}
    spreads = np.concatenate([np.linalg.norm(members[l] - centroids[l], axis=1) for l in labels])
    W = float(np.sort(spreads).mean())

    distances = {}
    for a, b in itertools.combinations(labels, 2):
        distances[f"{a}~{b}"] = float(np.linalg.norm(centroids[a] - centroids[b]))
    B = min(distances.values())
    degenerate = B == 0.0
    ratio = float("inf") if degenerate else W / B
    return ClusterReport(
        centroids=centroids,
        counts={label: len(groups[label]) for label in labels},
        W=W, B=B, ratio=ratio, n_clusters=len(labels), degenerate=degenerate,
        centroid_distances=distances,
    )


# --- latent structure ------------------------------------------------------

def affine_r2(inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """R^2 of the least-squares affine fit inputs -> each target column (nan for constant targets)"""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    targets = targets[:, None] if targets.ndim == 1 else targets
    design = np.hstack([inputs, np.ones((inputs.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    residual = ((targets - design @ coef) ** 2).sum(axis=0)
    total = ((targets - targets.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(total > 0, 1.0 - residual / total, np.nan)


@dataclass
class LatentGridReport:
    frame: pd.DataFrame
    r2_latent_from_features: Dict[str, float]
    r2_features_from_latent: Dict[str, float]


def encode_states(trainer, states: Sequence[EnvState]) -> np.ndarray:
    with evaluation_mode(trainer.model) as model:
        return model.encode(Tensor(trainer.env.observe_batch(states, trainer.config.observation))).data


def latent_grid(trainer) -> LatentGridReport:
    """
    Encode every enumerable state; fit affine maps between ground-truth
    features and latents in both directions
    """
    env = trainer.env
    states = env.enumerate_states()
    h = encode_states(trainer, states)
    truth = np.stack([env.ground_truth(s) for s in states])
    names = env.feature_names
    K = h.shape[1]
    frame = pd.DataFrame(truth, columns=names)
    for k in range(K):
        frame[f"h_{k}"] = h[:, k]
    latent_r2 = affine_r2(truth, h)
    feature_r2 = affine_r2(h, truth)
    return LatentGridReport(
        frame=frame,
        r2_latent_from_features={f"h_{k}": float(latent_r2[k]) for k in range(K)},
        r2_features_from_latent={name: float(feature_r2[j]) for j, name in enumerate(names)},
    )


@dataclass
class FeatureRecoveryReport:
    table: pd.DataFrame
    summary: pd.DataFrame

    def best_spearman(self, feature: str) -> Optional[float]:
        value = self.summary.set_index("feature").loc[feature, "max_abs_spearman"]
        return None if pd.isna(value) else float(value)


def _correlation(x: np.ndarray, y: np.ndarray, method: str) -> Optional[float]:
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    result = stats.pearsonr(x, y) if method == "pearson" else stats.spearmanr(x, y)
    return float(result[0])


def feature_recovery_from_arrays(features: np.ndarray, latents: np.ndarray,
                                 feature_names: Sequence[str]) -> FeatureRecoveryReport:
    """Pearson/Spearman between every feature and latent coordinate; constant series give n/a"""
    rows, summary = [], []
    for j, name in enumerate(feature_names):
        best_p, best_s, best_k = None, None, None
        for k in range(latents.shape[1]):
            p = _correlation(features[:, j], latents[:, k], "pearson")
            s = _correlation(features[:, j], latents[:, k], "spearman")
            rows.append({"feature": name, "latent": f"h_{k}", "pearson": p, "spearman": s})
            if s is not None and (best_s is None or abs(s) > best_s):
                best_s, best_k = abs(s), k
            if p is not None and (best_p is None or abs(p) > best_p):
                best_p = abs(p)
        summary.append({
            "feature": name,
            "best_latent": None if best_k is None else f"h_{best_k}",
            "max_abs_pearson": best_p,
            "max_abs_spearman": best_s,
        })
    return FeatureRecoveryReport(table=pd.DataFrame(rows), summary=pd.DataFrame(summary))


def feature_recovery(trainer, max_states: int = 20000, seed: int = 0) -> FeatureRecoveryReport:
    """Correlate ground-truth features with latents over all (or sampled) states"""
    env = trainer.env
    if env.state_count() <= max_states:
        states = env.enumerate_states()
    else:
        rng = np.random.default_rng(seed)
        states = [env.sample_state(rng) for _ in range(max_states)]
    h = encode_states(trainer, states)
    truth = np.stack([env.ground_truth(s) for s in states])
    return feature_recovery_from_arrays(truth, h, env.feature_names)


# --- exact MI oracle ---------------------------------------------------------

@dataclass
class TabularMDP:
    """
    Finite MDP with a finite factor set.

    policies: [F, S, A] action distributions per factor and state
    transitions: [S, A, S'] next-state distributions
    h_map: optional [S] latent id per state (identity when None)
    """

    policies: np.ndarray
    transitions: np.ndarray
    h_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.policies = np.asarray(self.policies, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        F, S, A = self.policies.shape
        if self.transitions.shape != (S, A, S):
            raise ConfigurationError(f"transitions must be [{S}, {A}, {S}], got {self.transitions.shape}")
        if S > MAX_TABULAR_STATES:
            raise StateSpaceTooLargeError(f"{S} tabular states exceed the oracle limit of {MAX_TABULAR_STATES}")
        for what, array in (("policy", self.policies), ("transition", self.transitions)):
            if np.any(array < 0) or not np.allclose(array.sum(axis=-1), 1.0, rtol=0.0, atol=1e-12):
                raise ConfigurationError(f"{what} rows must be probability distributions")
        if self.h_map is None:
            self.h_map = np.arange(S)
        self.h_map = np.asarray(self.h_map, dtype=np.int64)
        if self.h_map.shape != (S,) or np.any(self.h_map < 0):
            raise ConfigurationError(f"h_map must assign a nonnegative latent id to each of {S} states")

    @property
    def n_factors(self) -> int:
        return self.policies.shape[0]

    @property
    def n_states(self) -> int:
        return self.policies.shape[1]

    @property
    def n_latents(self) -> int:
        return int(self.h_map.max()) + 1

    def start_distribution(self, start_prior: Optional[np.ndarray] = None) -> np.ndarray:
        """[S] start-state prior, uniform when None"""
        S = self.n_states
        if start_prior is None:
            return np.full(S, 1.0 / S)
        prior = np.asarray(start_prior, dtype=np.float64)
        if prior.shape != (S,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0, rtol=0.0, atol=1e-12):
            raise ConfigurationError(f"start_prior must be a distribution over {S} states")
        return prior

    def latent_prior(self, start_prior: Optional[np.ndarray] = None) -> np.ndarray:
        """[H] probability of each start latent id"""
        return np.bincount(self.h_map, weights=self.start_distribution(start_prior), minlength=self.n_latents)

    def option_kernels(self, steps: int = 1) -> np.ndarray:
        """[F, S, S'] distribution of the state after `steps` steps under each factor"""
        one_step = np.einsum("fsa,sat->fst", self.policies, self.transitions)
        return np.stack([np.linalg.matrix_power(p, steps) for p in one_step])

    def outcome_distribution(self, steps: int = 1) -> np.ndarray:
        """[F, S, H'] distribution of the terminal latent id from each start state"""
        kernels = self.option_kernels(steps)
        out = np.zeros((self.n_factors, self.n_states, self.n_latents))
        for s_next in range(self.n_states):
            out[:, :, self.h_map[s_next]] += kernels[:, :, s_next]
        return out

    def latent_outcome_distribution(self, steps: int = 1, start_prior: Optional[np.ndarray] = None) -> np.ndarray:
        """
        [F, H, H'] p(h' | h, f) = sum_s p(s | h) p(h' | s, f)

        Latent ids with no prior mass get all-zero rows.
        """
        prior = self.start_distribution(start_prior)
        membership = np.eye(self.n_latents)[self.h_map]                       # [S, H]
        joint = np.einsum("fsk,s,sh->fhk", self.outcome_distribution(steps), prior, membership)
        mass = (prior @ membership)[None, :, None]
        return np.divide(joint, mass, out=np.zeros_like(joint), where=mass > 0)


def exact_conditional_mi(mdp: TabularMDP, steps: int = 1, start_prior: Optional[np.ndarray] = None) -> float:
    """
    I(phi; h' | h) with a uniform factor prior, computed by enumeration

        sum_h p(h) sum_f (1/F) sum_h' p(h'|h,f) log[p(h'|h,f) / p(h'|h)]

    Start states sharing a latent id are mixed by p(s | h).
    """
    conditional = mdp.latent_outcome_distribution(steps, start_prior)
    mass = mdp.latent_prior(start_prior)
    marginal = conditional.mean(axis=0, keepdims=True)
    divergence = rel_entr(conditional, np.broadcast_to(marginal, conditional.shape)).sum(axis=2)
    return float(max((mass[None, :] * divergence).sum() / mdp.n_factors, 0.0))


@dataclass
class BoundGapReport:
    estimate: float
    se: float
    oracle: float
    gap: float
    holds: bool
    samples: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate, "se": self.se, "oracle": self.oracle,
            "gap": self.gap, "holds": self.holds, "samples": self.samples,
        }


def indicator_scores(mdp: TabularMDP, steps: int = 1, start_prior: Optional[np.ndarray] = None) -> np.ndarray:
    """A[h, f, h'] = 1 where h' is reachable from latent h under factor f"""
    conditional = mdp.latent_outcome_distribution(steps, start_prior)
    return (conditional > 0).astype(np.float64).transpose(1, 0, 2)


def bound_gap_report(mdp: TabularMDP, scores: np.ndarray, samples: int = 100_000, steps: int = 1,
                     seed: int = 0, eps_floor: float = 1e-8, start_prior: Optional[np.ndarray] = None) -> BoundGapReport:
    """
    Sampled selectivity bound vs the exact conditional MI

    Args:
        mdp: tabular instance
        scores: [H, F, H'] nonnegative attribution scores A(h', h, f) over latent ids
        samples: number of sampled (s, f, h') triples; the critic sees h = h_map[s]
        steps: option length
        seed: sampling seed
        eps_floor: floor inside both logs
        start_prior: [S] start-state distribution, uniform when None

    Returns:
        BoundGapReport; holds is estimate <= oracle + 3 * SE
    """
    scores = np.asarray(scores, dtype=np.float64)
    S, F, H = mdp.n_states, mdp.n_factors, mdp.n_latents
    if scores.shape != (H, F, H):
        raise ConfigurationError(f"scores must be [{H}, {F}, {H}], got {scores.shape}")
    rng = np.random.default_rng(seed)
    conditional = mdp.outcome_distribution(steps)
    prior = mdp.start_distribution(start_prior)
    starts = rng.choice(S, size=samples, p=prior)
    factors = rng.integers(F, size=samples)
    cumulative = np.cumsum(conditional[factors, starts], axis=1)
    cumulative[:, -1] = 1.0
    outcomes = (rng.random(samples)[:, None] >= cumulative).sum(axis=1)

    latents = mdp.h_map[starts]
    behavior = scores[latents, factors, outcomes]
    pool_mean = scores[latents, :, outcomes].mean(axis=1)
    values = np.log(behavior + eps_floor) - np.log(pool_mean + eps_floor)
    estimate = dv_bound_estimate(values)
    oracle = exact_conditional_mi(mdp, steps, start_prior)
    return BoundGapReport(
        estimate=estimate.mean, se=estimate.se, oracle=oracle, gap=oracle - estimate.mean,
        holds=bool(estimate.mean <= oracle + 3.0 * estimate.se), samples=samples,
    )


def deterministic_two_factor_mdp() -> TabularMDP:
    """Every state: factor 0 always leads to state 1, factor 1 always to state 2"""
    transitions = np.zeros((3, 2, 3))
    transitions[:, 0, 1] = 1.0
    transitions[:, 1, 2] = 1.0
    policies = np.zeros((2, 3, 2))
    policies[0, :, 0] = 1.0
    policies[1, :, 1] = 1.0
    return TabularMDP(policies, transitions)


def random_tabular_mdp(rng: np.random.Generator, n_states: int, n_factors: int, n_actions: int,
                       concentration: float = 0.5) -> TabularMDP:
    policies = rng.dirichlet(np.full(n_actions, concentration), size=(n_factors, n_states))
    transitions = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    # dirichlet rows can miss 1 by a few ulps
    policies /= policies.sum(axis=-1, keepdims=True)
    transitions /= transitions.sum(axis=-1, keepdims=True)
    return TabularMDP(policies, transitions)


@dataclass
class TabularReduction:
    mdp: TabularMDP
    scores: np.ndarray
    states: List[EnvState]


def tabular_reduction(trainer, n_factors: int = 4, seed: int = 0) -> TabularReduction:
    """
    Freeze a trained run into a TabularMDP over its enumerated states

    Joint mode uses n_factors fixed noise draws z_f, so factor f in state s
    is Phi(h(s), z_f); discrete mode uses its one-hot heads. Scores are the
    trained kernel A(h(s'), h(s), phi_f(s)).
    """
    env, cfg, model = trainer.env, trainer.config, trainer.model
    states = env.enumerate_states()
    S, A = len(states), env.n_actions
    if S > MAX_TABULAR_STATES:
        raise StateSpaceTooLargeError(f"{S} states exceed the oracle limit of {MAX_TABULAR_STATES}")
    position = {s: i for i, s in enumerate(states)}
    transitions = np.zeros((S, A, S))
    for i, s in enumerate(states):
        for a in range(A):
            transitions[i, a, position[env.step(s, a)]] = 1.0

    rng = np.random.default_rng(seed)
    h = encode_states(trainer, states)
    with evaluation_mode(model):
        if trainer.discrete:
            n_factors = trainer.pool_size
            heads = model.discrete_mode_policies(Tensor(h))
            policies = np.stack([d.probs.data for d in heads])
            phis = np.broadcast_to(np.eye(n_factors)[:, None, :], (n_factors, S, n_factors))
        else:
            z = rng.standard_normal((n_factors, cfg.model.noise_dim))
            phis = np.stack([
                model.generate_factor(Tensor(h), Tensor(np.repeat(z[f][None], S, axis=0))).vector.data
                for f in range(n_factors)
            ])
            policies = np.stack([model.policy(Tensor(h), Tensor(phis[f])).probs.data for f in range(n_factors)])
    policies = policies / policies.sum(axis=-1, keepdims=True)

    K = h.shape[1]
    scores = kernel_score(
        Tensor(h[None, None, :, :]),                   # h(s') over axis 2
        Tensor(h[:, None, None, :]),                   # h(s)
        Tensor(np.transpose(phis, (1, 0, 2))[:, :, None, :]),
        cfg.kernel, latent_dim=K,
    ).data
    return TabularReduction(TabularMDP(policies, transitions), scores, states)


# --- information accounting and diagnostics -------------------------------------

@dataclass
class DirectedInformationReport:
    mean: float
    se: float
    n_episodes: int
    per_option_mean: float


def directed_information(values: Iterable[float], options_per_episode: int) -> DirectedInformationReport:
    """
    Per-episode sums of option selectivities, a lower-bound estimate of the
    directed information from factors to latent states (trailing partial
    episodes are dropped)
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if options_per_episode < 1:
        raise ConfigurationError("options_per_episode must be >= 1")
    n_episodes = arr.size // options_per_episode
    if n_episodes == 0:
        return DirectedInformationReport(float("nan"), float("nan"), 0, float("nan"))
    sums = arr[:n_episodes * options_per_episode].reshape(n_episodes, options_per_episode).sum(axis=1)
    se = float(sums.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else float("inf")
    return DirectedInformationReport(float(sums.mean()), se, n_episodes, float(arr.mean()))


@dataclass
class DensityModes:
    n_modes: int
    peaks: List[List[float]]


def _two_dimensional(values: np.ndarray) -> np.ndarray:
    if values.shape[1] <= 2:
        return values
    centered = values - values.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def dh_density_modes(records_or_dh: Union[Sequence[VariationRecord], np.ndarray],
                     grid_size: int = 64, min_fraction: float = 0.05) -> DensityModes:
    """
    Count local maxima of a Gaussian KDE over dh (projected to 2-D when K > 2)

    Peaks below `min_fraction` of the highest density are ignored.
    """
    if isinstance(records_or_dh, np.ndarray):
        dh = records_or_dh
    else:
        dh = np.stack([r.dh for r in records_or_dh])
    dh = _two_dimensional(np.atleast_2d(np.asarray(dh, dtype=np.float64)))
    try:
        kde = stats.gaussian_kde(dh.T)
    except (np.linalg.LinAlgError, ValueError):
        return DensityModes(1, [dh.mean(axis=0).tolist()])

    axes = [np.linspace(lo - 0.1 * (hi - lo + 1e-9), hi + 0.1 * (hi - lo + 1e-9), grid_size)
            for lo, hi in zip(dh.min(axis=0), dh.max(axis=0))]
    mesh = np.meshgrid(*axes, indexing="ij")
    density = kde(np.vstack([m.ravel() for m in mesh])).reshape(mesh[0].shape)
    padded = np.pad(density, 1, constant_values=-np.inf)
    is_peak = density >= density.max() * min_fraction
    for offset in itertools.product((-1, 0, 1), repeat=density.ndim):
        if not any(offset):
            continue
        window = tuple(slice(1 + o, 1 + o + n) for o, n in zip(offset, density.shape))
        is_peak &= density > padded[window]
    peaks = [[float(m[idx]) for m in mesh] for idx in zip(*np.nonzero(is_peak))]
    return DensityModes(len(peaks), peaks)


@dataclass
class FactorDiversity:
    n_distinct_outcomes: int
    n_reachable_outcomes: int
    collapsed: bool
    outcome_counts: Dict[str, int]


def reachable_outcomes(env: GridEnv, state: EnvState, steps: int) -> set:
    frontier = {state}
    for _ in range(steps):
        frontier = {env.step(s, a) for s in frontier for a in range(env.n_actions)}
    return frontier


def factor_diversity(trainer, state: EnvState, count: int = 256, seed: int = 0) -> FactorDiversity:
    """
    Mode-collapse check: how many of the outcomes reachable in one option
    does the generator realize from a fixed start state
    """
    rng = np.random.default_rng(seed)
    starts = [state] * count
    with evaluation_mode(trainer.model):
        h = encode_states(trainer, [state])
        phi, index = sample_factors(trainer, np.repeat(h, count, axis=0), rng)
        ends, _ = _rollout_factors(trainer, starts, phi, index, rng)
    counts: Dict[str, int] = {}
    for end in ends:
        key = str(end.to_dict())
        counts[key] = counts.get(key, 0) + 1
    reachable = len(reachable_outcomes(trainer.env, state, trainer.config.t_option))
    return FactorDiversity(len(counts), reachable, len(counts) < reachable, counts)


def factor_space_view(trainer, state: EnvState, count: int = 200, seed: int = 0) -> pd.DataFrame:
    """
    PCA projection of factors sampled at one state, with the predicted latent
    T(h, phi) (additive h + phi without a trained transition) and the agent
    cell decoded from that prediction
    """
    if trainer.discrete:
        raise ConfigurationError("factor_space_view needs a joint-mode model")
    rng = np.random.default_rng(seed)
    model, env = trainer.model, trainer.env
    with evaluation_mode(model):
        h = encode_states(trainer, [state])
        h_rep = np.repeat(h, count, axis=0)
        phi, _ = sample_factors(trainer, h_rep, rng)
        if trainer.config.use_transition:
            pred = model.transition(Tensor(h_rep), Tensor(phi)).data
        else:
            pred = h_rep + phi
        decoded = model.decode(Tensor(pred)).data
    centered = phi - phi.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = centered @ vt[:2].T
    if components.shape[1] < 2:
        components = np.hstack([components, np.zeros((count, 2 - components.shape[1]))])
    frame = pd.DataFrame({"pc_0": components[:, 0], "pc_1": components[:, 1]})
    for k in range(phi.shape[1]):
        frame[f"phi_{k}"] = phi[:, k]
    for k in range(pred.shape[1]):
        frame[f"pred_h_{k}"] = pred[:, k]
    if env.spec.has_agent:
        cells = [env.state_from_observation(d, trainer.config.observation).agent for d in decoded]
        frame["pred_x"] = [c[0] for c in cells]
        frame["pred_y"] = [c[1] for c in cells]
    return frame


def policy_table(trainer, state: EnvState, count: int = 8, seed: int = 0) -> pd.DataFrame:
    """Action distribution pi(. | h, phi) for several sampled factors, in action-set order"""
    rng = np.random.default_rng(seed)
    model, env = trainer.model, trainer.env
    with evaluation_mode(model):
        h = encode_states(trainer, [state])
        if trainer.discrete:
            heads = model.discrete_mode_policies(Tensor(h[0]))
            phi = np.eye(trainer.pool_size)
            probs = np.stack([d.probs.data for d in heads])
        else:
            phi, _ = sample_factors(trainer, np.repeat(h, count, axis=0), rng)
            probs = model.policy(Tensor(np.repeat(h, count, axis=0)), Tensor(phi)).probs.data
    frame = pd.DataFrame({"factor": np.arange(len(phi))})
    for k in range(phi.shape[1]):
        frame[f"phi_{k}"] = phi[:, k]
    for a, name in enumerate(env.spec.action_set):
        frame[f"p_{name}"] = probs[:, a]
    return frame
