import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config
from analysis import (
    ACTION_ALIASES,
    bound_gap_report,
    cluster_by_action,
    collect_variations,
    dh_density_modes,
    directed_information,
    encode_states,
    factor_diversity,
    factor_space_view,
    feature_recovery,
    latent_grid,
    policy_table,
    tabular_reduction,
    variations_frame,
)
from autodiff import Tensor
from checkpoint import load_checkpoint, save_checkpoint
from environments import COLORS, GridEnv, encode_ppm
from errors import ConfigurationError, DegenerateClusterError, NumericalAbort
from metric_metadata import evaluate_gates
from planner import (
    decode_prediction,
    execute_plan,
    extract_prototypes,
    plan_between_cells,
    planning_success_rate,
    predicted_trajectory,
    state_at,
)
from storage import RunDirectory, RunStorage, atomic_write_bytes
from trainer import TrainConfig, Trainer


@dataclass
class TrainResult:
    run_dir: str
    run_id: Optional[str]
    trainer: Trainer
    records: List[Dict[str, Any]] = field(default_factory=list)


def _checkpoint_run_dir(ckpt_path: str) -> str:
    """Run directory owning a checkpoint at <run>/checkpoints/<file>"""
    return os.path.dirname(os.path.dirname(os.path.abspath(ckpt_path)))


def _json_ready(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_ready(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def symbolic_image(env: GridEnv, planes: np.ndarray) -> np.ndarray:
    """RGB rendering of (possibly soft) symbolic planes, one colored block per cell"""
    palette = {
        "agent": COLORS["agent"],
        "blocked": COLORS["blocked"],
        "switch_off": COLORS["switch_off"],
        "switch_on": COLORS["switch_on"],
    }
    image = np.zeros((3,) + planes.shape[1:])
    for c, name in enumerate(env.channel_names):
        color = np.asarray(palette.get(name, COLORS["object"]), dtype=np.float64)
        image += color[:, None, None] * np.clip(planes[c], 0.0, 1.0)[None]
    block = np.ones((env.cell_px, env.cell_px))
    return np.clip(np.stack([np.kron(ch, block) for ch in image]), 0.0, 1.0)


def observation_image(env: GridEnv, mode: str, array: np.ndarray) -> np.ndarray:
    """RGB image of an observation-shaped array (pixels or symbolic planes)"""
    if mode == "pixels":
        return np.clip(array, 0.0, 1.0)
    return symbolic_image(env, array)


class ICFPipeline:
    """Main orchestrator"""

    def __init__(self, storage: Optional[RunStorage] = None, index_runs: bool = True):
        """
        Args:
            storage: run index (default: RunStorage() at Config.STORAGE_DB)
            index_runs: False skips the SQLite index entirely
        """
        if storage is None and index_runs:
            storage = RunStorage()
        self.storage = storage

        self.current_run_id = None
        self.previous_run_id = None

    # --- train --------------------------------------------------------
    def train(
        self,
        config: Optional[TrainConfig],
        out_dir: Optional[str] = None,
        resume: Optional[str] = None,
        steps: Optional[int] = None,
    ) -> TrainResult:
        """
        Train a run into a RunDirectory

        Args:
            config: validated TrainConfig (ignored when resuming)
            out_dir: run directory (default: Config.RUNS_DIR/<preset>_seed<seed>)
            resume: checkpoint to continue from; step numbering carries on
            steps: total step target overriding config.steps

        Returns:
            TrainResult
        """
        if resume:
            print(f"🔄 Resuming from {resume}...")
            trainer = Trainer.from_checkpoint(load_checkpoint(resume))
            if steps is not None:
                trainer.config = trainer.config.model_copy(update={"steps": steps})
            out_dir = out_dir or _checkpoint_run_dir(resume)
        else:
            if config is None:
                raise ConfigurationError("a config is required unless resuming")
            if steps is not None:
                config = config.model_copy(update={"steps": steps})
            trainer = Trainer(config)
            if out_dir is None:
                Config.ensure_storage_dir()
                out_dir = os.path.join(Config.RUNS_DIR, f"{config.preset}_seed{config.seed}")

        cfg = trainer.config
        run_dir = RunDirectory(out_dir).ensure()
        run_dir.write_json(run_dir.config_path, cfg.model_dump(mode="json"))
        start_step = trainer.step
        keep_until = start_step if resume else None

        run_id = None
        if self.storage is not None:
            if resume:
                run_id = self.storage.find_run_by_dir(run_dir.root)
            run_id = self.storage.save_run(
                cfg.model_dump(mode="json"), run_dir.root, status="running",
                summary={"steps_completed": start_step}, run_id=run_id,
            )
            self.previous_run_id = self.current_run_id
            self.current_run_id = run_id

        records: List[Dict[str, Any]] = []
        columns = trainer.metric_columns

        def checkpoint(step: int):
            data = trainer.state()
            save_checkpoint(run_dir.checkpoint_path(step), data)
            save_checkpoint(run_dir.latest_checkpoint, data)
            run_dir.write_metrics(records, columns, keep_until_step=keep_until)

        def on_step(t: Trainer, record: Dict[str, Any]):
            records.append(record)
            if Config.LOG_EVERY and t.step % Config.LOG_EVERY == 0:
                print(
                    f"🔄 step {t.step}/{cfg.steps} selectivity={record['selectivity']:.4f} "
                    f"dv_bound={record['dv_bound']:.4f} total_loss={record['total_loss']:.4f}"
                )
            if cfg.checkpoint_every and t.step % cfg.checkpoint_every == 0:
                checkpoint(t.step)

        print(f"🔧 Training {cfg.preset} ({cfg.mode}, seed {cfg.seed}) from step {start_step} to {cfg.steps}...")
        try:
            trainer.train(on_step=on_step)
        except NumericalAbort as exc:
            records.append(exc.record)
            run_dir.write_metrics(records, columns, keep_until_step=keep_until)
            print(f"❌ {exc}")
            self._update_index(run_id, "aborted", trainer, records)
            raise

        checkpoint(trainer.step)
        print(f"✅ Training complete: {trainer.step} steps")
        print(f"💾 Saved as: {run_dir.root}")
        self._update_index(run_id, "completed", trainer, records)
        return TrainResult(run_dir.root, run_id, trainer, records)

    def _update_index(self, run_id: Optional[str], status: str, trainer: Trainer, records: List[Dict[str, Any]]):
        if self.storage is None or run_id is None:
            return
        last = records[-1] if records else {}
        self.storage.update_run(run_id, status, {
            "steps_completed": trainer.step,
            "final_selectivity": last.get("selectivity"),
            "dv_bound": last.get("dv_bound"),
        })

    # --- evaluate -----------------------------------------------------
    def evaluate(
        self,
        ckpt: str,
        out_dir: Optional[str] = None,
        variations: int = 1000,
        mi_oracle: bool = False,
        expected_preset: Optional[str] = None,
        seed: int = 0,
        oracle_samples: int = 100_000,
        plan_sweep: bool = False,
    ) -> Dict[str, Any]:
        """
        Write the analysis exports for a checkpoint

        Args:
            ckpt: checkpoint path
            out_dir: export directory (default: <run>/exports)
            variations: number of variation records
            mi_oracle: also compare the bound with the exact MI of the tabular reduction
            expected_preset: preset the caller expects the checkpoint to use
            seed: evaluation sampling seed
            oracle_samples: samples for the bound estimate in the oracle report
            plan_sweep: plan and execute between all state pairs up to 3 moves apart

        Returns:
            Evaluation summary (also written as eval_report.json)
        """
        print(f"🔧 Evaluating {ckpt}...")
        trainer = Trainer.from_checkpoint(load_checkpoint(ckpt))
        cfg = trainer.config
        run_root = _checkpoint_run_dir(ckpt)
        self._check_preset(cfg, expected_preset, run_root)
        out = RunDirectory(out_dir or os.path.join(run_root, "exports"))
        os.makedirs(out.root, exist_ok=True)

        def path(name: str) -> str:
            return os.path.join(out.root, name)

        records = collect_variations(trainer, variations, seed=seed)
        out.write_csv(path("variations.csv"), variations_frame(records))

        grid = latent_grid(trainer)
        out.write_csv(path("latent_grid.csv"), grid.frame)

        recovery = feature_recovery(trainer, seed=seed)
        out.write_csv(path("feature_recovery.csv"), recovery.table)
        out.write_csv(path("feature_recovery_summary.csv"), recovery.summary)

        cluster = self._cluster_report(trainer, records)
        out.write_json(path("cluster_report.json"), _json_ready(cluster))

        r2_values = [v for v in grid.r2_latent_from_features.values() if not math.isnan(v)]
        spearman = [recovery.best_spearman(f) for f in trainer.env.feature_names]
        report: Dict[str, Any] = {
            "checkpoint": os.path.abspath(ckpt),
            "step": trainer.step,
            "preset": cfg.preset,
            "variations": len(records),
            "cluster": {k: cluster[k] for k in ("W", "B", "ratio", "n_clusters", "redundant_distance_fraction")
                        if k in cluster},
            "latent_grid": {
                "r2_latent_from_features": grid.r2_latent_from_features,
                "r2_features_from_latent": grid.r2_features_from_latent,
                "min_r2": min(r2_values) if r2_values else None,
            },
            "feature_recovery": {
                "best_spearman": dict(zip(trainer.env.feature_names, spearman)),
                "min_best_spearman": None if any(s is None for s in spearman) else min(spearman),
            },
        }

        if os.path.exists(os.path.join(run_root, "metrics.csv")):
            selectivity = RunDirectory(run_root).read_metrics()["selectivity"].dropna()
            directed = directed_information(selectivity.to_numpy(), cfg.episode_len)
            report["directed_information"] = vars(directed)

        start = trainer.env.initial_state()
        out.write_csv(path("policy_table.csv"), policy_table(trainer, start, seed=seed))
        if not trainer.discrete:
            out.write_csv(path("factor_space.csv"), factor_space_view(trainer, start, seed=seed))
            diversity = factor_diversity(trainer, start, seed=seed)
            report["factor_diversity"] = {
                "n_distinct_outcomes": diversity.n_distinct_outcomes,
                "n_reachable_outcomes": diversity.n_reachable_outcomes,
                "collapsed": diversity.collapsed,
            }
            if diversity.collapsed:
                print(f"⚠️  Generator realizes {diversity.n_distinct_outcomes} of "
                      f"{diversity.n_reachable_outcomes} reachable outcomes (mode collapse)")

        if mi_oracle:
            print("🔧 Building tabular reduction for the MI oracle...")
            reduction = tabular_reduction(trainer, seed=seed)
            gap = bound_gap_report(reduction.mdp, reduction.scores, samples=oracle_samples,
                                   steps=cfg.t_option, seed=seed, eps_floor=cfg.kernel.eps_floor)
            out.write_json(path("bound_gap_report.json"), _json_ready(gap.to_dict()))
            report["bound_gap"] = gap.to_dict()

        if plan_sweep:
            if cfg.t_option != 1 or not trainer.env.spec.has_agent:
                raise ConfigurationError("the planning sweep needs a single-step run on an agent preset")
            print("🔧 Planning between all start/goal pairs within 3 moves...")
            sweep = planning_success_rate(trainer, extract_prototypes(records), max_moves=3)
            out.write_json(path("planning_sweep.json"), _json_ready(sweep))
            report["planning"] = {k: sweep[k] for k in ("pairs", "reached", "success_rate")}

        report["gates"] = evaluate_gates(_json_ready(report))
        for gate in report["gates"]:
            icon = "✅" if gate["passed"] else "⚠️ "
            print(f"{icon} {gate['name']}: {gate['explanation']}")

        report = _json_ready(report)
        out.write_json(path("eval_report.json"), report)
        if self.storage is not None:
            run_id = self.storage.find_run_by_dir(run_root)
            if run_id:
                self.storage.record_evaluation(run_id, "eval", report)
        print(f"✅ Evaluation complete: exports in {out.root}")
        return report

    @staticmethod
    def _check_preset(cfg: TrainConfig, expected: Optional[str], run_root: str):
        if expected is not None and expected != cfg.preset:
            raise ConfigurationError(f"checkpoint preset '{cfg.preset}' does not match requested preset '{expected}'")
        config_path = os.path.join(run_root, "config.json")
        if os.path.exists(config_path):
            with open(config_path, "r", encoding="utf-8") as f:
                on_disk = json.load(f).get("preset")
            if on_disk is not None and on_disk != cfg.preset:
                raise ConfigurationError(
                    f"checkpoint preset '{cfg.preset}' does not match run config preset '{on_disk}'"
                )

    @staticmethod
    def _cluster_report(trainer: Trainer, records) -> Dict[str, Any]:
        """Cluster report over executed actions; redundant aliases are merged when present"""
        if trainer.config.t_option > 1:
            records = [type(r)(**{**vars(r), "actions": ["|".join(r.actions)]}) for r in records]
        try:
            raw = cluster_by_action(records)
        except DegenerateClusterError as exc:
            return {"W": None, "B": None, "ratio": None, "n_clusters": 0, "degenerate": True, "error": str(exc)}

        aliases = {a: c for a, c in ACTION_ALIASES.items() if a in raw.counts and c in raw.counts}
        report = raw.to_dict()
        if aliases:
            merged = cluster_by_action(records, aliases)
            report = merged.to_dict()
            report["unmerged"] = raw.to_dict()
            fractions = [raw.distance(a, c) / merged.B for a, c in aliases.items() if merged.B > 0]
            if fractions:
                report["redundant_distance_fraction"] = max(fractions)
        report["density_modes"] = dh_density_modes(records).n_modes
        return report

    # --- plan ---------------------------------------------------------
    def plan(
        self,
        ckpt: str,
        start: Tuple[int, int],
        goal: Tuple[int, int],
        mode: str = "additive",
        execute: bool = False,
        variations: int = 1000,
        seed: int = 0,
        max_steps: int = 32,
        predictions_dir: Optional[str] = None,
    ) -> Dict[str, Any]:
        """
        Decompose the latent difference between two agent cells into factor prototypes

        Args:
            predictions_dir: when set, the decoded latent after each plan
                label is written there as predicted_<k>.ppm (k = 0 is the start)

        Returns:
            Plan JSON (with an "execution" block when execute is set)
        """
        trainer = Trainer.from_checkpoint(load_checkpoint(ckpt))
        if trainer.config.t_option != 1:
            raise ConfigurationError("planning prototypes need single-step options (t_option = 1)")
        state_at(trainer.env, start)
        state_at(trainer.env, goal)

        records = collect_variations(trainer, variations, seed=seed)
        prototypes = extract_prototypes(records)
        plan, start_state, goal_state = plan_between_cells(trainer, prototypes, start, goal, mode, max_steps)
        result = plan.to_dict(list(start), list(goal))
        result["mode"] = mode
        result["prototypes"] = {label: prototypes.mode(label).tolist() for label in prototypes.labels}
        result["duplicates"] = dict(prototypes.duplicates)
        if predictions_dir is not None:
            result["predictions"] = self._write_predictions(
                trainer, start_state, plan.labels, prototypes, mode, predictions_dir
            )

        if execute:
            outcome = execute_plan(trainer.env, start_state, plan.labels)
            result["execution"] = {
                "executed": outcome.executed,
                "remaining": outcome.remaining,
                "final_cell": list(outcome.final_state.agent),
                "reached": outcome.final_state == goal_state,
            }
        return _json_ready(result)

    @staticmethod
    def _write_predictions(trainer: Trainer, start_state, labels, prototypes, mode: str, out_dir: str) -> List[str]:
        if trainer.discrete:
            return []
        h_start = encode_states(trainer, [start_state])[0]
        paths = []
        for k, h in enumerate(predicted_trajectory(h_start, labels, prototypes, mode, trainer)):
            image = observation_image(trainer.env, trainer.config.observation, decode_prediction(trainer, h))
            path = os.path.join(out_dir, f"predicted_{k}.ppm")
            atomic_write_bytes(path, encode_ppm(image))
            paths.append(path)
        return paths

    # --- render -------------------------------------------------------
    def render(self, ckpt: str, cell: Tuple[int, int], out_path: str) -> Dict[str, str]:
        """
        Observation and decoder reconstruction for the agent at `cell`

        Writes <out> (both images side by side) plus <stem>_observation.ppm
        and <stem>_reconstruction.ppm.
        """
        trainer = Trainer.from_checkpoint(load_checkpoint(ckpt))
        if trainer.discrete:
            raise ConfigurationError("discrete_only runs have no decoder to render")
        env, mode = trainer.env, trainer.config.observation
        state = state_at(env, cell)
        obs = env.observe_batch([state], mode)
        trainer.model.eval()
        recon = trainer.model.decode(trainer.model.encode(Tensor(obs))).data[0]

        observation, reconstruction = observation_image(env, mode, obs[0]), observation_image(env, mode, recon)
        divider = np.ones((3, observation.shape[1], 1))
        combined = np.concatenate([observation, divider, reconstruction], axis=2)

        stem, _ = os.path.splitext(out_path)
        paths = {
            "combined": out_path,
            "observation": f"{stem}_observation.ppm",
            "reconstruction": f"{stem}_reconstruction.ppm",
        }
        atomic_write_bytes(paths["combined"], encode_ppm(combined))
        atomic_write_bytes(paths["observation"], encode_ppm(observation))
        atomic_write_bytes(paths["reconstruction"], encode_ppm(reconstruction))
        print(f"💾 Rendered {cell} to {out_path}")
        return paths
