import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config
from errors import NumericalAbort
from pipeline import ICFPipeline, _checkpoint_run_dir
from storage import RunStorage, atomic_write_text
from trainer import EXPERIMENTS, build_config, load_config_file

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NUMERICAL_ABORT = 2

# (flag dest, dotted config field)
INLINE_FIELDS = [
    ("preset", "preset"),
    ("mode", "mode"),
    ("n_pool", "n_pool"),
    ("t_option", "t_option"),
    ("lr", "lr"),
    ("optimizer", "optimizer"),
    ("observation", "observation"),
    ("n_workers", "n_workers"),
    ("checkpoint_every", "checkpoint_every"),
    ("episode_len", "episode_len"),
    ("epsilon_greedy", "epsilon_greedy"),
    ("latent_dim", "model.latent_dim"),
    ("encoder", "model.encoder"),
    ("projection", "model.projection"),
    ("kernel", "kernel.kind"),
    ("sigma", "kernel.sigma"),
    ("importance_sampling", "importance_sampling"),
    ("use_transition", "use_transition"),
    ("redundant_actions", "redundant_actions"),
    ("open_grid", "open_grid"),
]


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other input error"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}")
        sys.exit(EXIT_ERROR)


def parse_cell(text: str) -> Tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got '{text}'")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer coordinates 'x,y', got '{text}'")


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any):
    keys = dotted.split(".")
    for key in keys[:-1]:
        target = target.setdefault(key, {})
    target[keys[-1]] = value


def _parse_assignment(text: str) -> Tuple[str, Any]:
    if "=" not in text:
        raise ValueError(f"--set expects key=value, got '{text}'")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Config file contents, then inline flags, then --set assignments"""
    overrides: Dict[str, Any] = load_config_file(args.config) if args.config else {}
    for dest, dotted in INLINE_FIELDS:
        value = getattr(args, dest, None)
        if value is not None:
            _set_dotted(overrides, dotted, value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    for assignment in args.set or []:
        key, value = _parse_assignment(assignment)
        _set_dotted(overrides, key, value)
    return overrides


def _pipeline(args: argparse.Namespace) -> ICFPipeline:
    if args.no_index:
        return ICFPipeline(index_runs=False)
    return ICFPipeline(storage=RunStorage(args.db))


def cmd_train(args: argparse.Namespace):
    pipeline = _pipeline(args)
    config = None
    if not args.resume:
        config = build_config(args.experiment, collect_overrides(args))
    result = pipeline.train(config, out_dir=args.out, resume=args.resume, steps=args.steps)

    last = result.records[-1] if result.records else {}
    print(f"\nRun directory: {result.run_dir}")
    if result.run_id:
        print(f"Run ID: {result.run_id}")
    print(f"Steps: {result.trainer.step}")
    if last.get("selectivity") is not None:
        print(f"Selectivity: {last['selectivity']:.4f}")
        print(f"DV bound: {last['dv_bound']:.4f}")


def cmd_eval(args: argparse.Namespace):
    pipeline = _pipeline(args)
    report = pipeline.evaluate(
        args.ckpt,
        out_dir=args.out,
        variations=args.variations,
        mi_oracle=args.mi_oracle,
        expected_preset=args.preset,
        seed=args.seed,
        oracle_samples=args.oracle_samples,
        plan_sweep=args.plan_sweep,
    )
    cluster = report["cluster"]
    print(f"\nClusters: {cluster.get('n_clusters')} | W/B ratio: {cluster.get('ratio')}")
    if "bound_gap" in report:
        gap = report["bound_gap"]
        print(f"Bound {gap['estimate']:.4f} ± {gap['se']:.4f} vs exact MI {gap['oracle']:.4f}")


def cmd_plan(args: argparse.Namespace):
    pipeline = ICFPipeline(index_runs=False)
    if args.out:
        predictions_dir = os.path.dirname(os.path.abspath(args.out))
    else:
        predictions_dir = os.path.join(_checkpoint_run_dir(args.ckpt), "exports")
    result = pipeline.plan(
        args.ckpt, args.start, args.goal,
        mode=args.mode, execute=args.execute,
        variations=args.variations, seed=args.seed,
        predictions_dir=predictions_dir,
    )
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    if args.execute and not result["execution"]["reached"]:
        print(f"⚠️  Execution stopped at {result['execution']['final_cell']} (goal {list(args.goal)})")


def cmd_render(args: argparse.Namespace):
    pipeline = ICFPipeline(index_runs=False)
    out = args.out or os.path.join(
        _checkpoint_run_dir(args.ckpt), "exports", f"render_{args.state[0]}_{args.state[1]}.ppm"
    )
    paths = pipeline.render(args.ckpt, args.state, out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")


def cmd_list(args: argparse.Namespace):
    storage = RunStorage(args.db)
    runs = storage.get_run_history(limit=args.limit)

    if not runs:
        print("No runs saved yet.")
        return

    for run in runs:
        if args.status and run["status"] != args.status:
            continue
        print(
            f"{run['run_id']} | {run['timestamp']} | {run['preset']} ({run['mode']}, seed {run['seed']}) "
            f"| status={run['status']} | steps={run['steps_completed']} "
            f"| selectivity={run['final_selectivity']} | dir={run['run_dir']}"
        )


def cmd_stats(args: argparse.Namespace):
    storage = RunStorage(args.db)
    stats = storage.get_run_statistics()
    print(json.dumps(stats, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        description="Independently controllable factors: train, evaluate, plan and inspect runs."
    )
    parser.add_argument("--db", default=Config.STORAGE_DB, help="SQLite run index.")
    parser.add_argument(
        "--no-index",
        action="store_true",
        help="Do not record runs in the SQLite index.",
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train a run from a JSON config and/or flags.")
    train_parser.add_argument("--config", help="Path to a JSON run config.")
    train_parser.add_argument("--experiment", choices=sorted(EXPERIMENTS), help="Start from an experiment template.")
    train_parser.add_argument("--out", help="Run directory (default: runs/<preset>_seed<seed>).")
    train_parser.add_argument("--seed", type=int, help="Random seed.")
    train_parser.add_argument("--resume", help="Checkpoint to continue from.")
    train_parser.add_argument("--steps", type=int, help="Total number of training steps.")
    train_parser.add_argument("--preset", help="Environment preset.")
    train_parser.add_argument("--mode", choices=["joint", "discrete_only"])
    train_parser.add_argument("--n-pool", type=int, dest="n_pool")
    train_parser.add_argument("--t-option", type=int, dest="t_option")
    train_parser.add_argument("--lr", type=float)
    train_parser.add_argument("--optimizer", choices=["adam", "sgd"])
    train_parser.add_argument("--observation", choices=["symbolic", "pixels"])
    train_parser.add_argument("--n-workers", type=int, dest="n_workers")
    train_parser.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    train_parser.add_argument("--episode-len", type=int, dest="episode_len")
    train_parser.add_argument("--epsilon-greedy", type=float, dest="epsilon_greedy")
    train_parser.add_argument("--latent-dim", type=int, dest="latent_dim")
    train_parser.add_argument("--encoder", choices=["mlp", "conv4"])
    train_parser.add_argument("--projection", choices=["hypercube", "hypersphere", "simplex", "scaled_simplex"])
    train_parser.add_argument("--kernel", choices=["gaussian", "rectified_inner"])
    train_parser.add_argument("--sigma", type=float)
    train_parser.add_argument("--no-importance-sampling", dest="importance_sampling", action="store_false",
                              default=None, help="Train only the behavior factor (ablation).")
    for flag, dest in [
        ("--use-transition", "use_transition"),
        ("--redundant-actions", "redundant_actions"),
        ("--open-grid", "open_grid"),
    ]:
        train_parser.add_argument(flag, dest=dest, action="store_true", default=None)
    train_parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override any config field by dotted path (value parsed as JSON when possible).",
    )
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("eval", help="Write analysis exports for a checkpoint.")
    eval_parser.add_argument("--ckpt", required=True, help="Checkpoint path.")
    eval_parser.add_argument("--out", help="Export directory (default: <run>/exports).")
    eval_parser.add_argument("--variations", type=int, default=1000, help="Number of variation records.")
    eval_parser.add_argument("--mi-oracle", action="store_true", help="Compare the bound with the exact MI.")
    eval_parser.add_argument("--oracle-samples", type=int, default=100_000, dest="oracle_samples")
    eval_parser.add_argument("--plan-sweep", action="store_true", dest="plan_sweep",
                             help="Plan between all state pairs up to 3 moves apart.")
    eval_parser.add_argument("--preset", help="Fail unless the checkpoint uses this preset.")
    eval_parser.add_argument("--seed", type=int, default=0, help="Evaluation sampling seed.")
    eval_parser.set_defaults(func=cmd_eval)

    plan_parser = subparsers.add_parser("plan", help="Plan between two agent cells in latent space.")
    plan_parser.add_argument("--ckpt", required=True, help="Checkpoint path.")
    plan_parser.add_argument("--start", required=True, type=parse_cell, help="Start cell 'x,y'.")
    plan_parser.add_argument("--goal", required=True, type=parse_cell, help="Goal cell 'x,y'.")
    plan_parser.add_argument("--mode", choices=["additive", "learned"], default="additive")
    plan_parser.add_argument("--execute", action="store_true", help="Execute the plan in the environment.")
    plan_parser.add_argument("--variations", type=int, default=1000, help="Records used for prototypes.")
    plan_parser.add_argument("--seed", type=int, default=0)
    plan_parser.add_argument(
        "--out", help="Also write the plan JSON here; predicted_<k>.ppm go next to it (default <run>/exports)."
    )
    plan_parser.set_defaults(func=cmd_plan)

    render_parser = subparsers.add_parser("render", help="Render observation and reconstruction as PPM.")
    render_parser.add_argument("--ckpt", required=True, help="Checkpoint path.")
    render_parser.add_argument("--state", required=True, type=parse_cell, help="Agent cell 'x,y'.")
    render_parser.add_argument("--out", help="Output PPM path.")
    render_parser.set_defaults(func=cmd_render)

    list_parser = subparsers.add_parser("list", help="List recently indexed runs.")
    list_parser.add_argument("--limit", type=int, default=20, help="Max runs to show.")
    list_parser.add_argument("--status", help="Filter by status (running, completed, aborted).")
    list_parser.set_defaults(func=cmd_list)

    stats_parser = subparsers.add_parser("stats", help="Show aggregate statistics across runs.")
    stats_parser.set_defaults(func=cmd_stats)

    return parser


def main(argv: Optional[List[str]] = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NumericalAbort as exc:
        print(f"❌ numerical abort: {exc}")
        sys.exit(EXIT_NUMERICAL_ABORT)
    except Exception as exc:  # noqa: BLE001 - show meaningful error
        print(f"❌ {exc}")
        sys.exit(EXIT_ERROR)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
