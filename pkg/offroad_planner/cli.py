"""
Command-line entry point.

Usage:
    python -m offroad_planner <subcommand> [--config FILE] [--seed N] [--output-dir DIR] [--log-level LEVEL]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

from colorama import Fore, Style, init as colorama_init

from offroad_planner.config import load_config, log_level, write_resolved
from offroad_planner.csvio import emit_csv
from offroad_planner.errors import ConfigError, DomainError, PlannerError
from offroad_planner.optim import benchmark_suite
from offroad_planner.planner import PlannerConfig, paired_study, study_world, write_paired_csv
from offroad_planner.seqmodel import (
    ModelConfig,
    TrainConfig,
    grad_check,
    load_weights,
    per_step_confusion,
    per_step_metrics,
    save_weights,
    train,
    train_ensemble,
)
from offroad_planner.seqmodel.metrics import write_confusion_csv, write_metrics_csv, write_precision_recall_csv
from offroad_planner.seqmodel.training import member_seeds
from offroad_planner.seqmodel.types import TrajectorySamples
from offroad_planner.uncertainty import (
    EnsembleOutput,
    EnsemblePredictor,
    horizon_curve,
    uncertainty_trace,
    write_horizon_csv,
)
from offroad_planner.vehicle import ModelParams
from offroad_planner.worldsim import (
    OraclePredictor,
    TerrainWorld,
    WorldConfig,
    generate_world,
    load_world,
    make_dataset,
    save_dataset,
    save_world,
    split_dataset,
)

__all__ = ["dispatch", "emit_csv", "main"]

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
GRAD_CHECK_TOLERANCE = 1e-4
LOSS_HEADER = ("epoch", "loss", "ce", "nll")
BENCH_HEADER = ("name", "method", "dim", "best_f", "evaluations")


class UsageError(Exception):
    """Raised instead of argparse's own exit so dispatch controls the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ok(message: str) -> None:
    print(f"{Fore.GREEN}✅ {message}{Style.RESET_ALL}")


def _fail(message: str) -> None:
    print(f"{Fore.RED}❌ {message}{Style.RESET_ALL}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _world(config: Dict[str, Any], seed: int, path: Optional[str] = None) -> TerrainWorld:
    if path is not None:
        return load_world(path)
    wc = WorldConfig.from_dict(config["world"])
    return generate_world(seed, wc.size, wc.class_frequencies, wc.blob_scale, wc.cell_size)


def _datasets(config: Dict[str, Any], seed: int, horizon: int,
              world_path: Optional[str] = None) -> Tuple[TrajectorySamples, TrajectorySamples]:
    """Train/test split of a freshly generated dataset."""
    wc = WorldConfig.from_dict(config["world"])
    world = _world(config, seed, world_path)
    total = int(config["world"]["n_samples"]) + int(config["world"]["test_samples"])
    data = make_dataset(world, total, horizon, seed, wc, ModelParams.from_dict(config["vehicle"]),
                        float(config["planner"]["v_max"]))
    return split_dataset(data, int(config["world"]["test_samples"]))


def _model_config(config: Dict[str, Any], architecture: Optional[str] = None) -> ModelConfig:
    section = dict(config["model"])
    if architecture is not None:
        section["architecture"] = architecture
    return ModelConfig.from_dict(section, WorldConfig.from_dict(config["world"]).feature_dim)


def _write_loss(path: Path, result) -> None:
    rows = [(e, l, c, n) for e, (l, c, n) in enumerate(zip(result.loss_trace, result.ce_trace, result.nll_trace))]
    emit_csv(path, LOSS_HEADER, rows)


def _load_ensemble(directory: str) -> EnsemblePredictor:
    members = sorted(p for p in Path(directory).iterdir() if (p / "manifest.json").exists())
    if not members:
        raise FileNotFoundError(f"No saved members under {directory}")
    return EnsemblePredictor([load_weights(p) for p in members])


def _train_members(config: Dict[str, Any], data: TrajectorySamples, out: Path) -> EnsemblePredictor:
    results = train_ensemble(data, _model_config(config), TrainConfig.from_dict(config["model"], config["seed"]),
                             members=int(config["ensemble"]["members"]))
    for k, result in enumerate(results):
        save_weights(result.weights, out / "ensemble" / f"member_{k}")
        _write_loss(out / "ensemble" / f"member_{k}_loss.csv", result)
    return EnsemblePredictor([r.weights for r in results])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_world(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    world = _world(config, config["seed"])
    path = save_world(world, out / "world.bin")
    emit_csv(out / "world_marginals.csv", ("class", "frequency"), list(enumerate(world.marginals())))
    _ok(f"World ({world.size}x{world.size}) written to {path}")
    return 0


def cmd_make_dataset(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    horizon = args.horizon or int(config["model"]["horizon"])
    train_set, test_set = _datasets(config, config["seed"], horizon, args.world)
    save_dataset(train_set, out / f"dataset_h{horizon}" / "train")
    save_dataset(test_set, out / f"dataset_h{horizon}" / "test")
    _ok(f"Dataset H={horizon}: {len(train_set)} train / {len(test_set)} test samples")
    return 0


def cmd_train(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    horizon = int(config["model"]["horizon"])
    train_set, _ = _datasets(config, config["seed"], horizon, args.world)
    seed = member_seeds(config["seed"], args.member + 1)[args.member]
    train_cfg = TrainConfig.from_dict(config["model"], seed)
    result = train(train_set, _model_config(config, args.architecture), train_cfg)
    target = out / f"model_{result.weights.architecture}_member{args.member}"
    save_weights(result.weights, target)
    _write_loss(target.with_name(target.name + "_loss.csv"), result)
    _ok(f"Trained {result.weights.architecture} member {args.member}: best epoch {result.best_epoch}, "
        f"loss {min(result.loss_trace):.4f}")
    return 0


def cmd_train_ensemble(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    train_set, _ = _datasets(config, config["seed"], int(config["model"]["horizon"]), args.world)
    ensemble = _train_members(config, train_set, out)
    _ok(f"Trained {ensemble.members} ensemble members into {out / 'ensemble'}")
    return 0


def cmd_eval_model(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    for horizon in args.horizons:
        train_set, test_set = _datasets(config, config["seed"], horizon, args.world)
        if args.weights:
            weights = load_weights(args.weights)
        else:
            weights = train(train_set, _model_config(config, args.architecture),
                            TrainConfig.from_dict(config["model"], config["seed"])).weights
        rows = per_step_metrics(weights, test_set)
        tag = f"{weights.architecture}_h{horizon}"
        write_metrics_csv(out / f"metrics_{tag}.csv", rows)
        write_precision_recall_csv(out / f"precision_recall_{tag}.csv", rows)
        write_confusion_csv(out / f"confusion_{tag}.csv", per_step_confusion(weights, test_set))
        _ok(f"H={horizon}: first-step macro-F1 {rows[0].macro_f1:.3f}, last-step {rows[-1].macro_f1:.3f}")
    return 0


def cmd_uncertainty_curve(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    train_set, test_set = _datasets(config, config["seed"], int(config["model"]["horizon"]), args.world)
    ensemble = _load_ensemble(args.ensemble) if args.ensemble else _train_members(config, train_set, out)
    probs, mu, var = ensemble.predict_batch(test_set.obs, test_set.actions)
    ens_cfg = config["ensemble"]
    traces = [
        uncertainty_trace(EnsembleOutput(probs[:, n], mu[:, n], var[:, n]), ens_cfg["w_class"], ens_cfg["w_bearing"],
                          ens_cfg["distance"], ens_cfg["sigma_min"])
        for n in range(len(test_set))
    ]
    curve = horizon_curve(traces)
    write_horizon_csv(out / "uncertainty_curve.csv", curve)
    _ok(f"Uncertainty curve over {curve.count} held-out queries written")
    return 0


def cmd_run_episodes(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    planner_cfg = PlannerConfig.from_config(config)
    episodes = int(config["planner"]["episodes"])
    seeds = list(range(config["seed"], config["seed"] + episodes))

    if config["planner"]["predictor"] == "oracle":
        members = int(config["ensemble"]["members"])

        def predictor_factory(world: TerrainWorld):
            return OraclePredictor(world, planner_cfg.params, members=members, v_max=planner_cfg.v_max)
    else:
        if not args.ensemble:
            raise ConfigError("--ensemble is required when planner.predictor is 'ensemble'", key_path="planner.predictor")
        ensemble = _load_ensemble(args.ensemble)
        if ensemble.obs_dim != planner_cfg.world.feature_dim:
            raise DomainError(f"Ensemble expects {ensemble.obs_dim} features, world produces {planner_cfg.world.feature_dim}")

        def predictor_factory(world: TerrainWorld):
            return ensemble

    study = paired_study(seeds, planner_cfg, lambda s: study_world(s, planner_cfg), predictor_factory,
                         beta_high=args.beta_high, beta_low=args.beta_low, output_dir=out / "episodes")
    write_paired_csv(out / "paired_study.csv", study)
    emit_csv(out / "sign_test.csv", ("metric", "lower_count", "episodes", "p_value"), [
        ("mean_speed", study.speed_lower_count, len(study.rows), study.p_speed),
        ("mean_sigma", study.sigma_lower_count, len(study.rows), study.p_sigma),
    ])
    _ok(f"{len(seeds)} paired episodes: p_speed={study.p_speed:.3g}, p_sigma={study.p_sigma:.3g}")
    return 0


def cmd_grad_check(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    architectures = ["transformer", "lstm"] if args.architecture == "both" else [args.architecture]
    results = [grad_check(a, seed=config["seed"], n_coords=args.coords) for a in architectures]
    emit_csv(out / "grad_check.csv", ("architecture", "max_rel_error", "n_coords"),
             [(r.architecture, r.max_rel_error, r.n_coords) for r in results])
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.architecture}: max relative error {r.max_rel_error:.3e} over {r.n_coords} coordinates")
    if worst >= GRAD_CHECK_TOLERANCE:
        _fail(f"Gradient check failed: {worst:.3e} >= {GRAD_CHECK_TOLERANCE}")
        return 2
    _ok(f"Gradient check passed: max relative error {worst:.3e} < {GRAD_CHECK_TOLERANCE}")
    return 0


def cmd_bench_optim(args: argparse.Namespace, config: Dict[str, Any], out: Path) -> int:
    rows = benchmark_suite(config["seed"])
    emit_csv(out / "bench_optim.csv", BENCH_HEADER, [(r.name, r.method, r.dim, r.best_f, r.evaluations) for r in rows])
    for r in rows:
        print(f"{r.method:>4} {r.name:<11} dim={r.dim} best_f={r.best_f:.3e} evals={r.evaluations}")
    _ok(f"{len(rows)} optimizer benchmarks written")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any], Path], int]] = {
    "gen-world": cmd_gen_world,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "eval-model": cmd_eval_model,
    "uncertainty-curve": cmd_uncertainty_curve,
    "run-episodes": cmd_run_episodes,
    "grad-check": cmd_grad_check,
    "bench-optim": cmd_bench_optim,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration")
    common.add_argument("--seed", type=int, help="Master seed (overrides config)")
    common.add_argument("--output-dir", help="Result directory (overrides config)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level (default: PLANNER_LOG_LEVEL or INFO)")

    parser = _Parser(prog="offroad_planner", description="Hybrid offroad planner experiments")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-world", parents=[common], help="Generate and save a terrain world")

    p = sub.add_parser("make-dataset", parents=[common], help="Generate a labeled trajectory dataset")
    p.add_argument("--horizon", type=int, choices=[10, 20, 40], help="Prediction horizon (default: model.horizon)")
    p.add_argument("--world", help="Saved world file (default: generate from seed)")

    p = sub.add_parser("train", parents=[common], help="Train one sequence model")
    p.add_argument("--architecture", choices=["transformer", "lstm"])
    p.add_argument("--member", type=int, default=0, help="Member index selecting the derived seed")
    p.add_argument("--world", help="Saved world file")

    p = sub.add_parser("train-ensemble", parents=[common], help="Train an ensemble of sequence models")
    p.add_argument("--members", type=int, help="Ensemble size (default: ensemble.members)")
    p.add_argument("--world", help="Saved world file")

    p = sub.add_parser("eval-model", parents=[common], help="Per-step metrics for each horizon")
    p.add_argument("--horizons", type=int, nargs="+", default=[10, 20, 40])
    p.add_argument("--architecture", choices=["transformer", "lstm"])
    p.add_argument("--weights", help="Saved model directory (default: train one per horizon)")
    p.add_argument("--world", help="Saved world file")

    p = sub.add_parser("uncertainty-curve", parents=[common], help="Per-step ensemble MI over held-out queries")
    p.add_argument("--ensemble", help="Directory of saved members (default: train them)")
    p.add_argument("--world", help="Saved world file")

    p = sub.add_parser("run-episodes", parents=[common], help="Paired beta_sigma episode study")
    p.add_argument("--episodes", type=int, help="Number of seeds (default: planner.episodes)")
    p.add_argument("--ensemble", help="Directory of saved members when planner.predictor is 'ensemble'")
    p.add_argument("--beta-high", type=float, default=10.0)
    p.add_argument("--beta-low", type=float, default=0.0)

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient check")
    p.add_argument("--architecture", choices=["transformer", "lstm", "both"], default="both")
    p.add_argument("--coords", type=int, default=100)

    sub.add_parser("bench-optim", parents=[common], help="CEM / CMA-ES reference benchmarks")
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and map failures to exit codes.

    Returns:
        0 on success, 1 on usage/configuration errors, 2 on runtime errors
    """
    colorama_init()
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help exits through argparse
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level or log_level(), format=LOG_FORMAT, force=True)

    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "members", None) is not None:
        overrides["ensemble"] = {"members": args.members}
    if getattr(args, "episodes", None) is not None:
        overrides["planner"] = {"episodes": args.episodes}
    try:
        config = load_config(args.config, overrides)
    except FileNotFoundError as e:
        _fail(str(e))
        return 1
    except ConfigError as e:
        _fail(f"Invalid configuration at '{e.key_path}': {e}")
        return 1

    out = Path(config["output_dir"])
    try:
        write_resolved(config, out)
        logger.info(f"Running {args.command} with seed {config['seed']} into {out}")
        return COMMANDS[args.command](args, config, out)
    except ConfigError as e:
        _fail(f"Invalid configuration at '{e.key_path}': {e}")
        return 1
    except FileNotFoundError as e:
        _fail(str(e))
        return 2
    except (PlannerError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        _fail(f"{type(e).__name__}: {e}")
        return 2


def main() -> None:
    sys.exit(dispatch())
