"""CLI entry point: dataset collection, dynamics training, ORPO runs, LSVI sweeps and exports."""

import argparse
import sys
from pathlib import Path

import numpy as np
from loguru import logger

from src.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    apply_preset,
    load_config,
    render_default_toml,
    validate_config,
)
from src.datasets import ReplayBuffer
from src.dynamics import HEURISTICS, load_dynamics, save_dynamics, train_ensemble
from src.envs import LINEAR_MDP_KINDS, RiskWorld, collect_riskworld_dataset
from src.evaluate import (
    REFERENCE_SCORES,
    evaluate_policy,
    normalized_score,
    spearman_distance_uncertainty,
    uncertainty_field,
)
from src.lsvi import lsvi_seed_sweep
from src.numkit import NumericalError, RngStreams
from src.orpo import StageError, run_seeds
from src.policies import load_policy
from src.storage import (
    SchemaError,
    export_jsonl,
    load_buffer,
    save_buffer,
    save_grid_csv,
    save_json,
    save_regret_csv,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _configure_logging(level: str, log_file: Path = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(log_file, level='DEBUG')


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(Path(args.config)) if args.config else ExperimentConfig()
    if getattr(args, 'preset', None):
        config = apply_preset(config, args.preset)
    if args.override:
        config = apply_overrides(config, args.override)
    if args.seed:
        config.seeds = list(args.seed)
    validate_config(config)
    return config


# ── Subcommands ──────────────────────────────────────────────────────────────

def cmd_collect_data(args: argparse.Namespace) -> None:
    seed = args.seed[0] if args.seed else 0
    if args.n <= 0:
        raise ConfigError(f"dataset size must be positive, got {args.n}")
    dataset = collect_riskworld_dataset(args.n, RngStreams(seed).get('dataset'))
    buffer = ReplayBuffer.from_batch(dataset, 'env')
    out = Path(args.out)
    save_buffer(buffer, out)
    if args.jsonl:
        export_jsonl(buffer, out.with_suffix('.jsonl'))
    print(f"Saved {len(buffer)} transitions to {out}")


def cmd_train_dynamics(args: argparse.Namespace) -> None:
    config = _build_config(args)
    buffer = load_buffer(Path(args.data))
    model, report = train_ensemble(buffer.view(), config.dynamics, RngStreams(config.seeds[0]))
    out = Path(args.out)
    save_dynamics(model, out)
    save_json(report.to_dict(), out.with_suffix('.json'))
    nll = ', '.join(f"{m.best_holdout_nll:.3f}" for m in report.members)
    print(f"Saved {model.size}-member ensemble to {out} (holdout NLL: {nll})")


def cmd_run(args: argparse.Namespace) -> None:
    config = _build_config(args)
    out = Path(args.out)
    _configure_logging(args.log_level, out / 'run.log')
    results = run_seeds(config, config.seeds, out, workers=args.workers)
    print(f"\n{config.preset}: {len(results)} seed(s) written to {out}")
    for r in results:
        print(f"  seed {r.seed}: return {r.final_report.mean_return:.2f} "
              f"± {r.final_report.std_return:.2f} ({r.seconds:.0f}s)")
    returns = [r.final_report.mean_return for r in results]
    print(f"  mean over seeds: {np.mean(returns):.2f}")


def cmd_lsvi(args: argparse.Namespace) -> None:
    S, A, H = args.states, args.actions, args.horizon
    try:
        bonus = None if args.bonus == 'auto' else float(args.bonus)
    except ValueError as exc:
        raise ConfigError(f"--bonus must be a number or 'auto', got '{args.bonus}'") from exc
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be at least 1, got {args.seeds}")
    seeds = list(range(args.seeds))
    try:
        sweep = lsvi_seed_sweep(args.instance, S, A, H, args.episodes, seeds, bonus, args.beta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bonus = sweep.bonus_runs[0].state.lambda_bonus
    out = Path(args.out)
    for seed, run, greedy in zip(seeds, sweep.bonus_runs, sweep.greedy_runs):
        save_regret_csv(out / f'lsvi_seed{seed}.csv', run.regret.instant)
        save_regret_csv(out / f'greedy_seed{seed}.csv', greedy.regret.instant)
    summary = {
        'instance': args.instance,
        'states': S, 'actions': A, 'horizon': H,
        'episodes': args.episodes,
        'lambda_bonus': bonus,
        'lsvi_total_regret': sweep.bonus_totals.tolist(),
        'greedy_total_regret': sweep.greedy_totals.tolist(),
        'lsvi_median': float(np.median(sweep.bonus_totals)),
        'greedy_median': float(np.median(sweep.greedy_totals)),
    }
    save_json(summary, out / 'summary.json')
    print(f"LSVI (λ={bonus:.3f}) median regret {summary['lsvi_median']:.2f}; "
          f"greedy median regret {summary['greedy_median']:.2f}")


def cmd_eval(args: argparse.Namespace) -> None:
    if args.score is not None:
        if not args.env_name:
            raise ConfigError("--score needs --env-name")
        print(f"Normalized score: {normalized_score(args.score, args.env_name):.2f}")
    if args.policy:
        policy = load_policy(Path(args.policy))
        seed = args.seed[0] if args.seed else 0
        report = evaluate_policy(policy, RiskWorld(), args.episodes, RngStreams(seed).fresh('eval'))
        if args.out:
            save_json(report.to_dict(), Path(args.out))
        print(f"Return {report.mean_return:.2f} ± {report.std_return:.2f} over {report.episodes} episodes")
    if args.score is None and not args.policy:
        raise ConfigError("eval needs --policy and/or --score")


def cmd_export_grid(args: argparse.Namespace) -> None:
    model = load_dynamics(Path(args.dynamics))
    grid, values = uncertainty_field(model, args.heuristic, args.n)
    save_grid_csv(Path(args.out), grid, values)
    rho = spearman_distance_uncertainty(grid, values)
    print(f"Saved {len(grid)} grid points to {args.out} (Spearman vs distance: {rho:.3f})")


def cmd_init_config(args: argparse.Namespace) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_default_toml(), encoding='utf-8')
    print(f"Wrote default configuration to {out}")


# ── Parser ───────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Optimistic model rollouts for pessimistic offline policy optimization'
    )
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Diagnostic log level (default: INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p: argparse.ArgumentParser, out_default: str) -> None:
        p.add_argument('--config', type=str, help='TOML configuration file')
        p.add_argument('--seed', type=int, action='append', help='Seed (repeatable)')
        p.add_argument('--out', type=str, default=out_default,
                       help=f'Output path (default: {out_default})')
        p.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                       help='Override a config field, e.g. training.epochs=2 (repeatable)')

    p = sub.add_parser('collect-data', help='Collect the offline RiskWorld dataset')
    p.add_argument('--n', type=int, default=10_000, help='Transitions (default: 10000)')
    p.add_argument('--seed', type=int, action='append', help='Seed')
    p.add_argument('--out', type=str, default='data/riskworld.rbuf', help='Buffer file')
    p.add_argument('--jsonl', action='store_true', help='Also write a JSON-lines export')
    p.set_defaults(func=cmd_collect_data)

    p = sub.add_parser('train-dynamics', help='Train the ensemble on a saved dataset')
    common(p, 'runs/dynamics.ckpt')
    p.add_argument('--data', type=str, required=True, help='Buffer file from collect-data')
    p.set_defaults(func=cmd_train_dynamics)

    p = sub.add_parser('run', help='Train and evaluate a preset over one or more seeds')
    common(p, 'runs/orpo')
    p.add_argument('--preset', choices=sorted(PRESETS), help='Ablation preset')
    p.add_argument('--workers', type=int, default=1, help='Seeds run in parallel processes')
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('lsvi', help='Regret sweep of LSVI with bonus vs greedy on a linear MDP')
    p.add_argument('--instance', choices=LINEAR_MDP_KINDS, default='needle')
    p.add_argument('--states', type=int, default=6)
    p.add_argument('--actions', type=int, default=2)
    p.add_argument('--horizon', type=int, default=5)
    p.add_argument('--episodes', type=int, default=2000)
    p.add_argument('--seeds', type=int, default=50, help='Number of seeds 0..n-1')
    p.add_argument('--bonus', type=str, default='auto', help="Bonus scale or 'auto'")
    p.add_argument('--beta', type=float, default=1.0, help='Ridge coefficient')
    p.add_argument('--out', type=str, default='runs/lsvi')
    p.set_defaults(func=cmd_lsvi)

    p = sub.add_parser('eval', help='Evaluate a policy checkpoint and/or normalize a score')
    p.add_argument('--policy', type=str, help='Policy checkpoint')
    p.add_argument('--episodes', type=int, default=500)
    p.add_argument('--seed', type=int, action='append', help='Seed')
    p.add_argument('--out', type=str, help='EvalReport JSON path')
    p.add_argument('--score', type=float, help='Raw return to normalize')
    p.add_argument('--env-name', choices=sorted(REFERENCE_SCORES), help='Reference table entry')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('export-grid', help='Export the uncertainty field of a dynamics checkpoint')
    p.add_argument('--dynamics', type=str, required=True, help='Dynamics checkpoint')
    p.add_argument('--heuristic', choices=HEURISTICS, default='ensemble_std')
    p.add_argument('--n', type=int, default=61, help='Grid points per axis')
    p.add_argument('--out', type=str, default='runs/uncertainty_grid.csv')
    p.set_defaults(func=cmd_export_grid)

    p = sub.add_parser('init-config', help='Write the documented default configuration')
    p.add_argument('--out', type=str, default='config.toml')
    p.set_defaults(func=cmd_init_config)
    return parser


def exit_code_for(exc: BaseException) -> int:
    """Map an exception (or the cause of a stage failure) to the process exit code."""
    root = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(root, ConfigError):
        return EXIT_CONFIG
    if isinstance(root, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(root, (OSError, SchemaError)):
        return EXIT_IO
    if isinstance(exc, ValueError):
        # bad argument values rejected by a command outside any training stage
        return EXIT_CONFIG
    return EXIT_FAILURE


def main(argv: list = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    try:
        args.func(args)
    except (ValueError, NumericalError, OSError, StageError) as exc:
        print(f"Error: {exc}")
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
