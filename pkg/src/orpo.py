"""
Training loop: optimistic rollouts for the rollout policy, pessimistic rollouts
and relabeled data for the output policy, periodic evaluation.

Every preset runs through run_experiment; presets only change config fields.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from loguru import logger

from src.config import ExperimentConfig, config_hash, dump_config, validate_config
from src.datasets import BufferSet, MixSpec, sample_mixed_batch
from src.dynamics import save_dynamics, train_ensemble
from src.envs import (
    ACTION_DIM,
    ACTION_HIGH,
    ACTION_LOW,
    STATE_DIM,
    RiskWorld,
    collect_riskworld_dataset,
    riskworld_reward_fn,
)
from src.evaluate import (
    EvalReport,
    action_distance,
    action_distance_histogram,
    action_distances,
    avg_model_uncertainty,
    evaluate_in_model,
    evaluate_policy,
)
from src.numkit import RngStreams
from src.policies import RandomPolicy, SacPolicy, Td3BcPolicy, save_policy
from src.shaping import RewardShaper, generate_rollouts
from src.storage import save_buffer, save_histogram_csv, save_json

STAGES = ('collect', 'dynamics', 'rollout-optimistic', 'rollout-pessimistic',
          'sac', 'td3bc', 'evaluate', 'checkpoint')

METRIC_FIELDS = (
    'config_hash', 'preset', 'seed', 'epoch', 'grad_steps',
    'mean_return', 'std_return', 'rollout_mean_return', 'model_return', 'eps_u',
    'action_distance', 'rollout_action_distance',
    'sac_critic_loss', 'sac_actor_loss', 'sac_alpha', 'sac_entropy',
    'output_critic_loss', 'output_actor_loss', 'output_lambda_bc',
    'n_env', 'n_opt_raw', 'n_opt_relabel', 'n_pess', 'truncated_fraction',
)


class StageError(RuntimeError):
    """An error raised inside a named training stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    def __reduce__(self):
        # worker processes send failures back pickled
        return (StageError, (self.stage, self.cause))


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class ExperimentResult:
    seed: int
    out_dir: Path
    metrics: list[dict]
    final_report: EvalReport
    seconds: float


def _mean(values: list[float]) -> Any:
    return float(np.mean(values)) if values else ''


def _make_learner(kind: str, config: ExperimentConfig, rng: np.random.Generator,
                  state_mean: np.ndarray, state_std: np.ndarray) -> SacPolicy | Td3BcPolicy:
    if kind == 'sac':
        return SacPolicy(STATE_DIM, ACTION_DIM, config.sac, rng, ACTION_LOW, ACTION_HIGH, state_mean, state_std)
    return Td3BcPolicy(STATE_DIM, ACTION_DIM, config.td3bc, rng, ACTION_LOW, ACTION_HIGH, state_mean, state_std)


def run_experiment(config: ExperimentConfig, seed: int, out_dir: Path) -> ExperimentResult:
    """
    Train and evaluate one seed, writing every artifact under *out_dir*.

    Outputs: config.toml, d_env.rbuf, dynamics.ckpt, dynamics_report.json,
    metrics.csv (one row per epoch), rollout_policy.ckpt / output_policy.ckpt,
    action-distance histograms and eval_report.json.

    Raises:
        ConfigError: before any work if the config is invalid
        StageError: naming the stage that failed; earlier outputs are kept
    """
    validate_config(config)
    started = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'config.toml').write_text(dump_config(config), encoding='utf-8')
    chash = config_hash(config)
    streams = RngStreams(seed)
    tr, ev = config.training, config.evaluation
    logger.info(f"[{config.preset} seed {seed}] starting ({chash})")

    with _stage('collect'):
        dataset = collect_riskworld_dataset(config.env.dataset_size, streams.get('dataset'))
        buffers = BufferSet.from_dataset(dataset)
        save_buffer(buffers.env, out_dir / 'd_env.rbuf')

    with _stage('dynamics'):
        model, report = train_ensemble(dataset, config.dynamics, streams)
        save_dynamics(model, out_dir / 'dynamics.ckpt')
        save_json(report.to_dict(), out_dir / 'dynamics_report.json')

    reward_fn = riskworld_reward_fn if config.env.known_reward else None
    sh = config.shaping
    shaper = RewardShaper(sh.lambda_p, sh.lambda_o, sh.heuristic, model)
    relabel_shaper = RewardShaper(
        sh.lambda_p if sh.relabel_lambda_p is None else sh.relabel_lambda_p,
        sh.lambda_o, sh.heuristic, model,
    )
    state_mean = dataset.states.mean(axis=0)
    state_std = np.maximum(dataset.states.std(axis=0), 1e-3)

    rollout_policy: Any = None
    sac_learner: Optional[SacPolicy] = None
    if tr.optimistic_branch:
        if tr.rollout_policy == 'sac':
            sac_learner = _make_learner('sac', config, streams.get('sac'), state_mean, state_std)
            rollout_policy = sac_learner
        else:
            rollout_policy = RandomPolicy(RiskWorld.action_low, RiskWorld.action_high, streams.get('random'))
    output_policy: Optional[SacPolicy | Td3BcPolicy] = None
    if tr.pessimistic_branch:
        output_policy = _make_learner(tr.output_optimizer, config, streams.get('output'), state_mean, state_std)
    evaluated = output_policy if tr.evaluated_policy == 'output' else rollout_policy

    sac_mix = MixSpec(config.mix.sac_fractions, config.sac.batch_size)
    out_batch = config.sac.batch_size if tr.output_optimizer == 'sac' else config.td3bc.batch_size
    out_mix = MixSpec(config.mix.td3bc_fractions, out_batch)
    rollout_rng = streams.get('rollout')
    sac_batch_rng = streams.get('batch/sac')
    out_batch_rng = streams.get('batch/output')

    metrics: list[dict] = []
    metrics_path = out_dir / 'metrics.csv'
    grad_steps = 0
    final_report: Optional[EvalReport] = None
    with open(metrics_path, 'w', newline='', encoding='utf-8') as metrics_file:
        writer = csv.DictWriter(metrics_file, fieldnames=METRIC_FIELDS, restval='')
        writer.writeheader()
        metrics_file.flush()

        for epoch in range(1, tr.epochs + 1):
            sac_logs: dict[str, list[float]] = {'critic': [], 'actor': [], 'alpha': [], 'entropy': []}
            out_logs: dict[str, list[float]] = {'critic': [], 'actor': [], 'lambda_bc': []}
            truncations: list[float] = []

            for step in range(tr.gradient_steps):
                if step % tr.rollout_interval == 0:
                    if tr.optimistic_branch:
                        with _stage('rollout-optimistic'):
                            stats = generate_rollouts(rollout_policy, shaper, config.rollout, buffers,
                                                      rollout_rng, 'optimistic', reward_fn, relabel_shaper)
                            truncations.append(stats.truncated_fraction)
                    if tr.pessimistic_branch:
                        with _stage('rollout-pessimistic'):
                            stats = generate_rollouts(output_policy, shaper, config.rollout, buffers,
                                                      rollout_rng, 'pessimistic', reward_fn)
                            truncations.append(stats.truncated_fraction)

                if sac_learner is not None:
                    with _stage('sac'):
                        for _ in range(tr.rollout_updates_per_step):
                            batch = sample_mixed_batch([buffers.env, buffers.opt_raw], sac_mix, sac_batch_rng)
                            losses = sac_learner.update(batch)
                            sac_logs['critic'].append(0.5 * (losses['critic1_loss'] + losses['critic2_loss']))
                            sac_logs['actor'].append(losses['actor_loss'])
                            sac_logs['alpha'].append(losses['alpha'])
                            sac_logs['entropy'].append(losses['entropy'])

                if output_policy is not None:
                    stage = 'td3bc' if tr.output_optimizer == 'td3bc' else 'sac'
                    with _stage(stage):
                        for _ in range(tr.output_updates_per_step):
                            batch = sample_mixed_batch(
                                [buffers.env, buffers.opt_relabel, buffers.pess], out_mix, out_batch_rng
                            )
                            losses = output_policy.update(batch)
                            out_logs['critic'].append(0.5 * (losses['critic1_loss'] + losses['critic2_loss']))
                            if 'actor_loss' in losses:
                                out_logs['actor'].append(losses['actor_loss'])
                            if 'lambda_bc' in losses:
                                out_logs['lambda_bc'].append(losses['lambda_bc'])
                grad_steps += 1

            with _stage('evaluate'):
                eval_rng = streams.fresh('eval')
                final_report = evaluate_policy(evaluated, RiskWorld(), ev.episodes, eval_rng,
                                               ev.discounting, ev.gamma)
                starts = dataset.states
                model_rng = streams.fresh('eval/model')
                final_report.eps_u = avg_model_uncertainty(evaluated, shaper, config.rollout, starts,
                                                           ev.eps_u_samples, model_rng, ev.gamma)
                model_starts = starts[model_rng.integers(0, len(starts), ev.eps_u_samples)]
                final_report.model_return = evaluate_in_model(
                    evaluated, model, model_starts, ev.model_horizon, model_rng,
                    heuristic=sh.heuristic, use_mean_model=config.rollout.use_mean_model,
                    reward_fn=reward_fn,
                )
                final_report.action_distance = action_distance(evaluated, dataset)
                row: dict[str, Any] = {
                    'config_hash': chash,
                    'preset': config.preset,
                    'seed': seed,
                    'epoch': epoch,
                    'grad_steps': grad_steps,
                    'mean_return': final_report.mean_return,
                    'std_return': final_report.std_return,
                    'model_return': final_report.model_return,
                    'eps_u': final_report.eps_u,
                    'action_distance': final_report.action_distance,
                    'sac_critic_loss': _mean(sac_logs['critic']),
                    'sac_actor_loss': _mean(sac_logs['actor']),
                    'sac_alpha': _mean(sac_logs['alpha']),
                    'sac_entropy': _mean(sac_logs['entropy']),
                    'output_critic_loss': _mean(out_logs['critic']),
                    'output_actor_loss': _mean(out_logs['actor']),
                    'output_lambda_bc': _mean(out_logs['lambda_bc']),
                    'truncated_fraction': _mean(truncations),
                    **{f'n_{tag}': n for tag, n in buffers.sizes().items()},
                }
                if rollout_policy is not None and evaluated is not rollout_policy:
                    row['rollout_mean_return'] = evaluate_policy(
                        rollout_policy, RiskWorld(), ev.episodes, streams.fresh('eval'),
                        ev.discounting, ev.gamma,
                    ).mean_return
                    row['rollout_action_distance'] = action_distance(rollout_policy, dataset)
                elif evaluated is rollout_policy:
                    row['rollout_mean_return'] = final_report.mean_return
                    row['rollout_action_distance'] = final_report.action_distance
            writer.writerow(row)
            metrics_file.flush()
            metrics.append(row)
            logger.info(
                f"[{config.preset} seed {seed}] epoch {epoch}/{tr.epochs}: "
                f"return {final_report.mean_return:.2f} ± {final_report.std_return:.2f}, "
                f"eps_u {final_report.eps_u:.4f}, action distance {final_report.action_distance:.3f}"
            )

    with _stage('checkpoint'):
        if sac_learner is not None:
            save_policy(sac_learner, out_dir / 'rollout_policy.ckpt')
            edges, counts = action_distance_histogram(action_distances(sac_learner, dataset))
            save_histogram_csv(out_dir / 'rollout_action_distance.csv', edges, counts)
        if output_policy is not None:
            save_policy(output_policy, out_dir / 'output_policy.ckpt')
            edges, counts = action_distance_histogram(action_distances(output_policy, dataset))
            save_histogram_csv(out_dir / 'output_action_distance.csv', edges, counts)
        save_json(final_report.to_dict(), out_dir / 'eval_report.json')

    seconds = time.perf_counter() - started
    logger.info(f"[{config.preset} seed {seed}] done in {seconds:.1f}s: return {final_report.mean_return:.2f}")
    return ExperimentResult(seed, out_dir, metrics, final_report, seconds)


def _run_seed(job: tuple[ExperimentConfig, int, Path]) -> ExperimentResult:
    config, seed, out_dir = job
    return run_experiment(config, seed, out_dir)


def run_seeds(
    config: ExperimentConfig,
    seeds: list[int],
    out_root: Path,
    workers: int = 1,
) -> list[ExperimentResult]:
    """
    One run per seed under out_root/seed_<n>; with workers > 1 seeds run in
    separate processes. Results come back in seed order.
    """
    validate_config(config)
    out_root = Path(out_root)
    jobs = [(config, s, out_root / f'seed_{s}') for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(job) for job in jobs]
    returns = [r.final_report.mean_return for r in results]
    save_json({
        'preset': config.preset,
        'config_hash': config_hash(config),
        'seeds': list(seeds),
        'final_mean_returns': returns,
        'mean_over_seeds': float(np.mean(returns)),
        'std_over_seeds': float(np.std(returns)),
        'seconds': [r.seconds for r in results],
    }, out_root / 'summary.json')
    return results
