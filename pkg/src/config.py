"""Experiment configuration: dataclass tree, TOML I/O, overrides, presets and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, get_args, get_type_hints

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from src.dynamics import HEURISTICS, DynamicsConfig
from src.policies import SacConfig, Td3BcConfig
from src.shaping import RolloutConfig


class ConfigError(ValueError):
    """Configuration is malformed or inconsistent."""


@dataclass
class EnvConfig:
    name: str = 'riskworld'
    dataset_size: int = 10_000
    known_reward: bool = True


@dataclass
class ShapingConfig:
    lambda_p: float = 100.0
    lambda_o: float = 1.0
    heuristic: str = 'ensemble_std'
    # None relabels with lambda_p itself
    relabel_lambda_p: Optional[float] = None


@dataclass
class MixConfig:
    sac_fractions: tuple[float, ...] = (0.05, 0.95)
    td3bc_fractions: tuple[float, ...] = (0.05, 0.45, 0.5)


@dataclass
class TrainingConfig:
    epochs: int = 10
    gradient_steps: int = 10_000
    rollout_interval: int = 1000
    rollout_updates_per_step: int = 1
    output_updates_per_step: int = 1
    optimistic_branch: bool = True
    pessimistic_branch: bool = True
    rollout_policy: str = 'sac'
    output_optimizer: str = 'td3bc'
    evaluated_policy: str = 'output'


@dataclass
class EvaluationConfig:
    episodes: int = 500
    discounting: str = 'undiscounted_sum'
    gamma: float = 0.99
    eps_u_samples: int = 500
    model_horizon: int = 10


@dataclass
class ExperimentConfig:
    preset: str = 'orpo'
    seeds: list[int] = field(default_factory=lambda: [0])
    env: EnvConfig = field(default_factory=EnvConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    td3bc: Td3BcConfig = field(default_factory=Td3BcConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


SECTIONS = ('env', 'dynamics', 'shaping', 'rollout', 'mix', 'sac', 'td3bc', 'training', 'evaluation')


# ── Presets ──────────────────────────────────────────────────────────────────

PRESETS: dict[str, dict[str, Any]] = {
    'orpo': {},
    'mopo': {
        'shaping.lambda_o': 0.0,
        'training.optimistic_branch': False,
        'mix.td3bc_fractions': (0.05, 0.0, 0.95),
    },
    'oroo': {
        'training.pessimistic_branch': False,
        'training.evaluated_policy': 'rollout',
    },
    'orpo-nopess': {
        'shaping.relabel_lambda_p': 0.0,
    },
    'mbpo': {
        'shaping.lambda_p': 0.0,
        'shaping.lambda_o': 0.0,
        'training.optimistic_branch': False,
        'mix.td3bc_fractions': (0.05, 0.0, 0.95),
    },
    'orpo-sac': {
        'training.output_optimizer': 'sac',
    },
    'orpo-random': {
        'training.rollout_policy': 'random',
    },
}


def _compatible(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, tuple):
        if not isinstance(value, tuple):
            return False
        return not default or all(_compatible(default[0], v) for v in value)
    return isinstance(value, type(default))


def _optional_value(dotted: str, hint: Any, value: Any) -> Any:
    """Check *value* against an Optional[...] field whose default is None."""
    if value is None:
        return None
    allowed = tuple(t for t in get_args(hint) if t is not type(None))
    if float in allowed and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) or not isinstance(value, allowed):
        names = ' or '.join(t.__name__ for t in allowed)
        raise ConfigError(f"'{dotted}' expects {names}, got {value!r}")
    return value


def _set_path(config: ExperimentConfig, dotted: str, value: Any) -> None:
    parts = dotted.split('.')
    if len(parts) == 1:
        if parts[0] not in ('preset', 'seeds'):
            raise ConfigError(f"unknown config key '{dotted}'")
        if parts[0] == 'seeds' and not (
            isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        ):
            raise ConfigError(f"'seeds' expects a list of integers, got {value!r}")
        setattr(config, parts[0], value)
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key '{dotted}'")
    section = getattr(config, parts[0])
    names = {f.name: f for f in dataclasses.fields(section)}
    if parts[1] not in names:
        raise ConfigError(f"unknown config key '{dotted}'")
    default = getattr(type(section)(), parts[1])
    if isinstance(default, tuple) and isinstance(value, list):
        value = tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if default is None:
        value = _optional_value(dotted, get_type_hints(type(section))[parts[1]], value)
    elif not _compatible(default, value):
        raise ConfigError(f"'{dotted}' expects {type(default).__name__}, got {value!r}")
    setattr(section, parts[1], value)


def apply_preset(config: ExperimentConfig, name: str) -> ExperimentConfig:
    """Copy of *config* with the preset's field assignments applied."""
    if name not in PRESETS:
        raise ConfigError(f"'{name}' is not a valid preset (expected one of {sorted(PRESETS)})")
    out = _deep_copy(config)
    out.preset = name
    for key, value in PRESETS[name].items():
        _set_path(out, key, value)
    return out


def _deep_copy(config: ExperimentConfig) -> ExperimentConfig:
    return from_dict(to_dict(config))


# ── Dict / TOML conversion ───────────────────────────────────────────────────

def _strip_none(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = _strip_none(v)
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def to_dict(config: ExperimentConfig) -> dict:
    """Plain nested dict; None fields are omitted (TOML has no null)."""
    return _strip_none(dataclasses.asdict(config))


def from_dict(data: dict) -> ExperimentConfig:
    config = ExperimentConfig()
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise ConfigError(f"unknown config section '{key}'")
            for sub, v in value.items():
                _set_path(config, f"{key}.{sub}", v)
        else:
            _set_path(config, key, value)
    return config


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(config))


def load_config(path: Path) -> ExperimentConfig:
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical TOML dump, first 16 hex digits."""
    return hashlib.sha256(dump_config(config).encode('utf-8')).hexdigest()[:16]


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")['v']
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """
    Apply 'section.key=value' assignments; values are TOML literals, bare words are strings.
    """
    out = _deep_copy(config)
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, text = item.split('=', 1)
        _set_path(out, key.strip(), _parse_value(text.strip()))
    return out


# ── Validation ───────────────────────────────────────────────────────────────

def _check_fractions(name: str, fractions: tuple[float, ...], size: int) -> None:
    if len(fractions) != size:
        raise ConfigError(f"{name} needs {size} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"{name} fractions must be non-negative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"{name} fractions must sum to 1, got {sum(fractions)}")


def validate_config(config: ExperimentConfig) -> None:
    """Raise ConfigError on the first inconsistency found."""
    if config.preset not in PRESETS:
        raise ConfigError(f"'{config.preset}' is not a valid preset")
    if config.env.name != 'riskworld':
        raise ConfigError(f"'{config.env.name}' is not a supported environment")
    if config.env.dataset_size < 1:
        raise ConfigError(f"dataset size must be positive, got {config.env.dataset_size}")
    if config.env.dataset_size < config.dynamics.min_dataset:
        raise ConfigError(
            f"dataset size {config.env.dataset_size} is below the dynamics minimum {config.dynamics.min_dataset}"
        )
    try:
        config.dynamics.validate()
        config.rollout.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    sh = config.shaping
    if sh.lambda_p < 0:
        raise ConfigError(f"lambda_p must be non-negative, got {sh.lambda_p}")
    if sh.relabel_lambda_p is not None and sh.relabel_lambda_p < 0:
        raise ConfigError(f"relabel_lambda_p must be non-negative, got {sh.relabel_lambda_p}")
    if sh.heuristic not in HEURISTICS:
        raise ConfigError(f"'{sh.heuristic}' is not a valid heuristic (expected one of {HEURISTICS})")

    _check_fractions('mix.sac', config.mix.sac_fractions, 2)
    _check_fractions('mix.td3bc', config.mix.td3bc_fractions, 3)

    tr = config.training
    if tr.epochs < 1 or tr.gradient_steps < 1 or tr.rollout_interval < 1:
        raise ConfigError("epochs, gradient_steps and rollout_interval must be positive")
    if tr.rollout_updates_per_step < 0 or tr.output_updates_per_step < 0:
        raise ConfigError("updates per step must be non-negative")
    if tr.rollout_policy not in ('sac', 'random'):
        raise ConfigError(f"'{tr.rollout_policy}' is not a valid rollout policy")
    if tr.output_optimizer not in ('td3bc', 'sac'):
        raise ConfigError(f"'{tr.output_optimizer}' is not a valid output optimizer")
    if tr.evaluated_policy not in ('output', 'rollout'):
        raise ConfigError(f"'{tr.evaluated_policy}' is not a valid evaluated policy")
    if not tr.optimistic_branch and not tr.pessimistic_branch:
        raise ConfigError("at least one of the optimistic and pessimistic branches must be enabled")
    if not tr.optimistic_branch and config.mix.td3bc_fractions[1] > 0:
        raise ConfigError("the optimistic branch is disabled but mix.td3bc_fractions gives it a share")
    if tr.evaluated_policy == 'output' and not tr.pessimistic_branch:
        raise ConfigError("evaluated_policy 'output' needs the pessimistic branch")
    if tr.evaluated_policy == 'rollout' and not tr.optimistic_branch:
        raise ConfigError("evaluated_policy 'rollout' needs the optimistic branch")

    ev = config.evaluation
    if ev.episodes < 1 or ev.eps_u_samples < 1 or ev.model_horizon < 1:
        raise ConfigError("evaluation episodes, eps_u_samples and model_horizon must be positive")
    if ev.discounting not in ('undiscounted_sum', 'gamma'):
        raise ConfigError(f"'{ev.discounting}' is not a valid discounting mode")
    if not config.seeds:
        raise ConfigError("at least one seed is required")


# ── Documented template ──────────────────────────────────────────────────────

FIELD_DOCS: dict[str, str] = {
    'preset': "orpo | mopo | oroo | orpo-nopess | mbpo | orpo-sac | orpo-random",
    'seeds': "one run per seed",
    'env.name': "only 'riskworld' is supported",
    'env.dataset_size': "offline transitions collected by the random-start protocol",
    'env.known_reward': "replace the learned reward with the analytic one",
    'dynamics.ensemble_size': "N probabilistic members",
    'dynamics.hidden_sizes': "hidden layer widths of each member",
    'dynamics.learning_rate': "Adam step size",
    'dynamics.batch_size': "mini-batch size",
    'dynamics.max_epochs': "upper bound on passes over the training split",
    'dynamics.patience': "epochs without holdout improvement before stopping",
    'dynamics.holdout_fraction': "share of data held out for early stopping",
    'dynamics.min_dataset': "smallest dataset accepted",
    'dynamics.normalizer_floor': "lower bound on per-dimension std",
    'dynamics.workers': "threads used to train members",
    'shaping.lambda_p': "pessimism coefficient; r^p = r - lambda_p * u",
    'shaping.lambda_o': "optimism coefficient; r^o = r + lambda_o * u",
    'shaping.heuristic': "max_aleatoric | ensemble_var | ensemble_std",
    'shaping.relabel_lambda_p': "penalty used to relabel optimistic data; omitted = lambda_p",
    'rollout.horizon_optimistic': "h^o, steps per optimistic rollout",
    'rollout.horizon_pessimistic': "h^p, steps per pessimistic rollout",
    'rollout.batch_size': "b, rollouts branched per round",
    'rollout.truncation_box': "rollouts end once a normalized state leaves [-box, box]",
    'rollout.use_mean_model': "step with the ensemble mean instead of a sampled member",
    'rollout.deterministic_policy': "act in deterministic mode during rollouts",
    'mix.sac_fractions': "rollout-policy batches: D_env, D^o",
    'mix.td3bc_fractions': "output-policy batches: D_env, D^p from pi^o, D^p from pi^p",
    'sac.hidden_sizes': "actor and critic hidden widths",
    'sac.gamma': "discount",
    'sac.tau': "Polyak rate",
    'sac.actor_lr': "actor step size",
    'sac.critic_lr': "critic step size",
    'sac.alpha_lr': "temperature step size",
    'sac.init_alpha': "initial entropy temperature",
    'sac.batch_size': "mixed batch size",
    'td3bc.hidden_sizes': "actor and critic hidden widths",
    'td3bc.gamma': "discount",
    'td3bc.tau': "Polyak rate",
    'td3bc.actor_lr': "actor step size",
    'td3bc.critic_lr': "critic step size",
    'td3bc.policy_noise': "target smoothing noise std (fraction of action scale)",
    'td3bc.noise_clip': "smoothing noise clip",
    'td3bc.policy_delay': "critic steps per actor step",
    'td3bc.alpha_bc': "lambda_bc = alpha_bc / mean|Q|",
    'td3bc.bc_weight': "weight of the behavior-cloning term",
    'td3bc.exploration_noise': "action noise std in stochastic mode",
    'td3bc.batch_size': "mixed batch size",
    'training.epochs': "outer epochs",
    'training.gradient_steps': "gradient steps per epoch",
    'training.rollout_interval': "gradient steps between rollout rounds",
    'training.rollout_updates_per_step': "rollout-policy updates per gradient step",
    'training.output_updates_per_step': "output-policy updates per gradient step",
    'training.optimistic_branch': "train the rollout policy on the optimistic MDP",
    'training.pessimistic_branch': "train the output policy on the pessimistic MDP",
    'training.rollout_policy': "sac | random",
    'training.output_optimizer': "td3bc | sac",
    'training.evaluated_policy': "output | rollout",
    'evaluation.episodes': "real-environment episodes per evaluation",
    'evaluation.discounting': "undiscounted_sum | gamma",
    'evaluation.gamma': "discount for eps_u and the gamma mode",
    'evaluation.eps_u_samples': "model rollouts used for eps_u",
    'evaluation.model_horizon': "steps of the model rollouts behind model_return",
}


def render_default_toml() -> str:
    """Default configuration as TOML with every key documented inline."""
    lines = []
    section = ''
    for line in dump_config(ExperimentConfig()).splitlines():
        stripped = line.strip()
        if stripped.startswith('[') and stripped.endswith(']'):
            section = stripped[1:-1]
            lines.append(line)
            continue
        if '=' in line:
            key = line.split('=', 1)[0].strip()
            doc = FIELD_DOCS.get(f"{section}.{key}" if section else key)
            if doc:
                line = f"{line}  # {doc}"
        lines.append(line)
    lines.append('# shaping.relabel_lambda_p = 0.0  # ' + FIELD_DOCS['shaping.relabel_lambda_p'])
    return '\n'.join(lines) + '\n'
