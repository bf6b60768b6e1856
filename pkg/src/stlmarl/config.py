"""Plain-text run configuration: parsing, validation, and snapshots.

The format is one ``key = value`` per line with ``#`` comments.  The key
set is closed: unknown keys are errors, and every key has a default, so a
rendered snapshot always contains the complete resolved state of a run.
All validation happens before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig
from .stl import (
    And,
    Atom,
    Eventually,
    Formula,
    FormulaSyntaxError,
    Not,
    Or,
    formula_horizon,
    parse_formula,
)
from .trainer import TrainConfig
from .world import (
    GameConfig,
    TASK_BUILDERS,
    agent_name,
    landmark_name,
)


class ConfigError(ValueError):
    """Configuration file or value is invalid."""


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return _fmt_bool(value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (default value, parser, one-line description)
CONFIG_KEYS: dict[str, tuple] = {
    "n_agents": (3, int, "number of agents (and landmarks)"),
    "horizon": (25, int, "steps per episode"),
    "gamma": (0.99, float, "discount factor (game and advantage estimation)"),
    "goal_distance": (0.3, float, "distance threshold for the built-in tasks"),
    "accel": (3.0, float, "acceleration magnitude of movement actions"),
    "damping": (0.75, float, "velocity retention factor per step"),
    "dt": (0.1, float, "integration step size"),
    "arena_half_width": (1.0, float, "positions are clipped to +-this"),
    "task": ("task1", str, "task1 | task2 | reach | path to a formula file"),
    "embed_dim": (64, int, "token embedding width"),
    "n_heads": (4, int, "attention heads"),
    "n_encoder_blocks": (2, int, "encoder depth"),
    "n_value_blocks": (1, int, "value decoder depth"),
    "n_decoder_blocks": (2, int, "action decoder depth"),
    "ff_mult": (4, int, "feed-forward width multiplier"),
    "iterations": (62, int, "training iterations"),
    "rollouts_per_iter": (128, int, "episodes collected per iteration"),
    "learning_rate": (0.01, float, "step size for both parameter groups"),
    "gae_lambda": (0.95, float, "advantage estimation decay"),
    "clip_epsilon": (0.2, float, "surrogate objective clip range"),
    "ppo_epochs": (4, int, "update epochs per iteration, per parameter group"),
    "optimizer": ("momentum", str, "momentum | adam"),
    "momentum": (0.9, float, "momentum coefficient for the default optimizer"),
    "normalize_advantages": (True, _parse_bool, "standardize advantages per batch"),
    "reward_mode": ("prefix", str, "prefix | increment | progress"),
    "reward_floor": (-10.0, float, "robustness assigned to empty clipped windows"),
    "workers": (4, int, "rollout worker threads"),
    "checkpoint_every": (0, int, "also checkpoint every K iterations (0 = final only)"),
    "eval_episodes": (8, int, "episodes rolled by the eval command"),
    "verify_episodes": (2560, int, "episodes rolled by the verify command"),
    "confidence": (0.9, float, "confidence level for verification intervals"),
    "seed": (0, int, "root seed for parameters, rollouts, and evaluation"),
    "out": ("runs/default", str, "output directory"),
}

_BUILTIN_TASKS = tuple(sorted(TASK_BUILDERS))


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run description."""

    game: GameConfig
    model: ModelConfig
    trainer: TrainConfig
    task: str
    specs: list[Formula]
    checkpoint_every: int = 0
    eval_episodes: int = 8
    verify_episodes: int = 2560
    confidence: float = 0.9
    seed: int = 0
    out: str = "runs/default"


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into raw strings.

    Blank lines and ``#`` comments (whole-line or trailing) are ignored.
    Unknown and duplicate keys are errors that name the offending line.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"{source}:{lineno}: empty value for {key!r}")
        raw[key] = value
    return raw


def _convert(raw: dict[str, str]) -> dict:
    values = {}
    for key, (default, parser, _) in CONFIG_KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        else:
            values[key] = default
    return values


def _formula_entities(formula: Formula) -> set[str]:
    if isinstance(formula, Atom):
        pred = formula.predicate
        first = getattr(pred, "first", None)
        second = getattr(pred, "second", None)
        return {name for name in (first, second) if name is not None}
    if isinstance(formula, Not):
        return _formula_entities(formula.child)
    if isinstance(formula, (And, Or)):
        return _formula_entities(formula.left) | _formula_entities(formula.right)
    if isinstance(formula, Eventually):
        return _formula_entities(formula.child)
    return set()


def build_task_specs(task: str, game: GameConfig, goal_distance: float) -> list[Formula]:
    """Per-agent formulas for a task token or a formula file.

    A file must hold exactly ``n_agents`` formulas, one per non-comment
    line; every formula must fit the episode horizon and may only mention
    entities that exist in the game.
    """
    if task in TASK_BUILDERS:
        return TASK_BUILDERS[task](game.n_agents, horizon=game.horizon,
                                   threshold=goal_distance)
    try:
        with open(task, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(
            f"task {task!r} is neither one of {list(_BUILTIN_TASKS)} nor a readable file: {exc}"
        ) from exc
    lines = [line.split("#", 1)[0].strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if len(lines) != game.n_agents:
        raise ConfigError(
            f"task file {task!r} holds {len(lines)} formulas, need one per agent "
            f"({game.n_agents})")
    specs = []
    valid = {agent_name(i) for i in range(game.n_agents)}
    valid |= {landmark_name(j) for j in range(game.n_agents)}
    for index, line in enumerate(lines):
        try:
            formula = parse_formula(line)
        except FormulaSyntaxError as exc:
            raise ConfigError(f"task file {task!r}, formula {index}: {exc}") from exc
        reach = formula_horizon(formula)
        if reach > game.horizon:
            raise ConfigError(
                f"task file {task!r}, formula {index} looks {reach} steps ahead, "
                f"horizon is {game.horizon}")
        unknown = _formula_entities(formula) - valid
        if unknown:
            raise ConfigError(
                f"task file {task!r}, formula {index} references unknown entities "
                f"{sorted(unknown)}")
        specs.append(formula)
    return specs


def resolve_config(raw: dict[str, str]) -> RunConfig:
    """Typed, validated RunConfig from raw key strings (defaults fill gaps)."""
    v = _convert(raw)
    try:
        game = GameConfig(
            n_agents=v["n_agents"], horizon=v["horizon"], gamma=v["gamma"],
            goal_distance=v["goal_distance"], accel=v["accel"], damping=v["damping"],
            dt=v["dt"], arena_half_width=v["arena_half_width"],
        )
        model = ModelConfig.for_game(
            game, embed_dim=v["embed_dim"], n_heads=v["n_heads"],
            n_encoder_blocks=v["n_encoder_blocks"], n_value_blocks=v["n_value_blocks"],
            n_decoder_blocks=v["n_decoder_blocks"], ff_mult=v["ff_mult"],
        )
        trainer = TrainConfig(
            iterations=v["iterations"], rollouts_per_iter=v["rollouts_per_iter"],
            learning_rate=v["learning_rate"], gamma=v["gamma"],
            gae_lambda=v["gae_lambda"], clip_epsilon=v["clip_epsilon"],
            ppo_epochs=v["ppo_epochs"], seed=v["seed"], optimizer=v["optimizer"],
            momentum=v["momentum"], normalize_advantages=v["normalize_advantages"],
            reward_mode=v["reward_mode"], reward_floor=v["reward_floor"],
            workers=v["workers"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if v["checkpoint_every"] < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    if v["eval_episodes"] < 1:
        raise ConfigError("eval_episodes must be >= 1")
    if v["verify_episodes"] < 1:
        raise ConfigError("verify_episodes must be >= 1")
    if not 0.0 < v["confidence"] < 1.0:
        raise ConfigError(f"confidence must be in (0, 1), got {v['confidence']}")
    specs = build_task_specs(v["task"], game, v["goal_distance"])
    return RunConfig(
        game=game, model=model, trainer=trainer, task=v["task"], specs=specs,
        checkpoint_every=v["checkpoint_every"], eval_episodes=v["eval_episodes"],
        verify_episodes=v["verify_episodes"], confidence=v["confidence"],
        seed=v["seed"], out=v["out"],
    )


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read, parse, and fully validate a config file.

    ``overrides`` (raw strings, e.g. from command-line flags) replace file
    values before validation.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    raw = parse_config_text(text, source=str(path))
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown override key {key!r}")
        raw[key] = value
    return resolve_config(raw)


def render_config(config: RunConfig) -> str:
    """Complete ``key = value`` snapshot of a resolved configuration.

    Parsing the rendered text reproduces an equal RunConfig, so a snapshot
    pins down a run exactly.
    """
    game, model, trainer = config.game, config.model, config.trainer
    values = {
        "n_agents": game.n_agents,
        "horizon": game.horizon,
        "gamma": game.gamma,
        "goal_distance": game.goal_distance,
        "accel": game.accel,
        "damping": game.damping,
        "dt": game.dt,
        "arena_half_width": game.arena_half_width,
        "task": config.task,
        "embed_dim": model.embed_dim,
        "n_heads": model.n_heads,
        "n_encoder_blocks": model.n_encoder_blocks,
        "n_value_blocks": model.n_value_blocks,
        "n_decoder_blocks": model.n_decoder_blocks,
        "ff_mult": model.ff_mult,
        "iterations": trainer.iterations,
        "rollouts_per_iter": trainer.rollouts_per_iter,
        "learning_rate": trainer.learning_rate,
        "gae_lambda": trainer.gae_lambda,
        "clip_epsilon": trainer.clip_epsilon,
        "ppo_epochs": trainer.ppo_epochs,
        "optimizer": trainer.optimizer,
        "momentum": trainer.momentum,
        "normalize_advantages": trainer.normalize_advantages,
        "reward_mode": trainer.reward_mode,
        "reward_floor": trainer.reward_floor,
        "workers": trainer.workers,
        "checkpoint_every": config.checkpoint_every,
        "eval_episodes": config.eval_episodes,
        "verify_episodes": config.verify_episodes,
        "confidence": config.confidence,
        "seed": config.seed,
        "out": config.out,
    }
    assert set(values) == set(CONFIG_KEYS)
    lines = [f"{key} = {_fmt(values[key])}" for key in CONFIG_KEYS]
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    """The full key set at default values, with descriptions as comments."""
    lines = []
    for key, (default, _, description) in CONFIG_KEYS.items():
        lines.append(f"# {description}")
        lines.append(f"{key} = {_fmt(default)}")
    return "\n".join(lines) + "\n"
