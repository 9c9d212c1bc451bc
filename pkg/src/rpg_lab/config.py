"""Run configuration: dataclass sections loaded from TOML plus dotted overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    id: str = "cartpole"
    sharpness: float = 10.0
    horizon: int | None = None
    obs_scale: list[float] | None = None


@dataclass
class PolicyConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    lam: float = 1.0
    form: str = "merged"
    anneal_gamma: float = 1.0
    lam_floor: float = 1e-3


@dataclass
class DynamicsConfig:
    components: int = 8
    em_iters: int = 50
    em_tol: float = 1e-6
    prior_strength: float = 1.0
    reg: float = 1e-6
    window: int = 2
    use_prior: bool = True


@dataclass
class TrainerConfig:
    algo: str = "rpg"
    episodes: int = 500
    m: int = 5
    lr: float = 1e-2
    lr_decay: float = 1.0
    grad_clip: float = 10.0
    grad_normalize: bool = False
    eval_every: int = 10
    eval_episodes: int = 20
    final_eval_episodes: int = 100
    solve_window: int = 5
    solve_threshold: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    fhat_baseline: str = "delta"
    credit_decay: float = 1.0
    value_lr: float = 1e-2
    value_steps: int = 10
    cem_population: int = 20
    cem_elite: int = 1
    cem_init_std: float = 1.0
    cem_noise: float = 0.1
    cem_noise_decay: float = 0.8
    checkpoint_every: int = 0
    bitrepro: bool = False


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def validate(self) -> "TrainConfig":
        from .envs import ENV_IDS
        from .estimators import ESTIMATORS

        t = self.trainer
        if self.env.id not in ENV_IDS:
            raise ConfigError(f"env.id: unknown environment {self.env.id!r}")
        if t.algo not in ESTIMATORS:
            raise ConfigError(f"trainer.algo: unknown algorithm {t.algo!r}")
        if t.algo == "pathwise":
            raise ConfigError(f"trainer.algo: pathwise derivatives need a differentiable continuous-action "
                              f"system, but {self.env.id!r} has discrete actions")
        if t.m < 1:
            raise ConfigError("trainer.m: must be >= 1")
        if t.episodes < 0:
            raise ConfigError("trainer.episodes: must be >= 0")
        if not 0.0 < self.policy.anneal_gamma <= 1.0:
            raise ConfigError("policy.anneal_gamma: must lie in (0, 1]")
        if not 0.0 < self.trainer.credit_decay <= 1.0:
            raise ConfigError("trainer.credit_decay: must lie in (0, 1]")
        if self.policy.lam < 0:
            raise ConfigError("policy.lam: must be >= 0")
        if t.cem_elite < 1 or t.cem_elite > t.cem_population:
            raise ConfigError("trainer.cem_elite: must lie in [1, cem_population]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# per-task defaults; m follows the trajectories-per-iteration column where it is known
ENV_DEFAULTS = {
    "cartpole": {"trainer.m": 5, "trainer.episodes": 500},
    "acrobot": {"trainer.m": 5, "trainer.episodes": 1500},
    "mountaincar": {"trainer.m": 10, "trainer.episodes": 1000},
    "handmass": {"trainer.m": 2, "trainer.episodes": 150},
}

_SECTIONS = {"env": EnvConfig, "policy": PolicyConfig, "dynamics": DynamicsConfig, "trainer": TrainerConfig}


def _coerce(key: str, f: dataclasses.Field, value):
    typ = str(f.type)
    if value is None:
        if "None" in typ:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if typ.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if typ.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def set_key(cfg: TrainConfig, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"{dotted}: unknown config key")
    section = getattr(cfg, parts[0])
    fields = {f.name: f for f in dataclasses.fields(section)}
    if parts[1] not in fields:
        raise ConfigError(f"{dotted}: unknown config key")
    setattr(section, parts[1], _coerce(dotted, fields[parts[1]], value))


def from_dict(doc: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for name, body in doc.items():
        if name not in _SECTIONS or not isinstance(body, dict):
            raise ConfigError(f"{name}: unknown config section")
        for key, value in body.items():
            set_key(cfg, f"{name}.{key}", value)
    return cfg


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"{text}: overrides must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def env_defaults(env_id: str) -> TrainConfig:
    cfg = TrainConfig()
    cfg.env.id = env_id
    for key, value in ENV_DEFAULTS.get(env_id, {}).items():
        set_key(cfg, key, value)
    return cfg


def load_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        doc = tomli.loads(p.read_text())
    env_id = doc.get("env", {}).get("id", "cartpole")
    parsed = [parse_override(o) if isinstance(o, str) else o for o in overrides]
    for key, value in parsed:
        if key == "env.id":
            env_id = value
    cfg = from_dict(doc, env_defaults(env_id))
    for key, value in parsed:
        set_key(cfg, key, value)
    return cfg.validate()
