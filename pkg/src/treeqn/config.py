"""Flat key = value experiment configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .models import ARCHS, ModelConfig, TreeConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    arch: str = "treeqn-d2"
    seed: int = 0
    transitions: int = 400_000
    n_steps: int = 5
    n_env: int = 16
    gamma: float = 0.99
    lr: float = 1e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    grad_clip: float = 5.0  # global-norm clip; 0 disables
    target_sync: int = 40_000  # transitions between target copies
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_horizon: int = 400_000
    eta_r: float = 1.0
    eta_s: float = 0.0
    block_state_target: bool = True
    critic_coef: float = 0.5
    entropy_coef: float = 0.01
    # model
    k: int = 128
    m: int = 64
    tree_lambda: float = 0.8
    backup: str = "softmax"
    temperature: float = 1.0
    normalize: str = "every"
    # environment
    consumable_goals: bool = False
    # bookkeeping
    log_every: int = 10  # updates per metrics row
    checkpoint_every: int = 100_000  # transitions; 0 = only at the end
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {', '.join(ARCHS)}, got {self.arch!r}")
        for name in ("transitions", "n_steps", "n_env", "target_sync", "eps_horizon", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def batch_size(self) -> int:
        return self.n_steps * self.n_env

    def model_config(self) -> ModelConfig:
        tree = TreeConfig(depth=1, lam=self.tree_lambda, gamma=self.gamma, backup=self.backup,
                          temperature=self.temperature, normalize=self.normalize)
        return ModelConfig(arch=self.arch, k=self.k, m=self.m, tree=tree)

    def epsilon_at(self, transitions_seen: int) -> float:
        return epsilon_at(transitions_seen, self)

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def epsilon_at(transitions_seen: int, cfg: TrainConfig) -> float:
    """Linear decay from eps_start to eps_end over eps_horizon transitions."""
    frac = min(1.0, max(0, transitions_seen) / cfg.eps_horizon)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


REQUIRED_KEYS = ("arch", "seed", "transitions")
KEY_ALIASES = {"lambda": "tree_lambda", "n": "n_steps"}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw.replace("_", ""))
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_pairs(lines) -> dict[str, str]:
    """``key = value`` lines (``#`` comments) into a raw string dict."""
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[KEY_ALIASES.get(key, key)] = val
    return out


def build_config(raw: dict[str, str]) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigError(f"missing config key: {key}")
    kwargs = {k: _parse_value(k, v, types[k]) for k, v in raw.items()}
    return TrainConfig(**kwargs)


def load_config(path=None, overrides: dict[str, str] | None = None) -> tuple[TrainConfig, str]:
    """Parse a config file plus overrides; returns the config and its snapshot text."""
    raw: dict[str, str] = {}
    if path is not None:
        with open(path) as fh:
            raw.update(parse_pairs(fh))
    raw.update({KEY_ALIASES.get(k, k): v for k, v in (overrides or {}).items()})
    cfg = build_config(raw)
    return cfg, cfg.to_text()


def load_config_text(text: str) -> TrainConfig:
    return build_config(parse_pairs(text.splitlines()))
