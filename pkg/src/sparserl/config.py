"""Training configuration, run profiles and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

ALGORITHMS = ("td3", "sac")
TOPOLOGIES = ("rlx2", "rigl", "set", "static_sparse", "tiny_dense", "static_mask")
PROFILES = ("paper", "desk")

# Step-valued settings shrunk by the desk profile.
_DESK_SCALED = ("total_steps", "warmup", "mask_interval", "buffer_interval", "multi_step_delay",
                "eval_interval", "buffer_min", "buffer_max")
DESK_SCALE = 20


@dataclass
class TrainConfig:
    algorithm: str = "td3"
    env: str = "pendulum"
    topology: str = "rlx2"
    actor_sparsity: float = 0.0
    critic_sparsity: float = 0.0
    learning_rate: float = 3e-4
    discount: float = 0.99
    hidden: tuple = (256, 256)
    batch_size: int = 256
    warmup: int = 25_000
    tau: float = 0.005
    zeta0: float = 0.5
    mask_interval: int = 10_000
    buffer_interval: int = 10_000
    distance_threshold: float = 0.2
    multi_step_delay: int = 300_000
    actor_interval: int | None = None
    n_step: int | None = None
    entropy_target: float | None = None
    total_steps: int = 1_000_000
    seed: int = 0
    exploration_sigma: float = 0.1
    smoothing_sigma: float = 0.2
    smoothing_clip: float = 0.5
    buffer_min: int = 100_000
    buffer_max: int = 1_000_000
    shrink_ratio: float = 0.2
    distance_batch: int | None = None
    eval_interval: int = 5_000
    eval_episodes: int = 10
    initial_alpha: float = 1.0
    mask_dir: str | None = None
    profile: str = "paper"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        for name in ("actor_sparsity", "critic_sparsity"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.topology == "static_mask" and not self.mask_dir:
            raise ValueError("topology static_mask needs mask_dir")
        if self.warmup >= self.total_steps:
            raise ValueError("warmup must be shorter than total_steps")
        for name in ("batch_size", "mask_interval", "buffer_interval", "eval_interval", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        return self

    # algorithm-dependent defaults from the hyperparameter table
    @property
    def d(self) -> int:
        if self.actor_interval is not None:
            return self.actor_interval
        return 2 if self.algorithm == "td3" else 1

    @property
    def n(self) -> int:
        if self.n_step is not None:
            return self.n_step
        return 3 if self.algorithm == "td3" else 2

    @property
    def old_batch(self) -> int:
        return self.distance_batch if self.distance_batch is not None else 8 * self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def desk_profile(**overrides) -> TrainConfig:
    """Table defaults with every step-valued setting divided by :data:`DESK_SCALE`.

    Hidden layers narrow to 128 units so a 50k-step run takes about five
    minutes on one core. At 64 units a 90%-sparse actor is too small to learn
    the pendulum swing-up.
    """
    base = TrainConfig()
    scaled = {name: getattr(base, name) // DESK_SCALE for name in _DESK_SCALED}
    scaled.update(hidden=(128, 128), profile="desk")
    scaled.update(overrides)
    return TrainConfig(**scaled)


def profile_config(profile: str, **overrides) -> TrainConfig:
    if profile == "desk":
        return desk_profile(**overrides)
    if profile == "paper":
        return TrainConfig(**overrides)
    raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")


class ConfigError(ValueError):
    pass


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def coerce(name: str, raw: str):
    """Convert a text value to the type of the ``TrainConfig`` field ``name``."""
    key = name.replace("-", "_")
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    if key == "hidden":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if raw.lower() in ("none", "") and (default is None or key in ("mask_dir",)):
        return None
    ann = str(_FIELDS[key].type)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if "int" in ann and "float" not in ann:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if "float" in ann:
        return float(raw)
    return raw


def parse_config_text(text: str, source="<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        try:
            values[key.strip().replace("-", "_")] = coerce(key.strip(), raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def read_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "hidden":
            value = ",".join(str(h) for h in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
