"""Flat key=value run configuration shared by every CLI entry point.

Example file:

    # three desk-scale clients
    federation.rounds = 20
    federation.local_epochs = 4
    federation.clients = 3
    federation.timeout_s = 120
    optimizer.lr = 1e-4
    optimizer.decay = 0.96
    fusion.mode = confidence_tie_break
    dsp.sample_rate_hz = 4
    forest.trees = 200
    seed = 0

Every key is optional; the defaults above apply. Unknown keys are rejected
so typos fail loudly.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .fedcore import FederationConfig
from .forest import ForestConfig
from .fusion import FusionPolicy
from .nn import AdamConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 20
    local_epochs: int = 4
    clients: int = 3
    timeout_s: float = 120.0
    lr: float = 1e-4
    decay: float = 0.96
    fusion_mode: FusionPolicy = FusionPolicy.CONFIDENCE_TIE_BREAK
    sample_rate_hz: float = 4.0
    trees: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.clients < 1 or self.trees < 1:
            raise ConfigError("rounds, local_epochs, clients, trees must all be >= 1")
        if self.timeout_s <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("timeout_s and sample_rate_hz must be positive")
        if self.lr <= 0 or not 0 < self.decay <= 1:
            raise ConfigError("lr must be positive and decay in (0, 1]")

    def federation(self) -> FederationConfig:
        return FederationConfig(
            n_clients=self.clients,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            straggler_timeout=self.timeout_s,
            seed=self.seed,
        )

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, decay=self.decay)

    def forest(self) -> ForestConfig:
        return ForestConfig(n_trees=self.trees)


_KEYS = {
    "federation.rounds": ("rounds", int),
    "federation.local_epochs": ("local_epochs", int),
    "federation.clients": ("clients", int),
    "federation.timeout_s": ("timeout_s", float),
    "optimizer.lr": ("lr", float),
    "optimizer.decay": ("decay", float),
    "fusion.mode": ("fusion_mode", FusionPolicy.parse),
    "dsp.sample_rate_hz": ("sample_rate_hz", float),
    "forest.trees": ("trees", int),
    "seed": ("seed", int),
}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        field_name, conv = _KEYS[key]
        if field_name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[field_name] = conv(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of parse_config_text, for writing configs programmatically."""
    by_field = {field: key for key, (field, _) in _KEYS.items()}
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, FusionPolicy):
            value = value.value
        lines.append(f"{by_field[f.name]} = {value}")
    return "\n".join(lines) + "\n"
