"""Plain-text key=value run configuration.

A run config merges the network and training settings with dataset paths and
the run seed. The full merged config is echoed into every run directory so a
run can be reproduced bit-for-bit from the echo alone.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

from .net import NetworkConfig, TrainConfig


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source_dir: str = ""
    out_dir: str = "run"
    seed: int = 0

    def __post_init__(self):
        # one run seed drives model init, data order, and SRM draws
        self.network.seed = self.seed
        self.train.seed = self.seed


_NETWORK_KEYS = set(asdict(NetworkConfig()))
_TRAIN_KEYS = set(asdict(TrainConfig()))
_TUPLE_KEYS = {"channels", "strides", "lambda_mla"}
_INT_TUPLES = {"channels", "strides"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(p) if key in _INT_TUPLES else float(p) for p in parts)
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str) -> RunConfig:
    net_kwargs, train_kwargs, top = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        value = _parse_value(key, raw)
        if key in ("source_dir", "out_dir", "seed"):
            top[key] = value
        elif key in _NETWORK_KEYS:
            net_kwargs[key] = value
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return RunConfig(
        network=NetworkConfig(**net_kwargs),
        train=TrainConfig(**train_kwargs),
        **top,
    )


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: RunConfig) -> str:
    """Serialize a run config back to the key=value format it parses from."""
    lines = [
        f"source_dir = {cfg.source_dir}",
        f"out_dir = {cfg.out_dir}",
        f"seed = {cfg.seed}",
    ]
    skip = {"seed"}  # network/train seeds are derived from the run seed
    for section in (cfg.network, cfg.train):
        for key, value in asdict(section).items():
            if key in skip:
                continue
            if isinstance(value, tuple | list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
