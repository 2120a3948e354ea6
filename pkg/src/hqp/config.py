"""Run configuration read from line-based ``key = value`` files.

Blank lines and ``#`` comments are ignored.  Unknown keys and unparsable
values are errors, so a typo can never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError
from .pruning import PruneConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    source: str = "synthetic"
    idx_images: str = ""
    idx_labels: str = ""
    num_classes: int = 10
    image_size: int = 16
    train_size: int = 8000
    calib_size: int = 1000
    val_size: int = 1000
    holdout_size: int = 1000
    noise: float = 0.35
    jitter: float = 0.6
    # model and training
    arch: str = "resnet"
    blocks: int = 2
    width: int = 16
    width_multiplier: float = 1.0
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 64
    # compression
    delta_fraction: float = 0.01
    delta_max: float = 0.015
    refresh_sensitivity: bool = False
    bits: int = 8
    p_only_theta: float = 0.5
    # benchmark
    warmup: int = 5
    reps: int = 50

    def prune_config(self) -> PruneConfig:
        return PruneConfig(self.delta_fraction, self.delta_max,
                           refresh_sensitivity=self.refresh_sensitivity)

    def sizes(self):
        return {"train": self.train_size, "calib": self.calib_size, "val": self.val_size,
                "holdout": self.holdout_size}

    def as_dict(self):
        return asdict(self)

    def with_overrides(self, **kw):
        """Copy with the non-``None`` entries of ``kw`` applied."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return parse_items(kw.items(), base=self) if kw else self


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, value):
    kind = _TYPES[key]
    if not isinstance(value, str):
        value = str(value)
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            v = value.strip().lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value


def parse_items(items, base=None, where="config") -> RunConfig:
    updates = {}
    for key, value in items:
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates[key] = _coerce(key, value)
    return replace(base or RunConfig(), **updates)


def parse_config(text: str, where="config") -> RunConfig:
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}:{lineno}: empty key")
        items.append((key, value))
    return parse_items(items, where=where)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, where=str(path))


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.as_dict().items())
