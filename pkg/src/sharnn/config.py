"""Configuration dataclasses and the flat ``key=value`` config file format.

Keys are namespaced by section: ``model.hidden=128``, ``train.epochs=25``,
``lamb.lr=0.002``.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

from .errors import ConfigError


@dataclass
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 4
    hidden: int = 1024
    embed: int = 1024
    boom_hidden: int = 4096
    # None resolves to the second-last layer
    attn_layers: Optional[tuple] = None
    dropout_e: float = 0.0
    dropout_h: float = 0.1
    dropout_i: float = 0.1
    dropout_o: float = 0.1
    mem_window: int = 5000
    dtype: str = "float32"

    def __post_init__(self):
        if self.attn_layers is None:
            self.attn_layers = (max(self.n_layers - 2, 0),)
        self.attn_layers = tuple(sorted(set(int(i) for i in self.attn_layers)))
        if self.n_layers < 1 or self.hidden < 1 or self.vocab_size < 1:
            raise ConfigError("n_layers, hidden and vocab_size must be positive")
        if self.embed != self.hidden:
            raise ConfigError(f"embed ({self.embed}) must equal hidden ({self.hidden}) for tied weights")
        if self.boom_hidden % self.hidden:
            raise ConfigError(f"boom_hidden {self.boom_hidden} is not a multiple of hidden {self.hidden}")
        bad = [i for i in self.attn_layers if not 0 <= i < self.n_layers]
        if bad:
            raise ConfigError(f"attn_layers {bad} outside [0, {self.n_layers})")
        for name in ("dropout_e", "dropout_h", "dropout_i", "dropout_o"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.mem_window < 1:
            raise ConfigError("mem_window must be at least 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def boom_factor(self) -> int:
        return self.boom_hidden // self.hidden


@dataclass
class LambConfig:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    min_trust: float = 0.25

    def __post_init__(self):
        if not 0 <= self.min_trust <= 1:
            raise ConfigError(f"min_trust must lie in [0, 1], got {self.min_trust}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.lr < 0 or self.eps <= 0:
            raise ConfigError("lr must be non-negative and eps positive")


@dataclass
class TrainingConfig:
    epochs: int = 25
    half_lr_from_epoch: int = 23
    batch_size: int = 8
    bptt: int = 1024
    seed: int = 0
    checkpoint_path: str = ""
    # segments between validation probes; 0 probes once per epoch
    eval_every: int = 0
    eval_batch_size: int = 1
    eval_bptt: int = 256
    # 0 means no cap
    max_steps: int = 0
    clip: float = 0.0
    lamb: LambConfig = field(default_factory=LambConfig)

    def __post_init__(self):
        if self.half_lr_from_epoch > self.epochs:
            raise ConfigError("half_lr_from_epoch must not exceed epochs")
        if self.batch_size < 1 or self.bptt < 1 or self.eval_batch_size < 1 or self.eval_bptt < 1:
            raise ConfigError("batch sizes and bptt lengths must be positive")


_SECTIONS = {"model": ModelConfig, "train": TrainingConfig, "lamb": LambConfig}


def _convert(cls, name: str, raw: str):
    default = {f.name: f for f in fields(cls)}[name]
    if name == "attn_layers":
        raw = raw.strip()
        return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()
    proto = default.default if default.default is not dataclasses.MISSING else None
    if isinstance(proto, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(proto, int):
        return int(raw)
    if isinstance(proto, float):
        return float(raw)
    return raw.strip()


def _render_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str) -> tuple[ModelConfig, TrainingConfig]:
    """Parse config text; raises ConfigError naming the line and key."""
    values: dict[str, dict] = {k: {} for k in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)} or name == "lamb":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[section][name] = _convert(cls, name, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from e
    try:
        model = ModelConfig(**values["model"])
        lamb = LambConfig(**values["lamb"])
        train = TrainingConfig(lamb=lamb, **values["train"])
    except ConfigError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return model, train


def render_config(model: ModelConfig, train: TrainingConfig) -> str:
    lines = []
    for section, obj in (("model", model), ("train", train), ("lamb", train.lamb)):
        for f in fields(obj):
            if f.name == "lamb":
                continue
            lines.append(f"{section}.{f.name}={_render_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
