"""Flat ``section.key=value`` run configuration.

A config file holds one ``key=value`` per line; ``#`` starts a comment.
Command-line ``--key=value`` flags override file values. Unknown keys and
unparseable values raise ConfigError naming the field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .model import FfnKind, ModelConfig
from .sparse_ops import Mode, SparsityConfig, SparsityConfigError
from .training import Schedule, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none", "null") else parse(text)

    return inner


# key -> (parser, default)
FIELDS: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "model.hidden_size": (int, 64),
    "model.glu_size": (int, 172),
    "model.n_heads": (int, 4),
    "model.n_layers": (int, 2),
    "model.seq_length": (int, 128),
    "model.vocab_size": (int, 256),
    "model.ffn_kind": (FfnKind, FfnKind.RELU2_GLU),
    "sparsity.mode": (Mode, Mode.DENSE),
    "sparsity.keep": (float, 1.0),
    "sparsity.block_size": (int, 32),
    "sparsity.rescale": (_bool, True),
    "sparsity.ste": (_bool, True),
    "train.learning_rate": (float, 2e-3),
    "train.end_learning_rate": (float, 2e-4),
    "train.weight_decay": (float, 0.1),
    "train.end_weight_decay": (_optional(float), None),
    "train.batch_size_tokens": (int, 512),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.95),
    "train.warmup_steps": (int, 100),
    "train.warmup_ratio": (_optional(float), None),
    "train.schedule": (Schedule, Schedule.COSINE),
    "train.polynomial_power": (float, 1.0),
    "train.grad_clip": (_optional(float), 2.0),
    "train.total_steps": (int, 2000),
    "train.log_interval": (int, 100),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in FIELDS.items()})

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def model_config(self) -> ModelConfig:
        v = self.values
        try:
            return ModelConfig(
                hidden_size=v["model.hidden_size"],
                glu_size=v["model.glu_size"],
                n_heads=v["model.n_heads"],
                n_layers=v["model.n_layers"],
                seq_length=v["model.seq_length"],
                vocab_size=v["model.vocab_size"],
                ffn_kind=v["model.ffn_kind"],
                sparsity=SparsityConfig(
                    mode=v["sparsity.mode"],
                    keep_fraction=v["sparsity.keep"],
                    block_size_m=v["sparsity.block_size"],
                    rescale=v["sparsity.rescale"],
                    ste=v["sparsity.ste"],
                ),
            )
        except (ValueError, SparsityConfigError) as exc:
            raise ConfigError(f"model/sparsity: {exc}") from exc

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                learning_rate=v["train.learning_rate"],
                end_learning_rate=v["train.end_learning_rate"],
                weight_decay=v["train.weight_decay"],
                end_weight_decay=v["train.end_weight_decay"],
                batch_size_tokens=v["train.batch_size_tokens"],
                adam_betas=(v["train.adam_beta1"], v["train.adam_beta2"]),
                warmup_steps=v["train.warmup_steps"],
                warmup_ratio=v["train.warmup_ratio"],
                schedule=v["train.schedule"],
                polynomial_power=v["train.polynomial_power"],
                grad_clip=v["train.grad_clip"],
                total_steps=v["train.total_steps"],
                seed=v["seed"],
                log_interval=v["train.log_interval"],
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def validate(self) -> None:
        self.model_config()
        self.train_config()

    def with_overrides(self, overrides: dict) -> "RunConfig":
        new = RunConfig(dict(self.values))
        for key, value in overrides.items():
            new.set(key, value)
        return new

    def set(self, key: str, value) -> None:
        if key not in FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        parse, _ = FIELDS[key]
        if isinstance(value, str):
            try:
                value = parse(value.strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: invalid value {value!r} ({exc})") from exc
        self.values[key] = value

    def to_flat(self) -> dict[str, str]:
        return {k: _render(self.values[k]) for k in sorted(self.values)}

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[str | Path], overrides: Optional[dict] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
        cfg = cfg.with_overrides(parse_lines(text, str(p)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


def from_flat(values: dict[str, str]) -> RunConfig:
    cfg = RunConfig().with_overrides(values)
    cfg.validate()
    return cfg
