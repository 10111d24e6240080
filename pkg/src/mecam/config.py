"""Run configuration: flat ``key = value`` files with ``#`` comments.

Resolution order, lowest to highest: built-in defaults, the config file, the
``MECAM_SEED`` environment variable (seed only), command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError
from .model import ModelConfig
from .scoring import canonical_scorer

SEED_ENV = "MECAM_SEED"


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _float_list(text: str) -> tuple[float, ...] | None:
    text = text.strip()
    if text.lower() in ("", "none", "uniform"):
        return None
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _masks(text: str) -> tuple[tuple[int, ...], ...] | None:
    # several masks separated by ';', e.g. "4; 1,2,3,4"
    text = text.strip()
    if text.lower() in ("", "none", "all"):
        return None
    return tuple(_int_list(part) for part in text.split(";") if part.strip())


def _scorers(text: str) -> tuple[str, ...]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ConfigError("scorers must name at least one scorer")
    return tuple(dict.fromkeys(canonical_scorer(n) for n in names))


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text: str) -> str:
    return text.strip()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = 0.01
    lr_end: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    augment: bool = True
    input_size: int = 32
    in_channels: int = 1
    num_classes: int = 2
    stage_widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    exit_stages: tuple[int, ...] = (1, 2, 3, 4)
    exit_loss_weights: tuple[float, ...] | None = None
    exit_mask: tuple[tuple[int, ...], ...] | None = None
    mood_exit: int | None = None
    target_tpr: float = 0.95
    scorers: tuple[str, ...] = ("mecam", "msp", "energy", "mood_energy")
    workers: int = 1
    data_root: str = "."
    manifest: str = "id.csv"
    checkpoint: str = ""  # empty: <out_dir>/model.ckpt
    out_dir: str = "out"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            stage_widths=self.stage_widths,
            blocks_per_stage=self.blocks_per_stage,
            exit_stages=self.exit_stages,
            input_size=self.input_size,
        )

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.ckpt"

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs must be >= 0, batch_size and workers >= 1")
        if not 0.0 < self.target_tpr <= 1.0:
            raise ConfigError(f"target_tpr must be in (0, 1], got {self.target_tpr}")
        if self.exit_loss_weights is not None and len(self.exit_loss_weights) != len(self.exit_stages):
            raise ConfigError(
                f"exit_loss_weights has {len(self.exit_loss_weights)} entries for {len(self.exit_stages)} exits"
            )
        for m in self.exit_mask or ():
            if not m or any(e not in self.exit_stages for e in m):
                raise ConfigError(f"exit_mask {m} must be a non-empty subset of {self.exit_stages}")
        return self

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(f.name, getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir=None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved"
        path.write_text(self.dump(), encoding="utf-8")
        return path


_PARSERS: dict[str, Callable[[str], Any]] = {
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "lr_start": float,
    "lr_end": float,
    "weight_decay": float,
    "momentum": float,
    "augment": _bool,
    "input_size": int,
    "in_channels": int,
    "num_classes": int,
    "stage_widths": _int_list,
    "blocks_per_stage": int,
    "exit_stages": _int_list,
    "exit_loss_weights": _float_list,
    "exit_mask": _masks,
    "mood_exit": _opt_int,
    "target_tpr": float,
    "scorers": _scorers,
    "workers": int,
    "data_root": _str,
    "manifest": _str,
    "checkpoint": _str,
    "out_dir": _str,
}
KEYS = tuple(_PARSERS)


def _format(key: str, value) -> str:
    if value is None:
        return "none"
    if key == "exit_mask":
        return "; ".join(",".join(map(str, m)) for m in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, value)
    return values


def resolve(
    path=None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, file, environment seed and overrides (already parsed values)."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = parse_value("seed", env[SEED_ENV])
    for key, value in (overrides or {}).items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = parse_value(key, value) if isinstance(value, str) else value
    return replace(RunConfig(), **values).validate()
