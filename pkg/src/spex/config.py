"""Flat key=value run configuration: parsing, defaults, canonical serialization.

The format is one ``key = value`` assignment per line, ``#`` comments, blank
lines ignored. Unknown keys are rejected with their line number; known keys
have typed defaults matching the full-scale training protocol. The canonical
serialization (sorted by the schema's declaration order) is what gets
embedded in checkpoints, so identical effective configs produce identical
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "parse_config_file",
    "serialize_config",
    "FAST_OVERRIDES",
]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


@dataclass
class RunConfig:
    """Typed view of a parsed config; attribute names mirror the flat keys."""

    seed: int = 0
    kernel_kind: str = "legendre"
    kernel_p: int = 1
    kernel_r: int = 6
    kernel_decay: float = 0.3
    model_layers: int = 4
    model_width: int = 128
    model_d: int = 3
    features_kind: str = ""  # empty = follow the kernel family
    features_degree: int = -1  # -1 = kernel rank
    train_objective: str = "scl"
    train_steps: int = 300_000
    train_batch: int = 1000
    train_lr: float = 1e-3
    train_center: bool = True
    train_trace_every: int = 200
    train_pool: str = ""
    nesting_mode: str = "joint"
    nesting_dims: tuple[int, ...] = ()
    nesting_weights: tuple[float, ...] = ()
    penalty_mu: float = 10.0
    penalty_nu: float = 30.0
    vicreg_lambda: float = 1.0
    vicreg_eps: float = 1e-4
    scl_normalize: bool = False
    eval_samples: int = 1_000_000
    out_dir: str = ""


_KEYS = {f.name.replace("_", ".", 1): f.name for f in fields(RunConfig)}
_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _bool,
}


def _parse_value(field_name: str, text: str):
    hints = {f.name: f.type for f in fields(RunConfig)}
    hint = hints[field_name]
    if field_name == "nesting_dims":
        return _int_list(text)
    if field_name == "nesting_weights":
        return _float_list(text)
    for typ, fn in _PARSERS.items():
        if hint == typ.__name__ or hint is typ:
            return fn(text.strip())
    raise ConfigError(f"unhandled config field type for {field_name}: {hint}")


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text; raise ConfigError naming the offending line."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, _KEYS[key], _parse_value(_KEYS[key], value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"override: unknown key {key!r}")
        setattr(cfg, _KEYS[key], value)
    _validate(cfg)
    return cfg


def parse_config_file(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def _validate(cfg: RunConfig) -> None:
    if cfg.kernel_kind not in ("legendre", "fourier"):
        raise ConfigError(f"kernel.kind must be legendre or fourier, got {cfg.kernel_kind!r}")
    if cfg.train_objective not in ("scl", "lora_svd", "rq", "vicreg", "rq_direct"):
        raise ConfigError(f"unknown train.objective {cfg.train_objective!r}")
    if cfg.nesting_mode not in ("none", "joint", "sequential"):
        raise ConfigError(f"unknown nesting.mode {cfg.nesting_mode!r}")
    if cfg.features_kind not in ("", "raw", "polynomial", "fourier"):
        raise ConfigError(f"unknown features.kind {cfg.features_kind!r}")
    if cfg.kernel_p < 1 or cfg.kernel_r < 1 or cfg.model_d < 1:
        raise ConfigError("kernel.p, kernel.r, model.d must be >= 1")
    if cfg.nesting_dims and cfg.nesting_dims[-1] != cfg.model_d:
        raise ConfigError("nesting.dims must end at model.d")
    if cfg.nesting_weights and len(cfg.nesting_weights) != len(cfg.nesting_dims):
        raise ConfigError("nesting.weights must match nesting.dims in length")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical one-key-per-line text, stable across runs."""
    lines = []
    for key, attr in _KEYS.items():
        lines.append(f"{key} = {_format_value(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


FAST_OVERRIDES = {
    "train.steps": 30_000,
    "train.batch": 512,
    "model.layers": 2,
    "model.width": 64,
    "eval.samples": 100_000,
}
