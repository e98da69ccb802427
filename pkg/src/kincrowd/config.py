"""Run configuration: defaults, flat ``key = value`` files and manifests."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, fields

from .errors import ConfigurationError
from .scenarios import PRESETS, ScenarioSpec, preset

SECTION = "run"
# scenario fields that a config file may override; None keeps the preset value
SCENARIO_KEYS = ("size_mm", "exit_width_mm", "column_diameter_mm", "column_gap_mm",
                 "ant_count", "dx_mm", "dy_mm", "dt_s", "horizon_s",
                 "max_speed_mm_s", "max_density_per_mm2")


@dataclass
class RunConfig:
    """Every parameter of a CLI run; defaults reproduce the headline experiment."""

    preset: str = "circle"
    n_d: int = 8
    size_mm: float | None = None
    exit_width_mm: float | None = None
    column_diameter_mm: float | None = None
    column_gap_mm: float | None = None
    ant_count: float | None = None
    dx_mm: float | None = None
    dy_mm: float | None = None
    dt_s: float | None = None
    horizon_s: float | None = None
    max_speed_mm_s: float | None = None
    max_density_per_mm2: float | None = None
    eps: float = 0.95
    eps0: float = 0.05
    eps_ref: float = 0.75
    xi: float = 0.0
    delta: float = 50.0
    tol: float = 1e-5
    max_iters: int = 200
    update_sign: str = "descent"
    stride: int = 1
    snapshot_times: tuple = (5.0, 10.0, 20.0)
    cfl_override: bool | None = None
    clamp_mode: bool = False
    quantize: float | None = None
    seed: int = 0
    threads: int = 1
    deterministic: bool = True
    out: str = "run"
    observations: str | None = None

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.n_d < 3:
            raise ConfigurationError("n_d must be at least 3")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigurationError(f"eps={self.eps} outside [0, 1]")
        for name in ("eps0", "eps_ref"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} outside [0, 1]")
        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
        if any(t < 0 for t in self.snapshot_times):
            raise ConfigurationError("snapshot times must be nonnegative")
        if self.quantize is not None and not self.quantize > 0:
            raise ConfigurationError("quantize must be positive")
        self.scenario()
        return self

    @property
    def kernel_threads(self) -> int:
        return 1 if self.deterministic else self.threads

    def scenario(self) -> ScenarioSpec:
        overrides = {k: getattr(self, k) for k in SCENARIO_KEYS if getattr(self, k) is not None}
        if self.cfl_override is not None:
            overrides["cfl_override"] = self.cfl_override
        return preset(self.preset, **overrides)

    def effective(self) -> "RunConfig":
        """Copy with every scenario-derived value filled in."""
        spec = self.scenario()
        changes = {k: getattr(spec, k) for k in SCENARIO_KEYS if getattr(self, k) is None
                   and getattr(spec, k) is not None}
        changes["cfl_override"] = spec.cfl_override
        return dataclasses.replace(self, **changes)


_HINTS = typing.get_type_hints(RunConfig)


def _parse_value(name: str, raw: str):
    hint = _HINTS[name]
    raw = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional and raw.lower() in ("", "none"):
        return None
    base = [a for a in typing.get_args(hint) if a is not type(None)]
    target = base[0] if base else hint
    try:
        if target is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is tuple:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(f"[{SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse configuration: {exc}") from exc
    if parser.sections() != [SECTION]:
        raise ConfigurationError("configuration files are flat key = value lists; "
                                 "section headers are not allowed")
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, raw in parser[SECTION].items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[key] = _parse_value(key, raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config_text(text, base)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def manifest_text(cfg: RunConfig, command: str, extra: dict | None = None) -> str:
    """Flat ``key = value`` listing that :func:`parse_config_text` reads back."""
    lines = [f"# kincrowd {command} manifest"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
