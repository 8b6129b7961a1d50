"""INI configuration with sections ``model``, ``solver``, ``grid``, ``study``, ``bounds``.

Every key has a default; ``dump_config`` writes all of them so the parsed
configuration can always be re-serialized into one canonical form.
Unknown sections or keys are errors rather than being ignored.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .uq import BoundParams, StudyConfig, StudyError


class ConfigError(ValueError):
    pass


SECTIONS = {
    "model": ("N", "L", "L_p", "c", "decay", "support_scale", "first_mode"),
    "solver": ("mesh_n", "dt", "T", "g2", "solver", "tol"),
    "grid": ("N_s", "w"),
    "study": ("qoi", "normalize", "w_max", "ns_list", "w_ref", "mesh_ref", "trunc_ns", "trunc_w"),
    "bounds": (
        "alpha", "a_min", "a_max", "sigma", "delta_star", "C1", "C2_tilde", "C_D", "D_D", "l", "E",
        "C_T", "C_SG", "C_F", "F", "rho_ratio", "W_sol", "plan_tol",
    ),
}

_STUDY_FIELDS = {f.name for f in fields(StudyConfig)}
_BOUND_FIELDS = {f.name for f in fields(BoundParams)}


@dataclass(frozen=True)
class AppConfig:
    study: StudyConfig = field(default_factory=StudyConfig)
    bounds: BoundParams = field(default_factory=BoundParams)
    w_max: int = 4
    ns_list: tuple = (2, 3, 4)
    w_ref: Optional[int] = None
    mesh_ref: Optional[int] = None
    trunc_ns: tuple = (2, 3, 4, 6)
    trunc_w: int = 3
    alpha: float = 1.0
    a_min: float = 1.0
    a_max: float = 1.0
    W_sol: float = 1.0
    plan_tol: float = 1e-2

    def __post_init__(self):
        if self.w_max < 0 or self.trunc_w < 0:
            raise ConfigError("w_max and trunc_w must be >= 0")
        for n in self.ns_list + self.trunc_ns:
            if not 1 <= n <= self.study.N:
                raise ConfigError(f"N_s = {n} in a study list is outside 1..N = {self.study.N}")
        if self.w_ref is not None and self.w_ref < self.w_max:
            raise ConfigError(f"w_ref = {self.w_ref} is below w_max = {self.w_max}")
        if self.mesh_ref is not None and self.mesh_ref < self.study.mesh_n:
            raise ConfigError(f"mesh_ref = {self.mesh_ref} is coarser than mesh_n = {self.study.mesh_n}")
        if not (0 < self.a_min <= self.a_max):
            raise ConfigError("need 0 < a_min <= a_max")
        if not self.plan_tol > 0 or not self.W_sol > 0:
            raise ConfigError("plan_tol and W_sol must be positive")

    @property
    def reference_level(self) -> int:
        return self.w_max + 2 if self.w_ref is None else self.w_ref

    @property
    def reference_mesh(self) -> int:
        return self.study.mesh_n if self.mesh_ref is None else self.mesh_ref

    def value(self, name: str):
        if name in _STUDY_FIELDS:
            return getattr(self.study, name)
        if name in _BOUND_FIELDS:
            return getattr(self.bounds, name)
        return getattr(self, name)


# -- value parsing -------------------------------------------------------------------


def _parse_float(text: str) -> float:
    t = text.strip()
    if "/" in t:
        num, _, den = t.partition("/")
        return float(num) / float(den)
    return float(t)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple:
    items = [s for s in text.replace(" ", "").split(",") if s]
    if not items:
        raise ValueError("empty list")
    return tuple(int(s) for s in items)


def _parse_optional_int(text: str):
    return None if text.strip().lower() == "auto" else int(text)


_PARSERS = {
    "N": int, "mesh_n": int, "N_s": int, "w": int, "w_max": int, "trunc_w": int,
    "first_mode": str.strip, "solver": str.strip, "qoi": str.strip,
    "normalize": _parse_bool,
    "ns_list": _parse_int_list, "trunc_ns": _parse_int_list,
    "w_ref": _parse_optional_int, "mesh_ref": _parse_optional_int,
}


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- load / dump ---------------------------------------------------------------------


def parse_config(text: str, source: str = "<string>") -> AppConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (N vs N_s, C_D)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _PARSERS.get(key, _parse_float)(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from None
    try:
        study = StudyConfig(**{k: v for k, v in values.items() if k in _STUDY_FIELDS})
        bounds = BoundParams(**{k: v for k, v in values.items() if k in _BOUND_FIELDS})
        rest = {k: v for k, v in values.items() if k not in _STUDY_FIELDS and k not in _BOUND_FIELDS}
        return AppConfig(study=study, bounds=bounds, **rest)
    except (StudyError, ConfigError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> AppConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    return parse_config(text, str(path))


def dump_config(cfg: AppConfig) -> str:
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {_format(cfg.value(k))}" for k in keys)
        out.append("")
    return "\n".join(out)


def config_hash(cfg: AppConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def with_overrides(cfg: AppConfig, **kw) -> AppConfig:
    """Replace top-level or study fields, dropping ``None`` values."""
    kw = {k: v for k, v in kw.items() if v is not None}
    study_kw = {k: v for k, v in kw.items() if k in _STUDY_FIELDS}
    top_kw = {k: v for k, v in kw.items() if k not in _STUDY_FIELDS}
    try:
        return replace(cfg, study=replace(cfg.study, **study_kw), **top_kw)
    except StudyError as exc:
        raise ConfigError(str(exc)) from None
