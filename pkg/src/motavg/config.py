"""Structured text configuration files with line-numbered validation.

The format is a small INI dialect::

    # comment
    angular = false          # file-level: are *_hz keys already angular?

    [cell]
    half_width_m = 150e-6
    temperature_k = 293

    [optics]
    kappa1_hz = 46e6         # ordinary Hz; multiplied by 2*pi on load

Keys ending in ``_hz`` hold ordinary frequencies and are converted to
angular units (rad/s) when the file-level ``angular`` flag is false (the
default).  With ``angular = true`` they are taken as rad/s verbatim.  The
conversion is a single multiplication by 2*pi, so a load/store round trip
is exact to floating-point rounding.

Every parse or validation error carries the offending line number.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Any

from .model import (
    CS_GROUND_SPLITTING,
    CS_MASS_KG,
    CS_NATURAL_LINEWIDTH,
    CellConfig,
    OpticalConfig,
    SpeciesConstants,
    cs_d2_species,
)

__all__ = ["ConfigError", "ConfigFile", "parse_config", "parse_config_text",
           "build_cell", "build_optics", "build_species", "build_all"]

TWO_PI = 2.0 * math.pi


class ConfigError(Exception):
    """Configuration parse/validation failure with source location."""

    def __init__(self, message: str, path: str = "<config>", line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


@dataclass
class _Entry:
    raw: str
    line: int


@dataclass
class ConfigFile:
    """Parsed configuration: sections of key/value entries plus file metadata."""

    path: str
    angular: bool = False
    sections: dict[str, dict[str, _Entry]] = dataclass_field(default_factory=dict)
    section_lines: dict[str, int] = dataclass_field(default_factory=dict)
    text: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def _entry(self, section: str, key: str) -> _Entry:
        if section not in self.sections:
            raise ConfigError(f"missing section [{section}]", self.path)
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(
                f"missing key '{key}' in section [{section}]",
                self.path,
                self.section_lines[section],
            ) from None

    def get_float(self, section: str, key: str, default: float | None = None) -> float:
        if default is not None and not self.has(section, key):
            return default
        entry = self._entry(section, key)
        try:
            value = float(entry.raw)
        except ValueError:
            raise ConfigError(
                f"key '{key}' expects a number, got {entry.raw!r}", self.path, entry.line
            ) from None
        if key.endswith("_hz") and not self.angular:
            value *= TWO_PI
        return value

    def get_int(self, section: str, key: str, default: int | None = None) -> int:
        if default is not None and not self.has(section, key):
            return default
        entry = self._entry(section, key)
        try:
            return int(entry.raw)
        except ValueError:
            raise ConfigError(
                f"key '{key}' expects an integer, got {entry.raw!r}", self.path, entry.line
            ) from None

    def get_str(self, section: str, key: str, default: str | None = None) -> str:
        if default is not None and not self.has(section, key):
            return default
        return self._entry(section, key).raw

    def get_bool(self, section: str, key: str, default: bool | None = None) -> bool:
        if default is not None and not self.has(section, key):
            return default
        entry = self._entry(section, key)
        lowered = entry.raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ConfigError(
            f"key '{key}' expects a boolean, got {entry.raw!r}", self.path, entry.line
        )


def parse_config_text(text: str, path: str = "<config>") -> ConfigFile:
    cfg = ConfigFile(path=path, text=text)
    current: str | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("malformed section header", path, lineno)
            current = line[1:-1].strip().lower()
            if not current:
                raise ConfigError("empty section name", path, lineno)
            if current in cfg.sections:
                raise ConfigError(f"duplicate section [{current}]", path, lineno)
            cfg.sections[current] = {}
            cfg.section_lines[current] = lineno
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", path, lineno)
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if not key:
            raise ConfigError("empty key", path, lineno)
        if current is None:
            if key == "angular":
                cfg.angular = value.lower() in ("true", "yes", "1")
                continue
            raise ConfigError(f"key '{key}' appears before any section", path, lineno)
        if key in cfg.sections[current]:
            raise ConfigError(f"duplicate key '{key}' in [{current}]", path, lineno)
        cfg.sections[current][key] = _Entry(raw=value, line=lineno)
    return cfg


def parse_config(path: str | Path) -> ConfigFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return parse_config_text(text, str(path))


def build_cell(cfg: ConfigFile) -> CellConfig:
    try:
        return CellConfig(
            half_width_L=cfg.get_float("cell", "half_width_m"),
            half_length_Lz=cfg.get_float("cell", "half_length_m"),
            temperature=cfg.get_float("cell", "temperature_k"),
            atom_mass=cfg.get_float("cell", "atom_mass_kg", CS_MASS_KG),
            n_atoms=cfg.get_int("cell", "n_atoms", 5000),
            trap_time=cfg.get_float("cell", "trap_time_s", 0.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.path, cfg.section_lines.get("cell")) from exc


def build_optics(cfg: ConfigFile) -> OpticalConfig:
    """Optics section; wavenumbers derive from wavelength + ground splitting."""
    wavelength = cfg.get_float("optics", "wavelength_m")
    splitting = cfg.get_float("species", "hyperfine_splitting_hz", CS_GROUND_SPLITTING) \
        if "species" in cfg.sections else CS_GROUND_SPLITTING
    k_c = TWO_PI / wavelength
    k_q = k_c + splitting / 299792458.0
    try:
        return OpticalConfig(
            waist_w=cfg.get_float("optics", "waist_m"),
            kappa1=cfg.get_float("optics", "kappa1_hz"),
            kappa2=cfg.get_float("optics", "kappa2_hz"),
            detuning=cfg.get_float("optics", "detuning_hz"),
            gamma=cfg.get_float("optics", "gamma_hz", CS_NATURAL_LINEWIDTH),
            k_q=cfg.get_float("optics", "k_q_per_m", k_q),
            k_c=cfg.get_float("optics", "k_c_per_m", k_c),
            g_amp=cfg.get_float("optics", "g_amp_hz", 1.0),
            omega_amp=cfg.get_float("optics", "omega_amp_hz", 1.0),
            finesse=cfg.get_float("optics", "finesse", 17.0),
            cavity_detuning=cfg.get_float("optics", "cavity_detuning_hz", 0.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.path, cfg.section_lines.get("optics")) from exc


def build_species(cfg: ConfigFile, cell: CellConfig, optics: OpticalConfig) -> SpeciesConstants:
    preset = cfg.get_str("species", "preset", "Cs-D2") if "species" in cfg.sections else "Cs-D2"
    beta = cfg.get_float("species", "beta", 1.0) if "species" in cfg.sections else 1.0
    beta2 = cfg.get_float("species", "beta2", 1.0) if "species" in cfg.sections else 1.0
    if preset.lower() not in ("cs-d2", "cs_d2", "csd2"):
        line = cfg.section_lines.get("species")
        raise ConfigError(f"unknown species preset {preset!r}", cfg.path, line)
    return cs_d2_species(cell, optics.k_c, gamma=optics.gamma, beta=beta, beta2=beta2)


def build_all(cfg: ConfigFile) -> tuple[CellConfig, OpticalConfig, SpeciesConstants]:
    cell = build_cell(cfg)
    optics = build_optics(cfg)
    species = build_species(cfg, cell, optics)
    return cell, optics, species


def get_any(cfg: ConfigFile, section: str, key: str, kind: str = "float",
            default: Any = None) -> Any:
    """Typed lookup helper used by CLI sweep sections."""
    getter = {
        "float": cfg.get_float,
        "int": cfg.get_int,
        "str": cfg.get_str,
        "bool": cfg.get_bool,
    }[kind]
    return getter(section, key, default)
