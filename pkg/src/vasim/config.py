"""
Flat ``key=value`` run configuration.

Precedence, lowest first: built-in defaults, profile defaults, config file,
command-line flags.  Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import os
from pathlib import Path

from .profiles import get_profile


class ConfigError(ValueError):
    pass


# key -> (type, default); None defaults are filled from the active profile
SCHEMA: dict[str, tuple[type, object]] = {
    "profile": (str, "desk"),
    "seed": (int, 0),
    "workers": (int, None),
    # measurement
    "repetitions": (int, 10),
    "trials": (int, 30),
    "pupil_radius_mm": (float, 4.0),
    "wavelength_nm": (float, 530.0),
    "pupil_grid_n": (int, 512),
    "beta": (float, 2.0),
    "guess_rate": (float, 0.125),
    "lapse_rate": (float, 0.02),
    # corpus
    "images_per_orientation": (int, None),
    "train_per_orientation": (int, None),
    "gap_min": (float, None),
    "gap_max": (float, None),
    "defocus_max_d": (float, None),
    "defocus_step_d": (float, None),
    # training
    "learning_rate": (float, 0.01),
    "momentum": (float, 0.9),
    "l2": (float, 1e-4),
    "batch_size": (int, 128),
    "max_epochs": (int, None),
    # PAL
    "addition_d": (float, 2.5),
    "grid_extent_mm": (float, 20.0),
    "grid_step_mm": (float, None),
    "good_va_threshold": (float, 0.2),
    "heatmap_vmin": (float, -0.2),
    "heatmap_vmax": (float, 1.1),
}

PAL_GRID_STEP = {"full": 1.0, "desk": 2.0}


def _coerce(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ = SCHEMA[key][0]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value.strip())
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, profile defaults, file values and overrides."""
    merged = {k: d for k, (_, d) in SCHEMA.items()}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for k in merged:
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
    prof = get_profile(merged["profile"])
    for key in ("images_per_orientation", "train_per_orientation", "gap_min", "gap_max",
                "defocus_max_d", "defocus_step_d", "max_epochs"):
        if merged[key] is None:
            merged[key] = getattr(prof, key)
    if merged["grid_step_mm"] is None:
        merged["grid_step_mm"] = PAL_GRID_STEP[prof.name]
    if merged["workers"] is None:
        merged["workers"] = os.cpu_count() or 1
    return {k: _coerce(k, v) for k, v in merged.items()}


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(values: dict, header: list[str] | None = None) -> str:
    lines = [f"# {h}" for h in header or ()]
    lines += [f"{k}={values[k]}" for k in sorted(values) if k != "workers"]
    return "\n".join(lines) + "\n"
