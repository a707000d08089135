"""Flat ``section.key = value`` configuration files.

Lines are ``section.key = value``; ``#`` starts a comment. Every key must
appear in :data:`SCHEMA`; unknown keys, malformed values and duplicates are
:class:`ConfigError` with the offending line number.

Value syntax:

* numbers and words as usual; booleans are ``true``/``false``
* lists are whitespace or comma separated: ``1e-8 1e-4 1``
* frequency bands separate bands with ``;``: ``2.0 2.5; 3.0 3.5``
* layers are ``z:v`` pairs: ``0:2.0, 0.8:3.0``
"""
from __future__ import annotations

import hashlib
import math
import re
from pathlib import Path

from .errors import ConfigError

_KEY = re.compile(r"^([a-z_][a-z0-9_]*)\.([a-z_][a-z0-9_]*)$")


def _float(s):
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _floats(s):
    parts = [p for p in re.split(r"[,\s]+", s) if p]
    if not parts:
        raise ValueError("expected at least one number")
    return tuple(_float(p) for p in parts)


def _bands(s):
    bands = tuple(_floats(b) for b in s.split(";") if b.strip())
    if not bands:
        raise ValueError("expected at least one band")
    return bands


def _layers(s):
    out = []
    for item in (p for p in re.split(r"[,\s]+", s) if p):
        if ":" not in item:
            raise ValueError(f"layer {item!r} is not of the form z:v")
        z, v = item.split(":", 1)
        out.append((_float(z), _float(v)))
    if not out:
        raise ValueError("expected at least one layer")
    return tuple(out)


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _path(s):
    return s


_MODEL_KINDS = _choice("linear-gradient", "layered", "wedge", "file", "benchmark")


def _model_keys():
    return {
        "kind": (_MODEL_KINDS, None),
        "file": (_path, None),
        "v_top": (_float, None),
        "v_bottom": (_float, None),
        "layers": (_layers, None),
        "z0": (_float, None),
        "slope": (_float, None),
        "z_base": (_float, None),
        "v_wedge": (_float, None),
        "perturbation": (_float, None),
    }


# section -> key -> (parser, default); a default of None means "not set"
SCHEMA = {
    "run": {
        "seed": (_int, 0),
    },
    "grid": {
        "nx": (_int, None),
        "nz": (_int, None),
        "dx": (_float, None),
        "dz": (_float, None),
    },
    "model": _model_keys(),
    "initial": _model_keys(),
    "acquisition": {
        "n_sources": (_int, None),
        "n_receivers": (_int, None),
        "source_depth": (_float, None),
        "receiver_depth": (_float, None),
        "margin": (_float, 0.0),
    },
    "source": {
        "center_frequency": (_float, 15.0),
        "amplitude": (_float, 1.0),
    },
    "data": {
        "file": (_path, None),
        "frequencies": (_floats, None),
        "noise_std": (_float, 0.0),
    },
    "boundary": {
        "velocity": (_float, None),
    },
    "inversion": {
        "method": (_choice("fwi", "wri", "lrwi"), "lrwi"),
        "bands": (_bands, None),
        "iters_per_band": (_int, 45),
        "theta0": (_float, math.pi / 4),
        "bounds": (_bool, True),
        "v_min": (_float, 1.0),
        "v_max": (_float, 6.5),
        "lrwi_all_bands": (_bool, False),
        "freeze_lambda": (_bool, False),
        "memory": (_int, 10),
        "init_step": (_float, 0.05),
    },
    "penalty": {
        "beta1": (_float, 1e-8),
        "beta2": (_float, 1e-12),
        "growth1": (_floats, (1.0,)),
        "growth2": (_floats, (1.0,)),
    },
    "gradcheck": {
        "frequency": (_float, None),
        "h": (_floats, (1e-6,)),
        "beta1": (_floats, (1e-4, 1.0)),
        "beta2": (_floats, (1e-8, 1e-2)),
        "theta": (_float, 0.6),
        "split_perturbation": (_float, 0.1),
        "tolerance": (_float, 1e-4),
    },
    "condstudy": {
        "frequency": (_float, None),
        "beta1": (_floats, (1e-3, 1e-1, 1e1, 1e3)),
        "beta2": (_floats, (1e-8, 1e-6, 1e-4, 1e-2, 1e0, 1e2, 1e4)),
        "max_iter": (_int, 300),
        "tol": (_float, 1e-6),
        "image": (_bool, True),
    },
    "betasweep": {
        "beta1": (_floats, (1e-8, 1e-4, 1.0)),
        "beta2": (_floats, (1e-12, 1e-8, 1e-4, 1.0)),
        "include_fwi": (_bool, True),
    },
    "freqsweep": {
        "starts": (_floats, None),
    },
}


class Config:
    """Parsed configuration: ``cfg['section.key']`` or ``cfg.get(section, key)``."""

    def __init__(self, values: dict, source: Path | None = None):
        self._values = dict(values)
        self.source = source

    def get(self, section, key, default=None):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise KeyError(f"{section}.{key} is not a configuration key")
        v = self._values.get((section, key))
        if v is None:
            v = SCHEMA[section][key][1]
        return default if v is None else v

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.get(section, key)

    def require(self, section, key):
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"missing required key {section}.{key}")
        return v

    def is_set(self, section, key):
        return (section, key) in self._values

    def section(self, section):
        return {k: v for (s, k), v in self._values.items() if s == section}

    def with_values(self, **dotted):
        """Copy with ``section__key=value`` overrides (already parsed values)."""
        vals = dict(self._values)
        for name, v in dotted.items():
            section, key = name.split("__", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            vals[(section, key)] = v
        return Config(vals, self.source)

    def resolve_path(self, p):
        p = Path(p)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def canonical(self) -> str:
        """Sorted ``section.key = repr`` lines of the explicitly set keys."""
        return "".join(f"{s}.{k} = {self._values[(s, k)]!r}\n"
                       for s, k in sorted(self._values))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(text: str, source=None) -> Config:
    values = {}
    name = str(source) if source is not None else "<config>"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{name}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        m = _KEY.match(key)
        if not m:
            raise ConfigError(f"{name}:{lineno}: malformed key {key!r}")
        section, k = m.groups()
        if section not in SCHEMA or k not in SCHEMA[section]:
            raise ConfigError(f"{name}:{lineno}: unknown key {key!r}")
        if (section, k) in values:
            raise ConfigError(f"{name}:{lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"{name}:{lineno}: empty value for {key!r}")
        try:
            values[(section, k)] = SCHEMA[section][k][0](value)
        except ValueError as exc:
            raise ConfigError(f"{name}:{lineno}: {key}: {exc}") from None
    return Config(values, Path(source) if source is not None else None)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def key_reference() -> str:
    """Every accepted key with its default, one per line (for the docs)."""
    lines = []
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            shown = "(unset)" if default is None else repr(default)
            lines.append(f"{section}.{key} = {shown}")
    return "\n".join(lines)
