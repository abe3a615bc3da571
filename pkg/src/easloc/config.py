"""Experiment configuration: one INI file drives every CLI subcommand.

The file is parsed into a flat dataclass with typed fields and defaults, so
a missing file section falls back to the default benchmark setup (ellipsoid
shell, azimuthal fibers, 20-seed benchmark). A stable hash of the fully
resolved configuration is stamped into every output artifact, making each
experiment reproducible from the config file alone.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

DEFAULT_SEEDS = tuple(range(20))


class ConfigError(ValueError):
    """Raised for unreadable, unparsable, or invalid configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    # [geometry]
    kind: str = "ellipsoid-shell"
    radii: tuple = (30.0, 25.0, 20.0)
    subdivision: int = 4
    fiber_rule: str = "azimuthal"
    fiber_direction: tuple = (1.0, 0.0, 0.0)
    lf_coarsen_factor: float = 2.0
    hf_mesh_path: str = ""  # overrides synthetic geometry when set
    lf_mesh_path: str = ""
    # [conduction]
    v_fiber: float = 0.6
    v_cross: float = 0.3
    # [ecg]
    sigma_l: float = 0.17
    sigma_t: float = 0.019
    v0: float = -80.0
    v1: float = 20.0
    upstroke_width: float = 1.0
    dt: float = 1.0
    time_margin: float = 1.2
    # [kernel]
    nu: float = 2.5
    n_eig: int = 0  # 0 = min(256, n/4) rule
    # [bo]
    n_init: int = 10
    n_init_hf: int = 5
    n_init_lf: int = 35
    max_hf_evals: int = 30
    beta: float = 2.0
    geo_tol_fraction: float = 0.05
    lf_cost_ratio: float = 0.6 / 5.6
    fit_restarts: int = 8
    # [experiment]
    truth_node: int = 500
    truth_point: tuple = ()  # optional 3D coordinate, snapped to nearest node
    seed: int = 0
    seeds: tuple = DEFAULT_SEEDS
    output_dir: str = "out"

    def config_hash(self):
        """Short stable digest of every resolved field."""
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:12]

    def validate(self):
        if self.kind not in ("ellipsoid-shell", "icosphere") \
                and not self.hf_mesh_path:
            raise ConfigError(f"unknown geometry kind: {self.kind!r}")
        if not self.v_fiber >= self.v_cross > 0:
            raise ConfigError("need v_fiber >= v_cross > 0")
        if not self.sigma_l >= self.sigma_t > 0:
            raise ConfigError("need sigma_l >= sigma_t > 0")
        if not self.v1 > self.v0:
            raise ConfigError("need v1 > v0")
        if min(self.dt, self.upstroke_width, self.time_margin) <= 0:
            raise ConfigError("dt, upstroke_width, time_margin must be positive")
        if min(self.n_init, self.n_init_hf, self.n_init_lf) < 1:
            raise ConfigError("design sizes must be >= 1")
        if not 0 < self.lf_cost_ratio <= 1:
            raise ConfigError("lf_cost_ratio must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        return self


def _parse_floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse_seeds(text):
    """Comma list with ranges: "0-4, 7" -> (0, 1, 2, 3, 4, 7)."""
    out = []
    for token in text.replace(" ", "").split(","):
        if not token:
            continue
        if "-" in token[1:]:
            a, b = token.rsplit("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(token))
    return tuple(out)


_SECTIONS = {
    "geometry": {
        "kind": str, "radii": _parse_floats, "subdivision": int,
        "fiber_rule": str, "fiber_direction": _parse_floats,
        "lf_coarsen_factor": float, "hf_mesh_path": str, "lf_mesh_path": str,
    },
    "conduction": {"v_fiber": float, "v_cross": float},
    "ecg": {
        "sigma_l": float, "sigma_t": float, "v0": float, "v1": float,
        "upstroke_width": float, "dt": float, "time_margin": float,
    },
    "kernel": {"nu": float, "n_eig": int},
    "bo": {
        "n_init": int, "n_init_hf": int, "n_init_lf": int,
        "max_hf_evals": int, "beta": float, "geo_tol_fraction": float,
        "lf_cost_ratio": float, "fit_restarts": int,
    },
    "experiment": {
        "truth_node": int, "truth_point": _parse_floats, "seed": int,
        "seeds": _parse_seeds, "output_dir": str,
    },
}


def load_config(path=None):
    """Parse an INI file into an ExperimentConfig (defaults when path is None)."""
    if path is None:
        return ExperimentConfig().validate()
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown option {key!r} in [{section}]")
            try:
                values[key] = known[key](raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for {key!r} in [{section}]: {raw!r}"
                ) from exc
    return ExperimentConfig(**values).validate()


def write_default_config(path):
    """Emit a fully commented template of the default configuration."""
    cfg = ExperimentConfig()
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))
