"""Run configuration: a TOML file with one section per concern.

Every key is optional; missing keys take the fixed experimental defaults
(``configs/paper.default.toml`` spells them all out). Unknown sections or keys
are rejected. ``G = "inf"`` disables global pruning.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exact_filter import DDBins, QuadratureGrid
from .scoring import ScoreKind
from .world_model import ParameterError, WorldModelParams

DEFAULTS: dict[str, dict[str, Any]] = {
    "world_model": WorldModelParams().to_mapping(),
    "dataset": {
        "per_bin": 100,
        "tau": 0.8,
        "root_seed": 0,
        "max_attempts": 1_000_000,
        "batch_size": 512,
        "bins": {"early": [30, 80], "mid": [80, 140], "late": [140, 170]},
    },
    "grid": {"z_min": -6.0, "z_max": 6.0, "n_points": 1201},
    "scoring": {"sigma_bg": 1.0},
    "inference": {
        "budget": 64,
        "K": 32,
        "C": 2,
        "G": "inf",
        "score_kind": "joint",
        "ess_threshold_fraction": 0.5,
        "keep_children": 1,
        "global_pool": "children",
    },
    "sweeps": {
        "scoring": ["joint", "evidence", "tbd"],
        "G": [1, 5, 10, 20, "inf"],
        "C": [2, 4, 8, 16, 32],
        "C_sweep_G": 1,
        "K": [2, 4, 8, 16, 32, 64],
        "K_sweep_C": 2,
    },
    "evaluation": {"horizons": [1, 5, 10], "M": 20, "seeds": [0, 1, 2], "window": 20},
    "output": {"dir": "runs/default"},
}


class ConfigError(ValueError):
    pass


def parse_G(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        value = int(value)
    if value == math.inf:
        return math.inf
    if int(value) != value or value < 1:
        raise ConfigError(f"G must be a positive integer or 'inf', got {value!r}")
    return int(value)


def format_G(G: float) -> str:
    return "inf" if G == math.inf else str(int(G))


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict) and key != "bins":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a section")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str | None = None

    @classmethod
    def from_dict(cls, data: dict, source: str | None = None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, data), source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        cfg = cls.from_dict(data, str(path) if path else None)
        env = os.environ if env is None else env
        if env.get("EVITRACK_SEED"):
            cfg.raw["dataset"]["root_seed"] = int(env["EVITRACK_SEED"])
        return cfg

    def validate(self) -> None:
        try:
            self.params.validate()
            ScoreKind(self.raw["inference"]["score_kind"], self.sigma_bg)
            ScoreKind("tbd", self.sigma_bg)
            self.grid.check_coverage(self.params)
        except (ParameterError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        inf = self.raw["inference"]
        parse_G(inf["G"])
        if inf["K"] * inf["C"] != inf["budget"]:
            raise ConfigError(f"K*C = {inf['K'] * inf['C']} does not match budget {inf['budget']}")
        ds = self.raw["dataset"]
        if ds["per_bin"] < 1:
            raise ConfigError("dataset.per_bin must be >= 1")
        if not 0.5 < ds["tau"] < 1:
            raise ConfigError("dataset.tau must lie in (0.5, 1)")
        if set(ds["bins"]) != {"early", "mid", "late"}:
            raise ConfigError("dataset.bins needs exactly early, mid, late")
        for g in self.raw["sweeps"]["G"]:
            parse_G(g)
        ev = self.raw["evaluation"]
        if not ev["seeds"] or ev["M"] < 1 or any(h < 1 for h in ev["horizons"]):
            raise ConfigError("evaluation needs seeds, M >= 1 and horizons >= 1")

    @property
    def params(self) -> WorldModelParams:
        try:
            return WorldModelParams.from_mapping(self.raw["world_model"])
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def grid(self) -> QuadratureGrid:
        g = self.raw["grid"]
        return QuadratureGrid(float(g["z_min"]), float(g["z_max"]), int(g["n_points"]))

    @property
    def bins(self) -> DDBins:
        return DDBins(**{k: tuple(v) for k, v in self.raw["dataset"]["bins"].items()})

    @property
    def sigma_bg(self) -> float:
        return float(self.raw["scoring"]["sigma_bg"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.raw["evaluation"]["seeds"]]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    def resolved(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_toml(self) -> str:
        """Serialise the resolved configuration (round-trips through ``load``)."""
        lines = []
        for section, values in self.raw.items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return "inf" if value == math.inf else repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + " }"
    raise TypeError(f"cannot serialise {value!r}")
