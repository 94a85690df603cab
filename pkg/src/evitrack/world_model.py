"""Double-well latent dynamics with a piecewise (partly even) emission map.

Latent:   z_t ~ N(mu(z_{t-1}), sigma_z^2),   mu(z) = z - dt*V0*z*(z^2 - a^2)
Emission: x_t ~ N(h(z_t), sigma_x^2),        h(z) = z^2 if |z| <= d else z
Initial:  z_1 ~ N(mu0, sigma0^2)

Inside |z| <= d the emission is even, so the sign of the latent (which well it
is heading for) cannot be read off a single observation there.

All density/mean functions accept scalars or numpy arrays.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Config keys follow the symbol names; ``v0`` is the documented spelling of V0.
_CONFIG_ALIASES = {"v0": "V0"}


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class WorldModelParams:
    a: float = 3.0
    V0: float = 0.06
    dt: float = 1.0
    sigma_z: float = 0.05
    d: float = 2.0
    sigma_x: float = 0.12
    mu0: float = 0.0
    sigma0: float = 1.0
    T: int = 200

    def validate(self) -> "WorldModelParams":
        """Raise ParameterError on hard violations; warn on advisory ones."""
        for name in ("sigma_z", "sigma_x", "sigma0"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if int(self.T) != self.T or self.T < 2:
            raise ParameterError(f"T must be an integer >= 2, got {self.T}")
        if not self.d > 0:
            raise ParameterError(f"d must be > 0, got {self.d}")
        if not self.a > self.d:
            raise ParameterError(f"need a > d (wells outside the even region), got a={self.a}, d={self.d}")
        # mu'(+-a) = 1 - dt*V0*(3a^2 - a^2); the wells attract iff |mu'(+-a)| < 1.
        slope = 1.0 - self.dt * self.V0 * 2.0 * self.a**2
        if not abs(slope) < 1.0:
            warnings.warn(
                f"mu'(+-a) = {slope:.3g}: linearised dynamics around the wells are not contracting",
                stacklevel=2,
            )
        return self

    @classmethod
    def from_mapping(cls, mapping: dict) -> "WorldModelParams":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = _CONFIG_ALIASES.get(key, key)
            if name not in known:
                raise ParameterError(f"unknown world-model key: {key!r}")
            kwargs[name] = int(value) if name == "T" else float(value)
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["v0"] = out.pop("V0")
        return out


@dataclass
class Trajectory:
    latent: np.ndarray
    obs: np.ndarray
    seed: int
    dd_time: Optional[int] = None
    dd_bin: Optional[str] = None
    true_basin: Optional[int] = None
    traj_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=float)
        self.obs = np.asarray(self.obs, dtype=float)
        if self.latent.shape != self.obs.shape or self.latent.ndim != 1:
            raise ValueError("latent and obs must be 1-d sequences of equal length")
        if self.dd_time is not None and not 1 <= self.dd_time <= len(self.obs):
            raise ValueError(f"dd_time {self.dd_time} outside [1, {len(self.obs)}]")

    @property
    def T(self) -> int:
        return len(self.obs)


def drift_mean(z, params: WorldModelParams):
    return z - params.dt * params.V0 * z * (z * z - params.a**2)


def emission_mean(z, params: WorldModelParams):
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) <= params.d, z * z, z)
    return out if out.ndim else float(out)


def gaussian_logpdf(x, mean, std):
    r = (x - mean) / std
    return -0.5 * r * r - math.log(std) - LOG_SQRT_2PI


def transition_logpdf(z_next, z_prev, params: WorldModelParams):
    return gaussian_logpdf(z_next, drift_mean(z_prev, params), params.sigma_z)


def emission_logpdf(x, z, params: WorldModelParams):
    return gaussian_logpdf(x, emission_mean(z, params), params.sigma_x)


def initial_logpdf(z, params: WorldModelParams):
    return gaussian_logpdf(z, params.mu0, params.sigma0)


def transition_sample(z_prev, params: WorldModelParams, rng: np.random.Generator, size=None):
    """Draw z_next ~ N(mu(z_prev), sigma_z^2); broadcasts over ``z_prev``."""
    mean = drift_mean(np.asarray(z_prev, dtype=float), params)
    shape = np.shape(mean) if size is None else size
    out = mean + params.sigma_z * rng.standard_normal(shape)
    return out if np.ndim(out) else float(out)


def simulate_batch(params: WorldModelParams, seeds: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Simulate one trajectory per seed; returns ``(latent, obs)`` of shape (B, T).

    Each seed's generator supplies ``2T`` standard normals: the first ``T``
    drive the latent (initial draw then T-1 transitions), the last ``T`` the
    emission noise. The recursion is vectorised across the batch and gives the
    same bits as simulating each seed alone.
    """
    T = int(params.T)
    noise = np.empty((len(seeds), 2 * T))
    for i, seed in enumerate(seeds):
        noise[i] = np.random.default_rng(seed).standard_normal(2 * T)
    eps_z, eps_x = noise[:, :T], noise[:, T:]
    z = np.empty((len(seeds), T))
    z[:, 0] = params.mu0 + params.sigma0 * eps_z[:, 0]
    for t in range(1, T):
        z[:, t] = drift_mean(z[:, t - 1], params) + params.sigma_z * eps_z[:, t]
    x = emission_mean(z, params) + params.sigma_x * eps_x
    return z, x


def simulate(params: WorldModelParams, seed: int) -> Trajectory:
    z, x = simulate_batch(params, [seed])
    return Trajectory(latent=z[0], obs=x[0], seed=int(seed))


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    """Write ``<path>`` (CSV: t, z_true, x) and ``<path>.json`` metadata.

    Floats are written with 17 significant digits so a reload is bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "z_true", "x"])
        for t, (z, x) in enumerate(zip(traj.latent, traj.obs), start=1):
            writer.writerow([t, f"{z:.17g}", f"{x:.17g}"])
    meta = {
        "traj_id": traj.traj_id,
        "seed": traj.seed,
        "dd_time": traj.dd_time,
        "dd_bin": traj.dd_bin,
        "true_basin": traj.true_basin,
        **traj.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    meta = json.loads(Path(str(path) + ".json").read_text())
    known = {"traj_id", "seed", "dd_time", "dd_bin", "true_basin"}
    return Trajectory(
        latent=np.array([float(r["z_true"]) for r in rows]),
        obs=np.array([float(r["x"]) for r in rows]),
        seed=meta["seed"],
        dd_time=meta.get("dd_time"),
        dd_bin=meta.get("dd_bin"),
        true_basin=meta.get("true_basin"),
        traj_id=meta.get("traj_id", 0),
        meta={k: v for k, v in meta.items() if k not in known},
    )
