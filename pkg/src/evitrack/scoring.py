"""Trajectory scores as an initial value plus additive per-step increments.

joint     J = log p(z_1:t) + log p(x_1:t | z_1:t)
evidence  E = log p(x_1:t | z_1:t)
tbd       J - log p0(z_1:t),  p0 = Gaussian random walk with scale sigma_bg
          started at N(0, sigma_bg^2)

All functions broadcast over numpy arrays of latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world_model import (
    WorldModelParams,
    emission_logpdf,
    gaussian_logpdf,
    initial_logpdf,
    transition_logpdf,
)

JOINT, EVIDENCE, TBD = "joint", "evidence", "tbd"
_SHORT = {JOINT: "J", EVIDENCE: "E", TBD: "TBD"}


@dataclass(frozen=True)
class ScoreKind:
    name: str = JOINT
    sigma_bg: float = 1.0

    def __post_init__(self):
        if self.name not in _SHORT:
            raise ValueError(f"unknown score kind {self.name!r}")
        if self.name == TBD and not self.sigma_bg > 0:
            raise ValueError(f"sigma_bg must be > 0, got {self.sigma_bg}")

    @classmethod
    def parse(cls, text: str, sigma_bg: float = 1.0) -> "ScoreKind":
        aliases = {"j": JOINT, "e": EVIDENCE, "tbd": TBD, "joint": JOINT, "evidence": EVIDENCE}
        try:
            return cls(aliases[text.lower()], sigma_bg)
        except KeyError:
            raise ValueError(f"unknown score kind {text!r}") from None

    @property
    def short(self) -> str:
        return _SHORT[self.name]


def initial_score(kind: ScoreKind, z1, x1, params: WorldModelParams):
    ev = emission_logpdf(x1, z1, params)
    if kind.name == EVIDENCE:
        return ev
    joint = initial_logpdf(z1, params) + ev
    if kind.name == JOINT:
        return joint
    return joint - gaussian_logpdf(z1, 0.0, kind.sigma_bg)


def score_increment(kind: ScoreKind, z_parent, z_child, x_new, params: WorldModelParams):
    ev = emission_logpdf(x_new, z_child, params)
    if kind.name == EVIDENCE:
        return ev
    joint = transition_logpdf(z_child, z_parent, params) + ev
    if kind.name == JOINT:
        return joint
    return joint - gaussian_logpdf(z_child, z_parent, kind.sigma_bg)


def score_from_scratch(kind: ScoreKind, latent: Sequence[float], obs: Sequence[float],
                       params: WorldModelParams) -> float:
    """Direct evaluation of the score of a whole prefix, term by term.

    Independent of the incremental path: sums whole-sequence log-densities
    rather than accumulating step results.
    """
    z = np.asarray(latent, dtype=float)
    x = np.asarray(obs, dtype=float)[: len(z)]
    log_lik = float(np.sum(emission_logpdf(x, z, params)))
    if kind.name == EVIDENCE:
        return log_lik
    log_prior = float(initial_logpdf(z[0], params) + np.sum(transition_logpdf(z[1:], z[:-1], params)))
    if kind.name == JOINT:
        return log_prior + log_lik
    log_bg = float(gaussian_logpdf(z[0], 0.0, kind.sigma_bg)
                   + np.sum(gaussian_logpdf(z[1:], z[:-1], kind.sigma_bg)))
    return log_prior + log_lik - log_bg
