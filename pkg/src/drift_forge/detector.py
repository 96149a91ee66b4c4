"""One-sided z-score monitor over the stream of forecast losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import norm

EPS_SIGMA = 1e-12


def threshold_from_significance(alpha_t: float) -> float:
    """Two-tailed standard-normal critical value for significance ``alpha_t``."""
    if not 0.0 < alpha_t < 1.0:
        raise ValueError(f"alpha_t must lie in (0, 1), got {alpha_t}")
    return float(norm.ppf(1.0 - alpha_t / 2.0))


@dataclass(frozen=True)
class DetectorConfig:
    l_w: int = 16
    alpha_t: float = 0.01
    m_t: int = 64 * 16

    def __post_init__(self):
        if self.l_w < 2:
            raise ValueError(f"l_w must be >= 2, got {self.l_w}")
        if self.m_t < self.l_w:
            raise ValueError(f"m_t ({self.m_t}) must be >= l_w ({self.l_w})")
        threshold_from_significance(self.alpha_t)

    @property
    def threshold(self) -> float:
        return threshold_from_significance(self.alpha_t)


class VerdictKind(str, Enum):
    NO_DRIFT = "no_drift"
    DRIFT_ALARM = "drift_alarm"
    SCHEDULED_REFRESH = "scheduled_refresh"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    z_score: float | None = None
    mu: float | None = None
    sigma: float | None = None
    mu_tilde: float | None = None

    def to_json(self, round_: int) -> str:
        return json.dumps(
            {"round": round_, "kind": self.kind.value, "z": self.z_score, "mu": self.mu, "sigma": self.sigma, "mu_tilde": self.mu_tilde}
        )


@dataclass
class DetectorState:
    config: DetectorConfig = field(default_factory=DetectorConfig)
    losses: list[float] = field(default_factory=list)
    steps_since_reset: int = 0

    def record_loss(self, loss: float) -> "DetectorState":
        loss = float(loss)
        if not math.isfinite(loss) or loss < 0:
            raise ValueError(f"loss must be finite and non-negative, got {loss}")
        self.losses.append(loss)
        self.steps_since_reset += 1
        return self

    def statistics(self) -> tuple[float, float, float] | None:
        """(mean, sample std, trailing-window mean) of the buffer."""
        n = len(self.losses)
        if n < 2:
            return None
        b = np.asarray(self.losses)
        return float(b.mean()), float(b.std(ddof=1)), float(b[-self.config.l_w :].mean())

    def check(self, round_: int | None = None) -> Verdict:
        cfg = self.config
        stats = self.statistics()
        z = mu = sigma = mu_tilde = None
        alarm = False
        if stats is not None:
            mu, sigma, mu_tilde = stats
            if sigma > EPS_SIGMA:
                z = (mu_tilde - mu) / (sigma / math.sqrt(len(self.losses)))
                alarm = len(self.losses) > cfg.l_w and mu_tilde > mu and z > cfg.threshold
        if alarm:
            kind = VerdictKind.DRIFT_ALARM
        elif self.steps_since_reset >= cfg.m_t:
            kind = VerdictKind.SCHEDULED_REFRESH
        else:
            kind = VerdictKind.NO_DRIFT
        return Verdict(kind, z, mu, sigma, mu_tilde)

    def reset(self) -> "DetectorState":
        self.losses = []
        self.steps_since_reset = 0
        return self


def record_loss(state: DetectorState, loss: float) -> DetectorState:
    return state.record_loss(loss)


def check(state: DetectorState, round_: int | None = None) -> Verdict:
    return state.check(round_)


def reset(state: DetectorState) -> DetectorState:
    return state.reset()
