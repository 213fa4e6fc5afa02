"""Per-frame injection schedules: every-frame, periodic, value-gated.

decide() is a pure function; the caller owns the perturbation cache and
the per-episode log.  The value-threshold gate must be fed the value of
the *clean* frame, never of an already-perturbed one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Decision(enum.Enum):
    FRESH = "fresh"
    REUSE = "reuse"
    CLEAN = "clean"


@dataclass(frozen=True)
class EveryFrame:
    def label(self) -> str:
        return "every_frame"


@dataclass(frozen=True)
class Periodic:
    n: int
    fill: str = "clean"  # "clean" | "reuse"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("period must be >= 1")
        if self.fill not in ("clean", "reuse"):
            raise ValueError(f"unknown fill {self.fill!r}")

    def label(self) -> str:
        return f"periodic{self.n}_{self.fill}"


@dataclass(frozen=True)
class ValueThreshold:
    tau: float

    def label(self) -> str:
        return f"vf_tau{self.tau:g}"


InjectionStrategy = EveryFrame | Periodic | ValueThreshold


def decide(
    strategy: InjectionStrategy,
    frame_index: int,
    value_estimate: float,
    cache_nonempty: bool,
) -> Decision:
    """Which treatment the frame at frame_index gets under this strategy."""
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    if isinstance(strategy, EveryFrame):
        return Decision.FRESH
    if isinstance(strategy, Periodic):
        if frame_index % strategy.n == 0:
            return Decision.FRESH
        if strategy.fill == "reuse" and cache_nonempty:
            return Decision.REUSE
        return Decision.CLEAN
    if isinstance(strategy, ValueThreshold):
        return Decision.FRESH if value_estimate > strategy.tau else Decision.CLEAN
    raise TypeError(f"unknown strategy {strategy!r}")


def calibrate_threshold(baseline_values, quantile: float) -> float:
    """Empirical quantile (linear interpolation) of clean-rollout values."""
    values = np.asarray(baseline_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("baseline_values must be non-empty")
    if not (0.0 < quantile < 1.0):
        raise ValueError("quantile must be in (0, 1)")
    return float(np.quantile(values, quantile, method="linear"))


@dataclass
class InjectionLog:
    """Per-frame decisions grouped by episode."""

    episodes: list[list[Decision]] = field(default_factory=list)

    def add_episode(self, decisions: list[Decision]) -> None:
        self.episodes.append(list(decisions))

    def episode_counts(self) -> list[int]:
        return [sum(1 for d in ep if d is not Decision.CLEAN) for ep in self.episodes]


def injection_stats(log: InjectionLog) -> dict[str, float]:
    if not log.episodes:
        raise ValueError("log must contain at least one episode")
    counts = log.episode_counts()
    total_frames = sum(len(ep) for ep in log.episodes)
    return {
        "mean_injections_per_episode": float(np.mean(counts)),
        "fraction_frames_injected": (sum(counts) / total_frames) if total_frames else 0.0,
    }


def strategy_to_dict(strategy: InjectionStrategy) -> dict:
    if isinstance(strategy, EveryFrame):
        return {"variant": "every_frame"}
    if isinstance(strategy, Periodic):
        return {"variant": "periodic", "n": strategy.n, "fill": strategy.fill}
    if isinstance(strategy, ValueThreshold):
        return {"variant": "value_threshold", "tau": strategy.tau}
    raise TypeError(f"unknown strategy {strategy!r}")


def strategy_from_dict(d: dict) -> InjectionStrategy:
    variant = d.get("variant")
    if variant == "every_frame":
        extra = set(d) - {"variant"}
    elif variant == "periodic":
        extra = set(d) - {"variant", "n", "fill"}
        if not extra:
            return Periodic(n=int(d["n"]), fill=d.get("fill", "clean"))
    elif variant == "value_threshold":
        extra = set(d) - {"variant", "tau"}
        if not extra:
            return ValueThreshold(tau=float(d["tau"]))
    else:
        raise ValueError(f"unknown strategy variant {variant!r}")
    if extra:
        raise ValueError(f"unexpected strategy keys {sorted(extra)}")
    return EveryFrame()
