"""Attack evaluation, re-training, and the comparison tables.

evaluate() runs frozen-parameter episodes under an attack configuration:
each frame gets a clean value estimate, the schedule decides whether to
inject, and the agent acts (stochastic sampling) on whatever frame
results.  retrain() continues training while every frame the learner
sees is perturbed.  The matrix/comparison helpers emit CSV summaries.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import a3c, nn, perturb, schedule
from .minipong import MiniPong, relative_score
from .rngstream import (
    DOMAIN_EVAL_ACT,
    DOMAIN_EVAL_ENV,
    DOMAIN_EVAL_NOISE,
    child_seed,
    rng_stream,
)


@dataclass
class AttackConfig:
    kind: str = "none"  # "none" | "fgsm" | "uniform"
    magnitude: float = 0.0
    strategy: schedule.InjectionStrategy = field(default_factory=schedule.EveryFrame)
    episodes: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "fgsm", "uniform"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")

    def label(self) -> str:
        if self.kind == "none":
            return "clean"
        return f"{self.kind}{self.magnitude:g}_{self.strategy.label()}"


@dataclass
class EpisodeMetrics:
    episode: int
    total_reward: float
    rel_score: float
    frames: int
    injections: int
    mean_value: float
    score_agent: int
    score_opponent: int
    wall_ms: float


def evaluate(
    params: dict,
    arch: nn.Architecture,
    env: MiniPong,
    attack: AttackConfig,
    trace: list | None = None,
    value_sink: list | None = None,
) -> tuple[list[EpisodeMetrics], schedule.InjectionLog]:
    """Frozen-parameter rollouts under an attack; parameters never change.

    The schedule's value gate always reads the clean frame's estimate.  If
    trace is a list, (gate_value, clean_frame, decision) triples are
    appended for every frame (instrumentation for tests); value_sink just
    collects the gate values (cheap, for threshold calibration).
    """
    metrics: list[EpisodeMetrics] = []
    log = schedule.InjectionLog()
    shape = (env.config.height, env.config.width)
    for ep in range(attack.episodes):
        act_rng = rng_stream(attack.seed, DOMAIN_EVAL_ACT, ep)
        noise_rng = rng_stream(attack.seed, DOMAIN_EVAL_NOISE, ep)
        state = env.reset(child_seed(attack.seed, DOMAIN_EVAL_ENV, ep))
        start = time.perf_counter()
        cached: perturb.Perturbation | None = None
        decisions: list[schedule.Decision] = []
        values: list[float] = []
        total_reward = 0.0
        done = False
        frame_index = 0
        while not done:
            clean = env.render(state).image
            out_clean = nn.forward(params, arch, clean)
            gate_value = float(out_clean.value)
            values.append(gate_value)
            if attack.kind == "none":
                decision = schedule.Decision.CLEAN
            else:
                decision = schedule.decide(
                    attack.strategy, frame_index, gate_value, cached is not None
                )
            decisions.append(decision)
            if value_sink is not None:
                value_sink.append(gate_value)
            if trace is not None:
                trace.append((gate_value, clean.copy(), decision))
            if decision is schedule.Decision.FRESH:
                if attack.kind == "fgsm":
                    cached = perturb.fgsm(params, arch, clean, attack.magnitude)
                else:
                    cached = perturb.uniform_noise(shape, attack.magnitude, noise_rng)
                acting = perturb.apply(clean, cached)
            elif decision is schedule.Decision.REUSE:
                acting = perturb.apply(clean, cached)
            else:
                acting = clean
            if acting is clean:
                logits = out_clean.logits
            else:
                logits = nn.forward(params, arch, acting).logits
            action, _ = a3c.sample_action(logits, act_rng)
            state, reward, done = env.step(state, action)
            total_reward += reward
            frame_index += 1
        wall_ms = (time.perf_counter() - start) * 1000.0
        log.add_episode(decisions)
        metrics.append(
            EpisodeMetrics(
                episode=ep,
                total_reward=total_reward,
                rel_score=relative_score(state, env.config),
                frames=frame_index,
                injections=sum(1 for d in decisions if d is not schedule.Decision.CLEAN),
                mean_value=float(np.mean(values)),
                score_agent=state.agent_score,
                score_opponent=state.opponent_score,
                wall_ms=wall_ms,
            )
        )
    return metrics, log


def mean_rel_score(metrics: list[EpisodeMetrics]) -> float:
    return float(np.mean([m.rel_score for m in metrics]))


def std_rel_score(metrics: list[EpisodeMetrics]) -> float:
    return float(np.std([m.rel_score for m in metrics]))


def mean_injections(metrics: list[EpisodeMetrics]) -> float:
    return float(np.mean([m.injections for m in metrics]))


# -- re-training --------------------------------------------------------------


def retrain(
    initial_params: dict,
    arch: nn.Architecture,
    noise_kind: str,
    magnitude: float,
    config: a3c.TrainConfig,
    env_factory,
    metrics_path=None,
) -> a3c.TrainResult:
    """Continue training with every learner frame perturbed.

    FGSM perturbations are recomputed against the worker's current
    parameter snapshot; magnitude 0 or kind "none" degrades to plain
    continued training.  The caller decides what to do when the plateau
    is not reached (result.converged is False; partial params returned).
    """
    if noise_kind not in ("none", "fgsm", "uniform"):
        raise ValueError(f"unknown noise kind {noise_kind!r}")

    if noise_kind == "none" or magnitude == 0.0:
        transform = None
    elif noise_kind == "fgsm":
        def transform(snapshot, image, rng):
            p = perturb.fgsm(snapshot, arch, image, magnitude)
            return perturb.apply(image, p)
    else:
        def transform(snapshot, image, rng):
            p = perturb.uniform_noise(image.shape, magnitude, rng)
            return perturb.apply(image, p)

    return a3c.train(
        config,
        env_factory,
        arch,
        initial_params=initial_params,
        metrics_path=metrics_path,
        frame_transform=transform,
    )


# -- calibration ---------------------------------------------------------------

EPSILON_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)


@dataclass
class SweepPoint:
    kind: str
    magnitude: float
    mean_rel_score: float
    std_rel_score: float
    mean_injections: float


def sweep_magnitudes(
    params, arch, env, kind: str, grid, episodes: int, seed: int
) -> list[SweepPoint]:
    points = []
    for mag in grid:
        m, _ = evaluate(
            params,
            arch,
            env,
            AttackConfig(kind=kind, magnitude=mag, strategy=schedule.EveryFrame(),
                         episodes=episodes, seed=seed),
        )
        points.append(
            SweepPoint(kind, float(mag), mean_rel_score(m), std_rel_score(m), mean_injections(m))
        )
    return points


def calibrate_epsilon(
    params, arch, env, episodes: int, seed: int, grid=EPSILON_GRID
) -> tuple[float, float, list[SweepPoint]]:
    """Smallest every-frame FGSM epsilon that halves the clean score.

    Returns (epsilon_star, clean_score, sweep table).  Falls back to the
    largest grid value (with the table showing why) if nothing qualifies.
    """
    clean_metrics, _ = evaluate(
        params, arch, env, AttackConfig(kind="none", episodes=episodes, seed=seed)
    )
    clean = mean_rel_score(clean_metrics)
    points = sweep_magnitudes(params, arch, env, "fgsm", grid, episodes, seed)
    for p in points:
        if p.mean_rel_score <= clean / 2.0:
            return p.magnitude, clean, points
    return points[-1].magnitude, clean, points


def collect_baseline_values(params, arch, env, episodes: int, seed: int) -> list[float]:
    """Clean-rollout value estimates, the input to threshold calibration."""
    values: list[float] = []
    evaluate(
        params, arch, env,
        AttackConfig(kind="none", episodes=episodes, seed=seed),
        value_sink=values,
    )
    return values


def calibrate_vf_to_budget(
    params,
    arch,
    env,
    epsilon: float,
    target_budget: float,
    episodes: int,
    seed: int,
    q_start: float = 0.9,
    tolerance: float = 0.15,
    max_iters: int = 8,
) -> tuple[float, float, float]:
    """Pick (tau, q) so the VF attack injects ~target_budget times/episode.

    The quantile is nudged until measured injections per episode land
    within the tolerance band; returns (tau, q, measured_budget).
    """
    values = collect_baseline_values(params, arch, env, episodes, seed)
    q = q_start
    best = None
    for _ in range(max_iters):
        q = min(max(q, 0.05), 0.995)
        tau = schedule.calibrate_threshold(values, q)
        m, _ = evaluate(
            params, arch, env,
            AttackConfig(kind="fgsm", magnitude=epsilon,
                         strategy=schedule.ValueThreshold(tau=tau),
                         episodes=episodes, seed=seed),
        )
        budget = mean_injections(m)
        if best is None or abs(budget - target_budget) < abs(best[2] - target_budget):
            best = (tau, q, budget)
        if target_budget > 0 and abs(budget - target_budget) / target_budget <= tolerance:
            return tau, q, budget
        if budget <= 0:
            q -= 0.1
            continue
        # injections scale with the fraction of frames above tau: move the
        # quantile by the measured ratio, damped
        ratio = budget / max(target_budget, 1e-9)
        q = 1.0 - (1.0 - q) / ratio
    return best


# -- tables --------------------------------------------------------------------


@dataclass
class ResilienceCell:
    retrain_condition: str
    eval_label: str
    eval_kind: str
    eval_magnitude: float
    episodes: int
    mean_rel_score: float
    std_rel_score: float
    mean_injections: float


def resilience_matrix(
    checkpoints: list[tuple[str, dict]],
    arch: nn.Architecture,
    env: MiniPong,
    eval_grid: list[AttackConfig],
) -> list[ResilienceCell]:
    """Full cross product of checkpoints x eval conditions."""
    cells = []
    for label, params in checkpoints:
        for attack in eval_grid:
            m, _ = evaluate(params, arch, env, attack)
            cells.append(
                ResilienceCell(
                    retrain_condition=label,
                    eval_label=attack.label(),
                    eval_kind=attack.kind,
                    eval_magnitude=attack.magnitude,
                    episodes=attack.episodes,
                    mean_rel_score=mean_rel_score(m),
                    std_rel_score=std_rel_score(m),
                    mean_injections=mean_injections(m),
                )
            )
    return cells


@dataclass
class StrategyRow:
    strategy_label: str
    episodes: int
    mean_rel_score: float
    std_rel_score: float
    mean_injections: float
    fraction_frames_injected: float


def compare_strategies(
    params,
    arch,
    env,
    epsilon: float,
    strategies: list[schedule.InjectionStrategy],
    episodes: int,
    seed: int,
) -> list[StrategyRow]:
    """One row per injection strategy, all at the same FGSM magnitude."""
    rows = []
    for strat in strategies:
        m, log = evaluate(
            params, arch, env,
            AttackConfig(kind="fgsm", magnitude=epsilon, strategy=strat,
                         episodes=episodes, seed=seed),
        )
        stats = schedule.injection_stats(log)
        rows.append(
            StrategyRow(
                strategy_label=strat.label(),
                episodes=episodes,
                mean_rel_score=mean_rel_score(m),
                std_rel_score=std_rel_score(m),
                mean_injections=stats["mean_injections_per_episode"],
                fraction_frames_injected=stats["fraction_frames_injected"],
            )
        )
    return rows


# -- serialization ---------------------------------------------------------------


def write_metrics_jsonl(
    metrics: list[EpisodeMetrics],
    path,
    log: schedule.InjectionLog | None = None,
    include_decisions: bool = False,
) -> None:
    """One JSON record per episode; per-frame decisions only on request."""
    with open(path, "w") as fh:
        for m in metrics:
            record = {
                "episode": m.episode,
                "steps": m.frames,
                "reward": m.total_reward,
                "score_agent": m.score_agent,
                "score_opponent": m.score_opponent,
                "wall_ms": round(m.wall_ms, 3),
                "rel_score": m.rel_score,
                "injections": m.injections,
                "mean_value": round(m.mean_value, 6),
            }
            if include_decisions and log is not None:
                record["decisions"] = [d.value for d in log.episodes[m.episode]]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_resilience_csv(cells: list[ResilienceCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["retrain_condition", "eval_label", "eval_kind", "eval_magnitude",
             "episodes", "mean_rel_score", "std_rel_score", "mean_injections"]
        )
        for c in cells:
            w.writerow(
                [c.retrain_condition, c.eval_label, c.eval_kind, f"{c.eval_magnitude:g}",
                 c.episodes, f"{c.mean_rel_score:.6f}", f"{c.std_rel_score:.6f}",
                 f"{c.mean_injections:.3f}"]
            )


def write_strategy_csv(rows: list[StrategyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["strategy", "episodes", "mean_rel_score", "std_rel_score",
             "mean_injections_per_episode", "fraction_frames_injected"]
        )
        for r in rows:
            w.writerow(
                [r.strategy_label, r.episodes, f"{r.mean_rel_score:.6f}",
                 f"{r.std_rel_score:.6f}", f"{r.mean_injections:.3f}",
                 f"{r.fraction_frames_injected:.6f}"]
            )


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "magnitude", "mean_rel_score", "std_rel_score", "mean_injections"])
        for p in points:
            w.writerow(
                [p.kind, f"{p.magnitude:g}", f"{p.mean_rel_score:.6f}",
                 f"{p.std_rel_score:.6f}", f"{p.mean_injections:.3f}"]
            )
