"""Actor-critic training with n-step returns and parallel workers.

Workers collect short rollouts against a parameter snapshot and apply the
resulting gradient batch to a shared store (Hogwild-style, staleness
bounded by one rollout).  With a single worker the whole run is
bit-reproducible from the seed.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .minipong import MiniPong
from .rngstream import (
    DOMAIN_INIT,
    DOMAIN_WORKER_ACT,
    DOMAIN_WORKER_ENV,
    DOMAIN_WORKER_NOISE,
    rng_stream,
)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    n_steps: int = 20
    entropy_coeff: float = 0.01
    value_coeff: float = 0.5
    learning_rate: float = 7e-4
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    grad_clip: float = 40.0  # global-norm clip; 0 disables
    workers: int = 4
    total_steps: int = 2_000_000
    seed: int = 0
    plateau_target: float = 0.9
    plateau_episodes: int = 20
    checkpoint_every_steps: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.n_steps < 1 or self.workers < 1 or self.total_steps < 0:
            raise ValueError("n_steps/workers must be >= 1, total_steps >= 0")


@dataclass
class Trajectory:
    frames: np.ndarray        # (T, H, W) float32
    actions: np.ndarray       # (T,) int
    rewards: np.ndarray       # (T,) float
    values: np.ndarray        # (T,) float, critic estimates at collection time
    log_probs: np.ndarray     # (T,) float
    bootstrap_value: float    # 0 when terminal
    terminal: bool

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("trajectory must be non-empty")
        if self.terminal and self.bootstrap_value != 0.0:
            raise ValueError("terminal trajectory must have bootstrap 0")


def n_step_returns(rewards, bootstrap: float, gamma: float) -> np.ndarray:
    """Discounted returns R_t = r_t + gamma * R_{t+1}, seeded by the bootstrap."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("rewards must be non-empty")
    out = np.empty_like(rewards)
    acc = float(bootstrap)
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _loss_terms(logits, values, actions, returns, advantages, config: TrainConfig):
    """Scalar loss pieces given head outputs; advantages enter as constants."""
    probs = nn.softmax(np.asarray(logits, dtype=np.float64))
    idx = np.arange(len(actions))
    logp = np.log(np.maximum(probs[idx, actions], nn.CE_FLOOR))
    ent = nn.entropy(probs)
    policy_term = -float(np.sum(logp * advantages))
    value_term = config.value_coeff * float(np.sum((returns - np.asarray(values, dtype=np.float64)) ** 2))
    entropy_term = -config.entropy_coeff * float(np.sum(ent))
    return policy_term, value_term, entropy_term, probs, ent


def a3c_loss_value(params, arch, trajectory: Trajectory, config: TrainConfig, advantages) -> float:
    """Loss with frozen advantages; the finite-difference oracle target."""
    out = nn.forward(params, arch, trajectory.frames)
    returns = n_step_returns(trajectory.rewards, trajectory.bootstrap_value, config.gamma)
    p, v, e, _, _ = _loss_terms(out.logits, out.value, trajectory.actions, returns, advantages, config)
    return p + v + e


def a3c_loss(params, arch, trajectory: Trajectory, config: TrainConfig):
    """Rollout loss and parameter gradients.

    loss = sum_t [ -log pi(a_t|x_t) * A_t + c_v (R_t - V_t)^2 - c_e H(pi_t) ]
    with A_t = R_t - V_t held constant in the policy term.
    """
    xb, _ = nn._as_batch(trajectory.frames, arch)
    logits, values, cache = nn._forward_cached(params, arch, xb)
    returns = n_step_returns(trajectory.rewards, trajectory.bootstrap_value, config.gamma)
    advantages = returns - np.asarray(values, dtype=np.float64)
    p_term, v_term, e_term, probs, ent = _loss_terms(
        logits, values, trajectory.actions, returns, advantages, config
    )
    loss = p_term + v_term + e_term

    t = len(trajectory.actions)
    onehot = np.zeros((t, arch.n_actions))
    onehot[np.arange(t), trajectory.actions] = 1.0
    logp_full = np.log(np.maximum(probs, nn.CE_FLOOR))
    dlogits = advantages[:, None] * (probs - onehot)
    dlogits += config.entropy_coeff * probs * (logp_full + ent[:, None])
    dvalue = 2.0 * config.value_coeff * (np.asarray(values, dtype=np.float64) - returns)
    if not (np.isfinite(loss) and np.all(np.isfinite(dlogits)) and np.all(np.isfinite(dvalue))):
        raise FloatingPointError("non-finite loss terms; aborting update")
    grads, _ = nn._backward(params, arch, cache, dlogits, dvalue)
    return loss, grads


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale all gradients down so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def act(params, arch, frame, rng: np.random.Generator, mode: str = "sample", k: int = 7) -> int:
    """Draw an action: 'sample' once, or 'mode_of_k' (most frequent of k draws)."""
    out = nn.forward(params, arch, frame)
    p = nn.softmax(out.logits).astype(np.float64)
    p /= p.sum()
    if mode == "sample":
        return int(rng.choice(arch.n_actions, p=p))
    if mode == "mode_of_k":
        draws = rng.choice(arch.n_actions, size=k, p=p)
        return int(np.bincount(draws, minlength=arch.n_actions).argmax())
    raise ValueError(f"unknown act mode {mode!r}")


def sample_action(logits, rng: np.random.Generator) -> tuple[int, float]:
    p = nn.softmax(np.asarray(logits, dtype=np.float64))
    p /= p.sum()
    a = int(rng.choice(len(p), p=p))
    return a, float(np.log(max(p[a], nn.CE_FLOOR)))


class ParamStore:
    """Shared parameters: consistent snapshots, serialized atomic updates."""

    def __init__(self, params: dict, config: TrainConfig):
        self._lock = threading.Lock()
        self._params = dict(params)
        self._opt_state = nn.rmsprop_init(params)
        self._config = config
        self.updates = 0

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._params)

    def apply(self, grads: dict) -> None:
        cfg = self._config
        with self._lock:
            self._params, self._opt_state = nn.rmsprop_step(
                self._params,
                grads,
                self._opt_state,
                lr=cfg.learning_rate,
                decay=cfg.rmsprop_decay,
                eps=cfg.rmsprop_eps,
            )
            self.updates += 1


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    reward: float
    score_agent: int
    score_opponent: int
    wall_ms: float
    rel_score: float
    total_steps: int


@dataclass
class TrainResult:
    params: dict
    steps: int
    episodes: int
    converged: bool
    history: list[EpisodeRecord] = field(default_factory=list)


class _Shared:
    def __init__(self, config: TrainConfig, env_config):
        self.lock = threading.Lock()
        self.stop = threading.Event()
        self.steps = 0
        self.episodes = 0
        self.converged = False
        self.recent = []
        self.history: list[EpisodeRecord] = []
        self.config = config
        self.env_config = env_config
        self.metrics_fh = None
        self.error: BaseException | None = None

    def add_steps(self, n: int) -> None:
        with self.lock:
            self.steps += n
            if self.steps >= self.config.total_steps:
                self.stop.set()

    def record_episode(self, steps, reward, agent, opponent, wall_ms) -> None:
        cfg = self.config
        with self.lock:
            rel = (agent - opponent) / self.env_config.game_point
            rec = EpisodeRecord(
                episode=self.episodes,
                steps=steps,
                reward=reward,
                score_agent=agent,
                score_opponent=opponent,
                wall_ms=wall_ms,
                rel_score=rel,
                total_steps=self.steps,
            )
            self.episodes += 1
            self.history.append(rec)
            if self.metrics_fh is not None:
                line = json.dumps(
                    {
                        "episode": rec.episode,
                        "steps": rec.steps,
                        "reward": rec.reward,
                        "score_agent": rec.score_agent,
                        "score_opponent": rec.score_opponent,
                        "wall_ms": round(rec.wall_ms, 3),
                    },
                    sort_keys=True,
                )
                self.metrics_fh.write(line + "\n")
            self.recent.append(rel)
            if len(self.recent) > cfg.plateau_episodes:
                self.recent.pop(0)
            if (
                len(self.recent) == cfg.plateau_episodes
                and float(np.mean(self.recent)) >= cfg.plateau_target
            ):
                self.converged = True
                self.stop.set()


def _worker(worker_id: int, env: MiniPong, arch, store: ParamStore, shared: _Shared,
            checkpoint_cb=None, frame_transform=None):
    cfg = shared.config
    act_rng = rng_stream(cfg.seed, DOMAIN_WORKER_ACT, worker_id)
    env_seed_rng = rng_stream(cfg.seed, DOMAIN_WORKER_ENV, worker_id)
    transform_rng = rng_stream(cfg.seed, DOMAIN_WORKER_NOISE, worker_id)
    state = env.reset(int(env_seed_rng.integers(2**63)))
    raw = env.render(state).image
    ep_steps = 0
    ep_reward = 0.0
    ep_start = time.perf_counter()
    next_checkpoint = cfg.checkpoint_every_steps

    while not shared.stop.is_set():
        snapshot = store.snapshot()
        # what the learner sees: the rendered frame, possibly perturbed
        # against the snapshot it is currently acting with
        seen = raw if frame_transform is None else frame_transform(snapshot, raw, transform_rng)
        frames, actions, rewards, values, logps = [], [], [], [], []
        terminal = False
        for _ in range(cfg.n_steps):
            out = nn.forward(snapshot, arch, seen)
            a, logp = sample_action(out.logits, act_rng)
            new_state, r, done = env.step(state, a)
            frames.append(seen)
            actions.append(a)
            rewards.append(float(r))
            values.append(float(out.value))
            logps.append(logp)
            ep_steps += 1
            ep_reward += r
            state = new_state
            raw = env.render(state).image
            if done:
                terminal = True
                wall_ms = (time.perf_counter() - ep_start) * 1000.0
                shared.record_episode(
                    ep_steps, ep_reward, state.agent_score, state.opponent_score, wall_ms
                )
                state = env.reset(int(env_seed_rng.integers(2**63)))
                raw = env.render(state).image
                ep_steps = 0
                ep_reward = 0.0
                ep_start = time.perf_counter()
                break
            seen = raw if frame_transform is None else frame_transform(snapshot, raw, transform_rng)
        shared.add_steps(len(actions))
        bootstrap = 0.0 if terminal else float(nn.forward(snapshot, arch, seen).value)
        traj = Trajectory(
            frames=np.stack(frames),
            actions=np.asarray(actions),
            rewards=np.asarray(rewards),
            values=np.asarray(values),
            log_probs=np.asarray(logps),
            bootstrap_value=bootstrap,
            terminal=terminal,
        )
        loss, grads = a3c_loss(snapshot, arch, traj, cfg)
        store.apply(clip_gradients(grads, cfg.grad_clip))
        if checkpoint_cb is not None and cfg.checkpoint_every_steps > 0:
            with shared.lock:
                due = shared.steps >= next_checkpoint
            if due:
                checkpoint_cb(store.snapshot(), shared.steps)
                next_checkpoint += cfg.checkpoint_every_steps


def train(
    config: TrainConfig,
    env_factory,
    arch,
    initial_params: dict | None = None,
    metrics_path=None,
    checkpoint_cb=None,
    frame_transform=None,
) -> TrainResult:
    """Run A3C until the step budget or the reward plateau, whichever first.

    env_factory() must build a fresh MiniPong per worker.  checkpoint_cb, if
    given, is called as checkpoint_cb(params, step) at the configured cadence.
    frame_transform(snapshot, image, rng) lets callers perturb every frame the
    learner sees (the adversarial re-training protocol).
    """
    probe_env = env_factory()
    shared = _Shared(config, probe_env.config)
    if initial_params is None:
        initial_params = nn.init_params(arch, rng_stream(config.seed, DOMAIN_INIT))
    store = ParamStore(initial_params, config)

    if metrics_path is not None:
        shared.metrics_fh = open(metrics_path, "w")
    try:
        if config.total_steps > 0:
            if config.workers == 1:
                _worker(0, probe_env, arch, store, shared, checkpoint_cb, frame_transform)
            else:
                def run(wid, wenv):
                    try:
                        _worker(wid, wenv, arch, store, shared, checkpoint_cb, frame_transform)
                    except BaseException as exc:  # noqa: BLE001 - propagated below
                        shared.error = exc
                        shared.stop.set()

                threads = [
                    threading.Thread(target=run, args=(wid, env_factory() if wid else probe_env))
                    for wid in range(config.workers)
                ]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
                if shared.error is not None:
                    raise RuntimeError("training worker failed") from shared.error
    finally:
        if shared.metrics_fh is not None:
            shared.metrics_fh.close()
            shared.metrics_fh = None

    return TrainResult(
        params=store.snapshot(),
        steps=shared.steps,
        episodes=shared.episodes,
        converged=shared.converged,
        history=shared.history,
    )
