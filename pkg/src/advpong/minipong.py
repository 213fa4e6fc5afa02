"""Deterministic mini-Pong with a 6-action interface.

The court is the unit square; y grows downward (same orientation as frame
rows).  The agent guards the right edge, a scripted opponent (tracks the
ball with a capped speed) guards the left.  Physics keep the ball speed
constant: the outgoing angle of a return is set by where the ball hits the
paddle, so aimed edge hits are the only way to beat the tracking opponent.

Six discrete actions map onto three effects (noop / up / down) through a
fixed table, mirroring the duplicated action set of the Atari original.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .rngstream import DOMAIN_SERVE, rng_stream

N_ACTIONS = 6


class SemanticAction(enum.Enum):
    NOOP = "noop"
    UP = "up"
    DOWN = "down"


# Raw action id -> effect.  0/1 do nothing, 2/4 move up, 3/5 move down.
SEMANTIC_TABLE: dict[int, SemanticAction] = {
    0: SemanticAction.NOOP,
    1: SemanticAction.NOOP,
    2: SemanticAction.UP,
    3: SemanticAction.DOWN,
    4: SemanticAction.UP,
    5: SemanticAction.DOWN,
}


def semantic_map(action: int) -> SemanticAction:
    """Collapse a raw action id onto its environment effect."""
    if action not in SEMANTIC_TABLE:
        raise ValueError(f"invalid action id {action!r}; expected 0..{N_ACTIONS - 1}")
    return SEMANTIC_TABLE[action]


@dataclass(frozen=True)
class PongConfig:
    # frame
    width: int = 42
    height: int = 42
    # episode
    game_point: int = 5
    max_steps: int = 3000
    # geometry (court units; court is [0,1] x [0,1])
    ball_radius: float = 0.02
    paddle_margin: float = 0.05        # x distance of each paddle face from its edge
    paddle_depth: float = 0.025        # rendered paddle thickness
    agent_half_height: float = 0.10
    opponent_half_height: float = 0.10
    # speeds (court units per tick)
    ball_speed: float = 0.04
    agent_speed: float = 0.04
    opponent_speed: float = 0.014
    # angles (radians)
    serve_angle_min: float = math.radians(8.0)
    serve_angle_max: float = math.radians(18.0)
    return_angle_max: float = math.radians(60.0)
    return_angle_min: float = math.radians(5.0)

    @property
    def opponent_face_x(self) -> float:
        return self.paddle_margin

    @property
    def agent_face_x(self) -> float:
        return 1.0 - self.paddle_margin


@dataclass(frozen=True)
class GameState:
    ball_pos: tuple[float, float]
    ball_vel: tuple[float, float]
    agent_paddle_y: float
    opponent_paddle_y: float
    agent_score: int
    opponent_score: int
    step_count: int
    rng_state: tuple[int, int]  # (seed, serves taken); serve angles derive from it


@dataclass
class Frame:
    """Grayscale frame; pixels is a flat row-major float array in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)


class EpisodeFinished(RuntimeError):
    """Raised when stepping a finished episode."""


class MiniPong:
    """Pure-functional environment: step/render take and return state."""

    def __init__(self, config: PongConfig | None = None):
        self.config = config or PongConfig()

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int) -> GameState:
        vel = self._serve_velocity(seed, 0)
        return GameState(
            ball_pos=(0.5, 0.5),
            ball_vel=vel,
            agent_paddle_y=0.5,
            opponent_paddle_y=0.5,
            agent_score=0,
            opponent_score=0,
            step_count=0,
            rng_state=(int(seed), 1),
        )

    def is_done(self, state: GameState) -> bool:
        cfg = self.config
        return (
            state.agent_score >= cfg.game_point
            or state.opponent_score >= cfg.game_point
            or state.step_count >= cfg.max_steps
        )

    def step(self, state: GameState, action: int) -> tuple[GameState, int, bool]:
        """Advance one tick.  Reward is +1/-1 on a point, else 0."""
        if self.is_done(state):
            raise EpisodeFinished("step() called on a finished episode")
        cfg = self.config
        effect = semantic_map(action)

        agent_y = state.agent_paddle_y
        if effect is SemanticAction.UP:
            agent_y -= cfg.agent_speed
        elif effect is SemanticAction.DOWN:
            agent_y += cfg.agent_speed
        agent_y = _clamp(agent_y, cfg.agent_half_height, 1.0 - cfg.agent_half_height)

        ball_x, ball_y = state.ball_pos
        delta = ball_y - state.opponent_paddle_y
        opp_y = state.opponent_paddle_y + _clamp(delta, -cfg.opponent_speed, cfg.opponent_speed)
        opp_y = _clamp(opp_y, cfg.opponent_half_height, 1.0 - cfg.opponent_half_height)

        vx, vy = state.ball_vel
        reward = 0
        agent_score = state.agent_score
        opponent_score = state.opponent_score
        seed, serves = state.rng_state

        agent_contact = cfg.agent_face_x - cfg.ball_radius
        opp_contact = cfg.opponent_face_x + cfg.ball_radius
        nx = ball_x + vx
        ny = ball_y + vy

        crossing_agent = vx > 0 and nx >= agent_contact
        crossing_opp = vx < 0 and nx <= opp_contact
        if crossing_agent or crossing_opp:
            plane = agent_contact if crossing_agent else opp_contact
            t = (plane - ball_x) / vx
            y_cross = _reflect(ball_y + vy * t, cfg.ball_radius, 1.0 - cfg.ball_radius)
            paddle_y = agent_y if crossing_agent else opp_y
            half_h = cfg.agent_half_height if crossing_agent else cfg.opponent_half_height
            reach = half_h + cfg.ball_radius
            if abs(y_cross - paddle_y) <= reach:
                direction = -1.0 if crossing_agent else 1.0
                vx, vy = self._return_velocity(y_cross - paddle_y, reach, vy, direction)
                ball = (plane, y_cross)
            else:
                if crossing_agent:
                    reward = -1
                    opponent_score += 1
                else:
                    reward = +1
                    agent_score += 1
                # re-serve: ball to center, both paddles recentered
                ball = (0.5, 0.5)
                agent_y = 0.5
                opp_y = 0.5
                vx, vy = self._serve_velocity(seed, serves)
                serves += 1
        else:
            if ny < cfg.ball_radius:
                ny = _reflect(ny, cfg.ball_radius, 1.0 - cfg.ball_radius)
                vy = abs(vy)
            elif ny > 1.0 - cfg.ball_radius:
                ny = _reflect(ny, cfg.ball_radius, 1.0 - cfg.ball_radius)
                vy = -abs(vy)
            ball = (nx, ny)

        new_state = GameState(
            ball_pos=ball,
            ball_vel=(vx, vy),
            agent_paddle_y=agent_y,
            opponent_paddle_y=opp_y,
            agent_score=agent_score,
            opponent_score=opponent_score,
            step_count=state.step_count + 1,
            rng_state=(seed, serves),
        )
        return new_state, reward, self.is_done(new_state)

    # -- rendering ----------------------------------------------------------

    def render(self, state: GameState) -> Frame:
        cfg = self.config
        img = np.zeros((cfg.height, cfg.width), dtype=np.float32)
        self._fill(
            img,
            cfg.opponent_face_x - cfg.paddle_depth,
            cfg.opponent_face_x,
            state.opponent_paddle_y - cfg.opponent_half_height,
            state.opponent_paddle_y + cfg.opponent_half_height,
        )
        self._fill(
            img,
            cfg.agent_face_x,
            cfg.agent_face_x + cfg.paddle_depth,
            state.agent_paddle_y - cfg.agent_half_height,
            state.agent_paddle_y + cfg.agent_half_height,
        )
        bx, by = state.ball_pos
        r = cfg.ball_radius
        self._fill(img, bx - r, bx + r, by - r, by + r)
        return Frame(width=cfg.width, height=cfg.height, pixels=img.reshape(-1))

    def _fill(self, img: np.ndarray, x0: float, x1: float, y0: float, y1: float) -> None:
        h, w = img.shape
        c0 = _clamp(int(math.floor(x0 * w)), 0, w - 1)
        c1 = _clamp(int(math.ceil(x1 * w)), c0 + 1, w)
        r0 = _clamp(int(math.floor(y0 * h)), 0, h - 1)
        r1 = _clamp(int(math.ceil(y1 * h)), r0 + 1, h)
        img[r0:r1, c0:c1] = 1.0

    # -- internals ----------------------------------------------------------

    def _serve_velocity(self, seed: int, serve_index: int) -> tuple[float, float]:
        cfg = self.config
        gen = rng_stream(seed, DOMAIN_SERVE, serve_index)
        angle = gen.uniform(cfg.serve_angle_min, cfg.serve_angle_max)
        angle_sign = 1.0 if gen.integers(0, 2) else -1.0
        direction = 1.0 if gen.integers(0, 2) else -1.0
        vx = cfg.ball_speed * math.cos(angle) * direction
        vy = cfg.ball_speed * math.sin(angle) * angle_sign
        return vx, vy

    def _return_velocity(
        self, offset: float, reach: float, incoming_vy: float, direction: float
    ) -> tuple[float, float]:
        cfg = self.config
        frac = _clamp(offset / reach, -1.0, 1.0)
        angle = frac * cfg.return_angle_max
        if abs(angle) < cfg.return_angle_min:
            # avoid flat rallies that never resolve
            sign = math.copysign(1.0, angle if angle != 0.0 else (incoming_vy or 1.0))
            angle = sign * cfg.return_angle_min
        vx = cfg.ball_speed * math.cos(angle) * direction
        vy = cfg.ball_speed * math.sin(angle)
        return vx, vy


def _clamp(value, lo, hi):
    return lo if value < lo else hi if value > hi else value


def _reflect(y: float, lo: float, hi: float) -> float:
    if y < lo:
        y = 2.0 * lo - y
    if y > hi:
        y = 2.0 * hi - y
    return _clamp(y, lo, hi)


def relative_score(state: GameState, config: PongConfig) -> float:
    """(agent - opponent) / game_point, the episode-level outcome in [-1, 1]."""
    return (state.agent_score - state.opponent_score) / config.game_point


def write_pgm(frame: Frame, path) -> None:
    """Dump a frame as binary PGM (P5, 8-bit, row-major)."""
    data = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
