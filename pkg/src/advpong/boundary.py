"""Action maps over the plane spanned by the attack direction and a random
orthogonal direction.

Grid inputs are frame + u*d1 + v*d2 fed to the network unclipped (clipping
would distort the geometry away from the origin; the attack path is the
place that clips).  Every cell has its own RNG stream keyed by (seed,
u-index, v-index), so changing the resolution never reshuffles the
sampling noise of existing cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn, perturb
from .minipong import SEMANTIC_TABLE, SemanticAction
from .rngstream import (
    DOMAIN_BOUNDARY_CELL,
    DOMAIN_BOUNDARY_DIR,
    DOMAIN_BOUNDARY_SCAN,
    child_seed,
    rng_stream,
)

SEMANTIC_IDS = {SemanticAction.NOOP: 0, SemanticAction.UP: 1, SemanticAction.DOWN: 2}
SEMANTIC_NAMES = {0: "noop", 1: "up", 2: "down"}

RAW_COLORS = {
    0: (31, 119, 180),
    1: (255, 127, 14),
    2: (44, 160, 44),
    3: (214, 39, 40),
    4: (148, 103, 189),
    5: (140, 86, 75),
}
SEMANTIC_COLORS = {0: (127, 127, 127), 1: (44, 160, 44), 2: (214, 39, 40)}
MARKER_COLOR = (0, 0, 255)


class ZeroGradientError(RuntimeError):
    """The FGSM perturbation vanished; the caller should pick another frame."""


@dataclass
class DirectionPair:
    d1: np.ndarray            # unit vector along the adversarial perturbation
    d2: np.ndarray            # random unit vector orthogonal to d1
    adversarial_u: float      # coordinate of frame+delta along d1 (v = 0)


@dataclass(frozen=True)
class GridAxes:
    u_min: float = -0.25
    u_max: float = 0.25
    u_cells: int = 101
    v_min: float = -0.25
    v_max: float = 0.25
    v_cells: int = 101

    def u_values(self) -> np.ndarray:
        return np.linspace(self.u_min, self.u_max, self.u_cells)

    def v_values(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.v_cells)


@dataclass
class ActionGrid:
    u_values: np.ndarray
    v_values: np.ndarray
    actions: np.ndarray       # (v_cells, u_cells) int
    semantic: bool
    origin_uv: tuple[float, float]
    adversarial_uv: tuple[float, float]


def directions(params, arch: nn.Architecture, frame, epsilon: float,
               rng: np.random.Generator) -> DirectionPair:
    """d1 along the FGSM perturbation, d2 random and Gram-Schmidt orthogonal."""
    pert = perturb.fgsm(params, arch, frame, epsilon)
    delta = pert.delta.reshape(-1).astype(np.float64)
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        raise ZeroGradientError(
            "FGSM perturbation is zero (vanishing input gradient); pick another frame"
        )
    d1 = delta / norm
    while True:
        r = rng.standard_normal(delta.size)
        r -= (r @ d1) * d1
        rnorm = float(np.linalg.norm(r))
        if rnorm > 1e-8:
            break
    return DirectionPair(d1=d1, d2=r / rnorm, adversarial_u=norm)


def _mode_action(probs: np.ndarray, rng: np.random.Generator, k: int, n_actions: int) -> int:
    draws = rng.choice(n_actions, size=k, p=probs)
    return int(np.bincount(draws, minlength=n_actions).argmax())


def _cell_probs(params, arch, frame, pair: DirectionPair, u_values, v_values,
                chunk: int = 1024) -> np.ndarray:
    """Softmax probabilities for every (v, u) cell, batched."""
    base = np.asarray(frame, dtype=np.float64).reshape(-1)
    uu, vv = np.meshgrid(u_values, v_values)          # (V, U)
    coords = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    probs = np.empty((coords.shape[0], arch.n_actions), dtype=np.float64)
    for lo in range(0, coords.shape[0], chunk):
        hi = min(lo + chunk, coords.shape[0])
        block = coords[lo:hi]
        inputs = base[None, :] + block[:, 0:1] * pair.d1[None, :] + block[:, 1:2] * pair.d2[None, :]
        inputs = inputs.reshape(-1, arch.height, arch.width).astype(np.float32)
        out = nn.forward(params, arch, inputs)
        p = nn.softmax(out.logits).astype(np.float64)
        probs[lo:hi] = p / p.sum(axis=1, keepdims=True)
    return probs.reshape(len(v_values), len(u_values), arch.n_actions)


def action_grid(params, arch: nn.Architecture, frame, pair: DirectionPair,
                axes: GridAxes, seed: int, k: int = 7) -> ActionGrid:
    """Mode of k policy samples at every grid point; ties -> lowest action id."""
    u_values = axes.u_values()
    v_values = axes.v_values()
    probs = _cell_probs(params, arch, frame, pair, u_values, v_values)
    actions = np.empty((len(v_values), len(u_values)), dtype=np.int64)
    for iv in range(len(v_values)):
        for iu in range(len(u_values)):
            cell_rng = rng_stream(seed, DOMAIN_BOUNDARY_CELL, iu, iv)
            actions[iv, iu] = _mode_action(probs[iv, iu], cell_rng, k, arch.n_actions)
    return ActionGrid(
        u_values=u_values,
        v_values=v_values,
        actions=actions,
        semantic=False,
        origin_uv=(0.0, 0.0),
        adversarial_uv=(pair.adversarial_u, 0.0),
    )


def semantic_grid(grid: ActionGrid) -> ActionGrid:
    """Collapse duplicated raw actions onto their noop/up/down classes."""
    if grid.semantic:
        raise ValueError("grid is already semantic")
    lut = np.array([SEMANTIC_IDS[SEMANTIC_TABLE[a]] for a in range(6)], dtype=np.int64)
    return ActionGrid(
        u_values=grid.u_values.copy(),
        v_values=grid.v_values.copy(),
        actions=lut[grid.actions],
        semantic=True,
        origin_uv=grid.origin_uv,
        adversarial_uv=grid.adversarial_uv,
    )


def nearest_cell(values: np.ndarray, coord: float) -> int:
    return int(np.argmin(np.abs(values - coord)))


def region_count(actions: np.ndarray) -> int:
    """Number of 4-connected constant-action regions."""
    seen = np.zeros(actions.shape, dtype=bool)
    count = 0
    rows, cols = actions.shape
    for r in range(rows):
        for c in range(cols):
            if seen[r, c]:
                continue
            count += 1
            stack = [(r, c)]
            seen[r, c] = True
            label = actions[r, c]
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < rows and 0 <= nx < cols and not seen[ny, nx] \
                            and actions[ny, nx] == label:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
    return count


# -- auto frame selection -----------------------------------------------------


@dataclass
class BoundarySelection:
    frame: np.ndarray
    frame_index: int
    pair: DirectionPair
    origin_action: int
    adversarial_action: int


def find_attack_frame(params, arch, env, epsilon: float, seed: int, axes: GridAxes,
                      k: int = 7, max_frames: int = 2000) -> BoundarySelection:
    """First frame of a clean episode stream where the attack flips the action.

    "Flips" is judged with the exact cell RNG protocol the grid will use, so
    the resulting map is guaranteed to show origin != adversarial cell.
    """
    from . import a3c  # local import to avoid a cycle

    u_values = axes.u_values()
    v_values = axes.v_values()
    iv0 = nearest_cell(v_values, 0.0)
    act_rng = rng_stream(seed, DOMAIN_BOUNDARY_SCAN)
    state = env.reset(child_seed(seed, DOMAIN_BOUNDARY_SCAN, 0))
    for frame_index in range(max_frames):
        if env.is_done(state):
            state = env.reset(child_seed(seed, DOMAIN_BOUNDARY_SCAN, 1 + frame_index))
        frame = env.render(state).image
        try:
            pair = directions(
                params, arch, frame, epsilon,
                rng_stream(seed, DOMAIN_BOUNDARY_DIR, frame_index),
            )
        except ZeroGradientError:
            pair = None
        if pair is not None and pair.adversarial_u <= axes.u_max:
            iu0 = nearest_cell(u_values, 0.0)
            iu_adv = nearest_cell(u_values, pair.adversarial_u)
            if iu_adv != iu0:
                base = frame.reshape(-1).astype(np.float64)
                sel = []
                for iu in (iu0, iu_adv):
                    x = (base + u_values[iu] * pair.d1 + v_values[iv0] * pair.d2)
                    out = nn.forward(params, arch, x.reshape(arch.height, arch.width).astype(np.float32))
                    p = nn.softmax(out.logits).astype(np.float64)
                    p /= p.sum()
                    sel.append(_mode_action(p, rng_stream(seed, DOMAIN_BOUNDARY_CELL, iu, iv0),
                                            k, arch.n_actions))
                if sel[0] != sel[1]:
                    return BoundarySelection(
                        frame=frame.copy(),
                        frame_index=frame_index,
                        pair=pair,
                        origin_action=sel[0],
                        adversarial_action=sel[1],
                    )
        action = a3c.act(params, arch, frame, act_rng, mode="sample")
        state, _, _ = env.step(state, action)
    raise ZeroGradientError(
        f"no action-flipping frame found within {max_frames} frames; "
        "try a different seed or epsilon"
    )


# -- serialization ------------------------------------------------------------


def write_grid_csv(grid: ActionGrid, path) -> None:
    """Data rows u,v,action; grid metadata in leading '#' comment lines."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# semantic={int(grid.semantic)}\n")
        fh.write(f"# origin_u={grid.origin_uv[0]!r} origin_v={grid.origin_uv[1]!r}\n")
        fh.write(
            f"# adversarial_u={grid.adversarial_uv[0]!r} adversarial_v={grid.adversarial_uv[1]!r}\n"
        )
        w = csv.writer(fh)
        w.writerow(["u", "v", "action"])
        for iv, v in enumerate(grid.v_values):
            for iu, u in enumerate(grid.u_values):
                w.writerow([repr(float(u)), repr(float(v)), int(grid.actions[iv, iu])])


def read_grid_csv(path) -> ActionGrid:
    semantic = False
    origin = (0.0, 0.0)
    adversarial = (0.0, 0.0)
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                fields = dict(
                    part.split("=", 1) for part in line[1:].strip().split(" ") if "=" in part
                )
                if "semantic" in fields:
                    semantic = bool(int(fields["semantic"]))
                if "origin_u" in fields:
                    origin = (float(fields["origin_u"]), float(fields["origin_v"]))
                if "adversarial_u" in fields:
                    adversarial = (float(fields["adversarial_u"]), float(fields["adversarial_v"]))
                continue
            rows.append(line)
    reader = csv.reader(rows)
    header = next(reader)
    if header != ["u", "v", "action"]:
        raise ValueError(f"unexpected grid CSV header {header}")
    us, vs, actions = [], [], []
    for u, v, a in reader:
        us.append(float(u))
        vs.append(float(v))
        actions.append(int(a))
    u_values = np.array(sorted(set(us)))
    v_values = np.array(sorted(set(vs)))
    grid = np.asarray(actions, dtype=np.int64).reshape(len(v_values), len(u_values))
    return ActionGrid(
        u_values=u_values,
        v_values=v_values,
        actions=grid,
        semantic=semantic,
        origin_uv=origin,
        adversarial_uv=adversarial,
    )


def _paint_markers(rgb: np.ndarray, grid: ActionGrid) -> None:
    rows, cols = rgb.shape[:2]

    def paint(r, c):
        if 0 <= r < rows and 0 <= c < cols:
            rgb[r, c] = MARKER_COLOR

    r0 = nearest_cell(grid.v_values, grid.origin_uv[1])
    c0 = nearest_cell(grid.u_values, grid.origin_uv[0])
    for d in range(-2, 3):
        paint(r0 + d, c0 + d)
        paint(r0 + d, c0 - d)
    ra = nearest_cell(grid.v_values, grid.adversarial_uv[1])
    ca = nearest_cell(grid.u_values, grid.adversarial_uv[0])
    for d in range(-2, 3):
        paint(ra - 2, ca + d)
        paint(ra + 2, ca + d)
        paint(ra + d, ca - 2)
        paint(ra + d, ca + 2)


def render_grid_ppm(grid: ActionGrid, path) -> None:
    """Binary PPM (P6); one pixel per cell, markers overdrawn in blue."""
    table = SEMANTIC_COLORS if grid.semantic else RAW_COLORS
    lut = np.array([table[i] for i in sorted(table)], dtype=np.uint8)
    rgb = lut[grid.actions]
    _paint_markers(rgb, grid)
    header = f"P6\n{grid.actions.shape[1]} {grid.actions.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rgb).tobytes())


def render_grid_svg(grid: ActionGrid, path, cell_px: int = 4) -> None:
    table = SEMANTIC_COLORS if grid.semantic else RAW_COLORS
    rows, cols = grid.actions.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell_px}" '
        f'height="{rows * cell_px}" shape-rendering="crispEdges">'
    ]
    for iv in range(rows):
        for iu in range(cols):
            r, g, b = table[int(grid.actions[iv, iu])]
            parts.append(
                f'<rect x="{iu * cell_px}" y="{iv * cell_px}" width="{cell_px}" '
                f'height="{cell_px}" fill="rgb({r},{g},{b})"/>'
            )
    r0 = nearest_cell(grid.v_values, grid.origin_uv[1])
    c0 = nearest_cell(grid.u_values, grid.origin_uv[0])
    ra = nearest_cell(grid.v_values, grid.adversarial_uv[1])
    ca = nearest_cell(grid.u_values, grid.adversarial_uv[0])
    m = MARKER_COLOR
    parts.append(
        f'<text x="{(c0 + 0.5) * cell_px}" y="{(r0 + 0.9) * cell_px}" font-size="{3 * cell_px}" '
        f'text-anchor="middle" fill="rgb({m[0]},{m[1]},{m[2]})">x</text>'
    )
    parts.append(
        f'<rect x="{(ca - 1) * cell_px}" y="{(ra - 1) * cell_px}" width="{3 * cell_px}" '
        f'height="{3 * cell_px}" fill="none" stroke="rgb({m[0]},{m[1]},{m[2]})" '
        f'stroke-width="{max(1, cell_px // 2)}"/>'
    )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def write_legend_csv(path) -> None:
    """Color table for both raw and semantic actions."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["action", "color", "semantic"])
        for a in range(6):
            r, g, b = RAW_COLORS[a]
            w.writerow([a, f"#{r:02x}{g:02x}{b:02x}", SEMANTIC_TABLE[a].value])
        for sid in sorted(SEMANTIC_COLORS):
            r, g, b = SEMANTIC_COLORS[sid]
            w.writerow([f"s{sid}", f"#{r:02x}{g:02x}{b:02x}", SEMANTIC_NAMES[sid]])
