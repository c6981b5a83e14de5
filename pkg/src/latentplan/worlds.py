"""Desk-scale deterministic 2D environments rendered top-down.

A force-controlled point robot (training domain) and a steering-controlled
car with a different action space (transfer domain) move in a 1x1 m arena
among axis-aligned rectangular obstacles, colored distractor squares and a
goal disk whose color is randomized per task. Physics and rasterization are
pure functions of (state, action, config), so identical inputs give
byte-identical successors and images.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

ARENA = 1.0

COLOR_BACKGROUND = (28, 28, 32)
COLOR_OBSTACLE = (105, 105, 110)
COLOR_ROBOT = (245, 245, 245)
GOAL_PALETTE = (
    (225, 60, 60),    # red
    (60, 210, 80),    # green
    (70, 110, 235),   # blue
    (235, 220, 60),   # yellow
    (220, 70, 220),   # magenta
    (65, 215, 215),   # cyan
)
DISTRACTOR_PALETTE = (
    (150, 90, 200),   # purple
    (235, 140, 60),   # orange
    (120, 180, 140),  # moss
    (180, 140, 100),  # tan
)


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def inflate(self, m: float) -> "Rect":
        return Rect(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)

    def contains(self, x: float, y: float) -> bool:
        """Strict interior test; points on a face are outside."""
        return self.x0 < x < self.x1 and self.y0 < y < self.y1

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)


# fixed-obstacle layout: a central wall with room to pass on either side,
# plus a block in the upper-right corner region
FOVG_LAYOUT = (
    Rect(0.25, 0.45, 0.75, 0.55),
    Rect(0.68, 0.78, 0.92, 0.95),
)


@dataclass(frozen=True)
class WorldState:
    p: tuple               # robot position (m)
    v: tuple               # robot velocity vector (m/s)
    heading: float         # radians; meaningful for the car robot only
    goal: tuple
    goal_color: int
    obstacles: tuple = FOVG_LAYOUT
    distractors: tuple = ()   # ((x, y, color_index), ...)

    def with_robot(self, p, v=(0.0, 0.0), heading=None) -> "WorldState":
        return replace(self, p=tuple(p), v=tuple(v),
                       heading=self.heading if heading is None else heading)


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "point"            # point | car
    dt: float = 0.05
    mass: float = 1.0
    damping: float = 2.0
    force_scale: float = 2.0
    omega_max: float = 2.0 * math.pi
    max_steps: int = 50
    success_radius: float = 0.05
    image_size: int = 84
    layout_mode: str = "fovg"      # fovg | vovg
    robot_radius: float = 0.035
    goal_radius: float = 0.035
    distractor_size: float = 0.06
    min_start_goal_dist: float = 0.25

    @property
    def embodiment_dim(self) -> int:
        return 4 if self.kind == "point" else 5

    @property
    def action_dim(self) -> int:
        return 2


def embodiment(state: WorldState, config: EnvConfig) -> np.ndarray:
    """Proprioceptive vector fed alongside pixels: (p, v) for the point
    robot, (p, signed speed, cos/sin heading) for the car."""
    if config.kind == "point":
        return np.array([*state.p, *state.v], dtype=np.float64)
    c, s = math.cos(state.heading), math.sin(state.heading)
    speed = state.v[0] * c + state.v[1] * s
    return np.array([*state.p, speed, c, s], dtype=np.float64)


def success(state: WorldState, config: EnvConfig) -> bool:
    dx = state.p[0] - state.goal[0]
    dy = state.p[1] - state.goal[1]
    return math.hypot(dx, dy) <= config.success_radius


# ---------------------------------------------------------------------------
# physics
# ---------------------------------------------------------------------------

def _move_axis(pos, new, other, axis, rects, r):
    """Advance one coordinate, clipping motion at the first obstacle or
    arena face crossed; returns (coordinate, blocked)."""
    lo_b, hi_b = r, ARENA - r
    blocked = False
    if new < lo_b:
        new, blocked = lo_b, True
    elif new > hi_b:
        new, blocked = hi_b, True
    for rect in rects:
        if axis == 0:
            lo, hi, olo, ohi = rect.x0, rect.x1, rect.y0, rect.y1
        else:
            lo, hi, olo, ohi = rect.y0, rect.y1, rect.x0, rect.x1
        if not olo < other < ohi:
            continue
        if pos <= lo and new > lo:
            new, blocked = lo, True
        elif pos >= hi and new < hi:
            new, blocked = hi, True
        elif lo < new < hi:  # already inside the slab; push to nearest face
            new = lo if abs(new - lo) <= abs(new - hi) else hi
            blocked = True
    return new, blocked


def _resolve(p, new_p, v, obstacles, r):
    """Axis-separated clip-and-slide; the blocked axis loses its velocity."""
    rects = [o.inflate(r) for o in obstacles]
    x, bx = _move_axis(p[0], new_p[0], p[1], 0, rects, r)
    y, by = _move_axis(p[1], new_p[1], x, 1, rects, r)
    vx = 0.0 if bx else v[0]
    vy = 0.0 if by else v[1]
    return (x, y), (vx, vy)


def step_point(state: WorldState, action, config: EnvConfig) -> WorldState:
    """Semi-implicit Euler: v' = v + (a*F/m - c*v)*dt, p' = p + v'*dt."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    k = config.force_scale / config.mass
    vx = state.v[0] + (a[0] * k - config.damping * state.v[0]) * config.dt
    vy = state.v[1] + (a[1] * k - config.damping * state.v[1]) * config.dt
    new_p = (state.p[0] + vx * config.dt, state.p[1] + vy * config.dt)
    p, v = _resolve(state.p, new_p, (vx, vy), state.obstacles, config.robot_radius)
    return replace(state, p=p, v=v)


def step_car(state: WorldState, action, config: EnvConfig) -> WorldState:
    """Unicycle: action = (thrust, turn rate), speed along the heading."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    heading = state.heading + a[1] * config.omega_max * config.dt
    c, s = math.cos(heading), math.sin(heading)
    speed = state.v[0] * math.cos(state.heading) + state.v[1] * math.sin(state.heading)
    k = config.force_scale / config.mass
    speed = speed + (a[0] * k - config.damping * speed) * config.dt
    vx, vy = speed * c, speed * s
    new_p = (state.p[0] + vx * config.dt, state.p[1] + vy * config.dt)
    p, v = _resolve(state.p, new_p, (vx, vy), state.obstacles, config.robot_radius)
    # keep only the along-heading component so speed stays consistent
    speed = v[0] * c + v[1] * s
    return replace(state, p=p, v=(speed * c, speed * s), heading=heading)


def step(state: WorldState, action, config: EnvConfig) -> WorldState:
    return (step_point if config.kind == "point" else step_car)(state, action, config)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _pixel_grid(size: int):
    # row 0 is the top of the arena (y close to 1)
    xs = (np.arange(size) + 0.5) / size
    ys = 1.0 - (np.arange(size) + 0.5) / size
    return np.meshgrid(xs, ys)


_GRID_CACHE: dict = {}


def _grid(size: int):
    if size not in _GRID_CACHE:
        _GRID_CACHE[size] = _pixel_grid(size)
    return _GRID_CACHE[size]


def _paint_rect(img, rect: Rect, color, size):
    gx, gy = _grid(size)
    mask = (gx >= rect.x0) & (gx <= rect.x1) & (gy >= rect.y0) & (gy <= rect.y1)
    img[mask] = color


def _paint_disk(img, center, radius, color, size):
    gx, gy = _grid(size)
    dist = np.sqrt((gx - center[0]) ** 2 + (gy - center[1]) ** 2)
    # one-pixel soft edge keeps sub-pixel motion visible to the encoder
    alpha = np.clip((radius - dist) * size + 0.5, 0.0, 1.0)[..., None]
    img[:] = img * (1.0 - alpha) + np.asarray(color, dtype=np.float64) * alpha


def render(state: WorldState, config: EnvConfig) -> np.ndarray:
    """Top-down RGB view (size, size, 3) uint8; pure function of state."""
    size = config.image_size
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = COLOR_BACKGROUND
    for rect in state.obstacles:
        _paint_rect(img, rect, COLOR_OBSTACLE, size)
    half = config.distractor_size / 2.0
    for dx, dy, ci in state.distractors:
        _paint_rect(img, Rect(dx - half, dy - half, dx + half, dy + half),
                    DISTRACTOR_PALETTE[ci % len(DISTRACTOR_PALETTE)], size)
    _paint_disk(img, state.goal, config.goal_radius,
                GOAL_PALETTE[state.goal_color % len(GOAL_PALETTE)], size)
    _paint_disk(img, state.p, config.robot_radius, COLOR_ROBOT, size)
    return (img + 0.5).astype(np.uint8)


def goal_observation(state: WorldState, config: EnvConfig) -> np.ndarray:
    """The goal image: the same scene with the robot resting on the goal."""
    return render(state.with_robot(state.goal), config)


def write_ppm(img: np.ndarray, path) -> None:
    """Binary P6 dump for debugging."""
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# task sampling
# ---------------------------------------------------------------------------

class InfeasibleTask(RuntimeError):
    pass


def occupancy_grid(obstacles, margin: float, resolution: int) -> np.ndarray:
    """Boolean blocked-cell grid over the arena; cells whose center is
    within ``margin`` of an obstacle (or the wall) are blocked."""
    xs = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    blocked = (gx < margin) | (gx > ARENA - margin) | \
              (gy < margin) | (gy > ARENA - margin)
    for o in obstacles:
        r = o.inflate(margin)
        blocked |= (gx > r.x0) & (gx < r.x1) & (gy > r.y0) & (gy < r.y1)
    return blocked


def cell_of(p, resolution: int) -> tuple:
    i = min(int(p[0] * resolution), resolution - 1)
    j = min(int(p[1] * resolution), resolution - 1)
    return max(i, 0), max(j, 0)


def path_exists(obstacles, start, goal, margin: float, resolution: int = 48) -> bool:
    """8-connected reachability on the occupancy grid."""
    blocked = occupancy_grid(obstacles, margin, resolution)
    a, b = cell_of(start, resolution), cell_of(goal, resolution)
    if blocked[a] or blocked[b]:
        return False
    seen = np.zeros_like(blocked)
    seen[a] = True
    queue = deque([a])
    while queue:
        i, j = queue.popleft()
        if (i, j) == b:
            return True
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if 0 <= ni < resolution and 0 <= nj < resolution \
                        and not seen[ni, nj] and not blocked[ni, nj]:
                    seen[ni, nj] = True
                    queue.append((ni, nj))
    return False


def free_point(rng, obstacles, margin: float, attempts: int = 200):
    for _ in range(attempts):
        x, y = rng.uniform(margin, ARENA - margin, size=2)
        if not any(o.inflate(margin).contains(x, y) for o in obstacles):
            return (float(x), float(y))
    raise InfeasibleTask("could not place a free point in the layout")


def sample_layout(rng, config: EnvConfig, attempts: int = 50) -> tuple:
    """Random obstacle layout for the varying-obstacles regime; guaranteed
    to leave the arena connected (checked between the corners)."""
    probes = [(0.08, 0.08), (0.92, 0.08), (0.08, 0.92), (0.92, 0.92)]
    for _ in range(attempts):
        rects = []
        for _ in range(int(rng.integers(1, 4))):
            w = float(rng.uniform(0.12, 0.45))
            h = float(rng.uniform(0.08, 0.25))
            if rng.uniform() < 0.5:
                w, h = h, w
            x0 = float(rng.uniform(0.05, ARENA - 0.05 - w))
            y0 = float(rng.uniform(0.05, ARENA - 0.05 - h))
            rects.append(Rect(x0, y0, x0 + w, y0 + h))
        layout = tuple(rects)
        m = config.robot_radius + 0.01
        ok = all(not any(r.inflate(m).contains(*p) for r in layout) for p in probes)
        if ok and all(path_exists(layout, probes[0], p, m) for p in probes[1:]):
            return layout
    raise InfeasibleTask("no feasible layout found")


def sample_task(mode: str, rng: np.random.Generator, config: EnvConfig,
                layout: tuple | None = None, attempts: int = 100):
    """Draw a task: initial WorldState (goal included) plus its goal image.

    ``fovg`` keeps the fixed layout and varies goal/start/scene; ``vovg``
    also draws the obstacle layout. Feasibility is verified by grid search.
    """
    if mode not in ("fovg", "vovg"):
        raise ValueError(f"unknown generalization mode {mode!r}")
    if layout is None:
        layout = FOVG_LAYOUT if mode == "fovg" else sample_layout(rng, config)
    margin = config.robot_radius + 0.01
    for _ in range(attempts):
        start = free_point(rng, layout, margin)
        goal = free_point(rng, layout, margin)
        if math.dist(start, goal) < config.min_start_goal_dist:
            continue
        if not path_exists(layout, start, goal, margin):
            continue
        n_distract = int(rng.integers(0, 4))
        distractors = []
        while len(distractors) < n_distract:
            d = free_point(rng, layout, config.distractor_size)
            if math.dist(d, goal) > 0.12 and math.dist(d, start) > 0.12:
                distractors.append((d[0], d[1], int(rng.integers(len(DISTRACTOR_PALETTE)))))
        heading = float(rng.uniform(-math.pi, math.pi)) if config.kind == "car" else 0.0
        state = WorldState(p=start, v=(0.0, 0.0), heading=heading, goal=goal,
                           goal_color=int(rng.integers(len(GOAL_PALETTE))),
                           obstacles=layout, distractors=tuple(distractors))
        return state, goal_observation(state, config)
    raise InfeasibleTask(f"no feasible task after {attempts} attempts")


# ---------------------------------------------------------------------------
# layout files
# ---------------------------------------------------------------------------

def save_layout(path, obstacles) -> None:
    doc = {"arena": ARENA, "obstacles": [list(o.as_tuple()) for o in obstacles]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_layout(path) -> tuple:
    with open(path) as f:
        doc = json.load(f)
    return tuple(Rect(*o) for o in doc["obstacles"])
