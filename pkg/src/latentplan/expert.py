"""Demonstration generation: grid-search path planning plus a waypoint
tracking controller, with hindsight re-rendering of failed rollouts.

The expert is deliberately imperfect (its actions carry injected noise) so
that a fraction of rollouts miss the goal and exercise the hindsight path:
a failed rollout is re-rendered with the goal moved to the position the
robot actually reached, which turns it into a valid demonstration.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

import numpy as np

from . import worlds
from .data import DemoDataset, Trajectory
from .worlds import EnvConfig, WorldState

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ExpertConfig:
    grid_resolution: int = 48
    waypoint_tolerance: float = 0.06
    cruise_speed: float = 0.9
    approach_gain: float = 4.0     # slows the final docking leg
    velocity_gain: float = 2.5
    action_noise: float = 0.1      # zero-mean uniform perturbation


class NoPath(RuntimeError):
    pass


def _neighbors(i, j, n):
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            ni, nj = i + di, j + dj
            if 0 <= ni < n and 0 <= nj < n:
                yield ni, nj, SQRT2 if di and dj else 1.0


def distance_field(obstacles, source, margin: float, resolution: int) -> np.ndarray:
    """Geodesic cell distances (meters) from ``source`` over the inflated
    occupancy grid; blocked or unreachable cells are +inf."""
    blocked = worlds.occupancy_grid(obstacles, margin, resolution)
    dist = np.full((resolution, resolution), np.inf)
    start = worlds.cell_of(source, resolution)
    if blocked[start]:
        return dist
    dist[start] = 0.0
    heap = [(0.0, start)]
    cell = 1.0 / resolution
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if d > dist[i, j]:
            continue
        for ni, nj, w in _neighbors(i, j, resolution):
            if blocked[ni, nj]:
                continue
            nd = d + w * cell
            if nd < dist[ni, nj]:
                dist[ni, nj] = nd
                heapq.heappush(heap, (nd, (ni, nj)))
    return dist


def shortest_path(obstacles, start, goal, margin: float,
                  resolution: int = 48) -> list:
    """8-connected A* on the inflated occupancy grid, then waypoint
    decimation (keep cells where the step direction changes)."""
    blocked = worlds.occupancy_grid(obstacles, margin, resolution)
    a = worlds.cell_of(start, resolution)
    b = worlds.cell_of(goal, resolution)
    if blocked[a] or blocked[b]:
        raise NoPath("start or goal cell is blocked")
    n = resolution

    def h(c):
        di, dj = abs(c[0] - b[0]), abs(c[1] - b[1])
        return (max(di, dj) - min(di, dj)) + SQRT2 * min(di, dj)

    g = {a: 0.0}
    came = {}
    heap = [(h(a), a)]
    seen = set()
    while heap:
        _, cur = heapq.heappop(heap)
        if cur == b:
            break
        if cur in seen:
            continue
        seen.add(cur)
        for ni, nj, w in _neighbors(*cur, n):
            if blocked[ni, nj]:
                continue
            nd = g[cur] + w
            if nd < g.get((ni, nj), math.inf):
                g[(ni, nj)] = nd
                came[(ni, nj)] = cur
                heapq.heappush(heap, (nd + h((ni, nj)), (ni, nj)))
    else:
        raise NoPath("no grid path from start to goal")

    cells = [b]
    while cells[-1] != a:
        cells.append(came[cells[-1]])
    cells.reverse()

    def center(c):
        return ((c[0] + 0.5) / n, (c[1] + 0.5) / n)

    waypoints = []
    for idx in range(1, len(cells) - 1):
        prev_d = (cells[idx][0] - cells[idx - 1][0], cells[idx][1] - cells[idx - 1][1])
        next_d = (cells[idx + 1][0] - cells[idx][0], cells[idx + 1][1] - cells[idx][1])
        if prev_d != next_d:
            waypoints.append(center(cells[idx]))
    waypoints.append(tuple(goal))
    return waypoints


def track_action(p, v, waypoints, wp_index, cfg: ExpertConfig):
    """Waypoint-following action and the (possibly advanced) waypoint index."""
    while wp_index < len(waypoints) - 1 and \
            math.dist(p, waypoints[wp_index]) < cfg.waypoint_tolerance:
        wp_index += 1
    target = waypoints[wp_index]
    dx, dy = target[0] - p[0], target[1] - p[1]
    dist = math.hypot(dx, dy)
    speed = min(cfg.cruise_speed, cfg.approach_gain * dist) if \
        wp_index == len(waypoints) - 1 else cfg.cruise_speed
    if dist > 1e-9:
        vdx, vdy = dx / dist * speed, dy / dist * speed
    else:
        vdx = vdy = 0.0
    # steady state of the point dynamics holds v == action, so command the
    # desired velocity plus a correction toward it
    ax = vdx + cfg.velocity_gain * (vdx - v[0])
    ay = vdy + cfg.velocity_gain * (vdy - v[1])
    return (max(-1.0, min(1.0, ax)), max(-1.0, min(1.0, ay))), wp_index


@dataclass
class Rollout:
    states: list            # T+1 world states
    frames: np.ndarray      # (T+1, S, S, 3) uint8
    actions: np.ndarray     # (T, 2) float32
    success: bool
    hindsight: bool = False


def rollout_expert(state: WorldState, env: EnvConfig, cfg: ExpertConfig,
                   rng: np.random.Generator) -> Rollout:
    """Track the grid path to the goal, recording frames, embodiment and
    actions; stops at success or the episode step limit."""
    margin = env.robot_radius + 0.005
    waypoints = shortest_path(state.obstacles, state.p, state.goal, margin,
                              cfg.grid_resolution)
    states = [state]
    frames = [worlds.render(state, env)]
    actions = []
    wp_index = 0
    ok = False
    for _ in range(env.max_steps):
        a, wp_index = track_action(state.p, state.v, waypoints, wp_index, cfg)
        if cfg.action_noise > 0:
            noise = rng.uniform(-cfg.action_noise, cfg.action_noise, size=2)
            a = (float(np.clip(a[0] + noise[0], -1, 1)),
                 float(np.clip(a[1] + noise[1], -1, 1)))
        state = worlds.step_point(state, a, env)
        actions.append(a)
        states.append(state)
        frames.append(worlds.render(state, env))
        if worlds.success(state, env):
            ok = True
            break
    return Rollout(states=states, frames=np.stack(frames),
                   actions=np.asarray(actions, dtype=np.float32), success=ok)


def hindsight_render(rollout: Rollout, env: EnvConfig) -> Rollout | None:
    """Re-render a failed rollout with the goal moved to the reached
    terminal position; states and actions are unchanged. Returns None when
    the terminal position is no valid goal (inside an obstacle margin)."""
    if rollout.success:
        return rollout
    terminal = rollout.states[-1].p
    margin = env.goal_radius * 0.5
    inside = any(o.inflate(margin).contains(*terminal)
                 for o in rollout.states[-1].obstacles)
    out_of_arena = not (margin <= terminal[0] <= worlds.ARENA - margin and
                        margin <= terminal[1] <= worlds.ARENA - margin)
    if inside or out_of_arena:
        return None
    states = [replace(s, goal=terminal) for s in rollout.states]
    frames = np.stack([worlds.render(s, env) for s in states])
    return Rollout(states=states, frames=frames, actions=rollout.actions,
                   success=True, hindsight=True)


def _to_trajectory(rollout: Rollout, env: EnvConfig) -> Trajectory:
    q = np.stack([worlds.embodiment(s, env) for s in rollout.states])
    s0 = rollout.states[0]
    return Trajectory(
        frames=rollout.frames,
        q=q.astype(np.float32),
        actions=rollout.actions,
        goal=s0.goal,
        goal_color=s0.goal_color,
        hindsight=rollout.hindsight,
        layout=tuple(o.as_tuple() for o in s0.obstacles),
        distractors=s0.distractors,
        heading0=s0.heading)


def build_dataset(mode: str, n_trajectories: int, seed: int, env: EnvConfig,
                  cfg: ExpertConfig | None = None) -> DemoDataset:
    """Generate tasks, roll out the expert, hindsight-render failures, and
    assemble a dataset whose every trajectory succeeds for its stored goal."""
    cfg = cfg or ExpertConfig()
    trajectories = []
    attempts = succeeded = 0
    task_index = 0
    while len(trajectories) < n_trajectories:
        rng = np.random.default_rng([seed, task_index])
        task_index += 1
        state, _ = worlds.sample_task(mode, rng, env)
        try:
            rollout = rollout_expert(state, env, cfg, rng)
        except NoPath:
            continue
        attempts += 1
        succeeded += int(rollout.success)
        if len(rollout.actions) < 1:
            continue
        rollout = hindsight_render(rollout, env)
        if rollout is None:
            continue
        trajectories.append(_to_trajectory(rollout, env))
    hindsight_count = sum(t.hindsight for t in trajectories)
    header = {
        "format_version": 1,
        "env": env.kind,
        "mode": mode,
        "image_size": env.image_size,
        "action_dim": env.action_dim,
        "embodiment_dim": env.embodiment_dim,
        "seed": seed,
        "success_radius": env.success_radius,
        "max_steps": env.max_steps,
        "expert_noise": cfg.action_noise,
        "expert_success_rate": succeeded / max(attempts, 1),
        "hindsight_fraction": hindsight_count / max(len(trajectories), 1),
    }
    return DemoDataset(header=header, trajectories=trajectories)


def verify_dataset(dataset: DemoDataset) -> dict:
    """Re-check every stored trajectory against the success predicate for
    its own stored goal (positions read back from the embodiment vectors)."""
    radius = dataset.header["success_radius"]
    bad = []
    for i, t in enumerate(dataset.trajectories):
        p = t.q[-1, :2]
        if math.dist((float(p[0]), float(p[1])), t.goal) > radius:
            bad.append(i)
        if np.abs(t.actions).max(initial=0.0) > 1.0 + 1e-6:
            bad.append(i)
    return {"n": len(dataset.trajectories), "violations": sorted(set(bad))}
