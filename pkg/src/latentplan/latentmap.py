"""Probe the learned metric over the arena: place the robot at every free
grid cell, encode the rendered scene, and measure the latent distance to a
reference (goal) image. Obstacle-awareness shows up as latent distance
correlating better with geodesic (path) distance than with straight-line
distance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import worlds
from .expert import distance_field
from .rl import _huber_mean
from .planner import HUBER_DELTA


@dataclass
class LatentMapResult:
    grid: np.ndarray            # (res, res) latent distances, NaN where blocked
    rows: list                  # (i, j, x, y, latent, geodesic, euclidean)
    corr_geodesic: float
    corr_euclidean: float
    reference: tuple


def compute_latent_map(model, reference_state: worlds.WorldState,
                       env: worlds.EnvConfig, resolution: int = 32,
                       delta: float = HUBER_DELTA,
                       chunk: int = 256) -> LatentMapResult:
    """``reference_state.goal`` is the reference position; the reference
    image shows the robot resting there (exactly the goal image used for
    rewards and planning). The reference snaps to its grid cell center so
    that its own cell probes the reference image itself, making the map
    exactly zero there."""
    ci, cj = worlds.cell_of(reference_state.goal, resolution)
    ref = ((ci + 0.5) / resolution, (cj + 0.5) / resolution)
    reference_state = replace(reference_state.with_robot(ref), goal=ref)
    ref_obs = worlds.goal_observation(reference_state, env)
    with ad.no_grad():
        x_ref = model.encode(ref_obs[None]).numpy()[0]

    margin = env.robot_radius + 0.01
    blocked = worlds.occupancy_grid(reference_state.obstacles, margin, resolution)
    geo = distance_field(reference_state.obstacles, ref, margin, resolution)

    cells, probes = [], []
    for i in range(resolution):
        for j in range(resolution):
            if blocked[i, j]:
                continue
            x = (i + 0.5) / resolution
            y = (j + 0.5) / resolution
            cells.append((i, j, x, y))
            probes.append(worlds.render(
                reference_state.with_robot((x, y)), env))

    latents = []
    with ad.no_grad():
        for lo in range(0, len(probes), chunk):
            batch = np.stack(probes[lo:lo + chunk])
            latents.append(model.encode(batch).numpy())
    latents = np.concatenate(latents)
    dist = _huber_mean(latents - x_ref, delta, axes=-1)

    grid = np.full((resolution, resolution), np.nan)
    rows = []
    lat_v, geo_v, euc_v = [], [], []
    for (i, j, x, y), d in zip(cells, dist):
        g = geo[i, j]
        e = float(np.hypot(x - ref[0], y - ref[1]))
        grid[i, j] = d
        rows.append((i, j, x, y, float(d), float(g), e))
        if np.isfinite(g):
            lat_v.append(d)
            geo_v.append(g)
            euc_v.append(e)
    corr_g = float(np.corrcoef(lat_v, geo_v)[0, 1])
    corr_e = float(np.corrcoef(lat_v, euc_v)[0, 1])
    return LatentMapResult(grid=grid, rows=rows, corr_geodesic=corr_g,
                           corr_euclidean=corr_e, reference=tuple(ref))


def write_latent_map_csv(path: str, result: LatentMapResult) -> None:
    with open(path, "w") as f:
        f.write("i,j,x,y,latent_distance,geodesic_distance,euclidean_distance\n")
        for i, j, x, y, d, g, e in result.rows:
            gtxt = f"{g:.6f}" if np.isfinite(g) else "inf"
            f.write(f"{i},{j},{x:.6f},{y:.6f},{d:.6f},{gtxt},{e:.6f}\n")
