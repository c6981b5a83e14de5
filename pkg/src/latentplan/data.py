"""Demonstration container and its on-disk format.

File layout (integers little-endian):
  bytes 0..7   magic "LPDM0001"
  bytes 8..11  u32 header length
  header       UTF-8 JSON: env id, image size, action/embodiment dims, seed,
               success threshold, generation stats, trajectory count
  per trajectory:
    u32 meta length, meta JSON {steps, goal, goal_color, hindsight, layout,
    distractors, heading0}
    frames  (steps+1, S, S, 3) uint8
    q       (steps+1, dq) float32
    actions (steps, adim) float32

Identical content writes identical bytes, so datasets built from the same
seed compare equal with a plain hash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LPDM0001"


@dataclass
class Trajectory:
    frames: np.ndarray      # (T+1, S, S, 3) uint8, includes terminal frame
    q: np.ndarray           # (T+1, dq) float32
    actions: np.ndarray     # (T, adim) float32, all entries in [-1, 1]
    goal: tuple             # goal position the frames were rendered with
    goal_color: int
    hindsight: bool
    layout: tuple           # obstacle rects as (x0, y0, x1, y1) tuples
    distractors: tuple = ()
    heading0: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def goal_obs(self) -> np.ndarray:
        """The trajectory's own goal observation is its terminal frame."""
        return self.frames[-1]


@dataclass
class DemoDataset:
    header: dict
    trajectories: list

    def __len__(self) -> int:
        return len(self.trajectories)

    def save(self, path) -> None:
        header = dict(self.header)
        header["n_trajectories"] = len(self.trajectories)
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for t in self.trajectories:
                meta = {
                    "steps": int(t.steps),
                    "goal": [float(t.goal[0]), float(t.goal[1])],
                    "goal_color": int(t.goal_color),
                    "hindsight": bool(t.hindsight),
                    "layout": [list(map(float, r)) for r in t.layout],
                    "distractors": [[float(d[0]), float(d[1]), int(d[2])]
                                    for d in t.distractors],
                    "heading0": float(t.heading0),
                }
                mblob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
                f.write(struct.pack("<I", len(mblob)))
                f.write(mblob)
                f.write(np.ascontiguousarray(t.frames, dtype=np.uint8).tobytes())
                f.write(np.ascontiguousarray(t.q, dtype=np.float32).tobytes())
                f.write(np.ascontiguousarray(t.actions, dtype=np.float32).tobytes())

    @staticmethod
    def load(path) -> "DemoDataset":
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise ValueError(f"{path}: not a demonstration dataset")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            size = header["image_size"]
            dq = header["embodiment_dim"]
            adim = header["action_dim"]
            trajectories = []
            for _ in range(header["n_trajectories"]):
                (mlen,) = struct.unpack("<I", f.read(4))
                meta = json.loads(f.read(mlen).decode())
                steps = meta["steps"]
                frames = np.frombuffer(f.read((steps + 1) * size * size * 3),
                                       dtype=np.uint8)
                frames = frames.reshape(steps + 1, size, size, 3).copy()
                q = np.frombuffer(f.read((steps + 1) * dq * 4), dtype=np.float32)
                q = q.reshape(steps + 1, dq).copy()
                actions = np.frombuffer(f.read(steps * adim * 4), dtype=np.float32)
                actions = actions.reshape(steps, adim).copy()
                trajectories.append(Trajectory(
                    frames=frames, q=q, actions=actions,
                    goal=tuple(meta["goal"]), goal_color=meta["goal_color"],
                    hindsight=meta["hindsight"],
                    layout=tuple(tuple(r) for r in meta["layout"]),
                    distractors=tuple(tuple(d) for d in meta["distractors"]),
                    heading0=meta["heading0"]))
        return DemoDataset(header=header, trajectories=trajectories)
