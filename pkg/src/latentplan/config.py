"""Run configuration: a flat ``section.key = value`` text grammar, named
presets, and override resolution (preset < file < command-line). Every
command echoes its fully resolved configuration into its run directory so
any artifact can be reproduced from the directory alone.
"""

from __future__ import annotations

import json


class ConfigSyntaxError(ValueError):
    pass


def parse_value(token: str):
    token = token.strip()
    if "," in token:
        return [parse_value(t) for t in token.split(",") if t.strip()]
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(token)    # ints, floats, quoted strings
    except json.JSONDecodeError:
        return token


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """``key = value`` per line, ``#`` comments, keys dotted by section."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigSyntaxError(f"line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def format_config(cfg: dict) -> str:
    lines = [f"{k} = {format_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def load_config_file(path: str) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


def save_config_file(path: str, cfg: dict) -> None:
    with open(path, "w") as f:
        f.write(format_config(cfg))


def resolve(*layers: dict) -> dict:
    """Later layers override earlier ones; None values are skipped."""
    out: dict = {}
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is not None:
                out[k] = v
    return out


# ---------------------------------------------------------------------------
# presets
#
# The unnamed defaults everywhere in the package are the canonical
# configuration (full-scale values). These presets are desk-scale working
# points chosen so a full pipeline finishes on a workstation CPU; they are
# NOT canonical values and are labeled as such in run headers.
# ---------------------------------------------------------------------------

PRESETS: dict = {
    "desk": {
        "preset.name": "desk",
        "preset.canonical": False,
        "env.image_size": 42,
        "env.max_steps": 50,
        "demos.n": 1000,
        "demos.noise": 0.9,
        "demos.cruise": 0.45,
        "train.batch_size": 64,
        "train.total_updates": 1500,
        "train.validation_period": 250,
        "train.curriculum_updates": 600,
        "train.horizon_max": 10,
        "train.val_items": 256,
        "planner.updates": 10,
        "planner.horizon": 10,
        "eval.n_p": [10, 40],
        "eval.tasks": 200,
        "eval.max_steps": 60,
        "rl.steps_per_batch": 2048,
        "rl.learning_rate": 3e-4,
        "rl.epochs": 8,
        "rl.minibatch": 256,
        "rl.total_steps": 80000,
        "rl.max_episode_steps": 80,
        "rl.n_envs": 16,
        "rl.eval_tasks": 50,
    },
    "micro": {
        # smallest end-to-end pipeline; smoke tests and determinism checks
        "preset.name": "micro",
        "preset.canonical": False,
        "env.image_size": 24,
        "env.max_steps": 30,
        "demos.n": 25,
        "demos.noise": 0.9,
        "demos.cruise": 0.45,
        "train.batch_size": 16,
        "train.total_updates": 30,
        "train.validation_period": 10,
        "train.curriculum_updates": 12,
        "train.horizon_max": 6,
        "train.val_items": 16,
        "planner.updates": 4,
        "planner.horizon": 6,
        "eval.n_p": [4, 16],
        "eval.tasks": 10,
        "eval.max_steps": 30,
        "rl.steps_per_batch": 512,
        "rl.learning_rate": 3e-4,
        "rl.epochs": 4,
        "rl.minibatch": 128,
        "rl.total_steps": 2048,
        "rl.max_episode_steps": 40,
        "rl.n_envs": 8,
        "rl.eval_tasks": 8,
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return dict(PRESETS[name])


def canonical_defaults() -> dict:
    """The unmodified configuration constants, assembled from the modules
    that own them (so this reflects the code, not a copy of the numbers)."""
    from . import imitation, nets, optim, planner, rl, worlds

    return {
        "planner.updates": planner.PLAN_UPDATES,
        "planner.step_sizes": (planner.PLAN_STEP_FIRST, planner.PLAN_STEP_REST),
        "planner.grad_clip": planner.PLAN_GRAD_CLIP,
        "planner.huber_delta": planner.HUBER_DELTA,
        "planner.horizon.point_robot": planner.PLAN_HORIZON_POINT,
        "planner.horizon.arm": planner.PLAN_HORIZON_ARM,
        "train.batch_size": imitation.BATCH_SIZE,
        "train.learning_rate": optim.ADAM_STEP,
        "train.total_updates": imitation.TOTAL_UPDATES,
        "train.validation_period": imitation.VALIDATION_PERIOD,
        "train.curriculum_updates": imitation.CURRICULUM_UPDATES,
        "rl.gae_lambda": rl.GAE_LAMBDA,
        "rl.steps_per_batch": rl.RL_STEPS_PER_BATCH,
        "rl.learning_rate": rl.RL_STEP_SIZE,
        "rl.epochs": rl.RL_EPOCHS,
        "rl.minibatch": rl.RL_MINIBATCH,
        "nets.pixel_scale": nets.PIXEL_SCALE,
        "nets.latent_dim": nets.LATENT_DIM,
        "nets.action_enc_dim": nets.ACTION_ENC_DIM,
        "nets.bias_transform_units": nets.BIAS_TRANSFORM_UNITS,
        "nets.conv_stack": nets.CONV_STACK,
        "env.success_radius": worlds.EnvConfig().success_radius,
    }
