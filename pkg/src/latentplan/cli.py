"""Command line pipeline: demonstration generation, imitation training,
evaluation, latent-metric maps, and reward-transfer reinforcement learning.

Every command owns one run directory: the fully resolved configuration is
echoed there as ``config.txt`` and all artifacts (datasets, checkpoints,
CSV tables, figures) stay inside it. Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import expert, imitation, latentmap, planner, report, rl, worlds
from .data import DemoDataset
from .nets import load_checkpoint, load_model
from .imitation import TrainConfig
from .planner import PlannerConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--out", required=True, help="run directory (created)")
    p.add_argument("--preset", default=None,
                   help=f"named preset: {sorted(cfgmod.PRESETS)}")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def _build_parser() -> _Parser:
    p = _Parser(prog="latentplan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="generate expert demonstrations")
    _add_common(g)
    g.add_argument("--env", choices=["point"], default="point")
    g.add_argument("--mode", choices=["fovg", "vovg"], default=None)
    g.add_argument("--n", type=int, default=None, help="number of trajectories")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--image-size", type=int, default=None)
    g.add_argument("--noise", type=float, default=None,
                   help="expert action perturbation magnitude")

    t = sub.add_parser("train", help="train a model by imitation")
    _add_common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", choices=["upn", "ril", "ail"], default="upn")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--updates", type=int, default=None)
    t.add_argument("--stop-inner-grad", action="store_true", default=None,
                   help="ablation: detach inner planning gradients")
    t.add_argument("--resume", action="store_true",
                   help="continue from the last periodic checkpoint")

    e = sub.add_parser("eval", help="success-rate table over planning updates")
    _add_common(e)
    e.add_argument("--checkpoint", action="append", required=True,
                   help="model checkpoint (repeatable)")
    e.add_argument("--tasks", type=int, default=None)
    e.add_argument("--np", dest="n_p", default=None,
                   help="comma list of planning update counts")
    e.add_argument("--seeds", type=int, default=None,
                   help="number of evaluation seeds")
    e.add_argument("--mode", choices=["fovg", "vovg"], default=None)
    e.add_argument("--task-seed", type=int, default=None)

    m = sub.add_parser("latent-map", help="latent-distance heatmap and stats")
    _add_common(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--grid", type=int, default=None)
    m.add_argument("--ref", default=None, help="reference position 'x,y'")
    m.add_argument("--layout", default=None, help="layout file (default fixed)")
    m.add_argument("--goal-color", type=int, default=None)

    r = sub.add_parser("train-rl", help="reward-transfer reinforcement learning")
    _add_common(r)
    r.add_argument("--encoder", required=True, help="trained planner checkpoint")
    r.add_argument("--env", choices=list(rl.TRANSFER_ENVS), default="car")
    r.add_argument("--reward", choices=["latent", "pixel"], default=None)
    r.add_argument("--steps", type=int, default=None, help="env step budget")
    r.add_argument("--seeds", type=int, default=None, help="number of seeds")
    r.add_argument("--sigma", type=float, default=None)
    r.add_argument("--mixture", action="store_true", default=None,
                   help="use the two-term exponential mixture")
    r.add_argument("--fixed-goal", action="store_true", default=None,
                   help="single fixed goal; drops the goal feature input")
    return p


def _resolve_config(args, flag_map: dict) -> dict:
    layers = []
    if args.preset:
        try:
            layers.append(cfgmod.preset(args.preset))
        except KeyError as e:
            raise UsageError(str(e))
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        layers.append(cfgmod.load_config_file(args.config))
    layers.append({k: v for k, v in flag_map.items() if v is not None})
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = cfgmod.parse_value(v)
    layers.append(overrides)
    return cfgmod.resolve(*layers)


def _start_run(args, cfg: dict) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfgmod.save_config_file(os.path.join(out, "config.txt"), cfg)
    return out


def _get(cfg, key, default):
    return cfg.get(key, default)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    cfg = _resolve_config(args, {
        "demos.mode": args.mode, "demos.n": args.n, "demos.seed": args.seed,
        "env.image_size": args.image_size, "demos.noise": args.noise,
        "env.kind": args.env,
    })
    out = _start_run(args, cfg)
    env = worlds.EnvConfig(
        kind=_get(cfg, "env.kind", "point"),
        image_size=int(_get(cfg, "env.image_size", 84)),
        max_steps=int(_get(cfg, "env.max_steps", 50)))
    ex = expert.ExpertConfig(
        action_noise=float(_get(cfg, "demos.noise", 0.1)),
        cruise_speed=float(_get(cfg, "demos.cruise", 0.9)))
    mode = _get(cfg, "demos.mode", "fovg")
    n = int(_get(cfg, "demos.n", 100))
    seed = int(_get(cfg, "demos.seed", 0))
    dataset = expert.build_dataset(mode, n, seed, env, ex)
    path = os.path.join(out, "demos.lpdm")
    dataset.save(path)
    if mode == "fovg":
        worlds.save_layout(os.path.join(out, "layout.json"), worlds.FOVG_LAYOUT)
    h = dataset.header
    print(f"wrote {path}: {n} trajectories, expert success "
          f"{h['expert_success_rate']:.3f}, hindsight fraction "
          f"{h['hindsight_fraction']:.3f}")
    return 0


def _planner_config(cfg, for_training: bool) -> PlannerConfig:
    return PlannerConfig(
        updates=int(_get(cfg, "planner.updates", planner.PLAN_UPDATES)),
        step_size_first=float(_get(cfg, "planner.step_first",
                                   planner.PLAN_STEP_FIRST)),
        step_size_rest=float(_get(cfg, "planner.step_rest",
                                  planner.PLAN_STEP_REST)),
        grad_clip=float(_get(cfg, "planner.grad_clip", planner.PLAN_GRAD_CLIP)),
        huber_delta=float(_get(cfg, "planner.huber_delta", planner.HUBER_DELTA)),
        horizon=int(_get(cfg, "planner.horizon", planner.PLAN_HORIZON_POINT)),
        warm_start=bool(_get(cfg, "planner.warm_start", False)),
        stop_inner_grad=bool(_get(cfg, "planner.stop_inner_grad", False)))


def cmd_train(args) -> int:
    if not os.path.exists(args.dataset):
        raise UsageError(f"dataset not found: {args.dataset}")
    cfg = _resolve_config(args, {
        "train.seed": args.seed, "train.total_updates": args.updates,
        "train.model": args.model,
        "planner.stop_inner_grad": args.stop_inner_grad,
    })
    out = _start_run(args, cfg)
    dataset = DemoDataset.load(args.dataset)
    tc = TrainConfig(
        batch_size=int(_get(cfg, "train.batch_size", imitation.BATCH_SIZE)),
        learning_rate=float(_get(cfg, "train.learning_rate",
                                 imitation.LEARNING_RATE)),
        total_updates=int(_get(cfg, "train.total_updates",
                               imitation.TOTAL_UPDATES)),
        validation_period=int(_get(cfg, "train.validation_period",
                                   imitation.VALIDATION_PERIOD)),
        curriculum_updates=int(_get(cfg, "train.curriculum_updates",
                                    imitation.CURRICULUM_UPDATES)),
        horizon_max=int(_get(cfg, "train.horizon_max", 50)),
        poisson_lam=cfg.get("train.poisson_lam"),
        val_items=int(_get(cfg, "train.val_items", 512)),
        arch=_get(cfg, "net.arch", "canonical"),
        planner=_planner_config(cfg, for_training=True))
    seed = int(_get(cfg, "train.seed", 0))
    model_kind = _get(cfg, "train.model", "upn")
    result = imitation.train(dataset, tc, seed, out, model_kind=model_kind,
                             resume=args.resume)
    report.plot_training_log(result.log_path,
                             os.path.join(out, "loss_curve.png"))
    print(f"trained {model_kind} (seed {seed}): best validation loss "
          f"{result.best_val:.6f} -> {result.best_checkpoint}")
    return 0


def _eval_tasks(mode, env, n_tasks, task_seed):
    tasks = []
    for i in range(n_tasks):
        rng = np.random.default_rng([task_seed, 11, i])
        tasks.append(worlds.sample_task(mode, rng, env))
    return tasks


def cmd_eval(args) -> int:
    for path in args.checkpoint:
        if not os.path.exists(path):
            raise UsageError(f"checkpoint not found: {path}")
    cfg = _resolve_config(args, {
        "eval.tasks": args.tasks, "eval.seeds": args.seeds,
        "eval.mode": args.mode, "eval.task_seed": args.task_seed,
        "eval.n_p": cfgmod.parse_value(args.n_p) if args.n_p else None,
    })
    out = _start_run(args, cfg)
    models, labels = [], []
    for path in args.checkpoint:
        header, _, _ = load_checkpoint(path)
        model = load_model(path)
        models.append(model)
        labels.append((model.kind, header["extra"].get("seed")))
    dup = len({k for k, _ in labels}) < len(labels)

    n_p_values = _get(cfg, "eval.n_p", [planner.PLAN_UPDATES])
    if isinstance(n_p_values, (int, float)):
        n_p_values = [int(n_p_values)]
    seeds = list(range(int(_get(cfg, "eval.seeds", 1))))
    mode = _get(cfg, "eval.mode", "fovg")
    task_seed = int(_get(cfg, "eval.task_seed", 1000))
    n_tasks = int(_get(cfg, "eval.tasks", 100))

    rows = []
    for model, (kind, train_seed) in zip(models, labels):
        env = worlds.EnvConfig(
            kind="point", image_size=model.config.encoder.image_hw[0],
            max_steps=int(_get(cfg, "eval.max_steps", 50)))
        tasks = _eval_tasks(mode, env, n_tasks, task_seed)
        pcfg = _planner_config(cfg, for_training=False)
        model_rows = planner.eval_plan_steps(
            model, env, pcfg, tasks, n_p_values, seeds,
            max_steps=int(_get(cfg, "eval.max_steps", 50)))
        if dup and train_seed is not None:
            for r in model_rows:
                r.model = f"{kind}-s{train_seed}"
        rows.extend(model_rows)
    csv_path = os.path.join(out, "eval.csv")
    planner.write_eval_csv(csv_path, rows)
    report.plot_eval_rows(rows, os.path.join(out, "eval.png"))
    for r in rows:
        print(f"{r.model} n_p={r.n_p} seed={r.seed}: "
              f"{r.successes}/{r.trials} = {r.rate:.3f}")
    return 0


def cmd_latent_map(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = _resolve_config(args, {
        "map.grid": args.grid, "map.ref": args.ref,
        "map.goal_color": args.goal_color, "map.layout": args.layout,
    })
    out = _start_run(args, cfg)
    model = load_model(args.checkpoint)
    layout = worlds.FOVG_LAYOUT
    if cfg.get("map.layout"):
        layout = worlds.load_layout(cfg["map.layout"])
    ref = _get(cfg, "map.ref", [0.5, 0.7])
    if isinstance(ref, str):
        ref = cfgmod.parse_value(ref)
    env = worlds.EnvConfig(kind="point",
                           image_size=model.config.encoder.image_hw[0])
    state = worlds.WorldState(
        p=(float(ref[0]), float(ref[1])), v=(0.0, 0.0), heading=0.0,
        goal=(float(ref[0]), float(ref[1])),
        goal_color=int(_get(cfg, "map.goal_color", 1)), obstacles=layout)
    result = latentmap.compute_latent_map(
        model, state, env, resolution=int(_get(cfg, "map.grid", 32)))
    latentmap.write_latent_map_csv(os.path.join(out, "latent_map.csv"), result)
    report.plot_heatmap(result.grid, os.path.join(out, "latent_map.png"))
    finite = np.nan_to_num(result.grid, nan=np.nanmax(result.grid))
    lo, hi = finite.min(), finite.max()
    gray = ((finite - lo) / (hi - lo + 1e-12) * 255).astype(np.uint8)
    worlds.write_ppm(np.repeat(gray.T[::-1, :, None], 3, axis=2),
                     os.path.join(out, "latent_map.ppm"))
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write(f"corr_geodesic = {result.corr_geodesic:.6f}\n")
        f.write(f"corr_euclidean = {result.corr_euclidean:.6f}\n")
    print(f"latent map: corr(geodesic) = {result.corr_geodesic:.4f}, "
          f"corr(euclidean) = {result.corr_euclidean:.4f}")
    return 0


def cmd_train_rl(args) -> int:
    if not os.path.exists(args.encoder):
        raise UsageError(f"encoder checkpoint not found: {args.encoder}")
    cfg = _resolve_config(args, {
        "rl.reward": args.reward, "rl.total_steps": args.steps,
        "rl.seeds": args.seeds, "rl.sigma": args.sigma,
        "rl.mixture": args.mixture, "rl.env": args.env,
        "rl.fixed_goal": args.fixed_goal,
    })
    out = _start_run(args, cfg)
    encoder_model = load_model(args.encoder)
    if encoder_model.kind != "upn":
        raise UsageError("reward transfer expects a planner (upn) checkpoint")
    source = _get(cfg, "rl.reward", "latent")
    if _get(cfg, "rl.mixture", False):
        spec = rl.RewardSpec.mixture(source)
    else:
        spec = rl.RewardSpec(terms=((1.0, float(_get(cfg, "rl.sigma",
                                                     rl.REWARD_SIGMA))),),
                             source=source)
    rc = rl.RlConfig(
        steps_per_batch=int(_get(cfg, "rl.steps_per_batch",
                                 rl.RL_STEPS_PER_BATCH)),
        learning_rate=float(_get(cfg, "rl.learning_rate", rl.RL_STEP_SIZE)),
        epochs=int(_get(cfg, "rl.epochs", rl.RL_EPOCHS)),
        minibatch=int(_get(cfg, "rl.minibatch", rl.RL_MINIBATCH)),
        clip_ratio=float(_get(cfg, "rl.clip_ratio", rl.RL_CLIP_RATIO)),
        gae_lambda=float(_get(cfg, "rl.gae_lambda", rl.GAE_LAMBDA)),
        discount=float(_get(cfg, "rl.discount", 0.99)),
        max_episode_steps=int(_get(cfg, "rl.max_episode_steps", 80)),
        n_envs=int(_get(cfg, "rl.n_envs", 16)),
        eval_tasks=int(_get(cfg, "rl.eval_tasks", 50)),
        eval_period_batches=int(_get(cfg, "rl.eval_period", 4)),
        goal_conditioned=not bool(_get(cfg, "rl.fixed_goal", False)))
    env_kind = _get(cfg, "rl.env", "car")
    total = int(_get(cfg, "rl.total_steps", 200_000))
    n_seeds = int(_get(cfg, "rl.seeds", 1))

    fixed_task = None
    if not rc.goal_conditioned:
        env, mode = rl.transfer_env_config(
            env_kind, encoder_model.config.encoder.image_hw[0],
            rc.max_episode_steps)
        fixed_task = worlds.sample_task(
            mode, np.random.default_rng([int(_get(cfg, "rl.task_seed", 77)), 12]),
            env)

    curves = []
    for seed in range(n_seeds):
        res = rl.train_transfer(env_kind, encoder_model, spec, rc, total,
                                seed, os.path.join(out, f"seed{seed}"),
                                fixed_task=fixed_task)
        steps, rates = [], []
        with open(res.curve_path) as f:
            next(f)
            for line in f:
                parts = line.strip().split(",")
                steps.append(int(parts[0]))
                rates.append(float(parts[2]))
        curves.append((np.array(steps), np.array(rates)))
        print(f"seed {seed}: final held-out success {res.final_success:.3f}")
    n_points = min(len(c[0]) for c in curves)
    agg_path = os.path.join(out, "curve_mean.csv")
    with open(agg_path, "w") as f:
        f.write("env_steps,success_rate_mean,seeds\n")
        for k in range(n_points):
            s = int(np.mean([c[0][k] for c in curves]))
            r = float(np.mean([c[1][k] for c in curves]))
            f.write(f"{s},{r:.6f},{n_seeds}\n")
    report.plot_learning_curves(
        {f"{source} reward": [(c[0][:n_points], c[1][:n_points])
                              for c in curves]},
        os.path.join(out, "curve.png"))
    final = float(np.mean([c[1][n_points - 1] for c in curves]))
    print(f"mean final held-out success over {n_seeds} seeds: {final:.3f}")
    return 0


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "latent-map": cmd_latent_map,
    "train-rl": cmd_train_rl,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure: report, fail with distinct code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
