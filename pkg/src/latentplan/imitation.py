"""Outer-loop imitation training: sample demonstration sub-sequences with a
short-horizon-first curriculum, plan through the differentiable inner loop,
and regress the planned actions onto the expert's with Adam.

Every random draw comes from a counter-derived stream keyed by (seed, role,
update index), so runs are reproducible bit for bit and resuming from a
checkpoint continues exactly the run that would have happened.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import planner as planner_mod
from .data import DemoDataset
from .nets import ParameterSet, init_model, load_checkpoint, \
    make_net_config, save_checkpoint, MODEL_CLASSES
from .optim import Adam
from .planner import PlannerConfig

BATCH_SIZE = 128
LEARNING_RATE = 3e-4
TOTAL_UPDATES = 1_000_000
VALIDATION_PERIOD = 10_000
CURRICULUM_UPDATES = 300_000
SPLIT_FRACTIONS = (0.9, 0.05, 0.05)

# rng stream roles
_SPLIT, _BATCH, _PLAN, _VAL, _INIT = 7, 2, 3, 4, 0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    total_updates: int = TOTAL_UPDATES
    validation_period: int = VALIDATION_PERIOD
    curriculum_updates: int = CURRICULUM_UPDATES   # poisson -> uniform switch
    horizon_max: int = 50
    poisson_lam: float | None = None               # default horizon_max / 5
    val_items: int = 512
    checkpoint_period: int | None = None           # default: validation period
    arch: str = "canonical"                        # canonical | compact nets
    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig())

    @property
    def lam(self) -> float:
        return self.poisson_lam if self.poisson_lam is not None \
            else self.horizon_max / 5.0


@dataclass(frozen=True)
class CurriculumSampler:
    """Sub-sequence horizon distribution: truncated Poisson early in
    training (short horizons first), uniform afterwards."""
    horizon_max: int
    lam: float
    switch_updates: int
    mode: str = "curriculum"    # curriculum | uniform

    def sample(self, rng: np.random.Generator, update_index: int,
               cap: int | None = None) -> int:
        hi = self.horizon_max if cap is None else min(self.horizon_max, cap)
        if hi <= 1:
            return 1
        if self.mode == "uniform" or update_index >= self.switch_updates:
            return int(rng.integers(1, hi + 1))
        for _ in range(100):
            h = int(rng.poisson(self.lam))
            if 1 <= h <= hi:
                return h
        return int(rng.integers(1, hi + 1))


def split_dataset(dataset: DemoDataset, fractions=SPLIT_FRACTIONS):
    """Deterministic train/validation/test trajectory indices; keyed to the
    dataset's own generation seed so every model sees identical splits."""
    n = len(dataset)
    n_val = max(1, int(round(n * fractions[1])))
    n_test = max(1, int(round(n * fractions[2])))
    if n_val + n_test >= n:
        raise ValueError(f"dataset of {n} trajectories is too small to split")
    order = np.random.default_rng([dataset.header["seed"], _SPLIT]).permutation(n)
    train = sorted(order[: n - n_val - n_test].tolist())
    val = sorted(order[n - n_val - n_test: n - n_test].tolist())
    test = sorted(order[n - n_test:].tolist())
    return train, val, test


@dataclass
class BatchGroup:
    horizon: int
    obs_t: np.ndarray     # (b, S, S, 3) uint8
    q: np.ndarray         # (b, dq)
    obs_g: np.ndarray     # (b, S, S, 3) uint8
    actions: np.ndarray   # (b, horizon, adim) expert plan


def sample_batch(dataset: DemoDataset, indices, sampler: CurriculumSampler,
                 batch_size: int, rng: np.random.Generator,
                 update_index: int) -> list:
    """Draw sub-sequences (start frame, embodiment, future frame as goal,
    expert actions in between) and group them by horizon. A draw whose
    horizon exceeds the trajectory is resampled within that trajectory's
    bounds (the sampler is capped, not rejected)."""
    items: dict[int, list] = {}
    for _ in range(batch_size):
        traj = dataset.trajectories[indices[int(rng.integers(len(indices)))]]
        h = sampler.sample(rng, update_index, cap=traj.steps)
        t0 = int(rng.integers(0, traj.steps - h + 1))
        items.setdefault(h, []).append((traj, t0))
    groups = []
    for h in sorted(items):
        rows = items[h]
        groups.append(BatchGroup(
            horizon=h,
            obs_t=np.stack([t.frames[t0] for t, t0 in rows]),
            q=np.stack([t.q[t0] for t, t0 in rows]),
            obs_g=np.stack([t.frames[t0 + h] for t, t0 in rows]),
            actions=np.stack([t.actions[t0:t0 + h] for t, t0 in rows])))
    return groups


class TrainingDiverged(RuntimeError):
    pass


def _param_grads(loss: ad.Tensor, params: ParameterSet, acc: dict) -> None:
    names = list(params.keys())
    grads = ad.grad(loss, [params[k] for k in names])
    for name, g in zip(names, grads):
        if name in acc:
            acc[name] += g.data
        else:
            acc[name] = g.data.copy()


def imitate_step(model, groups, config: TrainConfig, opt: Adam,
                 seed: int, update_index: int):
    """One outer update: plan through every horizon group in training mode,
    backpropagate the mean squared action error through the whole nested
    graph once, apply Adam. Returns (imitation loss, mean inner plan loss).

    Observations of all groups are encoded in one batched pass; each group
    then plans from its slice of the fused latents."""
    dtype = ad.get_default_dtype()
    total_entries = sum(g.actions.size for g in groups)
    plan_losses = []
    group_losses = []
    if model.kind == "upn":
        obs_t = np.concatenate([g.obs_t for g in groups])
        obs_g = np.concatenate([g.obs_g for g in groups])
        q = np.concatenate([g.q for g in groups]).astype(dtype)
        x_t = model.encode(obs_t)
        x_g_all = model.encode(obs_g)
        x0_all = model.fuse_embodiment(x_t, ad.Tensor(q))
        row = 0
        for g in groups:
            n = len(g.q)
            x0 = ad.narrow(x0_all, 0, row, n)
            x_g = ad.narrow(x_g_all, 0, row, n)
            row += n
            # plan-init stream keyed by horizon so the loss does not depend
            # on the order groups are processed in
            rng = np.random.default_rng([seed, _PLAN, update_index, g.horizon])
            result = planner_mod.plan(
                model, None, None, None, config.planner, rng=rng,
                horizon=g.horizon, training=True,
                state_latent=x0, goal_latent=x_g)
            out = result.actions_tensor
            plan_losses.append(float(np.mean(result.loss_trace))
                               if result.loss_trace else 0.0)
            err = ad.square(ad.sub(out, ad.Tensor(g.actions.astype(dtype)))).sum()
            group_losses.append(ad.scale(err, 1.0 / total_entries))
    else:
        if model.kind == "ril":
            # the reactive learner predicts one action per (o_t, o_g) pair
            total_entries = sum(g.actions[:, :1].size for g in groups)
        for g in groups:
            if model.kind == "ril":
                out = model.forward(g.obs_t, g.obs_g, ad.Tensor(g.q.astype(dtype)))
                out = out.reshape(out.shape[0], 1, out.shape[1])
                target = g.actions[:, :1]
            else:
                out = model.forward(g.obs_t, g.obs_g, ad.Tensor(g.q.astype(dtype)),
                                    g.horizon)
                target = g.actions
            err = ad.square(ad.sub(out, ad.Tensor(target.astype(dtype)))).sum()
            group_losses.append(ad.scale(err, 1.0 / total_entries))
    loss = group_losses[0]
    for extra in group_losses[1:]:
        loss = ad.add(loss, extra)
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise TrainingDiverged(f"non-finite loss at update {update_index}")
    grads: dict = {}
    _param_grads(loss, model.params, grads)
    opt.step(grads)
    plan_mean = float(np.mean(plan_losses)) if plan_losses else 0.0
    return loss_value, plan_mean


def _validation_items(dataset: DemoDataset, val_indices, n_items: int,
                      seed: int, horizon_max: int):
    rng = np.random.default_rng([seed, _VAL])
    sampler = CurriculumSampler(horizon_max=horizon_max, lam=1.0,
                                switch_updates=0, mode="uniform")
    return sample_batch(dataset, val_indices, sampler, n_items, rng, 0)


def validation_loss(model, groups, config: TrainConfig, seed: int) -> float:
    """Imitation loss on held-out items, planner in evaluation mode."""
    dtype = ad.get_default_dtype()
    if model.kind == "ril":
        total_entries = sum(g.actions[:, :1].size for g in groups)
    else:
        total_entries = sum(g.actions.size for g in groups)
    total = 0.0
    rng = np.random.default_rng([seed, _VAL, 1])
    for g in groups:
        target = g.actions
        if model.kind == "upn":
            result = planner_mod.plan(model, g.obs_t, g.q, g.obs_g,
                                      config.planner, rng=rng, horizon=g.horizon)
            out = result.actions
        elif model.kind == "ril":
            with ad.no_grad():
                out = model.forward(g.obs_t, g.obs_g,
                                    ad.Tensor(g.q.astype(dtype))).numpy()
            out = out[:, None, :]
            target = g.actions[:, :1]
        else:
            with ad.no_grad():
                out = model.forward(g.obs_t, g.obs_g,
                                    ad.Tensor(g.q.astype(dtype)),
                                    g.horizon).numpy()
        total += float(np.sum((out - target) ** 2))
    return total / total_entries


@dataclass
class TrainResult:
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    best_val: float
    updates_run: int


def _truncate_log(path: str, start_update: int) -> None:
    if not os.path.exists(path):
        return
    with open(path) as f:
        lines = f.readlines()
    kept = [lines[0]]
    for line in lines[1:]:
        if line.strip() and int(line.split(",", 1)[0]) < start_update:
            kept.append(line)
    with open(path, "w") as f:
        f.writelines(kept)


def train(dataset: DemoDataset, config: TrainConfig, seed: int, out_dir: str,
          model_kind: str = "upn", resume: bool = False) -> TrainResult:
    """Full training loop with periodic validation; retains the checkpoint
    with the lowest validation loss. Emits ``train_log.csv`` with one row
    per update (validation rows carry the extra column)."""
    os.makedirs(out_dir, exist_ok=True)
    header = dataset.header
    net_config = make_net_config(model_kind, header["image_size"],
                                 header["action_dim"],
                                 header["embodiment_dim"], config.arch)
    train_idx, val_idx, _ = split_dataset(dataset)
    # the reactive baseline regresses single actions from uniform horizons;
    # the autoregressive baseline shares the planner's curriculum
    sampler = CurriculumSampler(
        horizon_max=config.horizon_max, lam=config.lam,
        switch_updates=config.curriculum_updates,
        mode="uniform" if model_kind == "ril" else "curriculum")
    val_groups = _validation_items(dataset, val_idx, config.val_items, seed,
                                   config.horizon_max)

    best_path = os.path.join(out_dir, "checkpoint_best.lpck")
    last_path = os.path.join(out_dir, "checkpoint_last.lpck")
    log_path = os.path.join(out_dir, "train_log.csv")

    model = init_model(net_config, np.random.default_rng([seed, _INIT]))
    opt = Adam(model.params, lr=config.learning_rate)
    start, best_val = 0, math.inf
    if resume and os.path.exists(last_path):
        ck_header, params, state = load_checkpoint(last_path)
        model = MODEL_CLASSES[model_kind](net_config, params)
        opt = Adam(model.params, lr=config.learning_rate)
        opt.load_state_arrays(state)
        start = int(ck_header["extra"]["update"])
        best_val = float(ck_header["extra"]["best_val"])
        _truncate_log(log_path, start)
        log_f = open(log_path, "a")
    else:
        log_f = open(log_path, "w")
        log_f.write("update,train_loss,plan_loss,val_loss\n")

    ckpt_period = config.checkpoint_period or config.validation_period

    def save_best(val):
        save_checkpoint(best_path, model.params, net_config,
                        extra={"update": u + 1, "val_loss": val, "seed": seed,
                               "model": model_kind})

    def save_last(u_next):
        save_checkpoint(last_path, model.params, net_config,
                        extra={"update": u_next, "best_val": best_val,
                               "seed": seed, "model": model_kind},
                        state=opt.state_arrays())

    u = start - 1
    try:
        for u in range(start, config.total_updates):
            rng = np.random.default_rng([seed, _BATCH, u])
            groups = sample_batch(dataset, train_idx, sampler,
                                  config.batch_size, rng, u)
            loss, plan_loss = imitate_step(model, groups, config, opt, seed, u)
            row = f"{u},{loss:.8g},{plan_loss:.8g}"
            if (u + 1) % config.validation_period == 0 \
                    or u + 1 == config.total_updates:
                val = validation_loss(model, val_groups, config, seed)
                row += f",{val:.8g}"
                if val < best_val:
                    best_val = val
                    save_best(val)
            else:
                row += ","
            log_f.write(row + "\n")
            if (u + 1) % ckpt_period == 0 or u + 1 == config.total_updates:
                save_last(u + 1)
    except TrainingDiverged:
        save_checkpoint(os.path.join(out_dir, "checkpoint_diverged.lpck"),
                        model.params, net_config,
                        extra={"update": u, "seed": seed, "model": model_kind})
        raise
    finally:
        log_f.close()
    if not os.path.exists(best_path):
        save_best(math.inf)
    return TrainResult(best_checkpoint=best_path, last_checkpoint=last_path,
                       log_path=log_path, best_val=best_val,
                       updates_run=config.total_updates - start)


def train_baseline(dataset: DemoDataset, config: TrainConfig, seed: int,
                   out_dir: str, kind: str, resume: bool = False) -> TrainResult:
    """Train a comparison learner (``ril`` or ``ail``) under the same splits,
    batch sizes and optimizer as the planner."""
    if kind not in ("ril", "ail"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    return train(dataset, config, seed, out_dir, model_kind=kind, resume=resume)
