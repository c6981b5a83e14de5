"""Inner-loop trajectory optimization in latent space, and the receding
horizon controller built on top of it.

One planning update rolls the latent dynamics forward over the horizon,
measures the clipped-quadratic distance between the predicted terminal
latent and the encoded goal, and takes a clipped gradient step on the
action sequence. In training mode the whole iteration chain, including the
inner gradients, is one differentiable graph, so an outer objective can be
backpropagated through planning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import worlds

PLAN_UPDATES = 40
PLAN_STEP_FIRST = 0.5
PLAN_STEP_REST = 0.25
PLAN_GRAD_CLIP = 25.0
HUBER_DELTA = 0.85
PLAN_HORIZON_POINT = 50
PLAN_HORIZON_ARM = 100


@dataclass(frozen=True)
class PlannerConfig:
    updates: int = PLAN_UPDATES                 # planning iterations n_p
    step_size_first: float = PLAN_STEP_FIRST    # aggressive first update
    step_size_rest: float = PLAN_STEP_REST      # constant for the rest
    grad_clip: float = PLAN_GRAD_CLIP           # clip-by-value on plan grads
    huber_delta: float = HUBER_DELTA
    horizon: int = PLAN_HORIZON_POINT           # number of planned actions
    warm_start: bool = False                    # reuse shifted previous plan
    stop_inner_grad: bool = False               # ablation: detach plan grads
    objective: str = "huber"                    # huber | squared (plain l2^2)


@dataclass
class Plan:
    """Result of one planning call. ``actions`` is (B, H, action_dim);
    ``actions_tensor`` is the graph node when planned in training mode."""
    actions: np.ndarray
    loss_trace: list
    updates: int
    actions_tensor: ad.Tensor | None = None


class PlanningDiverged(RuntimeError):
    pass


def init_plan(rng: np.random.Generator, batch: int, horizon: int,
              action_dim: int, dtype=None) -> np.ndarray:
    """Elementwise uniform(-1, 1) initial plan."""
    a = rng.uniform(-1.0, 1.0, size=(batch, horizon, action_dim))
    return a.astype(dtype or ad.get_default_dtype())


def plan(model, obs_t, q, obs_g, config: PlannerConfig,
         rng: np.random.Generator | None = None,
         init_actions: np.ndarray | None = None,
         goal_latent: ad.Tensor | None = None,
         state_latent: ad.Tensor | None = None,
         horizon: int | None = None, training: bool = False) -> Plan:
    """Iteratively improve an action sequence by descending the latent goal
    distance. Planned actions are unconstrained; only executed actions get
    clamped to the environment bounds.

    ``model`` provides encode / fuse_embodiment / encode_actions /
    dynamics_step. With ``training`` the returned plan is a differentiable
    function of the model parameters (gradient nodes included). Callers that
    already hold encoded latents can pass ``state_latent`` (the fused
    rollout start) and ``goal_latent`` to skip the encoders.
    """
    horizon = int(horizon if horizon is not None else config.horizon)
    if horizon < 1:
        raise ValueError("planning horizon must be >= 1")

    x_g = goal_latent if goal_latent is not None else model.encode(obs_g)
    if state_latent is not None:
        x0 = state_latent
    else:
        x_t = model.encode(obs_t)
        if isinstance(q, ad.Tensor):
            q_t = q
        else:
            q_arr = np.asarray(q, dtype=ad.get_default_dtype())
            q_t = ad.Tensor(q_arr if q_arr.ndim == 2 else q_arr[None])
        x0 = model.fuse_embodiment(x_t, q_t)

    batch = x0.shape[0]
    if init_actions is None:
        if rng is None:
            raise ValueError("plan needs an rng when no initial actions are given")
        init_actions = init_plan(rng, batch, horizon, model.config.action_dim)
    actions = ad.Tensor(np.asarray(init_actions, dtype=ad.get_default_dtype()))

    trace = []
    for i in range(config.updates):
        loss = _rollout_loss(model, x0, x_g, actions, config)
        value = loss.item() / batch
        if not math.isfinite(value):
            raise PlanningDiverged(f"non-finite planning loss at iteration {i}")
        trace.append(value)
        g = ad.grad(loss, actions, create_graph=training)
        if config.stop_inner_grad:
            g = g.detach()
        step = config.step_size_first if i == 0 else config.step_size_rest
        update = ad.scale(ad.clip_by_value(g, -config.grad_clip, config.grad_clip),
                          step)
        actions = ad.sub(actions, update)
    return Plan(actions=actions.numpy(), loss_trace=trace, updates=config.updates,
                actions_tensor=actions if training else None)


def _rollout_loss(model, x0, x_g, actions, config: PlannerConfig):
    """Sum over the batch of per-sample goal distances. Summing (rather
    than averaging) keeps each sample's inner gradient independent of how
    many episodes happen to be planned together."""
    u = model.encode_actions(actions)
    x = x0
    for k in range(actions.shape[1]):
        uk = ad.narrow(u, 1, k, 1).reshape(u.shape[0], u.shape[2])
        x = model.dynamics_step(x, uk)
    diff = ad.sub(x, x_g)
    if config.objective == "squared":
        # the raw squared distance, summed over latent dimensions
        return ad.square(diff).sum(axis=1).sum()
    return ad.huber(diff, config.huber_delta).mean(axis=1).sum()


def plan_rollout_latents(model, x0, actions: ad.Tensor) -> list:
    """Latent states visited when unrolling the dynamics under a plan."""
    u = model.encode_actions(actions)
    xs = [x0]
    for k in range(actions.shape[1]):
        uk = ad.narrow(u, 1, k, 1).reshape(u.shape[0], u.shape[2])
        xs.append(model.dynamics_step(xs[-1], uk))
    return xs


# ---------------------------------------------------------------------------
# receding horizon control
# ---------------------------------------------------------------------------

def _plan_rng(seed: int, task_index: int, step: int) -> np.random.Generator:
    # a counter-derived stream per (task, step) makes sequential and
    # batched evaluation produce identical plans
    return np.random.default_rng([seed, task_index, step])


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    states: list
    actions: list


def mpc_act(state: worlds.WorldState, goal_obs: np.ndarray, model,
            config: PlannerConfig, env: worlds.EnvConfig,
            max_steps: int | None = None, seed: int = 0,
            task_index: int = 0) -> EpisodeResult:
    """Plan, execute the first action (clamped to the actuator bounds),
    re-plan from the new observation; stop at success or the step limit."""
    max_steps = max_steps or env.max_steps
    with ad.no_grad():
        goal_latent = model.encode(goal_obs[None] if goal_obs.ndim == 3 else goal_obs)
    states, actions = [state], []
    if worlds.success(state, env):
        return EpisodeResult(True, 0, states, actions)
    prev = None
    for t in range(max_steps):
        obs = worlds.render(state, env)
        q = worlds.embodiment(state, env)[None]
        init = None
        rng = _plan_rng(seed, task_index, t)
        if config.warm_start and prev is not None:
            init = np.concatenate([prev[:, 1:], prev[:, -1:]], axis=1)
        result = plan(model, obs[None], q, None, config, rng=rng,
                      init_actions=init, goal_latent=goal_latent)
        prev = result.actions
        a = np.clip(result.actions[0, 0], -1.0, 1.0)
        state = worlds.step(state, a, env)
        states.append(state)
        actions.append(a)
        if worlds.success(state, env):
            return EpisodeResult(True, t + 1, states, actions)
    return EpisodeResult(False, max_steps, states, actions)


def _baseline_action(model, obs, q, goal_obs, horizon):
    if model.kind == "ril":
        out = model.forward(obs, goal_obs, ad.Tensor(q))
        return out.numpy()
    out = model.forward(obs, goal_obs, ad.Tensor(q), horizon)
    return out.numpy()[:, 0]


def run_episodes(model, tasks, config: PlannerConfig, env: worlds.EnvConfig,
                 max_steps: int | None = None, seed: int = 0) -> list:
    """Roll out many tasks in lockstep (one batched planner call per step).

    ``tasks`` is a list of (WorldState, goal observation). Per-task plan
    initializations come from counter-derived streams, so results equal
    running ``mpc_act`` on each task alone. Returns success flags.
    """
    max_steps = max_steps or env.max_steps
    n = len(tasks)
    states = [t[0] for t in tasks]
    dtype = ad.get_default_dtype()
    goal_obs = np.stack([t[1] for t in tasks]).astype(dtype)
    with ad.no_grad():
        goal_latent = model.encode(goal_obs) if model.kind == "upn" else None
    done = np.array([worlds.success(s, env) for s in states])
    prev_plans = {}
    for t in range(max_steps):
        if done.all():
            break
        alive = [i for i in range(n) if not done[i]]
        obs = np.stack([worlds.render(states[i], env) for i in alive]).astype(dtype)
        q = np.stack([worlds.embodiment(states[i], env) for i in alive])
        if model.kind == "upn":
            init = np.stack([
                np.concatenate([prev_plans[i][1:], prev_plans[i][-1:]])
                if config.warm_start and i in prev_plans
                else init_plan(_plan_rng(seed, i, t), 1, config.horizon,
                               model.config.action_dim)[0]
                for i in alive])
            gl = ad.Tensor(goal_latent.data[alive])
            result = plan(model, obs, q, None, config,
                          init_actions=init, goal_latent=gl)
            first = result.actions[:, 0]
            if config.warm_start:
                for row, i in enumerate(alive):
                    prev_plans[i] = result.actions[row]
        else:
            with ad.no_grad():
                first = _baseline_action(model, obs, q.astype(dtype),
                                         goal_obs[alive], config.horizon)
        for row, i in enumerate(alive):
            a = np.clip(first[row], -1.0, 1.0)
            states[i] = worlds.step(states[i], a, env)
            if worlds.success(states[i], env):
                done[i] = True
    return list(done)


@dataclass
class EvalRow:
    model: str
    n_p: int
    seed: int
    successes: int
    trials: int

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


def eval_plan_steps(model, env: worlds.EnvConfig, config: PlannerConfig,
                    tasks, n_p_values, seeds, max_steps: int | None = None) -> list:
    """Success-rate table over planning-update counts; one row per
    (n_p, seed) with counts, ready for CSV emission."""
    rows = []
    for n_p in n_p_values:
        cfg = replace(config, updates=int(n_p))
        for seed in seeds:
            flags = run_episodes(model, tasks, cfg, env,
                                 max_steps=max_steps, seed=int(seed))
            rows.append(EvalRow(model=model.kind, n_p=int(n_p), seed=int(seed),
                                successes=int(sum(flags)), trials=len(flags)))
    return rows


def write_eval_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write("model,n_p,seed,successes,trials,rate\n")
        for r in rows:
            f.write(f"{r.model},{r.n_p},{r.seed},{r.successes},{r.trials},"
                    f"{r.rate:.6f}\n")
