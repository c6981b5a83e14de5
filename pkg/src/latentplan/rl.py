"""Dense rewards from the learned latent metric, and a minimal
clipped-surrogate policy-gradient learner with generalized advantage
estimation to optimize them on transfer tasks (different robot, harder
layouts). The policy never sees pixels: it is conditioned on the robot's
embodiment vector and the goal image's latent feature vector, while the
reward is computed from rendered frames through the frozen encoder.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import worlds
from .nets import ParameterSet, save_checkpoint
from .optim import Adam
from .planner import HUBER_DELTA

GAE_LAMBDA = 0.95
RL_STEPS_PER_BATCH = 4096
RL_STEP_SIZE = 5e-5
RL_EPOCHS = 1
RL_MINIBATCH = 256
RL_CLIP_RATIO = 0.2
POLICY_HIDDEN = (128, 128, 128)
REWARD_SIGMA = 2.5
REWARD_MIXTURE = ((0.6, 1.0), (0.4, 2.5))
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RewardSpec:
    """Mixture of exponentials of the (latent or pixel) goal distance:
    r = sum_k w_k * exp(-sigma_k * d) with d >= 0, so r lies in (0, 1]."""
    terms: tuple = ((1.0, REWARD_SIGMA),)
    huber_delta: float = HUBER_DELTA
    source: str = "latent"     # latent | pixel

    def __post_init__(self):
        w = [t[0] for t in self.terms]
        if any(x <= 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")

    @staticmethod
    def mixture(source: str = "latent") -> "RewardSpec":
        return RewardSpec(terms=REWARD_MIXTURE, source=source)

    def apply(self, distances: np.ndarray) -> np.ndarray:
        r = np.zeros_like(distances)
        for w, sigma in self.terms:
            r += w * np.exp(-sigma * distances)
        return r


def _huber_mean(diff: np.ndarray, delta: float, axes) -> np.ndarray:
    z = np.abs(diff)
    h = np.where(z <= delta, 0.5 * np.square(diff), delta * (z - 0.5 * delta))
    return h.mean(axis=axes)


def latent_distances(encoder_model, obs: np.ndarray,
                     goal_latents: np.ndarray, delta: float) -> np.ndarray:
    """Huber distance (averaged over latent dimensions) between encoded
    observations and precomputed goal latents."""
    with ad.no_grad():
        x = encoder_model.encode(obs).numpy()
    return _huber_mean(x - goal_latents, delta, axes=-1)


def latent_reward(obs_t: np.ndarray, obs_g: np.ndarray, encoder_model,
                  spec: RewardSpec) -> float:
    """Reward for a single (current, goal) observation pair."""
    with ad.no_grad():
        xg = encoder_model.encode(obs_g).numpy()
    d = latent_distances(encoder_model, obs_t, xg, spec.huber_delta)
    return float(spec.apply(d)[0])


def pixel_distances(obs: np.ndarray, goal_obs: np.ndarray, delta: float) -> np.ndarray:
    a = obs.astype(np.float64) / 255.0
    b = goal_obs.astype(np.float64) / 255.0
    return _huber_mean(a - b, delta, axes=(-3, -2, -1))


def params_hash(params: ParameterSet) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generalized advantage estimation
# ---------------------------------------------------------------------------

def gae(rewards, values, discount: float, lam: float):
    """Standard recursion. ``values`` must hold one bootstrap entry more
    than ``rewards`` (zero for true terminal states). Returns (advantages,
    returns) where returns = advantages + values[:-1]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ValueError("values must have length len(rewards) + 1")
    adv = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + discount * values[t + 1] - values[t]
        acc = delta + discount * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


# ---------------------------------------------------------------------------
# policy / value networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RlConfig:
    steps_per_batch: int = RL_STEPS_PER_BATCH
    learning_rate: float = RL_STEP_SIZE
    epochs: int = RL_EPOCHS
    minibatch: int = RL_MINIBATCH
    clip_ratio: float = RL_CLIP_RATIO
    gae_lambda: float = GAE_LAMBDA
    discount: float = 0.99
    hidden: tuple = POLICY_HIDDEN
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_episode_steps: int = 80
    n_envs: int = 16
    eval_tasks: int = 50
    eval_period_batches: int = 4
    goal_conditioned: bool = True


class GaussianPolicy:
    """MLP mean with tanh activations and a state-independent learned
    diagonal log standard deviation; a same-shape value head lives in the
    same parameter set under its own prefix."""

    def __init__(self, obs_dim: int, action_dim: int, hidden,
                 rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        p = ParameterSet()
        for prefix, out_dim in (("pi", action_dim), ("vf", 1)):
            din = obs_dim
            for i, width in enumerate(self.hidden):
                bound = 1.0 / np.sqrt(din)
                p.add(f"{prefix}.fc{i}.w",
                      rng.uniform(-bound, bound, (din, width)).astype(dtype))
                p.add(f"{prefix}.fc{i}.b", np.zeros(width, dtype=dtype))
                din = width
            bound = 1.0 / np.sqrt(din)
            p.add(f"{prefix}.out.w",
                  rng.uniform(-bound, bound, (din, out_dim)).astype(dtype))
            p.add(f"{prefix}.out.b", np.zeros(out_dim, dtype=dtype))
        p.add("pi.logstd", np.zeros(action_dim, dtype=dtype))
        self.params = p

    def _mlp(self, prefix: str, obs: ad.Tensor) -> ad.Tensor:
        h = obs
        for i in range(len(self.hidden)):
            h = ad.tanh(ad.affine(h, self.params[f"{prefix}.fc{i}.w"],
                                  self.params[f"{prefix}.fc{i}.b"]))
        return ad.affine(h, self.params[f"{prefix}.out.w"],
                         self.params[f"{prefix}.out.b"])

    def mean(self, obs: ad.Tensor) -> ad.Tensor:
        return self._mlp("pi", obs)

    def value(self, obs: ad.Tensor) -> ad.Tensor:
        return self._mlp("vf", obs)

    def log_prob(self, obs: ad.Tensor, actions: ad.Tensor) -> ad.Tensor:
        """Diagonal Gaussian log density of ``actions`` (B, adim) -> (B,)."""
        mu = self.mean(obs)
        logstd = self.params["pi.logstd"]
        inv = ad.exp(ad.neg(logstd))
        z = ad.mul(ad.sub(actions, mu), ad.broadcast_to(inv, mu.shape))
        quad = ad.scale(ad.square(z).sum(axis=1), -0.5)
        lognorm = logstd.sum()  # stays in the graph: logstd is learned
        return ad.shift(ad.sub(quad, ad.broadcast_to(lognorm, quad.shape)),
                        -0.5 * self.action_dim * _LOG_2PI)

    def entropy(self) -> float:
        logstd = self.params["pi.logstd"].data
        return float(np.sum(logstd) + 0.5 * self.action_dim * (1.0 + _LOG_2PI))

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions and their log densities (numpy fast path)."""
        with ad.no_grad():
            mu = self.mean(ad.Tensor(obs.astype(ad.get_default_dtype()))).numpy()
        std = np.exp(self.params["pi.logstd"].data)
        noise = rng.standard_normal(mu.shape)
        a = mu + std * noise
        logp = -0.5 * np.sum(noise ** 2, axis=1) - np.sum(np.log(std)) \
            - 0.5 * self.action_dim * _LOG_2PI
        return a, logp

    def values(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            v = self.value(ad.Tensor(obs.astype(ad.get_default_dtype()))).numpy()
        return v[:, 0]


class RlDiverged(RuntimeError):
    pass


def ppo_update(policy: GaussianPolicy, batch: dict, opt: Adam,
               config: RlConfig, rng: np.random.Generator) -> dict:
    """Clipped-surrogate update over the configured epochs and minibatches;
    the value head regresses onto the empirical returns. Returns logged
    statistics (losses, approximate KL, entropy, clip fraction)."""
    dtype = ad.get_default_dtype()
    obs = batch["obs"].astype(dtype)
    acts = batch["actions"].astype(dtype)
    logp_old = batch["logp"].astype(dtype)
    adv = batch["advantages"].astype(np.float64)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv = adv.astype(dtype)
    rets = batch["returns"].astype(dtype)

    n = len(obs)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0,
             "clip_fraction": 0.0, "entropy": policy.entropy(), "batches": 0}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            o = ad.Tensor(obs[idx])
            logp = policy.log_prob(o, ad.Tensor(acts[idx]))
            ratio = ad.exp(ad.sub(logp, ad.Tensor(logp_old[idx])))
            a_t = ad.Tensor(adv[idx])
            clipped = ad.clip_by_value(ratio, 1.0 - config.clip_ratio,
                                       1.0 + config.clip_ratio)
            surrogate = ad.minimum(ad.mul(ratio, a_t), ad.mul(clipped, a_t))
            policy_loss = ad.neg(surrogate.mean())
            v = policy.value(o)
            value_loss = ad.square(ad.sub(v.reshape(len(idx)),
                                          ad.Tensor(rets[idx]))).mean()
            loss = ad.add(policy_loss, ad.scale(value_loss, config.value_coef))
            if config.entropy_coef:
                ent = policy.params["pi.logstd"].sum()
                loss = ad.sub(loss, ad.scale(ent, config.entropy_coef))
            if not math.isfinite(loss.item()):
                raise RlDiverged(f"non-finite objective (stats so far: {stats})")
            names = list(policy.params.keys())
            grads = ad.grad(loss, [policy.params[k] for k in names])
            opt.step({k: g.data for k, g in zip(names, grads)})
            stats["policy_loss"] += policy_loss.item()
            stats["value_loss"] += value_loss.item()
            stats["kl"] += float(np.mean(logp_old[idx] - logp.data))
            stats["clip_fraction"] += float(np.mean(
                np.abs(ratio.data - 1.0) > config.clip_ratio))
            stats["batches"] += 1
    for k in ("policy_loss", "value_loss", "kl", "clip_fraction"):
        stats[k] /= max(stats["batches"], 1)
    return stats


# ---------------------------------------------------------------------------
# transfer environments and the training loop
# ---------------------------------------------------------------------------

TRANSFER_ENVS = ("car", "point-hard")


def transfer_env_config(kind: str, image_size: int,
                        max_episode_steps: int) -> tuple:
    """(EnvConfig, task sampling mode) for a transfer environment. The car
    is rendered as the same disk the encoder was trained on, so point-robot
    features remain valid input."""
    if kind == "car":
        env = worlds.EnvConfig(kind="car", image_size=image_size,
                               max_steps=max_episode_steps)
        return env, "fovg"
    if kind == "point-hard":
        env = worlds.EnvConfig(kind="point", image_size=image_size,
                               max_steps=max_episode_steps, layout_mode="vovg")
        return env, "vovg"
    raise ValueError(f"unknown transfer env {kind!r}; expected {TRANSFER_ENVS}")


class _EnvPool:
    """Fixed-size pool of environments stepped in lockstep; episodes reset
    independently from counter-derived task streams."""

    def __init__(self, env: worlds.EnvConfig, mode: str, n: int, seed: int,
                 encoder_model, spec: RewardSpec, fixed_task=None):
        self.env = env
        self.mode = mode
        self.n = n
        self.seed = seed
        self.encoder = encoder_model
        self.spec = spec
        self.fixed_task = fixed_task
        self.episode_counter = 0
        self.states = [None] * n
        self.steps = np.zeros(n, dtype=int)
        self.goal_obs = np.zeros((n, env.image_size, env.image_size, 3), np.uint8)
        lat_dim = encoder_model.config.encoder.latent_dim
        self.goal_latents = np.zeros((n, lat_dim), dtype=np.float64)
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        rng = np.random.default_rng([self.seed, 5, self.episode_counter])
        if self.fixed_task is not None:
            base_state, goal_obs = self.fixed_task
            margin = self.env.robot_radius + 0.01
            start = worlds.free_point(rng, base_state.obstacles, margin)
            state = base_state.with_robot(start)
        else:
            state, goal_obs = worlds.sample_task(self.mode, rng, self.env)
        self.episode_counter += 1
        self.states[i] = state
        self.steps[i] = 0
        self.goal_obs[i] = goal_obs
        with ad.no_grad():
            self.goal_latents[i] = self.encoder.encode(goal_obs[None]).numpy()[0]

    def policy_obs(self, goal_conditioned: bool) -> np.ndarray:
        q = np.stack([worlds.embodiment(s, self.env) for s in self.states])
        if goal_conditioned:
            return np.concatenate([q, self.goal_latents], axis=1)
        return q

    def step(self, actions: np.ndarray):
        """Advance every env; returns (rewards, dones, successes)."""
        frames = np.zeros_like(self.goal_obs)
        for i in range(self.n):
            self.states[i] = worlds.step(self.states[i],
                                         np.clip(actions[i], -1, 1), self.env)
            frames[i] = worlds.render(self.states[i], self.env)
            self.steps[i] += 1
        if self.spec.source == "latent":
            d = latent_distances(self.encoder, frames, self.goal_latents,
                                 self.spec.huber_delta)
        else:
            d = pixel_distances(frames, self.goal_obs, self.spec.huber_delta)
        rewards = self.spec.apply(d)
        successes = np.array([worlds.success(s, self.env) for s in self.states])
        dones = successes | (self.steps >= self.env.max_steps)
        return rewards, dones, successes


def evaluate_policy(policy: GaussianPolicy, env: worlds.EnvConfig, mode: str,
                    encoder_model, n_tasks: int, seed: int,
                    goal_conditioned: bool = True,
                    fixed_task=None) -> float:
    """Held-out success rate under the deterministic (mean) policy."""
    successes = 0
    for i in range(n_tasks):
        rng = np.random.default_rng([seed, 6, i])
        if fixed_task is not None:
            base_state, goal_obs = fixed_task
            margin = env.robot_radius + 0.01
            state = base_state.with_robot(
                worlds.free_point(rng, base_state.obstacles, margin))
        else:
            state, goal_obs = worlds.sample_task(mode, rng, env)
        with ad.no_grad():
            gl = encoder_model.encode(goal_obs[None]).numpy()[0]
        for _ in range(env.max_steps):
            q = worlds.embodiment(state, env)
            obs = np.concatenate([q, gl]) if goal_conditioned else q
            with ad.no_grad():
                a = policy.mean(ad.Tensor(
                    obs[None].astype(ad.get_default_dtype()))).numpy()[0]
            state = worlds.step(state, np.clip(a, -1, 1), env)
            if worlds.success(state, env):
                successes += 1
                break
    return successes / n_tasks


@dataclass
class TransferResult:
    policy_path: str
    curve_path: str
    final_success: float
    env_steps: int


def train_transfer(env_kind: str, encoder_model, spec: RewardSpec,
                   config: RlConfig, total_steps: int, seed: int,
                   out_dir: str, fixed_task=None) -> TransferResult:
    """Optimize the derived reward with the policy-gradient learner on a
    transfer environment; no extrinsic reward is used. Writes a learning
    curve CSV (env steps, mean reward, held-out success, seed) and the
    final policy checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    image_size = encoder_model.config.encoder.image_hw[0]
    env, mode = transfer_env_config(env_kind, image_size,
                                    config.max_episode_steps)
    encoder_hash = params_hash(encoder_model.params)
    pool = _EnvPool(env, mode, config.n_envs, seed, encoder_model, spec,
                    fixed_task=fixed_task)
    obs_dim = env.embodiment_dim + (
        encoder_model.config.encoder.latent_dim if config.goal_conditioned else 0)
    policy = GaussianPolicy(obs_dim, env.action_dim, config.hidden,
                            np.random.default_rng([seed, 8]))
    opt = Adam(policy.params, lr=config.learning_rate)

    curve_path = os.path.join(out_dir, "learning_curve.csv")
    policy_path = os.path.join(out_dir, "policy.lpck")
    curve = open(curve_path, "w")
    curve.write("env_steps,mean_reward,success_rate,seed\n")

    env_steps = 0
    batch_index = 0
    success = 0.0

    def evaluate(step_count):
        rate = evaluate_policy(policy, env, mode, encoder_model,
                               config.eval_tasks, seed,
                               config.goal_conditioned, fixed_task=fixed_task)
        curve.write(f"{step_count},{mean_reward:.6f},{rate:.6f},{seed}\n")
        curve.flush()
        return rate

    traj = [{"obs": [], "act": [], "logp": [], "rew": []}
            for _ in range(pool.n)]

    def finalize(i, segments, truncated):
        """Close env i's current segment: zero bootstrap at true terminals,
        value bootstrap at step-limit or batch-boundary truncation."""
        t = traj[i]
        if not t["rew"]:
            return 0
        o = np.asarray(t["obs"])
        values = policy.values(o)
        if truncated:
            q = worlds.embodiment(pool.states[i], env)
            term_obs = np.concatenate([q, pool.goal_latents[i]]) \
                if config.goal_conditioned else q
            boot = float(policy.values(term_obs[None])[0])
        else:
            boot = 0.0
        adv, rets = gae(t["rew"], np.append(values, boot),
                        config.discount, config.gae_lambda)
        segments.append((o, np.asarray(t["act"]), np.asarray(t["logp"]),
                         adv, rets, np.asarray(t["rew"])))
        n_steps = len(t["rew"])
        traj[i] = {"obs": [], "act": [], "logp": [], "rew": []}
        return n_steps

    try:
        while env_steps < total_steps:
            segments = []
            collected = 0
            act_rng = np.random.default_rng([seed, 9, batch_index])
            while collected < config.steps_per_batch:
                obs = pool.policy_obs(config.goal_conditioned)
                actions, logp = policy.act(obs, act_rng)
                rewards, dones, successes = pool.step(actions)
                collected += pool.n
                for i in range(pool.n):
                    t = traj[i]
                    t["obs"].append(obs[i])
                    t["act"].append(actions[i])
                    t["logp"].append(logp[i])
                    t["rew"].append(rewards[i])
                    if dones[i]:
                        finalize(i, segments, truncated=not successes[i])
                        pool._reset(i)
            for i in range(pool.n):  # cut in-flight episodes at the boundary
                finalize(i, segments, truncated=True)
            batch = {
                "obs": np.concatenate([s[0] for s in segments]),
                "actions": np.concatenate([s[1] for s in segments]),
                "logp": np.concatenate([s[2] for s in segments]),
                "advantages": np.concatenate([s[3] for s in segments]),
                "returns": np.concatenate([s[4] for s in segments]),
            }
            mean_reward = float(np.mean(np.concatenate([s[5] for s in segments])))
            env_steps += len(batch["obs"])
            ppo_update(policy, batch, opt, config,
                       np.random.default_rng([seed, 10, batch_index]))
            batch_index += 1
            if batch_index % config.eval_period_batches == 0 \
                    or env_steps >= total_steps:
                success = evaluate(env_steps)
    finally:
        curve.close()
    if params_hash(encoder_model.params) != encoder_hash:
        raise RuntimeError("encoder parameters changed during reward use")
    save_checkpoint(policy_path, policy.params, None,
                    extra={"env": env_kind, "seed": seed,
                           "obs_dim": obs_dim, "action_dim": env.action_dim,
                           "hidden": list(config.hidden),
                           "reward_source": spec.source,
                           "env_steps": env_steps})
    return TransferResult(policy_path=policy_path, curve_path=curve_path,
                          final_success=success, env_steps=env_steps)
