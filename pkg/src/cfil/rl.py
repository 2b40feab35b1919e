"""Soft actor-critic (tanh-Gaussian policy, twin critics, learned temperature).

Everything that runs once per environment step (acting, storing, one SAC
update) is fused into a single ``jax.lax.fori_loop`` so a chunk of
thousands of steps costs one dispatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from cfil.envs import EnvSpec
from cfil.numcore import (
    MlpSpec,
    NumericError,
    ParamStore,
    adam_init,
    adam_step,
    eval_mlp,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
)
from cfil.ratio import InputView, StateError

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    polyak: float = 0.995
    lr: float = 1e-3
    batch_size: int = 100
    hidden: tuple[int, ...] = (64, 64)
    start_steps: int = 2000
    update_after: int = 1000
    init_temperature: float = 0.2
    target_entropy: float | None = None


class ReplayBuffer(NamedTuple):
    """Ring of transitions; ``rew`` holds the synthetic reward."""

    obs: jnp.ndarray
    act: jnp.ndarray
    rew: jnp.ndarray
    obs2: jnp.ndarray
    done: jnp.ndarray
    size: jnp.ndarray
    ptr: jnp.ndarray

    @classmethod
    def create(cls, capacity: int, obs_dim: int, act_dim: int) -> "ReplayBuffer":
        z = partial(jnp.zeros, dtype=jnp.float64)
        return cls(z((capacity, obs_dim)), z((capacity, act_dim)), z(capacity), z((capacity, obs_dim)),
                   z(capacity), jnp.zeros((), jnp.int64), jnp.zeros((), jnp.int64))

    @property
    def capacity(self) -> int:
        return self.obs.shape[0]

    def store(self, obs, act, rew, obs2, done) -> "ReplayBuffer":
        """Functional insert; evicts the oldest entry once full."""
        i = self.ptr
        return ReplayBuffer(
            self.obs.at[i].set(obs), self.act.at[i].set(act), self.rew.at[i].set(rew),
            self.obs2.at[i].set(obs2), self.done.at[i].set(done),
            jnp.minimum(self.size + 1, self.capacity), (i + 1) % self.capacity,
        )

    @property
    def n_stored(self) -> int:
        return int(self.size)

    def arrays(self):
        n = int(self.size)
        return (np.asarray(self.obs)[:n], np.asarray(self.act)[:n], np.asarray(self.obs2)[:n])

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if int(self.size) == 0:
            raise StateError("replay buffer is empty")
        return rng.integers(0, int(self.size), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        idx = self.sample_indices(n, rng)
        return {k: np.asarray(getattr(self, k))[idx] for k in ("obs", "act", "rew", "obs2", "done")}

    def as_source(self, view: InputView) -> "BufferSource":
        return BufferSource(self, view)

    def with_rewards(self, rewards: np.ndarray) -> "ReplayBuffer":
        full = np.zeros(self.capacity)
        full[: len(rewards)] = rewards
        return self._replace(rew=jnp.asarray(full))


class BufferSource:
    """Adapter letting estimators sample view inputs uniformly from a buffer."""

    def __init__(self, buffer: ReplayBuffer, view: InputView):
        self.buffer = buffer
        self.view = view

    def sample_inputs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = self.buffer.sample_indices(n, rng)
        b = self.buffer
        return self.view.project(np.asarray(b.obs)[idx], np.asarray(b.act)[idx], np.asarray(b.obs2)[idx])


# ---------------------------------------------------------------- networks


def policy_spec(obs_dim: int, act_dim: int, hidden) -> MlpSpec:
    return MlpSpec.dense((obs_dim, *hidden, 2 * act_dim), "relu")


def critic_spec(obs_dim: int, act_dim: int, hidden) -> MlpSpec:
    return MlpSpec.dense((obs_dim + act_dim, *hidden, 1), "relu")


def gaussian_head(pi, obs, spec: MlpSpec):
    out = eval_mlp(pi, obs, spec)
    act_dim = spec.sizes[-1] // 2
    mu, log_std = out[..., :act_dim], out[..., act_dim:]
    return mu, jnp.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def tanh_gaussian_logp(u, mu, log_std):
    """log density of a = tanh(u), u ~ N(mu, exp(log_std)^2), summed over action dims."""
    z = (u - mu) / jnp.exp(log_std)
    logp = jnp.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi), axis=-1)
    # log(1 - tanh(u)^2) written stably
    return logp - jnp.sum(2.0 * (math.log(2.0) - u - jax.nn.softplus(-2.0 * u)), axis=-1)


def sample_action(pi, obs, key, spec: MlpSpec):
    mu, log_std = gaussian_head(pi, obs, spec)
    u = mu + jnp.exp(log_std) * jax.random.normal(key, mu.shape)
    return jnp.tanh(u), tanh_gaussian_logp(u, mu, log_std)


def q_value(q, obs, act, spec: MlpSpec):
    return eval_mlp(q, jnp.concatenate([obs, act], axis=-1), spec)[..., 0]


class SacParams(NamedTuple):
    pi: ParamStore
    q1: ParamStore
    q2: ParamStore
    q1_targ: ParamStore
    q2_targ: ParamStore
    log_alpha: jnp.ndarray


class SacOpt(NamedTuple):
    pi: object
    q: object
    alpha: object


class SacState(NamedTuple):
    params: SacParams
    opt: SacOpt


def critic_loss(qs, params: SacParams, batch, backup, q_spec):
    q1, q2 = qs
    obs, act = batch["obs"], batch["act"]
    return (jnp.mean((q_value(q1, obs, act, q_spec) - backup) ** 2)
            + jnp.mean((q_value(q2, obs, act, q_spec) - backup) ** 2))


def td_backup(params: SacParams, batch, key, cfg: SacConfig, pi_spec, q_spec):
    a2, logp2 = sample_action(params.pi, batch["obs2"], key, pi_spec)
    q_targ = jnp.minimum(q_value(params.q1_targ, batch["obs2"], a2, q_spec),
                         q_value(params.q2_targ, batch["obs2"], a2, q_spec))
    alpha = jnp.exp(params.log_alpha)
    return batch["rew"] + cfg.gamma * (1.0 - batch["done"]) * (q_targ - alpha * logp2)


def sac_step(state: SacState, batch, key, cfg: SacConfig, pi_spec: MlpSpec, q_spec: MlpSpec, target_entropy):
    """Critic, actor, temperature and polyak updates on one batch; pure."""
    p, opt = state
    k_targ, k_pi = jax.random.split(key)
    backup = jax.lax.stop_gradient(td_backup(p, batch, k_targ, cfg, pi_spec, q_spec))
    loss_q, g_q = jax.value_and_grad(critic_loss)((p.q1, p.q2), p, batch, backup, q_spec)
    (q1, q2), q_opt = adam_step((p.q1, p.q2), g_q, opt.q, cfg.lr)

    alpha = jnp.exp(p.log_alpha)

    def actor_loss(pi):
        a, logp = sample_action(pi, batch["obs"], k_pi, pi_spec)
        q_pi = jnp.minimum(q_value(q1, batch["obs"], a, q_spec), q_value(q2, batch["obs"], a, q_spec))
        return jnp.mean(alpha * logp - q_pi), (logp, q_pi)

    (loss_pi, (logp, q_pi)), g_pi = jax.value_and_grad(actor_loss, has_aux=True)(p.pi)
    pi, pi_opt = adam_step(p.pi, g_pi, opt.pi, cfg.lr)

    logp = jax.lax.stop_gradient(logp)
    loss_alpha, g_alpha = jax.value_and_grad(lambda la: -jnp.mean(la * (logp + target_entropy)))(p.log_alpha)
    log_alpha, alpha_opt = adam_step(p.log_alpha, g_alpha, opt.alpha, cfg.lr)

    mix = lambda t, o: cfg.polyak * t + (1.0 - cfg.polyak) * o  # noqa: E731
    q1_targ = jax.tree_util.tree_map(mix, p.q1_targ, q1)
    q2_targ = jax.tree_util.tree_map(mix, p.q2_targ, q2)

    new = SacState(SacParams(pi, q1, q2, q1_targ, q2_targ, log_alpha), SacOpt(pi_opt, q_opt, alpha_opt))
    diag = {"loss_q": loss_q, "loss_pi": loss_pi, "loss_alpha": loss_alpha, "alpha": alpha,
            "q_mean": jnp.mean(q_pi), "entropy": -jnp.mean(logp)}
    return new, diag


DIAG_KEYS = ("loss_q", "loss_pi", "loss_alpha", "alpha", "q_mean", "entropy")


class SacLearner:
    """Host-side wrapper around the pure SAC functions."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: SacConfig = SacConfig(), seed: int = 0,
                 zero_policy_head: bool = False):
        self.obs_dim, self.act_dim, self.cfg = obs_dim, act_dim, cfg
        self.pi_spec = policy_spec(obs_dim, act_dim, cfg.hidden)
        self.q_spec = critic_spec(obs_dim, act_dim, cfg.hidden)
        self.target_entropy = float(-act_dim if cfg.target_entropy is None else cfg.target_entropy)
        rng = np.random.default_rng(seed)
        pi = init_mlp(self.pi_spec, rng, zero_last=zero_policy_head)
        q1, q2 = init_mlp(self.q_spec, rng), init_mlp(self.q_spec, rng)
        params = SacParams(pi, q1, q2, q1, q2, jnp.asarray(math.log(cfg.init_temperature)))
        opt = SacOpt(adam_init(pi), adam_init((q1, q2)), adam_init(params.log_alpha))
        self.state = SacState(params, opt)
        self.key = jax.random.PRNGKey(seed)
        self._step = jax.jit(partial(sac_step, cfg=cfg, pi_spec=self.pi_spec, q_spec=self.q_spec,
                                     target_entropy=self.target_entropy))
        self._act = jax.jit(self._act_impl, static_argnums=2)

    @property
    def params(self) -> SacParams:
        return self.state.params

    def _act_impl(self, pi, obs, deterministic, key):
        if deterministic:
            return jnp.tanh(gaussian_head(pi, obs, self.pi_spec)[0])
        return sample_action(pi, obs, key, self.pi_spec)[0]

    def act(self, obs, deterministic: bool = False, seed: int | None = None) -> np.ndarray:
        obs = jnp.asarray(obs, dtype=jnp.float64)
        if seed is None:
            self.key, key = jax.random.split(self.key)
        else:
            key = jax.random.PRNGKey(seed)
        return np.asarray(self._act(self.params.pi, obs, deterministic, key))

    def update(self, buffer: ReplayBuffer, batch_size: int | None = None,
               reward_fn: Callable | None = None, rng: np.random.Generator | None = None) -> dict:
        """One SAC update. ``reward_fn(obs, act, obs2)`` recomputes rewards for the sampled batch."""
        batch_size = batch_size or self.cfg.batch_size
        if int(buffer.size) < batch_size:
            raise StateError(f"buffer holds {int(buffer.size)} transitions, need {batch_size}")
        rng = rng if rng is not None else np.random.default_rng()
        batch = buffer.sample(batch_size, rng)
        if reward_fn is not None:
            batch["rew"] = np.asarray(reward_fn(batch["obs"], batch["act"], batch["obs2"]), dtype=np.float64)
        self.key, key = jax.random.split(self.key)
        state, diag = self._step(self.state, {k: jnp.asarray(v) for k, v in batch.items()}, key)
        diag = {k: float(v) for k, v in diag.items()}
        if not all(math.isfinite(v) for v in diag.values()):
            raise NumericError(f"non-finite SAC losses: {diag}")
        self.state = state
        return diag

    def save(self, path) -> None:
        p = self.params
        store = ParamStore.join({"pi": p.pi, "q1": p.q1, "q2": p.q2, "q1_targ": p.q1_targ, "q2_targ": p.q2_targ,
                                 "temp": ParamStore({"log_alpha": p.log_alpha})})
        save_checkpoint(path, store)

    def load(self, path) -> None:
        parts = load_checkpoint(path).split()
        params = SacParams(parts["pi"], parts["q1"], parts["q2"], parts["q1_targ"], parts["q2_targ"],
                           parts["temp"]["log_alpha"])
        self.state = SacState(params, self.state.opt)


def deterministic_policy(pi_spec: MlpSpec) -> Callable:
    return lambda pi, obs, key: jnp.tanh(gaussian_head(pi, obs, pi_spec)[0])


def stochastic_policy(pi_spec: MlpSpec) -> Callable:
    return lambda pi, obs, key: sample_action(pi, obs, key, pi_spec)[0]


# ---------------------------------------------------------------- fused training


class Carry(NamedTuple):
    sac: SacState
    buffer: ReplayBuffer
    env_state: jnp.ndarray
    ep_len: jnp.ndarray
    key: jnp.ndarray
    t: jnp.ndarray
    diag_sum: dict
    n_updates: jnp.ndarray
    syn_reward_sum: jnp.ndarray


def make_chunk_runner(env: EnvSpec, learner: SacLearner, view: InputView, reward_fn: Callable):
    """Build ``run(carry, n_steps, reward_params) -> carry``.

    Each step: act (uniform random before ``start_steps``), advance the env,
    score the transition with ``reward_fn(reward_params, inputs)``, store it,
    and once ``t >= update_after`` take one SAC step on a uniform batch.
    Horizon ends are time limits, so stored ``done`` stays 0.
    """
    cfg = learner.cfg
    pi_spec = learner.pi_spec
    step_fn = partial(sac_step, cfg=cfg, pi_spec=pi_spec, q_spec=learner.q_spec,
                      target_entropy=learner.target_entropy)

    def body(_, state):
        c, reward_params = state
        key, k_act, k_rand, k_reset, k_idx, k_upd = jax.random.split(c.key, 6)
        obs = env.observe(c.env_state)
        a_pi = sample_action(c.sac.params.pi, obs, k_act, pi_spec)[0]
        a_rand = jax.random.uniform(k_rand, (env.act_dim,), minval=-1.0, maxval=1.0)
        act = jnp.where(c.t < cfg.start_steps, a_rand, a_pi)
        nxt = env.dynamics(c.env_state, act)
        obs2 = env.observe(nxt)
        r = reward_fn(reward_params, view.project(obs, act, obs2, xp=jnp)[None])[0]
        buffer = c.buffer.store(obs, act, r, obs2, 0.0)
        ep_len = c.ep_len + 1
        end = ep_len >= env.horizon
        env_state = jnp.where(end, env.reset(k_reset), nxt)
        ep_len = jnp.where(end, 0, ep_len)

        def do_update(s):
            idx = jax.random.randint(k_idx, (cfg.batch_size,), 0, buffer.size)
            batch = {"obs": buffer.obs[idx], "act": buffer.act[idx], "rew": buffer.rew[idx],
                     "obs2": buffer.obs2[idx], "done": buffer.done[idx]}
            new, diag = step_fn(s, batch, k_upd)
            return new, {k: diag[k] for k in DIAG_KEYS}, 1

        def skip(s):
            return s, {k: jnp.zeros(()) for k in DIAG_KEYS}, 0

        sac, diag, did = jax.lax.cond(c.t >= cfg.update_after, do_update, skip, c.sac)
        diag_sum = {k: c.diag_sum[k] + diag[k] for k in DIAG_KEYS}
        c = c._replace(sac=sac, buffer=buffer, env_state=env_state, ep_len=ep_len, key=key, t=c.t + 1,
                       diag_sum=diag_sum, n_updates=c.n_updates + did, syn_reward_sum=c.syn_reward_sum + r)
        return c, reward_params

    @jax.jit
    def run(carry, n_steps, reward_params):
        return jax.lax.fori_loop(0, n_steps, body, (carry, reward_params))[0]

    return run


def init_carry(env: EnvSpec, learner: SacLearner, capacity: int, seed: int) -> Carry:
    key = jax.random.PRNGKey(seed)
    key, k_reset = jax.random.split(key)
    return Carry(
        sac=learner.state,
        buffer=ReplayBuffer.create(capacity, env.obs_dim, env.act_dim),
        env_state=env.reset(k_reset),
        ep_len=jnp.zeros((), jnp.int64),
        key=key,
        t=jnp.zeros((), jnp.int64),
        diag_sum={k: jnp.zeros(()) for k in DIAG_KEYS},
        n_updates=jnp.zeros((), jnp.int64),
        syn_reward_sum=jnp.zeros(()),
    )


def evaluate_policy(env: EnvSpec, pi_spec: MlpSpec, pi, keys) -> np.ndarray:
    """Deterministic-policy returns, one per key, episodes vectorized."""
    return _eval_fn(env, pi_spec)(pi, keys)


_EVAL_CACHE: dict = {}


def _eval_fn(env: EnvSpec, pi_spec: MlpSpec):
    from cfil.envs import rollout

    key = (env.name, pi_spec)
    if key not in _EVAL_CACHE:
        policy = deterministic_policy(pi_spec)
        _EVAL_CACHE[key] = jax.jit(jax.vmap(lambda pi, k: rollout(env, policy, pi, k)["reward"].sum(),
                                            in_axes=(None, 0)))
    fn = _EVAL_CACHE[key]
    return lambda pi, keys: np.asarray(fn(pi, keys))
