"""Built-in deterministic control tasks, scripted experts and expert demonstrations.

Dynamics, observation, reward and expert functions are written with
``jax.numpy`` so whole episodes (and whole training chunks) can run inside
``jax.lax.scan``. Actions live in [-1, 1]^act_dim.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from cfil.ratio import InputView

log = logging.getLogger(__name__)


class ExpertQualityError(RuntimeError):
    """Recorded expert return strays from the frozen reference."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    state_dim: int
    horizon: int
    dynamics: Callable = field(repr=False)
    observe: Callable = field(repr=False)
    reward: Callable = field(repr=False)
    reset: Callable = field(repr=False)
    expert: Callable = field(repr=False)
    expert_ref: float = 0.0
    random_ref: float = 0.0
    expert_ref_std: float = 0.0


# ---------------------------------------------------------------- point mass

PM_DT = 0.05
PM_FRICTION = 0.1
PM_MASS = 0.5
PM_GOAL = (0.6, 0.8)
PM_START_NOISE = 0.1
PM_KP, PM_KD = 16.0, 4.0


def point_mass_dynamics(state, action):
    """Semi-implicit Euler: v += dt * (a / m - friction * v); p += dt * v."""
    a = jnp.clip(action, -1.0, 1.0)
    pos, vel = state[:2], state[2:]
    vel = vel + PM_DT * (a / PM_MASS - PM_FRICTION * vel)
    pos = pos + PM_DT * vel
    return jnp.concatenate([pos, vel])


def point_mass_reward(state, action, next_state):
    return -jnp.linalg.norm(next_state[:2] - jnp.asarray(PM_GOAL))


def point_mass_reset(key):
    pos = jax.random.uniform(key, (2,), minval=-PM_START_NOISE, maxval=PM_START_NOISE)
    return jnp.concatenate([pos, jnp.zeros(2)])


def point_mass_expert(obs):
    """Saturated PD controller toward the goal."""
    pos, vel = obs[:2], obs[2:]
    return jnp.clip(PM_KP * (jnp.asarray(PM_GOAL) - pos) - PM_KD * vel, -1.0, 1.0)


# ---------------------------------------------------------------- pendulum

PEND_DT = 0.05
PEND_G, PEND_L, PEND_M = 10.0, 1.0, 1.0
PEND_MAX_TORQUE = 2.0
PEND_MAX_SPEED = 8.0
PEND_START_NOISE = 0.05
PEND_KP, PEND_KD, PEND_CAPTURE = 20.0, 4.0, 0.2


def _wrap(angle):
    return jnp.mod(angle + jnp.pi, 2 * jnp.pi) - jnp.pi


def pendulum_dynamics(state, action):
    """theta = 0 hangs down; theta_ddot = -(g/l) sin(theta) + torque / (m l^2)."""
    theta, omega = state[0], state[1]
    torque = PEND_MAX_TORQUE * jnp.clip(action[0], -1.0, 1.0)
    omega = omega + PEND_DT * (-(PEND_G / PEND_L) * jnp.sin(theta) + torque / (PEND_M * PEND_L ** 2))
    omega = jnp.clip(omega, -PEND_MAX_SPEED, PEND_MAX_SPEED)
    theta = theta + PEND_DT * omega
    return jnp.stack([theta, omega])


def pendulum_observe(state):
    return jnp.stack([jnp.cos(state[0]), jnp.sin(state[0]), state[1]])


def pendulum_reward(state, action, next_state):
    phi = _wrap(next_state[0] - jnp.pi)
    torque = PEND_MAX_TORQUE * jnp.clip(action[0], -1.0, 1.0)
    return -(phi ** 2 + 0.1 * next_state[1] ** 2 + 0.001 * torque ** 2)


def pendulum_reset(key):
    return jnp.stack([jax.random.uniform(key, (), minval=-PEND_START_NOISE, maxval=PEND_START_NOISE), 0.0])


def pendulum_expert(obs):
    """Bang-bang energy pumping, PD capture within PEND_CAPTURE rad of upright."""
    theta = jnp.arctan2(obs[1], obs[0])
    omega = obs[2]
    phi = _wrap(theta - jnp.pi)
    energy = 0.5 * omega ** 2 - (PEND_G / PEND_L) * jnp.cos(theta)
    pump = jnp.where((PEND_G / PEND_L - energy) * omega >= 0, 1.0, -1.0)
    hold = jnp.clip(-PEND_KP * phi - PEND_KD * omega, -1.0, 1.0)
    return jnp.where(jnp.abs(phi) < PEND_CAPTURE, hold, pump)[None]


# Mean returns over 50 episodes (reset keys 0..49): scripted expert, and a
# uniform-random policy (keys 10_000..10_049), plus the per-episode standard
# deviation of the expert. Regenerated by ``measure_reference_returns``;
# tests check the frozen values.
_REFS = {
    "pointmass": (-12.403472807813413, -427.68271787904735, 1.1790268501254282),
    "pendulum": (-728.9796997922815, -1848.0562526947524, 3.974907249426044),
}

POINT_MASS = EnvSpec(
    name="pointmass", obs_dim=4, act_dim=2, state_dim=4, horizon=200,
    dynamics=point_mass_dynamics, observe=lambda s: s, reward=point_mass_reward,
    reset=point_mass_reset, expert=point_mass_expert,
    expert_ref=_REFS["pointmass"][0], random_ref=_REFS["pointmass"][1], expert_ref_std=_REFS["pointmass"][2],
)

PENDULUM = EnvSpec(
    name="pendulum", obs_dim=3, act_dim=1, state_dim=2, horizon=200,
    dynamics=pendulum_dynamics, observe=pendulum_observe, reward=pendulum_reward,
    reset=pendulum_reset, expert=pendulum_expert,
    expert_ref=_REFS["pendulum"][0], random_ref=_REFS["pendulum"][1], expert_ref_std=_REFS["pendulum"][2],
)

ENVS = {"pointmass": POINT_MASS, "pendulum": PENDULUM}


def get_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; available: {sorted(ENVS)}") from None


def step(spec: EnvSpec, state, action, t: int = 0):
    """Host-side single step. Out-of-box actions are clipped and logged."""
    action = np.asarray(action, dtype=np.float64)
    if np.any(np.abs(action) > 1.0):
        log.warning("%s: action %s outside [-1, 1]; clipped", spec.name, action)
        action = np.clip(action, -1.0, 1.0)
    next_state = np.asarray(spec.dynamics(jnp.asarray(state, dtype=jnp.float64), jnp.asarray(action)))
    return next_state, t + 1 >= spec.horizon


# ---------------------------------------------------------------- rollouts


def rollout(spec: EnvSpec, policy: Callable, params, key, horizon: int | None = None):
    """One episode under ``policy(params, obs, key) -> action``; jit/vmap friendly.

    Returns a dict of per-step arrays (obs, act, next_obs, reward) plus the
    initial state.
    """
    horizon = spec.horizon if horizon is None else horizon
    reset_key, run_key = jax.random.split(key)
    state0 = spec.reset(reset_key)

    def body(state, k):
        obs = spec.observe(state)
        act = jnp.clip(policy(params, obs, k), -1.0, 1.0)
        nxt = spec.dynamics(state, act)
        return nxt, (obs, act, spec.observe(nxt), spec.reward(state, act, nxt))

    _, (obs, act, next_obs, rew) = jax.lax.scan(body, state0, jax.random.split(run_key, horizon))
    return {"obs": obs, "act": act, "next_obs": next_obs, "reward": rew}


def expert_policy(spec: EnvSpec) -> Callable:
    return lambda params, obs, key: spec.expert(obs)


def random_policy(spec: EnvSpec) -> Callable:
    return lambda params, obs, key: jax.random.uniform(key, (spec.act_dim,), minval=-1.0, maxval=1.0)


def batch_returns(spec: EnvSpec, policy: Callable, params, keys) -> np.ndarray:
    run = jax.jit(jax.vmap(lambda k: rollout(spec, policy, params, k)["reward"].sum()))
    return np.asarray(run(keys))


def episode_keys(start: int, n: int):
    return jnp.stack([jax.random.PRNGKey(start + i) for i in range(n)])


def measure_reference_returns(spec: EnvSpec, n: int = 50) -> tuple[float, float, float]:
    """(expert mean, random mean, expert per-episode std)."""
    expert = batch_returns(spec, expert_policy(spec), None, episode_keys(0, n))
    rand = batch_returns(spec, random_policy(spec), None, episode_keys(10_000, n))
    return float(expert.mean()), float(rand.mean()), float(expert.std())


# ---------------------------------------------------------------- demonstrations


@dataclass(frozen=True)
class Trajectory:
    obs: np.ndarray
    act: np.ndarray
    next_obs: np.ndarray
    env_reward: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def ret(self) -> float:
        return float(self.env_reward.sum())

    @classmethod
    def from_rollout(cls, out: dict) -> "Trajectory":
        n = out["obs"].shape[0]
        done = np.zeros(n, dtype=bool)
        done[-1] = True
        return cls(np.asarray(out["obs"]), np.asarray(out["act"]), np.asarray(out["next_obs"]),
                   np.asarray(out["reward"]), done)


@dataclass(frozen=True)
class DemoSet:
    """Expert trajectories plus a non-mutating access view and subsample stride."""

    env_name: str
    trajectories: tuple[Trajectory, ...]
    view: str = "state-action"
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        InputView(self.view, 1, 1)  # validates the tag

    @property
    def spec(self) -> EnvSpec:
        return get_env(self.env_name)

    def with_view(self, tag: str) -> "DemoSet":
        return replace(self, view=tag)

    def with_stride(self, stride: int) -> "DemoSet":
        return replace(self, stride=stride)

    def _kept(self, arr_name: str) -> np.ndarray:
        parts = [getattr(tr, arr_name)[:: self.stride] for tr in self.trajectories]
        return np.concatenate(parts, axis=0)

    def __len__(self) -> int:
        return sum(len(range(0, len(tr), self.stride)) for tr in self.trajectories)

    def state_action(self) -> np.ndarray:
        return np.concatenate([self._kept("obs"), self._kept("act")], axis=1)

    def state_pairs(self) -> np.ndarray:
        return np.concatenate([self._kept("obs"), self._kept("next_obs")], axis=1)

    def states(self) -> np.ndarray:
        return self._kept("obs")

    def input_view(self) -> InputView:
        return InputView(self.view, self.spec.obs_dim, self.spec.act_dim)

    def inputs(self) -> np.ndarray:
        """Estimator inputs under the active view (actions never leak into state views)."""
        if self.view == "state-action":
            return self.state_action()
        if self.view == "state-pair":
            return self.state_pairs()
        return self.states()

    @property
    def mean_return(self) -> float:
        return float(np.mean([tr.ret for tr in self.trajectories]))


def record_demos(spec: EnvSpec, policy: Callable | None = None, n_traj: int = 1, seed: int = 0,
                 params=None, check_quality: bool = True) -> DemoSet:
    """Full-horizon rollouts (scripted expert by default) with reset keys ``seed*1000 + i``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    scripted = policy is None
    policy = expert_policy(spec) if scripted else policy
    run = jax.jit(lambda k: rollout(spec, policy, params, k))
    trajs = tuple(Trajectory.from_rollout(run(jax.random.PRNGKey(seed * 1000 + i))) for i in range(n_traj))
    demos = DemoSet(spec.name, trajs, seed=seed)
    if scripted and check_quality:
        # one-sided: a lucky draw above the reference is fine; allow 5% plus
        # three standard errors of per-episode noise below it
        ref = spec.expert_ref
        floor = ref - (0.05 * abs(ref) + 3.0 * spec.expert_ref_std / math.sqrt(n_traj))
        if demos.mean_return < floor:
            raise ExpertQualityError(
                f"{spec.name}: expert return {demos.mean_return:.4f} is below {floor:.4f} "
                f"(reference {ref:.4f})"
            )
    return demos


def _fmt(v) -> str:
    return repr(float(v))


def write_demos(path, demos: DemoSet) -> None:
    """'#'-prefixed header lines, then CSV rows (t, s..., a..., r_env, s'..., done)."""
    spec = demos.spec
    buf = io.StringIO()
    buf.write(f"# env {spec.name}\n# obs_dim {spec.obs_dim}\n# act_dim {spec.act_dim}\n")
    buf.write(f"# horizon {spec.horizon}\n# n_traj {len(demos.trajectories)}\n# seed {demos.seed}\n")
    cols = (["t"] + [f"s{i}" for i in range(spec.obs_dim)] + [f"a{i}" for i in range(spec.act_dim)]
            + ["r_env"] + [f"next_s{i}" for i in range(spec.obs_dim)] + ["done"])
    buf.write(",".join(cols) + "\n")
    for tr in demos.trajectories:
        for t in range(len(tr)):
            row = ([str(t)] + [_fmt(v) for v in tr.obs[t]] + [_fmt(v) for v in tr.act[t]]
                   + [_fmt(tr.env_reward[t])] + [_fmt(v) for v in tr.next_obs[t]] + [str(int(tr.done[t]))])
            buf.write(",".join(row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_demos(path) -> DemoSet:
    header, rows = {}, []
    lines = Path(path).read_text().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            key, value = line[1:].split(None, 1)
            header[key] = value.strip()
        else:
            body_start = i
            break
    for line in lines[body_start + 1:]:
        if line:
            rows.append(line.split(","))
    spec = get_env(header["env"])
    o, a = int(header["obs_dim"]), int(header["act_dim"])
    data = np.array([[float(v) for v in r] for r in rows])
    starts = np.flatnonzero(data[:, 0] == 0).tolist() + [len(data)]
    trajs = []
    for s, e in zip(starts[:-1], starts[1:]):
        d = data[s:e]
        trajs.append(Trajectory(d[:, 1:1 + o], d[:, 1 + o:1 + o + a], d[:, 2 + o + a:2 + 2 * o + a],
                                d[:, 1 + o + a], d[:, -1].astype(bool)))
    if len(trajs) != int(header["n_traj"]):
        raise ValueError(f"{path}: header says {header['n_traj']} trajectories, found {len(trajs)}")
    return DemoSet(spec.name, tuple(trajs), seed=int(header["seed"]))
