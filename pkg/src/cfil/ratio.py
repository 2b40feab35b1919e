"""Coupled Donsker-Varadhan estimator of the agent/expert log density ratio.

Two flows are tied together through the test function

    x(v) = squash(log p_agent(v) - log q_expert(v))

and trained jointly to minimise

    J = log mean_expert exp(x) - mean_agent x      (+ alpha * flow MLE loss)

whose optimum makes x the log ratio log(p_agent / p_expert) up to a constant.
The imitation reward is -x. The log-mean-exp minibatch bias is not corrected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import partial
from typing import Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from cfil.flow import FlowModel, flow_log_prob
from cfil.numcore import DimensionError, NumericError, adam_init, adam_step

TRACE_FIELDS = ("step", "J", "L", "mean_x_expert", "mean_x_agent")


class StateError(RuntimeError):
    """Operation attempted on an object that is not ready for it (e.g. empty buffer)."""


@dataclass(frozen=True)
class Squasher:
    """x -> outer * tanh(x / inner); ``outer=None`` is the identity (no squashing)."""

    outer: float | None = 6.0
    inner: float = 15.0

    def __call__(self, x, xp=jnp):
        if self.outer is None:
            return x
        return self.outer * xp.tanh(x / self.inner)

    @classmethod
    def identity(cls) -> "Squasher":
        return cls(None, 1.0)

    @property
    def bound(self) -> float:
        return math.inf if self.outer is None else self.outer

    @property
    def slope_at_zero(self) -> float:
        return 1.0 if self.outer is None else self.outer / self.inner


@dataclass(frozen=True)
class InputView:
    """Which part of a transition the estimator sees."""

    tag: str
    obs_dim: int
    act_dim: int

    TAGS = ("state-action", "state-pair", "single-state")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown view {self.tag!r}; choose from {self.TAGS}")

    @property
    def dim(self) -> int:
        if self.tag == "state-action":
            return self.obs_dim + self.act_dim
        if self.tag == "state-pair":
            return 2 * self.obs_dim
        return self.obs_dim

    def project(self, obs, act, next_obs, xp=np):
        if self.tag == "state-action":
            return xp.concatenate([obs, act], axis=-1)
        if self.tag == "state-pair":
            return xp.concatenate([obs, next_obs], axis=-1)
        return obs


def smooth_batch(batch, beta: float, rng: np.random.Generator) -> np.ndarray:
    """v + beta * v * u with u ~ U(-1/2, 1/2)^dim drawn fresh for every vector."""
    batch = np.asarray(batch, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return batch
    u = rng.uniform(-0.5, 0.5, size=batch.shape)
    return batch + beta * batch * u


def log_mean_exp(x):
    return logsumexp(x) - jnp.log(x.shape[0])


def dv_objective(x_expert, x_agent):
    """log E_expert[e^x] - E_agent[x]; minimised by the estimator."""
    return log_mean_exp(x_expert) - jnp.mean(x_agent)


def sample_rows(source, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw with replacement from an array, or from any object with ``sample_inputs``."""
    if hasattr(source, "sample_inputs"):
        return source.sample_inputs(n, rng)
    source = np.asarray(source)
    if source.shape[0] == 0:
        raise StateError("cannot sample from an empty source")
    return source[rng.integers(0, source.shape[0], size=n)]


class RewardModel:
    """Shared surface of every learned reward (CFIL and its ablations).

    Subclasses provide ``params`` (a pytree), the pure ``x_fn(params, v)``
    used inside jitted code, a numpy twin ``x_numpy`` and ``update``.
    The reward is always ``-x``.
    """

    view: InputView
    params: object
    agent_independent = False

    @property
    def dim(self) -> int:
        return self.view.dim

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise DimensionError(f"estimator expects {self.dim}-dim inputs, got {v.shape[-1]}")
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite estimator input")
        return v

    def x_value(self, v):
        v = self._check(v)
        return np.asarray(self._x_jit(self.params, jnp.asarray(v)))

    def reward(self, v):
        return -self.x_value(v)

    def reward_numpy(self, v) -> np.ndarray:
        """Bulk reward through numpy (fast path for refreshing a whole buffer)."""
        v = self._check(v)
        params = jax.tree_util.tree_map(np.asarray, self.params)
        return -self.x_numpy(params, v)

    def reward_fn(self, params, v):
        return -self.x_fn(params, v)

    def snapshot(self):
        return self.params

    def restore(self, params) -> None:
        self.params = params


class CoupledEstimator(RewardModel):
    """Agent-side flow ``p`` and expert-side flow ``q`` trained through one DV loss."""

    def __init__(self, view: InputView, squasher: Squasher = Squasher(), alpha: float = 1.0,
                 beta: float = 0.5, hidden: Sequence[int] = (64, 64), n_layers: int = 1, seed: int = 0,
                 p: FlowModel | None = None, q: FlowModel | None = None):
        self.view = view
        self.squasher = squasher
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.p = p if p is not None else FlowModel.maf(view.dim, n_layers, hidden, seed=seed)
        self.q = q if q is not None else FlowModel.maf(view.dim, n_layers, hidden, seed=seed + 1000)
        if self.p.dim != view.dim or self.q.dim != view.dim:
            raise DimensionError("flow dimensions must match the input view")
        self.params = (self.p.params, self.q.params)
        self.opt_state = adam_init(self.params)
        self._x_jit = jax.jit(self.x_fn)
        self._step = jax.jit(self._update_step)
        self._losses = jax.jit(self._loss_terms)

    @property
    def params(self):
        return (self.p.params, self.q.params)

    @params.setter
    def params(self, value):
        self.p.params, self.q.params = value

    def log_ratio(self, params, v, xp=jnp):
        p_params, q_params = params
        return (flow_log_prob(self.p.layers, p_params, v, xp)
                - flow_log_prob(self.q.layers, q_params, v, xp))

    def x_fn(self, params, v):
        return self.squasher(self.log_ratio(params, v))

    def x_numpy(self, params, v):
        return self.squasher(self.log_ratio(params, v, np), np)

    def dv_term(self, params, expert, agent):
        return dv_objective(self.x_fn(params, expert), self.x_fn(params, agent))

    def reg_term(self, params, expert, agent):
        p_params, q_params = params
        return (-jnp.mean(flow_log_prob(self.q.layers, q_params, expert))
                - jnp.mean(flow_log_prob(self.p.layers, p_params, agent)))

    def objective(self, params, expert, agent):
        loss = self.dv_term(params, expert, agent)
        if self.alpha > 0:
            loss = loss + self.alpha * self.reg_term(params, expert, agent)
        return loss

    def _loss_terms(self, params, expert, agent):
        x_e = self.x_fn(params, expert)
        x_a = self.x_fn(params, agent)
        return dv_objective(x_e, x_a), self.reg_term(params, expert, agent), jnp.mean(x_e), jnp.mean(x_a)

    def _update_step(self, params, opt_state, expert, agent, lr):
        terms = self._loss_terms(params, expert, agent)
        grads = jax.grad(self.objective)(params, expert, agent)
        new_params, new_state = adam_step(params, grads, opt_state, lr)
        return new_params, new_state, terms

    def dv_loss(self, expert_batch, agent_batch) -> float:
        e, a = self._check(expert_batch), self._check(agent_batch)
        return float(self._losses(self.params, e, a)[0])

    def reg_loss(self, expert_batch, agent_batch) -> float:
        e, a = self._check(expert_batch), self._check(agent_batch)
        return float(self._losses(self.params, e, a)[1])

    def update(self, expert_source, agent_source, n_batches: int = 10, batch_size: int = 100,
               lr: float = 1e-3, rng: np.random.Generator | None = None) -> list[dict]:
        """``n_batches`` joint Adam steps on J (+ alpha L); returns one trace row per step."""
        rng = rng if rng is not None else np.random.default_rng()
        trace = []
        for i in range(n_batches):
            expert = smooth_batch(sample_rows(expert_source, batch_size, rng), self.beta, rng)
            agent = smooth_batch(sample_rows(agent_source, batch_size, rng), self.beta, rng)
            expert, agent = self._check(expert), self._check(agent)
            params, state, (j, l, mxe, mxa) = self._step(self.params, self.opt_state, expert, agent, lr)
            if not (np.isfinite(float(j)) and np.isfinite(float(l))):
                raise NumericError(
                    f"estimator loss non-finite at batch {i}: J={float(j)} L={float(l)}; "
                    f"expert range [{expert.min():.4g}, {expert.max():.4g}], "
                    f"agent range [{agent.min():.4g}, {agent.max():.4g}]"
                )
            self.params, self.opt_state = params, state
            trace.append({"step": i, "J": float(j), "L": float(l),
                          "mean_x_expert": float(mxe), "mean_x_agent": float(mxa)})
        return trace


def update_estimator(est: RewardModel, expert_source, agent_source, n_batches: int = 10,
                     batch_size: int = 100, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Run ``n_batches`` estimator updates and return the J value of each."""
    trace = est.update(expert_source, agent_source, n_batches, batch_size, lr, np.random.default_rng(seed))
    return [row["J"] for row in trace]


def write_trace_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
