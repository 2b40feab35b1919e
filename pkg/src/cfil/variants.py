"""Ablations of the coupled estimator, sharing the RewardModel surface.

Each variant exposes ``x_fn`` / ``x_numpy`` (reward is ``-x``) and an
``update`` with the same batch schedule and trace rows as
:class:`~cfil.ratio.CoupledEstimator`.
"""

from __future__ import annotations

from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from cfil.flow import FlowModel, flow_log_prob
from cfil.numcore import MlpSpec, NumericError, adam_init, adam_step, eval_mlp, init_mlp
from cfil.ratio import (
    CoupledEstimator,
    InputView,
    RewardModel,
    Squasher,
    dv_objective,
    sample_rows,
    smooth_batch,
)

VARIANTS = ("CFIL", "NoSquash", "IndFlow", "IndFlowNS", "RegularNet", "Numerator")


def _trace_row(i, j, l, x_e, x_a) -> dict:
    return {"step": i, "J": float(j), "L": float(l), "mean_x_expert": float(np.mean(x_e)),
            "mean_x_agent": float(np.mean(x_a))}


def _check_finite(i, **losses) -> None:
    bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
    if bad:
        raise NumericError(f"estimator loss non-finite at batch {i}: {bad}")


class IndependentFlows(RewardModel):
    """Agent and expert flows each fit by their own MLE; x = squash(log p - log q)."""

    def __init__(self, view: InputView, squasher: Squasher = Squasher(), beta: float = 0.5,
                 hidden: Sequence[int] = (64, 64), n_layers: int = 1, seed: int = 0):
        self.view = view
        self.squasher = squasher
        self.beta = float(beta)
        self.p = FlowModel.maf(view.dim, n_layers, hidden, seed=seed)
        self.q = FlowModel.maf(view.dim, n_layers, hidden, seed=seed + 1000)
        self._x_jit = jax.jit(self.x_fn)

    @property
    def params(self):
        return (self.p.params, self.q.params)

    @params.setter
    def params(self, value):
        self.p.params, self.q.params = value

    def x_fn(self, params, v):
        p, q = params
        return self.squasher(flow_log_prob(self.p.layers, p, v) - flow_log_prob(self.q.layers, q, v))

    def x_numpy(self, params, v):
        p, q = params
        return self.squasher(flow_log_prob(self.p.layers, p, v, np) - flow_log_prob(self.q.layers, q, v, np), np)

    def update(self, expert_source, agent_source, n_batches=10, batch_size=100, lr=1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        trace = []
        for i in range(n_batches):
            expert = self._check(smooth_batch(sample_rows(expert_source, batch_size, rng), self.beta, rng))
            agent = self._check(smooth_batch(sample_rows(agent_source, batch_size, rng), self.beta, rng))
            nll_q = self.q.fit_step(expert, lr)
            nll_p = self.p.fit_step(agent, lr)
            x_e, x_a = self._x_jit(self.params, expert), self._x_jit(self.params, agent)
            j = float(dv_objective(x_e, x_a))
            _check_finite(i, J=j, L=nll_q + nll_p)
            trace.append(_trace_row(i, j, nll_q + nll_p, x_e, x_a))
        return trace


class RegularNet(RewardModel):
    """x = squash(MLP(v)) with a plain tanh network trained on the DV objective alone."""

    def __init__(self, view: InputView, squasher: Squasher = Squasher(), beta: float = 0.5,
                 hidden: Sequence[int] = (64, 64), seed: int = 0):
        self.view = view
        self.squasher = squasher
        self.beta = float(beta)
        self.spec = MlpSpec.dense((view.dim, *hidden, 1), "tanh")
        self.params = init_mlp(self.spec, np.random.default_rng(seed))
        self.opt_state = adam_init(self.params)
        self._x_jit = jax.jit(self.x_fn)
        self._step = jax.jit(self._update_step)

    def x_fn(self, params, v):
        return self.squasher(eval_mlp(params, v, self.spec)[..., 0])

    def x_numpy(self, params, v):
        return self.squasher(eval_mlp(params, v, self.spec, xp=np)[..., 0], np)

    def _loss(self, params, expert, agent):
        x_e, x_a = self.x_fn(params, expert), self.x_fn(params, agent)
        return dv_objective(x_e, x_a), (x_e, x_a)

    def _update_step(self, params, opt_state, expert, agent, lr):
        (j, (x_e, x_a)), grads = jax.value_and_grad(self._loss, has_aux=True)(params, expert, agent)
        params, opt_state = adam_step(params, grads, opt_state, lr)
        return params, opt_state, j, jnp.mean(x_e), jnp.mean(x_a)

    def update(self, expert_source, agent_source, n_batches=10, batch_size=100, lr=1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        trace = []
        for i in range(n_batches):
            expert = self._check(smooth_batch(sample_rows(expert_source, batch_size, rng), self.beta, rng))
            agent = self._check(smooth_batch(sample_rows(agent_source, batch_size, rng), self.beta, rng))
            params, state, j, mxe, mxa = self._step(self.params, self.opt_state, expert, agent, lr)
            _check_finite(i, J=float(j))
            self.params, self.opt_state = params, state
            trace.append(_trace_row(i, j, 0.0, mxe, mxa))
        return trace


class Numerator(RewardModel):
    """Expert density alone: reward = log q(v), unsquashed; the agent buffer is never read."""

    agent_independent = True

    def __init__(self, view: InputView, beta: float = 0.5, hidden: Sequence[int] = (64, 64),
                 n_layers: int = 1, seed: int = 0):
        self.view = view
        self.beta = float(beta)
        self.q = FlowModel.maf(view.dim, n_layers, hidden, seed=seed + 1000)
        self._x_jit = jax.jit(self.x_fn)

    @property
    def params(self):
        return self.q.params

    @params.setter
    def params(self, value):
        self.q.params = value

    def x_fn(self, params, v):
        return -flow_log_prob(self.q.layers, params, v)

    def x_numpy(self, params, v):
        return -flow_log_prob(self.q.layers, params, v, np)

    def update(self, expert_source, agent_source=None, n_batches=10, batch_size=100, lr=1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        trace = []
        for i in range(n_batches):
            expert = self._check(smooth_batch(sample_rows(expert_source, batch_size, rng), self.beta, rng))
            nll = self.q.fit_step(expert, lr)
            _check_finite(i, L=nll)
            trace.append(_trace_row(i, float("nan"), nll, self._x_jit(self.params, expert), float("nan")))
        return trace


def make_reward_model(tag: str, view: InputView, squasher: Squasher = Squasher(), alpha: float = 1.0,
                      beta: float = 0.5, hidden: Sequence[int] = (64, 64), n_layers: int = 1,
                      seed: int = 0) -> RewardModel:
    """Estimator for a variant tag; settings not used by a variant are ignored."""
    if tag == "CFIL":
        return CoupledEstimator(view, squasher, alpha, beta, hidden, n_layers, seed)
    if tag == "NoSquash":
        return CoupledEstimator(view, Squasher.identity(), alpha, beta, hidden, n_layers, seed)
    if tag == "IndFlow":
        return IndependentFlows(view, squasher, beta, hidden, n_layers, seed)
    if tag == "IndFlowNS":
        return IndependentFlows(view, Squasher.identity(), beta, hidden, n_layers, seed)
    if tag == "RegularNet":
        return RegularNet(view, squasher, beta, hidden, seed)
    if tag == "Numerator":
        return Numerator(view, beta, hidden, n_layers, seed)
    raise ValueError(f"unknown variant {tag!r}; choose from {VARIANTS}")
