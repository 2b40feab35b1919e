"""BC-graph diagnostic for reward estimators.

Behavioral cloning produces a sequence of policies of increasing quality.
An estimator is trained on the expert demo against a growing buffer of the
BC rollouts (one refit per rollout), and the score it gives each new
rollout is compared with that rollout's true return. A good estimator
should rank rollouts like the true return does, at least below expert
level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import spearmanr

from cfil.envs import DemoSet, Trajectory, get_env, rollout
from cfil.numcore import MlpSpec, adam_init, adam_step, init_mlp
from cfil.ratio import RewardModel, StateError
from cfil.rl import deterministic_policy, gaussian_head, policy_spec, tanh_gaussian_logp

# Saturated expert actions sit at +-1 where atanh diverges. Clipping them
# and flooring the policy log-std keeps those points from dominating the
# likelihood (an unfloored std collapses on them and the mean fit elsewhere
# stalls).
ACTION_EDGE = 0.99
BC_LOG_STD_FLOOR = -1.0


class UndefinedScoreError(ValueError):
    """Too few points to compute a rank correlation."""


@dataclass
class BcSnapshotSet:
    iterations: list[int]
    params: list
    trajectories: list[Trajectory]
    returns: np.ndarray
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per minibatch step
    snapshot_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))  # full demo set, per snapshot

    def __len__(self) -> int:
        return len(self.iterations)


@dataclass
class BcGraph:
    true_returns: np.ndarray
    scores: np.ndarray
    saved_states: dict[int, object] = field(default_factory=dict, repr=False)


def bc_nll(pi, obs, act, spec: MlpSpec):
    """Mean negative log-likelihood of (clipped) expert actions under the tanh-Gaussian policy."""
    a = jnp.clip(act, -ACTION_EDGE, ACTION_EDGE)
    mu, log_std = gaussian_head(pi, obs, spec)
    log_std = jnp.maximum(log_std, BC_LOG_STD_FLOOR)
    return -jnp.mean(tanh_gaussian_logp(jnp.arctanh(a), mu, log_std))


def train_bc(demos: DemoSet, iters: int = 6000, snapshot_every: int = 60, seed: int = 0,
             hidden=(64, 64), batch_size: int = 100, lr: float = 1e-3) -> BcSnapshotSet:
    """Maximum-likelihood BC; snapshot (and roll out) at iteration 0 and every ``snapshot_every``."""
    env = get_env(demos.env_name)
    spec = policy_spec(env.obs_dim, env.act_dim, tuple(hidden))
    obs = np.concatenate([t.obs for t in demos.trajectories])
    act = np.concatenate([t.act for t in demos.trajectories])
    rng = np.random.default_rng(seed)
    pi = init_mlp(spec, rng)
    opt = adam_init(pi)

    @jax.jit
    def step(pi, opt, o, a):
        loss, g = jax.value_and_grad(bc_nll)(pi, o, a, spec)
        pi, opt = adam_step(pi, g, opt, lr)
        return pi, opt, loss

    policy = deterministic_policy(spec)
    run = jax.jit(lambda p, k: rollout(env, policy, p, k))
    full_loss = jax.jit(lambda p: bc_nll(p, obs, act, spec))
    snaps = BcSnapshotSet([], [], [], np.zeros(0))
    losses, snap_losses = [], []

    def record(i, pi):
        out = run(pi, jax.random.PRNGKey(10_000 * (seed + 1) + i))
        snap_losses.append(float(full_loss(pi)))
        snaps.iterations.append(i)
        snaps.params.append(pi)
        snaps.trajectories.append(Trajectory.from_rollout(out))

    record(0, pi)
    for i in range(1, iters + 1):
        idx = rng.integers(0, len(obs), size=batch_size)
        pi, opt, loss = step(pi, opt, obs[idx], act[idx])
        losses.append(float(loss))
        if i % snapshot_every == 0:
            record(i, pi)
    snaps.returns = np.array([t.ret for t in snaps.trajectories])
    snaps.losses = np.array(losses)
    snaps.snapshot_losses = np.array(snap_losses)
    return snaps


def _inputs(model: RewardModel, traj: Trajectory) -> np.ndarray:
    return model.view.project(traj.obs, traj.act, traj.next_obs)


def mean_reward(model: RewardModel, params, traj: Trajectory) -> float:
    """Mean per-step synthetic reward -x over one trajectory (numpy path)."""
    params = jax.tree_util.tree_map(np.asarray, params)
    return float(np.mean(-model.x_numpy(params, _inputs(model, traj))))


def bc_graph(snapshots: BcSnapshotSet, estimator_factory: Callable[[], RewardModel], expert_demo: DemoSet,
             seed: int = 0, n_batches: int = 10, batch_size: int = 100, lr: float = 1e-3,
             save_stride: int = 10) -> BcGraph:
    """Refit once per rollout against the cumulative rollout buffer and score rollout i with estimator i."""
    model = estimator_factory()
    demo = expert_demo.with_view(model.view.tag)
    expert = demo.inputs()
    if expert.shape[1] != model.dim:
        raise ValueError(f"expert view has dimension {expert.shape[1]}, estimator expects {model.dim}")
    rng = np.random.default_rng(seed)
    buffer: list[np.ndarray] = []
    scores = []
    saved = {}
    for i, traj in enumerate(snapshots.trajectories):
        buffer.append(_inputs(model, traj))
        model.update(expert, np.concatenate(buffer), n_batches, batch_size, lr, rng)
        params = jax.tree_util.tree_map(np.asarray, model.snapshot())
        scores.append(mean_reward(model, params, traj))
        if i % save_stride == 0 or i == len(snapshots) - 1:
            saved[i] = params
    return BcGraph(np.asarray(snapshots.returns, dtype=float), np.array(scores), saved)


def monotonicity_score(graph: BcGraph, expert_ref: float | None = None) -> float:
    """Spearman correlation of (true return, score) over points below the expert reference."""
    ret, score = np.asarray(graph.true_returns), np.asarray(graph.scores)
    keep = ret < expert_ref if expert_ref is not None else np.ones(len(ret), bool)
    if keep.sum() < 3:
        raise UndefinedScoreError(f"need at least 3 sub-expert points, have {int(keep.sum())}")
    ret, score = ret[keep], score[keep]
    if np.ptp(ret) == 0 or np.ptp(score) == 0:
        return 0.0
    return float(spearmanr(ret, score)[0])


def bc_2d_grid(snapshots: BcSnapshotSet, graph: BcGraph, model: RewardModel,
               stride: int | None = None) -> tuple[list[int], np.ndarray]:
    """Mean reward of every saved estimator state (rows) on every BC rollout (columns)."""
    if not graph.saved_states:
        raise StateError("bc_graph saved no estimator states")
    rows = sorted(graph.saved_states)
    if stride is not None:
        rows = [i for i in rows if i % stride == 0 or i == rows[-1]]
        missing = [i for i in range(0, len(snapshots), stride) if i not in graph.saved_states]
        if missing:
            raise StateError(f"estimator states {missing[:5]} were not saved")
    grid = np.array([[mean_reward(model, graph.saved_states[i], t) for t in snapshots.trajectories]
                     for i in rows])
    return rows, grid


def write_graph_csv(path, graph: BcGraph) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "true_return", "mean_synthetic_reward"])
        for i, (r, s) in enumerate(zip(graph.true_returns, graph.scores)):
            w.writerow([i, repr(float(r)), repr(float(s))])


def write_grid_csv(path, rows: list[int], grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator"] + [f"traj{j}" for j in range(grid.shape[1])])
        for i, row in zip(rows, grid):
            w.writerow([i] + [repr(float(v)) for v in row])
