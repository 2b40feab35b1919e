"""Imitation loop: SAC on the learned reward -x, with the estimator refit every k env steps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jax
import numpy as np

from cfil.envs import DemoSet, episode_keys, get_env
from cfil.numcore import NumericError, ParamStore, save_checkpoint
from cfil.ratio import InputView, RewardModel, Squasher
from cfil.rl import DIAG_KEYS, SacConfig, SacLearner, evaluate_policy, init_carry, make_chunk_runner
from cfil.variants import VARIANTS, make_reward_model

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "env_steps", "eval_mean", "eval_std", "normalized", "J", "L", "mean_synthetic_reward")
SUBSAMPLED_PRESET = {"alpha": 0.0, "squash_outer": 3.0, "squash_inner": 10.0}


@dataclass(frozen=True)
class CfilConfig:
    env: str = "pointmass"
    regime: str = "state-action"
    stride: int = 1
    variant: str = "CFIL"
    k: int = 1000
    n_batches: int = 10
    batch_size: int = 100
    alpha: float = 1.0
    beta: float = 0.5
    squash_outer: float = 6.0
    squash_inner: float = 15.0
    estimator_lr: float = 1e-3
    flow_layers: int = 1
    flow_hidden: tuple[int, ...] = (64, 64)
    total_steps: int = 100_000
    eval_every: int = 2000
    eval_episodes: int = 10
    asymptotic_evals: int = 5
    seed: int = 0
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.regime not in InputView.TAGS:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {InputView.TAGS}")
        if min(self.k, self.stride, self.n_batches, self.batch_size, self.eval_every, self.eval_episodes) < 1:
            raise ValueError("k, stride, n_batches, batch_size, eval_every and eval_episodes must be positive")

    @classmethod
    def for_regime(cls, stride: int = 1, **overrides) -> "CfilConfig":
        """Defaults, with the subsampled preset applied when ``stride > 1``; overrides win."""
        base = dict(SUBSAMPLED_PRESET) if stride > 1 else {}
        base.update(overrides)
        return cls(stride=stride, **base)

    @property
    def squasher(self) -> Squasher:
        return Squasher(self.squash_outer, self.squash_inner)

    @property
    def n_epochs(self) -> int:
        return self.total_steps // self.eval_every

    def replace(self, **changes) -> "CfilConfig":
        return dataclasses.replace(self, **changes)


class TrainingDiverged(NumericError):
    """Raised when a loss goes non-finite; carries the metrics recorded so far."""

    def __init__(self, message: str, result: "RunResult"):
        super().__init__(message)
        self.result = result


@dataclass
class RunResult:
    config: CfilConfig
    metrics: list[dict]
    score: float
    diverged: bool = False
    message: str = ""
    learner: SacLearner | None = field(default=None, repr=False)
    model: RewardModel | None = field(default=None, repr=False)
    buffer: object = field(default=None, repr=False)


def normalized_score(returns, expert_ref: float, random_ref: float) -> float:
    """(mean return - random_ref) / (expert_ref - random_ref)."""
    if not expert_ref > random_ref:
        raise ValueError(f"expert reference {expert_ref} must exceed random reference {random_ref}")
    return (float(np.mean(returns)) - random_ref) / (expert_ref - random_ref)


def make_variant(tag: str, config: CfilConfig) -> RewardModel:
    view = InputView(config.regime, *_dims(config))
    return make_reward_model(tag, view, config.squasher, config.alpha, config.beta, config.flow_hidden,
                             config.flow_layers, config.seed)


def _dims(config: CfilConfig) -> tuple[int, int]:
    env = get_env(config.env)
    return env.obs_dim, env.act_dim


def _schedule(config: CfilConfig) -> list[int]:
    """Env-step counts after which something happens (estimator refit or evaluation)."""
    T = config.total_steps
    refits = {t + 1 for t in range(0, T, config.k)}
    evals = set(range(config.eval_every, T + 1, config.eval_every))
    return sorted(refits | evals)


def params_store(tree) -> ParamStore:
    leaves = jax.tree_util.tree_flatten_with_path(tree)[0]
    return ParamStore({jax.tree_util.keystr(path).replace(" ", ""): leaf for path, leaf in leaves})


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_cfil(config: CfilConfig, demos: DemoSet, out_dir=None, progress=None) -> RunResult:
    """Run the imitation loop and return per-epoch metrics plus the asymptotic score.

    The estimator is refit after env step t whenever t % k == 0 (t = 0
    included, so the first policy update already sees a fitted reward).
    After each refit every stored reward is recomputed, so SAC always trains
    on the current -x.
    """
    env = get_env(config.env)
    if demos.env_name != env.name:
        raise ValueError(f"demos were recorded on {demos.env_name!r}, config asks for {env.name!r}")
    demos = demos.with_view(config.regime).with_stride(config.stride)
    expert_inputs = demos.inputs()
    if len(expert_inputs) == 0:
        raise ValueError("no expert transitions left after subsampling")
    view = InputView(config.regime, env.obs_dim, env.act_dim)
    model = make_variant(config.variant, config)
    if expert_inputs.shape[1] != model.dim:
        raise ValueError(f"demo view has dimension {expert_inputs.shape[1]}, estimator expects {model.dim}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    learner = SacLearner(env.obs_dim, env.act_dim, config.sac, seed=config.seed)
    runner = make_chunk_runner(env, learner, view, model.reward_fn)
    carry = init_carry(env, learner, config.total_steps, config.seed)
    est_rng = np.random.default_rng([config.seed, 1])
    eval_keys = episode_keys(100_000 + 1000 * config.seed, config.eval_episodes)

    metrics: list[dict] = []
    last_trace: list[dict] = []
    epoch_syn, epoch_steps, done = 0.0, 0, 0

    def fail(msg: str):
        result = RunResult(config, metrics, _asymptotic(metrics, config), True, msg)
        if out is not None:
            write_metrics_csv(out / "metrics.csv", metrics)
        log.error("run diverged: %s", msg)
        raise TrainingDiverged(msg, result)

    for target in _schedule(config):
        syn_before = float(carry.syn_reward_sum)
        carry = runner(carry, target - done, model.params)
        epoch_steps += target - done
        epoch_syn += float(carry.syn_reward_sum) - syn_before
        done = target
        if not all(math.isfinite(float(v)) for v in carry.diag_sum.values()):
            fail(f"SAC losses non-finite before env step {done}: "
                 f"{ {k: float(carry.diag_sum[k]) for k in DIAG_KEYS} }")

        if (done - 1) % config.k == 0:
            source = carry.buffer.as_source(view)
            try:
                last_trace = model.update(expert_inputs, source, config.n_batches, config.batch_size,
                                          config.estimator_lr, est_rng)
            except NumericError as err:
                fail(f"estimator update after env step {done}: {err}")
            obs, act, obs2 = carry.buffer.arrays()
            rewards = model.reward_numpy(view.project(obs, act, obs2))
            carry = carry._replace(buffer=carry.buffer.with_rewards(rewards))

        if done % config.eval_every == 0:
            returns = evaluate_policy(env, learner.pi_spec, carry.sac.params.pi, eval_keys)
            if not np.all(np.isfinite(returns)):
                fail(f"non-finite evaluation return at env step {done}")
            row = {
                "epoch": done // config.eval_every,
                "env_steps": done,
                "eval_mean": float(returns.mean()),
                "eval_std": float(returns.std()),
                "normalized": normalized_score(returns, env.expert_ref, env.random_ref),
                "J": float(np.mean([r["J"] for r in last_trace])),
                "L": float(np.mean([r["L"] for r in last_trace])),
                "mean_synthetic_reward": epoch_syn / max(epoch_steps, 1),
            }
            metrics.append(row)
            epoch_syn, epoch_steps = 0.0, 0
            if progress is not None:
                progress(row)
            if out is not None:
                learner.state = carry.sac
                learner.save(out / "checkpoints" / "policy.ckpt")
                save_checkpoint(out / "checkpoints" / "estimator.ckpt", params_store(model.params))
                write_metrics_csv(out / "metrics.csv", metrics)

    learner.state = carry.sac
    return RunResult(config, metrics, _asymptotic(metrics, config), learner=learner, model=model,
                     buffer=carry.buffer)


def _asymptotic(metrics: list[dict], config: CfilConfig) -> float:
    if not metrics:
        return float("nan")
    env = get_env(config.env)
    tail = [row["eval_mean"] for row in metrics[-config.asymptotic_evals:]]
    return normalized_score(tail, env.expert_ref, env.random_ref)
