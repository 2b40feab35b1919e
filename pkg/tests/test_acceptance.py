"""Exit criteria, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary (and prints
it). Training runs are cached for the session so that criteria sharing a
configuration reuse it; each cached run keeps its wall time so budgets are
charged honestly. On one core the full suite takes a few hours.
"""

import math
import time

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy.stats import pearsonr

from cfil.algorithm import CfilConfig, TrainingDiverged, train_cfil
from cfil.analysis import bc_graph, monotonicity_score, train_bc, write_graph_csv
from cfil.envs import POINT_MASS, record_demos
from cfil.flow import FlowModel, _mean_nll
from cfil.numcore import ParamStore
from cfil.ratio import CoupledEstimator, InputView
from cfil.rl import SacConfig, SacLearner, critic_loss, td_backup
from cfil.variants import make_reward_model
from oracles import central_diff_grad, integral_1d, integral_2d_grid, numerical_logdet, relative_error
from test_flow import layer_cases, random_params
from test_ratio import _fd_check

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
ABLATIONS = ("NoSquash", "IndFlow", "IndFlowNS", "RegularNet", "Numerator")
GRID = (0.0, 0.5, 1.0)
GRID_SEEDS = range(3)


def report(log, criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    log.append(line)
    return ok


class RunCache:
    """Full 100k-step point-mass runs keyed by (regime, stride, variant, alpha, beta, seed)."""

    def __init__(self, root):
        self.root = root
        self.demo = record_demos(POINT_MASS, n_traj=1, seed=0)
        self.runs = {}

    def key(self, regime="state-action", stride=1, variant="CFIL", alpha=None, beta=None, seed=0):
        cfg = CfilConfig.for_regime(stride=stride, regime=regime, variant=variant, seed=seed)
        cfg = cfg.replace(alpha=cfg.alpha if alpha is None else alpha, beta=cfg.beta if beta is None else beta)
        return cfg

    def get(self, **kw):
        cfg = self.key(**kw)
        if cfg not in self.runs:
            out = self.root / f"run{len(self.runs):03d}"
            t = time.time()
            try:
                res = train_cfil(cfg, self.demo, out_dir=out)
            except TrainingDiverged as err:
                res = err.result
            self.runs[cfg] = (res, out, time.time() - t)
        return self.runs[cfg]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("acceptance-runs"))


# ---------------------------------------------------------------- 1-3: exactness


def test_criterion_1_flow_exactness(acceptance_log):
    t = time.time()
    worst_ld, worst_rt = 0.0, 0.0
    rng = np.random.default_rng(0)
    for layer in layer_cases():
        p = random_params(layer, rng)
        for _ in range(100):
            x = rng.uniform(-3, 3, size=layer.dim)
            _, ld = layer.forward(p, jnp.asarray(x))
            num = numerical_logdet(lambda v: np.asarray(layer.forward(p, jnp.asarray(v))[0]), x)
            worst_ld = max(worst_ld, abs(float(ld) - num) / max(1.0, abs(num)))
        x = rng.uniform(-5, 5, size=(200, layer.dim))
        y, _ = layer.forward(p, jnp.asarray(x))
        worst_rt = max(worst_rt, float(np.max(np.abs(np.asarray(layer.inverse(p, y)) - x))))
    norms = []
    for dim in (1, 2):
        model = FlowModel.maf(dim, n_layers=2, hidden=(16, 16), seed=3)
        model.params = tuple(random_params(l, np.random.default_rng(4), 0.3) for l in model.layers)
        if dim == 1:
            norms.append(integral_1d(lambda v: math.exp(float(model.log_prob_numpy(np.array([[v]]))[0]))))
        else:
            norms.append(integral_2d_grid(model.log_prob_numpy))
    dt = time.time() - t
    worst_norm = max(abs(n - 1.0) for n in norms)
    ok = worst_ld <= 1e-4 and worst_rt <= 1e-6 and worst_norm <= 1e-2 and dt < 60
    report(acceptance_log, 1, ok, f"logdet rel err {worst_ld:.2e} (<=1e-4), round-trip {worst_rt:.2e} (<=1e-6), "
           f"|integral-1| {worst_norm:.2e} (<=1e-2), {dt:.0f}s (<60s)")
    assert ok


def test_criterion_2_gradients(acceptance_log):
    t = time.time()
    errs = {}
    # MLE on both flow families
    for name, model in (("mle-maf", FlowModel.maf(3, n_layers=2, hidden=(8, 8), seed=0)),
                        ("mle-realnvp", FlowModel.realnvp(3, n_layers=2, hidden=(8,), seed=0))):
        rng = np.random.default_rng(1)
        params = tuple(random_params(l, rng, 0.3) for l in model.layers)
        batch = jnp.asarray(rng.normal(size=(16, 3)))
        errs[name] = _fd_check(lambda p: _mean_nll(model.layers, p, batch), params)
    # DV and flow regularizer
    rng = np.random.default_rng(2)
    est = CoupledEstimator(InputView("single-state", 2, 1), hidden=(8, 8))
    est.params = (tuple(random_params(l, rng, 0.3) for l in est.p.layers),
                  tuple(random_params(l, rng, 0.3) for l in est.q.layers))
    e, a = jnp.asarray(rng.normal(1, 1, (12, 2))), jnp.asarray(rng.normal(0, 1, (12, 2)))
    errs["dv"] = _fd_check(lambda p: est.dv_term(p, e, a), est.params)
    errs["reg"] = _fd_check(lambda p: est.reg_term(p, e, a), est.params)
    # SAC critic
    learner = SacLearner(4, 2, SacConfig(hidden=(8, 8)), seed=2)
    batch = {"obs": jnp.asarray(rng.normal(size=(4, 4))), "act": jnp.asarray(rng.uniform(-1, 1, (4, 2))),
             "rew": jnp.asarray(rng.normal(size=4)), "obs2": jnp.asarray(rng.normal(size=(4, 4))),
             "done": jnp.zeros(4)}
    p = learner.params
    backup = td_backup(p, batch, jax.random.PRNGKey(0), learner.cfg, learner.pi_spec, learner.q_spec)
    store = ParamStore.join({"q1": p.q1, "q2": p.q2})

    def closs(s):
        parts = s.split()
        return critic_loss((parts["q1"], parts["q2"]), p, batch, backup, learner.q_spec)

    g = jax.grad(closs)(store)
    fd = central_diff_grad(lambda f: float(closs(store.unflatten(f))), store.flatten(), eps=1e-5)
    errs["sac-critic"] = relative_error(g.flatten(), fd, floor=1e-6)
    dt = time.time() - t
    ok = max(errs.values()) <= 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(acceptance_log, 2, ok, f"relative error vs finite differences: {detail} (<=1e-4), {dt:.0f}s (<60s)")
    assert ok


def test_criterion_3_dv_oracle(acceptance_log):
    t = time.time()
    parts, ok = [], True
    for dim in (1, 2):
        rng = np.random.default_rng(dim)
        est = CoupledEstimator(InputView("single-state", dim, 1), alpha=0.0, beta=0.0, seed=dim)
        expert, agent = rng.normal(1, 1, (20_000, dim)), rng.normal(0, 1, (20_000, dim))
        est.update(expert, agent, n_batches=2000, batch_size=256, lr=1e-3, rng=rng)
        e2, a2 = rng.normal(1, 1, (50_000, dim)), rng.normal(0, 1, (50_000, dim))
        kl = 0.5 * dim
        neg_j = -est.dv_loss(e2, a2)
        r = pearsonr(-est.x_value(a2), (a2 - 0.5).sum(axis=1))[0]
        ok &= kl - 0.2 <= neg_j <= kl + 0.1 and r >= 0.9
        parts.append(f"D={dim}: -J {neg_j:.3f} in [{kl - 0.2:.1f}, {kl + 0.1:.1f}], r {r:.3f} (>=0.9)")
    dt = time.time() - t
    ok &= dt < 300
    report(acceptance_log, 3, ok, "; ".join(parts) + f", {dt:.0f}s (<300s)")
    assert ok


# ---------------------------------------------------------------- 4: BC graph


@pytest.fixture(scope="session")
def bc_graphs(tmp_path_factory):
    out = tmp_path_factory.mktemp("bcgraph")
    expert = record_demos(POINT_MASS, n_traj=1, seed=0)
    view = InputView("state-action", POINT_MASS.obs_dim, POINT_MASS.act_dim)
    result, t = {}, time.time()
    for seed in range(3):
        snaps = train_bc(record_demos(POINT_MASS, n_traj=10, seed=seed + 1), seed=seed)
        for tag in ("CFIL", "IndFlow"):
            graph = bc_graph(snaps, lambda: make_reward_model(tag, view, seed=seed), expert, seed=seed)
            write_graph_csv(out / f"{tag}-seed{seed}.csv", graph)
            result[tag, seed] = monotonicity_score(graph, POINT_MASS.expert_ref)
    return result, out, time.time() - t


def test_criterion_4_bc_graph_separation(acceptance_log, bc_graphs):
    scores, _, dt = bc_graphs
    cfil = [scores["CFIL", s] for s in range(3)]
    ind = [scores["IndFlow", s] for s in range(3)]
    ok = min(cfil) >= 0.6 and max(ind) <= 0.3 and dt < 600
    report(acceptance_log, 4, ok, f"Spearman coupled {np.round(cfil, 3).tolist()} (>=0.6), "
           f"independent {np.round(ind, 3).tolist()} (<=0.3), {dt:.0f}s (<600s)")
    assert ok


# ---------------------------------------------------------------- 5-7: imitation


@pytest.mark.parametrize("regime,stride", [("state-action", 1), ("state-pair", 1), ("single-state", 1),
                                           ("state-action", 10)])
def test_criterion_5_end_to_end(acceptance_log, runs, regime, stride):
    got = [runs.get(regime=regime, stride=stride, seed=s) for s in SEEDS]
    scores = np.array([r.score for r, _, _ in got])
    worst = max(dt for _, _, dt in got)
    n_ok = int(np.sum(scores >= 0.9))
    ok = n_ok >= 4 and worst <= 1800
    report(acceptance_log, f"5 ({regime}, stride {stride})", ok,
           f"normalized {np.round(scores, 3).tolist()}, {n_ok}/5 >= 0.9 (need 4), slowest run {worst:.0f}s (<=1800s)")
    assert ok


def test_criterion_6_ablation_ordering(acceptance_log, runs):
    cfil = [runs.get(seed=s) for s in SEEDS]
    means = {"CFIL": float(np.mean([r.score for r, _, _ in cfil]))}
    total = sum(dt for _, _, dt in cfil)
    for tag in ABLATIONS:
        got = [runs.get(variant=tag, seed=s) for s in SEEDS]
        means[tag] = float(np.mean([r.score for r, _, _ in got]))
        total += sum(dt for _, _, dt in got)
    ok = means["CFIL"] >= 0.9 and all(means[t] <= 0.5 for t in ABLATIONS) and total <= 7200
    detail = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    report(acceptance_log, 6, ok, f"mean normalized over 5 seeds: {detail} (CFIL>=0.9, others<=0.5), "
           f"{total:.0f}s compute (<=7200s)")
    assert ok


def test_criterion_7_robustness_grid(acceptance_log, runs):
    cells, total = {}, 0.0
    for alpha in GRID:
        for beta in GRID:
            got = [runs.get(alpha=alpha, beta=beta, seed=s) for s in GRID_SEEDS]
            cells[alpha, beta] = float(np.mean([r.score for r, _, _ in got]))
            total += sum(dt for _, _, dt in got)
    ok = all(v >= 0.7 for k, v in cells.items() if k != (0.0, 0.0)) and total <= 7200
    detail = ", ".join(f"({a:g},{b:g}) {v:.3f}" for (a, b), v in cells.items())
    report(acceptance_log, 7, ok, f"mean over 3 seeds: {detail} (>=0.7 except (0,0)), {total:.0f}s compute (<=7200s)")
    assert ok


def test_criterion_8_reproducibility(acceptance_log, runs, bc_graphs, tmp_path):
    _, first, _ = runs.get(seed=0)
    cfg = runs.key(seed=0)
    train_cfil(cfg, runs.demo, out_dir=tmp_path / "rerun")
    same_run = (first / "metrics.csv").read_bytes() == (tmp_path / "rerun" / "metrics.csv").read_bytes()

    _, bc_dir, _ = bc_graphs
    expert = record_demos(POINT_MASS, n_traj=1, seed=0)
    view = InputView("state-action", POINT_MASS.obs_dim, POINT_MASS.act_dim)
    snaps = train_bc(record_demos(POINT_MASS, n_traj=10, seed=1), seed=0)
    graph = bc_graph(snaps, lambda: make_reward_model("CFIL", view, seed=0), expert, seed=0)
    write_graph_csv(tmp_path / "bc.csv", graph)
    same_bc = (bc_dir / "CFIL-seed0.csv").read_bytes() == (tmp_path / "bc.csv").read_bytes()
    ok = same_run and same_bc
    report(acceptance_log, 8, ok, f"CFIL metrics.csv identical on rerun: {same_run}; "
           f"BC-graph CSV identical on rerun: {same_bc}")
    assert ok
