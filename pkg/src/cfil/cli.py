"""Command line front-end: ``cfil {expert,train,sweep,bcgraph,plot}``.

Run configs are flat ``key = value`` text files (``#`` starts a comment);
list-valued keys take comma-separated values. Every run writes the fully
resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from cfil.algorithm import SUBSAMPLED_PRESET, CfilConfig, TrainingDiverged, train_cfil
from cfil.envs import ExpertQualityError, get_env, read_demos, record_demos, write_demos
from cfil.numcore import NumericError
from cfil.rl import SacConfig

log = logging.getLogger("cfil")

RUN_KEYS = {"demos": "", "n_traj": 1, "demo_seed": 0}
SWEEP_KEYS = {"variants": "", "seeds": "", "alphas": "", "betas": ""}


class ConfigError(ValueError):
    pass


def _config_fields() -> dict:
    fields = {f.name: f.default for f in dataclasses.fields(CfilConfig) if f.name not in ("sac", "seed")}
    fields.update({f"sac_{f.name}": f.default for f in dataclasses.fields(SacConfig)})
    return fields


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into typed values; unknown keys are rejected."""
    known = {**_config_fields(), **RUN_KEYS, **SWEEP_KEYS}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, raw, known[key])
    return out


def build_config(values: dict, seed: int) -> CfilConfig:
    """CfilConfig from parsed values; the subsampled preset fills keys left unset when stride > 1."""
    fields = _config_fields()
    cfg_kw = {k: v for k, v in values.items() if k in fields and not k.startswith("sac_")}
    sac_kw = {k[4:]: v for k, v in values.items() if k.startswith("sac_")}
    stride = cfg_kw.pop("stride", 1)
    return CfilConfig.for_regime(stride=stride, seed=seed, sac=SacConfig(**sac_kw), **cfg_kw)


def render_config(cfg: CfilConfig, extra: dict | None = None) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "sac":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for f in dataclasses.fields(cfg.sac):
        lines.append(f"sac_{f.name} = {_fmt(getattr(cfg.sac, f.name))}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_hash(cfg: CfilConfig) -> str:
    text = render_config(dataclasses.replace(cfg, seed=0))
    return hashlib.sha256(text.encode()).hexdigest()[:10]


def fresh_run_dir(root: Path, cfg: CfilConfig) -> Path:
    """``<root>/<hash>-seed<seed>``; a numbered suffix is added instead of overwriting."""
    base = root / f"{config_hash(cfg)}-seed{cfg.seed}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-r{n}")
    path.mkdir(parents=True)
    return path


def _load_demos(values: dict, cfg: CfilConfig):
    if values.get("demos"):
        return read_demos(values["demos"])
    return record_demos(get_env(cfg.env), n_traj=values.get("n_traj", 1), seed=values.get("demo_seed", 0))


def _values(args) -> dict:
    values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    values.update(parse_config_text("\n".join(args.set or [])))
    return values


# ---------------------------------------------------------------- commands


def cmd_expert(args) -> int:
    spec = get_env(args.env)
    demos = record_demos(spec, n_traj=args.n_traj, seed=args.seed)
    write_demos(args.out, demos)
    print(f"wrote {len(demos)} transitions to {args.out} (mean return {demos.mean_return:.3f})")
    return 0


def run_one(values: dict, seed: int, root: Path) -> dict:
    """Train one configuration; returns a summary row (never raises on divergence)."""
    cfg = build_config(values, seed)
    run_dir = fresh_run_dir(root, cfg)
    extra = {k: values.get(k, d) for k, d in RUN_KEYS.items()}
    (run_dir / "config.txt").write_text(render_config(cfg, extra))
    demos = _load_demos(values, cfg)
    row = {"variant": cfg.variant, "alpha": cfg.alpha, "beta": cfg.beta, "seed": seed, "run_dir": str(run_dir)}
    try:
        result = train_cfil(cfg, demos, out_dir=run_dir)
        row.update(score=result.score, status="ok")
    except TrainingDiverged as err:
        row.update(score=err.result.score, status=f"diverged: {err}")
    (run_dir / "score.txt").write_text(f"{row['score']!r}\n{row['status']}\n")
    return row


def cmd_train(args) -> int:
    values = _values(args)
    row = run_one(values, args.seed, Path(args.out))
    print(f"{row['run_dir']}: normalized score {row['score']:.4f} ({row['status']})")
    return 0 if row["status"] == "ok" else 1


def _axis(values: dict, key: str, default, cast) -> list:
    raw = values.pop(key, "")
    return [cast(v) for v in raw.split(",") if v.strip()] if raw else [default]


def _sweep_cells(values: dict, seed: int):
    values = dict(values)
    variants = _axis(values, "variants", values.get("variant", "CFIL"), str.strip)
    seeds = _axis(values, "seeds", seed, int)
    stride = values.get("stride", 1)
    preset_alpha = SUBSAMPLED_PRESET["alpha"] if stride > 1 else CfilConfig.alpha
    alphas = _axis(values, "alphas", values.get("alpha", preset_alpha), float)
    betas = _axis(values, "betas", values.get("beta", CfilConfig.beta), float)
    cells = []
    for variant in variants:
        for alpha in alphas:
            for beta in betas:
                cell = {**values, "variant": variant, "alpha": alpha, "beta": beta}
                cells.append(((variant, alpha, beta), [(cell, s) for s in seeds]))
    return cells, alphas, betas


def cmd_sweep(args) -> int:
    values = _values(args)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    cells, alphas, betas = _sweep_cells(values, args.seed)
    jobs = [job for _, js in cells for job in js]
    rows = []
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            futures = [pool.submit(run_one, cell, s, root) for cell, s in jobs]
            for (cell, s), fut in zip(jobs, futures):
                rows.append(_collect(fut.result, cell, s))
    else:
        rows = [_collect(lambda: run_one(cell, s, root), cell, s) for cell, s in jobs]

    summary, failed = [], 0
    for (variant, alpha, beta), js in cells:
        mine = [r for r in rows if (r["variant"], r["alpha"], r["beta"]) == (variant, alpha, beta)]
        scores = np.array([r["score"] for r in mine if np.isfinite(r["score"])])
        bad = [f"seed{r['seed']}: {r['status']}" for r in mine if r["status"] != "ok"]
        failed += len(bad)
        summary.append({
            "variant": variant, "alpha": alpha, "beta": beta, "n_seeds": len(mine),
            "mean": float(scores.mean()) if scores.size else float("nan"),
            "std": float(scores.std()) if scores.size else float("nan"),
            "scores": " ".join(f"{r['score']:.4f}" for r in mine),
            "failures": "; ".join(bad),
        })
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        for row in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if len(alphas) > 1 or len(betas) > 1:
        from cfil.svg import heatmap

        for variant in dict.fromkeys(s["variant"] for s in summary):
            grid = np.array([[next(s["mean"] for s in summary if (s["variant"], s["alpha"], s["beta"]) == (variant, a, b))
                              for b in betas] for a in alphas])
            (root / f"grid-{variant}.svg").write_text(
                heatmap(grid, alphas, betas, f"{variant} normalized score", "beta", "alpha"))
    for row in summary:
        print(f"{row['variant']:>10} alpha={row['alpha']:<5} beta={row['beta']:<5} "
              f"{row['mean']:.3f} +- {row['std']:.3f}  {row['failures']}")
    return 1 if failed else 0


def _collect(fn, cell: dict, seed: int) -> dict:
    try:
        return fn()
    except (NumericError, ValueError, RuntimeError) as err:
        log.error("cell %s seed %d failed: %s", cell.get("variant"), seed, err)
        return {"variant": cell["variant"], "alpha": cell["alpha"], "beta": cell["beta"], "seed": seed,
                "score": float("nan"), "status": f"error: {err}"}


def cmd_bcgraph(args) -> int:
    from cfil.analysis import (
        bc_2d_grid, bc_graph, monotonicity_score, train_bc, write_graph_csv, write_grid_csv,
    )
    from cfil.ratio import InputView
    from cfil.variants import make_reward_model

    spec = get_env(args.env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bc_demos = record_demos(spec, n_traj=args.bc_traj, seed=args.seed + 1)
    expert = record_demos(spec, n_traj=1, seed=0)
    snaps = train_bc(bc_demos, iters=args.iters, snapshot_every=max(args.iters // args.snapshots, 1), seed=args.seed)
    view = InputView("state-action", spec.obs_dim, spec.act_dim)
    factory = lambda: make_reward_model(args.variant, view, seed=args.seed)  # noqa: E731
    graph = bc_graph(snaps, factory, expert, seed=args.seed, save_stride=args.grid_stride)
    write_graph_csv(out / f"bcgraph-{args.variant}.csv", graph)
    rows, grid = bc_2d_grid(snaps, graph, factory(), stride=args.grid_stride)
    write_grid_csv(out / f"bcgrid-{args.variant}.csv", rows, grid)
    score = monotonicity_score(graph, spec.expert_ref)
    print(f"{args.variant}: monotonicity {score:.3f} over {len(snaps)} snapshots")
    return 0


def cmd_plot(args) -> int:
    from cfil.svg import xy_plot

    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.csv} has no data rows")
    for col in (args.x, args.y):
        if col not in rows[0]:
            raise ValueError(f"column {col!r} not in {list(rows[0])}")
    x = [float(r[args.x]) for r in rows]
    y = [float(r[args.y]) for r in rows]
    Path(args.out).write_text(xy_plot(x, y, args.title or Path(args.csv).name, args.x, args.y, line=args.line))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("expert", help="record scripted-expert demonstrations")
    e.add_argument("--env", default="pointmass")
    e.add_argument("--n-traj", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_expert)

    for name, fn, helptext in (("train", cmd_train, "train one imitation run"),
                               ("sweep", cmd_sweep, "grid over variants x alpha x beta x seeds")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--out", required=True, help="root directory for run directories")
        if name == "sweep":
            s.add_argument("--workers", type=int, default=1)
        s.set_defaults(fn=fn)

    b = sub.add_parser("bcgraph", help="BC-graph diagnostic for one estimator variant")
    b.add_argument("--env", default="pointmass")
    b.add_argument("--variant", default="CFIL")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--iters", type=int, default=6000)
    b.add_argument("--snapshots", type=int, default=100)
    b.add_argument("--bc-traj", type=int, default=10)
    b.add_argument("--grid-stride", type=int, default=10)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bcgraph)

    pl = sub.add_parser("plot", help="SVG plot of two CSV columns")
    pl.add_argument("csv")
    pl.add_argument("--x", required=True)
    pl.add_argument("--y", required=True)
    pl.add_argument("--line", action="store_true")
    pl.add_argument("--title")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ExpertQualityError, NumericError, ValueError, OSError) as err:
        print(f"cfil {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
