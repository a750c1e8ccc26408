"""Experiment runner.

Subcommands::

    sobolev-td run     one (model, method) cell over N seeds -> metrics CSVs
    sobolev-td table1  the four toy cells -> Table-1-style summary CSV
    sobolev-td slices  Q-function slices at chosen steps/states -> slice CSV
    sobolev-td oracle  write the ground-truth solution file

Precedence: command-line flags > ``--config`` file > built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .critics import save_params
from .evalbench import METRICS, MetricsRow, aggregate_seeds
from .oracle import LqrOracle, ToyOracle, riccati_solve, value_iteration_toy
from .training import ConfigError, TrainerConfig, make_env, run_experiment

METRICS_HEADER = ["step", "seed", "q_mse", "grad_a_mse", "policy_err", "mc_return"]
SUMMARY_HEADER = ["model", "method", "q_mse_mean", "q_mse_std", "grad_a_mse_mean", "grad_a_mse_std",
                  "policy_err_mean", "policy_err_std"]
SLICE_HEADER = ["step", "s", "a", "q_sobolev", "q_baseline", "q_star"]

ORACLE_GRID = 1001
ORACLE_TOL = 1e-12

# flag name -> config key
_FLAG_KEYS = {
    "env": "env", "algo": "algo", "method": "method", "model": "model", "seeds": "seeds",
    "steps": "total_steps", "lr": "lr", "lr_actor": "lr_actor", "batch": "batch_size", "gamma": "gamma",
    "lambda_s": "lambda_s", "lambda_a": "lambda_a", "polyak_rho": "polyak_rho",
    "warmup_steps": "warmup_steps", "grid_points": "grid_points", "argmax_dtype": "argmax_dtype", "eval_every": "eval_every",
    "out": "out", "jobs": "jobs", "hidden": "hidden", "n_hidden": "n_hidden",
    "checkpoint_every": "checkpoint_every", "slice_steps": "slice_steps", "slice_states": "slice_states",
}


@dataclass
class RunPlan:
    command: str = "run"
    seeds: int = 1
    jobs: int = 1
    out: str = "runs"
    checkpoint_every: int = 100
    slice_steps: tuple[int, ...] = (200, 400)
    slice_states: tuple[float, ...] = (0.0, 0.5)
    config_file: str | None = None

    def seed_list(self) -> list[int]:
        offset = int(os.environ.get("SOBOLEV_TD_SEED_OFFSET", "0"))
        return [offset + i for i in range(self.seeds)]


_PLAN_KEYS = {f.name for f in dataclasses.fields(RunPlan)} - {"command", "config_file"}
_CFG_FIELDS = {f.name: f for f in dataclasses.fields(TrainerConfig)}


class UsageError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class _Parser(argparse.ArgumentParser):
    """Raise :class:`UsageError` instead of printing and exiting."""

    def error(self, message):
        m = re.search(r"argument (--[\w-]+)", message) or re.search(r"arguments: (--[\w-]+)", message)
        key = m.group(1).lstrip("-").replace("-", "_") if m else "argv"
        raise UsageError(key, message)


def _coerce(key: str, raw: str, template):
    try:
        if key in ("slice_steps",):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if key in ("slice_states",):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if key == "lr_actor":
            return None if raw in ("", "none", "None") else float(raw)
        if isinstance(template, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(key, f"cannot parse {raw!r} as {type(template).__name__}") from None


def _default(key: str):
    if key in _CFG_FIELDS:
        return _CFG_FIELDS[key].default
    return getattr(RunPlan(), key)


def read_config_file(path) -> dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}", "expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _CFG_FIELDS and key not in _PLAN_KEYS:
            raise UsageError(key, "unknown configuration key")
        values[key] = _coerce(key, raw.strip(), _default(key))
    return values


def emit_config(cfg: TrainerConfig, plan: RunPlan) -> str:
    lines = []
    for f in dataclasses.fields(TrainerConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else (repr(v) if isinstance(v, float) else v)}")
    for key in sorted(_PLAN_KEYS):
        v = getattr(plan, key)
        if isinstance(v, tuple):
            v = " ".join(map(repr if key == "slice_states" else str, v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--env", choices=["toy1d", "lqr"])
    common.add_argument("--algo", choices=["q_learning", "actor_critic"])
    common.add_argument("--method", choices=["baseline", "sobolev"])
    common.add_argument("--model", choices=["quadratic", "mlp"])
    common.add_argument("--seeds", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--lr-actor", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--lambda-s", type=float)
    common.add_argument("--lambda-a", type=float)
    common.add_argument("--polyak-rho", type=float)
    common.add_argument("--warmup-steps", type=int)
    common.add_argument("--grid-points", type=int)
    common.add_argument("--argmax-dtype", choices=["float32", "float64"],
                        help="precision of the target argmax search")
    common.add_argument("--eval-every", type=int)
    common.add_argument("--hidden", type=int)
    common.add_argument("--n-hidden", type=int)
    common.add_argument("--checkpoint-every", type=int)
    common.add_argument("--slice-steps", help="comma-separated steps, e.g. 200,400")
    common.add_argument("--slice-states", help="comma-separated states, e.g. 0.0,0.5")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="seed runs executed concurrently")

    parser = _Parser(prog="sobolev-td", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train one cell over several seeds")
    sub.add_parser("table1", parents=[common], help="quadratic/mlp x baseline/sobolev summary")
    sub.add_parser("slices", parents=[common], help="dump Q-function slices")
    sub.add_parser("oracle", parents=[common], help="write the ground-truth solution")
    return parser


def parse_config(argv, config_file=None) -> tuple[TrainerConfig, RunPlan]:
    """Resolve defaults < config file < flags into a config and a run plan."""
    args = build_parser().parse_args(argv)
    merged: dict[str, object] = {}
    path = config_file or args.config
    if path:
        merged.update(read_config_file(path))
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if isinstance(v, str) and key in ("slice_steps", "slice_states"):
            v = _coerce(key, v, _default(key))
        merged[key] = v
    cfg_kw = {k: v for k, v in merged.items() if k in _CFG_FIELDS}
    plan_kw = {k: v for k, v in merged.items() if k in _PLAN_KEYS}
    try:
        cfg = TrainerConfig(**cfg_kw)
    except ConfigError as exc:
        raise UsageError(exc.key, str(exc)) from None
    plan = RunPlan(command=args.command, config_file=path, **plan_kw)
    for key in ("seeds", "jobs", "checkpoint_every"):
        if getattr(plan, key) < 1:
            raise UsageError(key, "must be >= 1")
    return cfg, plan


# --------------------------------------------------------------------------
# oracles and single runs


def build_oracle(cfg: TrainerConfig):
    env = make_env(cfg)
    if cfg.env == "toy1d":
        return ToyOracle(value_iteration_toy(ORACLE_GRID, cfg.gamma, ORACLE_TOL), env)
    return LqrOracle(env, riccati_solve(env))


def fmt9(x) -> str:
    return f"{float(x):.9g}"


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.step, r.seed] + [fmt9(getattr(r, m)) for m in METRICS])


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(step=int(r["step"]), seed=int(r["seed"]),
                           **{m: float(r[m]) for m in METRICS}) for r in reader]


def write_aggregate_csv(path, agg) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for a in agg:
            w.writerow([a.step, a.n_seeds] + [fmt9(getattr(a, f"{m}_{s}")) for m in METRICS
                                              for s in ("mean", "std")])


def write_manifest(out: Path, cfg: TrainerConfig, plan: RunPlan, extra: dict | None = None) -> None:
    header = [f"# sobolev-td {__version__}",
              f"# command = {plan.command}",
              f"# env_id = {cfg.env}",
              f"# oracle = grid {ORACLE_GRID}, tol {ORACLE_TOL}" if cfg.env == "toy1d"
              else "# oracle = riccati fixed-point iteration",
              f"# out = {out}",
              f"# started = {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    for k, v in (extra or {}).items():
        header.append(f"# {k} = {v}")
    (out / "manifest.txt").write_text("\n".join(header) + "\n" + emit_config(cfg, plan))


def _run_seed(args):
    cfg, out_dir, checkpoint_every, keep = args
    oracle = build_oracle(cfg)
    ckpt = (lambda t: (checkpoint_every and t % checkpoint_every == 0) or t in keep) \
        if (checkpoint_every or keep) else None
    res = run_experiment(cfg, make_env(cfg), oracle, checkpoint_steps=ckpt)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_metrics_csv(out_dir / f"metrics_seed{cfg.seed}.csv", res.metrics)
        save_params(out_dir / f"checkpoint_seed{cfg.seed}.txt", res.model, res.params, step=cfg.total_steps)
    return res.metrics, res.checkpoints, res.params, res.actor_params


def run_seeds(cfg: TrainerConfig, plan: RunPlan, out_dir: Path | None, keep=()) -> list:
    jobs = [(cfg.replace(seed=s), str(out_dir) if out_dir else None, plan.checkpoint_every, tuple(keep))
            for s in plan.seed_list()]
    if plan.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            return list(pool.map(_run_seed, jobs))
    return [_run_seed(j) for j in jobs]


def run_cell(cfg: TrainerConfig, plan: RunPlan, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    results = run_seeds(cfg, plan, out)
    rows = [r for res in results for r in res[0]]
    write_metrics_csv(out / "metrics.csv", rows)
    agg = aggregate_seeds(rows)
    write_aggregate_csv(out / "aggregate.csv", agg)
    return agg, results


# --------------------------------------------------------------------------
# Table 1 and slices


def sobolev_lambdas(cfg: TrainerConfig) -> dict[str, float]:
    """Gradient weights for the Sobolev cells: the configured ones, or 1 when
    the base config is a baseline (whose weights are pinned to 0)."""
    if cfg.method == "sobolev":
        return {"lambda_s": cfg.lambda_s, "lambda_a": cfg.lambda_a}
    return {"lambda_s": 1.0, "lambda_a": 1.0}


def run_table1(cfg: TrainerConfig, plan: RunPlan, models=("quadratic", "mlp")) -> list[dict]:
    """Final aggregate of every (model, method) cell, written as ``summary.csv``."""
    if cfg.env != "toy1d":
        raise UsageError("env", "table1 is defined on the toy1d environment")
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, plan)
    summary = []
    for model in models:
        for method in ("baseline", "sobolev"):
            lam = {} if method == "baseline" else sobolev_lambdas(cfg)
            cell_cfg = cfg.replace(model=model, method=method, **lam)
            agg, _ = run_cell(cell_cfg, plan, out / f"{model}_{method}")
            last = agg[-1]
            summary.append({"model": model, "method": method,
                            **{f"{m}_{s}": getattr(last, f"{m}_{s}")
                               for m in ("q_mse", "grad_a_mse", "policy_err") for s in ("mean", "std")}})
    write_summary_csv(out / "summary.csv", summary)
    return summary


def write_summary_csv(path, summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in summary:
            w.writerow([row["model"], row["method"]] + [fmt9(row[k]) for k in SUMMARY_HEADER[2:]])


def dump_q_slices(model, checkpoints_sobolev: dict, checkpoints_baseline: dict, oracle,
                  states=(0.0, 0.5), steps=(200, 400), n_actions: int = 201) -> list[tuple]:
    """Rows ``(step, s, a, q_sobolev, q_baseline, q_star)`` over an action grid."""
    a = np.linspace(-1.0, 1.0, n_actions)
    rows = []
    for step in steps:
        for name, ck in (("sobolev", checkpoints_sobolev), ("baseline", checkpoints_baseline)):
            if step not in ck:
                raise KeyError(f"missing {name} checkpoint for step {step}")
        for s in states:
            sv = np.full_like(a, s)
            qs = model.values(checkpoints_sobolev[step], sv, a)
            qb = model.values(checkpoints_baseline[step], sv, a)
            qstar = oracle.q_star(sv, a)
            rows.extend(zip([step] * n_actions, sv, a, qs, qb, qstar))
    return rows


def write_slices_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SLICE_HEADER)
        for r in rows:
            w.writerow([int(r[0])] + [fmt9(x) for x in r[1:]])


def read_slices_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SLICE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return np.array([[float(x) for x in row] for row in reader])


def slice_sup_distances(rows: np.ndarray) -> dict[tuple[int, float], tuple[float, float]]:
    """Per (step, s): sup-norm distance of the Sobolev and baseline slices to Q*."""
    out = {}
    for step in np.unique(rows[:, 0]):
        for s in np.unique(rows[:, 1]):
            sel = (rows[:, 0] == step) & (rows[:, 1] == s)
            if not sel.any():
                continue
            d_sob = float(np.abs(rows[sel, 3] - rows[sel, 5]).max())
            d_base = float(np.abs(rows[sel, 4] - rows[sel, 5]).max())
            out[(int(step), float(s))] = (d_sob, d_base)
    return out


def run_slices(cfg: TrainerConfig, plan: RunPlan) -> Path:
    if cfg.env != "toy1d":
        raise UsageError("env", "slices are defined on the toy1d environment")
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = tuple(plan.slice_steps)
    cfg = cfg.replace(total_steps=max(steps))
    write_manifest(out, cfg, plan)
    oracle = build_oracle(cfg)
    lam = sobolev_lambdas(cfg)
    runs = {}
    for method in ("baseline", "sobolev"):
        cell = cfg.replace(method=method, **(lam if method == "sobolev" else {}))
        runs[method] = run_seeds(cell, plan, None, keep=steps)
    model = make_model(cfg)
    per_seed = []
    for k, seed in enumerate(plan.seed_list()):
        rows = dump_q_slices(model, runs["sobolev"][k][1], runs["baseline"][k][1], oracle,
                             plan.slice_states, steps)
        write_slices_csv(out / f"slices_seed{seed}.csv", rows)
        per_seed.append(np.array(rows, dtype=np.float64))
    mean = np.mean(per_seed, axis=0)
    write_slices_csv(out / "slices.csv", [tuple(r) for r in mean])
    return out


def make_model(cfg: TrainerConfig):
    from .critics import init_critic
    env = make_env(cfg)
    return init_critic(cfg.model, 0, env.state_dim, env.action_dim, cfg.hidden, cfg.n_hidden)[0]


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg, plan = parse_config(argv)
        out = Path(plan.out)
        if plan.command == "run":
            out.mkdir(parents=True, exist_ok=True)
            write_manifest(out, cfg, plan)
            agg, _ = run_cell(cfg, plan, out)
            last = agg[-1]
            print(",".join(["step"] + [f"{m}_mean" for m in METRICS]))
            print(",".join([str(last.step)] + [fmt9(last.mean(m)) for m in METRICS]))
        elif plan.command == "table1":
            summary = run_table1(cfg, plan)
            print(",".join(SUMMARY_HEADER))
            for row in summary:
                print(",".join([row["model"], row["method"]] + [fmt9(row[k]) for k in SUMMARY_HEADER[2:]]))
        elif plan.command == "slices":
            path = run_slices(cfg, plan)
            for (step, s), (d_sob, d_base) in sorted(slice_sup_distances(
                    read_slices_csv(path / "slices.csv")).items()):
                print(f"step={step},s={s:g},sup_sobolev={fmt9(d_sob)},sup_baseline={fmt9(d_base)}")
        elif plan.command == "oracle":
            out.mkdir(parents=True, exist_ok=True)
            oracle = build_oracle(cfg)
            name = "oracle_toy1d.txt" if cfg.env == "toy1d" else "oracle_lqr.txt"
            oracle.sol.save(out / name)
            print(out / name)
    except UsageError as exc:
        print(f"error: kind=usage key={exc.key} message={exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any run failure as one machine-readable line
        print(f"error: kind={type(exc).__name__} message={exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
