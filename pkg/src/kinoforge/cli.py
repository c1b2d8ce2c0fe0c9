"""Command-line entry points: ``kinoforge <subcommand> ...`` or ``python -m kinoforge``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("kinoforge")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _system(name: str):
    from .bench import _load_spec

    return _load_spec(name)


def cmd_gen_data(a):
    from .dataset import DataGenConfig, generate_ctrl_data

    spec = _system(a.system)
    eps = spec.default_epsilons()
    eps = type(eps)(a.eps_e if a.eps_e is not None else eps.eps_E,
                    a.eps_r if a.eps_r is not None else eps.eps_R,
                    a.eps_v if a.eps_v is not None else eps.eps_V)
    cfg = DataGenConfig(seed=a.seed, n_min=a.nmin,
                        **({"durations": tuple(_floats(a.durations))} if a.durations else {}),
                        **({"max_samples": a.samples} if a.samples else {}))
    ds = generate_ctrl_data(spec, eps, cfg)
    ds.save(a.out)
    st = ds.stats or {}
    ratio = st["retained"] / st["candidates"] if st.get("candidates") else float("nan")
    log.info("%d entries written to %s (retention %.2f%%)", len(ds), a.out, 100 * ratio)


def cmd_train(a):
    from .controller import TrainConfig, train
    from .dataset import ControlDataset

    ds = ControlDataset.load(a.dataset)
    kw = {"seed": a.seed}
    for k in ("epochs", "lr", "batch_size", "patience"):
        if getattr(a, k) is not None:
            kw[k] = getattr(a, k)
    res = train(ds, a.arch, TrainConfig.for_spec(ds.spec, **kw), log_every=a.log_every)
    res.model.save(a.out)
    log.info("best epoch %d: control MSE %.5f, state MSE %.5f", res.best_epoch, res.val.ctrl_mse, res.val.state_mse)
    if a.curve:
        rows = ["epoch,train,val_total,val_ctrl,val_state"] + [",".join(map(repr, map(float, r))) for r in res.curve]
        Path(a.curve).write_text("\n".join(rows) + "\n")


def cmd_eval_controller(a):
    from .controller import MlpController, closed_loop_csv, closed_loop_errors, split_indices, within_factor
    from .dataset import ControlDataset

    ds = ControlDataset.load(a.dataset)
    model = MlpController.load(a.model)
    if a.held_out:
        _, idx = split_indices(len(ds), a.val_split, a.seed)
    else:
        idx = np.arange(len(ds))
    if a.queries and a.queries < len(idx):
        idx = np.sort(np.random.default_rng(a.seed).choice(idx, a.queries, replace=False))
    err = closed_loop_errors(model, ds, idx)
    Path(a.report).write_text(closed_loop_csv(err, ds.eps))
    log.info("%d queries, %.1f%% within 2 eps", len(idx), 100 * within_factor(err, ds.eps).mean())


def cmd_medial_axis(a):
    from .maps_io import load_map
    from .medial_axis import attach_goal, compute_medial_axis, field_svg

    m = load_map(a.map)
    f = compute_medial_axis(m, a.radius)
    if a.goal:
        f = attach_goal(f, _floats(a.goal))
    f.save(a.out)
    if a.svg:
        Path(a.svg).write_text(field_svg(f, m, w=a.w))
    log.info("%d medial-axis cells", int(f.ma_mask.sum()))


def cmd_plan(a):
    from .controller import MlpController
    from .dataset import ControlDataset
    from .maps_io import load_map
    from .medial_axis import MedialAxisField, attach_goal, compute_medial_axis
    from .planner import ALIASES, PlannerConfig, plan, plan_svg, solution_csv

    spec = _system(a.system)
    m = load_map(a.map)
    start, goal = _floats(a.start), _floats(a.goal)
    expansion = ALIASES.get(a.expansion, a.expansion)
    ds = ControlDataset.load(a.dataset, spec) if a.dataset else None
    model = MlpController.load(a.model) if a.model else None
    field = None
    if expansion == "learned_ma" or a.heuristic == "ma":
        field = MedialAxisField.load(a.field) if a.field else compute_medial_axis(m, a.radius)
        if field.goal is None or not np.allclose(field.goal, goal[:2]):
            field = attach_goal(field, goal)
    cfg = PlannerConfig(expansion=expansion, blossom=a.blossom, time_limit=a.time, iter_limit=a.iter_limit,
                        seed=a.seed, robot_radius=a.radius, goal_radius=a.goal_radius, ma_weight=a.w,
                        clock=a.clock, completeness_safeguard=not a.no_safeguard,
                        ma_heuristic=a.heuristic == "ma")
    res = plan(start, goal, m, spec, cfg, ds, model, field,
               on_solution=lambda s: log.info("t=%.2fs it=%d cost %.3f", s.time, s.iteration, s.cost))
    Path(a.out).write_text(solution_csv(res))
    if a.svg:
        Path(a.svg).write_text(plan_svg(m, spec, start, goal, res, a.goal_radius))
    if res.best is None:
        log.warning("no solution after %d iterations", res.iterations)
        return 1


def cmd_bench(a):
    from .bench import BenchConfig, load_setup, normalize, render, run_benchmark

    cfg = BenchConfig.from_file(a.config)
    if a.paper_scale:
        cfg = cfg.paper_scale()
    if a.jobs:
        cfg = replace(cfg, jobs=a.jobs)
    recs = run_benchmark(cfg, a.out_dir, log=log.info)
    report = normalize(recs)
    render(report, recs, a.out_dir, load_setup(cfg))
    print(report.to_csv(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kinoforge")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a pruned control dataset")
    g.add_argument("--system", default="first", help="first | second | system file")
    g.add_argument("--eps-e", type=float)
    g.add_argument("--eps-r", type=float)
    g.add_argument("--eps-v", type=float)
    g.add_argument("--durations", help="comma-separated seconds")
    g.add_argument("--nmin", type=int, default=4)
    g.add_argument("--samples", type=int, help="total random-refinement budget")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the controller network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--arch", default="fo", choices=["fo", "so"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--curve", help="write the learning curve CSV here")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval-controller", help="closed-loop errors of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--queries", type=int, default=500)
    e.add_argument("--all", dest="held_out", action="store_false", help="sample from the whole dataset")
    e.add_argument("--val-split", type=float, default=0.1)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval_controller)

    m = sub.add_parser("medial-axis", help="extract the medial axis and vector fields")
    m.add_argument("--map", required=True)
    m.add_argument("--goal")
    m.add_argument("--radius", type=float, default=1.0)
    m.add_argument("--w", type=float, default=0.3)
    m.add_argument("--out", required=True)
    m.add_argument("--svg")
    m.set_defaults(fn=cmd_medial_axis)

    q = sub.add_parser("plan", help="plan on a map")
    q.add_argument("--map", required=True)
    q.add_argument("--start", required=True, help="x,y,theta[,vl,vr]")
    q.add_argument("--goal", required=True, help="x,y")
    q.add_argument("--system", default="first")
    q.add_argument("--expansion", default="random", choices=["random", "lc", "ma", "learned_sample", "learned_ma"])
    q.add_argument("--blossom", type=int, default=8)
    q.add_argument("--time", type=float, default=20.0)
    q.add_argument("--iter-limit", type=int)
    q.add_argument("--clock", default="wall", choices=["wall", "virtual"])
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--radius", type=float, default=1.0)
    q.add_argument("--goal-radius", type=float, default=3.0)
    q.add_argument("--w", type=float, default=0.3)
    q.add_argument("--no-safeguard", action="store_true")
    q.add_argument("--model")
    q.add_argument("--dataset")
    q.add_argument("--field")
    q.add_argument("--heuristic", choices=("ma", "straight"), default="ma",
                   help="time-to-go estimate: routed over the medial axis, or straight line")
    q.add_argument("--out", required=True)
    q.add_argument("--svg")
    q.set_defaults(fn=cmd_plan)

    b = sub.add_parser("bench", help="run the planner benchmark")
    b.add_argument("--config", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--paper-scale", action="store_true")
    b.add_argument("--jobs", type=int)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if a.quiet else logging.INFO, format="%(message)s")
    return a.fn(a) or 0


if __name__ == "__main__":
    sys.exit(main())
