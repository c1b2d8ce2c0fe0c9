"""Benchmark harness: planner x blossom x problem x seed, anytime curves, reports.

A benchmark is described by a plain ``key = value`` file (``#`` comments
allowed)::

    map = synthetic          # or a MovingAI .map path
    downscale = 2
    system = first           # first | second | path to a system file
    dataset = data/fo.csv
    model = data/fo.json
    planners = dirt_rand, dirt_lc, dirt_MA
    blossoms = 1, 8
    problems = 5
    seeds = 10
    time_limit = 20

Records are appended to ``records.csv`` one run at a time and a run is only
marked complete in ``progress.log`` after its rows hit the disk, so an
interrupted benchmark resumes where it stopped and loses at most the run that
was in flight.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .controller import MlpController
from .dataset import ControlDataset
from .dynamics import SystemSpec
from .maps_io import GridMap, ProblemSet, downscale, generate_problems, load_map, synthetic_city
from .medial_axis import attach_goal, compute_medial_axis
from .planner import PlannerConfig, map_raster_svg, plan, _polyline, trajectory_points

PLANNERS = {"dirt_rand": "random", "dirt_lc": "learned_sample", "dirt_MA": "learned_ma"}
RECORD_HEADER = ["planner", "blossom", "problem", "seed", "event_time_s", "event_iter", "cost_s"]


@dataclass(frozen=True)
class BenchConfig:
    map: str = "synthetic"
    map_size: int = 256
    map_seed: int = 0
    downscale: int = 2
    system: str = "first"
    dataset: str = ""
    model: str = ""
    planners: tuple = ("dirt_rand", "dirt_lc", "dirt_MA")
    blossoms: tuple = (1, 8)
    problems: int = 5
    separation: float | None = None  # default 100 cells at full size
    problem_seed: int = 0
    seeds: int = 10
    seed_base: int = 0
    time_limit: float = 20.0
    iter_limit: int | None = None
    clock: str = "wall"
    robot_radius: float = 1.0
    goal_radius: float = 3.0
    ma_weight: float = 0.3
    heuristic: str = "ma"  # shared by every planner: "ma" or "straight"
    safeguard: bool = True
    jobs: int = 1
    save_paths: bool = True

    def __post_init__(self):
        bad = [p for p in self.planners if p not in PLANNERS]
        if bad:
            raise ValueError(f"unknown planners {bad}; choose from {sorted(PLANNERS)}")
        if self.clock not in ("wall", "virtual"):
            raise ValueError("clock must be 'wall' or 'virtual'")
        if self.heuristic not in ("ma", "straight"):
            raise ValueError("heuristic must be 'ma' or 'straight'")

    @property
    def min_separation(self) -> float:
        return self.separation if self.separation is not None else 100.0 / self.downscale

    def paper_scale(self) -> "BenchConfig":
        """The full protocol: full-size map, 60 s, 30 seeds, 10 problems, B in {1, 8, 32}."""
        return replace(self, downscale=1, time_limit=60.0, seeds=30, problems=10, blossoms=(1, 8, 32),
                       separation=None)

    @classmethod
    def from_text(cls, text: str) -> "BenchConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k == "paper_scale":
                continue
            if k not in kinds:
                raise ValueError(f"line {n}: unknown key {k!r}")
            kw[k] = _coerce(kinds[k], v)
        cfg = cls(**kw)
        if _paper_flag(text):
            cfg = cfg.paper_scale()
        return cfg

    @classmethod
    def from_file(cls, path) -> "BenchConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(map(str, v))
            out.append(f"{k} = {'none' if v is None else v}")
        return "\n".join(out) + "\n"


def _paper_flag(text):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip().replace("-", "_")
        if line.startswith("paper_scale") and "=" in line:
            return line.split("=", 1)[1].strip().lower() in ("1", "true", "yes")
    return False


def _coerce(kind: str, v: str):
    if v.lower() == "none":
        return None
    if kind == "tuple":
        items = [s.strip() for s in v.split(",") if s.strip()]
        return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
    if kind == "bool":
        return v.lower() in ("1", "true", "yes")
    if kind.startswith("int"):
        return int(v)
    if kind.startswith("float"):
        return float(v)
    return v


# --------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    planner: str
    blossom: int
    problem: int
    seed: int
    events: list = field(default_factory=list)  # (time_s, iteration, cost_s)
    iterations: int = 0
    error: str = ""

    @property
    def key(self):
        return (self.planner, self.blossom, self.problem, self.seed)

    @property
    def solved(self) -> bool:
        return bool(self.events)

    @property
    def final_cost(self) -> float:
        return self.events[-1][2] if self.events else math.inf

    @property
    def first_time(self) -> float:
        return self.events[0][0] if self.events else math.inf

    @property
    def first_iter(self) -> float:
        return self.events[0][1] if self.events else math.inf

    def rows(self) -> list:
        head = [self.planner, str(self.blossom), str(self.problem), str(self.seed)]
        if not self.events:
            return [head + ["", "", ""]]
        return [head + [repr(float(t)), str(int(i)), repr(float(c))] for t, i, c in self.events]


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerows(r.rows())
    return buf.getvalue()


def read_records(path) -> list[RunRecord]:
    """Group the rows of a ``records.csv`` back into runs."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["planner"], int(row["blossom"]), int(row["problem"]), int(row["seed"]))
            rec = out.setdefault(key, RunRecord(*key))
            if row["event_time_s"]:
                rec.events.append((float(row["event_time_s"]), int(row["event_iter"]), float(row["cost_s"])))
    return list(out.values())


# --------------------------------------------------------------------------
# setup


@dataclass
class BenchSetup:
    config: BenchConfig
    grid: GridMap
    spec: SystemSpec
    problems: ProblemSet
    dataset: ControlDataset | None
    model: MlpController | None


def _load_spec(name: str) -> SystemSpec:
    if name in ("first", "1", "first_order"):
        return SystemSpec.first_order()
    if name in ("second", "2", "second_order"):
        return SystemSpec.second_order()
    return SystemSpec.from_file(name)


def load_setup(cfg: BenchConfig) -> BenchSetup:
    if cfg.map == "synthetic":
        full = synthetic_city(cfg.map_size, cfg.map_seed)
    else:
        if not Path(cfg.map).exists():
            raise FileNotFoundError(f"map {cfg.map} not found")
        full = load_map(cfg.map)
    grid = downscale(full, cfg.downscale)
    spec = _load_spec(cfg.system)
    learned = any(p != "dirt_rand" for p in cfg.planners)
    ds = mdl = None
    if learned:
        for p in (cfg.dataset, cfg.model):
            if not p or not Path(p).exists():
                raise FileNotFoundError(f"learned planners need artifact {p!r}")
        ds = ControlDataset.load(cfg.dataset, spec)
        mdl = MlpController.load(cfg.model)
    probs = generate_problems(grid, cfg.problems, cfg.min_separation, cfg.robot_radius, cfg.problem_seed)
    return BenchSetup(cfg, grid, spec, probs, ds, mdl)


def run_seed(seed: int, problem: int) -> int:
    return int(np.random.SeedSequence([seed, problem]).generate_state(1)[0])


def _planner_config(cfg: BenchConfig, label: str, B: int, seed: int, problem: int) -> PlannerConfig:
    return PlannerConfig(expansion=PLANNERS[label], blossom=B, time_limit=cfg.time_limit,
                         iter_limit=cfg.iter_limit, goal_radius=cfg.goal_radius, robot_radius=cfg.robot_radius,
                         completeness_safeguard=cfg.safeguard, seed=run_seed(seed, problem),
                         ma_weight=cfg.ma_weight, clock=cfg.clock, ma_heuristic=cfg.heuristic == "ma")


def _cells(cfg: BenchConfig, problem: int):
    for label in cfg.planners:
        for B in cfg.blossoms:
            for k in range(cfg.seeds):
                yield label, int(B), problem, cfg.seed_base + k


def _run_problem(setup: BenchSetup, problem: int, done: set, sink=None, paths_dir=None):
    cfg = setup.config
    start, goal = setup.problems.starts[problem], setup.problems.goals[problem]
    fld = None
    if "dirt_MA" in cfg.planners or cfg.heuristic == "ma":  # the heuristic needs it too
        fld = attach_goal(compute_medial_axis(setup.grid, cfg.robot_radius), goal)
    out = []
    for label, B, p, seed in _cells(cfg, problem):
        if (label, B, p, seed) in done:
            continue
        rec = RunRecord(label, B, p, seed)
        try:
            res = plan(start, goal, setup.grid, setup.spec, _planner_config(cfg, label, B, seed, p),
                       setup.dataset, setup.model, fld)
            rec.events = [(s.time, s.iteration, s.cost) for s in res.solutions]
            rec.iterations = res.iterations
            if paths_dir is not None and res.best is not None:
                steps = "\n".join(f"{float(st.control[0])!r},{float(st.control[1])!r},{float(st.duration)!r}"
                                   for st in res.best.steps)
                (paths_dir / f"{label}_B{B}_p{p}_s{seed}.csv").write_text("ctrl_a,ctrl_b,duration\n" + steps + "\n")
        except Exception as exc:  # recorded, not fatal
            rec.error = f"{type(exc).__name__}: {exc}"
        if sink is not None:
            sink(rec)
        out.append(rec)
    return out


def _worker(args):
    cfg, problem, done, paths_dir = args
    return _run_problem(load_setup(cfg), problem, done, None, paths_dir)


class _Journal:
    """Append-only record store with a completion log for resume."""

    def __init__(self, out_dir: Path):
        self.records = out_dir / "records.csv"
        self.progress = out_dir / "progress.log"
        self.failures = out_dir / "failures.csv"
        done = set()
        if self.progress.exists():
            for line in self.progress.read_text().splitlines():
                parts = line.split(",")
                if len(parts) == 4:
                    done.add((parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        kept = [r for r in read_records(self.records) if r.key in done] if self.records.exists() else []
        # drop rows of a run interrupted between the record write and its progress mark
        self.records.write_text(records_csv(kept))
        self.done = done

    def add(self, rec: RunRecord):
        if rec.error:
            with open(self.failures, "a") as fh:
                fh.write(f"{rec.planner},{rec.blossom},{rec.problem},{rec.seed},{rec.error!r}\n")
        else:
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(rec.rows())
            with open(self.records, "a") as fh:
                fh.write(buf.getvalue())
                fh.flush()
                os.fsync(fh.fileno())
        with open(self.progress, "a") as fh:
            fh.write(f"{rec.planner},{rec.blossom},{rec.problem},{rec.seed}\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.done.add(rec.key)


def run_benchmark(config: BenchConfig, out_dir=None, log=None) -> list[RunRecord]:
    """Run every cell; with ``out_dir`` the run is journaled and resumable.

    Returns the records of this invocation plus any loaded from a previous,
    interrupted one, in cell order.
    """
    setup = load_setup(config)
    journal = None
    paths_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text())
        (out_dir / "problems.csv").write_text(setup.problems.to_csv())
        journal = _Journal(out_dir)
        if config.save_paths:
            paths_dir = out_dir / "paths"
            paths_dir.mkdir(exist_ok=True)
    done = set(journal.done) if journal else set()
    t0 = time.perf_counter()

    def sink(rec):
        if journal is not None:
            journal.add(rec)
        if log is not None:
            status = f"cost {rec.final_cost:.2f}" if rec.solved else ("error" if rec.error else "unsolved")
            log(f"[{time.perf_counter() - t0:7.1f}s] {rec.planner} B={rec.blossom} p{rec.problem} "
                f"s{rec.seed}: {status}")

    fresh = []
    probs = range(len(setup.problems))
    if config.jobs <= 1:
        for p in probs:
            fresh += _run_problem(setup, p, done, sink, paths_dir)
    else:
        with ProcessPoolExecutor(config.jobs) as pool:
            for recs in pool.map(_worker, [(config, p, done, paths_dir) for p in probs]):
                for r in recs:
                    sink(r)
                fresh += recs
    if journal is not None:
        old = read_records(journal.records)
        have = {r.key for r in fresh}
        fresh += [r for r in old if r.key not in have]
    order = {c: n for n, c in enumerate(c for p in probs for c in _cells(config, p))}
    return sorted((r for r in fresh if not r.error), key=lambda r: order.get(r.key, len(order)))


# --------------------------------------------------------------------------
# normalisation


@dataclass
class GroupStats:
    planner: str
    blossom: int
    runs: int
    solved: int
    mean_norm_cost: float  # over solved runs only
    median_first_iter: float
    median_first_time: float
    time_curve: np.ndarray  # solved fraction on GRID
    iter_curve: np.ndarray


@dataclass
class NormalizedReport:
    groups: dict  # (planner, B) -> GroupStats
    best_cost: dict  # problem -> best final cost
    max_time: dict
    max_iter: dict
    excluded: list  # problems nobody solved
    grid: np.ndarray

    def to_csv(self) -> str:
        out = ["planner,blossom,runs,solved,solved_fraction,mean_norm_cost,median_first_iter,median_first_time_s"]
        for (p, B), g in sorted(self.groups.items()):
            out.append(f"{p},{B},{g.runs},{g.solved},{g.solved / max(g.runs, 1):.6f},{g.mean_norm_cost:.6f},"
                       f"{g.median_first_iter:.1f},{g.median_first_time:.6f}")
        if self.excluded:
            out.append("# excluded problems (no solution in any cell): " + " ".join(map(str, self.excluded)))
        return "\n".join(out) + "\n"


GRID = np.linspace(0.0, 1.0, 101)


def normalize(records) -> NormalizedReport:
    """Divide costs by each problem's best, first times/iterations by each problem's worst."""
    records = [r for r in records if not r.error]
    probs = sorted({r.problem for r in records})
    best, tmax, imax, excluded = {}, {}, {}, []
    for p in probs:
        solved = [r for r in records if r.problem == p and r.solved]
        if not solved:
            excluded.append(p)
            continue
        best[p] = min(r.final_cost for r in solved)
        tmax[p] = max(r.first_time for r in solved)
        imax[p] = max(r.first_iter for r in solved)
    groups = {}
    for key in sorted({(r.planner, r.blossom) for r in records}):
        rs = [r for r in records if (r.planner, r.blossom) == key and r.problem in best]
        sol = [r for r in rs if r.solved]
        nt = np.array([r.first_time / tmax[r.problem] if tmax[r.problem] > 0 else 1.0 for r in sol])
        ni = np.array([r.first_iter / imax[r.problem] for r in sol])
        n = max(len(rs), 1)
        groups[key] = GroupStats(
            key[0], key[1], len(rs), len(sol),
            float(np.mean([r.final_cost / best[r.problem] for r in sol])) if sol else math.nan,
            float(np.median([r.first_iter for r in sol])) if sol else math.inf,
            float(np.median([r.first_time for r in sol])) if sol else math.inf,
            np.array([(nt <= g).sum() / n for g in GRID]),
            np.array([(ni <= g).sum() / n for g in GRID]))
    return NormalizedReport(groups, best, tmax, imax, excluded, GRID)


def median_first_iterations(records, blossom=None) -> dict:
    """Median iterations to the first solution per planner, over solved runs."""
    out = {}
    for p in sorted({r.planner for r in records}):
        its = [r.first_iter for r in records if r.planner == p and r.solved
               and (blossom is None or r.blossom == blossom)]
        out[p] = float(np.median(its)) if its else math.inf
    return out


def mean_normalized_cost(report: NormalizedReport, blossom=None) -> dict:
    """Per planner, pooled over the chosen blossom setting(s), weighted by solved runs."""
    acc: dict = {}
    for (p, B), g in report.groups.items():
        if blossom is not None and B != blossom or not g.solved:
            continue
        s, n = acc.get(p, (0.0, 0))
        acc[p] = (s + g.mean_norm_cost * g.solved, n + g.solved)
    return {p: s / n for p, (s, n) in acc.items()}


# --------------------------------------------------------------------------
# rendering


def _figure_svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def _charts(report: NormalizedReport):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "kinoforge"
    keys = sorted(report.groups)
    labels = [f"{p} B={B}" for p, B in keys]
    out = {}

    fig, ax = plt.subplots(figsize=(6, 3.5))
    vals = [report.groups[k].mean_norm_cost for k in keys]
    ax.bar(range(len(keys)), [0 if math.isnan(v) else v for v in vals], color="#4a7bb7")
    ax.set_xticks(range(len(keys)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean normalized cost")
    ax.axhline(1.0, color="k", lw=0.5)
    fig.tight_layout()
    out["cost.svg"] = _figure_svg(fig)
    plt.close(fig)

    for name, attr, xl in (("solved_vs_time.svg", "time_curve", "normalized time"),
                           ("solved_vs_iteration.svg", "iter_curve", "normalized iteration")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for k, lab in zip(keys, labels):
            ax.step(report.grid, getattr(report.groups[k], attr), where="post", label=lab)
        ax.set_xlabel(xl)
        ax.set_ylabel("solutions found")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        out[name] = _figure_svg(fig)
        plt.close(fig)
    return out


_COLOURS = {"dirt_rand": "#d62728", "dirt_lc": "#1f77b4", "dirt_MA": "#2ca02c"}


def path_overlay_svg(grid: GridMap, spec: SystemSpec, start, goal, paths: dict, goal_radius=3.0) -> str:
    """Map raster with one best path per planner label."""
    parts = map_raster_svg(grid)
    parts.append(f'<circle cx="{goal[0]:.2f}" cy="{goal[1]:.2f}" r="{goal_radius}" fill="none" stroke="green" '
                 f'stroke-width="0.3"/>')
    parts.append(f'<circle cx="{start[0]:.2f}" cy="{start[1]:.2f}" r="1" fill="blue"/>')
    for label, steps in sorted(paths.items()):
        pts = trajectory_points(spec, start, steps)
        parts.append(_polyline(pts, stroke=_COLOURS.get(label, "#000"), stroke_width="0.5"))
    parts.append("</svg>")
    return "\n".join(parts)


def _best_paths(records, problem, paths_dir: Path):
    from .dynamics import PropagationStep

    best = {}
    for r in records:
        if r.problem == problem and r.solved and r.final_cost < best.get(r.planner, (math.inf,))[0]:
            best[r.planner] = (r.final_cost, r)
    out = {}
    for label, (_, r) in best.items():
        f = paths_dir / f"{r.planner}_B{r.blossom}_p{r.problem}_s{r.seed}.csv"
        if f.exists():
            rows = [x.split(",") for x in f.read_text().splitlines()[1:] if x]
            out[label] = [PropagationStep((float(a), float(b)), float(c)) for a, b, c in rows]
    return out


def render(report: NormalizedReport, records, out_dir, setup: BenchSetup | None = None) -> list[Path]:
    """Write report.csv, runs.csv and plots/*.svg; returns the files written."""
    out_dir = Path(out_dir)
    plots = out_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    (out_dir / "report.csv").write_text(report.to_csv())
    written.append(out_dir / "report.csv")
    runs = ["planner,blossom,problem,seed,solved,first_time_s,first_iter,final_cost_s,norm_cost"]
    for r in records:
        nc = r.final_cost / report.best_cost[r.problem] if r.solved and r.problem in report.best_cost else math.nan
        runs.append(f"{r.planner},{r.blossom},{r.problem},{r.seed},{int(r.solved)},"
                    f"{r.first_time!r},{r.first_iter},{r.final_cost!r},{nc!r}")
    (out_dir / "runs.csv").write_text("\n".join(runs) + "\n")
    written.append(out_dir / "runs.csv")
    for name, svg in _charts(report).items():
        (plots / name).write_text(svg)
        written.append(plots / name)
    if setup is not None and (out_dir / "paths").is_dir():
        for p in range(len(setup.problems)):
            svg = path_overlay_svg(setup.grid, setup.spec, setup.problems.starts[p], setup.problems.goals[p],
                                   _best_paths(records, p, out_dir / "paths"), setup.config.goal_radius)
            (plots / f"paths_p{p}.svg").write_text(svg)
            written.append(plots / f"paths_p{p}.svg")
    return written
