"""Informed kinodynamic tree search with blossom expansion.

Each iteration selects a node (best-first on ``cost + heuristic`` with a
little uniform exploration), proposes ``B`` constant-control steps, keeps the
best collision-free child and files it through witness pruning: a child is
only kept if no active node within the witness radius is at least as cheap,
and it deactivates the costlier ones it lands next to.

Three step proposers share this machinery: uniform random controls, the
learned controller steered at sampled dataset waypoints, and the learned
controller steered along the medial axis.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .controller import predict
from .dynamics import PropagationStep, SystemSpec, propagate_batch
from .maps_io import GridMap
from .medial_axis import MedialAxisField, ma_waypoint, route_targets, via_target

EXPANSIONS = ("random", "learned_sample", "learned_ma")
ALIASES = {"rand": "random", "lc": "learned_sample", "ma": "learned_ma", "MA": "learned_ma"}


@dataclass(frozen=True)
class PlannerConfig:
    expansion: str = "random"
    blossom: int = 8
    time_limit: float = 20.0
    iter_limit: int | None = None
    goal_radius: float = 3.0
    robot_radius: float = 1.0
    witness_radius: float = 1.0
    witness_heading: float = math.pi / 4
    completeness_safeguard: bool = True
    seed: int = 0
    ma_weight: float = 0.3
    explore_p: float = 0.1
    collision_dt: float = 0.1
    add_all_blossom: bool = False
    clock: str = "wall"  # "wall" or "virtual" (1 ms per iteration, reproducible)
    stop_at_first: bool = False
    ma_heuristic: bool = True  # route the heuristic over the field when one is given

    def __post_init__(self):
        object.__setattr__(self, "expansion", ALIASES.get(self.expansion, self.expansion))
        if self.expansion not in EXPANSIONS:
            raise ValueError(f"unknown expansion {self.expansion!r}")
        if self.blossom < 1:
            raise ValueError("blossom must be >= 1")
        if self.time_limit <= 0 or (self.iter_limit is not None and self.iter_limit <= 0):
            raise ValueError("limits must be positive")
        if self.clock not in ("wall", "virtual"):
            raise ValueError("clock must be 'wall' or 'virtual'")


@dataclass
class Solution:
    steps: list
    cost: float
    time: float
    iteration: int
    states: np.ndarray | None = None


# --------------------------------------------------------------------------
# heuristic


class Heuristic:
    """Time-to-go estimate: straight line, or via the medial-axis cost-to-go.

    The medial-axis variant routes through the axis point (or the goal) that
    minimises ``distance + cost_to_go`` among those in line of sight of the
    query's cell, falling back to the nearest finite-cost axis cell when none
    is visible.  The route is chosen once per cell and then evaluated at the
    exact position, and never drops below the straight-line distance.
    """

    def __init__(self, goal, v_max: float, field: MedialAxisField | None = None):
        self.goal = np.asarray(goal[:2], dtype=float)
        self.v_max = float(v_max)
        self.field = field
        self._tree = None
        if field is not None and field.cost_to_go is not None:
            cells = field.ma_cells()
            c = field.cost_to_go[cells[:, 1], cells[:, 0]]
            ok = np.isfinite(c)
            if ok.any():
                self._pts = cells[ok] + 0.5
                self._ctg = c[ok]
                self._tree = cKDTree(self._pts)
                self._tx, self._ty, _, self._cost = route_targets(field)
                self._route = np.full(field.shape, -2, dtype=np.int64)

    def _via(self, p):
        H, W = self._route.shape
        out = np.empty(len(p))
        for k, (x, y) in enumerate(p):
            cx, cy = int(math.floor(x)), int(math.floor(y))
            i = -1
            if 0 <= cx < W and 0 <= cy < H:
                i = self._route[cy, cx]
                if i == -2:
                    i = self._route[cy, cx] = via_target(self.field, cx, cy)
            if i >= 0:
                out[k] = math.hypot(self._tx[i] - x, self._ty[i] - y) + self._cost[i]
            else:
                d, j = self._tree.query((x, y))
                out[k] = d + self._ctg[j]
        return out

    def lower(self, pos) -> float:
        """Admissible bound: straight-line distance at top speed."""
        return math.hypot(pos[0] - self.goal[0], pos[1] - self.goal[1]) / self.v_max

    def __call__(self, pos) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pos, dtype=float))[:, :2]
        straight = np.hypot(*(p - self.goal).T)
        if self._tree is None:
            return straight / self.v_max
        return np.maximum(self._via(p), straight) / self.v_max


def heuristic(state, goal, field: MedialAxisField | None = None, v_max: float = 1.0) -> float:
    return float(Heuristic(goal, v_max, field)(state)[0])


# --------------------------------------------------------------------------
# tree


class Tree:
    """Flat-array search tree with witness pruning and selection pools."""

    def __init__(self, root, h_root: float, cfg: PlannerConfig, capacity: int = 4096):
        d = len(root)
        self.cfg = cfg
        self.states = np.empty((capacity, d))
        self.parent = np.empty(capacity, dtype=np.int64)
        self.controls = np.empty((capacity, 2))
        self.durations = np.empty(capacity)
        self.cost = np.empty(capacity)
        self.h = np.empty(capacity)
        self.lb = np.empty(capacity)  # admissible time-to-go, used for bounding
        self.active = np.zeros(capacity, dtype=bool)
        self.children: list[list[int]] = []
        self.n = 0
        self._heap: list = []
        self._retired = np.zeros(capacity, dtype=bool)
        self._pool: list[int] = []
        self._pool_pos: dict[int, int] = {}
        self._grid: dict[tuple, list[int]] = {}
        self.dominated = 0
        self.rejected = 0
        self._add(root, -1, (0.0, 0.0), 0.0, 0.0, h_root, 0.0, 0.0)

    def __len__(self):
        return self.n

    def _grow(self):
        cap = 2 * len(self.cost)
        for name in ("states", "parent", "controls", "durations", "cost", "h", "lb", "active", "_retired"):
            a = getattr(self, name)
            b = np.zeros((cap,) + a.shape[1:], dtype=a.dtype)
            b[: len(a)] = a
            setattr(self, name, b)

    def _cell(self, s):
        r = self.cfg.witness_radius
        return int(math.floor(s[0] / r)), int(math.floor(s[1] / r))

    def _add(self, state, parent, control, duration, cost, h, tie, lb):
        if self.n == len(self.cost):
            self._grow()
        i = self.n
        self.n += 1
        self.states[i] = state
        self.parent[i] = parent
        self.controls[i] = control
        self.durations[i] = duration
        self.cost[i] = cost
        self.h[i] = h
        self.lb[i] = lb
        self.active[i] = True
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        heapq.heappush(self._heap, (cost + h, tie, i))
        self._pool_pos[i] = len(self._pool)
        self._pool.append(i)
        self._grid.setdefault(self._cell(state), []).append(i)
        return i

    def _deactivate(self, j):
        """Remove a dominated node from selection; its descendants keep their own standing."""
        if not self.active[j]:
            return
        self.active[j] = False
        self.dominated += 1
        pos = self._pool_pos.pop(j)
        last = self._pool.pop()
        if last != j:
            self._pool[pos] = last
            self._pool_pos[last] = pos

    def neighbours(self, state):
        """Active nodes within the witness radius (scaled max-norm with heading)."""
        cx, cy = self._cell(state)
        r, rth = self.cfg.witness_radius, self.cfg.witness_heading
        out = []
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for j in self._grid.get((gx, gy), ()):
                    if not self.active[j]:
                        continue
                    s = self.states[j]
                    dth = abs(math.pi - ((math.pi - (s[2] - state[2])) % (2 * math.pi)))
                    if abs(s[0] - state[0]) <= r and abs(s[1] - state[1]) <= r and dth <= rth:
                        out.append(j)
        return out

    def insert(self, state, parent, control, duration, h, tie, lb=0.0):
        """Witness-pruned insertion.  Returns the new id or -1 if dominated."""
        cost = self.cost[parent] + duration
        near = self.neighbours(state)
        if any(self.cost[j] <= cost for j in near):
            self.rejected += 1
            return -1
        for j in near:
            if j != 0:
                self._deactivate(j)
        return self._add(state, parent, control, duration, cost, h, tie, lb)

    def best_open(self, bound=math.inf):
        """Lowest-f active node not yet retired whose lower bound beats ``bound``;
        stale heap entries are dropped."""
        while self._heap:
            _, _, i = self._heap[0]
            if self.active[i] and not self._retired[i] and self.cost[i] + self.lb[i] < bound:
                return i
            heapq.heappop(self._heap)
        return -1

    def retire(self, i):
        self._retired[i] = True

    def random_active(self, rng) -> int:
        return self._pool[int(rng.integers(len(self._pool)))]

    def path(self, i):
        ids = []
        while i >= 0:
            ids.append(i)
            i = self.parent[i]
        return ids[::-1]


def select_node(tree: Tree, rng, explore_p: float = 0.1, bound: float = math.inf) -> int:
    """Best-first pick on ``cost + heuristic`` (ties broken by a random key drawn
    at insertion), or with probability ``explore_p`` a uniform active node."""
    if rng.random() >= explore_p:
        i = tree.best_open(bound)
        if i >= 0:
            return i
    return tree.random_active(rng)


# --------------------------------------------------------------------------
# expansions


def _random_steps(spec: SystemSpec, n: int, rng):
    lo, hi = spec.control_bounds
    return rng.uniform(lo, hi, (n, 2)), rng.uniform(spec.t_min, spec.t_max, n)


def expand_random(node_state, spec: SystemSpec, B: int, rng):
    c, t = _random_steps(spec, B, rng)
    return [PropagationStep((float(a), float(b)), float(d)) for (a, b), d in zip(c, t)]


def _learned_arrays(node_state, spec, dataset, controller, n, rng):
    if n <= 0:
        return np.zeros((0, 2)), np.zeros(0)
    iv = node_state[3:5] if spec.order == 2 else None
    w = np.array([dataset.sample_waypoint(rng, iv)[:3] for _ in range(n)])
    return predict(controller, node_state, w, rng, dataset.histogram)


def _safeguard(spec, c, t, rng, enabled):
    if enabled and len(t) > 1:
        rc, rt = _random_steps(spec, 1, rng)
        c[-1], t[-1] = rc[0], rt[0]
    return c, t


def _as_steps(c, t):
    return [PropagationStep((float(a), float(b)), float(d)) for (a, b), d in zip(c, t)]


def expand_learned_sample(node_state, spec, dataset, controller, B: int, rng, safeguard: bool = True):
    c, t = _learned_arrays(np.asarray(node_state), spec, dataset, controller, B, rng)
    return _as_steps(*_safeguard(spec, np.array(c), np.array(t), rng, safeguard))


def expand_learned_ma(node_state, spec, field, dataset, controller, B: int, rng, w: float = 0.3,
                      safeguard: bool = True):
    s = np.asarray(node_state, dtype=float)
    wp = ma_waypoint(field, s, w, spec.reach_radius, rng)
    c0, t0 = predict(controller, s, wp[None], rng, dataset.histogram)
    c1, t1 = _learned_arrays(s, spec, dataset, controller, B - 1, rng)
    c = np.vstack([c0, c1])
    t = np.concatenate([t0, t1])
    return _as_steps(*_safeguard(spec, c, t, rng, safeguard))


# --------------------------------------------------------------------------
# planning loop


@dataclass
class PlanResult:
    solutions: list = field(default_factory=list)
    tree: Tree | None = None
    iterations: int = 0
    elapsed: float = 0.0
    stats: dict = field(default_factory=dict)

    @property
    def best(self) -> Solution | None:
        return self.solutions[-1] if self.solutions else None


def _edge_free(m: GridMap, radius, snaps, mask):
    k, n, _ = snaps.shape
    pts = snaps[..., :2].reshape(-1, 2)
    ok = m.disc_free(pts, radius).reshape(k, n) | ~mask
    return ok.all(axis=0)


def plan(start, goal, m: GridMap, spec: SystemSpec, cfg: PlannerConfig, dataset=None, controller=None,
         field: MedialAxisField | None = None, on_solution: Callable | None = None) -> PlanResult:
    """Anytime search; every strictly cheaper solution is appended (and reported)."""
    start = np.asarray(start, dtype=float)
    if len(start) == 3 and spec.order == 2:
        start = np.concatenate([start, [0.0, 0.0]])
    if len(start) != spec.state_dim:
        raise ValueError(f"start must have {spec.state_dim} components")
    goal = np.asarray(goal[:2], dtype=float)
    if not m.disc_free(start[:2], cfg.robot_radius)[0]:
        raise ValueError("start is in collision")
    if not m.passable(*goal):
        raise ValueError("goal is not passable")
    if np.hypot(*(start[:2] - goal)) < cfg.goal_radius:
        raise ValueError("start already inside the goal region")
    if cfg.expansion != "random" and (dataset is None or controller is None):
        raise ValueError(f"{cfg.expansion} expansion needs a dataset and a controller")
    if cfg.expansion == "learned_ma" and (field is None or field.cost_to_go is None):
        raise ValueError("learned_ma expansion needs a medial-axis field with an attached goal")

    rng = np.random.default_rng(cfg.seed)
    heur = Heuristic(goal, spec.v_max, field if cfg.ma_heuristic else None)
    tree = Tree(start, float(heur(start)[0]), cfg)
    result = PlanResult(tree=tree)
    best_cost = math.inf
    t0 = time.perf_counter()
    it = 0

    def now():
        return it * 1e-3 if cfg.clock == "virtual" else time.perf_counter() - t0

    B = cfg.blossom
    while True:
        if cfg.iter_limit is not None and it >= cfg.iter_limit:
            break
        if now() >= cfg.time_limit:
            break
        it += 1
        i = select_node(tree, rng, cfg.explore_p, best_cost)
        tree.retire(i)
        s = tree.states[i]
        if cfg.expansion == "random":
            c, t = _random_steps(spec, B, rng)
        else:
            steps = (expand_learned_sample(s, spec, dataset, controller, B, rng, cfg.completeness_safeguard)
                     if cfg.expansion == "learned_sample" else
                     expand_learned_ma(s, spec, field, dataset, controller, B, rng, cfg.ma_weight,
                                       cfg.completeness_safeguard))
            c = np.array([st.control for st in steps])
            t = np.array([st.duration for st in steps])
        ends, snaps, mask = propagate_batch(spec, s, c, t, sample_dt=cfg.collision_dt)
        free = _edge_free(m, cfg.robot_radius, snaps, mask)
        if not free.any():
            continue
        idx = np.flatnonzero(free)
        h = heur(ends[idx])
        rank = t[idx] + h
        order = idx[np.argsort(rank, kind="stable")]
        hs = dict(zip(idx.tolist(), h.tolist()))
        added = 0
        for k in order:
            if added and not cfg.add_all_blossom:
                break
            cost = tree.cost[i] + t[k]
            lb = heur.lower(ends[k])
            if cost + lb >= best_cost:
                continue
            j = tree.insert(ends[k], i, c[k], t[k], hs[k], float(rng.random()), lb)
            if j < 0:
                continue
            added += 1
            if np.hypot(*(ends[k, :2] - goal)) <= cfg.goal_radius and cost < best_cost:
                best_cost = cost
                ids = tree.path(j)
                sol = Solution([PropagationStep(tuple(tree.controls[q]), float(tree.durations[q])) for q in ids[1:]],
                               float(cost), now(), it, tree.states[ids].copy())
                result.solutions.append(sol)
                if on_solution is not None:
                    on_solution(sol)
        if cfg.stop_at_first and result.solutions:
            break
    result.iterations = it
    result.elapsed = now()
    result.stats = {"nodes": len(tree), "active": len(tree._pool), "dominated": tree.dominated,
                    "rejected": tree.rejected}
    return result


def replay(spec: SystemSpec, start, steps, m: GridMap | None = None, robot_radius: float = 1.0,
           sample_dt: float = 0.1):
    """Re-propagate a step list; returns ``(states, collision_free)``."""
    s = np.asarray(start, dtype=float)
    if len(s) == 3 and spec.order == 2:
        s = np.concatenate([s, [0.0, 0.0]])
    states = [s]
    ok = True
    for st in steps:
        end, snaps, mask = propagate_batch(spec, s, [st.control], [st.duration], sample_dt=sample_dt)
        if m is not None and not _edge_free(m, robot_radius, snaps, mask)[0]:
            ok = False
        s = end[0]
        states.append(s)
    return np.array(states), ok


# --------------------------------------------------------------------------
# output


def solution_csv(result: PlanResult) -> str:
    out = ["wall_time_s,iteration,cost_s"]
    out += [f"{s.time!r},{s.iteration},{s.cost!r}" for s in result.solutions]
    out.append("ctrl_a,ctrl_b,duration")
    if result.best is not None:
        out += [f"{float(st.control[0])!r},{float(st.control[1])!r},{float(st.duration)!r}" for st in result.best.steps]
    return "\n".join(out) + "\n"


def parse_solution_csv(text: str):
    """Inverse of :func:`solution_csv`: ``(events, steps)``."""
    lines = text.splitlines()
    k = lines.index("ctrl_a,ctrl_b,duration")
    events = [(float(a), int(b), float(c)) for a, b, c in (r.split(",") for r in lines[1:k])]
    steps = [PropagationStep((float(a), float(b)), float(c)) for a, b, c in (r.split(",") for r in lines[k + 1:] if r)]
    return events, steps


def trajectory_points(spec: SystemSpec, start, steps, sample_dt: float = 0.1) -> np.ndarray:
    s = np.asarray(start, dtype=float)
    if len(s) == 3 and spec.order == 2:
        s = np.concatenate([s, [0.0, 0.0]])
    pts = [s[:2]]
    for st in steps:
        end, snaps, mask = propagate_batch(spec, s, [st.control], [st.duration], sample_dt=sample_dt)
        pts.extend(snaps[mask[:, 0], 0, :2][1:])
        s = end[0]
    return np.array(pts)


def map_raster_svg(m: GridMap, scale: float = 4.0) -> list:
    H, W = m.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale:g}" height="{H * scale:g}" '
             f'viewBox="0 0 {W} {H}">', f'<rect width="{W}" height="{H}" fill="white"/>']
    ys, xs = np.nonzero(m.occupancy)
    parts.append('<g fill="#333">' + "".join(f'<rect x="{x}" y="{y}" width="1" height="1"/>'
                                            for x, y in zip(xs, ys)) + "</g>")
    return parts


def _polyline(pts, **attrs):
    a = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polyline points="{" ".join(f"{x:.2f},{y:.2f}" for x, y in pts)}" fill="none" {a}/>'


def plan_svg(m: GridMap, spec: SystemSpec, start, goal, result: PlanResult, goal_radius: float = 3.0,
             draw_tree: bool = True) -> str:
    """Map raster, the search tree (thin) and the best path (thick)."""
    parts = map_raster_svg(m)
    tree = result.tree
    if draw_tree and tree is not None and tree.n > 1:
        seg = ['<g stroke="#9ab" stroke-width="0.1">']
        for j in range(1, tree.n):
            p, q = tree.states[tree.parent[j], :2], tree.states[j, :2]
            seg.append(f'<line x1="{p[0]:.2f}" y1="{p[1]:.2f}" x2="{q[0]:.2f}" y2="{q[1]:.2f}"/>')
        seg.append("</g>")
        parts += seg
    parts.append(f'<circle cx="{goal[0]:.2f}" cy="{goal[1]:.2f}" r="{goal_radius}" fill="none" stroke="green" '
                 f'stroke-width="0.3"/>')
    parts.append(f'<circle cx="{start[0]:.2f}" cy="{start[1]:.2f}" r="1" fill="blue"/>')
    if result.best is not None:
        pts = trajectory_points(spec, start, result.best.steps)
        parts.append(_polyline(pts, stroke="#d22", stroke_width="0.6"))
    parts.append("</svg>")
    return "\n".join(parts)
