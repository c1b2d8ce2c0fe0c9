"""Dispersion-bounded, duration-pruned control datasets.

The pipeline is: choose a control resolution per duration so that adjacent
grid controls land less than ``eps_E`` apart, propagate the whole grid from the
canonical anchor, keep only the shortest-duration control in every
epsilon-neighbourhood, then refine with uniformly random (control, duration)
samples under the same rule.  The second-order system repeats this for a grid
of initial wheel velocities.
"""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._prune import insert_batch
from .dynamics import (
    Epsilons,
    PropagationStep,
    SystemSpec,
    angle_diff,
    origin_state,
    propagate_batch,
    transform_to_origin,
)

log = logging.getLogger(__name__)

HEADER_PREFIX = "# kinoforge-dataset v1"


class ResolutionError(RuntimeError):
    """Raised when no control resolution below the cap reaches ``eps_E``."""


@dataclass(frozen=True)
class DataGenConfig:
    durations: tuple = tuple(0.5 * k for k in range(1, 11))
    n_min: int = 4
    samples_per_entry: int = 5
    max_samples: int = 2_000_000
    batch_size: int = 50_000
    anchor_grid: int = 5
    hist_buckets: int = 10
    resolution_cap: int = 512
    literal_resolution: bool = False
    seed: int = 0


@dataclass(frozen=True)
class DatasetEntry:
    key: np.ndarray
    init_vel: tuple | None
    step: PropagationStep

    @property
    def cost(self) -> float:
        return self.step.duration


# --------------------------------------------------------------------------
# control discretization


def _endpoints(spec, x0, controls, dt):
    return propagate_batch(spec, x0, controls, np.full(len(controls), dt))


def ctrl_resolution(spec: SystemSpec, x0, dim: int, eps_E: float, dt: float, n_min: int,
                    cap: int = 512, literal: bool = False) -> int:
    """Smallest grid size ``N >= n_min`` whose adjacent endpoints are < ``eps_E`` apart.

    Control dimension ``dim`` sweeps ``u_min + k (u_max - u_min) / N`` for
    ``k = 0..N`` while the other dimension stays at its minimum.  With
    ``literal=True`` the first endpoint is never updated and the control keeps
    accumulating increments, i.e. the pseudocode is followed word for word.
    """
    if n_min < 1:
        raise ValueError("n_min must be >= 1")
    spec.check_step(dt)
    lo, hi = spec.control_bounds
    x0 = np.asarray(x0, dtype=float)
    if math.isinf(eps_E):
        return n_min
    if literal:
        base = np.array([lo, lo])
        x1 = _endpoints(spec, x0, base[None, :], dt)[0]
        u = lo
        for n in range(n_min, cap + 1):
            u = u + (hi - lo) / n
            c = base.copy()
            c[dim] = min(u, hi)
            x2 = _endpoints(spec, x0, c[None, :], dt)[0]
            if math.hypot(*(x1[:2] - x2[:2])) < eps_E:
                return n
        raise ResolutionError(f"no resolution <= {cap} reaches eps_E={eps_E} at dt={dt}")

    def passes(m):
        c = np.full((m + 1, 2), lo)
        c[:, dim] = lo + (hi - lo) * np.arange(m + 1) / m
        e = _endpoints(spec, x0, c, dt)[:, :2]
        return np.max(np.hypot(*(e[1:] - e[:-1]).T)) < eps_E

    # the largest adjacent gap shrinks (near-)monotonically with N:
    # gallop to a passing N, then bisect back to the smallest one
    if passes(n_min):
        return n_min
    bad, good, step = n_min, None, 1
    while good is None:
        m = min(bad + step, cap)
        if passes(m):
            good = m
        elif m == cap:
            raise ResolutionError(f"no resolution <= {cap} reaches eps_E={eps_E} at dt={dt}")
        else:
            bad, step = m, step * 2
    while good - bad > 1:
        mid = (bad + good) // 2
        if passes(mid):
            good = mid
        else:
            bad = mid
    return good


def discretize_ctrls(spec: SystemSpec, eps: Epsilons, durations, n_min: int = 4, x0=None,
                     cap: int = 512, literal: bool = False):
    """Full control grids for every duration.

    Returns ``(controls, durations)`` arrays of shape ``(n, 2)`` and ``(n,)``;
    row ``i`` is the propagation step ``(controls[i], durations[i])``.
    """
    durations = list(durations)
    if not durations:
        raise ValueError("durations must be nonempty")
    x0 = origin_state(spec) if x0 is None else np.asarray(x0, dtype=float)
    lo, hi = spec.control_bounds
    all_c, all_t = [], []
    for dt in durations:
        res = max(ctrl_resolution(spec, x0, d, eps.eps_E, dt, n_min, cap, literal) for d in (0, 1))
        g = lo + (hi - lo) * np.arange(res + 1) / res
        a, b = np.meshgrid(g, g, indexing="ij")
        all_c.append(np.column_stack([a.ravel(), b.ravel()]))
        all_t.append(np.full(a.size, float(dt)))
    return np.concatenate(all_c), np.concatenate(all_t)


# --------------------------------------------------------------------------
# pruned store


class _Pruner:
    """Growable epsilon-exclusive store for one anchor."""

    def __init__(self, spec: SystemSpec, eps: Epsilons, capacity: int = 1024):
        self.spec = spec
        self.eps = eps
        self.kdim = 3 if spec.order == 1 else 5
        r = spec.reach_radius + 2 * eps.eps_E
        self.cell = eps.eps_E if math.isfinite(eps.eps_E) else 2 * r
        n_cells = max(1, int(math.ceil(2 * r / self.cell)))
        self.grid = np.array([-r, -r, self.cell, n_cells, n_cells], dtype=float)
        self.head = np.full(n_cells * n_cells, -1, dtype=np.int64)
        self.eps_arr = np.array([eps.eps_E, eps.eps_R, eps.eps_V], dtype=float)
        self.count = np.zeros(1, dtype=np.int64)
        self._alloc(capacity)

    def _alloc(self, cap):
        self.keys = np.zeros((cap, self.kdim))
        self.durs = np.zeros(cap)
        self.ctrl = np.zeros((cap, 2))
        self.alive = np.zeros(cap, dtype=np.bool_)
        self.nxt = np.full(cap, -1, dtype=np.int64)
        self.ncmp = np.zeros(cap, dtype=np.int64)

    def _reserve(self, extra):
        need = int(self.count[0]) + extra
        cap = len(self.durs)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        old = (self.keys, self.durs, self.ctrl, self.alive, self.nxt, self.ncmp)
        self._alloc(new)
        n = int(self.count[0])
        for dst, src in zip((self.keys, self.durs, self.ctrl, self.alive, self.nxt, self.ncmp), old):
            dst[:n] = src[:n]

    def insert(self, keys, durs, ctrl, count_comparisons=False):
        keys = np.ascontiguousarray(keys[:, : self.kdim], dtype=float)
        self._reserve(len(keys))
        return insert_batch(
            keys, np.ascontiguousarray(durs, dtype=float), np.ascontiguousarray(ctrl, dtype=float),
            self.keys, self.durs, self.ctrl, self.alive, self.nxt, self.head, self.ncmp,
            self.count, self.grid, self.eps_arr, self.spec.order == 2, count_comparisons,
        )

    def live(self):
        n = int(self.count[0])
        idx = np.flatnonzero(self.alive[:n])
        return idx

    @classmethod
    def from_arrays(cls, spec, eps, keys, durs, ctrl):
        p = cls(spec, eps, capacity=max(1024, len(durs)))
        p.insert(keys, durs, ctrl)
        return p


# --------------------------------------------------------------------------
# velocity histogram


@dataclass
class VelocityHistogram:
    """2D histogram over goal wheel velocities used for biased sampling."""

    counts: np.ndarray
    v_min: float
    v_max: float

    @classmethod
    def from_velocities(cls, vel, v_min, v_max, buckets=10):
        vel = np.asarray(vel, dtype=float).reshape(-1, 2)
        edges = np.linspace(v_min, v_max, buckets + 1)
        counts, _, _ = np.histogram2d(vel[:, 0], vel[:, 1], bins=[edges, edges])
        return cls(counts.astype(np.int64), float(v_min), float(v_max))

    @property
    def edges(self):
        return np.linspace(self.v_min, self.v_max, self.counts.shape[0] + 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def sample(self, rng, size=None):
        """Pick a bucket with probability count / total, then a uniform point in it.

        A uniform draw on ``[0, total)`` walks the buckets in row-major order,
        subtracting counts until it drops below zero.
        """
        if self.total <= 0:
            raise ValueError("cannot sample from an empty histogram")
        n = 1 if size is None else int(size)
        flat = self.counts.ravel()
        cum = np.cumsum(flat)
        r = rng.uniform(0.0, self.total, n)
        b = np.searchsorted(cum, r, side="right")
        i, j = np.divmod(b, self.counts.shape[1])
        e = self.edges
        w = e[1] - e[0]
        out = np.column_stack([e[i] + w * rng.random(n), e[j] + w * rng.random(n)])
        return out[0] if size is None else out

    def to_csv(self) -> str:
        e = self.edges
        buf = io.StringIO()
        buf.write("vl_lo,vl_hi,vr_lo,vr_hi,count\n")
        for i in range(self.counts.shape[0]):
            for j in range(self.counts.shape[1]):
                buf.write(f"{float(e[i])!r},{float(e[i + 1])!r},{float(e[j])!r},{float(e[j + 1])!r},{int(self.counts[i, j])}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "VelocityHistogram":
        rows = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        b = int(round(math.sqrt(len(rows))))
        counts = rows[:, 4].astype(np.int64).reshape(b, b)
        return cls(counts, float(rows[:, 0].min()), float(rows[:, 1].max()))


def sample_goal_velocity(hist: VelocityHistogram, rng):
    return tuple(hist.sample(rng))


# --------------------------------------------------------------------------
# dataset


@dataclass
class ControlDataset:
    """Pruned (state delta -> control, duration) records.

    ``keys`` rows follow the state-delta layout of :mod:`kinoforge.dynamics`;
    for the second-order system the trailing two columns are the anchor's
    initial velocities.  ``anchors`` lists the distinct initial velocities and
    ``anchor_ids`` maps every entry to one of them.
    """

    spec: SystemSpec
    eps: Epsilons
    keys: np.ndarray
    controls: np.ndarray
    durations: np.ndarray
    anchors: np.ndarray
    anchor_ids: np.ndarray
    histogram: VelocityHistogram | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self._trees: dict[int, tuple[cKDTree, np.ndarray]] = {}

    def __len__(self):
        return len(self.durations)

    def entry(self, i: int) -> DatasetEntry:
        iv = None if self.spec.order == 1 else tuple(self.anchors[self.anchor_ids[i]])
        return DatasetEntry(self.keys[i].copy(), iv,
                            PropagationStep(tuple(self.controls[i]), float(self.durations[i])))

    def anchor_state(self, i: int) -> np.ndarray:
        if self.spec.order == 1:
            return origin_state(self.spec)
        return origin_state(self.spec, self.anchors[self.anchor_ids[i]])

    def nearest_anchor(self, init_vel) -> int:
        if self.spec.order == 1 or init_vel is None:
            return 0
        d = np.hypot(*(self.anchors - np.asarray(init_vel, dtype=float)).T)
        return int(np.argmin(d))

    def _tree(self, a: int):
        if a not in self._trees:
            idx = np.flatnonzero(self.anchor_ids == a)
            if len(idx) == 0:
                raise ValueError(f"no entries for anchor {a}")
            self._trees[a] = (cKDTree(self.keys[idx, :2]), idx)
        return self._trees[a]

    def nearest_index(self, query, init_vel=None) -> int:
        """Index of the entry closest in (dx, dy); ties by heading, duration, then index."""
        if len(self) == 0:
            raise ValueError("dataset is empty")
        q = np.asarray(query, dtype=float)
        tree, idx = self._tree(self.nearest_anchor(init_vel))
        d, _ = tree.query(q[:2])
        # sorted, so exact ties fall to the lowest index
        cand = np.sort(idx[tree.query_ball_point(q[:2], d * (1 + 1e-12) + 1e-15)])
        if len(cand) > 1:
            dE = np.hypot(*(self.keys[cand, :2] - q[:2]).T)
            dR = angle_diff(self.keys[cand, 2], q[2])
            order = np.lexsort((self.durations[cand], dR, dE))
            return int(cand[order[0]])
        return int(cand[0])

    def nearest_indices(self, queries, init_vel=None) -> np.ndarray:
        """Vectorised nearest lookup in (dx, dy) for one anchor (no tie-breaking pass)."""
        tree, idx = self._tree(self.nearest_anchor(init_vel))
        _, j = tree.query(np.asarray(queries, dtype=float)[:, :2])
        return idx[j]

    def nearest(self, query, init_vel=None) -> DatasetEntry:
        return self.entry(self.nearest_index(query, init_vel))

    def sample_waypoint(self, rng, init_vel=None):
        """Key of a uniformly chosen entry (an achieved, quality-pruned endpoint).

        With ``init_vel`` the draw is restricted to the nearest anchor.
        """
        if len(self) == 0:
            raise ValueError("dataset is empty")
        if init_vel is None or self.spec.order == 1:
            return self.keys[rng.integers(len(self))].copy()
        _, idx = self._tree(self.nearest_anchor(init_vel))
        return self.keys[idx[rng.integers(len(idx))]].copy()

    # -- serialization ---------------------------------------------------

    def header(self) -> str:
        return (f"{HEADER_PREFIX}; order={self.spec.order}; eps_E={self.eps.eps_E!r}; "
                f"eps_R={self.eps.eps_R!r}; eps_V={self.eps.eps_V!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        for k, c, t in zip(self.keys, self.controls, self.durations):
            row = [*k, *c, t]
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        if self.histogram is not None:
            hist_path(path).write_text(self.histogram.to_csv())

    @classmethod
    def from_csv(cls, text: str, spec: SystemSpec | None = None, histogram=None) -> "ControlDataset":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(HEADER_PREFIX):
            raise ValueError("missing kinoforge dataset header")
        meta = dict(p.strip().split("=", 1) for p in lines[0].split(";")[1:])
        order = int(meta["order"])
        eps = Epsilons(float(meta["eps_E"]), float(meta["eps_R"]), float(meta["eps_V"]))
        if spec is None:
            spec = SystemSpec(order=order)
        elif spec.order != order:
            raise ValueError(f"dataset is order {order}, spec is order {spec.order}")
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
        kd = 3 if order == 1 else 7
        rows = rows.reshape(-1, kd + 3)
        keys, controls, durs = rows[:, :kd], rows[:, kd:kd + 2], rows[:, kd + 2]
        if order == 1:
            anchors = np.zeros((1, 2))
            ids = np.zeros(len(rows), dtype=np.int64)
        else:
            anchors, ids = np.unique(keys[:, 5:7], axis=0, return_inverse=True)
            ids = ids.ravel().astype(np.int64)
        return cls(spec, eps, keys, controls, durs, anchors, ids, histogram)

    @classmethod
    def load(cls, path, spec: SystemSpec | None = None) -> "ControlDataset":
        path = Path(path)
        hp = hist_path(path)
        hist = VelocityHistogram.from_csv(hp.read_text()) if hp.exists() else None
        return cls.from_csv(path.read_text(), spec, hist)


def hist_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".hist.csv")


# --------------------------------------------------------------------------
# generation


def _keys_for(spec, x0, ends):
    return transform_to_origin(np.broadcast_to(x0, ends.shape), ends)


def _dataset_from_pruners(spec, eps, pruners, anchors, stats=None):
    keys, ctrl, durs, ids = [], [], [], []
    for a, p in enumerate(pruners):
        live = p.live()
        k = p.keys[live]
        if spec.order == 2:
            iv = np.broadcast_to(anchors[a], (len(live), 2))
            k = np.column_stack([k, iv])
        keys.append(k)
        ctrl.append(p.ctrl[live])
        durs.append(p.durs[live])
        ids.append(np.full(len(live), a, dtype=np.int64))
    kd = spec.delta_dim
    ds = ControlDataset(
        spec, eps,
        np.concatenate(keys) if keys else np.zeros((0, kd)),
        np.concatenate(ctrl) if ctrl else np.zeros((0, 2)),
        np.concatenate(durs) if durs else np.zeros(0),
        np.asarray(anchors, dtype=float), np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64),
        stats=dict(stats or {}),
    )
    ds._pruners = pruners
    return ds


def propagate_and_prune(spec: SystemSpec, candidates, eps: Epsilons, init_vel=None) -> ControlDataset:
    """Propagate every candidate step from the canonical anchor and prune.

    Within any epsilon-neighbourhood only the shortest-duration control
    survives; on equal durations the earlier insertion is kept.
    """
    controls, durs = candidates
    x0 = origin_state(spec, init_vel)
    ends = propagate_batch(spec, x0, controls, durs)
    keys = _keys_for(spec, x0, ends)
    pruner = _Pruner(spec, eps, capacity=max(1024, len(durs) // 4))
    pruner.insert(keys[:, :5], durs, controls)
    anchor = np.zeros((1, 2)) if init_vel is None else np.asarray([init_vel], dtype=float)
    stats = {"candidates": int(len(durs)), "retained": int(len(pruner.live()))}
    return _dataset_from_pruners(spec, eps, [pruner], anchor, stats)


def sample_prop_prune(dataset: ControlDataset, N: int, eps: Epsilons | None = None, rng_seed=0,
                      max_samples: int = 2_000_000, batch_size: int = 50_000) -> ControlDataset:
    """Refine with uniform random (control, duration) samples.

    Sampling continues until every live entry has been compared against at
    least ``N`` random alternatives or ``max_samples`` samples were drawn.
    Each sample goes through the same prune rule as the grid candidates.
    """
    spec = dataset.spec
    eps = dataset.eps if eps is None else eps
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    pruners = getattr(dataset, "_pruners", None)
    if pruners is not None:
        # the input keeps its own state
        pruners = copy.deepcopy(pruners)
    else:
        pruners = []
        for a in range(len(dataset.anchors)):
            sel = dataset.anchor_ids == a
            pruners.append(_Pruner.from_arrays(spec, eps, dataset.keys[sel, :5],
                                               dataset.durations[sel], dataset.controls[sel]))
    stats = dict(dataset.stats)
    lo, hi = spec.control_bounds
    drawn_total = 0
    unmet_total = 0
    for a, p in enumerate(pruners):
        x0 = origin_state(spec, None if spec.order == 1 else dataset.anchors[a])
        drawn = 0
        while N > 0 and drawn < max_samples:
            live = p.live()
            if len(live) and p.ncmp[live].min() >= N:
                break
            m = min(batch_size, max_samples - drawn)
            c = rng.uniform(lo, hi, (m, 2))
            t = rng.uniform(spec.t_min, spec.t_max, m)
            ends = propagate_batch(spec, x0, c, t)
            p.insert(_keys_for(spec, x0, ends)[:, :5], t, c, count_comparisons=True)
            drawn += m
        live = p.live()
        unmet = int(np.sum(p.ncmp[live] < N)) if N > 0 else 0
        drawn_total += drawn
        unmet_total += unmet
        log.info("anchor %d: %d samples drawn, %d entries, %d below %d comparisons",
                 a, drawn, len(live), unmet, N)
    stats.update(samples_drawn=drawn_total, entries_below_N=unmet_total)
    out = _dataset_from_pruners(spec, eps, pruners, dataset.anchors, stats)
    out.histogram = dataset.histogram
    return out


def velocity_anchors(spec: SystemSpec, n: int) -> np.ndarray:
    g = np.linspace(spec.v_min, spec.v_max, n)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def generate_ctrl_data(spec: SystemSpec, eps: Epsilons, config: DataGenConfig = DataGenConfig()) -> ControlDataset:
    """Discretize, propagate-and-prune, then random refinement; per anchor for second order.

    ``config.max_samples`` is the refinement budget over all anchors.
    """
    if not config.durations:
        raise ValueError("durations must be nonempty")
    seeds = np.random.SeedSequence(config.seed)
    anchors = np.zeros((1, 2)) if spec.order == 1 else velocity_anchors(spec, config.anchor_grid)
    budget = max(1, config.max_samples // len(anchors))
    pruners, candidates, retained, drawn, unmet = [], 0, 0, 0, 0
    for a, child in zip(anchors, seeds.spawn(len(anchors))):
        iv = None if spec.order == 1 else tuple(a)
        x0 = origin_state(spec, iv)
        cands = discretize_ctrls(spec, eps, config.durations, config.n_min, x0,
                                 config.resolution_cap, config.literal_resolution)
        ds = propagate_and_prune(spec, cands, eps, iv)
        candidates += ds.stats["candidates"]
        retained += ds.stats["retained"]
        ds = sample_prop_prune(ds, config.samples_per_entry, eps, np.random.default_rng(child),
                               budget, config.batch_size)
        drawn += ds.stats["samples_drawn"]
        unmet += ds.stats["entries_below_N"]
        pruners.extend(ds._pruners)
    stats = {"candidates": candidates, "retained": retained, "samples_drawn": drawn,
             "entries_below_N": unmet}
    out = _dataset_from_pruners(spec, eps, pruners, anchors, stats)
    if spec.order == 2:
        out.histogram = VelocityHistogram.from_velocities(out.keys[:, 3:5], spec.v_min, spec.v_max,
                                                          config.hist_buckets)
    return out
