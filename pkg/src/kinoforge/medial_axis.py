"""Workspace medial axis and the vector fields built on it.

The medial axis of a raster map is the set of free cells with two or more
nearly equidistant nearest obstacle cells.  On top of it we keep

* ``u_rep``: unit vectors pointing away from the nearest obstacle,
* a graph over axis cells and the goal, with geometric cost-to-go,
* on-demand attractive vectors toward the best visible axis cell.

Distances are between cell centres, in cells.  Everything outside the map is
obstacle.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from skimage.morphology import thin

from .maps_io import GridMap

TAU = 0.5
BRIDGE_RADIUS = 24.0


# --------------------------------------------------------------------------
# raster kernels


@njit(cache=True)
def _segment_has_free(blocked, y0, x0, y1, x1):
    """True if the centre-to-centre segment crosses the interior of a free cell."""
    px, py = x0 + 0.5, y0 + 0.5
    dx, dy = float(x1 - x0), float(y1 - y0)
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    tdx = abs(1.0 / dx) if dx != 0 else 1e300
    tdy = abs(1.0 / dy) if dy != 0 else 1e300
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    x, y = x0, y0
    while True:
        if not blocked[y, x]:
            return True
        if x == x1 and y == y1:
            return False
        if tmx < tmy:
            tmx += tdx
            x += sx
        elif tmy < tmx:
            tmy += tdy
            y += sy
        else:
            # exact corner crossing touches the side cells only at a point
            tmx += tdx
            tmy += tdy
            x += sx
            y += sy


@njit(cache=True)
def _second_site(blocked, fy, fx, y, x, oy, ox, limit, reach):
    """Some obstacle other than ``(oy, ox)`` lies within ``limit`` of the cell.

    Only the nearest obstacle's own neighbours and the window's nearest sites
    are tried, so a False may be a miss but a True is always genuine.
    """
    H, W = blocked.shape
    for dy in range(-1, 2):
        for dx in range(-1, 2):
            j, i = oy + dy, ox + dx
            if (dy or dx) and 0 <= j < H and 0 <= i < W and blocked[j, i]:
                if math.sqrt((j - y) ** 2 + (i - x) ** 2) <= limit:
                    return True
    for j in range(max(y - reach, 0), min(y + reach + 1, H)):
        for i in range(max(x - reach, 0), min(x + reach + 1, W)):
            qy, qx = fy[j, i], fx[j, i]
            if (qy != oy or qx != ox) and math.sqrt((qy - y) ** 2 + (qx - x) ** 2) <= limit:
                return True
    return False


@njit(cache=True)
def _ridge_mask(blocked, dist, fy, fx, tau, reach):
    """Cells whose nearest obstacle has a rival across free space.

    Rivals are drawn from the nearest-obstacle sites of the surrounding
    ``(2 reach + 1)^2`` window and must lie within ``d + tau``.  A rival that
    is a 4-neighbour's own nearest site also counts when both sites are tied
    within ``tau / 2`` at the midpoint of the two cells, which is where the
    bisector of an even-width passage runs, provided the cell itself still
    has a second obstacle within ``d + tau``.  Works on the padded grid.
    """
    H, W = blocked.shape
    out = np.zeros((H, W), dtype=np.bool_)
    for y in range(1, H - 1):
        for x in range(1, W - 1):
            if blocked[y, x]:
                continue
            d = dist[y, x]
            oy, ox = fy[y, x], fx[y, x]
            found = False
            for j in range(max(y - reach, 0), min(y + reach + 1, H)):
                if found:
                    break
                for i in range(max(x - reach, 0), min(x + reach + 1, W)):
                    qy, qx = fy[j, i], fx[j, i]
                    if qy == oy and qx == ox:
                        continue
                    d2 = math.sqrt((qy - y) ** 2 + (qx - x) ** 2)
                    hit = d2 <= d + tau
                    if not hit and abs(j - y) + abs(i - x) == 1:
                        # tie at the midpoint of two 4-neighbours (even-width passages)
                        my, mx = 0.5 * (y + j), 0.5 * (x + i)
                        a = math.sqrt((oy - my) ** 2 + (ox - mx) ** 2)
                        b = math.sqrt((qy - my) ** 2 + (qx - mx) ** 2)
                        hit = abs(a - b) <= 0.5 * tau and _second_site(blocked, fy, fx, y, x, oy, ox, d + tau, reach)
                    if hit and _segment_has_free(blocked, oy, ox, qy, qx):
                        found = True
                        break
            out[y, x] = found
    return out


@njit(cache=True)
def _rep_field(dist, nearest, reach):
    """Unit vector away from the nearest obstacle sites.

    Sites tied exactly for nearest (gathered from the window's nearest sites)
    are summed, so symmetric ridges such as a corridor centreline get 0.
    """
    H, W = dist.shape
    out = np.zeros((H, W, 2))
    for y in range(H):
        for x in range(W):
            d = dist[y, x]
            if d == 0:
                continue
            sx, sy = 0.0, 0.0
            for j in range(max(y - reach, 0), min(y + reach + 1, H)):
                for i in range(max(x - reach, 0), min(x + reach + 1, W)):
                    ox, oy = nearest[j, i, 0], nearest[j, i, 1]
                    dup = False
                    for jj in range(max(y - reach, 0), j + 1):
                        for ii in range(max(x - reach, 0), min(x + reach + 1, W)):
                            if jj == j and ii >= i:
                                break
                            if nearest[jj, ii, 0] == ox and nearest[jj, ii, 1] == oy:
                                dup = True
                                break
                        if dup:
                            break
                    if dup:
                        continue
                    vx, vy = float(x - ox), float(y - oy)
                    n = math.sqrt(vx * vx + vy * vy)
                    if abs(n - d) < 1e-9:
                        sx += vx / n
                        sy += vy / n
            n = math.sqrt(sx * sx + sy * sy)
            if n > 1e-9:
                out[y, x, 0] = sx / n
                out[y, x, 1] = sy / n
    return out


@njit(cache=True)
def _walk(px, py, qx, qy, clear, out):
    """Amanatides-Woo traversal of the cells crossed by p -> q.

    With ``clear`` given, stops at the first cell outside it (or the map) and
    returns -1; otherwise records cells into ``out``.  Returns the cell count.
    """
    cx, cy = int(math.floor(px)), int(math.floor(py))
    ex, ey = int(math.floor(qx)), int(math.floor(qy))
    dx, dy = qx - px, qy - py
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    tdx = abs(1.0 / dx) if dx != 0 else 1e300
    tdy = abs(1.0 / dy) if dy != 0 else 1e300
    if dx > 0:
        tmx = (cx + 1 - px) / dx
    elif dx < 0:
        tmx = (px - cx) / -dx
    else:
        tmx = 1e300
    if dy > 0:
        tmy = (cy + 1 - py) / dy
    elif dy < 0:
        tmy = (py - cy) / -dy
    else:
        tmy = 1e300
    check = clear.shape[0] > 0
    H, W = clear.shape
    n = 0
    limit = abs(ex - cx) + abs(ey - cy) + 1
    while True:
        if check:
            if cx < 0 or cy < 0 or cx >= W or cy >= H or not clear[cy, cx]:
                return -1
        elif n < out.shape[0]:
            out[n, 0] = cx
            out[n, 1] = cy
        n += 1
        if (cx == ex and cy == ey) or n >= limit:
            return n
        if tmx < tmy:
            tmx += tdx
            cx += sx
        else:
            tmy += tdy
            cy += sy


_NO_CLEAR = np.zeros((0, 0), dtype=np.bool_)


@njit(cache=True)
def _visible(clear, px, py, qx, qy):
    return _walk(px, py, qx, qy, clear, np.empty((0, 2), dtype=np.int64)) >= 0


@njit(cache=True)
def _best_visible(clear, px, py, tx, ty, order):
    """First target in ``order`` visible from p, or -1."""
    for k in range(order.shape[0]):
        i = order[k]
        if _visible(clear, px, py, tx[i], ty[i]):
            return i
    return -1


@njit(cache=True)
def _best_via(clear, px, py, tx, ty, cost, order):
    """Visible target minimising ``|p - t| + cost(t)``, or -1.

    Targets are scanned in increasing cost, so the scan stops once the cost
    alone reaches the best total found.
    """
    best, arg = np.inf, -1
    for k in range(order.shape[0]):
        i = order[k]
        if cost[i] >= best:
            break
        tot = math.hypot(tx[i] - px, ty[i] - py) + cost[i]
        if tot < best and _visible(clear, px, py, tx[i], ty[i]):
            best, arg = tot, i
    return arg


def segment_cells(p, q) -> np.ndarray:
    """Cells ``(x, y)`` crossed by the segment from ``p`` to ``q``."""
    n = abs(int(math.floor(q[0])) - int(math.floor(p[0]))) + abs(int(math.floor(q[1])) - int(math.floor(p[1]))) + 1
    buf = np.empty((n, 2), dtype=np.int64)
    n = _walk(float(p[0]), float(p[1]), float(q[0]), float(q[1]), _NO_CLEAR, buf)
    return buf[:n].copy()


# --------------------------------------------------------------------------
# field


@dataclass
class MedialAxisField:
    dist: np.ndarray          # (H, W) distance to nearest obstacle centre, 0 on obstacles
    nearest: np.ndarray       # (H, W, 2) nearest obstacle cell (x, y), may lie outside the map
    ma_mask: np.ndarray       # (H, W) bool
    robot_radius: float = 1.0
    map_digest: str = ""
    tau: float = TAU
    goal: tuple | None = None
    cost_to_go: np.ndarray | None = None   # (H, W), inf off the axis
    attach: tuple | None = None            # axis cell the goal hangs off
    attach_path: np.ndarray | None = None  # cells of the attachment link
    bridges: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.dist.shape

    @property
    def u_rep(self) -> np.ndarray:
        if "u_rep" not in self._cache:
            self._cache["u_rep"] = _rep_field(self.dist, self.nearest.astype(np.int64), 2)
        return self._cache["u_rep"]

    @property
    def clear(self) -> np.ndarray:
        """Passable cells whose clearance is at least the robot radius."""
        if "clear" not in self._cache:
            self._cache["clear"] = self.dist >= max(self.robot_radius, 1e-9)
        return self._cache["clear"]

    def ma_cells(self) -> np.ndarray:
        ys, xs = np.nonzero(self.ma_mask)
        return np.column_stack([xs, ys])

    def cell_of(self, p):
        x, y = int(math.floor(p[0])), int(math.floor(p[1]))
        H, W = self.shape
        return min(max(x, 0), W - 1), min(max(y, 0), H - 1)

    def u_rep_at(self, p) -> np.ndarray:
        x, y = int(math.floor(p[0])), int(math.floor(p[1]))
        H, W = self.shape
        if 0 <= x < W and 0 <= y < H:
            return self.u_rep[y, x]
        return np.zeros(2)

    # -- persistence -----------------------------------------------------

    def header(self) -> dict:
        return {"map": self.map_digest, "goal": None if self.goal is None else [float(g) for g in self.goal],
                "robot_radius": self.robot_radius, "tau": self.tau,
                "attach": None if self.attach is None else [int(a) for a in self.attach]}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        arrays = {"dist": self.dist, "nearest": self.nearest, "ma_mask": self.ma_mask,
                  "header": np.frombuffer(json.dumps(self.header(), sort_keys=True).encode(), dtype=np.uint8)}
        if self.cost_to_go is not None:
            arrays["cost_to_go"] = self.cost_to_go
        if self.attach_path is not None:
            arrays["attach_path"] = self.attach_path
        if self.bridges:
            arrays["bridges"] = np.asarray(self.bridges, dtype=np.int64)
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MedialAxisField":
        with np.load(io.BytesIO(data)) as z:
            h = json.loads(bytes(z["header"]).decode())
            f = cls(z["dist"], z["nearest"], z["ma_mask"], h["robot_radius"], h["map"], h["tau"],
                    None if h["goal"] is None else tuple(h["goal"]),
                    z["cost_to_go"] if "cost_to_go" in z else None,
                    None if h["attach"] is None else tuple(h["attach"]),
                    z["attach_path"] if "attach_path" in z else None,
                    [tuple(b) for b in z["bridges"]] if "bridges" in z else [])
        return f

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MedialAxisField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def distance_field(m: GridMap):
    """Exact EDT to the nearest obstacle centre, with the outside of the map as obstacle.

    Returns ``(dist, nearest)`` where ``nearest[y, x]`` is the ``(x, y)`` of the
    nearest obstacle cell in map coordinates (possibly -1 or W/H for the rim).
    """
    padded = np.pad(m.occupancy, 1, constant_values=True)
    dist, (iy, ix) = ndimage.distance_transform_edt(~padded, return_indices=True)
    nearest = np.stack([ix - 1, iy - 1], -1)[1:-1, 1:-1]
    return dist[1:-1, 1:-1], nearest, padded, iy, ix, dist


def compute_medial_axis(m: GridMap, robot_radius: float = 1.0, tau: float = TAU,
                        reach: int = 2, bridge_radius: float = BRIDGE_RADIUS) -> MedialAxisField:
    """Medial axis of the free space, thinned to unit width, plus the axis graph.

    An obstacle-free map is accepted: the rim outside the map acts as walls.
    """
    if m.occupancy.all():
        raise ValueError("map has no free cells")
    dist, nearest, padded, iy, ix, pdist = distance_field(m)
    ridge = _ridge_mask(padded, pdist, iy.astype(np.int64), ix.astype(np.int64), float(tau), int(reach))
    ma = thin(ridge[1:-1, 1:-1], max_num_iter=1)
    f = MedialAxisField(dist, nearest, ma, robot_radius, m.digest(), tau)
    f.bridges = _bridges(f, bridge_radius)
    f.bridges += _end_links(f, bridge_radius)
    return f


# --------------------------------------------------------------------------
# graph


_NBRS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def _visible_cells(f: MedialAxisField, p, q) -> bool:
    return bool(_visible(f.clear, float(p[0]), float(p[1]), float(q[0]), float(q[1])))


def _bridges(f: MedialAxisField, radius: float):
    """Extra edges joining axis components that see each other within ``radius``.

    A tie tolerance below one cell leaves gaps (an even-width corridor has no
    exactly central row), so components are linked greedily by their closest
    mutually visible pair, shortest first.
    """
    cells = f.ma_cells()
    if len(cells) < 2:
        return []
    ncomp, labels = _components(f.ma_mask, cells)
    if ncomp == 1:
        return []
    pairs = cKDTree(cells).query_pairs(radius, output_type="ndarray")
    pairs = pairs[labels[pairs[:, 0]] != labels[pairs[:, 1]]]
    if len(pairs) == 0:
        return []
    d = np.hypot(*(cells[pairs[:, 0]] - cells[pairs[:, 1]]).T)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], d))
    parent = list(range(ncomp))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    out = []
    tried = set()
    for k in order:
        i, j = pairs[k]
        ra, rb = root(labels[i]), root(labels[j])
        if ra == rb or (labels[i], labels[j]) in tried:
            continue
        if _visible_cells(f, cells[i] + 0.5, cells[j] + 0.5):
            parent[ra] = rb
            out.append((int(cells[i][0]), int(cells[i][1]), int(cells[j][0]), int(cells[j][1])))
        else:
            tried.add((labels[i], labels[j]))
    return out


def _end_links(f: MedialAxisField, radius: float, stretch: float = 1.5):
    """Shortcuts from dangling axis ends to axis cells they see but reach only the long way.

    Where a corridor opens into a room the tie test can leave a short gap
    between the corridor's axis and the room's.  Joining components closes
    it only once per pair, so each loose end also gets linked to the nearest
    visible cell whose graph distance exceeds ``stretch`` times the straight one.
    """
    cells, index, g = ma_graph(f)
    if len(cells) < 3:
        return []
    nbrs = ndimage.convolve(f.ma_mask.astype(np.int64), np.ones((3, 3), np.int64), mode="constant")
    ends = np.nonzero(nbrs[cells[:, 1], cells[:, 0]] <= 2)[0]
    if len(ends) == 0:
        return []
    tree = cKDTree(cells)
    gd = dijkstra(g, indices=ends, limit=stretch * radius + 2.0)
    out = []
    for row, e in enumerate(ends):
        near = np.asarray(tree.query_ball_point(cells[e], radius), dtype=np.int64)
        d = np.hypot(*(cells[near] - cells[e]).T)
        for k in np.lexsort((near, d)):
            c = near[k]
            if d[k] < 2.0 or gd[row, c] <= stretch * d[k] + 2.0:
                continue
            if _visible_cells(f, cells[e] + 0.5, cells[c] + 0.5):
                out.append((int(cells[e][0]), int(cells[e][1]), int(cells[c][0]), int(cells[c][1])))
                break
    return out


def _components(mask, cells):
    lab, n = ndimage.label(mask, structure=np.ones((3, 3)))
    return n, lab[cells[:, 1], cells[:, 0]] - 1


def ma_graph(f: MedialAxisField):
    """Sparse weighted graph over axis cells (8-connected plus bridges).

    Returns ``(cells, index, matrix)``; ``index`` maps a cell to its node id.
    """
    cells = f.ma_cells()
    H, W = f.shape
    index = -np.ones((H, W), dtype=np.int64)
    index[cells[:, 1], cells[:, 0]] = np.arange(len(cells))
    rows, cols, w = [], [], []
    for dx, dy in _NBRS:
        nx, ny = cells[:, 0] + dx, cells[:, 1] + dy
        ok = (nx >= 0) & (nx < W) & (ny >= 0) & (ny < H)
        j = np.full(len(cells), -1)
        j[ok] = index[ny[ok], nx[ok]]
        sel = j >= 0
        rows.append(np.nonzero(sel)[0])
        cols.append(j[sel])
        w.append(np.full(sel.sum(), math.hypot(dx, dy)))
    for x0, y0, x1, y1 in f.bridges:
        a, b = index[y0, x0], index[y1, x1]
        d = math.hypot(x1 - x0, y1 - y0)
        rows += [np.array([a, b])]
        cols += [np.array([b, a])]
        w += [np.array([d, d])]
    n = len(cells)
    g = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return cells, index, g


def _grid_path(f: MedialAxisField, start, targets_mask):
    """Shortest 8-connected path over passable cells from ``start`` to any target."""
    H, W = f.shape
    free = f.dist > 0
    idx = np.arange(H * W).reshape(H, W)
    rows, cols, w = [], [], []
    for dx, dy in _NBRS:
        src = free.copy()
        dst = np.zeros_like(free)
        ys = slice(max(-dy, 0), H - max(dy, 0))
        xs = slice(max(-dx, 0), W - max(dx, 0))
        yd = slice(max(dy, 0), H - max(-dy, 0))
        xd = slice(max(dx, 0), W - max(-dx, 0))
        dst[ys, xs] = free[yd, xd]
        ok = src & dst
        a = idx[ys, xs][ok[ys, xs]]
        b = idx[yd, xd][ok[ys, xs]]
        rows.append(a)
        cols.append(b)
        w.append(np.full(len(a), math.hypot(dx, dy)))
    g = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(H * W, H * W)).tocsr()
    sx, sy = start
    d, pred = dijkstra(g, indices=idx[sy, sx], return_predecessors=True)
    d = d.reshape(H, W)
    cand = np.where(targets_mask & np.isfinite(d), d, np.inf)
    if not np.isfinite(cand).any():
        return None, math.inf
    t = int(np.argmin(cand))
    path = [t]
    while path[-1] != idx[sy, sx]:
        path.append(pred[path[-1]])
    path = np.array(path[::-1])
    return np.column_stack([path % W, path // W]), float(cand.ravel()[t])


def attach_goal(f: MedialAxisField, goal) -> MedialAxisField:
    """Hook the goal onto the axis and fill ``cost_to_go`` (cells) by Dijkstra."""
    gx, gy = int(math.floor(goal[0])), int(math.floor(goal[1]))
    H, W = f.shape
    if not (0 <= gx < W and 0 <= gy < H) or f.dist[gy, gx] == 0:
        raise ValueError(f"goal {tuple(goal)} is not passable")
    cells, index, g = ma_graph(f)
    if len(cells) == 0:
        raise ValueError("medial axis is empty")
    # nearest axis cell reachable by a straight passable segment, else by grid path
    order = np.argsort(np.hypot(cells[:, 0] - gx, cells[:, 1] - gy), kind="stable")
    attach, link, link_len = None, None, 0.0
    passable = f.dist > 0
    for k in order[:64]:
        seg = segment_cells((gx + 0.5, gy + 0.5), cells[k] + 0.5)
        if passable[seg[:, 1], seg[:, 0]].all():
            attach = tuple(int(v) for v in cells[k])
            link = seg
            link_len = float(math.hypot(cells[k][0] - gx, cells[k][1] - gy))
            break
    if attach is None:
        link, link_len = _grid_path(f, (gx, gy), f.ma_mask)
        if link is None:
            raise ValueError("goal cannot reach the medial axis")
        attach = tuple(int(v) for v in link[-1])
    d = dijkstra(g, indices=index[attach[1], attach[0]])
    ctg = np.full((H, W), np.inf)
    ctg[cells[:, 1], cells[:, 0]] = d + link_len
    out = MedialAxisField(f.dist, f.nearest, f.ma_mask, f.robot_radius, f.map_digest, f.tau,
                          (float(goal[0]), float(goal[1])), ctg, attach, link, list(f.bridges))
    return out


# --------------------------------------------------------------------------
# vectors


def _targets(f: MedialAxisField):
    """Axis cells with finite cost plus the goal, sorted by cost (stable)."""
    if "targets" not in f._cache:
        if f.cost_to_go is None:
            raise ValueError("attach a goal first")
        cells = f.ma_cells()
        c = f.cost_to_go[cells[:, 1], cells[:, 0]]
        keep = np.isfinite(c)
        pts = np.vstack([cells[keep] + 0.5, np.asarray(f.goal, dtype=float)[None]])
        cost = np.concatenate([c[keep], [0.0]])
        order = np.argsort(cost, kind="stable")
        f._cache["targets"] = (pts[:, 0].copy(), pts[:, 1].copy(), order.astype(np.int64), cost)
        f._cache["ma_tree"] = cKDTree(cells + 0.5)
    return f._cache["targets"]


def attractive_target(f: MedialAxisField, p) -> np.ndarray:
    """Lowest cost-to-go axis point (or the goal) visible from ``p`` with clearance.

    Falls back to the nearest axis cell when nothing is visible.
    """
    tx, ty, order, _ = _targets(f)
    i = _best_visible(f.clear, float(p[0]), float(p[1]), tx, ty, order)
    if i >= 0:
        return np.array([tx[i], ty[i]])
    _, j = f._cache["ma_tree"].query(p[:2])
    return f._cache["ma_tree"].data[j].copy()


def route_targets(f: MedialAxisField):
    """Like the attraction targets, plus unit-spaced points along every bridge.

    A bridge runs through free space the axis skips, so routing through its
    interior avoids detours where the axis itself is out of sight.
    """
    if "route" not in f._cache:
        tx, ty, _, cost = _targets(f)
        xs, ys, cs = [tx], [ty], [cost]
        ctg = f.cost_to_go
        for x0, y0, x1, y1 in f.bridges:
            c0, c1 = ctg[y0, x0], ctg[y1, x1]
            if not (np.isfinite(c0) and np.isfinite(c1)):
                continue
            L = math.hypot(x1 - x0, y1 - y0)
            t = np.arange(1, int(L)) / L
            xs.append(x0 + 0.5 + t * (x1 - x0))
            ys.append(y0 + 0.5 + t * (y1 - y0))
            cs.append(np.minimum(c0 + t * L, c1 + (1 - t) * L))
        cost = np.concatenate(cs)
        f._cache["route"] = (np.concatenate(xs), np.concatenate(ys),
                             np.argsort(cost, kind="stable").astype(np.int64), cost)
    return f._cache["route"]


def via_target(f: MedialAxisField, cx: int, cy: int) -> int:
    """Index into :func:`route_targets` of the best visible ``distance + cost-to-go``
    route from the centre of cell ``(cx, cy)``; -1 when nothing is visible."""
    tx, ty, order, cost = route_targets(f)
    return int(_best_via(f.clear, cx + 0.5, cy + 0.5, tx, ty, cost, order))


def _unit(v):
    n = math.hypot(v[0], v[1])
    return np.asarray(v, dtype=float) / n if n > 1e-12 else np.zeros(2)


def attractive_vector(f: MedialAxisField, p) -> np.ndarray:
    p = np.asarray(p[:2], dtype=float)
    key = ("att", int(math.floor(p[0] * 64)), int(math.floor(p[1] * 64)))
    v = f._cache.get(key)
    if v is None:
        v = _unit(attractive_target(f, p) - p)
        f._cache[key] = v
    return v


@dataclass(frozen=True)
class IntegratedVector:
    direction: np.ndarray
    magnitude: float

    @property
    def vector(self) -> np.ndarray:
        return self.direction * self.magnitude


def integrated_vector(f: MedialAxisField, p, w: float = 0.3, r_max: float = 5.0) -> IntegratedVector:
    """Normalised blend ``w u_rep + (1 - w) u_att``, stretched to ``r_max`` or the axis."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must be in [0, 1]")
    p = np.asarray(p[:2], dtype=float)
    att = attractive_vector(f, p)
    d = _unit(w * f.u_rep_at(p) + (1.0 - w) * att)
    if not d.any():
        d = att if att.any() else np.array([1.0, 0.0])
    return IntegratedVector(d, _ray_to_axis(f, p, d, r_max))


def _ray_to_axis(f: MedialAxisField, p, d, r_max):
    """Distance along ``d`` to the first axis cell past the start cell, capped at r_max."""
    cells = segment_cells(p, p + d * r_max)
    H, W = f.shape
    start = (int(math.floor(p[0])), int(math.floor(p[1])))
    for cx, cy in cells:
        if (cx, cy) == start or not (0 <= cx < W and 0 <= cy < H):
            continue
        if f.ma_mask[cy, cx]:
            t = float(np.dot(np.array([cx + 0.5, cy + 0.5]) - p, d))
            if 0.0 < t <= r_max:
                return t
    return float(r_max)


def ma_waypoint(f: MedialAxisField, s, w: float = 0.3, r_max: float = 5.0, rng=None, hist=None) -> np.ndarray:
    """Body-frame waypoint two integrated-vector hops ahead of state ``s``.

    Returns ``(dx, dy, dtheta)``, plus sampled goal velocities when ``hist``
    is given.
    """
    s = np.asarray(s, dtype=float)
    p = s[:2]
    s1 = p + integrated_vector(f, p, w, r_max).vector
    s2 = s1 + integrated_vector(f, s1, w, r_max).vector
    c, sn = math.cos(s[2]), math.sin(s[2])
    dx, dy = s1 - p
    heading = math.atan2(s2[1] - s1[1], s2[0] - s1[0])
    dth = math.pi - ((math.pi - (heading - s[2])) % (2 * math.pi))
    out = [c * dx + sn * dy, -sn * dx + c * dy, dth]
    if hist is not None:
        out += list(hist.sample(rng))
    return np.array(out)


# --------------------------------------------------------------------------
# rendering


def field_svg(f: MedialAxisField, m: GridMap | None = None, w: float = 0.3, r_max: float = 5.0,
              stride: int = 6, scale: float = 4.0) -> str:
    """Obstacles, axis cells, cost-to-go shading and sampled integrated vectors."""
    H, W = f.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale:g}" height="{H * scale:g}" '
             f'viewBox="0 0 {W} {H}">', f'<rect width="{W}" height="{H}" fill="white"/>']
    occ = f.dist == 0 if m is None else m.occupancy
    ys, xs = np.nonzero(occ)
    parts.append('<g fill="#333">' + "".join(f'<rect x="{x}" y="{y}" width="1" height="1"/>'
                                            for x, y in zip(xs, ys)) + "</g>")
    cells = f.ma_cells()
    fin = f.cost_to_go[cells[:, 1], cells[:, 0]] if f.cost_to_go is not None else np.zeros(len(cells))
    top = np.max(fin[np.isfinite(fin)]) if np.isfinite(fin).any() else 1.0
    g = ['<g>']
    for (x, y), c in zip(cells, fin):
        shade = "#999" if not np.isfinite(c) else f"rgb({int(255 * c / max(top, 1e-9))},60,{int(255 - 255 * c / max(top, 1e-9))})"
        g.append(f'<rect x="{x}" y="{y}" width="1" height="1" fill="{shade}"/>')
    g.append("</g>")
    parts += g
    if f.goal is not None:
        parts.append(f'<circle cx="{f.goal[0]:.3f}" cy="{f.goal[1]:.3f}" r="1.5" fill="green"/>')
        arrows = ['<g stroke="#06c" stroke-width="0.15">']
        for y in range(stride // 2, H, stride):
            for x in range(stride // 2, W, stride):
                if f.dist[y, x] == 0:
                    continue
                p = np.array([x + 0.5, y + 0.5])
                q = p + integrated_vector(f, p, w, min(r_max, stride * 0.8)).vector
                arrows.append(f'<line x1="{p[0]:.2f}" y1="{p[1]:.2f}" x2="{q[0]:.2f}" y2="{q[1]:.2f}"/>')
        arrows.append("</g>")
        parts += arrows
    parts.append("</svg>")
    return "\n".join(parts)
