"""Grid maps in the MovingAI octile format, plus problem generation.

Coordinates are continuous and measured in cells: ``(x, y)`` lies in cell
``(floor(x), floor(y))``, which is row ``y`` and column ``x`` of the grid, with
the origin at the top-left corner as in the benchmark files.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

PASSABLE = frozenset(".GS")
KNOWN = frozenset(".G@OTSW")


@njit(cache=True)
def _disc_free(occ, pts, radius):
    H, W = occ.shape
    k = int(math.ceil(radius))
    r2 = radius * radius
    out = np.ones(pts.shape[0], dtype=np.bool_)
    for i in range(pts.shape[0]):
        x, y = pts[i, 0], pts[i, 1]
        cx, cy = int(math.floor(x)), int(math.floor(y))
        for nx in range(cx - k, cx + k + 1):
            ex = max(nx - x, x - (nx + 1), 0.0)
            for ny in range(cy - k, cy + k + 1):
                ey = max(ny - y, y - (ny + 1), 0.0)
                if ex * ex + ey * ey < r2 or (nx == cx and ny == cy):
                    if nx < 0 or ny < 0 or nx >= W or ny >= H or occ[ny, nx]:
                        out[i] = False
                        break
            if not out[i]:
                break
    return out


class MapFormatError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(msg if line is None else f"line {line}: {msg}")


@dataclass
class GridMap:
    occupancy: np.ndarray  # (height, width) bool, True = obstacle
    rows: list[str] | None = None
    name: str = ""

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 2:
            raise ValueError("occupancy must be 2-D")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def shape(self):
        return self.occupancy.shape

    def blocked_cell(self, cx, cy):
        """Vectorised cell query; out of bounds counts as obstacle."""
        cx, cy = np.broadcast_arrays(np.asarray(cx), np.asarray(cy))
        inside = (cx >= 0) & (cx < self.width) & (cy >= 0) & (cy < self.height)
        out = np.ones(cx.shape, dtype=bool)
        out[inside] = self.occupancy[cy[inside], cx[inside]]
        return out

    def passable(self, x, y) -> bool:
        return not bool(self.blocked_cell(int(math.floor(x)), int(math.floor(y))))

    def disc_free(self, pts, radius: float) -> np.ndarray:
        """True where a disc of ``radius`` at each point touches no obstacle cell.

        Each obstacle is a unit square; the test uses the exact point-to-square
        distance, and anything outside the map counts as obstacle.
        """
        p = np.ascontiguousarray(np.atleast_2d(np.asarray(pts, dtype=float))[:, :2])
        return _disc_free(self.occupancy, p, float(radius))

    def free_cells(self) -> np.ndarray:
        ys, xs = np.nonzero(~self.occupancy)
        return np.column_stack([xs, ys])

    def digest(self) -> str:
        h = hashlib.sha1()
        h.update(f"{self.height}x{self.width}".encode())
        h.update(np.packbits(self.occupancy).tobytes())
        return h.hexdigest()[:16]


def parse_map(text: str, name: str = "") -> GridMap:
    lines = text.splitlines()
    if len(lines) < 4:
        raise MapFormatError("truncated header", len(lines) + 1)
    if lines[0].strip() != "type octile":
        raise MapFormatError(f"unknown type line {lines[0]!r}", 1)
    try:
        kh, h = lines[1].split()
        kw, w = lines[2].split()
        h, w = int(h), int(w)
    except ValueError:
        raise MapFormatError("malformed height/width", 2) from None
    if kh != "height" or kw != "width":
        raise MapFormatError("expected height then width", 2)
    if lines[3].strip() != "map":
        raise MapFormatError("expected 'map'", 4)
    body = lines[4:]
    while body and body[-1] == "":
        body.pop()
    if len(body) != h:
        raise MapFormatError(f"header says {h} rows, found {len(body)}", 5 + min(len(body), h))
    occ = np.ones((h, w), dtype=bool)
    for i, row in enumerate(body):
        if len(row) != w:
            raise MapFormatError(f"row has {len(row)} characters, header says {w}", 5 + i)
        bad = set(row) - KNOWN
        if bad:
            raise MapFormatError(f"unknown terrain {sorted(bad)}", 5 + i)
        occ[i] = [c not in PASSABLE for c in row]
    return GridMap(occ, body, name)


def serialize_map(m: GridMap) -> str:
    rows = m.rows if m.rows is not None else ["".join("@" if b else "." for b in r) for r in m.occupancy]
    return f"type octile\nheight {m.height}\nwidth {m.width}\nmap\n" + "\n".join(rows) + "\n"


def load_map(path) -> GridMap:
    path = Path(path)
    return parse_map(path.read_text(), path.stem)


def save_map(m: GridMap, path) -> None:
    Path(path).write_text(serialize_map(m))


def downscale(m: GridMap, factor: int) -> GridMap:
    """Block-max pooling; a ragged edge block counts the missing area as obstacle."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return GridMap(m.occupancy.copy(), None if m.rows is None else list(m.rows), m.name)
    H = -(-m.height // factor)
    W = -(-m.width // factor)
    padded = np.ones((H * factor, W * factor), dtype=bool)
    padded[: m.height, : m.width] = m.occupancy
    occ = padded.reshape(H, factor, W, factor).any(axis=(1, 3))
    return GridMap(occ, None, f"{m.name}@{factor}" if m.name else "")


# --------------------------------------------------------------------------
# problems


@dataclass
class ProblemSet:
    map_id: str
    starts: np.ndarray  # (n, 3) x, y, theta
    goals: np.ndarray  # (n, 2)
    separation: float
    seed: int
    robot_radius: float = 1.0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.starts)

    def __iter__(self):
        return iter(zip(self.starts, self.goals))

    def to_csv(self) -> str:
        out = ["start_x,start_y,start_theta,goal_x,goal_y"]
        for s, g in self:
            out.append(",".join(repr(float(v)) for v in (*s[:3], *g[:2])))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str, map_id="", separation=0.0, seed=0, robot_radius=1.0) -> "ProblemSet":
        rows = [r for r in text.splitlines()[1:] if r.strip()]
        a = np.array([[float(v) for v in r.split(",")] for r in rows]).reshape(-1, 5)
        return cls(map_id, a[:, :3], a[:, 3:5], separation, seed, robot_radius)


def generate_problems(m: GridMap, count: int, M: float, robot_radius: float = 1.0, seed: int = 0,
                      max_rejections: int = 100_000) -> ProblemSet:
    """Rejection-sample free start poses and goals at least ``M`` cells apart.

    Both ends are drawn from the largest region a disc of ``robot_radius`` can
    roam (cell centres, 8-connected), so every problem is connected.
    """
    if M > math.hypot(m.width, m.height):
        raise ValueError(f"separation {M} exceeds the map diagonal")
    free = m.free_cells()
    centres = free + 0.5
    ok = m.disc_free(centres, robot_radius) if len(free) else np.zeros(0, bool)
    if not ok.any():
        raise ValueError("map has no cell with the required clearance")
    grid = np.zeros(m.shape, dtype=bool)
    grid[free[ok, 1], free[ok, 0]] = True
    labels, n = ndimage.label(grid, structure=np.ones((3, 3)))
    biggest = 1 + int(np.argmax(np.bincount(labels.ravel())[1:]))
    cells = free[labels[free[:, 1], free[:, 0]] == biggest]
    rng = np.random.default_rng(seed)

    def draw():
        c = cells[rng.integers(len(cells))]
        return c + rng.uniform(0.0, 1.0, 2)

    starts, goals = [], []
    rejected = 0
    while len(starts) < count:
        s, g = draw(), draw()
        if np.hypot(*(s - g)) >= M and m.disc_free(np.vstack([s, g]), robot_radius).all():
            starts.append([s[0], s[1], rng.uniform(-math.pi, math.pi)])
            goals.append(g)
            continue
        rejected += 1
        if rejected >= max_rejections:
            raise RuntimeError(f"gave up after {rejected} rejections; map too constrained for M={M}")
    return ProblemSet(m.name or m.digest(), np.array(starts).reshape(-1, 3), np.array(goals).reshape(-1, 2),
                      M, seed, robot_radius)


# --------------------------------------------------------------------------
# synthetic city


def synthetic_city(size: int = 256, seed: int = 0, street: tuple = (6, 12), block: tuple = (12, 32),
                   courtyard_p: float = 0.35, park_p: float = 0.08) -> GridMap:
    """City-like test map: irregular street grid, building blocks, courtyards, parks.

    Stands in for the city benchmark maps when those files are not available.
    """
    rng = np.random.default_rng(seed)
    occ = np.zeros((size, size), dtype=bool)

    def cuts():
        edges, pos = [], rng.integers(0, block[0])
        while pos < size:
            w = int(rng.integers(block[0], block[1] + 1))
            s = int(rng.integers(street[0], street[1] + 1))
            edges.append((pos, min(pos + w, size)))
            pos += w + s
        return edges

    rows, cols = cuts(), cuts()
    for y0, y1 in rows:
        for x0, x1 in cols:
            if rng.random() < park_p:
                continue
            occ[y0:y1, x0:x1] = True
            h, w = y1 - y0, x1 - x0
            if h > 12 and w > 12 and rng.random() < courtyard_p:
                occ[y0 + 4:y1 - 4, x0 + 4:x1 - 4] = False
            elif h > 14 and rng.random() < 0.3:
                # pedestrian passage splitting the block
                y = int(rng.integers(y0 + 5, y1 - 5))
                occ[y:y + 2, x0:x1] = False
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    rows_txt = ["".join("@" if b else "." for b in r) for r in occ]
    return GridMap(occ, rows_txt, f"city{size}-{seed}")
