import math

import numpy as np
import pytest
from skimage.morphology import thin

from kinoforge.maps_io import GridMap, parse_map, synthetic_city
from kinoforge.medial_axis import (TAU, MedialAxisField, attach_goal, attractive_target, attractive_vector,
                                   compute_medial_axis, integrated_vector, ma_graph, ma_waypoint, segment_cells)


def walled(h, w):
    occ = np.zeros((h, w), bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return occ


def obstacle_sites(occ):
    """Obstacle cells including the one-cell rim outside the map."""
    pad = np.pad(occ, 1, constant_values=True)
    ys, xs = np.nonzero(pad)
    return np.column_stack([xs - 1, ys - 1]), pad


def crosses_interior(a, b, cx, cy):
    """Liang-Barsky: does the segment between centres a, b enter the open square of cell (cx, cy)?"""
    p0 = np.array(a, float) + 0.5
    d = np.array(b, float) + 0.5 - p0
    lo, hi = 0.0, 1.0
    for k, (mn, mx) in enumerate(((cx, cx + 1), (cy, cy + 1))):
        if d[k] == 0:
            if not mn < p0[k] < mx:
                return False
            continue
        t0, t1 = sorted(((mn - p0[k]) / d[k], (mx - p0[k]) / d[k]))
        lo, hi = max(lo, t0), min(hi, t1)
    return hi - lo > 1e-12


def distinct(pad, a, b):
    x0, x1 = sorted((a[0], b[0]))
    y0, y1 = sorted((a[1], b[1]))
    for cy in range(y0, y1 + 1):
        for cx in range(x0, x1 + 1):
            if not pad[cy + 1, cx + 1] and crosses_interior(a, b, cx, cy):
                return True
    return False


def nearest_sets(occ):
    sites, pad = obstacle_sites(occ)
    out = {}
    for y, x in zip(*np.nonzero(~occ)):
        d = np.hypot(sites[:, 0] - x, sites[:, 1] - y)
        out[(x, y)] = (d.min(), sites[d <= d.min() + 1e-9])
    return sites, pad, out


def has_rival(x, y, sites, pad, near, tau=TAU):
    """Tie within tau at the cell, or within tau/2 at the midpoint to a 4-neighbour.

    The midpoint case also needs a second obstacle within d + tau of the cell.
    """
    d, mine = near[(x, y)]
    dist = np.hypot(sites[:, 0] - x, sites[:, 1] - y)
    pairs = [(tuple(a), tuple(b)) for a in mine for b in sites[dist <= d + tau]]
    for nx, ny in ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)):
        if (nx, ny) not in near or (dist <= d + tau).sum() < 2:
            continue
        mx, my = (x + nx) / 2, (y + ny) / 2
        for a in mine:
            for b in near[(nx, ny)][1]:
                if abs(math.hypot(a[0] - mx, a[1] - my) - math.hypot(b[0] - mx, b[1] - my)) <= tau / 2:
                    pairs.append((tuple(a), tuple(b)))
    return any(a != b and distinct(pad, a, b) for a, b in pairs)


def brute_ridge(occ, tau=TAU):
    sites, pad, near = nearest_sets(occ)
    out = np.zeros(occ.shape, bool)
    for x, y in near:
        out[y, x] = has_rival(x, y, sites, pad, near, tau)
    return out


def brute_dist(occ):
    sites, _ = obstacle_sites(occ)
    H, W = occ.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            out[y, x] = 0.0 if occ[y, x] else np.hypot(sites[:, 0] - x, sites[:, 1] - y).min()
    return out


TEST_MAPS = {
    "room": GridMap(walled(11, 11)),
    "city": synthetic_city(48, seed=5),
    "pillars": parse_map("type octile\nheight 9\nwidth 14\nmap\n" + "\n".join([
        "@@@@@@@@@@@@@@", "@............@", "@..@@....@@..@", "@..@@....@@..@", "@............@",
        "@.....@@.....@", "@.....@@.....@", "@............@", "@@@@@@@@@@@@@@"]) + "\n"),
}


@pytest.mark.parametrize("name", TEST_MAPS)
def test_distance_transform_exact(name):
    m = TEST_MAPS[name]
    f = compute_medial_axis(m)
    assert np.array_equal(f.dist, brute_dist(m.occupancy))


@pytest.mark.parametrize("name", TEST_MAPS)
def test_axis_definition_audit(name):
    m = TEST_MAPS[name]
    f = compute_medial_axis(m)
    sites, pad, near = nearest_sets(m.occupancy)
    assert not (f.ma_mask & m.occupancy).any()
    for x, y in f.ma_cells():
        assert has_rival(x, y, sites, pad, near)
    u = np.linalg.norm(f.u_rep, axis=-1)
    assert np.all((np.abs(u) < 1e-12) | (np.abs(u - 1) < 1e-12))


def test_room_matches_brute_force_ridge():
    occ = walled(11, 11)
    f = compute_medial_axis(GridMap(occ))
    assert np.array_equal(f.ma_mask, thin(brute_ridge(occ), max_num_iter=1))
    for i in range(1, 10):
        assert f.ma_mask[i, i] and f.ma_mask[i, 10 - i]


def test_corridor_centerline():
    occ = np.zeros((7, 40), bool)
    occ[0] = occ[-1] = True
    f = compute_medial_axis(GridMap(occ))
    mid = f.ma_mask[:, 6:-6]
    assert mid[3].all() and mid.sum() == mid.shape[1]


def test_even_corridor_gets_one_line():
    occ = np.zeros((8, 40), bool)
    occ[0] = occ[-1] = True
    f = compute_medial_axis(GridMap(occ))
    mid = f.ma_mask[:, 6:-6]
    assert mid.sum() == mid.shape[1] and (mid[3] | mid[4]).all()


def test_map_edge_cases():
    with pytest.raises(ValueError):
        compute_medial_axis(GridMap(np.ones((5, 5), bool)))
    # the rim outside the map acts as walls
    f = compute_medial_axis(GridMap(np.zeros((9, 9), bool)))
    assert f.ma_mask[4, 4]


def test_attach_on_axis_has_zero_link():
    f = compute_medial_axis(GridMap(walled(11, 11)))
    g = attach_goal(f, (5.5, 5.5))
    assert g.attach == (5, 5) and len(g.attach_path) == 1
    assert g.cost_to_go[5, 5] == 0.0
    with pytest.raises(ValueError):
        attach_goal(f, (0.5, 0.5))


def ring_map():
    occ = np.ones((21, 21), bool)
    occ[2:5, 2:19] = False     # short corridor along the top
    occ[2:19, 2:5] = False     # left leg
    occ[16:19, 2:19] = False   # bottom
    occ[2:19, 16:19] = False   # right leg
    return GridMap(occ)


def test_two_corridors_prefer_shorter():
    f = attach_goal(compute_medial_axis(ring_map()), (17.5, 3.5))
    c = f.cost_to_go
    # junction at the top-left corner: the top corridor leads straight to the goal
    assert c[3, 6] < c[6, 3]
    assert math.isfinite(c[3, 3]) and abs(c[3, 3] - 14.0) <= 2.0
    # the far side is reached the other way round, never more than the long loop
    assert c[17, 17] <= 14.0 + 1e-9
    top = [c[3, x] for x in range(5, 16)]
    assert all(a > b for a, b in zip(top, top[1:]))


def greedy_descent_ok(f):
    cells, index, g = ma_graph(f)
    c = f.cost_to_go[cells[:, 1], cells[:, 0]]
    target = index[f.attach[1], f.attach[0]]
    for s in np.nonzero(np.isfinite(c))[0]:
        i, steps = s, 0
        while i != target:
            row = g.getrow(i)
            nb = row.indices[np.argmin(c[row.indices] + row.data)]
            assert c[nb] < c[i]
            i = nb
            steps += 1
            assert steps <= len(cells)
    return True


def test_cost_to_go_properties():
    m = synthetic_city(64, seed=2)
    f = compute_medial_axis(m)
    free = np.argwhere(f.dist >= 3)
    goal = free[len(free) // 2][::-1] + 0.5
    f = attach_goal(f, goal)
    assert f.cost_to_go[f.attach[1], f.attach[0]] == pytest.approx(math.hypot(*(np.array(f.attach) - np.floor(goal))))
    assert np.all(np.isinf(f.cost_to_go[~f.ma_mask]))
    assert greedy_descent_ok(f)
    # finite exactly on the graph component holding the attachment cell
    from scipy.sparse.csgraph import connected_components
    cells, index, g = ma_graph(f)
    _, lab = connected_components(g, directed=False)
    same = lab == lab[index[f.attach[1], f.attach[0]]]
    assert np.array_equal(np.isfinite(f.cost_to_go[cells[:, 1], cells[:, 0]]), same)


def dense_visible(f, p, q, n=4000):
    t = np.linspace(0, 1, n)
    pts = np.asarray(p)[None] + t[:, None] * (np.asarray(q) - np.asarray(p))[None]
    cx, cy = np.floor(pts[:, 0]).astype(int), np.floor(pts[:, 1]).astype(int)
    H, W = f.shape
    if (cx < 0).any() or (cy < 0).any() or (cx >= W).any() or (cy >= H).any():
        return False
    return bool(f.clear[cy, cx].all())


def test_attractive_target_matches_brute_force():
    m = synthetic_city(48, seed=7)
    f = compute_medial_axis(m)
    free = np.argwhere(f.dist >= 2)
    f = attach_goal(f, free[-1][::-1] + 0.5)
    cells = f.ma_cells()
    cost = f.cost_to_go[cells[:, 1], cells[:, 0]]
    keep = np.isfinite(cost)
    targets = np.vstack([cells[keep] + 0.5, [f.goal]])
    tcost = np.concatenate([cost[keep], [0.0]])
    rng = np.random.default_rng(0)
    checked = 0
    for y, x in free[rng.choice(len(free), 150, replace=False)]:
        p = np.array([x, y]) + rng.uniform(0.05, 0.95, 2)
        vis = [k for k in np.argsort(tcost, kind="stable") if dense_visible(f, p, targets[k])]
        t = attractive_target(f, p)
        if not vis:
            continue
        checked += 1
        hit = np.nonzero(np.all(np.abs(targets - t) < 1e-12, axis=1))[0]
        assert len(hit) and tcost[hit[0]] == pytest.approx(tcost[vis[0]])
        # the segment to the target never leaves cleared free space
        assert all(f.clear[cy, cx] for cx, cy in segment_cells(p, t))
    assert checked > 50


def test_attractive_points_at_goal_next_to_it():
    f = attach_goal(compute_medial_axis(ring_map()), (17.5, 3.5))
    v = attractive_vector(f, (15.5, 3.5))
    assert v == pytest.approx([1.0, 0.0])


def test_integrated_vector_endpoints_and_bounds():
    m = synthetic_city(48, seed=7)
    f = compute_medial_axis(m)
    free = np.argwhere(f.dist >= 2)
    f = attach_goal(f, free[-1][::-1] + 0.5)
    rng = np.random.default_rng(1)
    for y, x in free[rng.choice(len(free), 100, replace=False)]:
        p = np.array([x + 0.3, y + 0.6])
        if f.u_rep_at(p).any():
            assert integrated_vector(f, p, 1.0).direction == pytest.approx(f.u_rep_at(p))
        assert integrated_vector(f, p, 0.0).direction == pytest.approx(attractive_vector(f, p))
        iv = integrated_vector(f, p, 0.3, 5.0)
        assert 0 < iv.magnitude <= 5.0 and np.linalg.norm(iv.direction) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        integrated_vector(f, free[0][::-1] + 0.5, 1.5)


def test_cancellation_falls_back_to_attraction():
    f = attach_goal(compute_medial_axis(ring_map()), (17.5, 3.5))
    p = np.array([8.5, 3.5])
    att = attractive_vector(f, p)
    f.u_rep[3, 8] = -att  # force exactly opposing unit fields
    assert integrated_vector(f, p, 0.5).direction == pytest.approx(att)


def test_waypoint_along_corridor():
    occ = np.zeros((9, 60), bool)
    occ[0] = occ[-1] = True
    f = attach_goal(compute_medial_axis(GridMap(occ)), (55.5, 4.5))
    wp = ma_waypoint(f, [20.5, 4.5, 0.0], w=0.3, r_max=5.0)
    assert wp[0] > 0 and abs(wp[1]) < 1e-9 and abs(wp[2]) < 1e-9
    assert math.hypot(wp[0], wp[1]) <= 5.0 + 1e-9


def test_waypoint_moves_away_from_near_wall():
    m = synthetic_city(64, seed=3)
    f = compute_medial_axis(m)
    free = np.argwhere(f.dist >= 3)
    f = attach_goal(f, free[0][::-1] + 0.5)
    near = np.argwhere((f.dist > 0) & (f.dist <= 1.5))
    rng = np.random.default_rng(2)
    for y, x in near[rng.choice(len(near), 100, replace=False)]:
        p = np.array([x + 0.5, y + 0.5])
        u = f.u_rep_at(p)
        theta = math.atan2(-u[1], -u[0])  # facing the wall
        for w in (0.5, 0.8):
            wp = ma_waypoint(f, [p[0], p[1], theta], w=w, r_max=5.0)
            c, s = math.cos(theta), math.sin(theta)
            world = np.array([c * wp[0] - s * wp[1], s * wp[0] + c * wp[1]])
            assert world @ u >= -1e-9
            assert np.linalg.norm(world) <= 5.0 + 1e-9


def test_field_determinism_and_serialization(tmp_path):
    m = synthetic_city(64, seed=9)
    a = attach_goal(compute_medial_axis(m), (30.5, 30.5) if m.passable(30.5, 30.5) else tuple(
        np.argwhere(~m.occupancy)[0][::-1] + 0.5))
    b = attach_goal(compute_medial_axis(m), a.goal)
    assert a.to_bytes() == b.to_bytes()
    a.save(tmp_path / "f.npz")
    back = MedialAxisField.load(tmp_path / "f.npz")
    assert back.to_bytes() == a.to_bytes()
    assert back.goal == a.goal and back.attach == a.attach
