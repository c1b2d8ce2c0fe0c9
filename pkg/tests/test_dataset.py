import math

import numpy as np
import pytest
from scipy.stats import chisquare

from kinoforge.dataset import (ControlDataset, DataGenConfig, VelocityHistogram, ctrl_resolution, discretize_ctrls,
                               generate_ctrl_data, hist_path, propagate_and_prune, sample_goal_velocity,
                               sample_prop_prune)
from kinoforge.dynamics import Epsilons, SystemSpec, angle_diff, origin_state, propagate_batch, transform_to_origin

FO = SystemSpec.first_order()
SO = SystemSpec.second_order()
COARSE = Epsilons(0.3, math.pi / 4)
SMALL = DataGenConfig(durations=(0.5, 1.5, 3.0), max_samples=20_000, batch_size=5_000, seed=3)


def endpoint_gaps(spec, dim, dt, n):
    """Reference: propagate every grid value of one control dimension and return adjacent gaps."""
    lo, hi = spec.control_bounds
    out = []
    prev = None
    for k in range(n + 1):
        u = [lo, lo]
        u[dim] = lo + (hi - lo) * k / n
        e = propagate_batch(spec, np.zeros(3), np.array([u]), np.array([dt]))[0]
        if prev is not None:
            out.append(math.hypot(*(e[:2] - prev[:2])))
        prev = e
    return out


def brute_resolution(spec, dim, eps_E, dt, n_min):
    n = n_min
    while max(endpoint_gaps(spec, dim, dt, n)) >= eps_E:
        n += 1
    return n


def test_resolution_examples():
    small = ctrl_resolution(FO, np.zeros(3), 0, 0.5, 0.5, 1)
    assert small <= 4
    assert ctrl_resolution(FO, np.zeros(3), 0, 0.1, 5.0, 1) > ctrl_resolution(FO, np.zeros(3), 0, 0.1, 0.5, 1)
    assert ctrl_resolution(FO, np.zeros(3), 1, math.inf, 2.0, 6) == 6


@pytest.mark.parametrize("dt,eps_E", [(0.5, 0.1), (2.0, 0.3), (3.5, 0.2), (5.0, 0.5)])
def test_resolution_matches_linear_search(dt, eps_E):
    for dim in (0, 1):
        assert ctrl_resolution(FO, np.zeros(3), dim, eps_E, dt, 2) == brute_resolution(FO, dim, eps_E, dt, 2)


def test_resolution_cap_and_literal_flag():
    with pytest.raises(RuntimeError):
        ctrl_resolution(FO, np.zeros(3), 0, 1e-4, 5.0, 1, cap=16)
    # word-for-word accumulation can overshoot the bound and never close the gap
    assert ctrl_resolution(FO, np.zeros(3), 0, 3.0, 2.0, 4, literal=True) >= 4
    with pytest.raises(RuntimeError):
        ctrl_resolution(FO, np.zeros(3), 0, 0.1, 2.0, 4, literal=True)


def test_discretize_counts():
    c, t = discretize_ctrls(FO, Epsilons(math.inf, 1.0), [1.0], n_min=3)
    assert len(t) == 16 and np.all(t == 1.0)
    c, t = discretize_ctrls(FO, FO.default_epsilons(), DataGenConfig().durations, n_min=4)
    assert len(t) >= 10 * 25
    assert c.min() == -1 and c.max() == 1
    with pytest.raises(ValueError):
        discretize_ctrls(FO, COARSE, [])


def test_prune_keeps_shorter_duration():
    ds = propagate_and_prune(FO, (np.zeros((2, 2)), np.array([2.0, 1.0])), COARSE)
    assert len(ds) == 1 and ds.durations[0] == 1.0


def test_prune_tie_keeps_incumbent():
    ds = propagate_and_prune(FO, (np.array([[0.01, 0.01], [0.0, 0.0]]), np.array([1.0, 1.0])), COARSE)
    assert len(ds) == 1 and ds.controls[0, 0] == 0.01


def exclusive(ds):
    k = ds.keys
    dE = np.hypot(k[:, None, 0] - k[None, :, 0], k[:, None, 1] - k[None, :, 1])
    dR = angle_diff(k[:, None, 2], k[None, :, 2])
    close = (dE < ds.eps.eps_E) & (dR < ds.eps.eps_R)
    if ds.spec.order == 2:
        close &= np.hypot(k[:, None, 3] - k[None, :, 3], k[:, None, 4] - k[None, :, 4]) < ds.eps.eps_V
        close &= ds.anchor_ids[:, None] == ds.anchor_ids[None, :]
    np.fill_diagonal(close, False)
    return not close.any()


def test_exclusivity_brute_force():
    ds = generate_ctrl_data(FO, COARSE, SMALL)
    assert len(ds) > 100 and exclusive(ds)


def test_keys_match_replay():
    ds = generate_ctrl_data(SO, Epsilons(0.5, math.pi / 3, 0.5),
                            DataGenConfig(durations=(0.5, 2.0), max_samples=5_000, anchor_grid=2, seed=1))
    for i in range(0, len(ds), max(1, len(ds) // 60)):
        x0 = ds.anchor_state(i)
        e = propagate_batch(SO, x0, ds.controls[i:i + 1], ds.durations[i:i + 1])[0]
        np.testing.assert_allclose(transform_to_origin(x0, e), ds.keys[i], atol=1e-12)
    assert exclusive(ds)


def oracle_dispersion(ds, n=2000, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1, 1, (n, 2))
    t = rng.uniform(FO.t_min, FO.t_max, n)
    e = propagate_batch(FO, np.zeros(3), c, t)
    d = np.hypot(e[:, None, 0] - ds.keys[None, :, 0], e[:, None, 1] - ds.keys[None, :, 1])
    return d.min(axis=1).mean()


def test_refinement_never_worsens_dispersion():
    base = propagate_and_prune(FO, discretize_ctrls(FO, COARSE, SMALL.durations), COARSE)
    before = oracle_dispersion(base)
    after_ds = sample_prop_prune(base, 5, rng_seed=0, max_samples=20_000)
    assert oracle_dispersion(after_ds) <= before + 1e-12
    same = sample_prop_prune(base, 0, rng_seed=0)
    assert set(map(tuple, same.keys.round(9))) == set(map(tuple, base.keys.round(9)))


def test_generation_is_deterministic(tmp_path):
    a = generate_ctrl_data(FO, COARSE, SMALL)
    b = generate_ctrl_data(FO, COARSE, SMALL)
    a.save(tmp_path / "a.csv")
    b.save(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_empty_durations_rejected():
    with pytest.raises(ValueError):
        generate_ctrl_data(FO, COARSE, DataGenConfig(durations=()))


def test_csv_round_trip(tmp_path):
    ds = generate_ctrl_data(SO, Epsilons(0.5, math.pi / 3, 0.5),
                            DataGenConfig(durations=(1.0,), max_samples=2_000, anchor_grid=2, seed=2))
    p = tmp_path / "so.csv"
    ds.save(p)
    first = p.read_text().splitlines()[0]
    assert first.startswith("# kinoforge-dataset v1; order=2; eps_E=0.5")
    assert hist_path(p).read_text().startswith("vl_lo,vl_hi,vr_lo,vr_hi,count\n")
    back = ControlDataset.load(p)
    assert np.array_equal(back.keys, ds.keys) and np.array_equal(back.durations, ds.durations)
    assert np.array_equal(back.histogram.counts, ds.histogram.counts)
    assert back.histogram.total == len(back)


def lookup_scan(ds, q):
    dE = np.hypot(*(ds.keys[:, :2] - q[:2]).T)
    dR = angle_diff(ds.keys[:, 2], q[2])
    return int(np.lexsort((ds.durations, dR, dE))[0])


def test_nearest_matches_linear_scan():
    ds = generate_ctrl_data(FO, COARSE, SMALL)
    rng = np.random.default_rng(0)
    for q in np.column_stack([rng.uniform(-5, 5, (1000, 2)), rng.uniform(-3, 3, 1000)]):
        assert ds.nearest_index(q) == lookup_scan(ds, q)
    i = 17
    assert ds.nearest_index(ds.keys[i]) == i


def test_nearest_zero_delta_is_cheapest_stay(fo_data):
    e = fo_data.nearest(np.zeros(3))
    assert e.cost == pytest.approx(FO.t_min)
    assert math.hypot(*e.key[:2]) < fo_data.eps.eps_E
    assert fo_data.nearest_index(np.zeros(3)) == lookup_scan(fo_data, np.zeros(3))


def test_nearest_restricted_to_anchor():
    ds = generate_ctrl_data(SO, Epsilons(0.5, math.pi / 3, 0.5),
                            DataGenConfig(durations=(1.0, 2.0), max_samples=2_000, anchor_grid=2, seed=2))
    for iv in ([-1, -1], [1, 1], [0.9, -0.8]):
        i = ds.nearest_index([0.3, 0.1, 0.0], iv)
        assert ds.anchor_ids[i] == ds.nearest_anchor(iv)


def test_empty_dataset_errors():
    ds = ControlDataset(FO, COARSE, np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((1, 2)),
                        np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        ds.nearest(np.zeros(3))
    with pytest.raises(ValueError):
        ds.sample_waypoint(np.random.default_rng(0))


def test_histogram_single_bucket_and_frequencies():
    rng = np.random.default_rng(0)
    counts = np.zeros((10, 10), dtype=np.int64)
    counts[3, 7] = 5
    h = VelocityHistogram(counts, -1.0, 1.0)
    s = h.sample(rng, 1000)
    assert np.all((s[:, 0] >= -0.4) & (s[:, 0] <= -0.2) & (s[:, 1] >= 0.4) & (s[:, 1] <= 0.6))
    counts = np.zeros((2, 2), dtype=np.int64)
    counts[0, 0], counts[1, 1] = 75, 25
    h = VelocityHistogram(counts, -1.0, 1.0)
    s = h.sample(rng, 100_000)
    frac = np.mean(s[:, 0] < 0)
    assert abs(frac - 0.75) < 0.03
    with pytest.raises(ValueError):
        VelocityHistogram(np.zeros((2, 2), dtype=np.int64), -1, 1).sample(rng)
    v = sample_goal_velocity(h, rng)
    assert len(v) == 2


def test_histogram_marginals_reproduce_real_dataset(so_data):
    h = so_data.histogram
    assert h.total == len(so_data)
    s = h.sample(np.random.default_rng(1), 100_000)
    emp = VelocityHistogram.from_velocities(s, h.v_min, h.v_max, h.counts.shape[0]).counts / 100_000
    assert np.abs(emp - h.counts / h.total).max() < 0.02


def test_waypoint_sampling():
    one = ControlDataset(FO, COARSE, np.array([[1.0, 2.0, 0.5]]), np.zeros((1, 2)), np.ones(1), np.zeros((1, 2)),
                         np.zeros(1, dtype=np.int64))
    rng = np.random.default_rng(0)
    assert all(np.array_equal(one.sample_waypoint(rng), [1.0, 2.0, 0.5]) for _ in range(20))
    keys = np.column_stack([np.arange(100.0), np.zeros(100), np.zeros(100)])
    ds = ControlDataset(FO, COARSE, keys, np.zeros((100, 2)), np.ones(100), np.zeros((1, 2)),
                        np.zeros(100, dtype=np.int64))
    draws = np.array([ds.sample_waypoint(rng)[0] for _ in range(100_000)]).astype(int)
    counts = np.bincount(draws, minlength=100)
    assert np.abs(counts / 100_000 - 0.01).max() < 0.002
    assert chisquare(counts).pvalue > 1e-3


def test_bang_bang_bias(fo_data):
    # within 5% of the control range of either bound
    near_bound = (np.abs(np.abs(fo_data.controls) - 1.0) <= 0.05 * 2).any(axis=1)
    assert near_bound.mean() >= 0.40


def test_refinement_counters_reported(fo_data):
    st = fo_data.stats
    assert st["samples_drawn"] > 0 and st["candidates"] > st["retained"] > 0
    x0 = origin_state(FO)
    assert np.array_equal(x0, np.zeros(3))
