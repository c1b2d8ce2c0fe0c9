import math
import time

import numpy as np
import pytest

from kinoforge.controller import (ARCHS, BN_EPS, PARAM_CAP, Layer, LookupController, MlpController, NormConstants,
                                  TrainConfig, check_gradients, closed_loop_csv, closed_loop_errors,
                                  denormalize_input, denormalize_output, loss_and_grad, lookup_control,
                                  normalize_input, normalize_output, predict, rollout, split_indices, train,
                                  training_arrays, within_factor)
from kinoforge.dataset import ControlDataset, DataGenConfig, generate_ctrl_data
from kinoforge.dynamics import Epsilons, SystemSpec, propagate_batch

FO = SystemSpec.first_order()
SO = SystemSpec.second_order()
NC1 = NormConstants.from_spec(FO)
NC2 = NormConstants.from_spec(SO)


def dense_reference(model, x):
    """Unfolded inference: affine, batch norm from running stats, tanh."""
    h = np.atleast_2d(x)
    for layer in model.layers:
        z = h @ layer.W + layer.b
        if layer.has_bn:
            z = layer.bn_gamma * (z - layer.bn_mean) / np.sqrt(layer.bn_var + BN_EPS) + layer.bn_beta
        h = np.tanh(z)
    return h


def random_model(sizes, nc, rng):
    m = MlpController(sizes, nc, rng=rng)
    for layer in m.layers:
        layer.b[:] = rng.normal(size=layer.b.shape)
        if layer.has_bn:
            layer.bn_gamma[:] = rng.uniform(0.5, 2, layer.bn_gamma.shape)
            layer.bn_beta[:] = rng.normal(size=layer.bn_beta.shape)
            layer.bn_mean[:] = rng.normal(size=layer.bn_mean.shape)
            layer.bn_var[:] = rng.uniform(0.1, 3, layer.bn_var.shape)
    return m


def test_architectures_and_parameter_budget():
    assert ARCHS["fo"] == (3, 64, 16, 3) and ARCHS["so"] == (7, 64, 32, 3)
    for name in ("fo", "so"):
        m = MlpController(ARCHS[name], NC1 if name == "fo" else NC2)
        assert m.param_count() <= PARAM_CAP and m.arch == name
    with pytest.raises(ValueError):
        MlpController((7, 128, 64, 3), NC2)


def test_normalization_examples_and_round_trip(rng):
    assert np.allclose(normalize_input(np.zeros(3), NC1), 0)
    assert np.allclose(normalize_input(np.zeros(7), NC2), 0)
    assert normalize_input([1.0, 0.0, math.pi], NC1)[0, 2] == pytest.approx(1.0)
    assert normalize_input([0.0, 0.0, 0.0], NC1)[0, 1] == 0.0
    for nc, dim in ((NC1, 3), (NC2, 7)):
        r = rng.uniform(0, nc.radius, 1000)
        phi = rng.uniform(-math.pi, math.pi, 1000)
        d = np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-math.pi, math.pi, 1000)])
        if dim == 7:
            d = np.column_stack([d, rng.uniform(-1, 1, (1000, 4))])
        x = normalize_input(d, nc)
        assert np.all(np.abs(x) <= 1)
        assert np.abs(denormalize_input(x, nc) - d).max() < 1e-12
    c = rng.uniform(-1, 1, (1000, 2))
    t = rng.uniform(0.5, 5, 1000)
    c2, t2 = denormalize_output(normalize_output(c, t, NC1), NC1)
    assert np.abs(c2 - c).max() < 1e-12 and np.abs(t2 - t).max() < 1e-12


def test_zero_weights_give_midrange_output():
    m = MlpController(ARCHS["fo"], NC1)
    for layer in m.layers:
        layer.W[:] = 0
        layer.b[:] = 0
        if layer.has_bn:
            layer.bn_beta[:] = 0
    c, t = m(np.array([[1.0, 2.0, 0.3]]))
    assert np.allclose(c, 0) and t[0] == pytest.approx((FO.t_min + FO.t_max) / 2)


@pytest.mark.parametrize("arch", ["fo", "so"])
def test_forward_matches_dense_reference(arch, rng):
    nc = NC1 if arch == "fo" else NC2
    for _ in range(100):
        m = random_model(ARCHS[arch], nc, rng)
        x = rng.uniform(-1, 1, (8, ARCHS[arch][0]))
        assert np.abs(m.forward_normalized(x) - dense_reference(m, x)).max() < 1e-10


def test_single_inference_latency():
    m = MlpController(ARCHS["so"], NC2).finalize()
    x = np.zeros((1, 7))
    for _ in range(200):
        m.forward_normalized(x)
    n = 2000
    t = time.perf_counter()
    for _ in range(n):
        m.forward_normalized(x)
    assert (time.perf_counter() - t) / n < 50e-6


def test_outputs_always_feasible(rng):
    m = random_model(ARCHS["so"], NC2, rng)
    c, t = m(rng.uniform(-20, 20, (2000, 7)))
    assert c.min() >= SO.u_min and c.max() <= SO.u_max
    assert t.min() >= SO.t_min and t.max() <= SO.t_max


def test_json_round_trip(tmp_path, rng):
    m = random_model(ARCHS["fo"], NC1, rng)
    p = tmp_path / "m.json"
    m.save(p)
    import json

    doc = json.loads(p.read_text())
    assert {"arch", "norm_constants", "layers"} <= set(doc)
    assert {"W", "b", "bn_gamma", "bn_beta", "bn_mean", "bn_var"} <= set(doc["layers"][0])
    back = MlpController.load(p)
    x = rng.uniform(-1, 1, (50, 3))
    assert np.array_equal(back.forward_normalized(x), m.forward_normalized(x))


def test_rollout_gradient_matches_finite_differences(rng):
    for spec in (FO, SO):
        s0 = np.zeros((6, spec.state_dim))
        if spec.order == 2:
            s0[:, 3:] = rng.uniform(-0.5, 0.5, (6, 2))
        u = rng.uniform(-0.9, 0.9, (6, 2))
        T = rng.uniform(0.6, 4.5, 6)
        end, vjp = rollout(spec, s0, u, T, need_grad=True)
        g = rng.normal(size=end.shape)
        gu, gT = vjp(g)
        h = 1e-6
        for k in range(2):
            du = np.zeros_like(u)
            du[:, k] = h
            fd = ((rollout(spec, s0, u + du, T) - rollout(spec, s0, u - du, T)) * g).sum(1) / (2 * h)
            assert np.allclose(gu[:, k], fd, rtol=1e-5, atol=1e-7)
        fd = ((rollout(spec, s0, u, T + h) - rollout(spec, s0, u, T - h)) * g).sum(1) / (2 * h)
        assert np.allclose(gT, fd, rtol=1e-5, atol=1e-7)


def test_rollout_close_to_propagation(rng):
    u = rng.uniform(-1, 1, (20, 2))
    T = rng.uniform(0.5, 5, 20)
    ref = propagate_batch(FO, np.zeros((20, 3)), u, T)
    assert np.abs(rollout(FO, np.zeros((20, 3)), u, T)[:, :2] - ref[:, :2]).max() < 1e-4


@pytest.fixture(scope="module")
def toy():
    return generate_ctrl_data(FO, Epsilons(0.3, math.pi / 4),
                              DataGenConfig(durations=(0.5, 1.5, 3.0), max_samples=20_000, seed=3))


def test_gradient_check_both_terms(toy, rng):
    x, y, k = training_arrays(toy)
    idx = rng.choice(len(toy), 64, replace=False)
    cfg = TrainConfig(w_u=1.0, w_s=0.5)
    m = random_model(ARCHS["fo"], NC1, rng)
    err = check_gradients(m, FO, x[idx], y[idx], k[idx], cfg, n_slices=20, rng=rng)
    assert err.max() < 1e-4


def test_frozen_pre_norm_bias_has_no_gradient(toy, rng):
    x, y, k = training_arrays(toy)
    m = random_model(ARCHS["fo"], NC1, rng)
    _, grads = loss_and_grad(m, FO, x[:32], y[:32], k[:32], TrainConfig())
    assert "b" not in grads[0] and "b" in grads[-1]


def test_memorizes_ten_entries():
    ds = generate_ctrl_data(FO, Epsilons(0.3, math.pi / 4),
                            DataGenConfig(durations=(2.0,), max_samples=1, seed=0))
    sub = ControlDataset(FO, ds.eps, ds.keys[:10], ds.controls[:10], ds.durations[:10], ds.anchors,
                         ds.anchor_ids[:10])
    res = train(sub, "fo", TrainConfig(epochs=1500, batch_size=10, val_split=0.0, w_s=0.0, lr=3e-3, seed=0))
    assert res.curve[-1][1] < 1e-3


def test_training_is_deterministic_and_best_is_monotone(toy):
    cfg = TrainConfig(epochs=15, batch_size=16, seed=4)
    a = train(toy, "fo", cfg)
    b = train(toy, "fo", cfg)
    assert a.model.to_json() == b.model.to_json()
    vals = [row[2] for row in a.curve]
    best = np.minimum.accumulate(vals)
    assert np.all(np.diff(best) <= 0)
    assert a.val.total == pytest.approx(min(vals))


def test_small_dataset_guard(toy):
    sub = ControlDataset(FO, toy.eps, toy.keys[:300], toy.controls[:300], toy.durations[:300], toy.anchors,
                         toy.anchor_ids[:300])
    with pytest.raises(ValueError):
        train(sub, "fo", TrainConfig(epochs=1, batch_size=128))


def test_non_finite_loss_aborts(toy):
    bad = ControlDataset(FO, toy.eps, toy.keys.copy(), toy.controls, toy.durations, toy.anchors, toy.anchor_ids)
    bad.keys[:, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train(bad, "fo", TrainConfig(epochs=5, batch_size=16))


def test_lookup_controller_examples(toy, rng):
    L = LookupController(toy)
    for i in rng.choice(len(toy), 50, replace=False):
        c, t = L(toy.keys[i:i + 1])
        assert np.array_equal(c[0], toy.controls[i]) and t[0] == toy.durations[i]
        step = lookup_control(toy, normalize_input(toy.keys[i], NC1))
        assert step.duration == toy.durations[i]
    idx = rng.choice(len(toy), min(500, len(toy)), replace=False)
    err = closed_loop_errors(L, toy, idx)
    assert within_factor(err, toy.eps, 1.0).all()
    text = closed_loop_csv(err, toy.eps)
    assert text.count("\n") == len(idx) + 1


def test_predict_fills_second_order_velocities(rng):
    ds = generate_ctrl_data(SO, Epsilons(0.5, math.pi / 3, 0.5),
                            DataGenConfig(durations=(1.0, 2.0), max_samples=2_000, anchor_grid=2, seed=2))
    seen = []
    predict(lambda w: seen.append(w) or (np.zeros((len(w), 2)), np.ones(len(w))),
            np.array([0, 0, 0, 0.7, -0.2]), np.array([[1.0, 0.0, 0.0]]), rng, ds.histogram)
    w = seen[0]
    assert w.shape == (1, 7) and np.allclose(w[0, 5:], [0.7, -0.2])
    with pytest.raises(ValueError):
        predict(LookupController(ds), np.zeros(5), np.zeros((1, 3)), rng, None)


def test_split_is_disjoint():
    tr, va = split_indices(1000, 0.2, 0)
    assert len(va) == 200 and not set(tr) & set(va) and len(tr) + len(va) == 1000


# -- behaviour of the trained first-order model -------------------------


def test_sign_agreement_with_lookup(fo_data, fo_model, rng):
    idx = rng.choice(len(fo_data), 1000, replace=True)
    c, _ = fo_model(fo_data.keys[idx])
    ref = fo_data.controls[idx]
    assert np.mean(np.all(np.sign(c) == np.sign(ref), axis=1)) >= 0.8


def test_zero_delta_gives_short_duration(fo_model):
    _, t = fo_model(np.zeros((1, 3)))
    assert FO.t_min <= t[0] <= FO.t_min + 0.5
