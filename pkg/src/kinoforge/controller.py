"""Learned constant-control steering.

A small tanh MLP with batch normalisation maps a body-frame state delta to a
constant control and its duration.  Inputs and outputs live in ``[-1, 1]``.
Training minimises a weighted sum of the control-duration MSE and the MSE
between the target delta and the endpoint of a differentiable RK4 rollout of
the predicted step; all gradients are written out by hand.

The exact dataset lookup (:class:`LookupController`) serves as the reference
controller.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ControlDataset, VelocityHistogram
from .dynamics import SystemSpec, wrap_angle

BN_EPS = 1e-5

ARCHS = {
    "fo": (3, 64, 16, 3),
    "so": (7, 64, 32, 3),
}
PARAM_CAP = 4000


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormConstants:
    order: int
    radius: float
    v_min: float
    v_max: float
    u_min: float
    u_max: float
    t_min: float
    t_max: float

    @classmethod
    def from_spec(cls, spec: SystemSpec) -> "NormConstants":
        lo, hi = spec.control_bounds
        return cls(spec.order, spec.v_max * spec.t_max, spec.v_min, spec.v_max, lo, hi,
                   spec.t_min, spec.t_max)


def _to_unit(x, lo, hi):
    return (2.0 * x - (lo + hi)) / (hi - lo)


def _from_unit(y, lo, hi):
    return 0.5 * (y * (hi - lo) + (lo + hi))


def normalize_input(deltas, nc: NormConstants) -> np.ndarray:
    """Body-frame deltas to network inputs.

    Position goes to polar form ``(dr, dphi)``; ``dr`` is divided by the reach
    radius, angles by pi, velocities mapped affinely from the velocity bounds.
    ``dphi`` is pinned to 0 when ``dr < 1e-6``.
    """
    d = np.atleast_2d(np.asarray(deltas, dtype=float))
    r = np.hypot(d[:, 0], d[:, 1])
    phi = np.where(r < 1e-6, 0.0, np.arctan2(d[:, 1], d[:, 0]))
    cols = [r / nc.radius, phi / math.pi, wrap_angle(d[:, 2]) / math.pi]
    if nc.order == 2:
        cols += [_to_unit(d[:, j], nc.v_min, nc.v_max) for j in range(3, 7)]
    return np.column_stack(cols)


def denormalize_input(x, nc: NormConstants) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = x[:, 0] * nc.radius
    phi = x[:, 1] * math.pi
    cols = [r * np.cos(phi), r * np.sin(phi), x[:, 2] * math.pi]
    if nc.order == 2:
        cols += [_from_unit(x[:, j], nc.v_min, nc.v_max) for j in range(3, 7)]
    return np.column_stack(cols)


def normalize_output(controls, durations, nc: NormConstants) -> np.ndarray:
    c = np.atleast_2d(np.asarray(controls, dtype=float))
    t = np.atleast_1d(np.asarray(durations, dtype=float))
    return np.column_stack([_to_unit(c[:, 0], nc.u_min, nc.u_max), _to_unit(c[:, 1], nc.u_min, nc.u_max),
                            _to_unit(t, nc.t_min, nc.t_max)])


def denormalize_output(y, nc: NormConstants):
    """Network outputs to ``(controls, durations)``, clamped to the feasible box."""
    y = np.clip(np.atleast_2d(np.asarray(y, dtype=float)), -1.0, 1.0)
    c = np.column_stack([_from_unit(y[:, 0], nc.u_min, nc.u_max), _from_unit(y[:, 1], nc.u_min, nc.u_max)])
    t = _from_unit(y[:, 2], nc.t_min, nc.t_max)
    return np.clip(c, nc.u_min, nc.u_max), np.clip(t, nc.t_min, nc.t_max)


# --------------------------------------------------------------------------
# model


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def params(self):
        """Trainable tensors.  A bias feeding batch norm is cancelled by the
        mean subtraction, so it stays frozen at its initial value."""
        if self.has_bn:
            return {"W": self.W, "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}
        return {"W": self.W, "b": self.b}


class MlpController:
    """Feed-forward tanh network; batch norm on every hidden layer."""

    def __init__(self, sizes, norm: NormConstants, layers: list[Layer] | None = None, rng=None):
        self.sizes = tuple(int(s) for s in sizes)
        self.norm = norm
        if layers is None:
            rng = np.random.default_rng(0) if rng is None else rng
            layers = []
            for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                W = rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
                hidden = i < len(self.sizes) - 2
                layers.append(Layer(
                    W, np.zeros(n_out),
                    *((np.ones(n_out), np.zeros(n_out), np.zeros(n_out), np.ones(n_out)) if hidden else ()),
                ))
        self.layers = layers
        self._folded = None
        if self.param_count() > PARAM_CAP:
            raise ValueError(f"{self.param_count()} parameters exceed the cap of {PARAM_CAP}")

    @property
    def arch(self) -> str:
        for name, s in ARCHS.items():
            if s == self.sizes:
                return name
        return "-".join(map(str, self.sizes))

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params().values())

    def copy(self) -> "MlpController":
        return MlpController(self.sizes, self.norm, copy.deepcopy(self.layers))

    # -- inference -------------------------------------------------------

    def finalize(self) -> "MlpController":
        """Fold running batch-norm statistics into the affine layers."""
        folded = []
        for layer in self.layers:
            if layer.has_bn:
                scale = layer.bn_gamma / np.sqrt(layer.bn_var + BN_EPS)
                W = layer.W * scale
                b = (layer.b - layer.bn_mean) * scale + layer.bn_beta
            else:
                W, b = layer.W, layer.b
            folded.append((np.ascontiguousarray(W), b.copy()))
        self._folded = folded
        return self

    def forward_normalized(self, x) -> np.ndarray:
        if self._folded is None:
            self.finalize()
        h = np.atleast_2d(x)
        for W, b in self._folded:
            h = np.tanh(h @ W + b)
        return h

    def forward(self, deltas):
        """Deltas (body frame) to ``(controls, durations)``."""
        y = self.forward_normalized(normalize_input(deltas, self.norm))
        return denormalize_output(y, self.norm)

    __call__ = forward

    # -- serialisation ---------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "arch": self.arch,
            "sizes": list(self.sizes),
            "norm_constants": asdict(self.norm),
            "layers": [],
        }
        for layer in self.layers:
            d = {"W": layer.W.ravel().tolist(), "W_shape": list(layer.W.shape), "b": layer.b.tolist()}
            for k in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
                v = getattr(layer, k)
                d[k] = None if v is None else v.tolist()
            doc["layers"].append(d)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MlpController":
        doc = json.loads(text)
        layers = []
        for d in doc["layers"]:
            W = np.array(d["W"], dtype=float).reshape(d["W_shape"])
            extra = [None if d[k] is None else np.array(d[k], dtype=float)
                     for k in ("bn_gamma", "bn_beta", "bn_mean", "bn_var")]
            layers.append(Layer(W, np.array(d["b"], dtype=float), *extra))
        return cls(doc["sizes"], NormConstants(**doc["norm_constants"]), layers)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MlpController":
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------
# training-mode pass with hand-written backprop


def _forward_train(model: MlpController, x):
    cache = []
    h = x
    for layer in model.layers:
        z = h @ layer.W + layer.b
        if layer.has_bn:
            mu = z.mean(0)
            var = z.var(0)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv
            a = layer.bn_gamma * zhat + layer.bn_beta
            out = np.tanh(a)
            cache.append((h, zhat, inv, mu, var, out))
        else:
            out = np.tanh(z)
            cache.append((h, None, None, None, None, out))
        h = out
    return h, cache


def _backward_train(model: MlpController, cache, g_out):
    grads = []
    g = g_out
    for layer, (h_in, zhat, inv, _, _, out) in zip(reversed(model.layers), reversed(cache)):
        ga = g * (1.0 - out * out)
        lg = {}
        if layer.has_bn:
            lg["bn_gamma"] = (ga * zhat).sum(0)
            lg["bn_beta"] = ga.sum(0)
            gz_hat = ga * layer.bn_gamma
            n = gz_hat.shape[0]
            gz = inv / n * (n * gz_hat - gz_hat.sum(0) - zhat * (gz_hat * zhat).sum(0))
        else:
            gz = ga
        lg["W"] = h_in.T @ gz
        if not layer.has_bn:
            lg["b"] = gz.sum(0)
        g = gz @ layer.W.T
        grads.append(lg)
    return grads[::-1]


# --------------------------------------------------------------------------
# differentiable rollout


def _rollout_rates(order, L, vmin, vmax, s, u):
    th = s[:, 2]
    c, sn = np.cos(th), np.sin(th)
    if order == 1:
        vl, vr = u[:, 0], u[:, 1]
        ml = mr = None
    else:
        vl = np.clip(s[:, 3], vmin, vmax)
        vr = np.clip(s[:, 4], vmin, vmax)
        ml = ((s[:, 3] > vmin) & (s[:, 3] < vmax)).astype(float)
        mr = ((s[:, 4] > vmin) & (s[:, 4] < vmax)).astype(float)
    v = 0.5 * (vl + vr)
    f = np.empty_like(s)
    f[:, 0] = v * c
    f[:, 1] = v * sn
    f[:, 2] = (vr - vl) / L
    if order == 2:
        f[:, 3] = u[:, 0]
        f[:, 4] = u[:, 1]
    return f, (c, sn, v, ml, mr)


def _rollout_vjp(order, L, aux, g):
    """Transpose-Jacobian products of the rates w.r.t. state and control."""
    c, sn, v, ml, mr = aux
    gs = np.zeros_like(g)
    gu = np.zeros((g.shape[0], 2))
    gs[:, 2] = -v * sn * g[:, 0] + v * c * g[:, 1]
    common = 0.5 * (c * g[:, 0] + sn * g[:, 1])
    if order == 1:
        gu[:, 0] = common - g[:, 2] / L
        gu[:, 1] = common + g[:, 2] / L
    else:
        gs[:, 3] = ml * (common - g[:, 2] / L)
        gs[:, 4] = mr * (common + g[:, 2] / L)
        gu[:, 0] = g[:, 3]
        gu[:, 1] = g[:, 4]
    return gs, gu


def rollout(spec: SystemSpec, s0, controls, durations, n_sub: int = 16, need_grad=False):
    """RK4 rollout with ``n_sub`` equal substeps of ``duration / n_sub``.

    Unlike :func:`kinoforge.dynamics.propagate_batch` the step size scales with
    the duration, which makes the endpoint differentiable in it.  Headings are
    left unwrapped.  With ``need_grad`` a closure mapping endpoint cotangents
    to ``(d_controls, d_durations)`` is returned as well.
    """
    order, L, vmin, vmax = spec.order, spec.axle_length, spec.v_min, spec.v_max
    s = np.array(s0, dtype=float)
    u = np.asarray(controls, dtype=float)
    dt = (np.asarray(durations, dtype=float) / n_sub)[:, None]
    tape = []
    for _ in range(n_sub):
        k1, a1 = _rollout_rates(order, L, vmin, vmax, s, u)
        s2 = s + 0.5 * dt * k1
        k2, a2 = _rollout_rates(order, L, vmin, vmax, s2, u)
        s3 = s + 0.5 * dt * k2
        k3, a3 = _rollout_rates(order, L, vmin, vmax, s3, u)
        s4 = s + dt * k3
        k4, a4 = _rollout_rates(order, L, vmin, vmax, s4, u)
        nxt = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        clampmask = None
        if order == 2:
            clampmask = (nxt[:, 3:5] >= vmin) & (nxt[:, 3:5] <= vmax)
            nxt[:, 3:5] = np.clip(nxt[:, 3:5], vmin, vmax)
        if need_grad:
            tape.append((k1, k2, k3, a1, a2, a3, a4, k4, clampmask))
        s = nxt
    if not need_grad:
        return s

    def vjp(g_end):
        g = np.array(g_end, dtype=float)
        gu = np.zeros_like(u)
        gdt = np.zeros(len(g))
        dtv = dt[:, 0]
        for k1, k2, k3, a1, a2, a3, a4, k4, cm in reversed(tape):
            if cm is not None:
                g[:, 3:5] *= cm
            gdt += (g * (k1 + 2 * k2 + 2 * k3 + k4)).sum(1) / 6.0
            gk1 = g * (dt / 6.0)
            gk2 = g * (dt / 3.0)
            gk3 = g * (dt / 3.0)
            gk4 = g * (dt / 6.0)
            gs = g.copy()
            # k4 = f(s + dt k3)
            gs4, gu4 = _rollout_vjp(order, L, a4, gk4)
            gu += gu4
            gs += gs4
            gk3 += dt * gs4
            gdt += (gs4 * k3).sum(1)
            # k3 = f(s + dt/2 k2)
            gs3, gu3 = _rollout_vjp(order, L, a3, gk3)
            gu += gu3
            gs += gs3
            gk2 += 0.5 * dt * gs3
            gdt += 0.5 * (gs3 * k2).sum(1)
            # k2 = f(s + dt/2 k1)
            gs2, gu2 = _rollout_vjp(order, L, a2, gk2)
            gu += gu2
            gs += gs2
            gk1 += 0.5 * dt * gs2
            gdt += 0.5 * (gs2 * k1).sum(1)
            # k1 = f(s)
            gs1, gu1 = _rollout_vjp(order, L, a1, gk1)
            gu += gu1
            gs += gs1
            g = gs
        return gu, gdt / n_sub * np.ones_like(dtv)

    return s, vjp


# --------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 2000
    w_u: float = 1.0
    w_s: float = 0.5
    val_split: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    bn_momentum: float = 0.1
    rollout_substeps: int = 16
    patience: int | None = None

    def __post_init__(self):
        if self.w_u < 0 or self.w_s < 0 or self.w_u + self.w_s <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")

    @classmethod
    def for_spec(cls, spec: SystemSpec, **kw) -> "TrainConfig":
        if spec.order == 2:
            kw.setdefault("w_s", 0.0)
        return cls(**kw)


@dataclass
class LossParts:
    total: float
    ctrl_mse: float
    state_mse: float

    @property
    def combined_mse(self) -> float:
        """MSE over the concatenated control-duration and state residuals."""
        return 0.5 * (self.ctrl_mse + self.state_mse)


def _state_residual(spec, nc, end, keys):
    R = nc.radius
    cols = [(end[:, 0] - keys[:, 0]) / R, (end[:, 1] - keys[:, 1]) / R,
            wrap_angle(end[:, 2] - keys[:, 2]) / math.pi]
    scale = np.array([1.0 / R, 1.0 / R, 1.0 / math.pi])
    if spec.order == 2:
        vs = 2.0 / (nc.v_max - nc.v_min)
        cols += [(end[:, 3] - keys[:, 3]) * vs, (end[:, 4] - keys[:, 4]) * vs]
        scale = np.concatenate([scale, [vs, vs]])
    return np.column_stack(cols), scale


def _start_states(spec, keys):
    s0 = np.zeros((len(keys), spec.state_dim))
    if spec.order == 2:
        s0[:, 3:5] = keys[:, 5:7]
    return s0


def loss_and_grad(model: MlpController, spec: SystemSpec, x, y, keys, cfg: TrainConfig, need_grad=True):
    """Training-mode loss (batch statistics) and its parameter gradients."""
    nc = model.norm
    out, cache = _forward_train(model, x)
    n = len(x)
    r_u = out - y
    ctrl_mse = float(np.mean(r_u**2))
    g_out = cfg.w_u * 2.0 * r_u / r_u.size
    state_mse = 0.0
    total = cfg.w_u * ctrl_mse
    if cfg.w_s > 0 or not need_grad:
        controls, durs = (_from_unit(out[:, :2], nc.u_min, nc.u_max), _from_unit(out[:, 2], nc.t_min, nc.t_max))
        end, vjp = rollout(spec, _start_states(spec, keys), controls, durs, cfg.rollout_substeps, need_grad=True)
        res, scale = _state_residual(spec, nc, end, keys)
        state_mse = float(np.mean(res**2))
        total += cfg.w_s * state_mse
        if need_grad and cfg.w_s > 0:
            g_end = cfg.w_s * 2.0 * res / res.size * scale
            gu, gT = vjp(g_end)
            g_out = g_out.copy()
            g_out[:, :2] += gu * (nc.u_max - nc.u_min) / 2.0
            g_out[:, 2] += gT * (nc.t_max - nc.t_min) / 2.0
    parts = LossParts(total, ctrl_mse, state_mse)
    if not need_grad:
        return parts, None
    del n
    return parts, _backward_train(model, cache, g_out)


def eval_loss(model: MlpController, spec: SystemSpec, x, y, keys, cfg: TrainConfig) -> LossParts:
    """Inference-mode loss (running statistics), used for validation."""
    nc = model.norm
    out = model.finalize().forward_normalized(x)
    ctrl_mse = float(np.mean((out - y) ** 2))
    controls, durs = denormalize_output(out, nc)
    end = rollout(spec, _start_states(spec, keys), controls, durs, cfg.rollout_substeps)
    res, _ = _state_residual(spec, nc, end, keys)
    state_mse = float(np.mean(res**2))
    return LossParts(cfg.w_u * ctrl_mse + cfg.w_s * state_mse, ctrl_mse, state_mse)


def check_gradients(model, spec, x, y, keys, cfg: TrainConfig, n_slices=20, step=1e-5, rng=None):
    """Relative error between analytic and central-difference directional derivatives.

    Each slice is a random unit direction within one parameter tensor.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = loss_and_grad(model, spec, x, y, keys, cfg)
    names = [(i, k) for i, layer in enumerate(model.layers) for k in layer.params()]
    errors = []
    for _ in range(n_slices):
        i, k = names[rng.integers(len(names))]
        p = getattr(model.layers[i], k)
        direction = rng.normal(size=p.shape)
        direction /= np.linalg.norm(direction)
        analytic = float((grads[i][k] * direction).sum())
        orig = p.copy()
        p[...] = orig + step * direction
        lp = loss_and_grad(model, spec, x, y, keys, cfg, need_grad=False)[0].total
        p[...] = orig - step * direction
        lm = loss_and_grad(model, spec, x, y, keys, cfg, need_grad=False)[0].total
        p[...] = orig
        fd = (lp - lm) / (2 * step)
        errors.append(abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-300))
    return np.array(errors)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MlpController
    curve: list = field(default_factory=list)
    best_epoch: int = -1
    val: LossParts | None = None
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None


def training_arrays(dataset: ControlDataset):
    nc = NormConstants.from_spec(dataset.spec)
    x = normalize_input(dataset.keys, nc)
    y = normalize_output(dataset.controls, dataset.durations, nc)
    return x, y, dataset.keys


def split_indices(n: int, val_split: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_split * n))) if val_split > 0 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(dataset: ControlDataset, arch: str | tuple = "fo", cfg: TrainConfig | None = None,
          log_every: int = 0) -> TrainResult:
    """Mini-batch Adam on the weighted control/state loss.

    Returns the parameters with the best validation loss and the per-epoch
    curve ``(epoch, train_loss, val_total, val_ctrl_mse, val_state_mse)``.
    """
    spec = dataset.spec
    cfg = TrainConfig.for_spec(spec) if cfg is None else cfg
    sizes = ARCHS[arch] if isinstance(arch, str) else tuple(arch)
    # full-batch runs (batch >= dataset) are exempt so tiny sets can be memorised
    if cfg.batch_size < len(dataset) < 10 * cfg.batch_size:
        raise ValueError(f"dataset of {len(dataset)} entries is smaller than 10 batches")
    rng = np.random.default_rng(cfg.seed)
    nc = NormConstants.from_spec(spec)
    model = MlpController(sizes, nc, rng=rng)
    x, y, keys = training_arrays(dataset)
    tr, va = split_indices(len(x), cfg.val_split, cfg.seed)
    if len(va) == 0:
        va = tr
    m = {id(p): np.zeros_like(p) for layer in model.layers for p in layer.params().values()}
    v = {id(p): np.zeros_like(p) for layer in model.layers for p in layer.params().values()}
    best = None
    best_val = math.inf
    best_epoch = -1
    curve = []
    t = 0
    bs = min(cfg.batch_size, len(tr))
    for epoch in range(cfg.epochs):
        perm = tr[rng.permutation(len(tr))]
        losses = []
        for start in range(0, len(perm) - bs + 1, bs):
            idx = perm[start:start + bs]
            parts, grads = loss_and_grad(model, spec, x[idx], y[idx], keys[idx], cfg)
            if not math.isfinite(parts.total):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            losses.append(parts.total)
            t += 1
            lr_t = cfg.lr * math.sqrt(1 - cfg.beta2**t) / (1 - cfg.beta1**t)
            for layer, lg in zip(model.layers, grads):
                for k, p in layer.params().items():
                    g = lg[k]
                    mk, vk = m[id(p)], v[id(p)]
                    mk *= cfg.beta1
                    mk += (1 - cfg.beta1) * g
                    vk *= cfg.beta2
                    vk += (1 - cfg.beta2) * g * g
                    p -= lr_t * mk / (np.sqrt(vk) + 1e-8)
            _update_running_stats(model, x[idx], cfg.bn_momentum)
        model._folded = None
        val = eval_loss(model, spec, x[va], y[va], keys[va], cfg)
        curve.append((epoch, float(np.mean(losses)), val.total, val.ctrl_mse, val.state_mse))
        if val.total < best_val:
            best_val, best, best_epoch = val.total, model.copy(), epoch
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: train {np.mean(losses):.5f} val {val.total:.5f} "
                  f"(ctrl {val.ctrl_mse:.5f}, state {val.state_mse:.5f})", flush=True)
        if cfg.patience is not None and epoch - best_epoch > cfg.patience:
            break
    best.finalize()
    return TrainResult(best, curve, best_epoch, eval_loss(best, spec, x[va], y[va], keys[va], cfg), tr, va)


def _update_running_stats(model, x, momentum):
    h = x
    for layer in model.layers:
        z = h @ layer.W + layer.b
        if layer.has_bn:
            mu, var = z.mean(0), z.var(0)
            n = len(z)
            layer.bn_mean = (1 - momentum) * layer.bn_mean + momentum * mu
            layer.bn_var = (1 - momentum) * layer.bn_var + momentum * var * n / max(n - 1, 1)
            z = layer.bn_gamma * (z - mu) / np.sqrt(var + BN_EPS) + layer.bn_beta
        h = np.tanh(z)


# --------------------------------------------------------------------------
# controllers used by the planner


class LookupController:
    """Exact nearest-neighbour controller backed by the dataset."""

    def __init__(self, dataset: ControlDataset):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.dataset = dataset

    def forward(self, deltas):
        d = np.atleast_2d(np.asarray(deltas, dtype=float))
        idx = np.array([self.dataset.nearest_index(q, q[5:7] if len(q) >= 7 else None) for q in d])
        return self.dataset.controls[idx].copy(), self.dataset.durations[idx].copy()

    __call__ = forward


def lookup_control(dataset: ControlDataset, controller_input, nc: NormConstants | None = None):
    """Step of the dataset entry nearest to a (normalised, polar) controller input."""
    nc = NormConstants.from_spec(dataset.spec) if nc is None else nc
    delta = denormalize_input(controller_input, nc)[0]
    e = dataset.nearest(delta, delta[5:7] if dataset.spec.order == 2 else None)
    return e.step


def predict(controller, anchor, waypoint, rng=None, histogram: VelocityHistogram | None = None):
    """Unified steering call used by the planner.

    ``waypoint`` rows are body-frame deltas ``(dx, dy, dtheta)`` optionally
    followed by goal velocities.  For the second-order system the initial
    velocities come from ``anchor`` and missing goal velocities are drawn from
    ``histogram``.  Returns ``(controls, durations)``.
    """
    anchor = np.asarray(anchor, dtype=float)
    w = np.atleast_2d(np.asarray(waypoint, dtype=float))
    if anchor.shape[-1] == 5:
        if w.shape[1] < 5:
            if histogram is None:
                raise ValueError("second-order waypoints need goal velocities or a histogram")
            goal_v = histogram.sample(rng, len(w))
        else:
            goal_v = w[:, 3:5]
        init_v = np.broadcast_to(anchor[3:5], (len(w), 2))
        w = np.column_stack([w[:, :3], goal_v, init_v])
    else:
        w = w[:, :3]
    return controller(w)


# --------------------------------------------------------------------------
# closed-loop evaluation


def closed_loop_errors(controller, dataset: ControlDataset, idx) -> dict:
    """Execute the controller's step for dataset keys and measure where it lands.

    Returns per-query arrays: the requested keys, the achieved deltas and the
    component-wise errors ``err_E``, ``err_R`` (and ``err_V`` for second order).
    """
    from .dynamics import angle_diff, propagate_batch, transform_to_origin

    spec = dataset.spec
    idx = np.asarray(idx)
    keys = dataset.keys[idx]
    c, t = controller(keys)
    starts = np.zeros((len(idx), spec.state_dim))
    if spec.order == 2:
        starts[:, 3:5] = keys[:, 5:7]
    ends = propagate_batch(spec, starts, c, t)
    got = np.array([transform_to_origin(s, e) for s, e in zip(starts, ends)])
    out = {"index": idx, "keys": keys, "achieved": got, "controls": c, "durations": t,
           "err_E": np.hypot(*(got[:, :2] - keys[:, :2]).T),
           "err_R": angle_diff(got[:, 2], keys[:, 2])}
    if spec.order == 2:
        out["err_V"] = np.hypot(*(got[:, 3:5] - keys[:, 3:5]).T)
    return out


def within_factor(errors: dict, eps, k: float = 2.0) -> np.ndarray:
    ok = (errors["err_E"] <= k * eps.eps_E) & (errors["err_R"] <= k * eps.eps_R)
    if "err_V" in errors:
        ok &= errors["err_V"] <= k * eps.eps_V
    return ok


def closed_loop_csv(errors: dict, eps) -> str:
    second = "err_V" in errors
    head = "index,dx,dy,dtheta,got_dx,got_dy,got_dtheta,ctrl_a,ctrl_b,duration,err_E,err_R"
    head += ",err_V,within_2eps" if second else ",within_2eps"
    ok = within_factor(errors, eps)
    rows = [head]
    for q in range(len(errors["index"])):
        k, g = errors["keys"][q], errors["achieved"][q]
        vals = [int(errors["index"][q]), *k[:3], *g[:3], *errors["controls"][q], errors["durations"][q],
                errors["err_E"][q], errors["err_R"][q]]
        if second:
            vals.append(errors["err_V"][q])
        rows.append(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals) + f",{int(ok[q])}")
    return "\n".join(rows) + "\n"
