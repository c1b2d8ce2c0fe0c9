"""Differential-drive systems, fixed-step propagation and component distances.

States are plain float64 arrays:

* first order  ``[x, y, theta]`` with wheel-velocity controls ``[v_l, v_r]``
* second order ``[x, y, theta, v_l, v_r]`` with wheel-acceleration controls ``[u_l, u_r]``

Positions are in map cells, headings in radians wrapped to ``(-pi, pi]``.
A state delta (the learned controller's input) is ``[dx, dy, dtheta]`` for the
first-order system and ``[dx, dy, dtheta, vl_goal, vr_goal, vl_init, vr_init]``
for the second-order one, always expressed in the anchor's body frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


class PropagationStep(NamedTuple):
    """A constant control held for ``duration`` seconds."""

    control: tuple[float, float]
    duration: float


@dataclass(frozen=True)
class Epsilons:
    eps_E: float
    eps_R: float
    eps_V: float = math.inf

    def __post_init__(self):
        if not (self.eps_E > 0 and self.eps_R > 0 and self.eps_V > 0):
            raise ValueError(f"epsilons must be strictly positive, got {self}")

    def scaled(self, k: float) -> "Epsilons":
        return Epsilons(self.eps_E * k, self.eps_R * k, self.eps_V * k)


@dataclass(frozen=True)
class SystemSpec:
    """Parameters of a differential-drive system.

    For the first-order system the controls *are* wheel velocities, so the
    control box is ``[v_min, v_max]``; ``u_min``/``u_max`` are only used by the
    second-order system, whose velocities are clamped to ``[v_min, v_max]``.
    """

    order: int = 1
    v_min: float = -1.0
    v_max: float = 1.0
    u_min: float = -1.0
    u_max: float = 1.0
    t_min: float = 0.5
    t_max: float = 5.0
    axle_length: float = 1.0
    integ_step: float = 0.02
    identify_antipodal_headings: bool = False

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2, got {self.order}")
        if not self.v_min < self.v_max or not self.u_min < self.u_max:
            raise ValueError("control and velocity bounds must be nonempty intervals")
        if not 0 < self.t_min <= self.t_max:
            raise ValueError("need 0 < t_min <= t_max")
        if not 0 < self.integ_step <= self.t_min:
            raise ValueError("integration step must lie in (0, t_min]")
        if self.axle_length <= 0:
            raise ValueError("axle length must be positive")

    @classmethod
    def first_order(cls, **kw) -> "SystemSpec":
        return cls(order=1, **kw)

    @classmethod
    def second_order(cls, **kw) -> "SystemSpec":
        return cls(order=2, **kw)

    @property
    def state_dim(self) -> int:
        return 3 if self.order == 1 else 5

    @property
    def delta_dim(self) -> int:
        return 3 if self.order == 1 else 7

    @property
    def control_bounds(self) -> tuple[float, float]:
        if self.order == 1:
            return self.v_min, self.v_max
        return self.u_min, self.u_max

    @property
    def reach_radius(self) -> float:
        """Largest planar displacement a single step can produce."""
        return max(abs(self.v_min), abs(self.v_max)) * self.t_max

    def default_epsilons(self) -> Epsilons:
        if self.order == 1:
            return Epsilons(0.1, math.pi / 6)
        return Epsilons(0.2, math.pi / 6, (self.v_max - self.v_min) / 4)

    def check_step(self, duration) -> None:
        d = np.asarray(duration, dtype=float)
        tol = 1e-12
        if np.any(d < self.t_min - tol) or np.any(d > self.t_max + tol) or np.any(~np.isfinite(d)):
            raise ValueError(
                f"duration outside [{self.t_min}, {self.t_max}]: {d.min() if d.size else d}..{d.max() if d.size else d}"
            )

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SystemSpec":
        values: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key == "order":
                values[key] = {"first": 1, "second": 2}.get(val.lower(), None) or int(val)
            elif key == "identify_antipodal_headings":
                values[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                values[key] = float(val)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "SystemSpec":
        return cls.from_text(Path(path).read_text())

    def with_(self, **kw) -> "SystemSpec":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


def wrap_angle(theta):
    """Wrap angles to ``(-pi, pi]``."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), TWO_PI)


@njit(cache=True)
def _rates(order, L, vmin, vmax, s, u, out):
    if order == 1:
        vl, vr = u[0], u[1]
    else:
        vl = min(max(s[3], vmin), vmax)
        vr = min(max(s[4], vmin), vmax)
        out[3] = u[0]
        out[4] = u[1]
    v = 0.5 * (vl + vr)
    out[0] = v * math.cos(s[2])
    out[1] = v * math.sin(s[2])
    out[2] = (vr - vl) / L


@njit(cache=True)
def _wrap(a):
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@njit(cache=True)
def _rk4_kernel(order, L, vmin, vmax, h, starts, controls, durations, every, ends, snaps, mask):
    n, d = starts.shape
    s = np.empty(d)
    tmp = np.empty(d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    for i in range(n):
        for q in range(d):
            s[q] = starts[i, q]
        if order == 2:
            s[3] = min(max(s[3], vmin), vmax)
            s[4] = min(max(s[4], vmin), vmax)
        u = controls[i]
        T = durations[i]
        nsub = int(math.ceil(T / h - 1e-9))
        isnap = 0
        if every > 0:
            snaps[0, i, :] = s
            mask[0, i] = True
            isnap = 1
        for k in range(nsub):
            dt = min(h, T - k * h)
            if dt < 0.0:
                dt = 0.0
            _rates(order, L, vmin, vmax, s, u, k1)
            for q in range(d):
                tmp[q] = s[q] + 0.5 * dt * k1[q]
            _rates(order, L, vmin, vmax, tmp, u, k2)
            for q in range(d):
                tmp[q] = s[q] + 0.5 * dt * k2[q]
            _rates(order, L, vmin, vmax, tmp, u, k3)
            for q in range(d):
                tmp[q] = s[q] + dt * k3[q]
            _rates(order, L, vmin, vmax, tmp, u, k4)
            for q in range(d):
                s[q] = s[q] + (dt / 6.0) * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
            s[2] = _wrap(s[2])
            if order == 2:
                s[3] = min(max(s[3], vmin), vmax)
                s[4] = min(max(s[4], vmin), vmax)
            if every > 0 and (k + 1) % every == 0:
                snaps[isnap, i, :] = s
                mask[isnap, i] = True
                isnap += 1
        ends[i, :] = s
        if every > 0:
            # pad unused snapshot slots with the end state, flagged invalid
            for j in range(isnap, snaps.shape[0]):
                snaps[j, i, :] = s
                mask[j, i] = j == snaps.shape[0] - 1


def propagate_batch(spec: SystemSpec, starts, controls, durations, sample_dt: float | None = None):
    """Integrate many constant-control steps with fixed-step RK4.

    The last substep of each step is shortened so the total time is exact;
    headings are wrapped and (second order) wheel velocities clamped after
    every substep.

    Args:
        spec: system parameters.
        starts: ``(n, state_dim)`` start states, or a single state to broadcast.
        controls: ``(n, 2)`` controls.
        durations: ``(n,)`` durations, each within ``[t_min, t_max]``.
        sample_dt: if given, also return the trajectory sampled every
            ``sample_dt`` seconds (rounded to a whole number of substeps).

    Returns:
        ``(n, state_dim)`` end states.  With ``sample_dt`` the result is
        ``(ends, snaps, mask)`` where ``snaps`` is ``(k, n, state_dim)`` and
        ``mask[j, i]`` tells whether snapshot ``j`` lies on step ``i``.
    """
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    durations = np.atleast_1d(np.asarray(durations, dtype=float))
    n = max(len(controls), len(durations))
    controls = np.ascontiguousarray(np.broadcast_to(controls, (n, 2)))
    durations = np.ascontiguousarray(np.broadcast_to(durations, (n,)))
    spec.check_step(durations)
    starts = np.ascontiguousarray(np.broadcast_to(np.asarray(starts, dtype=float), (n, spec.state_dim)))
    lo, hi = spec.control_bounds
    u = np.clip(controls, lo, hi)
    h = spec.integ_step
    ends = np.empty((n, spec.state_dim))
    every = max(1, int(round(sample_dt / h))) if sample_dt else 0
    if every and n:
        nsub = int(math.ceil(float(durations.max()) / h - 1e-9))
        k = nsub // every + 2
    else:
        k = 0
    snaps = np.zeros((k, n, spec.state_dim))
    mask = np.zeros((k, n), dtype=np.bool_)
    _rk4_kernel(spec.order, spec.axle_length, spec.v_min, spec.v_max, h,
                starts, u, durations, every, ends, snaps, mask)
    if every:
        return ends, snaps, mask
    return ends


def propagate(spec: SystemSpec, start, step: PropagationStep) -> np.ndarray:
    """Propagate a single state under ``step``; deterministic."""
    ctrl, duration = step
    return propagate_batch(spec, np.asarray(start, dtype=float)[None, :], [ctrl], [duration])[0]


def d_E(s, s2):
    s, s2 = np.asarray(s, dtype=float), np.asarray(s2, dtype=float)
    return np.hypot(s[..., 0] - s2[..., 0], s[..., 1] - s2[..., 1])


def angle_diff(a, b, identify_antipodal: bool = False):
    """Minimal absolute difference between headings, in ``[0, pi]``."""
    d = np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    if identify_antipodal:
        d = np.minimum(d, math.pi - d)
    return d


def d_R(s, s2, identify_antipodal: bool = False):
    s, s2 = np.asarray(s, dtype=float), np.asarray(s2, dtype=float)
    return angle_diff(s[..., 2], s2[..., 2], identify_antipodal)


def d_V(s, s2):
    s, s2 = np.asarray(s, dtype=float), np.asarray(s2, dtype=float)
    return np.hypot(s[..., 3] - s2[..., 3], s[..., 4] - s2[..., 4])


def within_eps(s, s2, eps: Epsilons, identify_antipodal: bool = False):
    s, s2 = np.asarray(s, dtype=float), np.asarray(s2, dtype=float)
    if s.shape[-1] != s2.shape[-1]:
        raise ValueError("states must be of the same order")
    ok = (d_E(s, s2) < eps.eps_E) & (d_R(s, s2, identify_antipodal) < eps.eps_R)
    if s.shape[-1] == 5:
        ok = ok & (d_V(s, s2) < eps.eps_V)
    return ok


def transform_to_origin(anchor, target) -> np.ndarray:
    """Express ``target`` in ``anchor``'s body frame.

    Returns ``[dx, dy, dtheta]`` for first-order states and
    ``[dx, dy, dtheta, vl_goal, vr_goal, vl_init, vr_init]`` for second order.
    """
    a, t = np.asarray(anchor, dtype=float), np.asarray(target, dtype=float)
    if a.shape != t.shape:
        raise ValueError("anchor and target must have the same order")
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    ex, ey = t[..., 0] - a[..., 0], t[..., 1] - a[..., 1]
    parts = [c * ex + s * ey, -s * ex + c * ey, wrap_angle(t[..., 2] - a[..., 2])]
    if a.shape[-1] == 5:
        parts += [t[..., 3], t[..., 4], a[..., 3], a[..., 4]]
    return np.stack(parts, axis=-1)


def transform_from_origin(anchor, delta) -> np.ndarray:
    """Inverse of :func:`transform_to_origin`: recover the target state."""
    a, d = np.asarray(anchor, dtype=float), np.asarray(delta, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    parts = [
        a[..., 0] + c * d[..., 0] - s * d[..., 1],
        a[..., 1] + s * d[..., 0] + c * d[..., 1],
        wrap_angle(a[..., 2] + d[..., 2]),
    ]
    if a.shape[-1] == 5:
        parts += [d[..., 3], d[..., 4]]
    return np.stack(parts, axis=-1)


def origin_state(spec: SystemSpec, init_vel=None) -> np.ndarray:
    """Canonical anchor: the origin pose, with ``init_vel`` for second order."""
    if spec.order == 1:
        return np.zeros(3)
    vl, vr = (0.0, 0.0) if init_vel is None else init_vel
    return np.array([0.0, 0.0, 0.0, vl, vr])
