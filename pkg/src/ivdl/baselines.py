"""Conventional comparison controllers.

* Dual-loop PI: outer voltage loop producing an inductor-current
  reference (with capacitive cross-coupling and measured load-current
  feedforward), inner current loop producing the voltage command (with
  inductive decoupling and bus-voltage feedforward).  Conditional
  integration freezes each loop's integrator while its output saturates.
* Single-step finite-control-set MPC over the eight two-level inverter
  vectors, with exact zero-order-hold prediction of the bus voltage.

Both controllers assume nominal circuit parameters; robustness scenarios
run them against a perturbed plant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .plant import (CircuitParams, LoadParams, LoadSchedule, PlantAction,
                    PlantState, load_current, saturate_action)
from .signal import park_arrays


@dataclass(frozen=True)
class Measurement:
    """Raw dq quantities a hardware controller would sample."""

    u_bus_d: float
    u_bus_q: float
    i_ld: float
    i_lq: float
    i_od: float
    i_oq: float

    @classmethod
    def from_state(cls, state: PlantState, load: LoadParams) -> "Measurement":
        io_d, io_q = load_current(state, load)
        return cls(state.u_bus_d, state.u_bus_q, state.i_ld, state.i_lq,
                   io_d, io_q)


@dataclass(frozen=True)
class PiGains:
    """Loop-shaping tune: inner current loop at f_sw/20, outer at inner/5.

    For integrator plants 1/(s*L_f) and 1/(s*m*C_f) the proportional gain
    places the crossover and the integral zero sits a decade below it.
    """

    kp_v: float
    ki_v: float
    kp_i: float
    ki_i: float
    i_limit: float = 30.0  # outer-loop current-reference clamp, amps

    @classmethod
    def tuned(cls, p: CircuitParams, i_limit: float = 30.0) -> "PiGains":
        w_i = 2.0 * math.pi * p.f_sw / 20.0
        w_v = w_i / 5.0
        kp_i = w_i * p.l_f
        ki_i = kp_i * w_i / 10.0
        kp_v = w_v * p.m * p.c_f
        ki_v = kp_v * w_v / 10.0
        return cls(kp_v=kp_v, ki_v=ki_v, kp_i=kp_i, ki_i=ki_i, i_limit=i_limit)


def _clamp_vector(x: np.ndarray, limit: float) -> tuple[np.ndarray, bool]:
    mag = float(np.hypot(x[0], x[1]))
    if mag <= limit:
        return x, False
    return x * (limit / mag), True


class PiController:
    """Stateful dual-loop PI; one instance per rollout."""

    def __init__(self, p: CircuitParams, gains: PiGains | None = None):
        self.p = p
        self.gains = gains or PiGains.tuned(p)
        self.integ_v = np.zeros(2)
        self.integ_i = np.zeros(2)

    def reset(self) -> None:
        self.integ_v[:] = 0.0
        self.integ_i[:] = 0.0

    def step(self, meas: Measurement, ref, ts: float) -> PlantAction:
        g = self.gains
        p = self.p
        e_v = np.array([ref[0] - meas.u_bus_d, ref[1] - meas.u_bus_q])
        w_mcf = p.omega * p.m * p.c_f
        i_ref = np.array([
            meas.i_od - w_mcf * meas.u_bus_q,
            meas.i_oq + w_mcf * meas.u_bus_d,
        ]) + g.kp_v * e_v + self.integ_v
        i_ref, outer_saturated = _clamp_vector(i_ref, g.i_limit)

        e_i = i_ref - np.array([meas.i_ld, meas.i_lq])
        w_lf = p.omega * p.l_f
        u = np.array([
            meas.u_bus_d - w_lf * meas.i_lq,
            meas.u_bus_q + w_lf * meas.i_ld,
        ]) + g.kp_i * e_i + self.integ_i
        raw = PlantAction(u[0], u[1])
        action = saturate_action(raw, p)
        inner_saturated = action is not raw

        # conditional integration: hold each integrator while its loop output
        # is clipped
        if not outer_saturated:
            self.integ_v += g.ki_v * e_v * ts
        if not inner_saturated:
            self.integ_i += g.ki_i * e_i * ts
        return action


def candidate_vectors(v_dc: float) -> np.ndarray:
    """Phase voltages (8 x 3) of the two-level switch states.

    Index is the binary switch word (S_a << 2) | (S_b << 1) | S_c, so 0 and
    7 are the zero vectors and the six active vectors have magnitude
    (2/3) * v_dc.
    """
    out = np.empty((8, 3))
    for idx in range(8):
        sa, sb, sc = (idx >> 2) & 1, (idx >> 1) & 1, idx & 1
        out[idx, 0] = v_dc * (2 * sa - sb - sc) / 3.0
        out[idx, 1] = v_dc * (2 * sb - sa - sc) / 3.0
        out[idx, 2] = v_dc * (2 * sc - sa - sb) / 3.0
    return out


@dataclass(frozen=True)
class FcsMpcConfig:
    horizon: int = 1  # single-step lookahead only
    voltage_weight: float = 1.0
    current_weight: float = 0.0

    def __post_init__(self):
        if self.horizon != 1:
            raise ValueError("only the single-step horizon is supported")


def continuous_matrices(load: LoadParams, p: CircuitParams):
    """Continuous (A, B) of the dq model for one load segment.

    4 states for resistive loads (load current algebraic), 6 for RL.
    State order matches PlantState.as_vector truncated to n.
    """
    mc = p.m * p.c_f
    if load.l == 0.0:
        a = np.array([
            [0.0, p.omega, -1.0 / p.l_f, 0.0],
            [-p.omega, 0.0, 0.0, -1.0 / p.l_f],
            [1.0 / mc, 0.0, -1.0 / (load.r * mc), p.omega],
            [0.0, 1.0 / mc, -p.omega, -1.0 / (load.r * mc)],
        ])
        b = np.array([[1.0 / p.l_f, 0.0], [0.0, 1.0 / p.l_f],
                      [0.0, 0.0], [0.0, 0.0]])
        return a, b
    a = np.zeros((6, 6))
    a[0, 1] = p.omega
    a[0, 2] = -1.0 / p.l_f
    a[1, 0] = -p.omega
    a[1, 3] = -1.0 / p.l_f
    a[2, 0] = 1.0 / mc
    a[2, 3] = p.omega
    a[2, 4] = -1.0 / mc
    a[3, 1] = 1.0 / mc
    a[3, 2] = -p.omega
    a[3, 5] = -1.0 / mc
    a[4, 2] = 1.0 / load.l
    a[4, 4] = -load.r / load.l
    a[4, 5] = p.omega
    a[5, 3] = 1.0 / load.l
    a[5, 4] = -p.omega
    a[5, 5] = -load.r / load.l
    b = np.zeros((6, 2))
    b[0, 0] = 1.0 / p.l_f
    b[1, 1] = 1.0 / p.l_f
    return a, b


def zoh_discretize(a: np.ndarray, b: np.ndarray, dt: float):
    """Exact zero-order-hold discretization via the augmented exponential."""
    n, k = b.shape
    m = np.zeros((n + k, n + k))
    m[:n, :n] = a
    m[:n, n:] = b
    e = expm(m * dt)
    return np.ascontiguousarray(e[:n, :n]), np.ascontiguousarray(e[:n, n:])


class FcsMpcController:
    """Exhaustive one-step cost minimization over the 8 discrete vectors.

    The chosen vector (rotated into dq at the current electrical angle) is
    held over the full control period in the averaged model.
    """

    def __init__(self, p: CircuitParams, cfg: FcsMpcConfig | None = None):
        self.p = p
        self.cfg = cfg or FcsMpcConfig()
        self._abc = candidate_vectors(p.v_dc)
        self._disc_cache: dict[tuple[float, float, float], tuple] = {}

    def reset(self) -> None:
        pass  # stateless

    def _discrete(self, load: LoadParams, ts: float):
        key = (load.r, load.l, ts)
        if key not in self._disc_cache:
            a, b = continuous_matrices(load, self.p)
            self._disc_cache[key] = zoh_discretize(a, b, ts)
        return self._disc_cache[key]

    def step(self, state: PlantState, ref, schedule: LoadSchedule,
             ts: float) -> PlantAction:
        load = schedule.active(state.t, ts)
        ad, bd = self._discrete(load, ts)
        n = ad.shape[0]
        x = state.as_vector()[:n]
        theta = self.p.omega * state.t
        d, q = park_arrays(self._abc[:, 0], self._abc[:, 1], self._abc[:, 2],
                           theta)
        cand = np.column_stack([d, q])            # (8, 2)
        pred = x @ ad.T + cand @ bd.T             # (8, n)
        cost = self.cfg.voltage_weight * ((ref[0] - pred[:, 2]) ** 2
                                          + (ref[1] - pred[:, 3]) ** 2)
        if self.cfg.current_weight > 0.0:
            cost = cost + self.cfg.current_weight * (pred[:, 0] ** 2
                                                     + pred[:, 1] ** 2)
        best = int(np.argmin(cost))  # argmin takes the lowest index on ties
        return PlantAction(cand[best, 0], cand[best, 1])
