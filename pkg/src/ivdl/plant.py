"""dq-frame averaged model of a three-phase VSI with LCR filter and load.

The model is the four-state filter dynamics (inductor current and bus
voltage in dq) plus, for inductive loads, a two-state load current.  The
third-order damping branch is folded into the correction coefficient
``m`` applied to the filter capacitance.  Actions are continuous inverter
voltage commands held over one control period (zero-order hold);
switching ripple is not modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._accel import rk4_step


class SimulationDiverged(RuntimeError):
    """Integration produced a non-finite state.

    Carries the last finite state so callers can terminate gracefully.
    """

    def __init__(self, last_state: "PlantState"):
        super().__init__("plant state diverged (non-finite values)")
        self.last_state = last_state


@dataclass(frozen=True)
class CircuitParams:
    """Physical constants of the inverter and filter.

    ``c_dclink`` is listed for completeness but unused by the averaged
    model, which treats the DC link as an ideal stiff source.  ``m`` is
    derived from the damping branch and never supplied directly.
    """

    v_dc: float = 650.0
    v_line: float = 380.0
    c_dclink: float = 2000e-6
    l_f: float = 1.1e-3
    c_f: float = 19.2e-6
    r_damp: float = 3.0
    f_sw: float = 1e4
    omega: float = 2.0 * math.pi * 50.0
    m: float = field(init=False)

    def __post_init__(self):
        for name in ("v_dc", "v_line", "c_dclink", "l_f", "c_f", "r_damp", "f_sw", "omega"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"CircuitParams.{name} must be > 0")
        m = 1.0 / math.sqrt(1.0 + (self.omega * self.c_f * self.r_damp) ** 2)
        object.__setattr__(self, "m", m)

    @property
    def v_max(self) -> float:
        """SVPWM linear-region voltage limit."""
        return self.v_dc / math.sqrt(3.0)

    @property
    def u_ref_nominal(self) -> float:
        """Peak phase voltage of the nominal line voltage."""
        return self.v_line * math.sqrt(2.0) / math.sqrt(3.0)


@dataclass(frozen=True)
class LoadParams:
    """Series R (ohms) and L (henries); l = 0 means purely resistive."""

    r: float
    l: float = 0.0

    def __post_init__(self):
        if not self.r > 0.0:
            raise ValueError("load resistance must be > 0")
        if self.l < 0.0:
            raise ValueError("load inductance must be >= 0")


class LoadSchedule:
    """Piecewise-constant load: ordered (time, LoadParams) steps, first at t=0.

    Switch times that fall inside a control period are snapped to the next
    period boundary when resolved with :meth:`active`.
    """

    def __init__(self, steps):
        steps = list(steps)
        if not steps:
            raise ValueError("load schedule must be non-empty")
        if abs(steps[0][0]) > 1e-12:
            raise ValueError("first load segment must start at t=0")
        times = [t for t, _ in steps]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("load switch times must be strictly increasing")
        self.steps = [(float(t), load) for t, load in steps]

    def active(self, t: float, ts: float) -> LoadParams:
        """Load in effect for the control period starting at t."""
        current = self.steps[0][1]
        for t_switch, load in self.steps[1:]:
            effective = math.ceil(t_switch / ts - 1e-9) * ts
            if effective <= t + 1e-6 * ts:
                current = load
            else:
                break
        return current

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class PlantState:
    i_ld: float = 0.0
    i_lq: float = 0.0
    u_bus_d: float = 0.0
    u_bus_q: float = 0.0
    i_load_d: float = 0.0
    i_load_q: float = 0.0
    t: float = 0.0
    prev_i_ld: float = 0.0
    prev_i_lq: float = 0.0

    def as_vector(self) -> np.ndarray:
        """Core dynamic state [i_ld, i_lq, u_bus_d, u_bus_q, i_load_d, i_load_q]."""
        return np.array([self.i_ld, self.i_lq, self.u_bus_d, self.u_bus_q,
                         self.i_load_d, self.i_load_q])

    @property
    def delta_i_l(self) -> np.ndarray:
        """Inductor-current increment over the last control step."""
        return np.array([self.i_ld - self.prev_i_ld, self.i_lq - self.prev_i_lq])


@dataclass(frozen=True)
class PlantAction:
    u_inv_d: float = 0.0
    u_inv_q: float = 0.0

    @property
    def magnitude(self) -> float:
        return math.hypot(self.u_inv_d, self.u_inv_q)


def load_current(state: PlantState, load: LoadParams) -> tuple[float, float]:
    """Instantaneous load (output) current in dq."""
    if load.l > 0.0:
        return state.i_load_d, state.i_load_q
    return state.u_bus_d / load.r, state.u_bus_q / load.r


def derivative(state: PlantState, action: PlantAction, load: LoadParams,
               p: CircuitParams) -> np.ndarray:
    """Time-derivative of the core state vector (see PlantState.as_vector)."""
    m_cf = p.m * p.c_f
    io_d, io_q = load_current(state, load)
    d_ild = (action.u_inv_d - state.u_bus_d + p.omega * p.l_f * state.i_lq) / p.l_f
    d_ilq = (action.u_inv_q - state.u_bus_q - p.omega * p.l_f * state.i_ld) / p.l_f
    d_ud = (state.i_ld - io_d + p.omega * m_cf * state.u_bus_q) / m_cf
    d_uq = (state.i_lq - io_q - p.omega * m_cf * state.u_bus_d) / m_cf
    if load.l > 0.0:
        d_iod = (state.u_bus_d - load.r * state.i_load_d
                 + p.omega * load.l * state.i_load_q) / load.l
        d_ioq = (state.u_bus_q - load.r * state.i_load_q
                 - p.omega * load.l * state.i_load_d) / load.l
    else:
        d_iod = d_ioq = 0.0
    return np.array([d_ild, d_ilq, d_ud, d_uq, d_iod, d_ioq])


def saturate_action(raw: PlantAction, p: CircuitParams) -> PlantAction:
    """Clamp the voltage command magnitude to v_dc/sqrt(3), preserving angle."""
    mag = raw.magnitude
    limit = p.v_max
    if mag <= limit:
        return raw
    scale = limit / mag
    return PlantAction(raw.u_inv_d * scale, raw.u_inv_q * scale)


def reset(p: CircuitParams, initial: PlantState | None = None) -> PlantState:
    """Zero state (or the supplied one) with prev currents synced and t = 0."""
    if initial is None:
        return PlantState()
    return replace(initial, t=0.0, prev_i_ld=initial.i_ld, prev_i_lq=initial.i_lq)


def step_core(x: np.ndarray, u_d: float, u_q: float, load: LoadParams,
              p: CircuitParams, dt: float, substeps: int) -> np.ndarray:
    """Advance the raw core vector by dt under a constant action (RK4)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    new = rk4_step(x, float(u_d), float(u_q), load.r, load.l,
                   p.l_f, p.m * p.c_f, p.omega, float(dt), int(substeps))
    if load.l == 0.0:
        # keep the (inert) load-current slots consistent with the algebraic law
        new[4] = new[2] / load.r
        new[5] = new[3] / load.r
    return new


def step(state: PlantState, action: PlantAction, schedule: LoadSchedule,
         p: CircuitParams, dt: float, substeps: int = 10) -> PlantState:
    """Advance the plant one control period.

    The action is held constant over the period, the load is resolved from
    the schedule at the period start, and prev_i_* records the pre-step
    inductor current for the damping term.  Raises SimulationDiverged
    (carrying the last finite state) if integration blows up.
    """
    if dt <= 0.0 or substeps < 1:
        raise ValueError("dt must be > 0 and substeps >= 1")
    load = schedule.active(state.t, dt)
    new = step_core(state.as_vector(), action.u_inv_d, action.u_inv_q,
                    load, p, dt, substeps)
    if not np.all(np.isfinite(new)):
        raise SimulationDiverged(state)
    return PlantState(
        i_ld=new[0], i_lq=new[1], u_bus_d=new[2], u_bus_q=new[3],
        i_load_d=new[4], i_load_q=new[5],
        t=state.t + dt, prev_i_ld=state.i_ld, prev_i_lq=state.i_lq,
    )


def steady_load_current(u_d: float, u_q: float, load: LoadParams,
                        p: CircuitParams) -> tuple[float, float]:
    """Load current drawn at a constant dq bus voltage.

    Exact for resistive loads; for RL loads this is the sinusoidal
    steady-state phasor solution.
    """
    if load.l == 0.0:
        return u_d / load.r, u_q / load.r
    x = p.omega * load.l
    denom = load.r**2 + x**2
    return (load.r * u_d + x * u_q) / denom, (load.r * u_q - x * u_d) / denom


def steady_state(ref_d: float, ref_q: float, load: LoadParams,
                 p: CircuitParams) -> tuple[PlantState, PlantAction]:
    """Equilibrium state and the feedforward action holding the bus at ref.

    Obtained by setting every derivative in the dq model to zero and
    solving backwards from the bus voltage.
    """
    io_d, io_q = steady_load_current(ref_d, ref_q, load, p)
    m_cf = p.m * p.c_f
    i_ld = io_d - p.omega * m_cf * ref_q
    i_lq = io_q + p.omega * m_cf * ref_d
    u_inv_d = ref_d - p.omega * p.l_f * i_lq
    u_inv_q = ref_q + p.omega * p.l_f * i_ld
    state = PlantState(i_ld=i_ld, i_lq=i_lq, u_bus_d=ref_d, u_bus_q=ref_q,
                       i_load_d=io_d, i_load_q=io_q,
                       prev_i_ld=i_ld, prev_i_lq=i_lq)
    return state, PlantAction(u_inv_d, u_inv_q)


def linearize_step(load: LoadParams, p: CircuitParams, dt: float,
                   substeps: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """One-period transition matrices (A, B) of the fixed-load step map.

    The map x -> step_core(x, u) is linear for a fixed load segment, so
    probing with basis vectors recovers it exactly: next = A @ x + B @ u.
    """
    a = np.empty((6, 6))
    b = np.empty((6, 2))
    for j in range(6):
        e = np.zeros(6)
        e[j] = 1.0
        a[:, j] = step_core(e, 0.0, 0.0, load, p, dt, substeps)
    for j in range(2):
        u = [0.0, 0.0]
        u[j] = 1.0
        b[:, j] = step_core(np.zeros(6), u[0], u[1], load, p, dt, substeps)
    return a, b
