"""MDP wrapper around the plant: observations, reward stack, episode loop.

Rewards follow the hybrid scheme: a Lyapunov-increment penalty (tracking
error potential plus a current-increment damping term), a quadratic
tracking penalty, a soft over-current barrier and a THD ceiling.  All
reward components are computed on raw physical quantities; observations
are normalized to [-1, 1] for the networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from ._accel import goertzel_mags
from .plant import (CircuitParams, LoadParams, LoadSchedule, PlantAction,
                    PlantState, SimulationDiverged)
from .signal import inverse_park_arrays


@dataclass(frozen=True)
class RewardConfig:
    k1: float = 1e-6
    k2: float = 1e-3
    k3: float = 1e-5
    k4: float = 1e-4
    beta: float = 1.0          # damping weight in the Lyapunov candidate
    i_max: float = 20.0        # amps, soft over-current threshold
    thd_limit: float = 5.0     # percent
    diverged_floor: float = -10.0

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4, self.beta) < 0.0:
            raise ValueError("reward weights must be >= 0")
        if not self.i_max > 0.0:
            raise ValueError("i_max must be > 0")


@dataclass(frozen=True)
class RewardBreakdown:
    v_k: float
    delta_v: float
    r1: float
    r2: float
    r3: float
    r4: float
    total: float
    thd_estimate: float


def lyapunov(e_u, delta_i_l, beta: float) -> float:
    """Damping-augmented candidate: 0.5*||e_u||^2 + (beta/2)*||delta_i_L||^2."""
    e_u = np.asarray(e_u, dtype=float)
    delta_i_l = np.asarray(delta_i_l, dtype=float)
    return 0.5 * float(e_u @ e_u) + 0.5 * beta * float(delta_i_l @ delta_i_l)


def reward(prev_v: float, e_u, delta_i_l, i_l, cfg: RewardConfig,
           thd_estimate: float = 0.0) -> RewardBreakdown:
    """Per-step reward decomposition for the post-step state."""
    if prev_v < 0.0:
        raise ValueError("prev_v must be >= 0")
    e_u = np.asarray(e_u, dtype=float)
    i_l = np.asarray(i_l, dtype=float)
    v_k = lyapunov(e_u, delta_i_l, cfg.beta)
    delta_v = v_k - prev_v
    r1 = -cfg.k1 * max(0.0, delta_v)
    r2 = -cfg.k2 * float(e_u @ e_u)
    r3 = -cfg.k3 * max(0.0, float(i_l @ i_l) - cfg.i_max**2)
    r4 = -cfg.k4 * max(0.0, thd_estimate - cfg.thd_limit)
    return RewardBreakdown(
        v_k=v_k, delta_v=delta_v, r1=r1, r2=r2, r3=r3, r4=r4,
        total=r1 + r2 + r3 + r4, thd_estimate=thd_estimate,
    )


@dataclass(frozen=True)
class NormConstants:
    """Per-channel normalization divisors for the observation vector."""

    error_scale: float
    voltage_scale: float
    current_scale: float

    @classmethod
    def defaults(cls, p: CircuitParams, ref, i_max: float) -> "NormConstants":
        return cls(
            error_scale=float(np.hypot(ref[0], ref[1])),
            voltage_scale=p.v_max,
            current_scale=i_max,
        )


@dataclass(frozen=True)
class Observation:
    e_ud: float
    e_uq: float
    u_bus_d: float
    u_bus_q: float
    i_ld: float
    i_lq: float
    normalized: np.ndarray

    @property
    def raw(self) -> np.ndarray:
        return np.array([self.e_ud, self.e_uq, self.u_bus_d, self.u_bus_q,
                         self.i_ld, self.i_lq])


def observe(state: PlantState, ref, norm: NormConstants) -> Observation:
    """Observation per the state-vector definition, raw plus normalized."""
    e_ud = ref[0] - state.u_bus_d
    e_uq = ref[1] - state.u_bus_q
    normalized = np.clip(
        np.array([
            e_ud / norm.error_scale,
            e_uq / norm.error_scale,
            state.u_bus_d / norm.voltage_scale,
            state.u_bus_q / norm.voltage_scale,
            state.i_ld / norm.current_scale,
            state.i_lq / norm.current_scale,
        ]),
        -1.0, 1.0,
    )
    return Observation(e_ud, e_uq, state.u_bus_d, state.u_bus_q,
                       state.i_ld, state.i_lq, normalized)


@dataclass(frozen=True)
class EpisodeConfig:
    duration: float = 0.1
    ts: float = 1e-4
    ref: tuple[float, float] = (380.0 * math.sqrt(2.0 / 3.0), 0.0)
    schedule: LoadSchedule | None = None
    random_init: bool = False
    init_voltage_jitter: float = 0.1
    init_loads: tuple[float, ...] = (50.0, 100.0, 200.0)
    l_f_scale: float = 1.0
    c_f_scale: float = 1.0

    def __post_init__(self):
        steps = self.duration / self.ts
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError("episode duration must be a multiple of ts")

    @property
    def n_steps(self) -> int:
        return round(self.duration / self.ts)


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class InverterEnv:
    """Single-owner episodic environment at the control period ts.

    Policy actions live in [-1, 1]^2 and are scaled by v_dc/sqrt(3) to
    voltage commands, then saturated.  Identical seed and config produce
    bit-identical transition streams.
    """

    def __init__(self, circuit: CircuitParams, reward_cfg: RewardConfig,
                 episode: EpisodeConfig, norm: NormConstants | None = None,
                 substeps: int = 10, max_harmonic: int = 50, seed: int | None = 0):
        if np.hypot(*episode.ref) > circuit.v_max + 1e-9:
            raise ValueError("reference magnitude exceeds the actuation limit")
        self.nominal = circuit
        # Case-3 style parameter perturbation applies to the plant only;
        # normalization and action scaling keep nominal values.
        if episode.l_f_scale != 1.0 or episode.c_f_scale != 1.0:
            self.circuit = CircuitParams(
                v_dc=circuit.v_dc, v_line=circuit.v_line, c_dclink=circuit.c_dclink,
                l_f=circuit.l_f * episode.l_f_scale,
                c_f=circuit.c_f * episode.c_f_scale,
                r_damp=circuit.r_damp, f_sw=circuit.f_sw, omega=circuit.omega,
            )
        else:
            self.circuit = circuit
        self.reward_cfg = reward_cfg
        self.episode = episode
        self.ref = np.array(episode.ref, dtype=float)
        self.norm = norm or NormConstants.defaults(circuit, self.ref, reward_cfg.i_max)
        self.substeps = substeps
        self.rng = np.random.default_rng(seed)
        # sliding THD window: two fundamental cycles of reconstructed
        # phase-a output current, evaluated at integer harmonic bins
        f1 = circuit.omega / (2.0 * math.pi)
        self._win_len = round(2.0 / (f1 * episode.ts))
        self._bins = np.arange(1, max_harmonic + 1, dtype=np.int64) * 2
        self._window = np.zeros(self._win_len)
        self._win_fill = 0
        self._win_pos = 0
        self._state: PlantState | None = None
        self._schedule: LoadSchedule | None = None
        self._prev_v = 0.0
        self._step_idx = 0
        self._done = True
        self.last_io = (0.0, 0.0)

    @property
    def n_steps(self) -> int:
        return self.episode.n_steps

    @property
    def state(self) -> PlantState:
        return self._state

    @property
    def schedule(self) -> LoadSchedule:
        return self._schedule

    def reset(self, initial: PlantState | None = None) -> Observation:
        ep = self.episode
        if ep.schedule is not None:
            self._schedule = ep.schedule
        else:
            r = float(self.rng.choice(np.asarray(ep.init_loads, dtype=float))) \
                if ep.random_init else float(ep.init_loads[-1])
            self._schedule = LoadSchedule([(0.0, LoadParams(r=r))])
        if initial is None and ep.random_init:
            # Half the episodes start from the zero state (cold start /
            # startup transient); the rest start on a jittered equilibrium,
            # which keeps per-step rewards in the range the critics can
            # track.  Current states are drawn consistently with the bus
            # voltage so the episode begins near-physical.
            jitter = 1.0 + ep.init_voltage_jitter * self.rng.uniform(-1.0, 1.0)
            cold_start = self.rng.random() < 0.5
            if not cold_start:
                u0 = jitter * self.ref
                load0 = self._schedule.active(0.0, ep.ts)
                eq, _ = plant_mod.steady_state(u0[0], u0[1], load0, self.circuit)
                initial = eq
        self._state = plant_mod.reset(self.circuit, initial)
        e0 = self.ref - np.array([self._state.u_bus_d, self._state.u_bus_q])
        self._prev_v = lyapunov(e0, self._state.delta_i_l, self.reward_cfg.beta)
        self._window[:] = 0.0
        self._win_fill = 0
        self._win_pos = 0
        self._step_idx = 0
        self._done = False
        self.last_io = (0.0, 0.0)
        return observe(self._state, self.ref, self.norm)

    def _push_thd_sample(self, state: PlantState, load: LoadParams) -> float:
        io_d, io_q = plant_mod.load_current(state, load)
        self.last_io = (io_d, io_q)
        theta = self.circuit.omega * state.t
        i_a, _, _ = inverse_park_arrays(io_d, io_q, theta)
        self._window[self._win_pos] = i_a
        self._win_pos = (self._win_pos + 1) % self._win_len
        if self._win_fill < self._win_len:
            self._win_fill += 1
            return 0.0
        # harmonic magnitudes are rotation-invariant, so the ring buffer
        # can be analyzed in place
        amps = goertzel_mags(self._window, self._bins)
        a1 = amps[0]
        if a1 <= 1e-9:
            return 0.0
        return 100.0 * float(np.sqrt(np.sum(amps[1:] ** 2))) / float(a1)

    def step(self, action) -> tuple[Transition, RewardBreakdown]:
        """Apply a policy action in [-1, 1]^2 (scaled and saturated)."""
        action = np.asarray(action, dtype=float)
        volts = plant_mod.saturate_action(
            PlantAction(action[0] * self.nominal.v_max, action[1] * self.nominal.v_max),
            self.nominal,
        )
        return self.step_volts(volts, policy_action=action)

    def step_volts(self, volts: PlantAction,
                   policy_action=None) -> tuple[Transition, RewardBreakdown]:
        """Apply a voltage command directly (no scaling or saturation).

        Baseline controllers that own their actuation limits (or, for
        FCS-MPC, deliberately exceed the SVPWM linear region) enter here.
        """
        if self._done:
            raise RuntimeError("episode is finished; call reset()")
        if policy_action is None:
            policy_action = np.array([volts.u_inv_d, volts.u_inv_q]) / self.nominal.v_max
        action = np.asarray(policy_action, dtype=float)
        obs_before = observe(self._state, self.ref, self.norm)
        load = self._schedule.active(self._state.t, self.episode.ts)
        try:
            new_state = plant_mod.step(self._state, volts, self._schedule,
                                       self.circuit, self.episode.ts, self.substeps)
            # overflow guard: terminate before squared quantities go non-finite
            if np.max(np.abs(new_state.as_vector())) > 1e9:
                raise SimulationDiverged(self._state)
        except SimulationDiverged as exc:
            self._state = exc.last_state
            self._done = True
            floor = self.reward_cfg.diverged_floor
            breakdown = RewardBreakdown(
                v_k=self._prev_v, delta_v=0.0, r1=0.0, r2=floor, r3=0.0, r4=0.0,
                total=floor, thd_estimate=0.0,
            )
            obs_after = observe(self._state, self.ref, self.norm)
            tr = Transition(obs=obs_before.normalized, action=action.copy(),
                            reward=floor, next_obs=obs_after.normalized, done=True)
            return tr, breakdown

        self._state = new_state
        self._step_idx += 1
        thd_est = self._push_thd_sample(new_state, load)
        e_u = self.ref - np.array([new_state.u_bus_d, new_state.u_bus_q])
        i_l = np.array([new_state.i_ld, new_state.i_lq])
        breakdown = reward(self._prev_v, e_u, new_state.delta_i_l, i_l,
                           self.reward_cfg, thd_est)
        self._prev_v = breakdown.v_k
        self._done = self._step_idx >= self.n_steps
        obs_after = observe(new_state, self.ref, self.norm)
        tr = Transition(obs=obs_before.normalized, action=action.copy(),
                        reward=breakdown.total, next_obs=obs_after.normalized,
                        done=self._done)
        return tr, breakdown
