"""Scenario definitions, closed-loop rollouts, metrics and report files.

Metric conventions (windows chosen once, used for every controller):
* SSE: |mean(||u_ref|| - ||u_bus||)| over the final two fundamental cycles.
* Relative overshoot: max |deviation| of the voltage magnitude (over- or
  undershoot) in the 0.1 s following the last load-switch event, in
  percent of the reference.
* THD: phase-a reconstruction of bus voltage / output current over the
  final two cycles, harmonics up to the 50th.
* Settle time: first instant after the event from which the magnitude
  deviation stays within 1 % of the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import mlp_forward
from .baselines import FcsMpcController, Measurement, PiController
from .env import EpisodeConfig, InverterEnv, RewardConfig
from .nn import GaussianPolicyNet, Mlp, estimated_time_us, inference_flops, param_count
from .plant import (CircuitParams, LoadParams, LoadSchedule, PlantAction,
                    steady_state)
from .signal import inverse_park_arrays, thd, unbalance

NOMINAL_REF_D = 380.0 * math.sqrt(2.0 / 3.0)


@dataclass(frozen=True)
class Scenario:
    name: str
    episode: EpisodeConfig
    description: str = ""


def builtin_scenarios() -> dict[str, Scenario]:
    """The benchmark cases plus the steady scenarios used for datasets."""
    ref = (NOMINAL_REF_D, 0.0)
    scenarios = [
        Scenario(
            "case1",
            EpisodeConfig(duration=0.6, ref=ref, schedule=LoadSchedule(
                [(0.0, LoadParams(200.0)), (0.3, LoadParams(50.0))])),
            "severe linear load step 200 -> 50 ohm at 0.3 s",
        ),
        Scenario(
            "case2",
            EpisodeConfig(duration=0.6, ref=ref, schedule=LoadSchedule(
                [(0.0, LoadParams(200.0, 10e-3)), (0.3, LoadParams(50.0, 1e-3))])),
            "RL load switching (200 ohm, 10 mH) -> (50 ohm, 1 mH) at 0.3 s",
        ),
        Scenario(
            "case3",
            EpisodeConfig(duration=0.6, ref=ref, schedule=LoadSchedule(
                [(0.0, LoadParams(100.0)), (0.3, LoadParams(50.0))]),
                l_f_scale=1.2, c_f_scale=0.8),
            "load step 100 -> 50 ohm under L_f +20% / C_f -20% mismatch",
        ),
        Scenario(
            "case3b",
            EpisodeConfig(duration=0.6, ref=ref, schedule=LoadSchedule(
                [(0.0, LoadParams(200.0)), (0.3, LoadParams(50.0))]),
                l_f_scale=1.2, c_f_scale=0.8),
            "200 -> 50 ohm variant of the parameter-mismatch case",
        ),
    ]
    for r in (50.0, 100.0, 200.0):
        scenarios.append(Scenario(
            f"steady{int(r)}",
            EpisodeConfig(duration=0.3, ref=ref,
                          schedule=LoadSchedule([(0.0, LoadParams(r))])),
            f"constant {int(r)} ohm resistive load",
        ))
    scenarios.append(Scenario(
        "steady100_perturbed",
        EpisodeConfig(duration=0.3, ref=ref,
                      schedule=LoadSchedule([(0.0, LoadParams(100.0))]),
                      l_f_scale=1.2, c_f_scale=0.8),
        "constant 100 ohm load with L_f +20% / C_f -20% mismatch",
    ))
    return {s.name: s for s in scenarios}


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------


class PolicyController:
    """Deterministic rollout of a trained policy or distilled student."""

    def __init__(self, net, p: CircuitParams, name: str = "policy"):
        self.name = name
        self.p = p
        self.is_policy = isinstance(net, GaussianPolicyNet)
        if self.is_policy:
            self._flat, self._dims = net.packed_mean()
        elif isinstance(net, Mlp):
            self._flat, self._dims = net.packed()
        else:
            raise TypeError(f"unsupported network type {type(net).__name__}")
        from .nn import _ACT_IDS
        self._act_id = _ACT_IDS[net.spec.hidden_activation]

    def reset(self):
        pass

    def policy_action(self, env: InverterEnv) -> np.ndarray:
        from .env import observe
        obs = observe(env.state, env.ref, env.norm).normalized
        y = mlp_forward(self._flat, self._dims, obs, self._act_id)
        if self.is_policy:
            return np.tanh(y)
        return np.clip(y, -1.0, 1.0)

    def volts(self, env: InverterEnv) -> PlantAction:
        a = self.policy_action(env)
        return PlantAction(a[0] * self.p.v_max, a[1] * self.p.v_max)

    saturate = True


class PiBaseline:
    name = "pi"
    saturate = True

    def __init__(self, p: CircuitParams, gains=None):
        self.inner = PiController(p, gains)

    def reset(self):
        self.inner.reset()

    def volts(self, env: InverterEnv) -> PlantAction:
        load = env.schedule.active(env.state.t, env.episode.ts)
        meas = Measurement.from_state(env.state, load)
        return self.inner.step(meas, env.ref, env.episode.ts)


class FcsMpcBaseline:
    name = "mpc"
    saturate = False  # discrete vectors are applied as-is

    def __init__(self, p: CircuitParams, cfg=None):
        self.inner = FcsMpcController(p, cfg)

    def reset(self):
        self.inner.reset()

    def volts(self, env: InverterEnv) -> PlantAction:
        return self.inner.step(env.state, env.ref, env.schedule,
                               env.episode.ts)


class FeedforwardBaseline:
    """Ideal steady-state inversion; a sanity reference, not a benchmark."""

    name = "feedforward"
    saturate = True

    def __init__(self, p: CircuitParams):
        self.p = p

    def reset(self):
        pass

    def volts(self, env: InverterEnv) -> PlantAction:
        load = env.schedule.active(env.state.t, env.episode.ts)
        _, action = steady_state(env.ref[0], env.ref[1], load, self.p)
        return action


class ZeroBaseline:
    name = "zero"
    saturate = True

    def __init__(self, p: CircuitParams | None = None):
        pass

    def reset(self):
        pass

    def volts(self, env: InverterEnv) -> PlantAction:
        return PlantAction(0.0, 0.0)


# ---------------------------------------------------------------------------
# rollout and metrics
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    scenario: str
    controller: str
    ts: float
    ref: tuple[float, float]
    omega: float
    t: np.ndarray            # (N,) post-step times
    states: np.ndarray       # (N, 6) core state after each step
    volts: np.ndarray        # (N, 2) applied voltage command
    io: np.ndarray           # (N, 2) output (load) current
    rewards: np.ndarray      # (N,) total reward per step
    components: np.ndarray   # (N, 4) r1..r4
    thd_estimates: np.ndarray
    diverged: bool
    event_time: float        # last load-switch instant (0 if none)


def rollout(controller, scenario: Scenario, circuit: CircuitParams,
            reward_cfg: RewardConfig | None = None, substeps: int = 10) -> Trace:
    """Deterministic closed-loop trace of one controller on one scenario."""
    reward_cfg = reward_cfg or RewardConfig()
    env = InverterEnv(circuit, reward_cfg, scenario.episode,
                      substeps=substeps, seed=0)
    env.reset()
    controller.reset()
    n = env.n_steps
    t = np.empty(n)
    states = np.empty((n, 6))
    volts_arr = np.empty((n, 2))
    io = np.empty((n, 2))
    rewards = np.empty(n)
    components = np.empty((n, 4))
    thd_est = np.empty(n)
    diverged = False
    k = 0
    for k in range(n):
        action = controller.volts(env)
        if getattr(controller, "saturate", True):
            tr, br = env.step(np.array([action.u_inv_d, action.u_inv_q])
                              / circuit.v_max)
        else:
            tr, br = env.step_volts(action)
        t[k] = env.state.t
        states[k] = env.state.as_vector()
        volts_arr[k] = (action.u_inv_d, action.u_inv_q)
        io[k] = env.last_io
        rewards[k] = br.total
        components[k] = (br.r1, br.r2, br.r3, br.r4)
        thd_est[k] = br.thd_estimate
        if tr.done and k + 1 < n:
            diverged = True
            break
    end = k + 1
    sched = scenario.episode.schedule
    event = max((tm for tm, _ in sched), default=0.0) if sched is not None else 0.0
    return Trace(
        scenario=scenario.name, controller=getattr(controller, "name", "controller"),
        ts=scenario.episode.ts, ref=tuple(scenario.episode.ref),
        omega=circuit.omega,
        t=t[:end], states=states[:end], volts=volts_arr[:end], io=io[:end],
        rewards=rewards[:end], components=components[:end],
        thd_estimates=thd_est[:end], diverged=diverged, event_time=event,
    )


@dataclass(frozen=True)
class MetricReport:
    sse: float
    thd_voltage: float
    thd_current: float
    relative_overshoot: float
    unbalance: float
    settle_time: float

    FIELDS = ("sse", "thd_voltage", "thd_current", "relative_overshoot",
              "unbalance", "settle_time")


def metrics(trace: Trace, overshoot_window: float = 0.1,
            tail_cycles: int = 2, max_harmonic: int = 50,
            settle_band: float = 0.01) -> MetricReport:
    """Waveform-quality metrics of a rollout trace."""
    f1 = trace.omega / (2.0 * math.pi)
    n_tail = round(tail_cycles / (f1 * trace.ts))
    if len(trace.t) < n_tail:
        raise ValueError("trace shorter than the steady-state metric window")
    ref_mag = math.hypot(*trace.ref)
    bus_mag = np.hypot(trace.states[:, 2], trace.states[:, 3])

    tail = slice(len(trace.t) - n_tail, None)
    sse = abs(float(np.mean(ref_mag - bus_mag[tail])))

    theta = trace.omega * trace.t[tail]
    va, vb, vc = inverse_park_arrays(trace.states[tail, 2],
                                     trace.states[tail, 3], theta)
    ia, _, _ = inverse_park_arrays(trace.io[tail, 0], trace.io[tail, 1], theta)
    fs = 1.0 / trace.ts
    thd_v = thd(va, f1, fs, max_harmonic)
    thd_i = thd(ia, f1, fs, max_harmonic)
    unb = unbalance(va, vb, vc, f1, fs)

    # post-event deviation window
    post = trace.t > trace.event_time + 1e-12
    if not np.any(post):
        raise ValueError("trace does not cover the post-disturbance window")
    in_window = post & (trace.t <= trace.event_time + overshoot_window + 1e-12)
    deviation = np.abs(bus_mag - ref_mag)
    overshoot = 100.0 * float(np.max(deviation[in_window])) / ref_mag

    post_dev = deviation[post]
    post_t = trace.t[post]
    inside = post_dev <= settle_band * ref_mag
    settle = post_t[-1] - trace.event_time
    # last leading index from which the band holds for good
    outside = np.nonzero(~inside)[0]
    if len(outside) == 0:
        settle = post_t[0] - trace.event_time
    elif outside[-1] + 1 < len(post_t):
        settle = post_t[outside[-1] + 1] - trace.event_time
    return MetricReport(sse=sse, thd_voltage=thd_v, thd_current=thd_i,
                        relative_overshoot=overshoot, unbalance=unb,
                        settle_time=settle)


# ---------------------------------------------------------------------------
# ablation accounting
# ---------------------------------------------------------------------------


def ablation_table(named_specs, throughput_mflops: float = 800.0) -> list[dict]:
    """Parameter/FLOP/latency rows; the first spec is the reference."""
    if not named_specs:
        raise ValueError("need at least one spec")
    ref_params = param_count(named_specs[0][1])
    rows = []
    for name, spec in named_specs:
        params = param_count(spec)
        flops = inference_flops(spec)
        rows.append({
            "method": name,
            "params": params,
            "flops": flops,
            "est_time_us": estimated_time_us(flops, throughput_mflops),
            "compression_ratio": ref_params / params,
        })
    return rows


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    scenario: str
    controller: str
    report: MetricReport
    trace: Trace


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


METRICS_HEADER = ("scenario,controller,sse_v,thd_voltage_pct,thd_current_pct,"
                  "relative_overshoot_pct,unbalance_pct,settle_time_s,diverged")


def emit_report(results, out_dir, formats=("csv", "markdown", "plot-data")):
    """Write sorted, byte-stable report files; returns the written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    results = sorted(results, key=lambda r: (r.scenario, r.controller))
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "metrics.csv")
        lines = [METRICS_HEADER]
        for r in results:
            m = r.report
            lines.append(",".join([
                r.scenario, r.controller, _fmt(m.sse), _fmt(m.thd_voltage),
                _fmt(m.thd_current), _fmt(m.relative_overshoot),
                _fmt(m.unbalance), _fmt(m.settle_time),
                "1" if r.trace.diverged else "0",
            ]))
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(path)
    if "markdown" in formats:
        path = os.path.join(out_dir, "metrics.md")
        lines = [
            "| Scenario | Controller | SSE (V) | THD_v (%) | THD_i (%) | "
            "Overshoot (%) | Unbalance (%) | Settle (s) |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in results:
            m = r.report
            lines.append(
                f"| {r.scenario} | {r.controller} | {m.sse:.4g} | "
                f"{m.thd_voltage:.4g} | {m.thd_current:.4g} | "
                f"{m.relative_overshoot:.4g} | {m.unbalance:.4g} | "
                f"{m.settle_time:.4g} |")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(path)
    if "plot-data" in formats:
        for r in results:
            path = os.path.join(out_dir, f"trace_{r.scenario}_{r.controller}.csv")
            tr = r.trace
            mag = np.hypot(tr.states[:, 2], tr.states[:, 3])
            with open(path, "w", newline="") as fh:
                fh.write("t,u_bus_d,u_bus_q,u_bus_mag,i_ld,i_lq\n")
                for i in range(len(tr.t)):
                    fh.write(",".join([
                        _fmt(tr.t[i]), _fmt(tr.states[i, 2]), _fmt(tr.states[i, 3]),
                        _fmt(mag[i]), _fmt(tr.states[i, 0]), _fmt(tr.states[i, 1]),
                    ]) + "\n")
            written.append(path)
    return written


def emit_ablation(rows, out_dir):
    """Ablation table as CSV and markdown (with the documented footnote)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write("method,params,inference_flops,est_time_us,compression_ratio\n")
        for row in rows:
            fh.write(",".join([
                row["method"], str(row["params"]), str(row["flops"]),
                _fmt(row["est_time_us"]), _fmt(row["compression_ratio"]),
            ]) + "\n")
    md_path = os.path.join(out_dir, "ablation.md")
    lines = [
        "| Method | Params | Infer. FLOPs | Est. time (us) | Comp. ratio |",
        "|---|---|---|---|---|",
    ]
    for row in rows:
        lines.append(
            f"| {row['method']} | {row['params']} | {row['flops']} | "
            f"{row['est_time_us']:.2f} | {row['compression_ratio']:.2f} |")
    lines.append("")
    lines.append("Compression ratios are computed as reference params / row "
                 "params; the 487-parameter student works out to 27.60.")
    with open(md_path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return [csv_path, md_path]


def load_metrics_csv(path):
    """Inverse of the metrics.csv writer (used by report regeneration)."""
    results = []
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 9:
                raise ValueError(f"{path}: malformed metrics row: {line!r}")
            report = MetricReport(*(float(v) for v in parts[2:8]))
            results.append((parts[0], parts[1], report, parts[8] == "1"))
    return results
