"""Fixed-step nonlinear time-domain simulation engine.

Scenarios cover blocked-output reference tracking (step, sine dwell,
current chirp) and prescribed-motion backdriving.  The plant integrates
with classical fourth-order steps at 10 kHz; controllers run at 1 kHz
with the command held between ticks; the clutch pure delay is realized by
a command ring buffer at the substep size.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .plant import Plant, PlantState, TWO_PI
from .controllers import (CONTROL_DT, SIM_DT, Command, ControllerFault,
                          LqgiController, make_controller)

# 1 Hz backdrive displacement amplitude reproducing the published baseline
# torque deviation of 0.60 N.m at zero commanded torque (open loop, no
# dither, stick-slip friction).  Recompute with calibrate_backdrive_amplitude.
BACKDRIVE_AMPLITUDE_1HZ = 1.445e-3  # [m]

SCENARIO_KINDS = ("step", "chirp", "sine_dwell", "backdrive")


class ScenarioError(ValueError):
    """Inconsistent scenario configuration."""


@dataclass(frozen=True)
class Scenario:
    """One simulation experiment, fully self-describing."""

    kind: str = "step"
    controller: str = "open_loop"
    duration: float | None = None    # derived from the profile when None
    pre_hold: float = 0.5            # settle before the step / motion [s]
    seed: int = 0
    noise: bool = False

    # reference profile
    torque_amplitude: float = 12.0   # step target / dwell amplitude [N.m]
    torque_offset: float = 10.0      # dwell offset [N.m]
    freq_hz: float = 1.0             # dwell frequency [Hz]

    # chirp (open-loop current injection)
    chirp_f0: float = 0.0
    chirp_f1: float = 200.0
    chirp_i_offset: float = 2.0      # [A]
    chirp_i_amplitude: float = 0.5   # [A]

    # backdrive profile (prescribed third-mass motion)
    backdrive_amplitude: float = BACKDRIVE_AMPLITUDE_1HZ  # [m]
    backdrive_freq: float = 1.0      # [Hz]
    backdrive_cycles: int = 5
    torque_command: float = 0.0      # held torque reference [N.m]
    ramp_torque_end: float | None = None  # ramp the command to this value

    # plant/engine overrides
    friction_mode: str | None = None  # None keeps the plant's configured mode
    sim_dt: float = SIM_DT
    control_dt: float = CONTROL_DT
    record_every: int | None = None   # substeps per record; None = control rate

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ScenarioError(f"kind must be one of {SCENARIO_KINDS}")
        ratio = self.control_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ScenarioError("control_dt must be an integer multiple of sim_dt")
        if self.duration is not None and self.duration <= 0.0:
            raise ScenarioError("duration must be positive")

    def total_duration(self) -> float:
        if self.duration is not None:
            return self.duration
        if self.kind == "step":
            return self.pre_hold + 1.0
        if self.kind == "sine_dwell":
            return max(0.6, 5.0 / self.freq_hz) + 10.0 / self.freq_hz
        if self.kind == "backdrive":
            return self.pre_hold + self.backdrive_cycles / self.backdrive_freq
        return 4.0  # chirp

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        bad = set(data) - set(cls.__dataclass_fields__)
        if bad:
            raise ScenarioError(f"unknown scenario key(s): {sorted(bad)}")
        sc = cls(**data)
        sc.validate()
        return sc


@dataclass
class SimTrace:
    """Uniform-grid record of one run; all series share the time axis."""

    t: np.ndarray
    state: np.ndarray        # (n, 7) true plant states
    meas: np.ndarray         # (n, 5) x1, v1, x3, p_master, p_slave (noisy if enabled)
    ref_torque: np.ndarray
    p_desired: np.ndarray
    p_master: np.ndarray     # true pressures
    p_slave: np.ndarray
    torque: np.ndarray       # delivered joint torque from slave pressure
    current: np.ndarray
    force_cmd: np.ndarray
    pressure_cmd: np.ndarray
    saturated: np.ndarray
    estimate: np.ndarray | None = None   # (n, 8) [x_i, x_hat] for LQGI runs
    scenario: dict = field(default_factory=dict)
    plant_hash: str = ""
    seed: int = 0
    aborted: str | None = None

    def columns(self) -> dict:
        cols = {
            "t [s]": self.t,
            "x1 [m]": self.state[:, 0], "v1 [m/s]": self.state[:, 1],
            "x2 [m]": self.state[:, 2], "v2 [m/s]": self.state[:, 3],
            "x3 [m]": self.state[:, 4], "v3 [m/s]": self.state[:, 5],
            "f_mr [N]": self.state[:, 6],
            "meas_x1 [m]": self.meas[:, 0], "meas_v1 [m/s]": self.meas[:, 1],
            "meas_x3 [m]": self.meas[:, 2], "meas_pm [Pa]": self.meas[:, 3],
            "meas_ps [Pa]": self.meas[:, 4],
            "ref_torque [N.m]": self.ref_torque,
            "p_desired [Pa]": self.p_desired,
            "p_master [Pa]": self.p_master,
            "p_slave [Pa]": self.p_slave,
            "torque [N.m]": self.torque,
            "current [A]": self.current,
            "force_cmd [N]": self.force_cmd,
            "pressure_cmd [Pa]": self.pressure_cmd,
            "saturated [-]": self.saturated.astype(float),
        }
        if self.estimate is not None:
            cols["est_xi [Pa.s]"] = self.estimate[:, 0]
            for j in range(7):
                cols[f"est_x{j + 1} [-]"] = self.estimate[:, j + 1]
        return cols

    def to_csv(self, path) -> None:
        """Comma-separated table with a one-line header naming columns/units.

        A sidecar <path>.meta.json carries the scenario, seed and plant
        hash so the run can be reproduced exactly.
        """
        cols = self.columns()
        header = ",".join(cols)
        data = np.column_stack(list(cols.values()))
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        meta = {
            "scenario": self.scenario,
            "plant_hash": self.plant_hash,
            "seed": self.seed,
            "aborted": self.aborted,
        }
        with open(f"{path}.meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_trace_csv(path) -> SimTrace:
    """Rebuild a SimTrace from its CSV (and meta sidecar when present)."""
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.ndim == 1:
        data = data[None, :]
    col = {name: data[:, i] for i, name in enumerate(names)}
    est = None
    if "est_xi [Pa.s]" in col:
        est = np.column_stack([col["est_xi [Pa.s]"]] +
                              [col[f"est_x{j + 1} [-]"] for j in range(7)])
    meta = {"scenario": {}, "plant_hash": "", "seed": 0, "aborted": None}
    try:
        with open(f"{path}.meta.json") as fh:
            meta.update(json.load(fh))
    except FileNotFoundError:
        pass
    return SimTrace(
        t=col["t [s]"],
        state=np.column_stack([col[k] for k in
                               ("x1 [m]", "v1 [m/s]", "x2 [m]", "v2 [m/s]",
                                "x3 [m]", "v3 [m/s]", "f_mr [N]")]),
        meas=np.column_stack([col[k] for k in
                              ("meas_x1 [m]", "meas_v1 [m/s]", "meas_x3 [m]",
                               "meas_pm [Pa]", "meas_ps [Pa]")]),
        ref_torque=col["ref_torque [N.m]"],
        p_desired=col["p_desired [Pa]"],
        p_master=col["p_master [Pa]"],
        p_slave=col["p_slave [Pa]"],
        torque=col["torque [N.m]"],
        current=col["current [A]"],
        force_cmd=col["force_cmd [N]"],
        pressure_cmd=col["pressure_cmd [Pa]"],
        saturated=col["saturated [-]"] > 0.5,
        estimate=est,
        scenario=meta["scenario"],
        plant_hash=meta["plant_hash"],
        seed=meta["seed"],
        aborted=meta["aborted"],
    )


def _reference(sc: Scenario):
    """Torque reference profile as a function of time."""
    if sc.kind == "step":
        t0, amp = sc.pre_hold, sc.torque_amplitude
        return lambda t: amp if t >= t0 else 0.0
    if sc.kind == "sine_dwell":
        off, amp, w = sc.torque_offset, sc.torque_amplitude, TWO_PI * sc.freq_hz
        return lambda t: off + amp * math.sin(w * t)
    if sc.kind == "backdrive":
        if sc.ramp_torque_end is not None:
            t_total = sc.total_duration()
            c0, c1 = sc.torque_command, sc.ramp_torque_end
            return lambda t: c0 + (c1 - c0) * min(t / t_total, 1.0)
        cmd = sc.torque_command
        return lambda t: cmd
    return lambda t: 0.0  # chirp drives current directly


def _backdrive_profile(sc: Scenario):
    """Prescribed (x3, v3, a3) motion, at rest until pre_hold."""
    amp = sc.backdrive_amplitude
    w = TWO_PI * sc.backdrive_freq
    t0 = sc.pre_hold

    def profile(t):
        if t < t0:
            return 0.0, 0.0, 0.0
        ph = w * (t - t0)
        return amp * math.sin(ph), amp * w * math.cos(ph), -amp * w * w * math.sin(ph)

    return profile


def run_scenario(sc: Scenario, plant: Plant | None = None, controller=None,
                 gains=None, controller_kwargs: dict | None = None) -> SimTrace:
    """Execute one scenario and return its trace.

    The controller is built from sc.controller when not supplied;
    controller_kwargs forwards dither/PID overrides to the factory.  On a
    numeric blow-up the partial trace is returned with `aborted` set.
    """
    sc.validate()
    if plant is None:
        plant = Plant()
    if sc.friction_mode is not None:
        plant = Plant(plant.params.with_friction(mode=sc.friction_mode))
    if sc.kind != "chirp" and controller is None:
        controller = make_controller(sc.controller, plant, gains=gains,
                                     **(controller_kwargs or {}))

    dt = sc.sim_dt
    ticks_per_ctrl = int(round(sc.control_dt / dt))
    record_every = sc.record_every if sc.record_every is not None else ticks_per_ctrl
    duration = sc.total_duration()
    n_sub = int(round(duration / dt))
    n_rec = n_sub // record_every + 1

    rng = np.random.default_rng(sc.seed)
    # sensor noise: [x1, v1, x3, P_M] variances from the estimator design,
    # slave transducer assumed identical to the master one
    stds = np.array([math.sqrt(v) for v in (3.6e-9, 1e-6, 2.5e-11, 5.6e5, 5.6e5)])
    n_ticks = n_sub // ticks_per_ctrl + 1
    noise = rng.standard_normal((n_ticks, 5)) * stds if sc.noise else None

    ref = _reference(sc)
    backdrive = _backdrive_profile(sc) if sc.kind == "backdrive" else None
    chirp_rate = (sc.chirp_f1 - sc.chirp_f0) / (2.0 * duration)

    ps_state = PlantState(plant, dt)
    state = ps_state.x
    is_lqgi = isinstance(controller, LqgiController)

    t_arr = np.zeros(n_rec)
    state_arr = np.zeros((n_rec, 7))
    meas_arr = np.zeros((n_rec, 5))
    ref_arr = np.zeros(n_rec)
    pdes_arr = np.zeros(n_rec)
    pm_arr = np.zeros(n_rec)
    psl_arr = np.zeros(n_rec)
    tq_arr = np.zeros(n_rec)
    cur_arr = np.zeros(n_rec)
    force_arr = np.zeros(n_rec)
    pcmd_arr = np.zeros(n_rec)
    sat_arr = np.zeros(n_rec, dtype=bool)
    est_arr = np.zeros((n_rec, 8)) if is_lqgi else None

    cmd = Command(current=0.0, force=0.0, pressure_cmd=0.0, saturated=False)
    meas = (0.0, 0.0, 0.0, 0.0, 0.0)
    p_desired = 0.0
    r_now = 0.0
    i_rec = 0
    tick = 0
    aborted = None

    try:
        for i in range(n_sub + 1):
            t = i * dt
            if i % ticks_per_ctrl == 0:
                pm = plant.master_pressure(state)
                ps = plant.slave_pressure(state)
                meas = (state[0], state[1], state[4], pm, ps)
                if noise is not None:
                    nz = noise[tick]
                    meas = (meas[0] + nz[0], meas[1] + nz[1], meas[2] + nz[2],
                            meas[3] + nz[3], meas[4] + nz[4])
                r_now = ref(t)
                if sc.kind == "chirp":
                    phase = sc.chirp_f0 * t + chirp_rate * t * t
                    current = sc.chirp_i_offset + sc.chirp_i_amplitude * math.sin(TWO_PI * phase)
                    current = min(max(current, 0.0), plant.params.clutch.current_max)
                    cmd = Command(current=current,
                                  force=plant.clutch_force_from_current(current),
                                  pressure_cmd=0.0, saturated=False)
                    p_desired = 0.0
                else:
                    p_desired, _ = plant.pressure_from_torque(r_now)
                    cmd = controller.step(t, p_desired, meas)
                tick += 1
            if i % record_every == 0:
                t_arr[i_rec] = t
                state_arr[i_rec] = state
                meas_arr[i_rec] = meas
                ref_arr[i_rec] = r_now
                pdes_arr[i_rec] = p_desired
                pm_arr[i_rec] = plant.master_pressure(state)
                ps_now = plant.slave_pressure(state)
                psl_arr[i_rec] = ps_now
                tq_arr[i_rec] = plant.torque_from_pressure(ps_now)
                cur_arr[i_rec] = cmd.current
                force_arr[i_rec] = cmd.force
                pcmd_arr[i_rec] = cmd.pressure_cmd
                sat_arr[i_rec] = cmd.saturated
                if is_lqgi:
                    est_arr[i_rec, 0] = controller.x_i
                    est_arr[i_rec, 1:] = controller.x_hat
                i_rec += 1
            if i == n_sub:
                break
            f_delayed = ps_state.push(cmd.force)
            state = plant.rk4_step(state, dt, f_delayed, backdrive, t)
            if backdrive is not None:
                x3p, v3p, _ = backdrive(t + dt)
                state = state[:4] + (x3p, v3p) + state[6:]
    except (FloatingPointError, ControllerFault, OverflowError) as exc:
        aborted = f"{type(exc).__name__}: {exc}"

    sl = slice(0, i_rec)
    return SimTrace(
        t=t_arr[sl], state=state_arr[sl], meas=meas_arr[sl],
        ref_torque=ref_arr[sl], p_desired=pdes_arr[sl],
        p_master=pm_arr[sl], p_slave=psl_arr[sl], torque=tq_arr[sl],
        current=cur_arr[sl], force_cmd=force_arr[sl], pressure_cmd=pcmd_arr[sl],
        saturated=sat_arr[sl],
        estimate=est_arr[sl] if est_arr is not None else None,
        scenario=sc.to_dict(), plant_hash=plant.params.content_hash(),
        seed=sc.seed, aborted=aborted,
    )


def run_backdrive(sc: Scenario, plant: Plant | None = None, controller=None,
                  gains=None, controller_kwargs: dict | None = None) -> SimTrace:
    """Backdriving run; defaults the plant into stick-slip friction.

    The prescribed third-mass sinusoid replaces its dynamics; the recorded
    x3 equals the prescribed trajectory exactly.
    """
    if sc.kind != "backdrive":
        raise ScenarioError("run_backdrive needs a backdrive scenario")
    if sc.friction_mode is None:
        sc = Scenario(**{**sc.to_dict(), "friction_mode": "stick_slip_sign"})
    return run_scenario(sc, plant=plant, controller=controller, gains=gains,
                        controller_kwargs=controller_kwargs)


# ---------------- canned scenarios ----------------

def step_scenario(controller: str = "open_loop", amplitude: float = 12.0,
                  pre_hold: float = 0.5, settle: float = 1.0, **kw) -> Scenario:
    return Scenario(kind="step", controller=controller, torque_amplitude=amplitude,
                    pre_hold=pre_hold, duration=pre_hold + settle, **kw)


def dwell_scenario(controller: str, freq_hz: float, amplitude: float = 2.0,
                   offset: float = 10.0, cycles: int = 10, **kw) -> Scenario:
    settle = max(0.6, 5.0 / freq_hz)
    return Scenario(kind="sine_dwell", controller=controller, freq_hz=freq_hz,
                    torque_amplitude=amplitude, torque_offset=offset,
                    duration=settle + cycles / freq_hz, **kw)


def backdrive_scenario(controller: str, torque_command: float = 0.0,
                       freq: float = 1.0, cycles: int = 5,
                       amplitude: float = BACKDRIVE_AMPLITUDE_1HZ,
                       pre_hold: float = 1.0, **kw) -> Scenario:
    return Scenario(kind="backdrive", controller=controller,
                    torque_command=torque_command, backdrive_freq=freq,
                    backdrive_cycles=cycles, backdrive_amplitude=amplitude,
                    pre_hold=pre_hold, **kw)


def friction_id_scenario(duration: float = 60.0, peak_speed: float = 5e-3,
                         p_start: float = 300e3, p_end: float = 1.6e6) -> Scenario:
    """Friction-coefficient identification protocol.

    1 Hz backdrive at the stated peak piston speed while the commanded
    pressure ramps slowly; plant in smooth-tanh mode (its configured
    friction model), dither off via the open-loop baseline controller.
    """
    plant = Plant()
    t0 = plant.torque_from_pressure(p_start)
    t1 = plant.torque_from_pressure(p_end)
    return Scenario(kind="backdrive", controller="open_loop",
                    backdrive_amplitude=peak_speed / TWO_PI, backdrive_freq=1.0,
                    backdrive_cycles=int(duration) - 1, pre_hold=1.0,
                    duration=duration, torque_command=t0, ramp_torque_end=t1,
                    friction_mode="smooth_tanh")


def make_dwell_runner(controller_name: str, plant: Plant | None = None,
                      gains=None, amplitude: float = 2.0, offset: float = 10.0,
                      noise: bool = False, seed: int = 0,
                      controller_kwargs: dict | None = None):
    """Runner callable for analysis.frf_from_sine_dwell."""
    def runner(freq_hz: float) -> SimTrace:
        sc = dwell_scenario(controller_name, freq_hz, amplitude=amplitude,
                            offset=offset, noise=noise, seed=seed)
        return run_scenario(sc, plant=plant, gains=gains,
                            controller_kwargs=controller_kwargs)
    return runner


FRF_GRID_DEFAULT = tuple(float(f) for f in np.logspace(0.0, 2.0, 13))


def measure_controller_row(name: str, plant: Plant | None = None, gains=None,
                           controller_kwargs: dict | None = None,
                           frf_freqs=FRF_GRID_DEFAULT, seed: int = 0,
                           trace_hook=None):
    """Measure one comparison-table row: step metrics, dwell bandwidth and
    the three backdrive torque-deviation cells.

    trace_hook(label, trace_or_points) receives every intermediate result
    for persistence; pass None to discard them.
    """
    from .analysis import (RowResult, bandwidth, frf_from_sine_dwell,
                           step_metrics, torque_deviation)
    row = RowResult()
    hook = trace_hook if trace_hook is not None else (lambda label, obj: None)

    trace = run_scenario(step_scenario(name, seed=seed), plant=plant, gains=gains,
                         controller_kwargs=controller_kwargs)
    hook(f"step_{name}", trace)
    metrics = step_metrics(trace)
    row.rise_ms = metrics.rise_time_63
    row.overshoot = metrics.overshoot

    runner = make_dwell_runner(name, plant=plant, gains=gains, seed=seed,
                               controller_kwargs=controller_kwargs)
    points = frf_from_sine_dwell(runner, frf_freqs)
    hook(f"frf_{name}", points)
    row.bandwidth = bandwidth(points)

    for attr, freq, cmd in (("dev_1hz_0", 1.0, 0.0), ("dev_1hz_10", 1.0, 10.0),
                            ("dev_5hz_10", 5.0, 10.0)):
        sc = backdrive_scenario(name, torque_command=cmd, freq=freq, seed=seed)
        tr = run_backdrive(sc, plant=plant, gains=gains,
                           controller_kwargs=controller_kwargs)
        hook(f"backdrive_{int(freq)}hz_{int(cmd)}nm_{name}", tr)
        setattr(row, attr, torque_deviation(tr))
    return row


def calibrate_backdrive_amplitude(plant: Plant | None = None, target: float = 0.60,
                                  freq: float = 1.0, tol: float = 1e-3) -> float:
    """Displacement amplitude making the open-loop baseline deviation hit target.

    Bisection on the 1 Hz zero-command backdrive peak torque deviation
    (first cycle excluded), stick-slip friction, dither off.
    """
    if plant is None:
        plant = Plant()

    def deviation(amp: float) -> float:
        sc = backdrive_scenario("open_loop", torque_command=0.0, freq=freq,
                                amplitude=amp, friction_mode="stick_slip_sign")
        tr = run_scenario(sc, plant=plant)
        mask = tr.t >= sc.pre_hold + 1.0 / freq
        return float(np.abs(tr.torque[mask] - sc.torque_command).max())

    lo, hi = 0.1e-3, 12e-3
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if deviation(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * 1e-3:
            break
    return 0.5 * (lo + hi)
