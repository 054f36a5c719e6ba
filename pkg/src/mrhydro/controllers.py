"""Discrete-time implementations of the four torque controllers.

Each controller maps (time, desired pressure, measurements) to an MR coil
current at a fixed rate.  Measurements arrive as the tuple
(x1, v1, x3, p_master, p_slave); the slave pressure is only consumed by
the non-collocated PID.  All controllers superpose the dither command.

Gain calibration helpers work on the linear model in the frequency
domain: loop gain margins and closed-loop bandwidth from the published
criterion (first -3 dB or -135 deg crossing).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .plant import Plant, StateSpace, TWO_PI
from .synthesis import GainSet

CONTROL_DT = 1e-3   # 1 kHz loop rate
SIM_DT = 1e-4       # 10 kHz plant substep

CONTROLLER_NAMES = ("open_loop", "friction_comp", "pid_master", "pid_slave", "lqgi")


class ControllerFault(RuntimeError):
    """Estimator divergence or non-finite controller state."""


@dataclass(frozen=True)
class DitherConfig:
    """150 Hz command superposition that keeps the screw interface slipping.

    Amplitude grows affinely with the desired pressure.  The slope default
    is set where the dither force at the piston exceeds the friction
    breakaway level mu*P*A across the operating range (after the clutch
    lag attenuates the 150 Hz component); below that threshold the dither
    has no smoothing effect on this model.
    """

    frequency: float = 150.0       # [Hz]
    amplitude_slope: float = 0.5   # fraction of desired pressure
    amplitude_floor: float = 20e3  # [Pa]
    enabled: bool = True


def dither_signal(t: float, p_desired: float, cfg: DitherConfig) -> float:
    """Instantaneous dither pressure command."""
    if not cfg.enabled:
        return 0.0
    amp = cfg.amplitude_floor + cfg.amplitude_slope * p_desired
    return amp * math.sin(TWO_PI * cfg.frequency * t)


@dataclass
class Command:
    """One controller output sample."""

    current: float          # coil current [A]
    force: float            # realized steady clutch force [N]
    pressure_cmd: float     # pre-conversion pressure command [Pa]
    saturated: bool


class _LowPass:
    """First-order filter stepped at the loop rate."""

    __slots__ = ("alpha", "y", "primed")

    def __init__(self, cutoff_hz: float, dt: float):
        self.alpha = math.exp(-TWO_PI * cutoff_hz * dt)
        self.y = 0.0
        self.primed = False

    def step(self, u: float) -> float:
        if not self.primed:
            self.y = u
            self.primed = True
        else:
            self.y = self.alpha * self.y + (1.0 - self.alpha) * u
        return self.y

    def reset(self) -> None:
        self.y = 0.0
        self.primed = False


class OpenLoopController:
    """Feedthrough reference conversion with optional friction compensation.

    The compensation estimates the screw friction pressure from the
    measured master pressure and the filtered piston speed and adds it to
    the command.  comp_steepness is the tanh slope of the estimate; it is
    deliberately sharp so the estimate tracks the near-discontinuous
    stick-slip friction it has to cancel.
    """

    def __init__(self, plant: Plant, dither: DitherConfig | None = None,
                 friction_comp: bool = False, comp_steepness: float = 1000.0,
                 v1_filter_hz: float = 150.0, dt: float = CONTROL_DT):
        self.plant = plant
        self.dither = dither if dither is not None else DitherConfig()
        self.friction_comp = friction_comp
        self.comp_steepness = comp_steepness
        self.dt = dt
        self._v1_filter = _LowPass(v1_filter_hz, dt)

    def reset(self) -> None:
        self._v1_filter.reset()

    def step(self, t: float, p_desired: float, meas) -> Command:
        p_cmd = p_desired
        if self.friction_comp:
            _, v1, _, p_master, _ = meas
            v1f = self._v1_filter.step(v1)
            p_cmd += self.plant.mu * max(p_master, 0.0) * math.tanh(self.comp_steepness * v1f)
        p_cmd += dither_signal(t, p_desired, self.dither)
        force_req = self.plant.force_from_pressure(p_cmd)
        current, saturated = self.plant.current_from_force(force_req)
        force = self.plant.clutch_force_from_current(current)
        return Command(current=current, force=force, pressure_cmd=p_cmd,
                       saturated=saturated or force_req < 0.0)


@dataclass(frozen=True)
class PidConfig:
    """Pressure-feedback loop gains and tap selection.

    Defaults come from calibrate_pid_defaults(): the integral gain is swept
    until the linear closed loop reaches the published bandwidth for its
    tap while keeping at least 6 dB of gain margin.  The master tap needs
    a small derivative term to clear the first transmission resonance at
    that bandwidth; integral action still dominates below 30 Hz.
    """

    kp: float
    ki: float
    kd: float
    feedback_tap: str = "master"      # "master" or "slave"
    deriv_filter_hz: float = 150.0

    def validate(self) -> None:
        if self.feedback_tap not in ("master", "slave"):
            raise ValueError("feedback_tap must be 'master' or 'slave'")


# shipped defaults, produced by calibrate_pid_defaults() on the default plant
PID_MASTER_DEFAULT = PidConfig(kp=0.0, ki=40.0, kd=1.0e-3, feedback_tap="master")
PID_SLAVE_DEFAULT = PidConfig(kp=0.0, ki=19.0, kd=0.0, feedback_tap="slave")


class PidController:
    """Parallel PID on pressure error, conditional anti-windup, dither.

    The command rides on the DC pretension so that zero error with an
    empty integrator commands exactly the line pretension feedthrough.
    """

    def __init__(self, plant: Plant, config: PidConfig,
                 dither: DitherConfig | None = None, dt: float = CONTROL_DT):
        config.validate()
        self.plant = plant
        self.config = config
        self.dither = dither if dither is not None else DitherConfig()
        self.dt = dt
        self.integral = 0.0
        self._prev_fb = None
        self._dfilt = _LowPass(config.deriv_filter_hz, dt)

    def reset(self) -> None:
        self.integral = 0.0
        self._prev_fb = None
        self._dfilt.reset()

    def step(self, t: float, p_desired: float, meas) -> Command:
        cfg = self.config
        _, _, _, p_master, p_slave = meas
        fb = p_master if cfg.feedback_tap == "master" else p_slave
        error = p_desired - fb

        if self._prev_fb is None:
            d_raw = 0.0
        else:
            d_raw = (fb - self._prev_fb) / self.dt
        self._prev_fb = fb
        d_term = -cfg.kd * self._dfilt.step(d_raw)

        p_cmd = self.plant.p_dc + cfg.kp * error + self.integral + d_term
        # conditional integration on the feedback command's own limits (the
        # zero-mean dither is added afterwards); error pointing back out of
        # saturation still integrates, otherwise recovery would deadlock
        force_fb = self.plant.force_from_pressure(p_cmd)
        hit_limit = force_fb < 0.0 or force_fb > self.plant.force_max
        unwinds = (force_fb > self.plant.force_max and error < 0.0) or \
                  (force_fb < 0.0 and error > 0.0)
        if not hit_limit or unwinds:
            self.integral += cfg.ki * error * self.dt
        p_cmd += dither_signal(t, p_desired, self.dither)
        force_req = self.plant.force_from_pressure(p_cmd)
        current, _ = self.plant.current_from_force(force_req)
        force = self.plant.clutch_force_from_current(current)
        return Command(current=current, force=force, pressure_cmd=p_cmd,
                       saturated=hit_limit)


class LqgiController:
    """State-feedback law on Kalman estimates with integral action.

    The estimator is the zero-order-hold discretization of the continuous
    observer (A - LC, [B, L]) at the loop rate, which is stable for any
    Hurwitz design; mapping the continuous gain as L*dt diverges here
    because the fastest estimator pole exceeds the sampling bandwidth.
    The integral state accumulates (P_d - estimated slave pressure) and is
    held while the force command saturates.
    """

    def __init__(self, plant: Plant, gains: GainSet, dt: float = CONTROL_DT,
                 dither: DitherConfig | None = None, ss: StateSpace | None = None,
                 xi_clamp: float | None = None, estimate_guard: float = 1e12):
        from .plant import build_state_space
        self.plant = plant
        self.gains = gains
        self.dt = dt
        self.dither = dither if dither is not None else DitherConfig()
        model = ss if ss is not None else build_state_space(plant.params)
        self.C_d = model.C_d[0]
        A, B, C, L = model.A, model.B, model.C, gains.L
        m = np.zeros((12, 12))
        m[:7, :7] = (A - L @ C) * dt
        m[:7, 7:8] = B * dt
        m[:7, 8:] = L * dt
        em = linalg.expm(m)
        self._phi = em[:7, :7]
        self._gamma_u = em[:7, 7]
        self._gamma_y = em[:7, 8:]
        self._k_i = gains.K_integral
        self._k_x = gains.K_x
        self._k_ff = gains.K_ff
        if xi_clamp is None:
            ki_mag = max(abs(self._k_i), 1e-12)
            xi_clamp = 2.0 * plant.force_max / ki_mag
        self.xi_clamp = xi_clamp
        self.estimate_guard = estimate_guard
        self.x_hat = np.zeros(7)
        self.x_i = 0.0
        self._u_prev = 0.0

    def reset(self) -> None:
        self.x_hat = np.zeros(7)
        self.x_i = 0.0
        self._u_prev = 0.0

    def step(self, t: float, p_desired: float, meas) -> Command:
        y = np.array([meas[0], meas[1], meas[2], meas[3]])
        self.x_hat = self._phi @ self.x_hat + self._gamma_u * self._u_prev + self._gamma_y @ y
        if not np.all(np.isfinite(self.x_hat)) or np.abs(self.x_hat).max() > self.estimate_guard:
            raise ControllerFault("state estimate diverged")
        ps_hat = float(self.C_d @ self.x_hat)

        u = -self._k_i * self.x_i - float(self._k_x @ self.x_hat) + self._k_ff * p_desired
        # anti-windup decided on the feedback command alone; the zero-mean
        # dither is superposed afterwards and may clip on its own crests.
        # Error pointing back out of saturation still integrates.
        err_i = p_desired - ps_hat
        hit_limit = u < 0.0 or u > self.plant.force_max
        du = -self._k_i * err_i  # command change the integration would cause
        unwinds = (u > self.plant.force_max and du < 0.0) or (u < 0.0 and du > 0.0)
        if not hit_limit or unwinds:
            self.x_i += err_i * self.dt
            self.x_i = min(max(self.x_i, -self.xi_clamp), self.xi_clamp)
        force_req = u + dither_signal(t, p_desired, self.dither) * self.plant.area_slave
        current, _ = self.plant.current_from_force(force_req)
        force = self.plant.clutch_force_from_current(current)
        self._u_prev = force
        return Command(current=current, force=force,
                       pressure_cmd=force_req / self.plant.area_slave,
                       saturated=hit_limit)


def make_controller(name: str, plant: Plant, gains: GainSet | None = None,
                    dither: DitherConfig | None = None,
                    pid_master: PidConfig = PID_MASTER_DEFAULT,
                    pid_slave: PidConfig = PID_SLAVE_DEFAULT,
                    dt: float = CONTROL_DT):
    """Factory for the five benchmark controller variants.

    The open-loop baseline runs without dither; every other variant keeps
    the dither enabled, matching the benchmark protocol.
    """
    if name == "open_loop":
        off = replace(dither if dither is not None else DitherConfig(), enabled=False)
        return OpenLoopController(plant, dither=off, friction_comp=False, dt=dt)
    if name == "friction_comp":
        return OpenLoopController(plant, dither=dither, friction_comp=True, dt=dt)
    if name == "pid_master":
        return PidController(plant, pid_master, dither=dither, dt=dt)
    if name == "pid_slave":
        return PidController(plant, pid_slave, dither=dither, dt=dt)
    if name == "lqgi":
        if gains is None:
            from .synthesis import synthesize
            gains = synthesize(plant.params)
        return LqgiController(plant, gains, dt=dt, dither=dither)
    raise ValueError(f"unknown controller '{name}'; choose from {CONTROLLER_NAMES}")


# ---------------- linear-model frequency-domain tools ----------------

def pressure_command_frf(plant: Plant, ss: StateSpace, freqs, output: str = "slave",
                         with_delay: bool = True) -> np.ndarray:
    """Complex response of a pressure tap to the pressure command."""
    row = ss.C_d if output == "slave" else ss.C[3:4]
    n = ss.n
    eye = np.eye(n)
    out = np.empty(len(freqs), dtype=complex)
    for i, f in enumerate(freqs):
        w = 2j * math.pi * f
        g = (row @ np.linalg.solve(w * eye - ss.A, ss.B))[0, 0] * plant.area_slave
        if with_delay:
            g *= np.exp(-w * plant.tau_delay)
        out[i] = g
    return out


def _pid_c_of_jw(cfg: PidConfig, freqs) -> np.ndarray:
    w = 2j * np.pi * np.asarray(freqs, dtype=float)
    c = cfg.kp + cfg.ki / w
    if cfg.kd:
        # derivative is filtered in the implementation; include the roll-off
        wc = TWO_PI * cfg.deriv_filter_hz
        c = c + cfg.kd * w * (wc / (w + wc))
    return c


def pid_loop_gain(plant: Plant, ss: StateSpace, cfg: PidConfig, freqs,
                  with_delay: bool = True) -> np.ndarray:
    g_tap = pressure_command_frf(plant, ss, freqs, output=cfg.feedback_tap,
                                 with_delay=with_delay)
    return _pid_c_of_jw(cfg, freqs) * g_tap


def pid_closed_loop_frf(plant: Plant, ss: StateSpace, cfg: PidConfig, freqs,
                        with_delay: bool = True) -> np.ndarray:
    """Slave-pressure tracking response of the PID loop on the linear model."""
    g_slave = pressure_command_frf(plant, ss, freqs, output="slave", with_delay=with_delay)
    g_tap = pressure_command_frf(plant, ss, freqs, output=cfg.feedback_tap,
                                 with_delay=with_delay)
    c = _pid_c_of_jw(cfg, freqs)
    return g_slave * c / (1.0 + c * g_tap)


def gain_margin_db(loop: np.ndarray, freqs) -> float:
    """Classical gain margin from the -180 deg crossings of a loop response."""
    phase = np.unwrap(np.angle(loop)) * 180.0 / math.pi
    mag_db = 20.0 * np.log10(np.abs(loop))
    gm = math.inf
    for i in range(1, len(freqs)):
        a, b = phase[i - 1], phase[i]
        for k in range(4):
            th = -180.0 - 360.0 * k
            if (a > th >= b) or (b > th >= a):
                frac = (a - th) / (a - b) if a != b else 0.0
                m = mag_db[i - 1] + frac * (mag_db[i] - mag_db[i - 1])
                gm = min(gm, -m)
    return gm


def _first_crossing_bandwidth(freqs, resp: np.ndarray) -> float | None:
    mag_db = 20.0 * np.log10(np.abs(resp))
    phase = np.unwrap(np.angle(resp)) * 180.0 / math.pi
    dc = mag_db[0]
    for i in range(len(freqs)):
        if mag_db[i] <= dc - 3.0 or phase[i] <= -135.0:
            if i == 0:
                return float(freqs[0])
            # linear interpolation to the first criterion crossed
            f0, f1 = freqs[i - 1], freqs[i]
            cands = []
            if mag_db[i] <= dc - 3.0 and mag_db[i - 1] > dc - 3.0:
                r = (mag_db[i - 1] - (dc - 3.0)) / (mag_db[i - 1] - mag_db[i])
                cands.append(f0 + r * (f1 - f0))
            if phase[i] <= -135.0 and phase[i - 1] > -135.0:
                r = (phase[i - 1] + 135.0) / (phase[i - 1] - phase[i])
                cands.append(f0 + r * (f1 - f0))
            return float(min(cands)) if cands else float(freqs[i])
    return None


def linear_pid_bandwidth(plant: Plant, ss: StateSpace, cfg: PidConfig,
                         with_delay: bool = True) -> float | None:
    freqs = np.logspace(math.log10(0.05), math.log10(400.0), 3000)
    resp = pid_closed_loop_frf(plant, ss, cfg, freqs, with_delay=with_delay)
    return _first_crossing_bandwidth(freqs, resp)


def calibrate_integral_gain(plant: Plant, ss: StateSpace, tap: str, target_hz: float,
                            kd: float = 0.0, with_delay: bool = True) -> float:
    """Bisect the integral gain until the linear loop hits the target bandwidth."""
    lo, hi = 1e-2, 5e3
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        cfg = PidConfig(kp=0.0, ki=mid, kd=kd, feedback_tap=tap)
        bw = linear_pid_bandwidth(plant, ss, cfg, with_delay=with_delay)
        if bw is not None and bw >= target_hz:
            hi = mid
        else:
            lo = mid
    return math.sqrt(lo * hi)


def calibrate_pid_defaults(plant: Plant, ss: StateSpace) -> tuple[PidConfig, PidConfig]:
    """Reproduce the shipped PID defaults from the published bandwidths.

    Master tap targets 11 Hz (needs the small kd for margin at the first
    resonance); slave tap targets 3 Hz with pure integral action.
    """
    ki_m = calibrate_integral_gain(plant, ss, "master", 11.0, kd=PID_MASTER_DEFAULT.kd)
    ki_s = calibrate_integral_gain(plant, ss, "slave", 3.0, kd=0.0)
    master = PidConfig(kp=0.0, ki=ki_m, kd=PID_MASTER_DEFAULT.kd, feedback_tap="master")
    slave = PidConfig(kp=0.0, ki=ki_s, kd=0.0, feedback_tap="slave")
    return master, slave


def lqgi_closed_loop_frf(plant: Plant, ss: StateSpace, gains: GainSet, freqs,
                         with_delay: bool = True) -> np.ndarray:
    """Linear tracking response of the full LQGI interconnection.

    The clutch delay applies to the physical path into the plant but not
    to the estimator model, matching the implementation.
    """
    A, B, C, C_d = ss.A, ss.B, ss.C, ss.C_d
    L = gains.L
    LC = L @ C
    K_x = gains.K_x
    k_i = gains.K_integral
    out = np.empty(len(freqs), dtype=complex)
    eye = np.eye(15, dtype=complex)
    for i, f in enumerate(freqs):
        w = 2j * math.pi * f
        d = np.exp(-w * plant.tau_delay) if with_delay else 1.0
        M = np.zeros((15, 15), dtype=complex)
        M[0:7, 0:7] = A
        M[0:7, 7:14] = -B @ K_x[None, :] * d
        M[0:7, 14] = -B[:, 0] * k_i * d
        M[7:14, 0:7] = LC
        M[7:14, 7:14] = A - LC - B @ K_x[None, :]
        M[7:14, 14] = -B[:, 0] * k_i
        M[14, 7:14] = -C_d[0]
        rhs = np.zeros(15, dtype=complex)
        rhs[0:7] = B[:, 0] * gains.K_ff * d
        rhs[7:14] = B[:, 0] * gains.K_ff
        rhs[14] = 1.0
        x = np.linalg.solve(w * eye - M, rhs)
        out[i] = C_d[0] @ x[0:7]
    return out
