"""Physical model of the MR-clutch hydrostatic actuator.

Holds all identified constants (transmission chain, clutch statics and
dynamics, ball-screw friction, geometry), the nonlinear continuous-time
model, and unit conversions between joint torque, line pressure, clutch
torque and coil current.

Everything is SI and reflected at the slave-piston referential.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

TWO_PI = 2.0 * math.pi

FRICTION_MODES = ("smooth_tanh", "stick_slip_sign", "off")


class PlantError(ValueError):
    """Invalid parameter set or out-of-range operating point."""


@dataclass(frozen=True)
class TransmissionParams:
    """Three-mass chain: clutch/screw/piston, fluid column, robot structure."""

    m1: float = 11.0      # clutch + ball screw + piston mass [kg]
    m2: float = 7.0       # hydraulic fluid mass [kg]
    m3: float = 976.0     # robot structure + payload mass [kg]
    k1: float = 6.2e5     # power-unit transmission stiffness [N/m]
    k2: float = 5.3e5     # robot-side transmission stiffness [N/m]
    k3: float = 2.2e5     # robot structure + base stiffness [N/m]
    b1: float = 650.0     # clutch + ball screw damping [N.s/m]
    b2: float = 204.0     # hydraulic viscous damping [N.s/m]
    b3: float = 10000.0   # robot + base viscous damping [N.s/m]

    def validate(self) -> None:
        for name in ("m1", "m2", "m3", "k1", "k2", "k3", "b1", "b2", "b3"):
            if getattr(self, name) <= 0.0:
                raise PlantError(f"transmission parameter {name} must be > 0")


@dataclass(frozen=True)
class MRClutchParams:
    """Static polynomial and first-order-plus-delay dynamics of one clutch."""

    poly_c3: float = -0.015   # [N.m/A^3]
    poly_c2: float = 0.104    # [N.m/A^2]
    poly_c1: float = 0.225    # [N.m/A]
    poly_c0: float = 0.044    # remnant torque at zero current [N.m]
    tau_delay: float = 0.002  # drive + fluid response pure delay [s]
    omega_c: float = TWO_PI * 64.0  # first-order cutoff [rad/s]
    torque_max: float = 2.0   # clutch rating [N.m]
    current_max: float = 3.0  # drive limit [A]

    def validate(self) -> None:
        if self.tau_delay < 0.0 or self.omega_c <= 0.0:
            raise PlantError("clutch dynamics must have tau_delay >= 0, omega_c > 0")
        if self.torque_max <= 0.0 or self.current_max <= 0.0:
            raise PlantError("clutch limits must be positive")
        # strictly increasing static curve on the usable current range
        for i in np.linspace(0.0, self.current_max, 200):
            d = (3.0 * self.poly_c3 * i + 2.0 * self.poly_c2) * i + self.poly_c1
            if d <= 0.0:
                raise PlantError("clutch polynomial not monotone on [0, current_max]")


@dataclass(frozen=True)
class FrictionParams:
    """Ball-screw friction model: pressure-proportional Coulomb level.

    The smooth form uses tanh(n_steepness * v) in place of sign(v).  The
    steepness default is calibrated so an open-loop dwell about 10 N.m
    shows the reported low-frequency phase lag without locking small
    motions (the value is not given in the source data).

    The stick-slip mode realizes sign(v) as a very steep tanh inside the
    integrator: sign_regularization keeps the velocity boundary layer
    resolved at the fixed step so the simulation converges under step
    halving; behavior is indistinguishable from sign(v) above ~1 mm/s.
    """

    mu: float = 0.14            # friction coefficient [-]
    n_steepness: float = 30.0   # tanh transition slope [s/m]
    mode: str = "smooth_tanh"
    sign_regularization: float = 2500.0  # slope realizing sign(v) [s/m]

    def validate(self) -> None:
        if not 0.0 <= self.mu < 1.0:
            raise PlantError("mu must be in [0, 1)")
        if self.n_steepness <= 0.0:
            raise PlantError("n_steepness must be > 0")
        if self.sign_regularization <= 0.0:
            raise PlantError("sign_regularization must be > 0")
        if self.mode not in FRICTION_MODES:
            raise PlantError(f"friction mode must be one of {FRICTION_MODES}")


# Geometry defaults are derived from the hard numbers available: 29 N.m at
# 2310 kPa at the joint, 2 N.m clutch rating, 8 mm screw lead.  Ideal screw
# force at rating F = T * 2*pi/lead sets the master area at max pressure;
# the slave area is taken equal (symmetric line) and the pulley radius then
# follows from the joint torque/pressure pair.
_LEAD_DEFAULT = 0.008
_P_MAX = 2.31e6
_T_JOINT_MAX = 29.0
_AREA_DEFAULT = (2.0 * TWO_PI / _LEAD_DEFAULT) / _P_MAX          # ~6.80e-4 m^2
_R_PULLEY_DEFAULT = (_T_JOINT_MAX / _P_MAX) / _AREA_DEFAULT      # ~18.5 mm


@dataclass(frozen=True)
class GeometryParams:
    """Piston areas, pulley radius, screw lead and line pretension."""

    area_master: float = _AREA_DEFAULT   # [m^2]
    area_slave: float = _AREA_DEFAULT    # [m^2]
    r_pulley: float = _R_PULLEY_DEFAULT  # joint pulley radius [m]
    screw_lead: float = _LEAD_DEFAULT    # ball-screw lead [m/rev]
    ratio_R: float = 14.7                # joint torque / clutch torque [-]
    p_dc: float = 205e3                  # DC pretension pressure [Pa]

    def validate(self) -> None:
        for name in ("area_master", "area_slave", "r_pulley", "screw_lead"):
            if getattr(self, name) <= 0.0:
                raise PlantError(f"geometry parameter {name} must be > 0")
        if self.p_dc < 0.0:
            raise PlantError("p_dc must be >= 0")


@dataclass(frozen=True)
class PlantParams:
    """Complete parameter set; defaults reproduce the identified bench."""

    transmission: TransmissionParams = field(default_factory=TransmissionParams)
    clutch: MRClutchParams = field(default_factory=MRClutchParams)
    friction: FrictionParams = field(default_factory=FrictionParams)
    geometry: GeometryParams = field(default_factory=GeometryParams)

    def validate(self) -> None:
        self.transmission.validate()
        self.clutch.validate()
        self.friction.validate()
        self.geometry.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PlantParams":
        """Build from a nested dict; unknown keys are rejected."""
        sections = {
            "transmission": TransmissionParams,
            "clutch": MRClutchParams,
            "friction": FrictionParams,
            "geometry": GeometryParams,
        }
        unknown = set(data) - set(sections)
        if unknown:
            raise PlantError(f"unknown plant section(s): {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            sub = data.get(name, {})
            bad = set(sub) - {f for f in typ.__dataclass_fields__}
            if bad:
                raise PlantError(f"unknown key(s) in plant.{name}: {sorted(bad)}")
            kwargs[name] = typ(**sub)
        params = cls(**kwargs)
        params.validate()
        return params

    def content_hash(self) -> str:
        """Short stable hash for provenance records."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_friction(self, **changes) -> "PlantParams":
        return replace(self, friction=replace(self.friction, **changes))


class PlantState:
    """Integration state: 7-vector plus the command delay line.

    The buffer holds past steady-force commands at the simulation step
    size; its span must cover tau_delay.  push() enqueues the newest
    command and returns the delayed one to feed the clutch lag.
    """

    __slots__ = ("x", "buffer", "_idx")

    def __init__(self, plant: "Plant", dt: float, x0=None):
        if dt <= 0.0:
            raise PlantError("dt must be > 0")
        n_delay = int(round(plant.tau_delay / dt))
        if abs(n_delay * dt - plant.tau_delay) > 1e-9:
            # delay realized to the nearest whole step
            n_delay = max(n_delay, 0)
        self.x = tuple(x0) if x0 is not None else (0.0,) * 7
        if x0 is not None and len(self.x) != 7:
            raise PlantError("state vector must have 7 entries")
        self.buffer = [0.0] * max(n_delay, 0)
        self._idx = 0

    def push(self, f_cmd: float) -> float:
        """Enqueue a command; return the command delayed by the buffer span."""
        if not self.buffer:
            return f_cmd
        delayed = self.buffer[self._idx]
        self.buffer[self._idx] = f_cmd
        self._idx = (self._idx + 1) % len(self.buffer)
        return delayed


@dataclass(frozen=True)
class StateSpace:
    """Linear design model: x = [x1 v1 x2 v2 x3 v3 F_MR], u = F_MRs.

    Friction and the clutch pure delay are intentionally absent.
    """

    A: np.ndarray    # (7, 7)
    B: np.ndarray    # (7, 1)
    C: np.ndarray    # (4, 7) measurements [x1, v1, x3, P_M]
    C_d: np.ndarray  # (1, 7) tracked output: slave pressure
    n: int = 7
    n_meas: int = 4


def build_state_space(params: PlantParams) -> StateSpace:
    """Assemble the seventh-order linear model from the parameter set."""
    params.validate()
    t = params.transmission
    g = params.geometry
    wc = params.clutch.omega_c
    k12 = t.k1 + t.k2
    k23 = t.k2 + t.k3
    A = np.array([
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-t.k1 / t.m1, -t.b1 / t.m1, t.k1 / t.m1, 0.0, 0.0, 0.0, 1.0 / t.m1],
        [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        [t.k1 / t.m2, 0.0, -k12 / t.m2, -t.b2 / t.m2, t.k2 / t.m2, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, t.k2 / t.m3, 0.0, -k23 / t.m3, -t.b3 / t.m3, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -wc],
    ])
    B = np.zeros((7, 1))
    B[6, 0] = wc
    C = np.array([
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        [t.k1 / g.area_master, 0.0, -t.k1 / g.area_master, 0.0, 0.0, 0.0, 0.0],
    ])
    C_d = np.array([[0.0, 0.0, t.k2 / g.area_slave, 0.0, -t.k2 / g.area_slave, 0.0, 0.0]])
    return StateSpace(A=A, B=B, C=C, C_d=C_d)


class Plant:
    """Nonlinear continuous-time actuator model plus unit conversions.

    One instance owns one simulation run's state derivative evaluation;
    it holds no mutable state itself, so instances can be shared across
    threads for independent runs.
    """

    def __init__(self, params: PlantParams | None = None):
        p = params if params is not None else PlantParams()
        p.validate()
        self.params = p
        t, c, g = p.transmission, p.clutch, p.geometry
        # scalar attributes for the hot integration loop
        self.k1, self.k2, self.k3 = t.k1, t.k2, t.k3
        self.b1, self.b2, self.b3 = t.b1, t.b2, t.b3
        self.k12 = t.k1 + t.k2
        self.k23 = t.k2 + t.k3
        self.inv_m1, self.inv_m2, self.inv_m3 = 1.0 / t.m1, 1.0 / t.m2, 1.0 / t.m3
        self.omega_c = c.omega_c
        self.tau_delay = c.tau_delay
        self.area_master = g.area_master
        self.area_slave = g.area_slave
        self.r_pulley = g.r_pulley
        self.p_dc = g.p_dc
        self.mu = p.friction.mu
        self.n_steepness = p.friction.n_steepness
        self.n_sign = p.friction.sign_regularization
        self.friction_mode = p.friction.mode
        self.force_per_torque = TWO_PI / g.screw_lead   # ideal screw [N per N.m]
        self.force_max = c.torque_max * self.force_per_torque

    # ---------------- clutch statics ----------------

    def mr_torque_from_current(self, current: float) -> float:
        """Static clutch torque for a coil current, clamped to the rating."""
        c = self.params.clutch
        if current < 0.0 or current > c.current_max:
            raise PlantError(f"current {current} A outside [0, {c.current_max}]")
        torque = ((c.poly_c3 * current + c.poly_c2) * current + c.poly_c1) * current + c.poly_c0
        return min(max(torque, 0.0), c.torque_max)

    def current_from_torque(self, torque: float) -> tuple[float, bool]:
        """Invert the static curve on its monotone branch.

        Returns (current, saturated).  Torque above the reachable maximum
        maps to current_max with the flag set; torque at or below the
        remnant maps to zero current.
        """
        c = self.params.clutch
        if torque < 0.0:
            raise PlantError("torque must be >= 0")
        saturated = False
        if torque > c.torque_max:
            torque = c.torque_max
            saturated = True
        if torque <= c.poly_c0:
            return 0.0, saturated
        if torque >= self.mr_torque_from_current(c.current_max):
            return c.current_max, True
        lo, hi = 0.0, c.current_max
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.mr_torque_from_current(mid) < torque:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi), saturated

    # ---------------- friction ----------------

    def friction_pressure(self, p_master: float, v1: float) -> float:
        """Pressure deviation produced by ball-screw friction.

        Positive for positive speed: the contribution that must be added
        to a command to cancel the loss.
        """
        if p_master < 0.0:
            raise PlantError("p_master must be >= 0")
        mode = self.friction_mode
        if mode == "off":
            return 0.0
        if mode == "stick_slip_sign":
            return self.mu * p_master * math.tanh(self.n_sign * v1)
        return self.mu * p_master * math.tanh(self.n_steepness * v1)

    # ---------------- pressure / torque / force conversions ----------------

    def pressure_from_torque(self, torque: float) -> tuple[float, bool]:
        """Joint torque -> absolute line pressure (DC pretension added).

        Returns (pressure, infeasible); a commanded pressure below zero
        gauge cannot be realized by a single pushing line.
        """
        p = torque / (self.area_slave * self.r_pulley) + self.p_dc
        if p < 0.0:
            return 0.0, True
        return p, False

    def torque_from_pressure(self, pressure: float) -> float:
        """Absolute slave pressure -> delivered joint torque."""
        return (pressure - self.p_dc) * self.area_slave * self.r_pulley

    def force_from_pressure(self, pressure: float) -> float:
        """Pressure command -> equivalent steady clutch force at the piston."""
        return pressure * self.area_slave

    def clutch_force_from_current(self, current: float) -> float:
        """Coil current -> steady screw thrust through the static curve."""
        return self.mr_torque_from_current(current) * self.force_per_torque

    def current_from_force(self, force: float) -> tuple[float, bool]:
        """Steady force command -> coil current, with saturation flag."""
        force = min(max(force, 0.0), self.force_max)
        return self.current_from_torque(force / self.force_per_torque)

    # ---------------- pressures from a state ----------------

    def master_pressure(self, state) -> float:
        return self.k1 * (state[0] - state[2]) / self.area_master

    def slave_pressure(self, state) -> float:
        return self.k2 * (state[2] - state[4]) / self.area_slave

    # ---------------- dynamics ----------------

    def derivative(self, state, f_cmd_delayed: float, backdrive=None, t: float = 0.0):
        """Time derivative of the 7-state vector.

        state: (x1, v1, x2, v2, x3, v3, f_mr) floats.
        f_cmd_delayed: commanded steady clutch force already delayed by
        tau_delay (the caller owns the delay buffer).
        backdrive: None for free output, else a callable t -> (x3, v3, a3)
        prescribing the third mass; its rows replace the m3 dynamics.
        """
        x1, v1, x2, v2, x3, v3, fmr = state
        pm = self.k1 * (x1 - x2) / self.area_master
        mode = self.friction_mode
        if mode == "off":
            ff = 0.0
        elif mode == "stick_slip_sign":
            ff = -self.mu * max(pm, 0.0) * math.tanh(self.n_sign * v1) * self.area_master
        else:
            ff = -self.mu * max(pm, 0.0) * math.tanh(self.n_steepness * v1) * self.area_master
        a1 = (-self.k1 * x1 - self.b1 * v1 + self.k1 * x2 + fmr + ff) * self.inv_m1
        a2 = (self.k1 * x1 - self.k12 * x2 - self.b2 * v2 + self.k2 * x3) * self.inv_m2
        if backdrive is None:
            d_x3 = v3
            a3 = (self.k2 * x2 - self.k23 * x3 - self.b3 * v3) * self.inv_m3
        else:
            _, v3p, a3p = backdrive(t)
            d_x3 = v3p
            a3 = a3p
        d_fmr = self.omega_c * (f_cmd_delayed - fmr)
        if fmr != fmr or a1 != a1:  # NaN guard
            raise FloatingPointError("non-finite plant state")
        return (v1, a1, v2, a2, d_x3, a3, d_fmr)

    def rk4_step(self, state, dt: float, f_cmd_delayed: float, backdrive=None, t: float = 0.0):
        """One classical fixed-step integration step."""
        d = self.derivative
        k1 = d(state, f_cmd_delayed, backdrive, t)
        s2 = tuple(state[j] + 0.5 * dt * k1[j] for j in range(7))
        k2 = d(s2, f_cmd_delayed, backdrive, t + 0.5 * dt)
        s3 = tuple(state[j] + 0.5 * dt * k2[j] for j in range(7))
        k3 = d(s3, f_cmd_delayed, backdrive, t + 0.5 * dt)
        s4 = tuple(state[j] + dt * k3[j] for j in range(7))
        k4 = d(s4, f_cmd_delayed, backdrive, t + dt)
        sixth = dt / 6.0
        return tuple(
            state[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            for j in range(7)
        )

    def mechanical_energy(self, state) -> float:
        """Kinetic plus spring potential energy of the three-mass chain."""
        x1, v1, x2, v2, x3, v3, _ = state
        t = self.params.transmission
        ke = 0.5 * (t.m1 * v1 * v1 + t.m2 * v2 * v2 + t.m3 * v3 * v3)
        pe = 0.5 * (self.k1 * (x1 - x2) ** 2 + self.k2 * (x2 - x3) ** 2 + self.k3 * x3 * x3)
        return ke + pe
