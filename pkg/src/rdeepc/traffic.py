"""Nonlinear mixed-traffic simulator.

A single lane of point vehicles driven by the optimal-velocity car-following
law, with one externally controlled vehicle (the CAV), a scripted lead
vehicle, and an instantaneous fuel-rate model. Front-to-back layout:

    index  0        1    2    3     4    5..8
    role   leader   hdv  hdv  head  cav  hdv x4

The "head" vehicle is the human-driven vehicle immediately ahead of the CAV;
its velocity error is the disturbance channel seen by the controller. For
offline data collection its velocity can be scripted directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_VEHICLES = 9
LEADER_IDX = 0
HEAD_IDX = 3
CAV_IDX = 4
ROLES = ("leader", "hdv", "hdv", "head", "cav", "hdv", "hdv", "hdv", "hdv")
# ids used in trajectory logs: head vehicle is 0, CAV is 1, followers 2..5
LOG_IDS = (-3, -2, -1, 0, 1, 2, 3, 4, 5)


@dataclass(frozen=True)
class OvmParams:
    """Optimal-velocity model parameters shared by all human-driven vehicles."""

    alpha: float = 0.6
    beta: float = 0.9
    spacing_stop: float = 5.0
    spacing_free: float = 35.0
    v_max: float = 30.0
    noise_amp: float = 0.1  # uniform acceleration noise half-width, m/s^2

    def __post_init__(self):
        if not (0.0 < self.spacing_stop < self.spacing_free):
            raise ValueError("need 0 < spacing_stop < spacing_free")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.noise_amp < 0:
            raise ValueError("noise_amp must be nonnegative")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    accel_min: float = -5.0
    accel_max: float = 2.0
    clip_hdv_accel: bool = True
    halt_on_collision: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.accel_min >= self.accel_max:
            raise ValueError("accel_min must be below accel_max")


def ovm_desired_velocity(spacing, params: OvmParams):
    """Spacing-dependent desired velocity: 0 below spacing_stop, v_max above
    spacing_free, cosine-shaped ramp in between."""
    s = np.asarray(spacing, dtype=float)
    p = params
    ramp = 0.5 * p.v_max * (1.0 - np.cos(np.pi * (s - p.spacing_stop)
                                         / (p.spacing_free - p.spacing_stop)))
    out = np.where(s <= p.spacing_stop, 0.0,
                   np.where(s >= p.spacing_free, p.v_max, ramp))
    return out if out.ndim else float(out)


def ovm_accel(spacing, velocity, velocity_ahead, params: OvmParams):
    """Car-following acceleration: relax toward the desired velocity and
    toward the predecessor's velocity."""
    return (params.alpha * (ovm_desired_velocity(spacing, params) - np.asarray(velocity, dtype=float))
            + params.beta * (np.asarray(velocity_ahead, dtype=float) - np.asarray(velocity, dtype=float)))


def equilibrium_spacing(v_eq: float, params: OvmParams) -> float:
    """Spacing at which the desired velocity equals v_eq (inverse of the ramp)."""
    p = params
    if not 0.0 <= v_eq <= p.v_max:
        raise ValueError(f"equilibrium velocity {v_eq} outside [0, {p.v_max}]")
    return p.spacing_stop + (p.spacing_free - p.spacing_stop) / math.pi \
        * math.acos(1.0 - 2.0 * v_eq / p.v_max)


def fuel_rate(velocity, accel):
    """Instantaneous fuel consumption in mL/s from velocity and acceleration.

    Below zero tractive demand the engine idles at a constant rate.
    """
    v = np.asarray(velocity, dtype=float)
    a = np.asarray(accel, dtype=float)
    demand = 0.333 + 0.00108 * v * v + 1.2 * a
    burn = 0.444 + 0.09 * demand * v + np.where(a > 0.0, 0.054 * a * a * v, 0.0)
    out = np.where(demand > 0.0, burn, 0.444)
    return out if out.ndim else float(out)


HOLD_VELOCITY = "hold_velocity"
CONSTANT_ACCEL = "constant_accel"


@dataclass(frozen=True)
class Segment:
    """One piece of a scripted velocity profile.

    mode "hold_velocity": value is the velocity held for the whole segment.
    mode "constant_accel": value is the acceleration applied for the segment.
    """

    duration: float
    mode: str
    value: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")
        if self.mode not in (HOLD_VELOCITY, CONSTANT_ACCEL):
            raise ValueError(f"unknown segment mode '{self.mode}'")


@dataclass
class ScenarioScript:
    """Piecewise velocity profile for a scripted vehicle."""

    initial_velocity: float
    segments: list[Segment] = field(default_factory=list)

    def total_duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def velocity_profile(self, dt: float, n_steps: int) -> np.ndarray:
        """Velocities at steps 0..n_steps-1; holds the final velocity after
        the last segment. Segment boundaries are hit exactly."""
        profile = np.empty(n_steps)
        v_seg = self.initial_velocity
        k = 0
        for seg in self.segments:
            n_seg = round(seg.duration / dt)
            if abs(n_seg * dt - seg.duration) > 1e-9:
                raise ValueError("segment duration must be a multiple of dt")
            if seg.mode == HOLD_VELOCITY:
                v_seg = seg.value
            for i in range(n_seg):
                if k >= n_steps:
                    return profile
                if seg.mode == HOLD_VELOCITY:
                    profile[k] = v_seg
                else:
                    profile[k] = v_seg + seg.value * (i * dt)
                k += 1
            if seg.mode == CONSTANT_ACCEL:
                v_seg = v_seg + seg.value * (n_seg * dt)
            if v_seg < -1e-12:
                raise ValueError("script drives velocity negative")
        profile[k:] = v_seg
        if np.any(profile < -1e-12):
            raise ValueError("script drives velocity negative")
        return profile


@dataclass
class StepResult:
    accel: np.ndarray        # effective accelerations over the step
    min_spacing: float
    collision: bool


class TrafficSim:
    """Mixed-traffic platoon around one controlled vehicle.

    cav_mode: "external" takes an acceleration input each step, "ovm" makes
    the CAV slot behave like one more human-driven vehicle.
    head_mode: "ovm" (closed loop) or "scripted" (velocity set by caller,
    used during offline data collection).

    Each vehicle owns an independent noise stream so that changing how one
    vehicle is driven never shifts the noise seen by the others.
    """

    def __init__(self, seed=0, v_init: float = 15.0,
                 params: OvmParams | None = None, config: SimConfig | None = None,
                 leader_script: ScenarioScript | None = None,
                 cav_mode: str = "external", head_mode: str = "ovm",
                 horizon_steps: int = 0):
        if cav_mode not in ("external", "ovm"):
            raise ValueError("cav_mode must be 'external' or 'ovm'")
        if head_mode not in ("ovm", "scripted"):
            raise ValueError("head_mode must be 'ovm' or 'scripted'")
        self.params = params or OvmParams()
        self.config = config or SimConfig()
        self.cav_mode = cav_mode
        self.head_mode = head_mode
        s_eq = equilibrium_spacing(v_init, self.params)
        self.vel = np.full(N_VEHICLES, float(v_init))
        self.pos = (N_VEHICLES - 1 - np.arange(N_VEHICLES)) * s_eq
        self.last_accel = np.zeros(N_VEHICLES)
        self.k = 0
        self.collided = False
        self.collision_step: int | None = None
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._rngs = [np.random.default_rng(s) for s in seq.spawn(N_VEHICLES)]
        if leader_script is not None:
            n = max(horizon_steps, round(leader_script.total_duration() / self.config.dt)) + 2
            self._leader_vel = leader_script.velocity_profile(self.config.dt, n)
            self.vel[LEADER_IDX] = self._leader_vel[0]
        else:
            self._leader_vel = None

    @property
    def time(self) -> float:
        return self.k * self.config.dt

    def spacings(self) -> np.ndarray:
        """Gap to the predecessor for each vehicle; nan for the leader."""
        out = np.full(N_VEHICLES, np.nan)
        out[1:] = self.pos[:-1] - self.pos[1:]
        return out

    def set_head_velocity(self, v: float) -> None:
        if self.head_mode != "scripted":
            raise ValueError("head vehicle is not scripted")
        self.vel[HEAD_IDX] = v

    def measure(self, v_star: float, s_star: float):
        """Disturbance sample and output sample in error coordinates.

        eps is the head vehicle's velocity error; the output stacks the
        velocity errors of the CAV and its followers, then the CAV spacing
        error, matching the per-step output layout used by the predictor.
        """
        eps = self.vel[HEAD_IDX] - v_star
        v_err = self.vel[CAV_IDX:] - v_star
        s_err = (self.pos[HEAD_IDX] - self.pos[CAV_IDX]) - s_star
        return eps, np.concatenate([v_err, [s_err]])

    def cav_spacing(self) -> float:
        return self.pos[HEAD_IDX] - self.pos[CAV_IDX]

    def _ovm_noise(self, idx: int) -> float:
        amp = self.params.noise_amp
        if amp == 0.0:
            return 0.0
        return amp * self._rngs[idx].uniform(-1.0, 1.0)

    def step(self, cav_accel: float | None = None,
             head_velocity: float | None = None) -> StepResult:
        """Advance one step: velocities first, then positions from the new
        velocities. Scripted vehicles have their velocity set exactly;
        dynamic vehicles integrate a clipped acceleration."""
        if self.collided and self.config.halt_on_collision:
            raise RuntimeError("simulation halted after collision")
        cfg, p = self.config, self.params
        spacing = self.pos[:-1] - self.pos[1:]
        new_vel = np.empty(N_VEHICLES)

        for i in range(N_VEHICLES):
            if i == LEADER_IDX:
                if self._leader_vel is not None:
                    new_vel[i] = self._leader_vel[min(self.k + 1, len(self._leader_vel) - 1)]
                else:
                    new_vel[i] = self.vel[i]
                continue
            if i == HEAD_IDX and self.head_mode == "scripted":
                if head_velocity is None:
                    raise ValueError("scripted head vehicle needs head_velocity")
                new_vel[i] = head_velocity
                continue
            if i == CAV_IDX and self.cav_mode == "external":
                if cav_accel is None:
                    raise ValueError("externally controlled CAV needs cav_accel")
                a = float(np.clip(cav_accel, cfg.accel_min, cfg.accel_max))
            else:
                a = float(ovm_accel(spacing[i - 1], self.vel[i], self.vel[i - 1], p))
                a += self._ovm_noise(i)
                if cfg.clip_hdv_accel:
                    a = float(np.clip(a, cfg.accel_min, cfg.accel_max))
            new_vel[i] = max(self.vel[i] + a * cfg.dt, 0.0)

        self.last_accel = (new_vel - self.vel) / cfg.dt
        self.vel = new_vel
        self.pos = self.pos + new_vel * cfg.dt
        self.k += 1

        gaps = self.pos[:-1] - self.pos[1:]
        min_spacing = float(gaps.min())
        collision = min_spacing <= 0.0
        if collision and not self.collided:
            self.collided = True
            self.collision_step = self.k
        return StepResult(accel=self.last_accel.copy(),
                          min_spacing=min_spacing, collision=collision)
