"""Teleoperation-grade controllers and the simulated plant.

Torso and arms track target joint positions under a joint impedance law;
the mobile base takes velocity commands subject to velocity and
acceleration limits; leader arms receive a bilateral feedback torque.  The
plant advances at 100 Hz (dt = 0.01 s) while policies act at 10 Hz, each
policy action repeated for 10 consecutive control ticks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import FaultState, ShapeError
from .kinematics import JointState, RobotModel, clamp_to_limits

# mobile base datasheet limits: velocity (m/s, m/s, rad/s), acceleration
BASE_VEL_LIMITS = np.array([1.5, 1.5, 3.0])
BASE_ACCEL_LIMITS = np.array([2.5, 1.0, 1.0])

CONTROL_DT = 0.01
POLICY_PERIOD = 0.1
ACTION_REPEAT = 10


def _as_vec(x, name):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class ImpedanceGains:
    """Per-joint proportional/derivative gains for position tracking."""

    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kp", _as_vec(self.kp, "kp"))
        object.__setattr__(self, "kd", _as_vec(self.kd, "kd"))
        if self.kp.shape != self.kd.shape:
            raise ShapeError("kp and kd lengths differ")
        if (self.kp < 0).any() or (self.kd < 0).any():
            raise ValueError("impedance gains must be non-negative")


@dataclass(frozen=True)
class BilateralGains:
    """Gains of the leader-arm feedback law, plus the constant damping term."""

    kp: np.ndarray
    kd: np.ndarray
    k_damp: np.ndarray

    def __post_init__(self):
        for name in ("kp", "kd", "k_damp"):
            object.__setattr__(self, name, _as_vec(getattr(self, name), name))
            if (getattr(self, name) < 0).any():
                raise ValueError(f"{name} must be non-negative")
        if not (self.kp.shape == self.kd.shape == self.k_damp.shape):
            raise ShapeError("bilateral gain lengths differ")


@dataclass(frozen=True)
class BaseCommand:
    """Planar base velocity command (body frame)."""

    v_forward: float = 0.0
    v_lateral: float = 0.0
    v_yaw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v_forward, self.v_lateral, self.v_yaw])

    @staticmethod
    def from_array(a) -> "BaseCommand":
        return BaseCommand(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlTick:
    """Position of a control tick in the 100 Hz / 10 Hz cadence."""

    index: int
    dt: float = CONTROL_DT
    policy_period: float = POLICY_PERIOD

    def __post_init__(self):
        repeat = self.policy_period / self.dt
        if abs(repeat - round(repeat)) > 1e-12:
            raise ValueError("policy period must be an exact multiple of dt")

    @property
    def action_repeat(self) -> int:
        return round(self.policy_period / self.dt)

    @property
    def policy_index(self) -> int:
        return self.index // self.action_repeat

    @property
    def is_policy_tick(self) -> bool:
        return self.index % self.action_repeat == 0


def impedance_torque(gains: ImpedanceGains, q_target, q, qdot) -> np.ndarray:
    """Follower torque: kp * (q_target - q) - kd * qdot."""
    q_target, q, qdot = (_as_vec(v, n) for v, n in
                         ((q_target, "q_target"), (q, "q"), (qdot, "qdot")))
    if not (q_target.shape == q.shape == qdot.shape == gains.kp.shape):
        raise ShapeError("impedance_torque: vector lengths disagree")
    return gains.kp * (q_target - q) - gains.kd * qdot


def bilateral_torque(gains: BilateralGains, q_robot, q_leader,
                     qd_robot, qd_leader) -> np.ndarray:
    """Leader-arm feedback: kp*(q_robot - q_leader) + kd*(qd_robot - qd_leader) - k_damp."""
    vecs = [_as_vec(v, n) for v, n in ((q_robot, "q_robot"), (q_leader, "q_leader"),
                                       (qd_robot, "qd_robot"), (qd_leader, "qd_leader"))]
    if not all(v.shape == gains.kp.shape for v in vecs):
        raise ShapeError("bilateral_torque: vector lengths disagree")
    q_r, q_l, qd_r, qd_l = vecs
    return gains.kp * (q_r - q_l) + gains.kd * (qd_r - qd_l) - gains.k_damp


def limit_base_command(cmd: BaseCommand, prev: BaseCommand, dt: float,
                       vel_limits=BASE_VEL_LIMITS,
                       accel_limits=BASE_ACCEL_LIMITS) -> BaseCommand:
    """Clamp to velocity limits, then rate-limit against the previous command."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = np.clip(cmd.as_array(), -vel_limits, vel_limits)
    dv = np.clip(v - prev.as_array(), -accel_limits * dt, accel_limits * dt)
    return BaseCommand.from_array(prev.as_array() + dv)


@dataclass(frozen=True)
class GamepadState:
    """Operator input snapshot.

    Sticks are (up, right) pairs in [-1, 1]; triggers in [0, 1].  The
    yaw-mode button repurposes the right stick's horizontal axis for base
    yaw instead of waist rotation.
    """

    left_stick: tuple[float, float] = (0.0, 0.0)
    right_stick: tuple[float, float] = (0.0, 0.0)
    dpad_up: bool = False
    dpad_down: bool = False
    trigger_left: float = 0.0
    trigger_right: float = 0.0
    yaw_mode: bool = False

    def is_zero(self) -> bool:
        return (self.left_stick == (0.0, 0.0) and self.right_stick == (0.0, 0.0)
                and not self.dpad_up and not self.dpad_down
                and self.trigger_left == 0.0 and self.trigger_right == 0.0)


@dataclass(frozen=True)
class MappedCommand:
    base: BaseCommand
    torso_delta: np.ndarray          # [knee1, knee2, hip, waist] increments (rad)
    gripper_targets: np.ndarray | None  # [left, right] widths (m); None = hold
    clamped: bool = False            # an axis was out of range


@dataclass
class GamepadMapConfig:
    """Scales for one mapped command (increments are per command message)."""

    waist_step: float = 0.015
    hip_step: float = 0.015
    knee_step: float = 0.012
    gripper_stroke: float = 0.1


def gamepad_map(inp: GamepadState, config: GamepadMapConfig | None = None) -> MappedCommand:
    """Map one input snapshot to base velocity, torso increments, gripper targets.

    Left stick scales to the base velocity limits; the right stick nudges
    waist yaw and hip pitch (or base yaw while yaw-mode is held); up/down
    keys apply equal-and-opposite knee increments, changing torso height
    while keeping the upper torso level; triggers map affinely to gripper
    width, pressed = closed.  An all-zero snapshot is the unplugged-gamepad
    failsafe: it commands zero motion and leaves gripper targets unchanged.
    """
    cfg = config or GamepadMapConfig()
    raw = np.array([*inp.left_stick, *inp.right_stick,
                    inp.trigger_left, inp.trigger_right])
    lo = np.array([-1.0, -1.0, -1.0, -1.0, 0.0, 0.0])
    hi = np.ones(6)
    clamped = bool((raw < lo).any() or (raw > hi).any())
    ls_up, ls_right, rs_up, rs_right, t_l, t_r = np.clip(raw, lo, hi)

    if inp.is_zero():
        return MappedCommand(BaseCommand(), np.zeros(4), None, clamped)

    base = BaseCommand(
        v_forward=BASE_VEL_LIMITS[0] * ls_up,
        v_lateral=-BASE_VEL_LIMITS[1] * ls_right,  # stick right -> move right (-y)
        v_yaw=-BASE_VEL_LIMITS[2] * rs_right if inp.yaw_mode else 0.0,
    )
    delta = np.zeros(4)
    if not inp.yaw_mode:
        delta[3] = -cfg.waist_step * rs_right   # waist yaw, stick right -> turn right
        delta[2] = cfg.hip_step * rs_up         # hip pitch, stick up -> lean forward
    if inp.dpad_up:
        delta[0] -= cfg.knee_step
        delta[1] += cfg.knee_step
    if inp.dpad_down:
        delta[0] += cfg.knee_step
        delta[1] -= cfg.knee_step
    grippers = cfg.gripper_stroke * (1.0 - np.array([t_l, t_r]))
    return MappedCommand(base, delta, grippers, clamped)


@dataclass
class PlantTargets:
    """Setpoints for one control tick."""

    torso: np.ndarray
    arms: np.ndarray
    grippers: np.ndarray
    base: BaseCommand = field(default_factory=BaseCommand)


@dataclass
class ControllerConfig:
    """Gains, time constants, and limits of the control stack."""

    arm_kp: list = field(default_factory=lambda: [140.0, 200.0, 120.0, 20.0, 20.0, 20.0])
    arm_kd: list = field(default_factory=lambda: [10.0, 50.0, 5.0, 1.0, 1.0, 0.4])
    torso_kp: list = field(default_factory=lambda: [200.0, 200.0, 200.0, 120.0])
    torso_kd: list = field(default_factory=lambda: [20.0, 20.0, 20.0, 10.0])
    bilateral_kp: list = field(default_factory=lambda: [0.5] * 6)
    bilateral_kd: list = field(default_factory=lambda: [0.01] * 6)
    bilateral_k_damp: list = field(default_factory=lambda: [0.05] * 6)
    tracking_time_constant: float = 0.05
    gripper_rate: float = 0.4
    torque_fault_threshold: float = 300.0

    def arm_gains(self) -> ImpedanceGains:
        return ImpedanceGains(np.array(self.arm_kp * 2), np.array(self.arm_kd * 2))

    def torso_gains(self) -> ImpedanceGains:
        return ImpedanceGains(np.array(self.torso_kp), np.array(self.torso_kd))

    def leader_gains(self) -> BilateralGains:
        return BilateralGains(np.array(self.bilateral_kp), np.array(self.bilateral_kd),
                              np.array(self.bilateral_k_damp))

    @staticmethod
    def from_yaml(path) -> "ControllerConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return ControllerConfig(**data)

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.__dict__, f, sort_keys=True)


class Plant:
    """Simulated robot: first-order joint tracking, integrating base, slewing
    grippers.  Exactly one owner advances the state; ``snapshot`` returns an
    immutable copy for concurrent readers."""

    def __init__(self, model: RobotModel, config: ControllerConfig | None = None,
                 state: JointState | None = None):
        self.model = model
        self.config = config or ControllerConfig()
        self.state = (state or model.neutral_state()).copy()
        self.faulted = False

    def snapshot(self) -> JointState:
        return self.state.copy()

    def reset(self, state: JointState) -> None:
        self.state = state.copy()
        self.faulted = False

    def step(self, targets: PlantTargets, dt: float = CONTROL_DT) -> JointState:
        """Advance one control tick toward ``targets``; returns the new state."""
        if self.faulted:
            raise FaultState("plant is latched in a fault state; reset required")
        cmd = targets.base.as_array()
        flat = np.concatenate([targets.torso, targets.arms, targets.grippers, cmd])
        if np.isnan(flat).any():
            self.faulted = True
            raise FaultState("NaN in control targets")

        st = self.state
        torso_tau = impedance_torque(self.config.torso_gains(), targets.torso,
                                     st.q_torso, st.qd_torso)
        arm_tau = impedance_torque(self.config.arm_gains(), targets.arms,
                                   st.q_arms, st.qd_arms)
        peak = max(np.abs(torso_tau).max(), np.abs(arm_tau).max(), 0.0)
        if peak > self.config.torque_fault_threshold:
            self.faulted = True
            raise FaultState(f"torque spike {peak:.1f} N.m exceeds fault threshold")

        limited = limit_base_command(targets.base, BaseCommand.from_array(st.qd_base), dt)
        v = limited.as_array()
        yaw = st.q_base[2]
        new_base = st.q_base + np.array([
            (v[0] * math.cos(yaw) - v[1] * math.sin(yaw)) * dt,
            (v[0] * math.sin(yaw) + v[1] * math.cos(yaw)) * dt,
            v[2] * dt,
        ])

        alpha = 1.0 - math.exp(-dt / self.config.tracking_time_constant)
        new_torso = st.q_torso + alpha * (targets.torso - st.q_torso)
        new_arms = st.q_arms + alpha * (targets.arms - st.q_arms)
        max_dw = self.config.gripper_rate * dt
        new_grip = st.q_grippers + np.clip(targets.grippers - st.q_grippers,
                                           -max_dw, max_dw)

        nxt = JointState(
            new_base, new_torso, new_arms, new_grip,
            v.copy(),                            # base velocity kept in body frame
            (new_torso - st.q_torso) / dt,
            (new_arms - st.q_arms) / dt,
            (new_grip - st.q_grippers) / dt,
        )
        self.state = clamp_to_limits(self.model, nxt)
        return self.snapshot()


def run_control_step(plant: Plant, targets: PlantTargets,
                     tick: ControlTick | None = None) -> JointState:
    """Advance the plant one control period."""
    dt = tick.dt if tick is not None else CONTROL_DT
    return plant.step(targets, dt)
