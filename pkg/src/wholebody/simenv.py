"""Desk-scale simulated wiping task with evaluation harness.

The robot stands at a table and must bring its right gripper into contact
with the surface and wipe to a goal disc while keeping contact.  The
paper-faithful variant locks the mobile base and the first two torso
joints and observes the goal as a vector; the extended variant unlocks
everything and observes a fused colored point cloud in which the goal is
distinguishable only by color.

Episodes are deterministic functions of (seed, action stream).  A scripted
demonstrator produces recorded trajectories by damped-least-squares
end-effector tracking with per-episode posture styles, so the recorded
action distribution is multi-modal in the torso/arm split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import control as C
from . import datastore as DS
from . import kinematics as K
from . import perception as P
from .errors import FaultState, OracleFailure

POLICY_DT = 0.1
CONTROL_TICKS_PER_STEP = 10


@dataclass
class WipeTaskConfig:
    """Task geometry, randomization, predicate, and variant switches."""

    table_height: float = 0.78
    table_x: tuple = (0.35, 1.10)
    table_y: tuple = (-0.65, 0.65)
    goal_radius: float = 0.06
    goal_x: tuple = (0.50, 0.62)
    goal_y: tuple = (-0.34, 0.02)
    wipe_distance: tuple = (0.16, 0.26)   # start-of-contact offset from the goal
    base_offset: tuple = (0.05, 0.05)     # +/- x, y randomization of the base
    contact_band: float = 0.005
    contact_debounce_ticks: int = 5   # contact onset confirmed after 50 ms in band
    penetration_tol: float = 0.02
    contact_ratio_required: float = 0.95
    torque_monitor_threshold: float = 250.0
    locked: str = "paper"                 # paper: base + first two torso joints
    observation: str = "goal"             # goal | cloud
    episode_seconds: float = 8.0
    n_pcd: int = 256
    crop: dict = field(default_factory=lambda: {
        "x": [0.0, 1.4], "y": [-0.9, 0.9], "z": [0.3, 1.6]})

    def spatial_limits(self) -> P.SpatialLimits:
        return P.SpatialLimits.from_dict(self.crop)

    def goal_limits(self) -> P.SpatialLimits:
        return P.SpatialLimits(self.goal_x, self.goal_y,
                               (self.table_height - 1.0, self.table_height + 1.0))

    @staticmethod
    def from_yaml(path) -> "WipeTaskConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        for key in ("table_x", "table_y", "goal_x", "goal_y", "wipe_distance",
                    "base_offset"):
            if key in data:
                data[key] = tuple(data[key])
        return WipeTaskConfig(**data)

    def to_yaml(self, path) -> None:
        data = dict(self.__dict__)
        for key, val in data.items():
            if isinstance(val, tuple):
                data[key] = list(val)
        with open(path, "w") as f:
            yaml.safe_dump(data, f, sort_keys=True)


@dataclass
class EpisodeEvents:
    """Safety-violation log; each violation recorded once per onset."""

    violations: list = field(default_factory=list)
    _active: set = field(default_factory=set)

    def update(self, kind: str, active: bool, tick: int) -> bool:
        if active and kind not in self._active:
            self._active.add(kind)
            self.violations.append((tick, kind))
            return True
        if not active:
            self._active.discard(kind)
        return False


class WipeEnv:
    """Single episode of the wiping task over the simulated plant."""

    EE_FRAME = "right_gripper"
    WRIST_FRAME = "right_arm_j6"

    def __init__(self, model: K.RobotModel, config: WipeTaskConfig | None = None,
                 controller: C.ControllerConfig | None = None):
        self.model = model
        self.config = config or WipeTaskConfig()
        self.plant = C.Plant(model, controller or C.ControllerConfig())
        self.goal = np.zeros(3)
        self.tick = 0
        self.events = EpisodeEvents()
        self.success = False
        self.faulted = False
        self.first_contact_tick: int | None = None
        self.contact = False
        self.contact_ticks = 0
        self.motion_ticks_since_contact = 0
        self.wipe_progress = 0.0
        self._d0 = None
        self._streak = 0
        self._prev_targets = None
        self._locked_torso_idx = [0, 1] if self.config.locked == "paper" else []
        self._lock_base = self.config.locked == "paper"
        self._locked_torso_values = np.zeros(len(self._locked_torso_idx))

    # -- episode control -------------------------------------------------------

    def reset(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        cfg = self.config
        state = self.model.neutral_state()
        state.q_base[0] = rng.uniform(-cfg.base_offset[0], cfg.base_offset[0])
        state.q_base[1] = rng.uniform(-cfg.base_offset[1], cfg.base_offset[1])
        self.plant.reset(state)
        gx = rng.uniform(*cfg.goal_x) + state.q_base[0]
        gy = rng.uniform(*cfg.goal_y) + state.q_base[1]
        self.goal = np.array([gx, gy, cfg.table_height])
        self.tick = 0
        self.events = EpisodeEvents()
        self.success = False
        self.faulted = False
        self.first_contact_tick = None
        self.contact = False
        self.contact_ticks = 0
        self.motion_ticks_since_contact = 0
        self.wipe_progress = 0.0
        self._d0 = None
        self._streak = 0
        self._prev_targets = None
        self._locked_torso_values = state.q_torso[self._locked_torso_idx].copy()
        return self.observe()

    def reset_to(self, q: np.ndarray, qd: np.ndarray, extra: dict | None = None) -> dict:
        """Restore a recorded initial state (replay support); goal from header."""
        if extra and "goal" in extra:
            self.goal = np.asarray(extra["goal"], dtype=float)
        state = K.JointState.from_vector(self.model, np.asarray(q, dtype=float),
                                         np.asarray(qd, dtype=float))
        self.plant.reset(state)
        self.tick = 0
        self.events = EpisodeEvents()
        self.success = False
        self.faulted = False
        self.first_contact_tick = None
        self.contact = False
        self.contact_ticks = 0
        self.motion_ticks_since_contact = 0
        self.wipe_progress = 0.0
        self._d0 = None
        self._streak = 0
        self._prev_targets = None
        self._locked_torso_values = state.q_torso[self._locked_torso_idx].copy()
        return self.observe()

    def set_goal(self, goal: np.ndarray) -> None:
        self.goal = np.asarray(goal, dtype=float)

    # -- observation -----------------------------------------------------------

    def ee_position(self, state: K.JointState | None = None) -> np.ndarray:
        st = state or self.plant.state
        return K.forward_kinematics(self.model, st, self.EE_FRAME).translation

    def goal_observation(self) -> np.ndarray:
        """Goal position normalized to [-1, 1] against the goal region box."""
        lim = self.config.goal_limits()
        return 2.0 * (self.goal - lim.lo()) / (lim.hi() - lim.lo()) - 1.0

    def proprioception(self) -> np.ndarray:
        st = self.plant.state
        return np.concatenate([st.qd_base, st.q_torso, st.q_arms, st.q_grippers])

    def synthetic_cloud(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Fused, cropped, sampled, normalized cloud from scene primitives."""
        cfg = self.config
        cropped = self.synthetic_cloud_raw(rng)
        sampled = P.fps_downsample(cropped, cfg.n_pcd)
        return P.normalize_for_policy(sampled, cfg.spatial_limits(), cfg.n_pcd)

    def synthetic_cloud_raw(self, rng: np.random.Generator | None = None) -> P.EgoPointCloud:
        """Fused and cropped cloud in base-frame meters with 0..255 colors."""
        cfg = self.config
        rng = rng or np.random.default_rng(self.tick * 7919 + 1)
        st = self.plant.state
        pts = []

        def colored(xyz, rgb):
            block = np.empty((len(xyz), 6))
            block[:, :3] = xyz
            block[:, 3:] = rgb
            return block

        nx, ny = 26, 22
        gx, gy = np.meshgrid(np.linspace(*cfg.table_x, nx),
                             np.linspace(*cfg.table_y, ny))
        table = np.stack([gx.ravel(), gy.ravel(),
                          np.full(nx * ny, cfg.table_height)], axis=1)
        table += rng.normal(0, 0.002, table.shape)
        pts.append(colored(table, (180, 180, 180)))

        ang = rng.uniform(0, 2 * math.pi, 90)
        rad = cfg.goal_radius * np.sqrt(rng.uniform(0, 1, 90))
        disc = np.stack([self.goal[0] + rad * np.cos(ang),
                         self.goal[1] + rad * np.sin(ang),
                         np.full(90, cfg.table_height + 0.001)], axis=1)
        pts.append(colored(disc, (220, 40, 40)))

        frames = ["torso_hip", "torso_waist", "right_arm_j2", "right_arm_j4",
                  "right_arm_j6", "right_gripper", "left_arm_j4", "left_gripper"]
        body = np.stack([K.forward_kinematics(self.model, st, f).translation
                         for f in frames])
        body = np.repeat(body, 4, axis=0) + rng.normal(0, 0.01, (len(frames) * 4, 3))
        pts.append(colored(body, (40, 90, 220)))

        world = np.concatenate(pts, axis=0)
        cam = K.forward_kinematics(self.model, st, "head_camera")
        in_cam = cam.inverse().apply(world[:, :3])
        cloud = P.CameraCloud(np.hstack([in_cam, world[:, 3:]]), "head_camera")
        fused = P.fuse_clouds([cloud], {"head_camera": cam})
        return P.crop(fused, cfg.spatial_limits())

    def observe(self) -> dict:
        obs = {"prop": self.proprioception(), "tick": self.tick}
        if self.config.observation == "cloud":
            obs["cloud"] = self.synthetic_cloud()
        else:
            obs["goal"] = self.goal_observation()
        return obs

    # -- dynamics ----------------------------------------------------------------

    def _apply_lock(self, action: np.ndarray) -> C.PlantTargets:
        a = np.asarray(action, dtype=float)
        base = C.BaseCommand(0.0, 0.0, 0.0) if self._lock_base \
            else C.BaseCommand(a[0], a[1], a[2])
        torso = a[3:7].copy()
        for j, idx in enumerate(self._locked_torso_idx):
            torso[idx] = self._locked_torso_values[j]
        return C.PlantTargets(torso, a[7:19].copy(), a[19:21].copy(), base)

    def _update_task_state(self) -> list:
        cfg = self.config
        st = self.plant.state
        events = []
        ee = self.ee_position(st)
        over_table = (cfg.table_x[0] <= ee[0] <= cfg.table_x[1]
                      and cfg.table_y[0] <= ee[1] <= cfg.table_y[1])
        dz = ee[2] - cfg.table_height
        ee_vel_ok = True
        in_band = over_table and abs(dz) <= cfg.contact_band and ee_vel_ok
        self.contact = bool(in_band)
        self._streak = self._streak + 1 if in_band else 0
        if self.first_contact_tick is None:
            if self._streak >= cfg.contact_debounce_ticks:
                # debounced onset: a momentary graze does not start the clock
                self.first_contact_tick = self.tick - self._streak + 1
                self.motion_ticks_since_contact = self._streak
                self.contact_ticks = self._streak
                self._d0 = max(float(np.linalg.norm(ee[:2] - self.goal[:2])), 1e-6)
        else:
            self.motion_ticks_since_contact += 1
            if self.contact:
                self.contact_ticks += 1
                d = float(np.linalg.norm(ee[:2] - self.goal[:2]))
                self.wipe_progress = max(self.wipe_progress,
                                         (self._d0 - d) / self._d0)

        # force proxy: pressing well below the surface
        if self.events.update("over-torque",
                              over_table and dz < -cfg.penetration_tol, self.tick):
            events.append("violation:over-torque")
        # non-end-effector structure under the table plane counts as collision
        wrist = K.forward_kinematics(self.model, st, self.WRIST_FRAME).translation
        wrist_hit = (cfg.table_x[0] <= wrist[0] <= cfg.table_x[1]
                     and cfg.table_y[0] <= wrist[1] <= cfg.table_y[1]
                     and wrist[2] < cfg.table_height - 0.5 * cfg.penetration_tol)
        if self.events.update("collision", wrist_hit, self.tick):
            events.append("violation:collision")

        if not self.success and self.contact and self.first_contact_tick is not None:
            ratio = self.contact_ticks / max(self.motion_ticks_since_contact, 1)
            at_goal = np.linalg.norm(ee[:2] - self.goal[:2]) <= cfg.goal_radius
            if at_goal and ratio >= cfg.contact_ratio_required:
                self.success = True
        return events

    def step(self, action: np.ndarray) -> tuple[K.JointState, list]:
        """Advance one policy period (10 control ticks).

        The 10 Hz position targets are converted into per-tick waypoints:
        each control tick interpolates from the previous target toward the
        new one, as the real controller does at 100 Hz.
        """
        a = np.asarray(action, dtype=float)
        if not np.isfinite(a).all():
            raise FaultState("non-finite action")
        targets = self._apply_lock(a)
        st = self.plant.state
        if self._prev_targets is None:
            self._prev_targets = (st.q_torso.copy(), st.q_arms.copy(),
                                  st.q_grippers.copy())
        p_torso, p_arms, p_grip = self._prev_targets
        events: list = []
        for i in range(CONTROL_TICKS_PER_STEP):
            f = (i + 1) / CONTROL_TICKS_PER_STEP
            waypoint = C.PlantTargets(
                p_torso + f * (targets.torso - p_torso),
                p_arms + f * (targets.arms - p_arms),
                p_grip + f * (targets.grippers - p_grip),
                targets.base,
            )
            try:
                self.plant.step(waypoint)
            except FaultState:
                self.faulted = True
                self.events.update("over-torque", True, self.tick)
                events.append("violation:over-torque")
                events.append("fault")
                return self.plant.snapshot(), events
            self.tick += 1
            events.extend(self._update_task_state())
        self._prev_targets = (targets.torso.copy(), targets.arms.copy(),
                              targets.grippers.copy())
        return self.plant.snapshot(), events

    @property
    def done(self) -> bool:
        horizon = int(self.config.episode_seconds / POLICY_DT) * CONTROL_TICKS_PER_STEP
        return self.success or self.faulted or self.tick >= horizon

    @property
    def contact_ratio(self) -> float:
        if self.first_contact_tick is None:
            return 0.0
        return self.contact_ticks / max(self.motion_ticks_since_contact, 1)


# -- scripted demonstrator -------------------------------------------------------


ARM_DOFS = [f"right_arm_j{i}" for i in range(1, 7)]


@dataclass
class OracleStyle:
    """Per-episode posture style: how much the torso participates."""

    hip_lean: float
    waist_share: float

    @staticmethod
    def sample(rng: np.random.Generator) -> "OracleStyle":
        # two clearly separated modes: arm-dominant and torso-dominant
        if rng.random() < 0.5:
            return OracleStyle(hip_lean=rng.uniform(0.12, 0.16), waist_share=0.0)
        return OracleStyle(hip_lean=rng.uniform(0.32, 0.40),
                           waist_share=rng.uniform(0.4, 0.7))


class WipeOracle:
    """Damped-least-squares end-effector tracker with a scripted waypoint plan.

    Phases: lean into the style posture while hovering over the contact
    start point, descend to the surface, then slide to the goal.  The arm
    tracks the end-effector target through DLS with a nullspace pull
    toward a comfortable elbow, so torso motion is compensated by the arm.
    """

    def __init__(self, env: WipeEnv, rng: np.random.Generator,
                 style: OracleStyle | None = None):
        self.env = env
        self.style = style or OracleStyle.sample(rng)
        self.rng = rng
        self._plan()
        self.phase = 0
        self._lean_progress = 0.0

    def _required_lean(self, point_xy: np.ndarray) -> float:
        """Smallest hip lean that brings the point comfortably inside reach."""
        env = self.env
        st = env.plant.state.copy()
        for alpha in np.linspace(0.0, 0.5, 21):
            st.q_torso[2] = env.model.neutral_state().q_torso[2] + alpha
            shoulder = K.forward_kinematics(env.model, st, "right_arm_j1").translation
            dz = shoulder[2] - env.config.table_height
            # reach of the arm with a slightly bent elbow
            reach_sq = 0.90 ** 2 - dz * dz
            if reach_sq <= 0:
                continue
            if np.linalg.norm(point_xy - shoulder[:2]) <= math.sqrt(reach_sq) - 0.02:
                return float(alpha)
        return 0.5

    def _plan(self) -> None:
        cfg = self.env.config
        goal = self.env.goal
        ee0 = self.env.ee_position()
        toward_robot = ee0[:2] - goal[:2]
        dist = np.linalg.norm(toward_robot)
        direction = toward_robot / max(dist, 1e-9)
        span = self.rng.uniform(*cfg.wipe_distance)
        start = goal[:2] + direction * span
        start[0] = np.clip(start[0], cfg.table_x[0] + 0.05, cfg.goal_x[1])
        start[1] = np.clip(start[1], cfg.table_y[0] + 0.05, cfg.table_y[1] - 0.05)
        z = cfg.table_height
        self.waypoints = [
            np.array([start[0], start[1], z + 0.07]),
            np.array([start[0], start[1], z + 0.001]),
            np.array([goal[0], goal[1], z + 0.001]),
        ]
        self.speeds = [0.30, 0.06, 0.16]
        needed = max(self._required_lean(start), self._required_lean(goal[:2]))
        self.style.hip_lean = max(self.style.hip_lean, needed + 0.02)

    def _desired_point(self, ee: np.ndarray) -> np.ndarray:
        target = self.waypoints[self.phase]
        # descend only once the posture is settled; slide only once truly
        # touched down (the contact band is tight)
        if self.phase == 0 and np.linalg.norm(target - ee) < 0.012 \
                and self._lean_progress >= 1.0:
            self.phase = 1
            target = self.waypoints[self.phase]
        elif self.phase == 1 and abs(ee[2] - target[2]) <= 0.003:
            self.phase = 2
            target = self.waypoints[self.phase]
        step = self.speeds[self.phase] * POLICY_DT
        delta = target - ee
        n = np.linalg.norm(delta)
        return ee + (delta if n <= step else delta / n * step)

    def action(self) -> np.ndarray:
        env = self.env
        model = env.model
        st = env.plant.state
        ee = env.ee_position(st)
        p_des = self._desired_point(ee)

        # torso participation: ramp the hip lean and waist turn while hovering
        self._lean_progress = min(self._lean_progress + 0.05, 1.0)
        neutral = model.neutral_state()
        torso_target = st.q_torso.copy()
        torso_target[2] = neutral.q_torso[2] + self.style.hip_lean * self._lean_progress
        bearing = math.atan2(env.goal[1] - st.q_base[1], env.goal[0] - st.q_base[0])
        torso_target[3] = self.style.waist_share * bearing * self._lean_progress

        jac = K.jacobian(model, st, env.EE_FRAME, ARM_DOFS)[:3]
        delta_x = p_des - ee
        if self.phase >= 1:
            delta_x = delta_x * np.array([1.0, 1.0, 1.8])  # prioritize the band
        lam = 0.05
        jp = jac.T @ np.linalg.inv(jac @ jac.T + lam * lam * np.eye(3))
        dq = jp @ delta_x
        if self.phase == 0:
            comfort = neutral.q_arms[6:12] - st.q_arms[6:12]
            dq += 0.2 * (np.eye(6) - np.linalg.pinv(jac) @ jac) @ comfort
        dq = np.clip(dq, -0.12, 0.12)

        action = np.zeros(21)
        action[3:7] = torso_target
        arms = st.q_arms.copy()
        arms[6:12] = st.q_arms[6:12] + dq
        arms[0:6] = neutral.q_arms[0:6]
        action[7:19] = arms
        action[19:21] = st.q_grippers
        return action


def oracle_demonstrate(env: WipeEnv, seed: int,
                       max_steps: int | None = None) -> DS.Trajectory:
    """Run the scripted demonstrator and record a 10 Hz trajectory."""
    obs = env.reset(seed)
    rng = np.random.default_rng(seed + 10_000_019)
    oracle = WipeOracle(env, rng)
    header = DS.TrajectoryHeader(
        task_id="wipe", model_checksum=env.model.checksum,
        crop_box=env.config.crop if env.config.observation == "cloud" else None,
        obs_variant=env.config.observation,
        extra={"seed": seed, "goal": env.goal.tolist(),
               "locked": env.config.locked},
    )
    rec = DS.Recorder(header)
    rec.start()
    horizon = max_steps or int(env.config.episode_seconds / POLICY_DT)
    for _ in range(horizon):
        action = oracle.action()
        rec.on_tick(env.tick, env.plant.state, action,
                    goal=obs.get("goal"), cloud=obs.get("cloud"))
        _, events = env.step(action)
        obs = env.observe()
        if env.success:
            break
        if env.faulted:
            raise OracleFailure(f"demonstrator faulted on seed {seed}")
    if not env.success:
        raise OracleFailure(f"demonstrator failed to reach the goal on seed {seed}")
    traj = DS.Trajectory(rec.header, rec.steps, rec.blobs, "saved",
                         {"task": True, "contact_ratio": env.contact_ratio})
    return traj


# -- evaluation -------------------------------------------------------------------


@dataclass
class EpisodeResult:
    success: bool
    violations: int
    policy_steps: int
    contact_ratio: float


@dataclass
class EvalReport:
    per_seed_success: list
    mean_success: float
    std_success: float
    violations: int
    mean_episode_steps: float
    n_rollouts: int

    def to_text(self) -> str:
        lines = [
            "evaluation report",
            f"  rollouts per seed : {self.n_rollouts}",
            f"  seeds             : {len(self.per_seed_success)}",
            f"  success           : {self.mean_success:.1%} +/- {self.std_success:.1%}",
            f"  per-seed          : {[round(s, 3) for s in self.per_seed_success]}",
            f"  safety violations : {self.violations}",
            f"  mean episode steps: {self.mean_episode_steps:.1f}",
        ]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"per_seed_success": self.per_seed_success,
                "mean_success": self.mean_success, "std_success": self.std_success,
                "violations": self.violations,
                "mean_episode_steps": self.mean_episode_steps,
                "n_rollouts": self.n_rollouts}


def run_episode(env: WipeEnv, actor, seed: int) -> EpisodeResult:
    """Roll one episode with ``actor(obs, env) -> action`` at 10 Hz."""
    obs = env.reset(seed)
    violations = 0
    steps = 0
    while not env.done:
        action = actor(obs, env)
        _, events = env.step(np.asarray(action))
        violations += sum(1 for e in events if str(e).startswith("violation"))
        obs = env.observe()
        steps += 1
    return EpisodeResult(env.success, violations, steps, env.contact_ratio)


def evaluate(make_actor, model: K.RobotModel, config: WipeTaskConfig,
             n_rollouts: int, seeds: list[int],
             episode_seed_base: int = 50_000) -> EvalReport:
    """Fig-style protocol: for each seed, a fresh actor runs ``n_rollouts``."""
    per_seed = []
    violations = 0
    lengths = []
    for si, seed in enumerate(seeds):
        actor = make_actor(seed)
        wins = 0
        for r in range(n_rollouts):
            env = WipeEnv(model, config)
            res = run_episode(env, actor, episode_seed_base + 1000 * si + r)
            wins += int(res.success)
            violations += res.violations
            lengths.append(res.policy_steps)
        per_seed.append(wins / n_rollouts)
    return EvalReport(per_seed, float(np.mean(per_seed)), float(np.std(per_seed)),
                      violations, float(np.mean(lengths)), n_rollouts)
