"""Kinematic model of the wheeled dual-arm embodiment.

The robot is a tree of links, each attached to its parent by exactly one
joint: a 3-DoF planar joint for the mobile base, revolute joints for torso
and arms, prismatic joints for gripper widths.  All quantities are SI
(meters, radians).  Models are loaded from a self-describing text file; the
canonical ``r1.model`` shipped in ``data/`` matches the published joint
ranges and aggregate dimensions of the target platform.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import InvalidChain, InvalidState, NotFound, ShapeError

PLANAR = "planar-base"
REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"

UNBOUNDED = (-math.inf, math.inf)


def rotation_rpy(r: float, p: float, y: float) -> np.ndarray:
    """Rotation matrix from roll-pitch-yaw (extrinsic x-y-z) angles."""
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


@dataclass(frozen=True)
class FrameTransform:
    """Rigid transform: rotation (3x3 orthonormal, det +1) and translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "FrameTransform":
        return FrameTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "FrameTransform") -> "FrameTransform":
        return FrameTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "FrameTransform":
        rt = self.rotation.T
        return FrameTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) through x -> R x + t."""
        return points @ self.rotation.T + self.translation

    def orthonormality_defect(self) -> float:
        return float(
            max(
                np.abs(self.rotation.T @ self.rotation - np.eye(3)).max(),
                abs(np.linalg.det(self.rotation) - 1.0),
            )
        )


@dataclass(frozen=True)
class Joint:
    """One link and the joint that attaches it to its parent.

    ``xyz``/``rpy`` place the joint frame in the parent frame; the joint
    motion (about/along ``axis``) is applied after that fixed offset.
    """

    name: str
    parent: str | None
    kind: str
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    xyz: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rpy: np.ndarray = field(default_factory=lambda: np.zeros(3))
    limits: tuple[float, float] = UNBOUNDED

    def dof(self) -> int:
        if self.kind == PLANAR:
            return 3
        if self.kind == FIXED:
            return 0
        return 1


class RobotModel:
    """Tree-structured kinematic model with named chains.

    Chains group the actuated joints into base / torso / arms / grippers;
    the flat configuration vector is their concatenation in that order.
    """

    def __init__(
        self,
        joints: list[Joint],
        chains: dict[str, list[str]] | None = None,
        end_effectors: dict[str, str] | None = None,
        neutral: dict[str, float] | None = None,
        name: str = "robot",
        checksum: str = "",
    ):
        self.name = name
        self.checksum = checksum
        self.joints: dict[str, Joint] = {}
        for j in joints:
            if j.name in self.joints:
                raise ValueError(f"duplicate link name {j.name!r}")
            self.joints[j.name] = j
        roots = [j for j in joints if j.parent is None]
        if len(roots) != 1:
            raise ValueError("model must have exactly one root link")
        self.root = roots[0].name
        for j in joints:
            if j.parent is not None and j.parent not in self.joints:
                raise ValueError(f"link {j.name!r} has unknown parent {j.parent!r}")
        self.chains = chains or {"base": [], "torso": [], "arms": [], "grippers": []}
        for group in ("base", "torso", "arms", "grippers"):
            self.chains.setdefault(group, [])
        self.end_effectors = end_effectors or {}
        self.neutral = dict(neutral or {})
        self._validate()
        self.dof_names = self._dof_names()
        self.dof_index = {n: i for i, n in enumerate(self.dof_names)}

    def _validate(self) -> None:
        for j in self.joints.values():
            if j.kind in (REVOLUTE, PRISMATIC, PLANAR):
                n = float(np.linalg.norm(j.axis))
                if abs(n - 1.0) > 1e-9:
                    raise ValueError(f"joint {j.name!r} axis norm {n} != 1")
            lo, hi = j.limits
            if lo > hi:
                raise ValueError(f"joint {j.name!r} limits reversed")
        for group, names in self.chains.items():
            for n in names:
                if n not in self.joints:
                    raise ValueError(f"chain {group!r} references unknown joint {n!r}")

    def _dof_names(self) -> list[str]:
        names: list[str] = []
        for group in ("base", "torso", "arms", "grippers"):
            for jn in self.chains[group]:
                j = self.joints[jn]
                if j.kind == PLANAR:
                    names += [f"{jn}.x", f"{jn}.y", f"{jn}.yaw"]
                elif j.dof() == 1:
                    names.append(jn)
        return names

    @property
    def total_dof(self) -> int:
        return len(self.dof_names)

    def group_widths(self) -> dict[str, int]:
        out = {}
        for group in ("base", "torso", "arms", "grippers"):
            w = 0
            for jn in self.chains[group]:
                w += self.joints[jn].dof()
            out[group] = w
        return out

    def path_to_root(self, frame: str) -> list[str]:
        """Link names from root (inclusive) down to ``frame``."""
        if frame not in self.joints:
            raise NotFound(f"unknown frame {frame!r}")
        path = [frame]
        while self.joints[path[-1]].parent is not None:
            path.append(self.joints[path[-1]].parent)
        return path[::-1]

    def limits_vector(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.empty(self.total_dof)
        hi = np.empty(self.total_dof)
        i = 0
        for group in ("base", "torso", "arms", "grippers"):
            for jn in self.chains[group]:
                j = self.joints[jn]
                for _ in range(j.dof()):
                    lo[i], hi[i] = j.limits
                    i += 1
        return lo, hi

    def neutral_state(self) -> "JointState":
        st = JointState.zeros(self)
        q = st.as_vector(self)
        for name, val in self.neutral.items():
            q[self.dof_index[name]] = val
        return JointState.from_vector(self, q)


@dataclass
class JointState:
    """Full configuration: planar base pose, torso, arms, gripper widths,
    and velocities of the same shapes."""

    q_base: np.ndarray
    q_torso: np.ndarray
    q_arms: np.ndarray
    q_grippers: np.ndarray
    qd_base: np.ndarray
    qd_torso: np.ndarray
    qd_arms: np.ndarray
    qd_grippers: np.ndarray

    @staticmethod
    def zeros(model: RobotModel) -> "JointState":
        w = model.group_widths()
        return JointState(
            np.zeros(w["base"]),
            np.zeros(w["torso"]),
            np.zeros(w["arms"]),
            np.zeros(w["grippers"]),
            np.zeros(w["base"]),
            np.zeros(w["torso"]),
            np.zeros(w["arms"]),
            np.zeros(w["grippers"]),
        )

    def as_vector(self, model: RobotModel | None = None) -> np.ndarray:
        return np.concatenate([self.q_base, self.q_torso, self.q_arms, self.q_grippers])

    def velocity_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.qd_base, self.qd_torso, self.qd_arms, self.qd_grippers]
        )

    @staticmethod
    def from_vector(
        model: RobotModel, q: np.ndarray, qd: np.ndarray | None = None
    ) -> "JointState":
        w = model.group_widths()
        if q.shape != (model.total_dof,):
            raise ShapeError(f"expected {model.total_dof} dof, got {q.shape}")
        qd = np.zeros_like(q) if qd is None else qd
        splits = np.cumsum([w["base"], w["torso"], w["arms"]])
        qb, qt, qa, qg = np.split(np.asarray(q, dtype=float), splits)
        vb, vt, va, vg = np.split(np.asarray(qd, dtype=float), splits)
        return JointState(qb, qt, qa, qg, vb, vt, va, vg)

    def copy(self) -> "JointState":
        return JointState(*(a.copy() for a in (
            self.q_base, self.q_torso, self.q_arms, self.q_grippers,
            self.qd_base, self.qd_torso, self.qd_arms, self.qd_grippers)))

    def has_nan(self) -> bool:
        return bool(np.isnan(self.as_vector()).any() or np.isnan(self.velocity_vector()).any())


def _joint_motion(joint: Joint, qvals: np.ndarray) -> FrameTransform:
    if joint.kind == PLANAR:
        x, y, yaw = qvals
        return FrameTransform(rotation_about(joint.axis, yaw), np.array([x, y, 0.0]))
    if joint.kind == REVOLUTE:
        return FrameTransform(rotation_about(joint.axis, float(qvals[0])), np.zeros(3))
    if joint.kind == PRISMATIC:
        return FrameTransform(np.eye(3), joint.axis * float(qvals[0]))
    return FrameTransform.identity()


def _local_transform(model: RobotModel, joint: Joint, q: np.ndarray) -> FrameTransform:
    fixed = FrameTransform(rotation_rpy(*joint.rpy), joint.xyz.astype(float))
    if joint.dof() == 0:
        return fixed
    if joint.kind == PLANAR:
        idx = [model.dof_index[f"{joint.name}.{s}"] for s in ("x", "y", "yaw")]
        vals = q[idx]
    else:
        vals = q[[model.dof_index[joint.name]]]
    return fixed.compose(_joint_motion(joint, vals))


def forward_kinematics(
    model: RobotModel, state: JointState, frame: str, base_frame: str | None = None
) -> FrameTransform:
    """Transform of ``frame`` expressed in the root frame (or ``base_frame``).

    Composes the per-link transforms along the unique chain from the root.
    """
    if state.has_nan():
        raise InvalidState("joint state contains NaN")
    q = state.as_vector()
    t = FrameTransform.identity()
    for name in model.path_to_root(frame):
        t = t.compose(_local_transform(model, model.joints[name], q))
    if base_frame is not None:
        t_base = FrameTransform.identity()
        for name in model.path_to_root(base_frame):
            t_base = t_base.compose(_local_transform(model, model.joints[name], q))
        t = t_base.inverse().compose(t)
    return t


def _upstream_dofs(model: RobotModel, frame: str) -> list[str]:
    """Actuated dof names on the chain root -> frame, in configuration order."""
    on_path = set(model.path_to_root(frame))
    names = []
    for dn in model.dof_names:
        jn = dn.split(".")[0]
        if jn in on_path:
            names.append(dn)
    return names


def jacobian(
    model: RobotModel,
    state: JointState,
    frame: str,
    dofs: list[str] | None = None,
) -> np.ndarray:
    """Geometric Jacobian (6 x n) of ``frame`` w.r.t. upstream actuated DoF.

    Rows are linear (m) then angular (rad) velocity in the root frame;
    columns follow the configuration-vector order base, torso, arm.
    """
    if state.has_nan():
        raise InvalidState("joint state contains NaN")
    q = state.as_vector()
    names = dofs if dofs is not None else _upstream_dofs(model, frame)
    # world pose of every joint frame on the path (after its fixed offset,
    # before its motion is irrelevant for axes: axis lives in the moving frame)
    poses: dict[str, FrameTransform] = {}
    t = FrameTransform.identity()
    for nm in model.path_to_root(frame):
        t = t.compose(_local_transform(model, model.joints[nm], q))
        poses[nm] = t
    p_frame = poses[frame].translation
    cols = []
    for dn in names:
        jn, _, comp = dn.partition(".")
        if jn not in poses:
            raise InvalidChain(f"dof {dn!r} is not upstream of {frame!r}")
        joint = model.joints[jn]
        pose = poses[jn]
        if joint.kind == PLANAR:
            # planar motion happens at the joint frame: x/y translate, yaw
            # rotates about the (world-aligned) joint axis through its origin
            parent_pose = FrameTransform.identity()
            for nm in model.path_to_root(jn)[:-1]:
                parent_pose = parent_pose.compose(
                    _local_transform(model, model.joints[nm], q)
                )
            fixed = FrameTransform(rotation_rpy(*joint.rpy), joint.xyz.astype(float))
            anchor = parent_pose.compose(fixed)
            ax_w = anchor.rotation @ joint.axis
            if comp == "x":
                col = np.concatenate([anchor.rotation @ np.array([1.0, 0, 0]), np.zeros(3)])
            elif comp == "y":
                col = np.concatenate([anchor.rotation @ np.array([0, 1.0, 0]), np.zeros(3)])
            else:
                col = np.concatenate([np.cross(ax_w, p_frame - anchor.translation), ax_w])
        elif joint.kind == REVOLUTE:
            ax_w = pose.rotation @ joint.axis
            col = np.concatenate([np.cross(ax_w, p_frame - pose.translation), ax_w])
        elif joint.kind == PRISMATIC:
            ax_w = pose.rotation @ joint.axis
            col = np.concatenate([ax_w, np.zeros(3)])
        else:
            continue
        cols.append(col)
    if not cols:
        return np.zeros((6, 0))
    return np.stack(cols, axis=1)


def condition_number(
    model: RobotModel, state: JointState, frame: str, dofs: list[str] | None = None
) -> float:
    """Condition number of the position rows (3 x n) of the Jacobian."""
    j = jacobian(model, state, frame, dofs)[:3]
    if j.shape[1] == 0:
        return math.inf
    s = np.linalg.svd(j, compute_uv=False)
    if s[-1] <= 0.0 or s[-1] < s[0] * 1e-300:
        return math.inf
    return float(s[0] / s[-1])


def error_amplification(
    model: RobotModel, state: JointState, joint: str, delta: float, frame: str
) -> float:
    """End-effector displacement (m) caused by perturbing one joint by ``delta``."""
    if joint not in model.joints:
        raise NotFound(f"unknown joint {joint!r}")
    if joint not in model.path_to_root(frame):
        raise InvalidChain(f"joint {joint!r} is not on the chain to {frame!r}")
    if model.joints[joint].dof() != 1:
        raise InvalidChain(f"joint {joint!r} is not a single-dof joint")
    p0 = forward_kinematics(model, state, frame).translation
    q = state.as_vector()
    q2 = q.copy()
    q2[model.dof_index[joint]] += delta
    p1 = forward_kinematics(
        model, JointState.from_vector(model, q2, state.velocity_vector()), frame
    ).translation
    return float(np.linalg.norm(p1 - p0))


def clamp_to_limits(model: RobotModel, state: JointState) -> JointState:
    """Project every configuration component into its limit interval."""
    lo, hi = model.limits_vector()
    q = np.clip(state.as_vector(), lo, hi)
    return JointState.from_vector(model, q, state.velocity_vector())


def within_limits(model: RobotModel, state: JointState, tol: float = 0.0) -> bool:
    lo, hi = model.limits_vector()
    q = state.as_vector()
    return bool(np.all(q >= lo - tol) and np.all(q <= hi + tol))


# ---------------------------------------------------------------------------
# model file format
#
#   format 1
#   name <model-name>
#   joint <link> parent <link|-> kind <planar-base|revolute|prismatic|fixed>
#         axis <x y z> xyz <x y z> rpy <r p y> limits <lo hi | unbounded>
#   chain <base|torso|arms|grippers> <joint names...>
#   ee <label> <frame name>
#   neutral <dof name> <value>
#
# one directive per line, '#' comments, SI units throughout.
# ---------------------------------------------------------------------------


def parse_model(text: str, checksum: str = "") -> RobotModel:
    joints: list[Joint] = []
    chains: dict[str, list[str]] = {}
    end_effectors: dict[str, str] = {}
    neutral: dict[str, float] = {}
    name = "robot"
    version = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "format":
                version = int(tok[1])
            elif tok[0] == "name":
                name = tok[1]
            elif tok[0] == "joint":
                kv = {}
                i = 3
                kv["link"] = tok[1]
                if tok[2] != "parent":
                    raise ValueError("expected 'parent'")
                kv["parent"] = None if tok[3] == "-" else tok[3]
                i = 4
                fields: dict[str, list[str]] = {}
                while i < len(tok):
                    key = tok[i]
                    n = {"kind": 1, "axis": 3, "xyz": 3, "rpy": 3, "limits": -1}[key]
                    if n == -1:
                        n = 1 if tok[i + 1] == "unbounded" else 2
                    fields[key] = tok[i + 1 : i + 1 + n]
                    i += 1 + n
                kind = fields["kind"][0]
                axis = np.array([float(v) for v in fields.get("axis", ["0", "0", "1"])])
                xyz = np.array([float(v) for v in fields.get("xyz", ["0", "0", "0"])])
                rpy = np.array([float(v) for v in fields.get("rpy", ["0", "0", "0"])])
                lim = fields.get("limits", ["unbounded"])
                limits = UNBOUNDED if lim == ["unbounded"] else (float(lim[0]), float(lim[1]))
                joints.append(Joint(kv["link"], kv["parent"], kind, axis, xyz, rpy, limits))
            elif tok[0] == "chain":
                chains[tok[1]] = tok[2:]
            elif tok[0] == "ee":
                end_effectors[tok[1]] = tok[2]
            elif tok[0] == "neutral":
                neutral[tok[1]] = float(tok[2])
            else:
                raise ValueError(f"unknown directive {tok[0]!r}")
        except (IndexError, KeyError, ValueError) as e:
            raise ValueError(f"model file line {lineno}: {e}") from e
    if version != 1:
        raise ValueError(f"unsupported model format {version!r}")
    return RobotModel(joints, chains, end_effectors, neutral, name, checksum)


def load_model(path) -> RobotModel:
    with open(path, "rb") as f:
        data = f.read()
    return parse_model(data.decode(), hashlib.sha256(data).hexdigest())


def load_r1_model() -> RobotModel:
    """Load the canonical shipped model."""
    data = resources.files("wholebody").joinpath("data/r1.model").read_bytes()
    return parse_model(data.decode(), hashlib.sha256(data).hexdigest())
