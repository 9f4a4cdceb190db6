"""Demonstration recording, trajectory files, replay, and data-quality metrics.

Trajectory container (canonical, byte-identical round trip):

    magic "WBTJ" | u32 version | u32 len + header JSON
    u32 step count | per step: u32 len + step JSON
    u32 blob count | per blob: u32 len + name, u64 size, raw bytes, sha256
    sha256 footer over everything before it

JSON blocks are canonical (sorted keys, compact separators); float fields
survive exactly via shortest-round-trip encoding.  Point clouds live in
the blob section and are referenced by name from steps.  A lossless text
export exists for debugging.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as K
from .errors import (EmptyTrajectory, IncompatibleModel, RecordingError,
                     SplitError)

MAGIC = b"WBTJ"
VERSION = 1
SAMPLE_EVERY = 10  # control ticks per recorded sample (100 Hz -> 10 Hz)

SINGULARITY_CONDITION_THRESHOLD = 50.0
SINGULARITY_VELOCITY_THRESHOLD = 3.0  # rad/s on torso and arm joints


@dataclass
class TrajectoryHeader:
    task_id: str
    model_checksum: str
    crop_box: dict | None = None
    sample_hz: float = 10.0
    control_hz: float = 100.0
    schema_version: int = 1
    obs_variant: str = "goal"
    initial_q: list = field(default_factory=list)
    initial_qd: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "TrajectoryHeader":
        return TrajectoryHeader(**d)


@dataclass
class Step:
    tick: int
    action: list          # raw 21-action (physical units)
    q: list               # configuration (21)
    qd: list              # velocities (21)
    goal: list | None = None
    cloud_ref: str | None = None
    events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "Step":
        return Step(**d)


@dataclass
class Trajectory:
    header: TrajectoryHeader
    steps: list[Step] = field(default_factory=list)
    blobs: dict[str, bytes] = field(default_factory=dict)
    outcome: str = "saved"            # saved | discarded
    subtask_success: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def cloud(self, step: Step) -> np.ndarray | None:
        if step.cloud_ref is None:
            return None
        raw = self.blobs[step.cloud_ref]
        return np.frombuffer(raw, dtype=np.float64).reshape(-1, 6).copy()

    def actions_matrix(self) -> np.ndarray:
        if not self.steps:
            raise EmptyTrajectory("trajectory has no steps")
        return np.array([s.action for s in self.steps])

    def validate(self) -> None:
        dt = SAMPLE_EVERY
        for a, b in zip(self.steps, self.steps[1:]):
            if b.tick - a.tick != dt:
                raise ValueError(f"tick spacing {b.tick - a.tick} != {dt}")
        for s in self.steps:
            if s.cloud_ref is not None and s.cloud_ref not in self.blobs:
                raise ValueError(f"unresolvable cloud ref {s.cloud_ref!r}")


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_trajectory(path, traj: Trajectory) -> None:
    traj.validate()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    header = _canon({"header": traj.header.to_dict(), "outcome": traj.outcome,
                     "subtask_success": traj.subtask_success})
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(traj.steps))
    for s in traj.steps:
        blk = _canon(s.to_dict())
        out += struct.pack("<I", len(blk)) + blk
    out += struct.pack("<I", len(traj.blobs))
    for name in sorted(traj.blobs):
        raw = traj.blobs[name]
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<Q", len(raw)) + raw
        out += hashlib.sha256(raw).digest()
    out += hashlib.sha256(bytes(out)).digest()
    try:
        with open(path, "wb") as f:
            f.write(bytes(out))
    except OSError as e:
        raise RecordingError(f"cannot write trajectory: {e}") from e


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        data = f.read()
    body, footer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != footer:
        raise ValueError("trajectory footer checksum mismatch")
    if body[:4] != MAGIC:
        raise ValueError("not a trajectory file")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise ValueError(f"unsupported trajectory version {version}")
    off = 8
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    head = json.loads(body[off:off + hlen].decode())
    off += hlen
    (n_steps,) = struct.unpack_from("<I", body, off)
    off += 4
    steps = []
    for _ in range(n_steps):
        (slen,) = struct.unpack_from("<I", body, off)
        off += 4
        steps.append(Step.from_dict(json.loads(body[off:off + slen].decode())))
        off += slen
    (n_blobs,) = struct.unpack_from("<I", body, off)
    off += 4
    blobs = {}
    for _ in range(n_blobs):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode()
        off += nlen
        (size,) = struct.unpack_from("<Q", body, off)
        off += 8
        raw = body[off:off + size]
        off += size
        digest = body[off:off + 32]
        off += 32
        if hashlib.sha256(raw).digest() != digest:
            raise ValueError(f"blob {name!r} checksum mismatch")
        blobs[name] = bytes(raw)
    return Trajectory(TrajectoryHeader.from_dict(head["header"]), steps, blobs,
                      head["outcome"], head["subtask_success"])


def export_text(path, traj: Trajectory) -> None:
    """Lossless debugging export (hex-encoded blobs)."""
    doc = {"header": traj.header.to_dict(), "outcome": traj.outcome,
           "subtask_success": traj.subtask_success,
           "steps": [s.to_dict() for s in traj.steps],
           "blobs": {k: v.hex() for k, v in sorted(traj.blobs.items())}}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)


def import_text(path) -> Trajectory:
    with open(path) as f:
        doc = json.load(f)
    return Trajectory(TrajectoryHeader.from_dict(doc["header"]),
                      [Step.from_dict(s) for s in doc["steps"]],
                      {k: bytes.fromhex(v) for k, v in doc["blobs"].items()},
                      doc["outcome"], doc["subtask_success"])


class Recorder:
    """Turns the 100 Hz control stream into saved 10 Hz trajectories.

    Driven once per control tick; appends a sample on every
    ``SAMPLE_EVERY``-th tick while recording and not paused.  Pause keeps
    tick bookkeeping intact, save finalizes to disk, discard drops
    everything.
    """

    def __init__(self, header: TrajectoryHeader):
        self.header = header
        self.steps: list[Step] = []
        self.blobs: dict[str, bytes] = {}
        self.recording = False
        self.paused = False
        self.unusable = False

    def start(self) -> None:
        self.recording = True
        self.paused = False

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False

    def on_tick(self, tick: int, state: K.JointState, action: np.ndarray,
                goal: np.ndarray | None = None, cloud: np.ndarray | None = None,
                events: list | None = None) -> bool:
        """Record the sample if this tick lands on the 10 Hz grid."""
        if self.unusable:
            raise RecordingError("recorder is unusable after a failure")
        if not self.recording or self.paused or tick % SAMPLE_EVERY != 0:
            return False
        ref = None
        if cloud is not None:
            ref = f"pcd/{len(self.steps)}"
            self.blobs[ref] = np.ascontiguousarray(cloud, dtype=np.float64).tobytes()
        if not self.steps:
            self.header.initial_q = state.as_vector().tolist()
            self.header.initial_qd = state.velocity_vector().tolist()
        self.steps.append(Step(
            tick=tick,
            action=np.asarray(action, dtype=float).tolist(),
            q=state.as_vector().tolist(),
            qd=state.velocity_vector().tolist(),
            goal=None if goal is None else np.asarray(goal, dtype=float).tolist(),
            cloud_ref=ref,
            events=list(events or []),
        ))
        return True

    def save(self, path, outcome_annotations: dict | None = None) -> Trajectory:
        traj = Trajectory(self.header, self.steps, self.blobs, "saved",
                          outcome_annotations or {})
        try:
            save_trajectory(path, traj)
        except RecordingError:
            self.unusable = True
            raise
        self.recording = False
        return traj

    def discard(self) -> None:
        self.steps = []
        self.blobs = {}
        self.recording = False


@dataclass
class ReplayReport:
    success: bool
    recorded_success: bool
    bit_identical: bool
    max_joint_deviation: float
    safety_violations: int
    steps: int


def replay(traj: Trajectory, env) -> ReplayReport:
    """Open-loop re-execution of a recorded action stream.

    ``env`` must expose ``model.checksum``, ``reset_to(q, qd, extra)``,
    ``step(action) -> (JointState, events)`` at the recorded sample rate,
    and a ``success`` property.  Recorded states are pre-action samples, so
    the state after executing action i is compared with recorded step i+1.
    """
    if not traj.steps:
        raise EmptyTrajectory("cannot replay an empty trajectory")
    if env.model.checksum != traj.header.model_checksum:
        raise IncompatibleModel("environment model differs from the recording")
    env.reset_to(np.asarray(traj.header.initial_q),
                 np.asarray(traj.header.initial_qd), traj.header.extra)
    max_dev = 0.0
    bit_identical = True
    violations = 0
    for i, step in enumerate(traj.steps):
        state, events = env.step(np.asarray(step.action))
        violations += sum(1 for e in events if str(e).startswith("violation"))
        if i + 1 < len(traj.steps):
            dev = float(np.abs(state.as_vector() - np.asarray(traj.steps[i + 1].q)).max())
            max_dev = max(max_dev, dev)
            if dev != 0.0:
                bit_identical = False
    recorded = bool(traj.subtask_success.get("task", False))
    return ReplayReport(bool(env.success), recorded, bit_identical, max_dev,
                        violations, len(traj.steps))


def singularity_ratio(traj: Trajectory, model: K.RobotModel,
                      cond_threshold: float = SINGULARITY_CONDITION_THRESHOLD,
                      vel_threshold: float = SINGULARITY_VELOCITY_THRESHOLD) -> float:
    """Fraction of steps at or near a kinematic singularity.

    A step counts if the position Jacobian of either arm's end-effector
    (arm columns only) has condition number above the threshold, or any
    torso/arm joint speed exceeds the velocity threshold.
    """
    if not traj.steps:
        raise EmptyTrajectory("trajectory has no steps")
    arm_dofs = {}
    for label, frame in model.end_effectors.items():
        on_path = set(model.path_to_root(frame))
        arm_dofs[label] = [n for n in model.chains["arms"] if n in on_path]
    w = model.group_widths()
    joint_lo = w["base"]
    joint_hi = w["base"] + w["torso"] + w["arms"]
    count = 0
    for step in traj.steps:
        st = K.JointState.from_vector(model, np.asarray(step.q), np.asarray(step.qd))
        singular = any(
            K.condition_number(model, st, frame, arm_dofs[label]) > cond_threshold
            for label, frame in model.end_effectors.items()
        )
        fast = np.abs(np.asarray(step.qd)[joint_lo:joint_hi]).max() > vel_threshold
        if singular or fast:
            count += 1
    return count / len(traj.steps)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    seed: int

    def __post_init__(self):
        overlap = set(map(str, self.train)) & set(map(str, self.validation))
        if overlap:
            raise ValueError(f"split is not disjoint: {sorted(overlap)[:3]}")


def split(trajectories: list, seed: int, train_fraction: float = 0.9) -> DatasetSplit:
    """Deterministic 90/10 split by trajectory (train gets the floor)."""
    if len(trajectories) < 10:
        raise SplitError(f"need at least 10 trajectories, got {len(trajectories)}")
    order = np.random.default_rng(seed).permutation(len(trajectories))
    n_train = math.floor(train_fraction * len(trajectories))
    items = [trajectories[i] for i in order]
    return DatasetSplit(items[:n_train], items[n_train:], seed)
