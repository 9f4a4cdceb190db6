"""Websocket teleoperation bridge.

One operator session at a time drives the simulated robot: gamepad
commands arrive as JSON text frames (applied at most at the leader-link
rate of 66 Hz, newest wins), the plant runs at 100 Hz on its own thread,
state streams back at 30 Hz with a small farthest-point-sampled cloud
preview in binary side frames, and recording verbs drive the 10 Hz
demonstration recorder.

The websocket layer is a minimal RFC 6455 server (handshake, text/binary/
ping/close frames) built on asyncio; messages are JSON with a per-
direction strictly increasing ``seq``.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import control as C
from . import datastore as DS
from . import kinematics as K
from . import perception as P
from . import simenv as S
from .errors import FaultState

SCHEMA_VERSION = 1
COMMAND_RATE_HZ = 66.0
STATE_RATE_HZ = 30.0
PREVIEW_POINTS = 512
PREVIEW_MAGIC = b"PCD0"

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

SKELETON_FRAMES = [
    "base", "torso_knee1", "torso_knee2", "torso_hip", "torso_waist",
    "head_camera",
    "left_arm_j1", "left_arm_j2", "left_arm_j4", "left_arm_j6", "left_gripper",
    "right_arm_j1", "right_arm_j2", "right_arm_j4", "right_arm_j6",
    "right_gripper",
]


def gamepad_from_payload(payload: dict) -> C.GamepadState:
    ls = payload.get("left_stick", [0.0, 0.0])
    rs = payload.get("right_stick", [0.0, 0.0])
    return C.GamepadState(
        left_stick=(float(ls[0]), float(ls[1])),
        right_stick=(float(rs[0]), float(rs[1])),
        dpad_up=bool(payload.get("dpad_up", False)),
        dpad_down=bool(payload.get("dpad_down", False)),
        trigger_left=float(payload.get("trigger_left", 0.0)),
        trigger_right=float(payload.get("trigger_right", 0.0)),
        yaw_mode=bool(payload.get("yaw_mode", False)),
    )


class TeleopDriver:
    """Command integration, plant ticking, and recording for one session.

    Shared by the live bridge (wall-clock loops) and scripted collection
    (virtual time): commands pass through the gamepad map into absolute
    targets, each control tick advances the environment one 0.01 s step,
    and every 10th tick lands in the recorder.
    """

    def __init__(self, env: S.WipeEnv, data_dir, seed: int = 0,
                 map_config: C.GamepadMapConfig | None = None):
        self.env = env
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.map_config = map_config or C.GamepadMapConfig()
        self.env.reset(seed)
        st = env.plant.state
        self.torso_targets = st.q_torso.copy()
        self.arm_targets = st.q_arms.copy()
        self.gripper_targets = st.q_grippers.copy()
        self.base_command = C.BaseCommand()
        self.recorder: DS.Recorder | None = None
        self.saved_paths: list[str] = []
        self.applied_commands = 0
        self.clamped_commands = 0
        self.tick = 0
        self.fault = False

    def apply_command(self, gs: C.GamepadState) -> None:
        mapped = C.gamepad_map(gs, self.map_config)
        self.applied_commands += 1
        if mapped.clamped:
            self.clamped_commands += 1
        self.base_command = mapped.base
        lo, hi = self.env.model.limits_vector()
        w = self.env.model.group_widths()
        t0 = w["base"]
        self.torso_targets = np.clip(self.torso_targets + mapped.torso_delta,
                                     lo[t0:t0 + 4], hi[t0:t0 + 4])
        if mapped.gripper_targets is not None:
            self.gripper_targets = mapped.gripper_targets.copy()

    def record_ctl(self, verb: str) -> dict:
        if verb == "start":
            header = DS.TrajectoryHeader(
                task_id="wipe-teleop", model_checksum=self.env.model.checksum,
                crop_box=(self.env.config.crop
                          if self.env.config.observation == "cloud" else None),
                obs_variant=self.env.config.observation,
                extra={"goal": self.env.goal.tolist(),
                       "locked": self.env.config.locked},
            )
            self.recorder = DS.Recorder(header)
            self.recorder.start()
            return {"recording": True}
        if self.recorder is None:
            return {"error": "no recording session"}
        if verb == "pause":
            self.recorder.pause()
            return {"paused": True}
        if verb == "resume":
            self.recorder.resume()
            return {"paused": False}
        if verb == "save":
            if not self.recorder.steps:
                return {"error": "nothing recorded"}
            path = self.data_dir / f"teleop-{int(time.time() * 1000)}-{self.tick}.traj"
            self.recorder.save(path, {"task": bool(self.env.success)})
            self.recorder = None
            self.saved_paths.append(str(path))
            return {"saved": str(path)}
        if verb == "discard":
            self.recorder.discard()
            self.recorder = None
            return {"discarded": True}
        return {"error": f"unknown verb {verb!r}"}

    def control_tick(self) -> list:
        """One 0.01 s plant tick with the current targets; records at 10 Hz."""
        targets = self.env._apply_lock(np.concatenate([
            self.base_command.as_array(), self.torso_targets, self.arm_targets,
            self.gripper_targets]))
        if self.recorder is not None:
            obs = (self.env.observe()
                   if self.tick % DS.SAMPLE_EVERY == 0 and not self.recorder.paused
                   and self.recorder.recording else {})
            self.recorder.on_tick(
                self.tick, self.env.plant.state,
                np.concatenate([self.base_command.as_array(), self.torso_targets,
                                self.arm_targets, self.gripper_targets]),
                goal=obs.get("goal"), cloud=obs.get("cloud"))
        try:
            self.env.plant.step(targets)
        except FaultState:
            self.fault = True
            return ["fault"]
        self.tick += 1
        self.env.tick = self.tick
        return self.env._update_task_state()

    def state_payload(self) -> dict:
        st = self.env.plant.state
        links = {}
        for frame in SKELETON_FRAMES:
            links[frame] = K.forward_kinematics(
                self.env.model, st, frame).translation.round(4).tolist()
        return {
            "tick": self.tick,
            "q": st.as_vector().round(5).tolist(),
            "qd": st.velocity_vector().round(5).tolist(),
            "base_velocity": st.qd_base.round(4).tolist(),
            "links": links,
            "recording": self.recorder is not None and self.recorder.recording
                         and not self.recorder.paused,
            "paused": self.recorder.paused if self.recorder else False,
            "contact": bool(self.env.contact),
            "success": bool(self.env.success),
            "violations": len(self.env.events.violations),
            "fault": self.fault,
            "applied_commands": self.applied_commands,
            "clamped_commands": self.clamped_commands,
        }

    def preview_cloud(self) -> np.ndarray:
        """Raw base-frame cloud preview (m, rgb 0..255), FPS-reduced."""
        full = self.env.synthetic_cloud_raw()
        return P.fps_downsample(full, PREVIEW_POINTS).points.astype(np.float32)


# -- RFC 6455 plumbing --------------------------------------------------------


async def _read_exact(reader: asyncio.StreamReader, n: int) -> bytes:
    return await reader.readexactly(n)


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    """Returns (opcode, payload); handles masking and extended lengths."""
    head = await _read_exact(reader, 2)
    opcode = head[0] & 0x0F
    masked = bool(head[1] & 0x80)
    length = head[1] & 0x7F
    if length == 126:
        (length,) = struct.unpack("!H", await _read_exact(reader, 2))
    elif length == 127:
        (length,) = struct.unpack("!Q", await _read_exact(reader, 8))
    mask = await _read_exact(reader, 4) if masked else b""
    payload = await _read_exact(reader, length) if length else b""
    if masked:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return opcode, payload


def encode_frame(opcode: int, payload: bytes) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack("!H", n)
    else:
        head += bytes([127]) + struct.pack("!Q", n)
    return head + payload


async def websocket_handshake(reader: asyncio.StreamReader,
                              writer: asyncio.StreamWriter) -> bool:
    request = await reader.readuntil(b"\r\n\r\n")
    headers = {}
    for line in request.decode("latin1").split("\r\n")[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get("sec-websocket-key")
    if not key or "websocket" not in headers.get("upgrade", "").lower():
        writer.write(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        await writer.drain()
        return False
    accept = base64.b64encode(
        hashlib.sha1((key + _WS_GUID).encode()).digest()).decode()
    writer.write(
        b"HTTP/1.1 101 Switching Protocols\r\n"
        b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
        + f"Sec-WebSocket-Accept: {accept}\r\n\r\n".encode())
    await writer.drain()
    return True


@dataclass
class BridgeConfig:
    port: int = 8765
    host: str = "127.0.0.1"
    state_rate_hz: float = STATE_RATE_HZ
    command_rate_hz: float = COMMAND_RATE_HZ
    send_previews: bool = True
    seed: int = 0


class TeleopBridge:
    """Serves one operator; three cooperating loops (plant thread at 100 Hz,
    command applier, state streamer) communicate through newest-wins slots."""

    def __init__(self, model: K.RobotModel, task: S.WipeTaskConfig,
                 data_dir, config: BridgeConfig | None = None,
                 controller: C.ControllerConfig | None = None):
        self.model = model
        self.task = task
        self.config = config or BridgeConfig()
        self.driver = TeleopDriver(S.WipeEnv(model, task, controller), data_dir,
                                   seed=self.config.seed)
        self._cmd_slot: C.GamepadState | None = None
        self._cmd_lock = threading.Lock()
        self.coalesced = 0
        self._busy = False
        self._stop = threading.Event()
        self._plant_thread: threading.Thread | None = None
        self._server: asyncio.AbstractServer | None = None
        self._seq_out = 0
        self.plant_ticks = 0

    # plant loop: single owner of the simulation state
    def _plant_loop(self) -> None:
        period = C.CONTROL_DT
        next_t = time.monotonic()
        while not self._stop.is_set():
            self.driver.control_tick()
            self.plant_ticks = self.driver.tick
            next_t += period
            delay = next_t - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_t = time.monotonic()  # fell behind; do not burst

    def _next_seq(self) -> int:
        self._seq_out += 1
        return self._seq_out

    async def _send_json(self, writer, kind: str, payload: dict) -> None:
        msg = {"kind": kind, "seq": self._next_seq(), "payload": payload}
        writer.write(encode_frame(1, json.dumps(msg).encode()))
        await writer.drain()

    async def _command_applier(self) -> None:
        period = 1.0 / self.config.command_rate_hz
        while True:
            await asyncio.sleep(period)
            with self._cmd_lock:
                gs, self._cmd_slot = self._cmd_slot, None
            if gs is not None:
                self.driver.apply_command(gs)

    async def _state_streamer(self, writer) -> None:
        period = 1.0 / self.config.state_rate_hz
        while True:
            await asyncio.sleep(period)
            payload = self.driver.state_payload()
            await self._send_json(writer, "state", payload)
            if self.config.send_previews and self.task.observation == "cloud":
                pts = self.driver.preview_cloud()
                frame = (PREVIEW_MAGIC + struct.pack("<II", self._seq_out, len(pts))
                         + pts.tobytes())
                writer.write(encode_frame(2, frame))
                await writer.drain()

    async def _handle_client(self, reader, writer) -> None:
        if not await websocket_handshake(reader, writer):
            writer.close()
            return
        if self._busy:
            await self._send_json(writer, "error",
                                  {"message": "another operator is connected",
                                   "category": "busy"})
            writer.write(encode_frame(8, struct.pack("!H", 1013)))
            await writer.drain()
            writer.close()
            return
        self._busy = True
        streamer = None
        last_seq_in = 0
        try:
            while True:
                opcode, payload = await read_frame(reader)
                if opcode == 8:
                    break
                if opcode == 9:
                    writer.write(encode_frame(10, payload))
                    await writer.drain()
                    continue
                if opcode != 1:
                    continue
                try:
                    msg = json.loads(payload.decode())
                    kind = msg["kind"]
                    seq = int(msg["seq"])
                except (ValueError, KeyError) as e:
                    await self._send_json(writer, "error",
                                          {"message": f"malformed message: {e}",
                                           "category": "protocol"})
                    continue
                if seq <= last_seq_in:
                    await self._send_json(writer, "error",
                                          {"message": "seq must increase",
                                           "category": "protocol"})
                    continue
                last_seq_in = seq
                if kind == "hello":
                    if msg.get("payload", {}).get("schema") != SCHEMA_VERSION:
                        await self._send_json(
                            writer, "error",
                            {"message": f"schema {SCHEMA_VERSION} required",
                             "category": "version"})
                        break
                    await self._send_json(writer, "ack", {
                        "schema": SCHEMA_VERSION,
                        "model_checksum": self.model.checksum,
                        "task": "wipe",
                        "observation": self.task.observation,
                    })
                    if streamer is None:
                        streamer = asyncio.ensure_future(
                            self._state_streamer(writer))
                elif kind == "command":
                    gs = gamepad_from_payload(msg.get("payload", {}))
                    with self._cmd_lock:
                        if self._cmd_slot is not None:
                            self.coalesced += 1
                        self._cmd_slot = gs
                elif kind == "record_ctl":
                    verb = msg.get("payload", {}).get("verb", "")
                    result = self.driver.record_ctl(verb)
                    await self._send_json(writer, "ack", result)
                else:
                    await self._send_json(writer, "error",
                                          {"message": f"unknown kind {kind!r}",
                                           "category": "protocol"})
        except (asyncio.IncompleteReadError, ConnectionResetError):
            pass
        finally:
            if streamer is not None:
                streamer.cancel()
            self._busy = False
            writer.close()

    async def serve(self) -> None:
        """Run until cancelled; the plant thread starts with the server."""
        self._plant_thread = threading.Thread(target=self._plant_loop, daemon=True)
        self._plant_thread.start()
        applier = asyncio.ensure_future(self._command_applier())
        self._server = await asyncio.start_server(
            self._handle_client, self.config.host, self.config.port)
        try:
            async with self._server:
                await self._server.serve_forever()
        finally:
            applier.cancel()
            self._stop.set()

    def shutdown(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.close()


def serve_teleop(model: K.RobotModel, task: S.WipeTaskConfig, data_dir,
                 config: BridgeConfig | None = None) -> None:
    """Blocking entry point for the teleop service."""
    bridge = TeleopBridge(model, task, data_dir, config)
    try:
        asyncio.run(bridge.serve())
    except KeyboardInterrupt:
        bridge.shutdown()
