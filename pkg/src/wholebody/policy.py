"""Whole-body visuomotor policy with autoregressive diffusion decoding.

Observations over a short window are encoded into tokens (point cloud or
goal vector, plus proprioception), fused by causal self-attention with a
passive readout slot, and decoded into a 21-wide action chunk by three
jointly trained denoisers in base -> torso -> arms order, each conditioned
on the readout vector and the already-decoded upstream chunks.

Two ablation variants are built from the same config surface: a single
flattened 21-wide denoiser (no hierarchical decoding), and a fusion-MLP
observation encoder (no attention).
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ddim_sample
from .errors import DivergedError, ShapeError, StarvationWarning
from .numerics import (ArchConfig, CausalTransformer, MLP, Module,
                       MomentOptimizer, PointNetEncoder, UNet1d)
from .numerics import tensor as T
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.tensor import Tensor
from .perception import assert_policy_cloud

T_OBS = 2
T_ACT = 8
ACTION_WIDTH = 21
SLOT_KINDS = ("obs", "prop", "readout")

VARIANTS = ("full", "no_wb_decoding", "no_obs_attention")
OBS_VARIANTS = ("cloud", "goal")

# action chunk layout: base velocities, torso targets, arm targets + grippers
BASE_SLICE = slice(0, 3)
TORSO_SLICE = slice(3, 7)
ARMS_SLICE = slice(7, 21)


@dataclass
class ObservationFrame:
    """One policy-rate observation.

    ``prop`` is always [v_base(3), q_torso(4), q_arms(12), q_grippers(2)];
    exactly one of ``cloud`` (normalized N x 6) or ``goal`` (3-vector,
    normalized) is present depending on the observation variant.
    """

    prop: np.ndarray
    cloud: np.ndarray | None = None
    goal: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.prop = np.asarray(self.prop, dtype=float)
        if self.prop.shape != (ACTION_WIDTH,):
            raise ShapeError(f"prop must be ({ACTION_WIDTH},), got {self.prop.shape}")
        if (self.cloud is None) == (self.goal is None):
            raise ValueError("frame needs exactly one of cloud or goal")


@dataclass
class WholeBodyAction:
    """Action chunk over the prediction horizon."""

    base: np.ndarray    # (T_ACT, 3)
    torso: np.ndarray   # (T_ACT, 4)
    arms: np.ndarray    # (T_ACT, 14)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.torso = np.asarray(self.torso, dtype=float)
        self.arms = np.asarray(self.arms, dtype=float)
        if (self.base.shape != (T_ACT, 3) or self.torso.shape != (T_ACT, 4)
                or self.arms.shape != (T_ACT, 14)):
            raise ShapeError("action chunk shapes must be (8,3), (8,4), (8,14)")

    def as_matrix(self) -> np.ndarray:
        return np.concatenate([self.base, self.torso, self.arms], axis=1)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "WholeBodyAction":
        m = np.asarray(m, dtype=float)
        if m.shape != (T_ACT, ACTION_WIDTH):
            raise ShapeError(f"expected ({T_ACT}, {ACTION_WIDTH}), got {m.shape}")
        return WholeBodyAction(m[:, BASE_SLICE], m[:, TORSO_SLICE], m[:, ARMS_SLICE])


@dataclass
class ActionNormalizer:
    """Per-dimension affine map between physical actions and [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (ACTION_WIDTH,) or self.hi.shape != (ACTION_WIDTH,):
            raise ShapeError("normalizer bounds must be 21-wide")
        if not (self.hi > self.lo).all():
            raise ValueError("normalizer needs hi > lo per dimension")

    @staticmethod
    def from_actions(actions: np.ndarray, widen: float = 0.05) -> "ActionNormalizer":
        """Per-dimension min/max over the training set, widened symmetrically."""
        flat = np.asarray(actions, dtype=float).reshape(-1, ACTION_WIDTH)
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        span = np.maximum(hi - lo, 1e-6)
        return ActionNormalizer(lo - widen * span, hi + widen * span)

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(a) - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a) + 1.0) * (self.hi - self.lo) / 2.0 + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "ActionNormalizer":
        return ActionNormalizer(np.asarray(d["lo"]), np.asarray(d["hi"]))


def encoder_mask(t_obs: int = T_OBS) -> np.ndarray:
    """Attention mask of the interleaved [obs, prop, readout] sequence.

    Causal in position, and no slot (including readouts themselves) may
    attend to a readout slot, which keeps readouts passive.
    """
    length = 3 * t_obs
    allowed = np.tril(np.ones((length, length), dtype=bool))
    readout_cols = np.arange(2, length, 3)
    allowed[:, readout_cols] = False
    return allowed


@dataclass
class PolicyConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    variant: str = "full"
    obs_variant: str = "cloud"
    t_obs: int = T_OBS
    t_act: int = T_ACT
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.obs_variant not in OBS_VARIANTS:
            raise ValueError(f"unknown observation variant {self.obs_variant!r}")

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "variant": self.variant,
                "obs_variant": self.obs_variant, "t_obs": self.t_obs,
                "t_act": self.t_act, "dtype": self.dtype}

    @staticmethod
    def from_dict(d: dict) -> "PolicyConfig":
        d = dict(d)
        d["arch"] = ArchConfig.from_dict(d["arch"])
        return PolicyConfig(**d)


class WholeBodyPolicy(Module):
    """Policy model: encoders, attention trunk, denoising heads, normalizer."""

    def __init__(self, config: PolicyConfig, normalizer: ActionNormalizer,
                 schedule: NoiseSchedule, rng: np.random.Generator):
        self.config = config
        self.normalizer = normalizer
        self.schedule = schedule
        dtype = np.dtype(config.dtype).type
        arch = config.arch
        embed = arch.transformer["embed"]
        if config.obs_variant == "cloud":
            self.obs_encoder = PointNetEncoder(rng=rng, dtype=dtype, **arch.pointnet)
        else:
            self.obs_encoder = MLP(rng=rng, dtype=dtype, **arch.goal_mlp)
        self.prop_encoder = MLP(rng=rng, dtype=dtype, **arch.prop_mlp)
        if config.variant == "no_obs_attention":
            # fusion MLP over the concatenated window tokens: two hidden
            # layers of 512 units
            self.fusion = MLP(2 * config.t_obs * embed, 512, 2, embed, "relu",
                              rng, dtype)
            self.transformer = None
            self.readout_embed = None
            self.pos_embed = None
        else:
            self.fusion = None
            self.transformer = CausalTransformer(rng=rng, dtype=dtype,
                                                 **arch.transformer)
            self.readout_embed = Tensor(
                (rng.standard_normal(embed) * 0.02).astype(dtype), requires_grad=True)
            self.pos_embed = Tensor(
                (rng.standard_normal((3 * config.t_obs, embed)) * 0.02).astype(dtype),
                requires_grad=True)
        unet_kw = dict(arch.unet)
        unet_kw["hidden"] = tuple(unet_kw["hidden"])
        if config.variant == "no_wb_decoding":
            self.head_flat = UNet1d(ACTION_WIDTH, embed, rng, dtype=dtype, **unet_kw)
            self.head_base = self.head_torso = self.head_arms = None
        else:
            self.head_flat = None
            self.head_base = UNet1d(3, embed, rng, dtype=dtype, **unet_kw)
            self.head_torso = UNet1d(4, embed + config.t_act * 3, rng, dtype=dtype,
                                     **unet_kw)
            self.head_arms = UNet1d(14, embed + config.t_act * 7, rng, dtype=dtype,
                                    **unet_kw)
        self.transformer_calls = 0
        self._mask = encoder_mask(config.t_obs)
        self._dtype = dtype

    # -- observation pathway -------------------------------------------------

    def _window_tokens(self, obs: np.ndarray, props: np.ndarray):
        """Encode (B, T, ...) observation and proprioception arrays to tokens."""
        b, t = props.shape[:2]
        if t != self.config.t_obs:
            raise ShapeError(f"need {self.config.t_obs} frames, got {t}")
        if props.shape[2] != ACTION_WIDTH:
            raise ShapeError(f"prop width must be {ACTION_WIDTH}")
        if self.config.obs_variant == "cloud":
            for window in obs:
                for cloud in window:
                    assert_policy_cloud(cloud, cloud.shape[0])
        obs_t = Tensor(obs.astype(self._dtype))
        prop_t = Tensor(props.astype(self._dtype))
        if self.config.obs_variant == "cloud":
            flat = T.reshape(obs_t, (b * t,) + obs.shape[2:])
            obs_tok = T.reshape(self.obs_encoder(flat), (b, t, -1))
        else:
            obs_tok = self.obs_encoder(obs_t)
        prop_tok = self.prop_encoder(prop_t)
        return obs_tok, prop_tok

    def tokenize(self, obs: np.ndarray, props: np.ndarray) -> Tensor:
        """Interleaved visuomotor sequence (B, 3*T_o, E) with positions added."""
        if self.config.variant == "no_obs_attention":
            raise ValueError("the fusion variant does not build a token sequence")
        obs_tok, prop_tok = self._window_tokens(obs, props)
        b, t = props.shape[:2]
        embed = self.pos_embed.shape[1]
        slots = []
        for i in range(t):
            slots.append(T.slice_(obs_tok, (slice(None), slice(i, i + 1))))
            slots.append(T.slice_(prop_tok, (slice(None), slice(i, i + 1))))
            readout = T.reshape(self.readout_embed, (1, 1, embed))
            ones = Tensor(np.ones((b, 1, 1), dtype=self._dtype))
            slots.append(T.mul(readout, ones))
        seq = T.concat(slots, axis=1)
        return T.add(seq, self.pos_embed)

    def encode(self, seq: Tensor, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Run the attention trunk; returns the final readout vector (B, E)."""
        self.transformer_calls += 1
        out = self.transformer(seq, mask=self._mask, train=train, rng=rng)
        last = seq.shape[1] - 1
        return T.reshape(T.slice_(out, (slice(None), slice(last, last + 1))),
                         (seq.shape[0], out.shape[2]))

    def observe(self, obs: np.ndarray, props: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Full observation pathway to the conditioning vector (B, E)."""
        if self.config.variant == "no_obs_attention":
            obs_tok, prop_tok = self._window_tokens(obs, props)
            b = props.shape[0]
            parts = []
            for i in range(self.config.t_obs):
                parts.append(T.reshape(
                    T.slice_(obs_tok, (slice(None), slice(i, i + 1))), (b, -1)))
                parts.append(T.reshape(
                    T.slice_(prop_tok, (slice(None), slice(i, i + 1))), (b, -1)))
            return self.fusion(T.concat(parts, axis=1))
        return self.encode(self.tokenize(obs, props), train=train, rng=rng)

    # -- action decoding ------------------------------------------------------

    def _head_predictor(self, head: UNet1d, cond: np.ndarray):
        def predict(x_k, k):
            steps = np.full(x_k.shape[0], k)
            return head(Tensor(x_k.astype(self._dtype)),
                        Tensor(cond.astype(self._dtype)), steps).data.astype(float)

        return predict

    def decode_action(self, readout: np.ndarray, rng: np.random.Generator,
                      batch: bool = False) -> WholeBodyAction | list[WholeBodyAction]:
        """Sample a normalized action chunk from the denoising heads.

        Decoding touches only the readout vector and previously decoded
        chunks; the attention trunk is not re-run.
        """
        r = np.atleast_2d(np.asarray(readout, dtype=float))
        b = r.shape[0]
        t_act = self.config.t_act
        if self.config.variant == "no_wb_decoding":
            flat = ddim_sample(self.schedule, self._head_predictor(self.head_flat, r),
                               (b, t_act, ACTION_WIDTH), rng)
            chunks = np.clip(flat, -1.0, 1.0)
        else:
            base = ddim_sample(self.schedule, self._head_predictor(self.head_base, r),
                               (b, t_act, 3), rng)
            cond_t = np.concatenate([r, base.reshape(b, -1)], axis=1)
            torso = ddim_sample(self.schedule,
                                self._head_predictor(self.head_torso, cond_t),
                                (b, t_act, 4), rng)
            cond_a = np.concatenate([r, base.reshape(b, -1), torso.reshape(b, -1)],
                                    axis=1)
            arms = ddim_sample(self.schedule,
                               self._head_predictor(self.head_arms, cond_a),
                               (b, t_act, 14), rng)
            chunks = np.clip(np.concatenate([base, torso, arms], axis=2), -1.0, 1.0)
        actions = [WholeBodyAction.from_matrix(chunks[i]) for i in range(b)]
        return actions if batch else actions[0]

    def infer(self, frames: list[ObservationFrame],
              rng: np.random.Generator) -> WholeBodyAction:
        """One inference call: encode the window once, then decode."""
        obs, props = stack_frames([frames], self.config.obs_variant)
        readout = self.observe(obs, props)
        return self.decode_action(readout.data[0], rng)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(),
                "normalizer": self.normalizer.to_dict(),
                "schedule": self.schedule.to_meta(),
                "format": "wholebody-policy-1"}
        save_checkpoint(path, {k: p.data for k, p in self.params().items()}, meta)

    @staticmethod
    def load(path) -> "WholeBodyPolicy":
        arrays, meta = load_checkpoint(path)
        if meta.get("format") != "wholebody-policy-1":
            raise ValueError("not a policy checkpoint")
        policy = WholeBodyPolicy(PolicyConfig.from_dict(meta["config"]),
                                 ActionNormalizer.from_dict(meta["normalizer"]),
                                 NoiseSchedule.from_meta(meta["schedule"]),
                                 np.random.default_rng(0))
        policy.load_params(arrays)
        return policy


def stack_frames(windows: list[list[ObservationFrame]],
                 obs_variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack frame windows into (B, T, ...) observation and prop arrays."""
    props = np.stack([[f.prop for f in w] for w in windows])
    if obs_variant == "cloud":
        obs = np.stack([[f.cloud for f in w] for w in windows])
    else:
        obs = np.stack([[f.goal for f in w] for w in windows])
    return obs, props


def train_step(policy: WholeBodyPolicy, obs: np.ndarray, props: np.ndarray,
               actions: np.ndarray, rng: np.random.Generator,
               optimizer: MomentOptimizer) -> dict:
    """One optimization step on a batch.

    ``actions`` are physical-unit chunks (B, T_a, 21); they are normalized
    with the policy's statistics.  Downstream heads are conditioned on the
    ground-truth upstream chunks (teacher forcing), the three losses are
    summed, and the gradient flows through heads, trunk, and encoders
    jointly.
    """
    sched = policy.schedule
    b = actions.shape[0]
    target = np.clip(policy.normalizer.normalize(actions), -1.0, 1.0)
    readout = policy.observe(obs, props, train=True, rng=rng)
    r = readout

    def head_loss(head: UNet1d, chunk: np.ndarray, cond: Tensor) -> Tensor:
        k = rng.integers(0, sched.k_train, size=b)
        eps = rng.standard_normal(chunk.shape)
        ab = sched.alpha_bars[k][:, None, None]
        x_k = np.sqrt(ab) * chunk + np.sqrt(1.0 - ab) * eps
        pred = head(Tensor(x_k.astype(policy._dtype)), cond, k)
        return T.mse(pred, Tensor(eps.astype(policy._dtype)))

    if policy.config.variant == "no_wb_decoding":
        total = head_loss(policy.head_flat, target, r)
        breakdown = {"flat": float(total.data)}
    else:
        base, torso, arms = (target[:, :, BASE_SLICE], target[:, :, TORSO_SLICE],
                             target[:, :, ARMS_SLICE])
        flat_base = Tensor(base.reshape(b, -1).astype(policy._dtype))
        flat_torso = Tensor(torso.reshape(b, -1).astype(policy._dtype))
        l_base = head_loss(policy.head_base, base, r)
        l_torso = head_loss(policy.head_torso, torso, T.concat([r, flat_base], axis=1))
        l_arms = head_loss(policy.head_arms, arms,
                           T.concat([r, flat_base, flat_torso], axis=1))
        total = T.add(T.add(l_base, l_torso), l_arms)
        breakdown = {"base": float(l_base.data), "torso": float(l_torso.data),
                     "arms": float(l_arms.data)}
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise DivergedError(f"training loss is not finite: {breakdown}")
    optimizer.zero_grad()
    total.backward()
    lr = optimizer.step()
    breakdown["total"] = loss_value
    breakdown["lr"] = lr
    return breakdown


class ActionStreamer:
    """10 Hz action stream with latency-compensated chunk switching.

    Models the asynchronous deployment contract deterministically: one
    inference worker runs continuously; each finished chunk is stamped with
    its observation tick, its first ceil(latency / period) actions are
    discarded, and the freshest ready chunk wins.  If every action of a
    chunk is stale, the last action is held and a starvation warning is
    issued.
    """

    def __init__(self, policy: WholeBodyPolicy, rng: np.random.Generator,
                 latency_s: float = 0.0, period_s: float = 0.1):
        self.policy = policy
        self.rng = rng
        self.latency_ticks = latency_s / period_s
        self.discard = math.ceil(round(latency_s / period_s, 9))
        self.window: deque[ObservationFrame] = deque(maxlen=policy.config.t_obs)
        self.tick = 0
        self._busy_until = 0.0
        self._chunk: np.ndarray | None = None       # denormalized (T_a, 21)
        self._chunk_stamp = 0
        self._pending: tuple[int, np.ndarray] | None = None
        self._last_action: np.ndarray | None = None
        self.discarded_per_chunk: list[int] = []

    def _infer_now(self) -> np.ndarray:
        frames = list(self.window)
        action = self.policy.infer(frames, self.rng)
        return self.policy.normalizer.denormalize(action.as_matrix())

    def step(self, frame: ObservationFrame) -> np.ndarray:
        """Ingest one observation, return the action for this policy tick."""
        if not self.window:
            while len(self.window) < self.policy.config.t_obs:
                self.window.append(frame)  # episode start: repeat first frame
        else:
            self.window.append(frame)
        if self._pending is not None:
            stamp, chunk = self._pending
            if stamp + self.discard <= self.tick:
                self._chunk, self._chunk_stamp = chunk, stamp
                self._pending = None
                self.discarded_per_chunk.append(min(self.discard, T_ACT))
        if self._busy_until <= self.tick:
            chunk = self._infer_now()
            if self.discard == 0:
                self._chunk, self._chunk_stamp = chunk, self.tick
                self.discarded_per_chunk.append(0)
            else:
                self._pending = (self.tick, chunk)
            self._busy_until = self.tick + max(self.latency_ticks, 1e-9)
        if self._chunk is None:
            # warm-up: nothing decoded yet, hold still until the first chunk
            action = np.zeros(ACTION_WIDTH)
        else:
            idx = self.tick - self._chunk_stamp
            if idx < T_ACT:
                action = self._chunk[idx]
            else:
                warnings.warn("policy inference is starved; holding last action",
                              StarvationWarning, stacklevel=2)
                action = self._last_action
        self._last_action = action
        self.tick += 1
        return action
