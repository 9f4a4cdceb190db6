"""Dataset preparation, policy training loop, and batched policy evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import datastore as DS
from . import policy as PL
from . import simenv as S
from .diffusion import NoiseSchedule
from .kinematics import RobotModel
from .numerics import ArchConfig, MomentOptimizer, OptimizerConfig


@dataclass
class TrainConfig:
    """Training-run settings; optimizer fields mirror the published table."""

    steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    variant: str = "full"
    obs_variant: str = "goal"
    dtype: str = "float32"
    val_every: int = 500
    checkpoint_every: int = 0          # 0: only the final checkpoint
    split_seed: int = 0
    optimizer: dict = field(default_factory=lambda: OptimizerConfig().to_dict())
    arch: dict = field(default_factory=lambda: ArchConfig().to_dict())
    schedule: dict | None = None

    @staticmethod
    def from_yaml(path) -> "TrainConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return TrainConfig(**data)

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.__dict__, f, sort_keys=True)


@dataclass
class WindowDataset:
    """Flat arrays of (observation window, action chunk) samples."""

    obs: np.ndarray      # (N, T_o, ...) goals or clouds
    props: np.ndarray    # (N, T_o, 21)
    actions: np.ndarray  # (N, T_a, 21) physical units
    obs_variant: str

    def __len__(self) -> int:
        return len(self.actions)


def prop_from_step(step: DS.Step) -> np.ndarray:
    q = np.asarray(step.q)
    qd = np.asarray(step.qd)
    return np.concatenate([qd[0:3], q[3:21]])


def windows_from_trajectory(traj: DS.Trajectory, t_obs: int = PL.T_OBS,
                            t_act: int = PL.T_ACT):
    """Expand one trajectory into training samples.

    The observation window repeats the first frame at episode start; the
    action chunk repeats the final action past episode end.
    """
    n = len(traj.steps)
    props = np.array([prop_from_step(s) for s in traj.steps])
    if traj.header.obs_variant == "goal":
        obs = np.array([s.goal for s in traj.steps])
    else:
        obs = np.array([traj.cloud(s) for s in traj.steps])
    actions = np.array([s.action for s in traj.steps])
    samples = []
    for t in range(n):
        w = [max(t - (t_obs - 1) + i, 0) for i in range(t_obs)]
        chunk_idx = np.minimum(np.arange(t, t + t_act), n - 1)
        samples.append((obs[w], props[w], actions[chunk_idx]))
    o, p, a = zip(*samples)
    return np.stack(o), np.stack(p), np.stack(a)


def load_dataset(paths: list, t_obs: int = PL.T_OBS,
                 t_act: int = PL.T_ACT) -> WindowDataset:
    all_o, all_p, all_a = [], [], []
    variant = None
    for path in paths:
        traj = path if isinstance(path, DS.Trajectory) else DS.load_trajectory(path)
        if variant is None:
            variant = traj.header.obs_variant
        elif variant != traj.header.obs_variant:
            raise ValueError("mixed observation variants in one dataset")
        o, p, a = windows_from_trajectory(traj, t_obs, t_act)
        all_o.append(o)
        all_p.append(p)
        all_a.append(a)
    return WindowDataset(np.concatenate(all_o), np.concatenate(all_p),
                         np.concatenate(all_a), variant or "goal")


def validation_loss(policy: PL.WholeBodyPolicy, data: WindowDataset,
                    rng: np.random.Generator, batches: int = 4,
                    batch_size: int = 64) -> float:
    """Teacher-forced denoising loss on held-out data, no parameter updates."""
    sched = policy.schedule
    losses = []
    for _ in range(batches):
        idx = rng.integers(0, len(data), min(batch_size, len(data)))
        b = len(idx)
        target = np.clip(policy.normalizer.normalize(data.actions[idx]), -1, 1)
        r = policy.observe(data.obs[idx], data.props[idx]).data

        def head_loss(head, chunk, cond):
            k = rng.integers(0, sched.k_train, size=b)
            eps = rng.standard_normal(chunk.shape)
            ab = sched.alpha_bars[k][:, None, None]
            x_k = np.sqrt(ab) * chunk + np.sqrt(1 - ab) * eps
            pred = head(PL.Tensor(x_k.astype(policy._dtype)),
                        PL.Tensor(cond.astype(policy._dtype)), k)
            return float(np.mean((pred.data - eps) ** 2))

        if policy.config.variant == "no_wb_decoding":
            total = head_loss(policy.head_flat, target, r)
        else:
            base = target[:, :, PL.BASE_SLICE]
            torso = target[:, :, PL.TORSO_SLICE]
            arms = target[:, :, PL.ARMS_SLICE]
            fb, ft = base.reshape(b, -1), torso.reshape(b, -1)
            total = (head_loss(policy.head_base, base, r)
                     + head_loss(policy.head_torso, torso,
                                 np.concatenate([r, fb], axis=1))
                     + head_loss(policy.head_arms, arms,
                                 np.concatenate([r, fb, ft], axis=1)))
        losses.append(total)
    return float(np.mean(losses))


def train(dataset_paths: list, config: TrainConfig, out_dir,
          log=print) -> tuple[PL.WholeBodyPolicy, dict]:
    """Train a policy on saved trajectories; returns (policy, history)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = DS.split(list(dataset_paths), seed=config.split_seed)
    train_data = load_dataset(split.train)
    val_data = load_dataset(split.validation)
    if train_data.obs_variant != config.obs_variant:
        raise ValueError(
            f"dataset is {train_data.obs_variant!r} but config wants "
            f"{config.obs_variant!r}")

    normalizer = PL.ActionNormalizer.from_actions(train_data.actions)
    schedule = (NoiseSchedule.from_meta(config.schedule) if config.schedule
                else NoiseSchedule(clip_x0=True))  # actions live in [-1, 1]
    arch = ArchConfig.from_dict(config.arch)
    pcfg = PL.PolicyConfig(arch=arch, variant=config.variant,
                           obs_variant=config.obs_variant, dtype=config.dtype)
    policy = PL.WholeBodyPolicy(pcfg, normalizer, schedule,
                                np.random.default_rng(config.seed))
    opt = MomentOptimizer(policy.params(),
                          OptimizerConfig.from_dict(config.optimizer))
    rng = np.random.default_rng(config.seed + 1)
    history = {"train_loss": [], "val_loss": [], "lr": [], "steps": config.steps,
               "n_train": len(train_data), "n_val": len(val_data)}
    t0 = time.time()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train_data), config.batch_size)
        out = PL.train_step(policy, train_data.obs[idx], train_data.props[idx],
                            train_data.actions[idx], rng, opt)
        history["train_loss"].append(out["total"])
        history["lr"].append(out["lr"])
        if step % config.val_every == 0 or step == config.steps:
            vl = validation_loss(policy, val_data, np.random.default_rng(step))
            history["val_loss"].append((step, vl))
            recent = float(np.mean(history["train_loss"][-config.val_every:]))
            log(f"step {step}/{config.steps}  train {recent:.4f}  val {vl:.4f}  "
                f"({(time.time() - t0) / step * 1000:.0f} ms/step)")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            policy.save(out_dir / f"policy-{step:06d}.ckpt")
    policy.save(out_dir / "policy.ckpt")
    with open(out_dir / "history.json", "w") as f:
        json.dump(history, f)
    return policy, history


def evaluate_policy(policy: PL.WholeBodyPolicy, model: RobotModel,
                    task: S.WipeTaskConfig, n_rollouts: int,
                    seed_base: int = 50_000, decode_rng_seed: int = 7,
                    execute_horizon: int = 1) -> list[S.EpisodeResult]:
    """Batched closed-loop evaluation: all rollouts advance in lockstep.

    A fresh chunk is decoded every ``execute_horizon`` policy periods and
    its first ``execute_horizon`` actions executed (receding horizon);
    horizon 1 is the zero-latency re-plan-every-step deployment.
    """
    envs = [S.WipeEnv(model, task) for _ in range(n_rollouts)]
    windows = []
    for i, env in enumerate(envs):
        obs = env.reset(seed_base + i)
        frame = _frame_from_obs(obs, task)
        windows.append([frame] * PL.T_OBS)
    rng = np.random.default_rng(decode_rng_seed)
    active = list(range(n_rollouts))
    results: dict[int, S.EpisodeResult] = {}
    violations = [0] * n_rollouts
    steps = [0] * n_rollouts
    while active:
        obs_arr, props = PL.stack_frames([windows[i] for i in active],
                                         policy.config.obs_variant)
        readout = policy.observe(obs_arr, props)
        actions = policy.decode_action(readout.data, rng, batch=True)
        chunks = {i: policy.normalizer.denormalize(actions[j].as_matrix())
                  for j, i in enumerate(active)}
        for h in range(execute_horizon):
            still = []
            for i in list(active):
                env = envs[i]
                _, events = env.step(chunks[i][h])
                violations[i] += sum(1 for e in events
                                     if str(e).startswith("violation"))
                steps[i] += 1
                obs = env.observe()
                windows[i] = windows[i][1:] + [_frame_from_obs(obs, task)]
                if env.done:
                    results[i] = S.EpisodeResult(env.success, violations[i],
                                                 steps[i], env.contact_ratio)
                else:
                    still.append(i)
            active = still
            if not active:
                break
    return [results[i] for i in range(n_rollouts)]


def _frame_from_obs(obs: dict, task: S.WipeTaskConfig) -> PL.ObservationFrame:
    return PL.ObservationFrame(prop=obs["prop"], goal=obs.get("goal"),
                               cloud=obs.get("cloud"),
                               timestamp=obs["tick"] / 100.0)
