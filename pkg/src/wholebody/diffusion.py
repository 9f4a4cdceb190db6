"""Denoising-diffusion machinery for action chunks.

Training uses the stochastic 100-step reverse process; inference uses the
deterministic 16-step sub-schedule.  Schedules are indexed k = 0..K-1 with
alpha_bar strictly decreasing and alpha_bar[0] close to 1; samplers accept
any predictor mapping (x_k, k) to estimated noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergedError
from .numerics import tensor as T

K_TRAIN_DEFAULT = 100
DDIM_STEPS_DEFAULT = 16


def squared_cosine_betas(k_train: int, s: float = 0.008, cap: float = 0.999) -> np.ndarray:
    """Squared-cosine cumulative-alpha curve, expressed as capped betas."""

    def f(u: float) -> float:
        return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

    betas = np.empty(k_train)
    for k in range(k_train):
        betas[k] = min(1.0 - f((k + 1) / k_train) / f(k / k_train), cap)
    return betas


def linear_betas(k_train: int, start: float = 1e-3, end: float = 0.2) -> np.ndarray:
    """Linear curve scaled for short schedules: alpha_bar still vanishes at K=100."""
    return np.linspace(start, end, k_train)


_CURVES = {"squared-cosine": squared_cosine_betas, "linear": linear_betas}


@dataclass
class NoiseSchedule:
    """Beta schedule plus derived quantities, for DDPM or DDIM stepping."""

    k_train: int = K_TRAIN_DEFAULT
    kind: str = "ddpm"
    ddim_steps: int = DDIM_STEPS_DEFAULT
    curve: str = "squared-cosine"
    variance: str = "beta"  # reverse-step sigma^2: full beta, or the x0-posterior form
    clip_x0: bool = False   # clamp the implied clean sample to [-1, 1] while stepping
    betas: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown scheduler kind {self.kind!r}")
        if self.variance not in ("beta", "posterior"):
            raise ValueError(f"unknown variance choice {self.variance!r}")
        if self.betas is None:
            self.betas = _CURVES[self.curve](self.k_train)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if len(self.betas) != self.k_train:
            raise ValueError("beta count differs from k_train")
        if (self.betas <= 0).any() or (self.betas >= 1).any():
            raise ValueError("betas must lie in (0, 1)")
        if self.ddim_steps > self.k_train:
            raise ValueError("ddim_steps cannot exceed k_train")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bars[0] <= 0.99:
            raise ValueError("alpha_bar[0] must exceed 0.99")

    def posterior_variance(self, k: int) -> float:
        """Variance of q(x_{k-1} | x_k, x0); zero at the final step."""
        if k == 0:
            return 0.0
        ab_prev = self.alpha_bars[k - 1]
        return float(self.betas[k] * (1.0 - ab_prev) / (1.0 - self.alpha_bars[k]))

    def reverse_variance(self, k: int) -> float:
        """Sigma^2 used by the stochastic sampler at level k."""
        if k == 0:
            return 0.0
        if self.variance == "beta":
            return float(self.betas[k])
        return self.posterior_variance(k)

    def reverse_mean(self, x_k: np.ndarray, eps: np.ndarray, k: int) -> np.ndarray:
        """Mean of the reverse step from level k given predicted noise."""
        beta = self.betas[k]
        return (x_k - beta / math.sqrt(1.0 - self.alpha_bars[k]) * eps) \
            / math.sqrt(self.alphas[k])

    def forward_posterior_mean(self, x0: np.ndarray, x_k: np.ndarray, k: int) -> np.ndarray:
        """Mean of q(x_{k-1} | x_k, x0) from the clean sample."""
        if k == 0:
            return np.asarray(x0, dtype=float)
        ab, ab_prev = self.alpha_bars[k], self.alpha_bars[k - 1]
        beta = self.betas[k]
        return (math.sqrt(ab_prev) * beta * x0
                + math.sqrt(self.alphas[k]) * (1.0 - ab_prev) * x_k) / (1.0 - ab)

    def ddim_timesteps(self, steps: int | None = None) -> np.ndarray:
        """Evenly spaced sub-schedule including the last index (round half up)."""
        steps = self.ddim_steps if steps is None else steps
        if steps == 1:
            return np.array([self.k_train - 1])
        raw = np.linspace(0.0, self.k_train - 1, steps)
        return np.floor(raw + 0.5).astype(int)

    def to_meta(self) -> dict:
        return {"k_train": self.k_train, "kind": self.kind,
                "ddim_steps": self.ddim_steps, "curve": self.curve,
                "variance": self.variance, "clip_x0": self.clip_x0,
                "betas": self.betas.tolist()}

    @staticmethod
    def from_meta(meta: dict) -> "NoiseSchedule":
        return NoiseSchedule(k_train=meta["k_train"], kind=meta["kind"],
                             ddim_steps=meta["ddim_steps"], curve=meta["curve"],
                             variance=meta.get("variance", "beta"),
                             clip_x0=meta.get("clip_x0", False),
                             betas=np.asarray(meta["betas"]))


@dataclass
class NoisySample:
    x_k: np.ndarray
    k: int
    eps: np.ndarray


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, k: int,
              rng: np.random.Generator) -> NoisySample:
    """Forward noising to level k; the injected noise is recorded."""
    if not 0 <= k < schedule.k_train:
        raise ValueError(f"step {k} outside [0, {schedule.k_train})")
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bars[k]
    return NoisySample(math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, k, eps)


def noise_loss(schedule: NoiseSchedule, predictor, x0: np.ndarray,
               rng: np.random.Generator):
    """Sample a level uniformly, noise x0, and return MSE(injected, predicted).

    The predictor maps (x_k, k) to estimated noise; a numpy return gives a
    float loss, a Tensor return gives a Tensor loss for backprop.
    """
    k = int(rng.integers(0, schedule.k_train))
    sample = add_noise(schedule, x0, k, rng)
    pred = predictor(sample.x_k, k)
    if isinstance(pred, T.Tensor):
        return T.mse(pred, T.Tensor(sample.eps.astype(pred.data.dtype)))
    return float(np.mean((np.asarray(pred) - sample.eps) ** 2))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise DivergedError(f"{what} produced non-finite values")


def _implied_x0(schedule: NoiseSchedule, x: np.ndarray, eps: np.ndarray,
                k: int) -> np.ndarray:
    ab = schedule.alpha_bars[k]
    x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if schedule.clip_x0 else x0


def ddpm_sample(schedule: NoiseSchedule, predictor, shape: tuple,
                rng: np.random.Generator) -> np.ndarray:
    """Stochastic ancestral sampling over all training steps."""
    x = rng.standard_normal(shape)
    for k in range(schedule.k_train - 1, -1, -1):
        eps = np.asarray(predictor(x, k), dtype=float)
        if schedule.clip_x0:
            mu = schedule.forward_posterior_mean(_implied_x0(schedule, x, eps, k), x, k)
        else:
            mu = schedule.reverse_mean(x, eps, k)
        var = schedule.reverse_variance(k)
        x = mu if var == 0.0 else mu + math.sqrt(var) * rng.standard_normal(shape)
        _check_finite(x, f"ddpm step {k}")
    return x


def ddim_sample(schedule: NoiseSchedule, predictor, shape: tuple,
                rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
    """Deterministic sampling over the evenly-strided sub-schedule.

    Only the initial draw consumes randomness; every later update is
    deterministic given the predictor.
    """
    timesteps = schedule.ddim_timesteps(steps)
    x = rng.standard_normal(shape)
    for i in range(len(timesteps) - 1, -1, -1):
        k = int(timesteps[i])
        ab = schedule.alpha_bars[k]
        eps = np.asarray(predictor(x, k), dtype=float)
        x0_hat = _implied_x0(schedule, x, eps, k)
        if schedule.clip_x0:
            eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        if i == 0:
            x = x0_hat
        else:
            ab_prev = schedule.alpha_bars[int(timesteps[i - 1])]
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
        _check_finite(x, f"ddim step {k}")
    return x
