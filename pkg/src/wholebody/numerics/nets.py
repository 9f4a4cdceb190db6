"""Network archetypes: MLP, point-set encoder, causal transformer, 1-D UNet.

All parameters are created from an explicit numpy Generator, so a given
seed reproduces initialization bit-exactly.  Forward passes take
``train``/``rng`` only where dropout exists (the transformer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor

MASK_BLOCK = -1e9  # additive bias; exp() underflows to exactly 0.0


def collect_params(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk modules/lists/tensors and name every trainable parameter."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(collect_params(item, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, Module):
        for name, attr in vars(obj).items():
            if name.startswith("_"):
                continue
            if isinstance(attr, (Tensor, Module, list, tuple)):
                out.update(collect_params(attr, f"{prefix}.{name}" if prefix else name))
    return out


class Module:
    def params(self) -> dict[str, Tensor]:
        return collect_params(self)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.params()
        missing = set(mine) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in mine.items():
            a = np.asarray(arrays[name])
            if a.shape != p.data.shape:
                raise ShapeError(f"{name}: shape {a.shape} != {p.data.shape}")
            p.data = a.astype(p.data.dtype)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float64, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            w = _glorot(rng, n_in, n_out, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu}


class MLP(Module):
    """``depth`` hidden layers of width ``hidden`` between input and output."""

    def __init__(self, n_in: int, hidden: int, depth: int, n_out: int,
                 activation: str, rng: np.random.Generator, dtype=np.float64):
        dims = [n_in] + [hidden] * depth + [n_out]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class PointNetEncoder(Module):
    """Shared per-point MLP then max-pool over the point axis."""

    def __init__(self, n_in: int, hidden: int, depth: int, n_out: int,
                 activation: str, rng: np.random.Generator, dtype=np.float64):
        self.mlp = MLP(n_in, hidden, depth, n_out, activation, rng, dtype)

    def __call__(self, points: Tensor) -> Tensor:
        """points (..., N, C) -> (..., n_out)."""
        if points.shape[-1] != self.mlp.layers[0].w.shape[0]:
            raise ShapeError(
                f"point width {points.shape[-1]} != encoder input "
                f"{self.mlp.layers[0].w.shape[0]}")
        return T.max_reduce(self.mlp(points), axis=-2)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (L, L) mask: position i may attend to j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


class SelfAttention(Module):
    def __init__(self, embed: int, heads: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        if embed % heads:
            raise ShapeError("embed size must divide into heads")
        self.heads = heads
        self.head_dim = embed // heads
        self.qkv = Linear(embed, 3 * embed, rng, dtype)
        self.proj = Linear(embed, embed, rng, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray, train: bool,
                 rng: np.random.Generator | None) -> Tensor:
        b, length, embed = x.shape
        h, dh = self.heads, self.head_dim
        qkv = self.qkv(x)                                  # (B, L, 3E)
        qkv = T.reshape(qkv, (b, length, 3, h, dh))
        qkv = T.swapaxes(T.swapaxes(qkv, 1, 2), 2, 3)      # (B, 3, H, L, dh)
        q = T.slice_(qkv, (slice(None), 0))
        k = T.slice_(qkv, (slice(None), 1))
        v = T.slice_(qkv, (slice(None), 2))
        scale = Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=x.dtype))
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)  # (B, H, L, L)
        bias = np.where(mask, 0.0, MASK_BLOCK).astype(x.dtype.type)
        scores = T.add(scores, Tensor(bias))
        probs = T.softmax(scores, axis=-1)
        probs = T.dropout(probs, self.dropout, rng, train)
        out = T.matmul(probs, v)                           # (B, H, L, dh)
        out = T.reshape(T.swapaxes(out, 1, 2), (b, length, embed))
        return self.proj(out)


class GegluFeedForward(Module):
    def __init__(self, embed: int, hidden: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        self.w_in = Linear(embed, 2 * hidden, rng, dtype)
        self.w_out = Linear(hidden, embed, rng, dtype)
        self.hidden = hidden
        self.dropout = dropout

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        z = self.w_in(x)
        a = T.slice_(z, (Ellipsis, slice(0, self.hidden)))
        g = T.slice_(z, (Ellipsis, slice(self.hidden, 2 * self.hidden)))
        z = T.mul(a, T.gelu(g))
        z = T.dropout(z, self.dropout, rng, train)
        return self.w_out(z)


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class CausalTransformer(Module):
    """Pre-norm decoder-only self-attention stack with GEGLU feed-forward."""

    def __init__(self, embed: int, layers: int, heads: int, dropout: float,
                 rng: np.random.Generator, ff_mult: int = 4, dtype=np.float64):
        self.blocks = []
        for _ in range(layers):
            self.blocks.append([
                LayerNorm(embed, dtype),
                SelfAttention(embed, heads, dropout, rng, dtype),
                LayerNorm(embed, dtype),
                GegluFeedForward(embed, ff_mult * embed, dropout, rng, dtype),
            ])
        self.final_norm = LayerNorm(embed, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"transformer expects (B, L, E), got {x.shape}")
        length = x.shape[1]
        if mask is None:
            mask = causal_mask(length)
        if mask.shape != (length, length):
            raise ShapeError(f"mask must be ({length}, {length}), got {mask.shape}")
        if train and rng is None:
            raise ValueError("training mode needs an rng for dropout")
        for ln1, attn, ln2, ff in self.blocks:
            x = T.add(x, attn(ln1(x), mask, train, rng))
            x = T.add(x, ff(ln2(x), train, rng))
        return self.final_norm(x)


def sinusoidal_embedding(steps: np.ndarray, dim: int, max_period: float = 1e4,
                         dtype=np.float64) -> np.ndarray:
    """Classic sin/cos embedding of integer diffusion steps -> (..., dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = np.asarray(steps, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


class Conv1dBlock(Module):
    """conv(k) -> groupnorm -> gelu, with a FiLM scale/shift from conditioning."""

    def __init__(self, c_in: int, c_out: int, kernel: int, groups: int,
                 cond_width: int, rng: np.random.Generator, dtype=np.float64):
        std = math.sqrt(2.0 / (kernel * c_in + c_out))
        self.w = Tensor((rng.standard_normal((kernel, c_in, c_out)) * std).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.norm = LayerNormFree(c_out, groups, dtype)
        self.film = Linear(cond_width, 2 * c_out, rng, dtype)
        self.kernel = kernel
        self.c_out = c_out

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        y = T.conv1d(x, self.w, self.b, stride=1, pad=(self.kernel - 1, 0))
        y = self.norm(y)
        y = T.gelu(y)
        sc_sh = self.film(cond)                        # (B, 2C)
        b = sc_sh.shape[0]
        scale = T.reshape(T.slice_(sc_sh, (slice(None), slice(0, self.c_out))),
                          (b, 1, self.c_out))
        shift = T.reshape(T.slice_(sc_sh, (slice(None), slice(self.c_out, 2 * self.c_out))),
                          (b, 1, self.c_out))
        one = Tensor(np.asarray(1.0, dtype=x.dtype))
        return T.add(T.mul(y, T.add(one, scale)), shift)


class LayerNormFree(Module):
    """Group normalization with learned per-channel gain/bias."""

    def __init__(self, channels: int, groups: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.groupnorm(x, self.gamma, self.beta, self.groups)


def _upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the length axis of (B, L, C)."""
    b, length, c = x.shape
    col = T.reshape(x, (b, length, 1, c))
    return T.reshape(T.concat([col, col], axis=2), (b, 2 * length, c))


class UNet1d(Module):
    """Temporal UNet denoiser over fixed-length action chunks.

    Two resolution levels (hidden dims), kernel-2 convolutions, group
    normalization, FiLM conditioning on (conditioning vector + sinusoidal
    step embedding), skip connection across the downsample, and a
    zero-initialized output projection so the untrained net predicts zero.
    """

    def __init__(self, d_in: int, cond_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, int] = (64, 128), kernel: int = 2,
                 groups: int = 5, step_embed_dim: int = 8,
                 cond_hidden: int = 128, dtype=np.float64):
        h0, h1 = hidden
        self.step_embed_dim = step_embed_dim
        self.cond_in = Linear(cond_dim + step_embed_dim, cond_hidden, rng, dtype)
        self.cond_out = Linear(cond_hidden, cond_hidden, rng, dtype)
        self.down1 = Conv1dBlock(d_in, h0, kernel, groups, cond_hidden, rng, dtype)
        std = math.sqrt(2.0 / (kernel * h0 + h1))
        self.down_w = Tensor((rng.standard_normal((kernel, h0, h1)) * std).astype(dtype),
                             requires_grad=True)
        self.down_b = Tensor(np.zeros(h1, dtype=dtype), requires_grad=True)
        self.down2 = Conv1dBlock(h1, h1, kernel, groups, cond_hidden, rng, dtype)
        self.mid = Conv1dBlock(h1, h1, kernel, groups, cond_hidden, rng, dtype)
        self.up1 = Conv1dBlock(h1 + h0, h0, kernel, groups, cond_hidden, rng, dtype)
        self.out = Linear(h0, d_in, rng, dtype, zero_init=True)
        self.kernel = kernel
        self.d_in = d_in
        self.cond_dim = cond_dim

    def _cond_features(self, cond: Tensor, steps: np.ndarray) -> Tensor:
        emb = sinusoidal_embedding(steps, self.step_embed_dim, dtype=cond.data.dtype.type)
        z = T.concat([cond, Tensor(emb)], axis=-1)
        return self.cond_out(T.gelu(self.cond_in(z)))

    def __call__(self, x: Tensor, cond: Tensor, steps: np.ndarray) -> Tensor:
        """x (B, T, d_in), cond (B, cond_dim), steps (B,) -> (B, T, d_in)."""
        if x.data.ndim != 3 or x.shape[2] != self.d_in:
            raise ShapeError(f"unet expects (B, T, {self.d_in}), got {x.shape}")
        if cond.shape != (x.shape[0], self.cond_dim):
            raise ShapeError(
                f"unet conditioning must be ({x.shape[0]}, {self.cond_dim}), "
                f"got {cond.shape}")
        c = self._cond_features(cond, steps)
        d1 = self.down1(x, c)                                   # (B, T, h0)
        d = T.conv1d(d1, self.down_w, self.down_b, stride=2)    # (B, T/2, h1)
        d2 = self.down2(d, c)
        m = self.mid(d2, c)
        u = _upsample2(m)                                       # (B, T, h1)
        u = self.up1(T.concat([u, d1], axis=2), c)
        return self.out(u)


@dataclass
class ArchConfig:
    """Hyperparameters of the policy networks."""

    pointnet: dict = field(default_factory=lambda: dict(
        n_in=6, hidden=256, depth=2, n_out=256, activation="gelu"))
    prop_mlp: dict = field(default_factory=lambda: dict(
        n_in=21, hidden=256, depth=3, n_out=256, activation="relu"))
    goal_mlp: dict = field(default_factory=lambda: dict(
        n_in=3, hidden=256, depth=2, n_out=256, activation="relu"))
    transformer: dict = field(default_factory=lambda: dict(
        embed=256, layers=2, heads=8, dropout=0.1))
    unet: dict = field(default_factory=lambda: dict(
        hidden=[64, 128], kernel=2, groups=5, step_embed_dim=8, cond_hidden=128))
    n_pcd: int = 4096

    def __post_init__(self):
        if self.transformer["embed"] % self.transformer["heads"]:
            raise ValueError("embed size must be divisible by heads")

    def to_dict(self) -> dict:
        return dict(pointnet=dict(self.pointnet), prop_mlp=dict(self.prop_mlp),
                    goal_mlp=dict(self.goal_mlp), transformer=dict(self.transformer),
                    unet=dict(self.unet), n_pcd=self.n_pcd)

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(**d)
