"""Building blocks: LoRA-adapted projections, attention, MLP heads, the
transposed-convolution upscaler, layer norm and Fourier positional encoding."""
from __future__ import annotations

import math
import warnings
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, gelu, matmul, softmax_lastdim


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class Module:
    """Minimal parameter container.

    Tensor attributes are parameters; names listed in ``_frozen`` never
    receive gradients and are excluded from :meth:`trainable_parameters`.
    """

    def __init__(self):
        self._frozen: set[str] = set()

    def freeze(self, *names: str) -> None:
        for n in names:
            getattr(self, n).requires_grad = False
            self._frozen.add(n)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        """Yield ``(name, tensor, frozen)`` for every parameter, depth first."""
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val, key in self._frozen
            else:
                yield from val.named_parameters(prefix=name + ".")

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t, frozen in self.named_parameters() if not frozen}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t, frozen in self.named_parameters() if frozen}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape ``(C_in, C_out)``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, frozen: bool = False,
                 std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(c_in) if std is None else std
        self.weight = _param(rng.normal(0.0, std, size=(c_in, c_out)))
        self.bias = _param(np.zeros(c_out))
        self.frozen = frozen
        if frozen:
            self.freeze("weight", "bias")

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"linear expects last dim {self.c_in}, got input {x.shape}")
        return matmul(x, self.weight) + self.bias


class LoraAdapter(Module):
    """Low-rank update ``B @ A`` with ``A: (r, C_in)`` and ``B: (C_out, r)``."""

    def __init__(self, c_in: int, c_out: int, rank: int, rng: np.random.Generator):
        super().__init__()
        if not 1 <= rank < min(c_in, c_out):
            raise ConfigError(f"LoRA rank {rank} must satisfy 1 <= r < min({c_in}, {c_out})")
        self.rank = rank
        self.A = _param(rng.normal(0.0, math.sqrt(1.0 / rank), size=(rank, c_in)))
        self.B = _param(np.zeros((c_out, rank)))


class LoraLinear(Module):
    """Frozen base projection plus an optional trainable low-rank update."""

    def __init__(self, base: Linear, adapter: LoraAdapter | None = None):
        super().__init__()
        if not base.frozen:
            raise ConfigError("LoRA base layer must be frozen")
        if adapter is not None and (adapter.A.shape[1] != base.c_in or adapter.B.shape[0] != base.c_out):
            raise ConfigError(
                f"adapter shapes A{adapter.A.shape}, B{adapter.B.shape} do not fit base "
                f"({base.c_in}, {base.c_out})"
            )
        self.base = base
        self.adapter = adapter

    def effective_weight(self) -> Tensor:
        if self.adapter is None:
            return self.base.weight
        # base is stored (C_in, C_out); B @ A is (C_out, C_in)
        return self.base.weight + matmul(self.adapter.B, self.adapter.A).T

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if self.adapter is None:
            return y
        return y + matmul(matmul(x, self.adapter.A.T), self.adapter.B.T)


def lora_effective_weight(layer: LoraLinear) -> Tensor:
    return layer.effective_weight()


class Attention(Module):
    """Single-head attention whose query and value projections carry LoRA.

    The key projection never carries an adapter. With ``rank=None`` the block
    has no adapters at all; ``frozen=True`` also freezes ``out_proj``.
    """

    def __init__(self, dim: int, rng: np.random.Generator, rank: int | None = 4, frozen: bool = False,
                 qk_weight: np.ndarray | None = None):
        super().__init__()
        self.dim = dim
        q_base = Linear(dim, dim, rng, frozen=True)
        k_base = Linear(dim, dim, rng, frozen=True)
        v_base = Linear(dim, dim, rng, frozen=True)
        if qk_weight is not None:
            q_base.weight.data[...] = qk_weight
            k_base.weight.data[...] = qk_weight
            q_base.bias.data[...] = 0.0
            k_base.bias.data[...] = 0.0
        self.q_proj = LoraLinear(q_base, LoraAdapter(dim, dim, rank, rng) if rank else None)
        self.k_proj = LoraLinear(k_base, None)
        self.v_proj = LoraLinear(v_base, LoraAdapter(dim, dim, rank, rng) if rank else None)
        self.out_proj = Linear(dim, dim, rng, frozen=frozen)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        for t in (q, k, v):
            if t.shape[-1] != self.dim:
                raise ShapeError(f"attention expects feature dim {self.dim}, got {t.shape}")
        if k.shape[:-1] != v.shape[:-1]:
            raise ShapeError(f"keys {k.shape} and values {v.shape} disagree")
        qh = self.q_proj(q)
        kh = self.k_proj(k)
        vh = self.v_proj(v)
        scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim))
        return self.out_proj(matmul(softmax_lastdim(scores), vh))


def attention_forward(blk: Attention, queries: Tensor, keys_values: Tensor) -> Tensor:
    return blk(queries, keys_values, keys_values)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, affine: bool = True):
        super().__init__()
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = _param(np.ones(dim))
            self.bias = _param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        y = xc / (var + self.eps).sqrt()
        if self.affine:
            y = y * self.weight + self.bias
        return y


class MLP(Module):
    """Stack of trainable linear layers with GELU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


def mlp_forward(head: MLP, tokens: Tensor) -> Tensor:
    return head(tokens)


class TransposedConv2x(Module):
    """Transposed convolution with kernel 2, stride 2 and no padding.

    The kernel is stored as ``(C_in, C_out * 4)``; column ``o*4 + ky*2 + kx``
    holds the weight for output channel ``o`` at sub-position ``(ky, kx)``.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel = _param(rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_in, c_out * 4)))
        self.bias = _param(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"transposed conv expects (B, {self.c_in}, h, w), got {x.shape}")
        b, _, h, w = x.shape
        y = matmul(x.transpose(0, 2, 3, 1), self.kernel)  # (b, h, w, c_out*4)
        y = y.reshape(b, h, w, self.c_out, 2, 2).transpose(0, 3, 1, 4, 2, 5)
        y = y.reshape(b, self.c_out, 2 * h, 2 * w)
        return y + self.bias.reshape(1, self.c_out, 1, 1)


class TransposedConvUpscaler(Module):
    """Two stride-2 transposed convolutions, ``d -> d/4 -> c``, GELU between."""

    def __init__(self, dim: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        if dim % 4:
            raise ConfigError(f"upscaler input dim {dim} must be divisible by 4")
        self.stage1 = TransposedConv2x(dim, dim // 4, rng)
        self.stage2 = TransposedConv2x(dim // 4, out_channels, rng)

    def forward(self, grid: Tensor) -> Tensor:
        return self.stage2(gelu(self.stage1(grid)))


def upscale_forward(u: TransposedConvUpscaler, grid: Tensor) -> Tensor:
    return u(grid)


class FourierPositionalEncoder(Module):
    """Random Fourier features ``[sin(2*pi*p@G), cos(2*pi*p@G)]`` of 2-D points."""

    def __init__(self, dim: int, seed: int = 0, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"positional encoding dim {dim} must be even")
        self.dim = dim
        self.scale = scale
        rng = np.random.default_rng(seed)
        self.G = Tensor(scale * rng.normal(size=(2, dim // 2)))
        self.freeze("G")

    def encode(self, xy: np.ndarray) -> np.ndarray:
        """Encode an array of normalized points ``(..., 2)`` into ``(..., dim)``."""
        xy = np.asarray(xy, dtype=np.float64)
        if np.any(xy < 0.0) or np.any(xy > 1.0):
            warnings.warn(f"coordinates outside [0, 1] clamped: {xy.tolist()}", RuntimeWarning, stacklevel=2)
            xy = np.clip(xy, 0.0, 1.0)
        proj = 2.0 * np.pi * (xy @ self.G.data)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def pos_encode_point(enc: FourierPositionalEncoder, xy) -> Tensor:
    return Tensor(enc.encode(np.asarray(xy, dtype=np.float64).reshape(2)))
