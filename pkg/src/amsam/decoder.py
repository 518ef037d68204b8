"""Two-way transformer mask decoder with Hadamard-product mask calibration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Attention, ConfigError, LayerNorm, Module, TransposedConvUpscaler
from .tensor import ShapeError, Tensor, concat, concat_axis0, hadamard, matmul, mean_axis0, repeat_axis


@dataclass
class DecoderOutput:
    U: Tensor  # (b, c, h, w) upscaled image embedding
    H: Tensor  # (b, n, c) mask-token representation
    M_orig: Tensor
    M_new: Tensor
    M_final: Tensor


def _qk(kind: str, dim: int, rng: np.random.Generator) -> np.ndarray | None:
    """Shared frozen query/key matrix. ``orthogonal`` preserves inner products,
    so attention logits keep the positional-encoding kernel."""
    if kind == "gaussian":
        return None
    if kind == "orthogonal":
        q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
        return q * np.sign(np.diag(r))
    raise ConfigError(f"unknown qk_init {kind!r}")


class TwoWayBlock(Module):
    """Token self-attention, token-to-image attention, token MLP, image-to-token attention."""

    def __init__(self, dim: int, rng: np.random.Generator, rank: int, mlp_dim: int, skip_first_pe: bool,
                 qk_init: str = "gaussian"):
        super().__init__()
        self.skip_first_pe = skip_first_pe
        self.self_attn = Attention(dim, rng, rank=rank, qk_weight=_qk(qk_init, dim, rng))
        self.norm1 = LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, rng, rank=rank, qk_weight=_qk(qk_init, dim, rng))
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_dim, dim], rng)
        self.norm3 = LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, rng, rank=rank, qk_weight=_qk(qk_init, dim, rng))
        self.norm4 = LayerNorm(dim)

    def forward(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class MaskDecoder(Module):
    def __init__(
        self,
        dim: int = 32,
        grid: int = 8,
        n_masks: int = 2,
        channels: int = 8,
        rank: int = 4,
        depth: int = 2,
        mlp_dim: int = 64,
        alpha: float = 0.7,
        calibration_enabled: bool = True,
        per_batch_calibration: bool = False,
        qk_init: str = "gaussian",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if n_masks < 1:
            raise ConfigError("need at least one mask token")
        check_alpha(alpha)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.grid, self.n_masks, self.channels = dim, grid, n_masks, channels
        self.alpha = float(alpha)
        self.calibration_enabled = calibration_enabled
        self.per_batch_calibration = per_batch_calibration
        self.mask_tokens = Tensor(rng.normal(0.0, 1.0, size=(n_masks, dim)), requires_grad=True)
        self.blocks = [TwoWayBlock(dim, rng, rank, mlp_dim, skip_first_pe=(i == 0), qk_init=qk_init)
                       for i in range(depth)]
        self.final_attn = Attention(dim, rng, rank=rank, qk_weight=_qk(qk_init, dim, rng))
        self.norm_final = LayerNorm(dim)
        self.upscaler = TransposedConvUpscaler(dim, channels, rng)
        self.heads = [MLP([dim, dim, dim, channels], rng) for _ in range(n_masks)]

    def decode(self, image_emb: Tensor, prompts: Tensor, image_pe: Tensor) -> tuple[Tensor, Tensor]:
        """Run the two-way transformer; returns ``(U, H)``."""
        b, hw, d = image_emb.shape
        if d != self.dim or hw != self.grid * self.grid:
            raise ShapeError(
                f"image embedding {image_emb.shape} does not match decoder (B, {self.grid ** 2}, {self.dim})"
            )
        if prompts.ndim != 3 or prompts.shape[0] != b or prompts.shape[2] != d:
            raise ShapeError(f"prompt tokens {prompts.shape} do not match batch {b} / dim {d}")
        tokens = concat([repeat_axis(self.mask_tokens.reshape(1, self.n_masks, d), 0, b), prompts], axis=1)
        queries, keys = tokens, image_emb
        for blk in self.blocks:
            queries, keys = blk(queries, keys, tokens, image_pe)
        q = queries + tokens
        k = keys + image_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))

        grid = keys.transpose(0, 2, 1).reshape(b, d, self.grid, self.grid)
        U = self.upscaler(grid)
        H = concat([head(queries[:, i : i + 1, :]) for i, head in enumerate(self.heads)], axis=1)
        return U, H

    def forward(self, image_emb: Tensor, prompts: Tensor, image_pe: Tensor) -> DecoderOutput:
        U, H = self.decode(image_emb, prompts, image_pe)
        M_orig = predict_orig(U, H)
        if not self.calibration_enabled:
            return DecoderOutput(U, H, M_orig, M_orig, M_orig)
        M_new = calibrate_per_batch(U, H) if self.per_batch_calibration else calibrate(U, H)
        return DecoderOutput(U, H, M_orig, M_new, combine(M_orig, M_new, self.alpha))


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def _check_uh(U: Tensor, H: Tensor) -> None:
    if U.ndim != 4 or H.ndim != 3:
        raise ShapeError(f"expected U (b,c,h,w) and H (b,n,c), got {U.shape} and {H.shape}")
    if U.shape[0] != H.shape[0] or U.shape[1] != H.shape[2]:
        raise ShapeError(f"U {U.shape} and H {H.shape} disagree on batch or channels")


def predict_orig(U: Tensor, H: Tensor) -> Tensor:
    """Dot product over channels: ``M[b,i,y,x] = sum_k H[b,i,k] * U[b,k,y,x]``."""
    _check_uh(U, H)
    b, c, h, w = U.shape
    return matmul(H, U.reshape(b, c, h * w)).reshape(b, H.shape[1], h, w)


def calibrate(U: Tensor, H: Tensor) -> Tensor:
    """Per-channel Hadamard products, concatenated over the batch axis,
    averaged over all ``b*c`` slices and repeated back to batch size."""
    _check_uh(U, H)
    b, c, h, w = U.shape
    n = H.shape[1]
    parts = []
    for i in range(c):
        u_hat = repeat_axis(U[:, i : i + 1], 1, n)  # (b, n, h, w)
        h_hat = H[:, :, i : i + 1].reshape(b, n, 1, 1)
        parts.append(hadamard(u_hat, h_hat))
    R = concat_axis0(parts)  # (b*c, n, h, w)
    return repeat_axis(mean_axis0(R), 0, b)


def calibrate_per_batch(U: Tensor, H: Tensor) -> Tensor:
    """Variant that averages over channels within each batch row only."""
    _check_uh(U, H)
    return predict_orig(U, H) * (1.0 / U.shape[1])


def combine(M_orig: Tensor, M_new: Tensor, alpha: float) -> Tensor:
    check_alpha(alpha)
    if M_orig.shape != M_new.shape:
        raise ShapeError(f"mask shapes differ: {M_orig.shape} vs {M_new.shape}")
    if alpha == 1.0:
        return M_orig
    if alpha == 0.0:
        return M_new
    return M_orig * alpha + M_new * (1.0 - alpha)
