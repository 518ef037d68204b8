"""The assembled segmentation model: frozen encoder, prompt tokens, LoRA decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .decoder import DecoderOutput, MaskDecoder
from .nn import ConfigError, Module
from .prompting import BoundingBox, PromptEncoder, ToyImageEncoder, assemble_prompts
from .tensor import Tensor, parameters_checksum

PROMPT_NAME = "prompt_embedding"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 32
    n_masks: int = 2
    channels: int = 8
    rank: int = 4
    n_prompt: int = 4
    depth: int = 2
    mlp_dim: int = 64
    alpha: float = 0.7
    calibration_enabled: bool = True
    per_batch_calibration: bool = False
    pe_scale: float = 0.5
    qk_init: str = "orthogonal"
    encoder_pos_std: float = 0.0
    encoder_mix: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.n_prompt < 1:
            raise ConfigError("need at least one learnable prompt token")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class AMSAM(Module):
    """Encoder, prompt encoder, learnable prompt embedding and mask decoder.

    Every tensor is drawn from ``cfg.seed`` in a fixed order, so two models
    built from the same config start bit-identical whatever the ablation
    toggles say.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc_seed, pe_seed = (int(s) for s in rng.integers(0, 2**31, size=2))
        self.encoder = ToyImageEncoder(cfg.image_size, cfg.patch, cfg.dim, seed=enc_seed,
                                       pos_std=cfg.encoder_pos_std, mix=cfg.encoder_mix)
        self.prompt_encoder = PromptEncoder(cfg.dim, cfg.image_size, rng, pe_seed=pe_seed, pe_scale=cfg.pe_scale)
        self.prompt_embedding = Tensor(rng.normal(0.0, 1.0, size=(cfg.n_prompt, cfg.dim)), requires_grad=True)
        self.decoder = MaskDecoder(
            dim=cfg.dim, grid=cfg.grid, n_masks=cfg.n_masks, channels=cfg.channels, rank=cfg.rank,
            depth=cfg.depth, mlp_dim=cfg.mlp_dim, alpha=cfg.alpha,
            calibration_enabled=cfg.calibration_enabled, per_batch_calibration=cfg.per_batch_calibration,
            qk_init=cfg.qk_init, rng=rng,
        )
        self.image_pe = Tensor(self.prompt_encoder.dense_pe(cfg.grid, cfg.patch))
        self.freeze("image_pe")
        self._emb_cache: dict[str, Tensor] = {}

    # -- parameter groups -------------------------------------------------
    def prompt_params(self) -> list[Tensor]:
        return [self.prompt_embedding]

    def weight_params(self) -> dict[str, Tensor]:
        """The trainable set W: everything trainable except the prompt embedding."""
        return {n: t for n, t in self.trainable_parameters().items() if n != PROMPT_NAME}

    def frozen_checksum(self) -> str:
        return parameters_checksum(t for _, t in sorted(self.frozen_parameters().items()))

    # -- forward ----------------------------------------------------------
    def embed(self, images: np.ndarray, ids=None) -> Tensor:
        """Encoder output for a batch; cached per image id when ids are given."""
        images = np.asarray(images, dtype=np.float64)
        if ids is None:
            return self.encoder.encode(images)
        rows = []
        for img, key in zip(images, ids):
            if key not in self._emb_cache:
                self._emb_cache[key] = self.encoder.encode(img[None])
            rows.append(self._emb_cache[key].data)
        return Tensor(np.concatenate(rows, axis=0))

    def prompts(self, batch: int, boxes: list[BoundingBox | None] | None) -> Tensor:
        if boxes is None or all(b is None for b in boxes):
            return assemble_prompts(self.prompt_embedding, None, batch)
        if any(b is None for b in boxes):
            raise ValueError("a batch must have a box for every image or for none")
        tokens = [self.prompt_encoder.box_tokens(b) for b in boxes]
        return assemble_prompts(self.prompt_embedding, tokens, batch)

    def forward(self, images: np.ndarray, boxes: list[BoundingBox | None] | None = None, ids=None) -> DecoderOutput:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        emb = self.embed(images, ids)
        return self.decoder(emb, self.prompts(images.shape[0], boxes), self.image_pe)
