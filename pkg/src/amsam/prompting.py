"""Frozen toy image encoder, box detection sources and prompt assembly."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .nn import Attention, ConfigError, FourierPositionalEncoder, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor, concat, no_grad, repeat_axis


class ToyImageEncoder(Module):
    """Patch embedding followed by two frozen attention blocks.

    ``pos_std`` scales the random per-token position embedding and ``mix``
    the attention residual; small values limit what a few-shot decoder can
    memorize about absolute position.

    All weights come from ``seed`` and are frozen, so the encoder is a fixed
    deterministic map from images to token grids.
    """

    def __init__(self, image_size: int = 32, patch: int = 4, dim: int = 32, seed: int = 0,
                 pos_std: float = 0.0, mix: float = 0.3):
        super().__init__()
        if image_size % patch:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch}")
        rng = np.random.default_rng(seed)
        self.image_size, self.patch, self.dim = image_size, patch, dim
        self.grid = image_size // patch
        self.patch_embed = Linear(patch * patch, dim, rng, frozen=True)
        self.patch_embed.bias.data[...] = rng.normal(0.0, 0.1, size=dim)
        self.pos_embed = Tensor(rng.normal(0.0, pos_std, size=(self.grid * self.grid, dim)))
        self.freeze("pos_embed")
        self.blocks = [Attention(dim, rng, rank=None, frozen=True) for _ in range(2)]
        # weak residual mixing keeps each token close to its own patch content
        for blk in self.blocks:
            blk.out_proj.weight.data *= mix
        self._norm = LayerNorm(dim, affine=False)

    def patchify(self, img: np.ndarray) -> np.ndarray:
        b, ch, h, w = img.shape
        p = self.patch
        if ch != 1:
            raise ShapeError(f"encoder expects single-channel images, got {img.shape}")
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        x = img.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, (h // p) * (w // p), p * p)

    def encode(self, img) -> Tensor:
        data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
        if data.ndim != 4:
            raise ShapeError(f"encoder expects (B, 1, H, W), got {data.shape}")
        if data.shape[2] != self.image_size or data.shape[3] != self.image_size:
            raise ConfigError(f"encoder built for {self.image_size}px images, got {data.shape[2:]}")
        with no_grad():
            x = self.patch_embed(Tensor(self.patchify(data))) + self.pos_embed
            for blk in self.blocks:
                x = x + blk(self._norm(x), self._norm(x), self._norm(x))
        return Tensor(x.data)

    forward = encode


def encode_image(enc: ToyImageEncoder, img) -> Tensor:
    return enc.encode(img)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def clamp(self, width: int, height: int) -> "BoundingBox":
        x1, x2 = np.clip([self.x1, self.x2], 0, width - 1)
        y1, y2 = np.clip([self.y1, self.y2], 0, height - 1)
        return BoundingBox(float(x1), float(y1), float(x2), float(y2), self.confidence)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight ``(x1, y1, x2, y2)`` of the foreground, inclusive; ``None`` if empty."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


class OracleDetector:
    """Tight box around the ground-truth foreground, pushed outward by jitter.

    Each side moves out by an integer drawn uniformly from ``[0, jitter]``;
    the draw depends only on ``(seed, image_id)`` so repeated calls agree.
    """

    def __init__(self, jitter: int = 2, seed: int = 0):
        if jitter < 0:
            raise ValueError("jitter must be >= 0")
        self.jitter = jitter
        self.seed = seed

    def detect(self, image, mask=None, image_id: str = "") -> list[BoundingBox]:
        if mask is None:
            raise ValueError("oracle detector needs a ground-truth mask")
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        tight = mask_bbox(mask)
        if tight is None:
            return []
        x1, y1, x2, y2 = tight
        if self.jitter:
            rng = np.random.default_rng([self.seed, zlib.crc32(image_id.encode())])
            dx1, dy1, dx2, dy2 = rng.integers(0, self.jitter + 1, size=4)
            h, w = mask.shape[-2:]
            x1, y1 = max(0, x1 - int(dx1)), max(0, y1 - int(dy1))
            x2, y2 = min(w - 1, x2 + int(dx2)), min(h - 1, y2 + int(dy2))
        if x1 == x2 or y1 == y2:
            # single-pixel-wide foreground; widen so the box has area
            h, w = mask.shape[-2:]
            x2 = min(w - 1, x2 + 1) if x1 == x2 else x2
            x1 = x2 - 1 if x1 == x2 else x1
            y2 = min(h - 1, y2 + 1) if y1 == y2 else y2
            y1 = y2 - 1 if y1 == y2 else y1
        return [BoundingBox(float(x1), float(y1), float(x2), float(y2), 1.0)]


class FileDetector:
    """Boxes read from a detections file, returned verbatim per image id."""

    def __init__(self, entries: Mapping[str, list[BoundingBox]], path: str | None = None):
        self.entries = dict(entries)
        self.path = path

    @classmethod
    def from_path(cls, path) -> "FileDetector":
        return cls(load_detections(path), path=str(path))

    def detect(self, image=None, mask=None, image_id: str = "") -> list[BoundingBox]:
        if image_id not in self.entries:
            raise KeyError(f"detections file has no entry for image id {image_id!r}")
        return list(self.entries[image_id])


class NoDetector:
    def detect(self, image=None, mask=None, image_id: str = "") -> list[BoundingBox]:
        return []


DetectionSource = OracleDetector | FileDetector | NoDetector


def detect_boxes(src: DetectionSource, img=None, mask=None, image_id: str = "") -> list[BoundingBox]:
    return src.detect(img, mask, image_id=image_id)


def select_best_box(boxes: Sequence[BoundingBox]) -> BoundingBox | None:
    best = None
    for b in boxes:
        if best is None or b.confidence > best.confidence:
            best = b
    return best


def _reject_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"duplicate image id {k!r} in detections file")
        out[k] = v
    return out


def load_detections(path) -> dict[str, list[BoundingBox]]:
    """Parse ``{"<image id>": [{"x1", "y1", "x2", "y2", "confidence"}, ...]}``."""
    raw = json.loads(Path(path).read_text(), object_pairs_hook=_reject_duplicate_keys)
    if not isinstance(raw, dict):
        raise ValueError("detections file must hold a JSON object keyed by image id")
    result = {}
    for image_id, boxes in raw.items():
        if not isinstance(boxes, list):
            raise ValueError(f"entry for {image_id!r} must be a list of boxes")
        parsed = []
        for i, b in enumerate(boxes):
            try:
                parsed.append(BoundingBox(float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"]),
                                          float(b.get("confidence", 1.0))))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"box {i} of {image_id!r} is malformed: {exc}") from None
        result[image_id] = parsed
    return result


def save_detections(path, entries: Mapping[str, Sequence[BoundingBox]]) -> None:
    payload = {
        k: [{"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "confidence": b.confidence} for b in v]
        for k, v in entries.items()
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class PromptEncoder(Module):
    """Turns a box into two corner tokens: positional code plus a learned type vector."""

    def __init__(self, dim: int, image_size: int, rng: np.random.Generator, pe_seed: int = 0,
                 pe_scale: float = 1.0):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.pe = FourierPositionalEncoder(dim, seed=pe_seed, scale=pe_scale)
        self.corner_types = Tensor(rng.normal(0.0, 1.0, size=(2, dim)), requires_grad=True)

    def normalize(self, x: float, y: float, img_size=None) -> np.ndarray:
        h, w = _hw(img_size if img_size is not None else self.image_size)
        return np.array([x / (w - 1), y / (h - 1)])

    def box_tokens(self, box: BoundingBox, img_size=None) -> Tensor:
        h, w = _hw(img_size if img_size is not None else self.image_size)
        clamped = box.clamp(w, h) if _needs_clamp(box, w, h) else box
        corners = np.stack([self.normalize(clamped.x1, clamped.y1, (h, w)),
                            self.normalize(clamped.x2, clamped.y2, (h, w))])
        return Tensor(self.pe.encode(corners)) + self.corner_types

    def dense_pe(self, grid: int, patch: int) -> np.ndarray:
        """Positional codes of the patch centres, ``(grid*grid, dim)``."""
        size = grid * patch
        c = (np.arange(grid) * patch + (patch - 1) / 2.0) / (size - 1)
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return self.pe.encode(np.stack([xx.ravel(), yy.ravel()], axis=-1))


def _hw(img_size) -> tuple[int, int]:
    if isinstance(img_size, int):
        return img_size, img_size
    h, w = img_size
    return int(h), int(w)


def _needs_clamp(box: BoundingBox, w: int, h: int) -> bool:
    return box.x1 < 0 or box.y1 < 0 or box.x2 > w - 1 or box.y2 > h - 1


def box_to_prompt_tokens(box: BoundingBox, enc: PromptEncoder, img_size) -> Tensor:
    return enc.box_tokens(box, img_size)


def assemble_prompts(A: Tensor, box_tokens: Tensor | Sequence[Tensor] | None, batch: int) -> Tensor:
    """``[A; box_tokens]`` per batch row, shape ``(B, n_A [+2], d)``.

    ``box_tokens`` may be a single ``(2, d)`` tensor shared by all rows or one
    tensor per row.
    """
    rows = repeat_axis(A.reshape(1, *A.shape), 0, batch)
    if box_tokens is None:
        return rows
    if isinstance(box_tokens, Tensor):
        if box_tokens.shape[-1] != A.shape[-1]:
            raise ShapeError(f"box tokens {box_tokens.shape} vs prompt embedding {A.shape}")
        boxes = repeat_axis(box_tokens.reshape(1, *box_tokens.shape), 0, batch)
    else:
        if len(box_tokens) != batch:
            raise ShapeError(f"{len(box_tokens)} box token sets for batch {batch}")
        boxes = concat([t.reshape(1, *t.shape) for t in box_tokens], axis=0)
    return concat([rows, boxes], axis=1)


def box_area(box: BoundingBox) -> float:
    """Pixel area of an inclusive box."""
    return (box.x2 - box.x1 + 1) * (box.y2 - box.y1 + 1)


__all__ = [
    "ToyImageEncoder", "encode_image", "BoundingBox", "mask_bbox", "OracleDetector", "FileDetector",
    "NoDetector", "DetectionSource", "detect_boxes", "select_best_box", "load_detections",
    "save_detections", "PromptEncoder", "box_to_prompt_tokens", "assemble_prompts", "box_area",
]
