"""Synthetic datasets, graymap I/O, checkpoint files and metrics CSVs."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# samples and synthetic data
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[None]
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask is not binary")


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 32
    shape: str = "ellipse"  # rectangle | ellipse | mixed
    fg_mean: float = 0.7
    bg_mean: float = 0.3
    noise: float = 0.05
    count: int = 4
    seed: int = 0
    prefix: str = "s"
    min_fill: float = 0.15
    max_fill: float = 0.50
    distractors: int = 0


class InfeasibleSpec(ValueError):
    pass


def _draw_mask(spec: SyntheticSpec, kind: str, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]
    if kind == "rectangle":
        w = int(rng.integers(3, n - 1))
        h = int(rng.integers(3, n - 1))
        x0 = int(rng.integers(0, n - w + 1))
        y0 = int(rng.integers(0, n - h + 1))
        return ((xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)).astype(np.uint8)
    if kind == "ellipse":
        a = rng.uniform(2.0, n / 2 - 1)
        b = rng.uniform(2.0, n / 2 - 1)
        cx = rng.uniform(a, n - 1 - a)
        cy = rng.uniform(b, n - 1 - b)
        return ((((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2) <= 1.0).astype(np.uint8)
    raise ValueError(f"unknown shape family {kind!r}")


def _place_distractor(spec: SyntheticSpec, mask: np.ndarray, rng: np.random.Generator, gap: int = 3,
                      max_tries: int = 200) -> np.ndarray:
    """A small unlabelled shape kept ``gap`` pixels away from the target's bounding box."""
    n = spec.size
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min() - gap, ys.max() + gap, xs.min() - gap, xs.max() + gap
    yy, xx = np.mgrid[0:n, 0:n]
    keep_out = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    for _ in range(max_tries):
        r = rng.uniform(1.5, 3.5)
        cx, cy = rng.uniform(r, n - 1 - r, size=2)
        blob = (((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r).astype(np.uint8)
        if not (blob.astype(bool) & keep_out).any():
            return blob
    return np.zeros_like(mask)


def gen_synthetic(spec: SyntheticSpec, max_tries: int = 1000) -> list[Sample]:
    """One random shape per image: bright foreground on a darker noisy background."""
    if spec.size < 8:
        raise InfeasibleSpec(f"image size {spec.size} too small for a shape")
    if not 0.0 < spec.min_fill < spec.max_fill <= 1.0:
        raise InfeasibleSpec(f"occupancy range ({spec.min_fill}, {spec.max_fill}) is empty")
    if spec.count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(spec.seed)
    kinds = ("rectangle", "ellipse") if spec.shape == "mixed" else (spec.shape,)
    samples = []
    for i in range(spec.count):
        kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
        for _ in range(max_tries):
            mask = _draw_mask(spec, kind, rng)
            if spec.min_fill <= mask.mean() <= spec.max_fill:
                break
        else:
            raise InfeasibleSpec(f"no {kind} with occupancy in [{spec.min_fill}, {spec.max_fill}]")
        shown = mask.copy()
        for _ in range(spec.distractors):
            shown |= _place_distractor(spec, mask, rng)
        img = spec.bg_mean + (spec.fg_mean - spec.bg_mean) * shown + rng.normal(0.0, spec.noise, size=mask.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        samples.append(Sample(f"{spec.prefix}{i:04d}", img[None], mask))
    return samples


# ---------------------------------------------------------------------------
# portable graymap (binary P5, 8-bit)
# ---------------------------------------------------------------------------


class PGMError(ValueError):
    pass


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"graymap needs a 2-D array, got {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise PGMError(f"truncated header at byte {pos}")
        if raw[pos : pos + 1] == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((raw[start:pos], start))
    (magic, at), *dims = tokens
    if magic != b"P5":
        raise PGMError(f"bad magic {magic!r} at byte {at}; expected P5")
    try:
        w, h, maxval = (int(t) for t, _ in dims)
    except ValueError:
        bad = next(o for t, o in dims if not t.isdigit())
        raise PGMError(f"non-numeric header field at byte {bad}") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise PGMError(f"unsupported header (w={w}, h={h}, maxval={maxval}) at byte {dims[0][1]}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise PGMError(f"missing separator after header at byte {pos}")
    pos += 1
    need = w * h
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise PGMError(f"truncated payload at byte {pos + len(payload)}: expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_image(path, image: np.ndarray) -> None:
    """Grayscale ``(H, W)`` or ``(1, H, W)`` image in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64).reshape(np.shape(image)[-2:])
    Path(path).write_bytes(encode_pgm(np.round(np.clip(arr, 0.0, 1.0) * 255.0)))


def load_image(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes()).astype(np.float64)[None] / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm((np.asarray(mask) > 0).astype(np.uint8) * 255))


def load_mask(path) -> np.ndarray:
    px = decode_pgm(Path(path).read_bytes())
    if not np.isin(px, (0, 255)).all():
        raise PGMError(f"{path}: mask values must be 0 or 255")
    return (px == 255).astype(np.uint8)


def save_dataset(directory, samples: Iterable[Sample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(d / f"img_{s.id}.pgm", s.image)
        save_mask(d / f"mask_{s.id}.pgm", s.mask)


def load_dataset(directory) -> list[Sample]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    samples = []
    for img_path in sorted(d.glob("img_*.pgm")):
        sid = img_path.stem[len("img_") :]
        mask_path = d / f"mask_{sid}.pgm"
        if not mask_path.exists():
            raise FileNotFoundError(f"image {sid} has no mask file {mask_path.name}")
        samples.append(Sample(sid, load_image(img_path), load_mask(mask_path)))
    return samples


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AMCK\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Trainable tensors by name plus the configuration needed to rebuild frozen state."""

    tensors: dict[str, np.ndarray]
    config: dict
    best_d2_dice: float = float("nan")
    epoch: int = -1
    frozen_checksum: str = ""
    extra: dict = field(default_factory=dict)


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "tensors": index,
        "best_d2_dice": ckpt.best_d2_dice,
        "epoch": ckpt.epoch,
        "frozen_checksum": ckpt.frozen_checksum,
        "extra": ckpt.extra,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(text)) + text + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def deserialize_checkpoint(raw: bytes) -> Checkpoint:
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointFormatError("checkpoint file truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch; file is corrupted")
    start = len(CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack("<Q", body[start : start + 8])
    try:
        manifest = json.loads(body[start + 8 : start + 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    payload = body[start + 8 + mlen :]
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if entry["nbytes"] != expected:
            raise CheckpointShapeError(
                f"tensor {entry['name']}: {entry['nbytes']} bytes does not match shape {shape}"
            )
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != expected:
            raise CheckpointShapeError(f"tensor {entry['name']}: payload shorter than manifest")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(
        tensors=tensors,
        config=manifest["config"],
        best_d2_dice=manifest["best_d2_dice"],
        epoch=manifest["epoch"],
        frozen_checksum=manifest.get("frozen_checksum", ""),
        extra=manifest.get("extra", {}),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return deserialize_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRICS_HEADER = ("epoch", "lower_loss", "upper_loss", "d2_dice", "test_dice", "lr_lower", "lr_upper")


@dataclass
class MetricsRow:
    epoch: int
    lower_loss: float
    upper_loss: float
    d2_dice: float
    test_dice: float | None
    lr_lower: float
    lr_upper: float


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    epochs = [r.epoch for r in rows]
    if epochs != sorted(epochs):
        raise ValueError("metrics rows must be sorted by epoch")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in rows:
        writer.writerow([r.epoch, _fmt(r.lower_loss), _fmt(r.upper_loss), _fmt(r.d2_dice), _fmt(r.test_dice),
                         _fmt(r.lr_lower), _fmt(r.lr_upper)])
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [
            MetricsRow(
                epoch=int(r["epoch"]),
                lower_loss=float(r["lower_loss"]),
                upper_loss=float(r["upper_loss"]),
                d2_dice=float(r["d2_dice"]),
                test_dice=float(r["test_dice"]) if r["test_dice"] else None,
                lr_lower=float(r["lr_lower"]),
                lr_upper=float(r["lr_upper"]),
            )
            for r in reader
        ]
