"""Bi-level training: weights W on D1 (lower level), prompt embedding A on D2 (upper level).

The upper level uses the first-order approximation: its gradient is the direct
gradient of the D2 loss with respect to A at the current W.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .data import Checkpoint, MetricsRow, Sample
from .losses import LossConfig, binarize, combined_loss, dice_score
from .model import PROMPT_NAME, AMSAM, ModelConfig
from .nn import ConfigError
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .prompting import FileDetector, NoDetector, OracleDetector, detect_boxes, select_best_box
from .tensor import backward, no_grad, parameters_checksum

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class LevelSeparationError(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.8
    alpha: float = 0.7
    lower_lr: float = 5e-3
    upper_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    epochs: int = 100
    rank: int = 4
    seed: int = 0
    batch_size: int = 1
    box_prompts: bool = True
    calibration_enabled: bool = True
    detector: str = "oracle"  # oracle | file
    detections_file: str | None = None
    jitter: int = 2
    n_prompt: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lower_lr < 0 or self.upper_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.detector not in ("oracle", "file"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if self.detector == "file" and self.box_prompts and not self.detections_file:
            raise ConfigError("detector 'file' needs detections_file")
        LossConfig(lam=self.lam)

    def model_config(self) -> ModelConfig:
        return ModelConfig(rank=self.rank, alpha=self.alpha, calibration_enabled=self.calibration_enabled,
                           n_prompt=self.n_prompt, seed=self.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def make_detector(cfg: TrainConfig):
    if not cfg.box_prompts:
        return NoDetector()
    if cfg.detector == "file":
        return FileDetector.from_path(cfg.detections_file)
    return OracleDetector(jitter=cfg.jitter, seed=cfg.seed)


@dataclass
class SplitDataset:
    D1: list[Sample]
    D2: list[Sample]
    test: list[Sample]


def split_dataset(samples: Sequence[Sample], seed: int, test: Sequence[Sample] = ()) -> SplitDataset:
    """Shuffle deterministically and halve; D1 takes the extra sample on odd counts."""
    if len(samples) < 2:
        raise ValueError(f"bi-level training needs at least 2 samples, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    half = (len(samples) + 1) // 2
    return SplitDataset(
        D1=[samples[i] for i in order[:half]],
        D2=[samples[i] for i in order[half:]],
        test=list(test),
    )


def _batches(samples: Sequence[Sample], size: int) -> list[list[Sample]]:
    return [list(samples[i : i + size]) for i in range(0, len(samples), size)]


def boxes_for(detector, batch: Sequence[Sample]):
    boxes = [select_best_box(detect_boxes(detector, s.image, s.mask, image_id=s.id)) for s in batch]
    if all(b is None for b in boxes):
        return None
    if any(b is None for b in boxes):
        log.warning("batch mixes images with and without boxes; dropping box prompts for it")
        return None
    return boxes


def _forward(model: AMSAM, batch: Sequence[Sample], detector):
    images = np.stack([s.image for s in batch])
    return model.forward(images, boxes_for(detector, batch), ids=[s.id for s in batch])


def _checksum(tensors) -> str:
    return parameters_checksum(tensors)


class Trainer:
    """Owns the model, both optimizer states and both learning-rate schedules."""

    def __init__(self, cfg: TrainConfig, split: SplitDataset, model: AMSAM | None = None, debug: bool = False):
        self.cfg = cfg
        self.split = split
        self.model = model if model is not None else AMSAM(cfg.model_config())
        self.detector = make_detector(cfg)
        self.loss_cfg = cfg.loss_config()
        self.debug = debug
        self.W = list(self.model.weight_params().values())
        self.A = self.model.prompt_params()
        self.lower_state = AdamWState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.upper_state = AdamWState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.d1_batches = _batches(split.D1, cfg.batch_size)
        self.d2_batches = _batches(split.D2, cfg.batch_size)
        self.lower_sched = LrSchedule(cfg.lower_lr, cfg.epochs * len(self.d1_batches))
        self.upper_sched = LrSchedule(cfg.upper_lr, cfg.epochs * len(self.d2_batches))
        self.lower_iter = 0
        self.upper_iter = 0
        self.step_log: list[tuple[str, bool, bool]] = []  # (level, W changed, A changed)

    def _step(self, batch, train: list, hold: list, state: AdamWState, lr: float, where: str) -> float:
        if not batch:
            raise ValueError("empty batch")
        for t in hold:
            t.requires_grad = False
            t.grad = None
        for t in train:
            t.requires_grad = True
            t.zero_grad()
        try:
            out = _forward(self.model, batch, self.detector)
            loss = combined_loss(out.M_final, np.stack([s.mask for s in batch]), self.loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at {where}")
            backward(loss)
            adamw_step(train, state, lr)
        finally:
            for t in train:
                t.grad = None
            for t in hold:
                t.requires_grad = True
        return value

    def lower_step(self, batch: Sequence[Sample], lr: float, where: str = "lower step") -> float:
        """AdamW step on W with A held fixed."""
        return self._guarded("lower", lambda: self._step(batch, self.W, self.A, self.lower_state, lr, where))

    def upper_step(self, batch: Sequence[Sample], lr: float, where: str = "upper step") -> float:
        """AdamW step on A with W held fixed."""
        return self._guarded("upper", lambda: self._step(batch, self.A, self.W, self.upper_state, lr, where))

    def _guarded(self, level: str, fn: Callable[[], float]) -> float:
        if not self.debug:
            return fn()
        w0, a0 = _checksum(self.W), _checksum(self.A)
        value = fn()
        w_changed, a_changed = _checksum(self.W) != w0, _checksum(self.A) != a0
        self.step_log.append((level, w_changed, a_changed))
        if (level == "lower" and a_changed) or (level == "upper" and w_changed):
            raise LevelSeparationError(f"{level} step mutated the other level's parameters")
        return value

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.model.trainable_parameters().items()}

    def run(self, on_epoch: Callable[[MetricsRow], None] | None = None) -> tuple[Checkpoint, list[MetricsRow]]:
        cfg = self.cfg
        rows: list[MetricsRow] = []
        best_dice, best_epoch, best_state = -1.0, -1, None
        for epoch in range(cfg.epochs):
            lower_losses, upper_losses = [], []
            for j, batch in enumerate(self.d1_batches):
                lr = lr_at(self.lower_sched, self.lower_iter)
                lower_losses.append(self.lower_step(batch, lr, where=f"epoch {epoch}, lower step {j}"))
                self.lower_iter += 1
            for j, batch in enumerate(self.d2_batches):
                lr = lr_at(self.upper_sched, self.upper_iter)
                upper_losses.append(self.upper_step(batch, lr, where=f"epoch {epoch}, upper step {j}"))
                self.upper_iter += 1
            d2 = evaluate(self.model, self.split.D2, self.detector)
            test = evaluate(self.model, self.split.test, self.detector) if self.split.test else None
            row = MetricsRow(
                epoch=epoch,
                lower_loss=float(np.mean(lower_losses)),
                upper_loss=float(np.mean(upper_losses)),
                d2_dice=d2,
                test_dice=test,
                lr_lower=lr_at(self.lower_sched, self.lower_iter),
                lr_upper=lr_at(self.upper_sched, self.upper_iter),
            )
            rows.append(row)
            log.info("epoch %d: lower %.4f upper %.4f d2 %.4f", epoch, row.lower_loss, row.upper_loss, d2)
            if on_epoch is not None:
                on_epoch(row)
            if d2 > best_dice:
                best_dice, best_epoch, best_state = d2, epoch, self.snapshot()
        ckpt = Checkpoint(
            tensors=best_state,
            config={"train": cfg.to_dict(), "model": self.model.cfg.to_dict()},
            best_d2_dice=best_dice,
            epoch=best_epoch,
            frozen_checksum=self.model.frozen_checksum(),
            extra={"d1": [s.id for s in self.split.D1], "d2": [s.id for s in self.split.D2]},
        )
        return ckpt, rows


def train(cfg: TrainConfig, data: SplitDataset, debug: bool = False) -> tuple[Checkpoint, list[MetricsRow]]:
    return Trainer(cfg, data, debug=debug).run()


def initial_checkpoint(cfg: TrainConfig, model: AMSAM | None = None) -> Checkpoint:
    model = model if model is not None else AMSAM(cfg.model_config())
    return Checkpoint(
        tensors={n: t.data.copy() for n, t in model.trainable_parameters().items()},
        config={"train": cfg.to_dict(), "model": model.cfg.to_dict()},
        frozen_checksum=model.frozen_checksum(),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> AMSAM:
    """Rebuild frozen state from the recorded seed and load trainable tensors."""
    model = AMSAM(ModelConfig.from_dict(ckpt.config["model"]))
    params = model.trainable_parameters()
    unknown = sorted(set(ckpt.tensors) - set(params))
    if unknown:
        raise KeyError(f"checkpoint holds unknown tensors: {unknown}")
    missing = sorted(set(params) - set(ckpt.tensors))
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing}")
    for name, arr in ckpt.tensors.items():
        if params[name].shape != arr.shape:
            raise ValueError(f"tensor {name}: checkpoint shape {arr.shape} vs model {params[name].shape}")
        params[name].data = np.array(arr, dtype=np.float64)
    if ckpt.frozen_checksum and model.frozen_checksum() != ckpt.frozen_checksum:
        raise ValueError("frozen parameters rebuilt from the seed do not match the checkpoint")
    return model


def predict_mask(model: AMSAM, image: np.ndarray, box=None, sample_id: str | None = None) -> np.ndarray:
    """Binarized foreground of ``M_final`` for a single ``(1, H, W)`` image."""
    with no_grad():
        out = model.forward(np.asarray(image)[None], None if box is None else [box],
                            ids=None if sample_id is None else [sample_id])
    return binarize(out.M_final)[0]


def evaluate(model_or_ckpt, samples: Sequence[Sample], detector=None) -> float:
    """Mean dice of the binarized ``M_final`` foreground over ``samples``, one image at a time."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    if isinstance(model_or_ckpt, Checkpoint):
        model = model_from_checkpoint(model_or_ckpt)
        if detector is None:
            detector = make_detector(TrainConfig.from_dict(model_or_ckpt.config["train"]))
    else:
        model = model_or_ckpt
    detector = detector if detector is not None else NoDetector()
    scores = []
    with no_grad():
        for s in samples:
            out = _forward(model, [s], detector)
            scores.append(dice_score(binarize(out.M_final)[0], s.mask))
    return float(np.mean(scores))


__all__ = [
    "TrainConfig", "SplitDataset", "split_dataset", "Trainer", "train", "evaluate", "make_detector",
    "model_from_checkpoint", "initial_checkpoint", "predict_mask", "TrainingDiverged", "LevelSeparationError",
    "PROMPT_NAME",
]
