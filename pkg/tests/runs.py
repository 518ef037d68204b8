"""Cached training runs on the synthetic few-shot task, shared across test modules.

Each seed ``s`` draws its training images from generator seed ``100 + s`` and
a 16-image test set from ``900 + s``; the model and the D1/D2 split use ``s``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

from amsam.data import Checkpoint, MetricsRow, SyntheticSpec, gen_synthetic
from amsam.model import AMSAM
from amsam.trainer import SplitDataset, TrainConfig, Trainer, evaluate, make_detector, split_dataset

SEEDS = (0, 1, 2)
TEST_COUNT = 16


@dataclass
class Run:
    cfg: TrainConfig
    split: SplitDataset
    trainer: Trainer
    ckpt: Checkpoint
    rows: list[MetricsRow]
    frozen_before: str
    untrained_d2: float


@functools.lru_cache(maxsize=None)
def task(n_train: int, seed: int) -> tuple:
    train = gen_synthetic(SyntheticSpec(count=n_train, seed=100 + seed))
    test = gen_synthetic(SyntheticSpec(count=TEST_COUNT, seed=900 + seed, prefix="t"))
    return tuple(train), tuple(test)


@functools.lru_cache(maxsize=None)
def run(n_train: int, seed: int, box: bool = True, calibration: bool = True, epochs: int = 100) -> Run:
    train, test = task(n_train, seed)
    cfg = TrainConfig(seed=seed, box_prompts=box, calibration_enabled=calibration, epochs=epochs)
    split = split_dataset(list(train), seed, list(test))
    model = AMSAM(cfg.model_config())
    untrained = evaluate(model, split.D2, make_detector(cfg))
    trainer = Trainer(cfg, split, model=model, debug=True)
    frozen = model.frozen_checksum()
    ckpt, rows = trainer.run()
    return Run(cfg, split, trainer, ckpt, rows, frozen, untrained)


def test_dice(r: Run) -> float:
    return evaluate(r.ckpt, r.split.test)
