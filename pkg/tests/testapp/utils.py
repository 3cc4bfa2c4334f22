from __future__ import annotations

import functools
import shutil
import tempfile
from pathlib import Path
from typing import Any
from unittest import TestCase

import torch

from instance_rsr.configfile import dump_config
from instance_rsr.evalkit import bicubic_upsample, psnr
from instance_rsr.trainer import (
    CHECKPOINT_NAME,
    ModelConfig,
    SceneDataset,
    TrainConfig,
    Trainer,
    TrainResult,
    train,
)


def tiny_config(**kwargs: Any) -> TrainConfig:
    """
    A config small enough to train a few steps in a test: 16x16 scenes, 2x2
    patches, a depth-2 width-16 backbone and a T=10 schedule.
    """
    defaults: dict[str, Any] = {
        "steps": 4,
        "batch_size": 2,
        "T": 10,
        "image_size": 16,
        "patch_size": 2,
        "num_instances": 2,
        "teacher_dim": 8,
        "eval_every": 2,
        "checkpoint_every": 0,
        "log_every": 2,
        "eval_scenes": 2,
        "eval_steps": 2,
        "model": ModelConfig(depth=2, width=16, heads=2),
    }
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def make_tmp_dir(test: TestCase) -> Path:
    path = Path(tempfile.mkdtemp(prefix="instance_rsr_test_"))
    test.addCleanup(shutil.rmtree, path, ignore_errors=True)
    return path


def random_image(
    height: int, width: int, seed: int = 0, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((height, width, 3), generator=generator, dtype=dtype)


def write_tiny_config(directory: Path, **kwargs: Any) -> Path:
    path = directory / "train.yaml"
    path.write_text(dump_config(tiny_config(**kwargs)))
    return path


def train_tiny_checkpoint(directory: Path, **kwargs: Any) -> Path:
    """
    Train ``tiny_config(**kwargs)`` for two steps into ``directory`` and
    return the final checkpoint path.
    """
    kwargs.setdefault("steps", 2)
    kwargs.setdefault("eval_every", 0)
    train(tiny_config(**kwargs), directory)
    return directory / CHECKPOINT_NAME


def reference_config(case: int = 0) -> TrainConfig:
    """
    The acceptance run: 64x64 scenes with four instances, 4x4 patches and
    2000 steps, evaluated every 100 steps with 10 DDIM steps.
    """
    return TrainConfig(
        case=case,
        steps=2000,
        batch_size=8,
        lr=1e-3,
        eval_every=100,
        checkpoint_every=0,
        log_every=0,
        eval_scenes=8,
        eval_steps=10,
        model=ModelConfig(depth=4, width=128, heads=4),
    )


@functools.cache
def reference_run(case: int = 0) -> tuple[Trainer, TrainResult]:
    """
    Train ``reference_config(case)`` once per test session.
    """
    trainer = Trainer(reference_config(case))
    return trainer, trainer.run()


def held_out_pairs(
    config: TrainConfig, count: int | None = None
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    count = config.eval_scenes if count is None else count
    dataset = SceneDataset(config, "eval", size=count)
    items = [dataset[index] for index in range(count)]
    return [(item["lr"], item["image"]) for item in items]


def bicubic_psnr(config: TrainConfig) -> float:
    scores = [
        psnr(bicubic_upsample(lr, config.total_scale), hr)
        for lr, hr in held_out_pairs(config)
    ]
    return sum(scores) / len(scores)
