"""
Training over a deterministic stream of synthetic scenes.

Every training sample is a pure function of ``(seed, sample index)`` and step
``k`` always consumes indices ``k * batch_size`` onwards, so the data order
survives prefetching workers and checkpoint/resume. The remaining randomness
(timesteps, noise draws, scale targets) comes from one generator whose state
is stored in the checkpoint.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Literal, Sequence

import torch
from safetensors import safe_open
from safetensors.torch import save_file
from torch.utils.data import DataLoader, Dataset, Sampler

from instance_rsr import conf
from instance_rsr.backbone import Backbone, BackboneConfig
from instance_rsr.codec import PatchCodec, join, upsample_to_grid
from instance_rsr.configfile import dump_config, parse_config
from instance_rsr.degrade import degrade_image, random_config
from instance_rsr.diffusion import NoiseSchedule, sample_timesteps
from instance_rsr.exceptions import (
    CheckpointError,
    ConfigError,
    InstanceRSRError,
    NonFiniteLossError,
)
from instance_rsr.evalkit import psnr
from instance_rsr.losses import (
    LOG_COLUMNS,
    LossReport,
    LossWeights,
    assign_patches,
    sample_scale_targets,
    term_grad_norms,
    total_loss,
)
from instance_rsr.pipeline import SuperResolver
from instance_rsr.synthdata import (
    SceneSample,
    SceneSpec,
    encode_mask_rgb,
    generate_scene,
    mask_color_agreement,
)
from instance_rsr.teacher import ExternalTeacherFeatures, ProjectionHead, TeacherEncoder
from instance_rsr.utils import (
    StopWatch,
    derive_seed,
    format_duration,
    make_generator,
    tensor_checksum,
)

logger = logging.getLogger(__name__)

CASES = (0, 1, 2)
CASE_NAMES = {
    0: "default",
    1: "no representation learning",
    2: "no mask modeling",
}

CHECKPOINT_FORMAT = "1"
CHECKPOINT_NAME = "checkpoint.safetensors"
LOSS_LOG = "loss_log.csv"
EVAL_LOG = "eval_log.csv"
EVAL_COLUMNS = ("step", "psnr", "mask_agreement")

# Keys for derive_seed(config.seed, key, ...)
BACKBONE_KEY = 1
HEAD_KEY = 2
TEACHER_KEY = 3
TRAIN_RNG_KEY = 4
EVAL_RNG_KEY = 5
SPLIT_KEYS = {"train": (10, 11), "eval": (20, 21)}

Split = Literal["train", "eval"]


def check_case(case: int) -> int:
    if case not in CASES:
        raise ConfigError(f"invalid case {case}: expected one of 0, 1, 2")
    return case


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 8
    width: int = 256
    heads: int = 4
    tap_layer: int | None = None
    inject_layers: int | None = None
    mlp_ratio: int = 4
    head_activation: Literal["silu", "relu", "identity"] = "silu"


@dataclass(frozen=True)
class TrainConfig:
    case: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    schedule: Literal["linear", "cosine"] = "linear"
    T: int = 1000
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 500
    log_every: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    image_size: int = 64
    patch_size: int = 4
    num_instances: int = 4
    scale_1: int = 2
    scale_2: int = 2
    downsample_mode: Literal["area", "nearest"] = "area"
    teacher_dim: int = 64
    align_tokens: Literal["all", "instances"] = "all"
    eval_scenes: int = 8
    eval_steps: int = 10
    # directory of precomputed teacher features, replacing the built-in teacher
    teacher_features: str | None = None

    def __post_init__(self) -> None:
        check_case(self.case)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if min(self.eval_every, self.checkpoint_every, self.log_every) < 0:
            raise ConfigError("eval_every, checkpoint_every and log_every must be >= 0")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"Unknown schedule kind '{self.schedule}'")
        if self.align_tokens not in ("all", "instances"):
            raise ConfigError(f"Unknown align_tokens '{self.align_tokens}'")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.image_size % (self.total_scale * self.patch_size):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by "
                + f"s*s'*patch_size = {self.total_scale * self.patch_size}"
            )
    @property
    def effective_weights(self) -> LossWeights:
        # case 1 always trains without alignment
        if self.case == 1:
            return LossWeights.zero()
        return self.weights

    @property
    def with_mask(self) -> bool:
        return self.case != 2

    @property
    def total_scale(self) -> int:
        return self.scale_1 * self.scale_2

    @property
    def lr_size(self) -> int:
        return self.image_size // self.total_scale

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    def backbone_config(self) -> BackboneConfig:
        model = self.model
        return BackboneConfig.for_case(
            self.case,
            self.patch_size,
            self.grid,
            depth=model.depth,
            width=model.width,
            heads=model.heads,
            tap_layer=model.tap_layer,
            inject_layers=model.inject_layers,
            mlp_ratio=model.mlp_ratio,
            seed=derive_seed(self.seed, BACKBONE_KEY),
        )


class SceneDataset(Dataset):
    """
    Scene ``index`` of a split and its degraded LR observation, regenerated
    on demand from the config seed.
    """

    def __init__(
        self, config: TrainConfig, split: Split = "train", size: int | None = None
    ) -> None:
        self.config = config
        self.split = split
        self.size = size
        self.scene_key, self.degradation_key = SPLIT_KEYS[split]

    def __len__(self) -> int:
        if self.size is None:
            return self.config.steps * self.config.batch_size
        return self.size

    def scene(self, index: int) -> SceneSample:
        config = self.config
        return generate_scene(
            SceneSpec(
                width=config.image_size,
                height=config.image_size,
                num_instances=config.num_instances,
                seed=derive_seed(config.seed, self.scene_key, index),
                patch_size=config.patch_size,
            )
        )

    def __getitem__(self, index: int) -> dict[str, Any]:
        config = self.config
        scene = self.scene(index)
        degradation = random_config(
            derive_seed(config.seed, self.degradation_key, index),
            config.scale_1,
            config.scale_2,
            config.downsample_mode,
            image_size=config.image_size,
        )
        return {
            "name": scene.name,
            "index": index,
            "image": scene.image,
            "mask": scene.mask,
            "lr": degrade_image(scene.image, degradation),
        }


class StepBatchSampler(Sampler):
    def __init__(self, start_step: int, end_step: int, batch_size: int) -> None:
        self.start_step = start_step
        self.end_step = end_step
        self.batch_size = batch_size

    def __iter__(self) -> Iterator[list[int]]:
        size = self.batch_size
        for step in range(self.start_step, self.end_step):
            yield list(range(step * size, (step + 1) * size))

    def __len__(self) -> int:
        return max(0, self.end_step - self.start_step)


def make_loader(
    dataset: SceneDataset, start_step: int, end_step: int, num_workers: int = 0
) -> DataLoader:
    return DataLoader(
        dataset,
        batch_sampler=StepBatchSampler(
            start_step, end_step, dataset.config.batch_size
        ),
        num_workers=num_workers,
    )


@dataclass(frozen=True)
class EvalRecord:
    step: int
    psnr: float
    mask_agreement: float | None = None

    def as_row(self) -> dict[str, object]:
        return {
            "step": self.step,
            "psnr": repr(self.psnr),
            "mask_agreement": (
                "" if self.mask_agreement is None else repr(self.mask_agreement)
            ),
        }


class CsvLog:
    """
    Appends rows to a CSV file, writing the header only into a new file.
    """

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = path
        self.columns = list(columns)

    def write(self, row: dict[str, object]) -> None:
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=self.columns)
            if new:
                writer.writeheader()
            writer.writerow(row)


def read_csv_log(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    step: int
    backbone: dict[str, torch.Tensor]
    head: dict[str, torch.Tensor]
    optimizer: dict[str, Any]
    rng_state: torch.Tensor

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out.update({f"head.{k}": v for k, v in self.head.items()})
        for index, state in self.optimizer["state"].items():
            for key, value in state.items():
                out[f"optimizer.{index}.{key}"] = torch.as_tensor(value)
        out["rng.train"] = self.rng_state
        return {k: v.detach().cpu().contiguous() for k, v in out.items()}

    @property
    def checksum(self) -> str:
        return tensor_checksum(self.tensors())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tensors = self.tensors()
        metadata = {
            "format_version": CHECKPOINT_FORMAT,
            "config": dump_config(self.config),
            "step": str(self.step),
            "checksum": tensor_checksum(tensors),
            "optimizer": json.dumps(self.optimizer["param_groups"]),
        }
        partial = path.with_name(path.name + ".partial")
        save_file(tensors, str(partial), metadata=metadata)
        partial.replace(path)
        logger.debug("Saved checkpoint at step %d to %s", self.step, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"Checkpoint '{path}' does not exist")
        try:
            with safe_open(str(path), framework="pt") as handle:
                metadata = handle.metadata() or {}
                tensors = {key: handle.get_tensor(key) for key in handle.keys()}
        except Exception as exc:
            raise CheckpointError(f"Corrupt checkpoint manifest in '{path}': {exc}")

        if metadata.get("format_version") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"Unsupported checkpoint format {metadata.get('format_version')!r}"
            )
        if tensor_checksum(tensors) != metadata.get("checksum"):
            raise CheckpointError(f"Checksum mismatch in checkpoint '{path}'")
        try:
            config = parse_config(metadata["config"], TrainConfig, source=str(path))
            step = int(metadata["step"])
            param_groups = json.loads(metadata["optimizer"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"Invalid checkpoint metadata in '{path}': {exc}")

        backbone, head, state = {}, {}, {}
        rng_state = None
        for name, tensor in tensors.items():
            prefix, _, rest = name.partition(".")
            if prefix == "backbone":
                backbone[rest] = tensor
            elif prefix == "head":
                head[rest] = tensor
            elif prefix == "optimizer":
                index, _, key = rest.partition(".")
                state.setdefault(int(index), {})[key] = tensor
            elif name == "rng.train":
                rng_state = tensor
        if rng_state is None:
            raise CheckpointError(f"Checkpoint '{path}' has no RNG state")
        return cls(
            config=config,
            step=step,
            backbone=backbone,
            head=head,
            optimizer={"state": state, "param_groups": param_groups},
            rng_state=rng_state,
        )


def read_manifest(path: str | Path) -> dict[str, dict[str, Any]]:
    """
    Tensor names with dtype, shape and ``data_offsets`` (byte range within the
    data section), read straight from the container header.
    """
    with open(path, "rb") as handle:
        (length,) = struct.unpack("<Q", handle.read(8))
        header = json.loads(handle.read(length))
    header.pop("__metadata__", None)
    return header


def _detached(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def build_teacher(
    config: TrainConfig,
) -> TeacherEncoder | ExternalTeacherFeatures:
    if config.teacher_features:
        return ExternalTeacherFeatures(
            config.teacher_features,
            num_tokens=config.grid[0] * config.grid[1],
            dim=config.teacher_dim,
        )
    teacher = TeacherEncoder(
        patch_size=config.patch_size,
        dim=config.teacher_dim,
        seed=derive_seed(config.seed, TEACHER_KEY),
    )
    teacher.check_grid(config.backbone_config(), (config.image_size, config.image_size))
    return teacher


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[LossReport] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        out_dir: str | Path | None = None,
        checkpoint: Checkpoint | None = None,
    ) -> None:
        self.config = config
        self.out_dir = None if out_dir is None else Path(out_dir)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = conf.default_dtype()
        self.device = conf.default_device()
        self.num_workers = int(conf.get_setting("NUM_WORKERS"))

        self.codec = PatchCodec(config.patch_size)
        self.schedule = NoiseSchedule.build(config.schedule, config.T)
        self.backbone = Backbone(config.backbone_config()).to(self.device, self.dtype)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(config.seed, HEAD_KEY))
            self.head = ProjectionHead(
                config.model.width,
                config.teacher_dim,
                activation=config.model.head_activation,
            ).to(self.device, self.dtype)
        self.teacher = build_teacher(config)
        if isinstance(self.teacher, TeacherEncoder):
            self.teacher.to(self.device, self.dtype)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=config.lr)
        self.generator = make_generator(derive_seed(config.seed, TRAIN_RNG_KEY))
        self.dataset = SceneDataset(config, "train")
        self.step = 0
        if checkpoint is not None:
            self.restore(checkpoint)

    def parameters(self) -> list[torch.nn.Parameter]:
        return [*self.backbone.parameters(), *self.head.parameters()]

    def restore(self, checkpoint: Checkpoint) -> None:
        self.backbone.load_state_dict(checkpoint.backbone)
        self.head.load_state_dict(checkpoint.head)
        self.optimizer.load_state_dict(copy.deepcopy(checkpoint.optimizer))
        self.generator.set_state(checkpoint.rng_state.clone())
        self.step = checkpoint.step

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            step=self.step,
            backbone=_detached(self.backbone),
            head=_detached(self.head),
            optimizer=copy.deepcopy(self.optimizer.state_dict()),
            rng_state=self.generator.get_state(),
        )

    def resolver(self) -> SuperResolver:
        return SuperResolver(
            self.backbone, self.schedule, self.codec, with_mask=self.config.with_mask
        )

    def encode_batch(
        self, batch: dict[str, Any]
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        config = self.config
        image = batch["image"].to(self.device, self.dtype)
        mask = batch["mask"].to(self.device)
        z_0 = self.codec.encode(image)
        if config.with_mask:
            mask_rgb = encode_mask_rgb(batch["mask"]).to(self.device, self.dtype)
            z_0 = join(z_0, self.codec.encode(mask_rgb), config.patch_size).z
        lr = batch["lr"].to(self.device, self.dtype)
        cond = upsample_to_grid(self.codec.encode(lr), config.grid)
        return image, mask, z_0, cond

    def train_step(self, batch: dict[str, Any]) -> LossReport:
        config = self.config
        image, mask, z_0, cond = self.encode_batch(batch)
        batch_size = z_0.shape[0]

        # fixed draw order: timesteps, noise, scale targets
        t = sample_timesteps(batch_size, config.T, self.generator).to(self.device)
        eps = torch.randn(z_0.shape, generator=self.generator, dtype=self.dtype)
        eps = eps.to(self.device)
        targets = sample_scale_targets(
            assign_patches(mask.cpu(), config.patch_size), self.generator
        )
        targets = dataclasses.replace(
            targets,
            assignment=targets.assignment.to(self.device),
            targets=targets.targets.to(self.device),
        )

        z_t = self.schedule.forward_marginal(z_0, t, eps)
        output = self.backbone(z_t, t, cond)
        d = self.teacher.features(image, list(batch["name"]))
        terms = total_loss(
            eps,
            output.eps_hat,
            output.features,
            d,
            self.head,
            targets,
            config.effective_weights,
            config.align_tokens,
        )
        if not bool(torch.isfinite(terms.total)):
            self._abort(batch, t, eps, float(terms.total))

        grad_norms = {}
        if config.log_every and (self.step + 1) % config.log_every == 0:
            grad_norms = term_grad_norms(terms, self.parameters())
        self.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        self.optimizer.step()
        self.step += 1
        return terms.report(grad_norms)

    def _abort(
        self, batch: dict[str, Any], t: torch.Tensor, eps: torch.Tensor, value: float
    ) -> None:
        directory = self.out_dir or Path(tempfile.mkdtemp(prefix="instance_rsr_"))
        path = directory / f"nan_batch_step{self.step:06d}.safetensors"
        dump_path: str | None = str(path)
        try:
            save_file(
                {
                    "image": batch["image"].contiguous(),
                    "mask": batch["mask"].contiguous(),
                    "lr": batch["lr"].contiguous(),
                    "index": torch.as_tensor(batch["index"]),
                    "t": t.cpu(),
                    "eps": eps.cpu().contiguous(),
                },
                str(path),
            )
        except OSError:
            logger.exception("Could not write the diagnostic batch dump")
            dump_path = None
        raise NonFiniteLossError(
            f"Non-finite loss {value} at step {self.step}; batch dumped to {dump_path}",
            dump_path=dump_path,
        )

    def evaluate(self) -> EvalRecord:
        """
        Mean PSNR of DDIM super-resolution over the held-out scenes, plus the
        fraction of mask pixels that land on a valid code color.
        """
        config = self.config
        dataset = SceneDataset(config, "eval", size=config.eval_scenes)
        items = [dataset[index] for index in range(config.eval_scenes)]
        lr = torch.stack([item["lr"] for item in items])
        result = self.resolver().super_resolve(
            lr,
            steps=config.eval_steps,
            generator=make_generator(derive_seed(config.seed, EVAL_RNG_KEY)),
        )
        scores = [
            psnr(result.image[i].cpu(), item["image"]) for i, item in enumerate(items)
        ]
        agreement = None
        if result.mask_rgb is not None:
            agreement = mask_color_agreement(result.mask_rgb)
        return EvalRecord(
            step=self.step, psnr=sum(scores) / len(scores), mask_agreement=agreement
        )

    def run(self, steps: int | None = None) -> TrainResult:
        config = self.config
        end = config.steps if steps is None else steps
        if end < self.step:
            raise ConfigError(f"Cannot train to step {end}, already at {self.step}")

        loss_log = eval_log = None
        if self.out_dir is not None:
            loss_log = CsvLog(self.out_dir / LOSS_LOG, LOG_COLUMNS)
            eval_log = CsvLog(self.out_dir / EVAL_LOG, EVAL_COLUMNS)

        logger.info(
            "Training case %d (%s) from step %d to %d",
            config.case,
            CASE_NAMES[config.case],
            self.step,
            end,
        )
        result = TrainResult(checkpoint=self.checkpoint())
        started = time.monotonic()
        loader = make_loader(self.dataset, self.step, end, self.num_workers)
        with StopWatch() as watch:
            for batch in loader:
                report = self.train_step(batch)
                result.reports.append(report)
                if loss_log is not None:
                    loss_log.write(report.as_row(self.step))
                if config.log_every and self.step % config.log_every == 0:
                    logger.info(
                        "step %d/%d l_total=%.5f l_denoise=%.5f l_repa=%.5f "
                        + "l_is=%.5f (%s)",
                        self.step,
                        end,
                        report.l_total,
                        report.l_denoise,
                        report.l_repa,
                        report.l_is,
                        format_duration(int(time.monotonic() - started)),
                    )
                if config.eval_every and self.step % config.eval_every == 0:
                    record = self.evaluate()
                    result.evals.append(record)
                    if eval_log is not None:
                        eval_log.write(record.as_row())
                    logger.info("step %d eval PSNR %.3f dB", self.step, record.psnr)
                if (
                    config.checkpoint_every
                    and self.out_dir is not None
                    and self.step % config.checkpoint_every == 0
                ):
                    self.checkpoint().save(
                        self.out_dir / f"checkpoint_{self.step:06d}.safetensors"
                    )

        result.checkpoint = self.checkpoint()
        if self.out_dir is not None:
            result.checkpoint.save(self.out_dir / CHECKPOINT_NAME)
        logger.info(
            "Finished at step %d in %s",
            self.step,
            format_duration(int(watch.total_time)),
        )
        return result


def train(config: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    return Trainer(config, out_dir).run()


def check_resume_config(saved: TrainConfig, requested: TrainConfig) -> None:
    """
    A resumed run may change its length and cadence but nothing that alters
    the training trajectory.
    """
    cadence = ("steps", "eval_every", "checkpoint_every", "log_every")
    comparable = dataclasses.replace(
        requested, **{name: getattr(saved, name) for name in cadence}
    )
    if comparable != saved:
        differing = [
            f.name
            for f in dataclasses.fields(TrainConfig)
            if getattr(comparable, f.name) != getattr(saved, f.name)
        ]
        raise CheckpointError(
            "Checkpoint was trained with a different config: " + ", ".join(differing)
        )


def resume(
    path: str | Path,
    config: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    steps: int | None = None,
) -> TrainResult:
    checkpoint = Checkpoint.load(path)
    if config is None:
        config = checkpoint.config
    else:
        check_resume_config(checkpoint.config, config)
    return Trainer(config, out_dir, checkpoint=checkpoint).run(steps)


def load_trainer(path: str | Path) -> Trainer:
    checkpoint = Checkpoint.load(path)
    return Trainer(checkpoint.config, checkpoint=checkpoint)


def moving_average(values: Sequence[float], window: int = 10) -> list[float]:
    out = []
    total = 0.0
    for index, value in enumerate(values):
        total += value
        if index >= window:
            total -= values[index - window]
        out.append(total / min(index + 1, window))
    return out


def steps_to_threshold(evals: Sequence[EvalRecord], threshold: float) -> int | None:
    for record in evals:
        if record.psnr >= threshold:
            return record.step
    return None


@dataclass(frozen=True)
class AblationRow:
    case: int
    quality: float
    steps_to_threshold: int | None
    instance_awareness: float


def ablation_table(rows: Sequence[AblationRow]) -> list[dict[str, object]]:
    """
    Quality, efficiency and instance-awareness scores normalized to case 0.
    Efficiency is the inverse of steps-to-threshold; a run that never reached
    the threshold scores 0. Only the orderings between cases are meaningful.
    """
    by_case = {row.case: row for row in rows}
    if 0 not in by_case:
        raise ConfigError("An ablation table needs a case 0 row")
    base = by_case[0]
    if base.quality == 0 or base.instance_awareness == 0 or not base.steps_to_threshold:
        raise InstanceRSRError("Case 0 scores must be non-zero to normalize against")

    table = []
    for row in sorted(rows, key=lambda r: r.case):
        efficiency = 0.0
        if row.steps_to_threshold:
            efficiency = base.steps_to_threshold / row.steps_to_threshold
        table.append(
            {
                "case": row.case,
                "quality": row.quality / base.quality,
                "efficiency": efficiency,
                "instance_awareness": row.instance_awareness / base.instance_awareness,
            }
        )
    return table
