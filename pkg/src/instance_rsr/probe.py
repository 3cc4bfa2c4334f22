"""
Layer-wise analysis of backbone features: closed-form ridge linear probes on
patch categories, an instance discrimination score, Fisher ratios, and
feature export for external visualization.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from instance_rsr.backbone import Backbone
from instance_rsr.exceptions import ProbeError
from instance_rsr.losses import assign_patches
from instance_rsr.synthdata import SHAPE_KINDS
from instance_rsr.trainer import SceneDataset, Trainer
from instance_rsr.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

CATEGORIES = ("background", *SHAPE_KINDS)
PROBE_COLUMNS = (
    "layer",
    "accuracy",
    "id_accuracy",
    "fisher_ratio",
    "num_classes",
    "degenerate",
)
LABEL_COLUMNS = ("row", "image", "patch", "instance_id", "category")

PROBE_NOISE_KEY = 30


@dataclass(frozen=True)
class FeatureDump:
    # M x width, one row per patch of every image
    features: torch.Tensor
    # M category indices into CATEGORIES
    labels: torch.Tensor
    # M instance IDs within their image
    instances: torch.Tensor
    # M image indices
    images: torch.Tensor
    layer: int

    def __len__(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class ProbeResult:
    layer: int
    accuracy: float
    id_accuracy: float
    fisher_ratio: float
    num_classes: int
    degenerate: bool = False


@dataclass
class ProbeReport:
    results: list[ProbeResult]

    def best_layer(self) -> int:
        return max(self.results, key=lambda result: result.accuracy).layer

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=PROBE_COLUMNS)
            writer.writeheader()
            for result in self.results:
                writer.writerow(asdict(result))


@torch.no_grad()
def collect_features(
    trainer: Trainer,
    layer: int,
    num_scenes: int = 16,
    t: int | None = None,
    seed: int | None = None,
) -> FeatureDump:
    """
    Tap ``layer`` on held-out scenes noised to timestep ``t`` (a quarter of
    the schedule by default), labelling each patch with its majority
    instance and that instance's shape category.
    """
    config = trainer.config
    backbone: Backbone = trainer.backbone
    seed = config.seed if seed is None else seed
    t = max(1, trainer.schedule.T // 4) if t is None else t
    dataset = SceneDataset(config, "eval", size=num_scenes)
    generator = make_generator(derive_seed(seed, PROBE_NOISE_KEY))

    features, labels, instances, images = [], [], [], []
    for index in range(num_scenes):
        item = dataset[index]
        batch = {
            key: value[None] if isinstance(value, torch.Tensor) else [value]
            for key, value in item.items()
        }
        _, _, z_0, cond = trainer.encode_batch(batch)
        eps = torch.randn(z_0.shape, generator=generator, dtype=z_0.dtype)
        timesteps = torch.full((1,), t, dtype=torch.long, device=z_0.device)
        z_t = trainer.schedule.forward_marginal(z_0, timesteps, eps.to(z_0.device))
        tapped = backbone.tap(z_t, timesteps, cond, layer)

        scene = dataset.scene(index)
        owners = assign_patches(scene.mask, config.patch_size)
        features.append(tapped.f[0].double().cpu())
        instances.append(owners)
        labels.append(
            torch.tensor(
                [CATEGORIES.index(scene.category_of(int(i))) for i in owners]
            )
        )
        images.append(torch.full_like(owners, index))

    return FeatureDump(
        features=torch.cat(features),
        labels=torch.cat(labels),
        instances=torch.cat(instances),
        images=torch.cat(images),
        layer=layer,
    )


def _split_by_image(
    groups: torch.Tensor, test_fraction: float
) -> tuple[torch.Tensor, torch.Tensor]:
    unique = sorted(int(g) for g in groups.unique())
    test_count = max(1, math.ceil(len(unique) * test_fraction))
    if len(unique) < 2:
        raise ProbeError("A probe needs patches from at least two images")
    test_groups = torch.tensor(unique[-test_count:])
    test = torch.isin(groups, test_groups)
    return ~test, test


def ridge_fit(
    features: torch.Tensor, labels: torch.Tensor, num_classes: int, ridge: float
) -> torch.Tensor:
    """
    Closed-form ridge regression onto one-hot targets; returns a
    ``(width + 1) x classes`` weight matrix, the last row being the bias.
    """
    x = torch.cat([features, torch.ones(len(features), 1, dtype=features.dtype)], 1)
    y = F.one_hot(labels, num_classes).to(features.dtype)
    regularizer = ridge * torch.eye(x.shape[1], dtype=x.dtype)
    regularizer[-1, -1] = 0.0
    return torch.linalg.solve(x.T @ x + regularizer, x.T @ y)


def ridge_predict(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    x = torch.cat([features, torch.ones(len(features), 1, dtype=features.dtype)], 1)
    return (x @ weights).argmax(dim=1)


def linear_probe(
    features: torch.Tensor,
    labels: torch.Tensor,
    groups: torch.Tensor,
    test_fraction: float = 0.25,
    ridge: float = 1e-3,
    allow_degenerate: bool = False,
) -> tuple[float, bool]:
    """
    Held-out accuracy of a ridge classifier on frozen features, split by
    image so no image contributes to both sides. Returns ``(accuracy,
    degenerate)``.

    With a single class the probe is meaningless: that raises ``ProbeError``
    unless ``allow_degenerate``, in which case accuracy is 1.0 and the result
    is flagged degenerate.
    """
    labels = labels.long()
    num_classes = int(labels.unique().numel())
    if num_classes < 2:
        if not allow_degenerate:
            raise ProbeError(
                f"Linear probe needs at least 2 classes, got {num_classes}"
            )
        logger.warning("Linear probe on a single class is degenerate")
        return 1.0, True

    train, test = _split_by_image(groups, test_fraction)
    x = features.double()
    mean = x[train].mean(dim=0)
    std = x[train].std(dim=0).clamp_min(1e-8)
    x = (x - mean) / std
    weights = ridge_fit(x[train], labels[train], int(labels.max()) + 1, ridge)
    predicted = ridge_predict(x[test], weights)
    return float((predicted == labels[test]).double().mean()), False


def instance_discrimination(
    features: torch.Tensor, instances: torch.Tensor, groups: torch.Tensor
) -> float:
    """
    Within each image, the fraction of patches whose nearest instance
    centroid (cosine) is their own instance. Images with a single instance
    are skipped; returns 0.0 when none qualify.
    """
    correct = total = 0
    for group in groups.unique():
        selected = groups == group
        f = F.normalize(features[selected].double(), dim=1)
        ids = instances[selected]
        present = ids.unique()
        if len(present) < 2:
            continue
        centroids = torch.stack([f[ids == i].mean(0) for i in present])
        centroids = F.normalize(centroids, dim=1)
        nearest = present[(f @ centroids.T).argmax(dim=1)]
        correct += int((nearest == ids).sum())
        total += len(ids)
    return correct / total if total else 0.0


def fisher_ratio(features: torch.Tensor, labels: torch.Tensor) -> float:
    """
    trace(between-class scatter) / trace(within-class scatter).
    """
    x = features.double()
    overall = x.mean(dim=0)
    between = within = 0.0
    for label in labels.unique():
        members = x[labels == label]
        centroid = members.mean(dim=0)
        between += len(members) * float((centroid - overall).pow(2).sum())
        within += float((members - centroid).pow(2).sum())
    if within == 0:
        return math.inf
    return between / within


def probe_layer(
    trainer: Trainer,
    layer: int,
    num_scenes: int = 16,
    allow_degenerate: bool = False,
) -> ProbeResult:
    dump = collect_features(trainer, layer, num_scenes)
    accuracy, degenerate = linear_probe(
        dump.features, dump.labels, dump.images, allow_degenerate=allow_degenerate
    )
    return ProbeResult(
        layer=layer,
        accuracy=accuracy,
        id_accuracy=instance_discrimination(dump.features, dump.instances, dump.images),
        fisher_ratio=fisher_ratio(dump.features, dump.labels),
        num_classes=int(dump.labels.unique().numel()),
        degenerate=degenerate,
    )


def parse_layers(value: str, depth: int) -> list[int]:
    """
    ``all`` or a comma-separated list of 1-based layer indices.
    """
    if value == "all":
        return list(range(1, depth + 1))
    try:
        layers = sorted({int(part) for part in value.split(",") if part.strip()})
    except ValueError:
        raise ProbeError(f"Invalid layer list '{value}'")
    if not layers or layers[0] < 1 or layers[-1] > depth:
        raise ProbeError(f"Layers must be in [1, {depth}], got '{value}'")
    return layers


def probe_layers(
    trainer: Trainer,
    layers: Sequence[int],
    num_scenes: int = 16,
    allow_degenerate: bool = False,
) -> ProbeReport:
    results = []
    for layer in layers:
        result = probe_layer(trainer, layer, num_scenes, allow_degenerate)
        logger.info(
            "layer %d: probe accuracy %.3f, id accuracy %.3f, fisher %.3f",
            layer,
            result.accuracy,
            result.id_accuracy,
            result.fisher_ratio,
        )
        results.append(result)
    return ProbeReport(results)


def export_features(
    trainer: Trainer, layer: int, out: str | Path, num_scenes: int = 16
) -> tuple[Path, Path]:
    """
    Write the tapped features and labels to ``out`` (safetensors) and the
    per-row labels to the sibling ``.csv`` file.
    """
    dump = collect_features(trainer, layer, num_scenes)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_file(
        {
            "features": dump.features.contiguous(),
            "labels": dump.labels,
            "instances": dump.instances,
            "images": dump.images,
        },
        str(out),
        metadata={"layer": str(layer)},
    )
    csv_path = out.with_suffix(".csv")
    patches_per_image = trainer.config.grid[0] * trainer.config.grid[1]
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LABEL_COLUMNS)
        for row in range(len(dump)):
            writer.writerow(
                [
                    row,
                    int(dump.images[row]),
                    row % patches_per_image,
                    int(dump.instances[row]),
                    CATEGORIES[int(dump.labels[row])],
                ]
            )
    return out, csv_path


def load_features(path: str | Path) -> FeatureDump:
    with safe_open(str(path), framework="pt") as handle:
        metadata = handle.metadata() or {}
        tensors = {key: handle.get_tensor(key) for key in handle.keys()}
    return FeatureDump(
        features=tensors["features"],
        labels=tensors["labels"],
        instances=tensors["instances"],
        images=tensors["images"],
        layer=int(metadata.get("layer", 0)),
    )
