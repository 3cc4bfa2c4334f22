"""
Synthetic multi-instance scenes with exact instance masks.

Scenes are painted back to front (later shapes occlude earlier ones), so the
mask is a partition of the canvas: every pixel belongs to exactly one
instance or to the background (ID 0). Masks enter the visual codec through a
fixed RGB color code, see ``encode_mask_rgb``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cache
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from PIL import Image

from instance_rsr.exceptions import ConfigError, MaskCodeError, ShapeError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring")
TEXTURE_KINDS = ("flat", "gradient", "stripes", "checker")

MAX_INSTANCES = 16

# 16 levels per channel -> 4096 codes, IDs 0..4095
CODE_LEVELS = 16
MAX_MASK_ID = CODE_LEVELS**3 - 1
MIN_COLOR_SEPARATION = 1.0 / (CODE_LEVELS - 1)
BACKGROUND_COLOR = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    num_instances: int = 4
    shape_palette: tuple[str, ...] = SHAPE_KINDS
    texture_kinds: tuple[str, ...] = TEXTURE_KINDS
    seed: int = 0
    patch_size: int = 4

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError("Scene width and height must be positive")
        if not 1 <= self.num_instances <= MAX_INSTANCES:
            raise ConfigError(
                f"num_instances must be in [1, {MAX_INSTANCES}], "
                + f"got {self.num_instances}"
            )
        if not self.shape_palette or set(self.shape_palette) - set(SHAPE_KINDS):
            raise ConfigError(f"shape_palette must be a subset of {SHAPE_KINDS}")
        if not self.texture_kinds or set(self.texture_kinds) - set(TEXTURE_KINDS):
            raise ConfigError(f"texture_kinds must be a subset of {TEXTURE_KINDS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")

    def check_divisible(self) -> None:
        if self.width % self.patch_size or self.height % self.patch_size:
            raise ShapeError(
                f"Scene size {self.height}x{self.width} is not divisible by "
                + f"patch size {self.patch_size}"
            )


@dataclass(frozen=True)
class InstanceInfo:
    id: int
    category: str
    # (x0, y0, x1, y1), end-exclusive
    bbox: tuple[int, int, int, int]
    area: int

    def as_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category,
            "bbox": list(self.bbox),
            "area": self.area,
        }


@dataclass(frozen=True)
class SceneSample:
    name: str
    # H x W x 3, float64 in [0, 1]
    image: torch.Tensor
    # H x W, int64 instance IDs, 0 = background
    mask: torch.Tensor
    instances: tuple[InstanceInfo, ...] = field(default_factory=tuple)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def ids(self) -> list[int]:
        return [info.id for info in self.instances]

    def category_of(self, instance_id: int) -> str:
        if instance_id == 0:
            return "background"
        return self.instances[instance_id - 1].category


def generate_scene(spec: SceneSpec) -> SceneSample:
    spec.check_divisible()
    rng = np.random.default_rng(spec.seed)
    height, width = spec.height, spec.width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5

    image = _texture(rng, _choice(rng, spec.texture_kinds), yy, xx)
    ids = np.zeros((height, width), dtype=np.int64)
    kinds: list[str] = []

    for number in range(1, spec.num_instances + 1):
        kind = _choice(rng, spec.shape_palette)
        footprint = _footprint(rng, kind, yy, xx)
        texture = _texture(rng, _choice(rng, spec.texture_kinds), yy, xx)
        image[footprint] = texture[footprint]
        ids[footprint] = number
        kinds.append(kind)

    # Drop fully occluded shapes and re-compact IDs in drawing order
    present = np.unique(ids)
    present = present[present != 0]
    remap = np.zeros(spec.num_instances + 1, dtype=np.int64)
    remap[present] = np.arange(1, len(present) + 1)
    ids = remap[ids]
    if len(present) < spec.num_instances:
        logger.debug(
            "Scene seed=%d: %d of %d shapes fully occluded",
            spec.seed,
            spec.num_instances - len(present),
            spec.num_instances,
        )

    instances = []
    for new_id, old_id in enumerate(present, start=1):
        rows, cols = np.nonzero(ids == new_id)
        instances.append(
            InstanceInfo(
                id=new_id,
                category=kinds[old_id - 1],
                bbox=(
                    int(cols.min()),
                    int(rows.min()),
                    int(cols.max()) + 1,
                    int(rows.max()) + 1,
                ),
                area=int(len(rows)),
            )
        )

    return SceneSample(
        name=f"scene_{spec.seed}",
        image=torch.from_numpy(np.clip(image, 0.0, 1.0)),
        mask=torch.from_numpy(ids),
        instances=tuple(instances),
    )


def _choice(rng: np.random.Generator, options: tuple[str, ...]) -> str:
    return options[int(rng.integers(len(options)))]


def _footprint(
    rng: np.random.Generator, kind: str, yy: np.ndarray, xx: np.ndarray
) -> np.ndarray:
    height, width = yy.shape
    side = min(height, width)
    cy = rng.uniform(0.15, 0.85) * height
    cx = rng.uniform(0.15, 0.85) * width

    if kind == "disk":
        radius = rng.uniform(0.08, 0.25) * side
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    elif kind == "ring":
        outer = rng.uniform(0.12, 0.3) * side
        inner = outer * rng.uniform(0.4, 0.7)
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (dist2 <= outer**2) & (dist2 >= inner**2)
    elif kind == "rectangle":
        half_h = rng.uniform(0.08, 0.25) * height
        half_w = rng.uniform(0.08, 0.25) * width
        return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)
    elif kind == "triangle":
        spread = rng.uniform(0.15, 0.35) * side
        vertices = np.stack(
            [
                cx + rng.uniform(-spread, spread, 3),
                cy + rng.uniform(-spread, spread, 3),
            ],
            axis=1,
        )
        return _inside_triangle(vertices, yy, xx)
    else:  # pragma: no cover
        raise AssertionError(f"Unknown shape kind {kind}")


def _inside_triangle(
    vertices: np.ndarray, yy: np.ndarray, xx: np.ndarray
) -> np.ndarray:
    signs = []
    for i in range(3):
        (x0, y0), (x1, y1) = vertices[i], vertices[(i + 1) % 3]
        signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
    d0, d1, d2 = signs
    has_neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    has_pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(has_neg & has_pos)


def _texture(
    rng: np.random.Generator, kind: str, yy: np.ndarray, xx: np.ndarray
) -> np.ndarray:
    first = rng.uniform(0.05, 0.95, 3)
    second = rng.uniform(0.05, 0.95, 3)
    angle = rng.uniform(0.0, np.pi)
    along = xx * np.cos(angle) + yy * np.sin(angle)

    if kind == "flat":
        weight = np.zeros_like(yy)
    elif kind == "gradient":
        weight = (along - along.min()) / max(np.ptp(along), 1e-12)
    elif kind == "stripes":
        period = rng.uniform(4.0, 12.0)
        weight = (np.floor(along / (period / 2)) % 2).astype(np.float64)
    elif kind == "checker":
        cell = int(rng.integers(3, 9))
        weight = ((np.floor(yy / cell) + np.floor(xx / cell)) % 2).astype(np.float64)
    else:  # pragma: no cover
        raise AssertionError(f"Unknown texture kind {kind}")

    return first + (second - first) * weight[..., None]


@cache
def mask_color_table() -> np.ndarray:
    """
    The ID -> RGB code table, shape (4096, 3), values on a 16-level grid.

    ID 0 is black. Every further ID takes the grid color farthest from all
    colors already assigned, so scenes with few instances get widely
    separated colors. The table is deterministic.
    """
    levels = np.arange(CODE_LEVELS, dtype=np.float64) / (CODE_LEVELS - 1)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(
        -1, 3
    )
    order = [0]
    min_dist = np.sum((grid - grid[0]) ** 2, axis=1)
    for _ in range(1, len(grid)):
        index = int(np.argmax(min_dist))
        order.append(index)
        min_dist = np.minimum(min_dist, np.sum((grid - grid[index]) ** 2, axis=1))
    table = grid[order]
    table.setflags(write=False)
    return table


@cache
def _grid_index_to_id() -> np.ndarray:
    table = mask_color_table()
    levels = np.rint(table * (CODE_LEVELS - 1)).astype(np.int64)
    grid_index = (
        levels[:, 0] * CODE_LEVELS + levels[:, 1]
    ) * CODE_LEVELS + levels[:, 2]
    lookup = np.empty(len(table), dtype=np.int64)
    lookup[grid_index] = np.arange(len(table))
    lookup.setflags(write=False)
    return lookup


def encode_mask_rgb(mask: torch.Tensor) -> torch.Tensor:
    if mask.numel() and (int(mask.min()) < 0 or int(mask.max()) > MAX_MASK_ID):
        raise MaskCodeError(
            f"Mask IDs must be in [0, {MAX_MASK_ID}], got range "
            + f"[{int(mask.min())}, {int(mask.max())}]"
        )
    table = torch.from_numpy(mask_color_table())
    return table[mask.long().cpu()]


def decode_mask_rgb(rgb: torch.Tensor) -> torch.Tensor:
    """
    Inverse of ``encode_mask_rgb`` for exact code colors. Off-grid colors are
    rounded to the nearest grid level per channel.
    """
    levels = torch.round(rgb.detach().cpu().double() * (CODE_LEVELS - 1))
    levels = levels.clamp(0, CODE_LEVELS - 1).long()
    grid_index = (levels[..., 0] * CODE_LEVELS + levels[..., 1]) * CODE_LEVELS + levels[
        ..., 2
    ]
    return torch.from_numpy(_grid_index_to_id())[grid_index]


def _nearest_code(rgb: torch.Tensor, max_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    if not 0 <= max_id <= MAX_MASK_ID:
        raise MaskCodeError(f"max_id must be in [0, {MAX_MASK_ID}]")
    table = torch.from_numpy(mask_color_table()[: max_id + 1])
    flat = rgb.detach().cpu().double().reshape(-1, 3)
    distances = torch.cdist(flat, table)
    best, ids = distances.min(dim=1)
    shape = rgb.shape[:-1]
    return ids.reshape(shape), best.reshape(shape)


def snap_mask_rgb(rgb: torch.Tensor, max_id: int = MAX_INSTANCES) -> torch.Tensor:
    """
    Map continuous RGB mask output to instance IDs by nearest valid code color
    among IDs 0..max_id.
    """
    ids, _ = _nearest_code(rgb, max_id)
    return ids


def mask_color_agreement(
    rgb: torch.Tensor,
    max_id: int = MAX_INSTANCES,
    tolerance: float = MIN_COLOR_SEPARATION / 2,
) -> float:
    """
    Fraction of pixels lying within ``tolerance`` of a valid code color.
    """
    _, distances = _nearest_code(rgb, max_id)
    return float((distances <= tolerance).double().mean())


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    array = image.detach().cpu().double().clamp(0.0, 1.0).numpy()
    return np.rint(array * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(image_to_uint8(image)).save(path)


def load_png(path: str | Path) -> torch.Tensor:
    try:
        with Image.open(path) as handle:
            array = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        # UnidentifiedImageError is an OSError too
        raise ConfigError(f"Cannot read image '{path}': {exc}") from exc
    return torch.from_numpy(array)


def save_sample(sample: SceneSample, directory: str | Path) -> list[Path]:
    """
    Write ``{name}_img.png``, ``{name}_mask.png`` (RGB code) and a
    ``{name}.yaml`` metadata sidecar listing the instances.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{sample.name}_img.png"
    mask_path = directory / f"{sample.name}_mask.png"
    meta_path = directory / f"{sample.name}.yaml"

    save_png(sample.image, image_path)
    save_png(encode_mask_rgb(sample.mask), mask_path)
    meta = {
        "name": sample.name,
        "width": sample.width,
        "height": sample.height,
        "instances": [info.as_dict() for info in sample.instances],
    }
    meta_path.write_text(yaml.safe_dump(meta, sort_keys=False))
    return [image_path, mask_path, meta_path]


def load_sample(directory: str | Path, name: str) -> SceneSample:
    directory = Path(directory)
    meta_path = directory / f"{name}.yaml"
    try:
        meta = yaml.safe_load(meta_path.read_text())
        instances = tuple(
            InstanceInfo(
                id=int(item["id"]),
                category=str(item["category"]),
                bbox=tuple(int(v) for v in item["bbox"]),  # type: ignore [arg-type]
                area=int(item["area"]),
            )
            for item in meta["instances"]
        )
    except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"Cannot read scene metadata '{meta_path}': {exc}") from exc
    return SceneSample(
        name=name,
        image=load_png(directory / f"{name}_img.png"),
        mask=decode_mask_rgb(load_png(directory / f"{name}_mask.png")),
        instances=instances,
    )


def list_samples(directory: str | Path) -> list[str]:
    return sorted(path.stem for path in Path(directory).glob("*.yaml"))
