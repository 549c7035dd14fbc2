"""Dataset ingestion.

Readers for IDX image/label pairs, CIFAR-style binary batches, class-subfolder
image trees and a procedural toy generator. Every dataset leaves ingestion as
normalized 3-channel float tensors sized to the prompt's image hole; the
normalization constants come from the dataset's manifest under
``configs/datasets``.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from torch.utils.data import TensorDataset
from torchvision.datasets import ImageFolder
from torchvision.transforms.functional import pil_to_tensor

from .exceptions import ConfigurationError, IngestError
from .logging_config import get_logger
from .resources import resource_path

if TYPE_CHECKING:
    from .config import DatasetSpec

logger = get_logger(__name__)


class DatasetManifest(BaseModel):
    """Per-dataset constants the frozen models were trained under."""

    model_config = ConfigDict(extra="forbid")

    name: str
    layout: str
    class_count: int = Field(ge=1)
    native_side: int = Field(ge=1)
    grayscale: bool = False
    mean: List[float]
    std: List[float]
    label_bytes: int = Field(default=1, ge=1, le=2)
    label_index: int = Field(default=0, ge=0)
    train_files: List[str] = Field(default_factory=list)
    test_files: List[str] = Field(default_factory=list)

    def channel_stats(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        """Mean and std replicated to three channels."""
        mean = self.mean * 3 if len(self.mean) == 1 else self.mean
        std = self.std * 3 if len(self.std) == 1 else self.std
        return tuple(mean), tuple(std)


def load_manifest(name_or_path: str) -> DatasetManifest:
    """Load a manifest by name (``configs/datasets/<name>.yaml``) or path.

    Raises:
        ConfigurationError: manifest missing or invalid
    """
    path = Path(name_or_path)
    if not path.suffix:
        path = resource_path("configs", "datasets", f"{name_or_path}.yaml")
    if not path.exists():
        raise ConfigurationError(f"Dataset manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return DatasetManifest.model_validate(yaml.safe_load(f) or {})
    except (yaml.YAMLError, ValidationError) as e:
        raise ConfigurationError(f"Invalid dataset manifest {path}: {e}") from e


@dataclass
class DatasetHandle:
    """Ingested dataset ready for evaluation or real-data training."""

    name: str
    train: TensorDataset
    test: TensorDataset
    native_side: int
    class_count: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @property
    def train_size(self) -> int:
        return len(self.train)

    @property
    def test_size(self) -> int:
        return len(self.test)


# ---------------------------------------------------------------------------
# Raw readers (uint8 arrays, N x H x W or N x H x W x C)
# ---------------------------------------------------------------------------

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _find(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise IngestError(str(root), "idx", f"missing {stem}[.gz]")


def read_idx(path: Path) -> np.ndarray:
    """Parse one IDX file (big-endian header, unsigned-byte payload)."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IngestError(str(path), "idx", "bad magic")
    if data[2] != 0x08:
        raise IngestError(str(path), "idx", f"unsupported element type 0x{data[2]:02x}")
    ndim = data[3]
    dims = np.frombuffer(data, dtype=">i4", count=ndim, offset=4).astype(np.int64)
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(data) - offset != expected:
        raise IngestError(str(path), "idx", f"payload has {len(data) - offset} bytes, header says {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(tuple(dims))


def read_idx_split(root: Path, prefix: str) -> Tuple[np.ndarray, np.ndarray]:
    images = read_idx(_find(root, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(root, f"{prefix}-labels-idx1-ubyte"))
    if images.shape[0] != labels.shape[0]:
        raise IngestError(str(root), "idx", f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def read_cifar_batches(root: Path, files: List[str], label_bytes: int, label_index: int,
                       side: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenate CIFAR binary batches (label byte(s) then CHW pixels per record)."""
    record = label_bytes + 3 * side * side
    images, labels = [], []
    for name in files:
        path = root / name
        if not path.exists():
            raise IngestError(str(root), "cifar", f"missing {name}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % record:
            raise IngestError(str(path), "cifar", f"size {raw.size} is not a multiple of {record}")
        rows = raw.reshape(-1, record)
        labels.append(rows[:, label_index].astype(np.int64))
        images.append(rows[:, label_bytes:].reshape(-1, 3, side, side).transpose(0, 2, 3, 1))
    return np.concatenate(images), np.concatenate(labels)


def read_image_folder(root: Path, side: int) -> Tuple[np.ndarray, np.ndarray]:
    """Images under ``root/<class>/*`` resized to ``side``, classes in sorted order."""
    try:
        folder = ImageFolder(str(root))
    except (FileNotFoundError, RuntimeError) as e:
        raise IngestError(str(root), "folder", str(e)) from e
    images = np.empty((len(folder), side, side, 3), dtype=np.uint8)
    labels = np.empty(len(folder), dtype=np.int64)
    for i, (path, label) in enumerate(folder.samples):
        image = folder.loader(path).convert("RGB").resize((side, side))
        images[i] = pil_to_tensor(image).permute(1, 2, 0).numpy()
        labels[i] = label
    return images, labels


# ---------------------------------------------------------------------------
# Procedural toy datasets
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h: float, s: float, v: float) -> Tuple[float, float, float]:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _toy_colour_blobs(labels: torch.Tensor, side: int, g: torch.Generator) -> torch.Tensor:
    """Variant 0: a soft blob whose hue identifies the class, on a grey field."""
    n = labels.shape[0]
    palette = torch.tensor([_hsv_to_rgb(k / 10.0, 0.85, 0.95) for k in range(10)])
    ys, xs = torch.meshgrid(torch.arange(side, dtype=torch.float32), torch.arange(side, dtype=torch.float32), indexing="ij")
    centre = side * (0.3 + 0.4 * torch.rand(n, 2, generator=g))
    radius = side * (0.18 + 0.15 * torch.rand(n, generator=g))
    dist = (ys[None] - centre[:, 0, None, None]) ** 2 + (xs[None] - centre[:, 1, None, None]) ** 2
    blob = torch.exp(-dist / (2 * radius[:, None, None] ** 2))
    colour = palette[labels % 10] * (0.8 + 0.4 * torch.rand(n, 1, generator=g))
    background = 0.5
    return background + blob[:, None] * (colour[:, :, None, None] - background)


def _toy_gratings(labels: torch.Tensor, side: int, g: torch.Generator) -> torch.Tensor:
    """Variant 1: sinusoidal grating; orientation and period identify the class."""
    n = labels.shape[0]
    angle = (labels % 5).float() * (math.pi / 5) + 0.05 * torch.randn(n, generator=g)
    period = torch.where(labels < 5, torch.tensor(4.0), torch.tensor(8.0))
    phase = 2 * math.pi * torch.rand(n, generator=g)
    ys, xs = torch.meshgrid(torch.arange(side, dtype=torch.float32), torch.arange(side, dtype=torch.float32), indexing="ij")
    coord = xs[None] * torch.cos(angle)[:, None, None] + ys[None] * torch.sin(angle)[:, None, None]
    wave = 0.5 + 0.4 * torch.sin(2 * math.pi * coord / period[:, None, None] + phase[:, None, None])
    return wave[:, None].repeat(1, 3, 1, 1)


def _toy_checkers(labels: torch.Tensor, side: int, g: torch.Generator) -> torch.Tensor:
    """Variant 2: checkerboard; cell size and tint identify the class."""
    n = labels.shape[0]
    cell = (labels % 5 + 2).float()
    shift = torch.randint(0, 8, (n, 2), generator=g).float()
    ys, xs = torch.meshgrid(torch.arange(side, dtype=torch.float32), torch.arange(side, dtype=torch.float32), indexing="ij")
    row = torch.floor((ys[None] + shift[:, 0, None, None]) / cell[:, None, None])
    col = torch.floor((xs[None] + shift[:, 1, None, None]) / cell[:, None, None])
    board = torch.remainder(row + col, 2)
    warm = torch.tensor([0.9, 0.5, 0.2])
    cool = torch.tensor([0.2, 0.5, 0.9])
    tint = torch.where((labels < 5)[:, None], warm, cool)
    return 0.15 + board[:, None] * (tint[:, :, None, None] - 0.15)


TOY_VARIANTS: Dict[int, Callable[[torch.Tensor, int, torch.Generator], torch.Tensor]] = {
    0: _toy_colour_blobs,
    1: _toy_gratings,
    2: _toy_checkers,
}


def make_toy_split(variant: int, seed: int, size: int, side: int = 32,
                   noise: float = 0.08) -> Tuple[torch.Tensor, torch.Tensor]:
    """Balanced 10-class toy split with pixels in ``[0, 1]``; a pure function of its arguments."""
    g = torch.Generator().manual_seed(int(seed) * 7919 + int(variant))
    labels = torch.arange(size) % 10
    labels = labels[torch.randperm(size, generator=g)]
    images = TOY_VARIANTS[variant](labels, side, g)
    images = images + noise * torch.randn(images.shape, generator=g)
    return images.clamp(0.0, 1.0), labels.long()


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def to_model_input(images: np.ndarray | torch.Tensor, hole_side: int,
                   mean: Tuple[float, ...], std: Tuple[float, ...]) -> torch.Tensor:
    """uint8 (or ``[0, 1]`` float) images to normalized 3-channel tensors at ``hole_side``."""
    if isinstance(images, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(images)).float() / 255.0
        if x.dim() == 3:
            x = x.unsqueeze(1)
        else:
            x = x.permute(0, 3, 1, 2)
    else:
        x = images.float()
    if x.shape[1] == 1:
        x = x.repeat(1, 3, 1, 1)
    if x.shape[-1] != hole_side or x.shape[-2] != hole_side:
        x = F.interpolate(x, size=(hole_side, hole_side), mode="bilinear", align_corners=False)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - mean_t) / std_t


def _limit(images, labels, limit: Optional[int]):
    if limit is None:
        return images, labels
    return images[:limit], labels[:limit]


def ingest_dataset(dataset_id: str, spec: "DatasetSpec", hole_side: int) -> DatasetHandle:
    """Read a dataset into normalized train/test tensors.

    Args:
        dataset_id: Key of the dataset in the experiment config
        spec: Layout, location and manifest of the dataset
        hole_side: Side of the prompt's image hole

    Returns:
        DatasetHandle with both splits

    Raises:
        IngestError: files missing, unreadable, or in an unknown layout
    """
    manifest = load_manifest(spec.manifest or dataset_id)
    mean, std = manifest.channel_stats()

    if spec.layout == "toy":
        train_x, train_y = make_toy_split(spec.variant, spec.seed, spec.train_size, manifest.native_side)
        test_x, test_y = make_toy_split(spec.variant, spec.seed + 1, spec.test_size, manifest.native_side)
    else:
        if not spec.path:
            raise IngestError("<unset>", spec.layout, "dataset path is required")
        root = Path(spec.path)
        if not root.exists():
            raise IngestError(str(root), spec.layout, "path does not exist")
        if spec.layout == "idx":
            train_x, train_y = read_idx_split(root, "train")
            test_x, test_y = read_idx_split(root, "t10k")
        elif spec.layout == "cifar":
            train_x, train_y = read_cifar_batches(root, manifest.train_files, manifest.label_bytes, manifest.label_index)
            test_x, test_y = read_cifar_batches(root, manifest.test_files, manifest.label_bytes, manifest.label_index)
        elif spec.layout == "folder":
            train_x, train_y = read_image_folder(root / "train", manifest.native_side)
            test_x, test_y = read_image_folder(root / "test", manifest.native_side)
        else:
            raise IngestError(str(root), spec.layout, "unknown layout")
        train_y = torch.from_numpy(np.asarray(train_y, dtype=np.int64))
        test_y = torch.from_numpy(np.asarray(test_y, dtype=np.int64))

    train_x, train_y = _limit(train_x, train_y, spec.train_limit)
    handle = DatasetHandle(
        name=dataset_id,
        train=TensorDataset(to_model_input(train_x, hole_side, mean, std), train_y),
        test=TensorDataset(to_model_input(test_x, hole_side, mean, std), test_y),
        native_side=manifest.native_side,
        class_count=manifest.class_count,
        mean=mean,
        std=std,
    )
    logger.info(
        f"Ingested '{dataset_id}' ({spec.layout}): {handle.train_size:,} train / "
        f"{handle.test_size:,} test, {handle.class_count} classes, native side {handle.native_side}"
    )
    return handle
