"""Frozen source models.

Provides the model zoo (a small CNN for the toy fixtures plus torchvision
ResNet-18/50 and VGG-13-BN wrappers), the :class:`FrozenModel` wrapper that
pins weights for the lifetime of a run, a weight digest used to verify that
nothing touched them, and the binary weight container with its manifest.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import nn
from torchvision import models as tv_models

from .constants import WEIGHTS_MAGIC
from .exceptions import ConfigurationError, CorruptCheckpoint, UnknownLayer, UnsupportedModel
from .logging_config import get_logger

if TYPE_CHECKING:
    from .config import ModelSpec

logger = get_logger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Model zoo
# ---------------------------------------------------------------------------

class ZooClassifier(nn.Module):
    """Classifier split into a feature extractor and a linear ``head``."""

    cam_layer: str = ""
    head: nn.Linear

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


class SmallCNN(ZooClassifier):
    """Two conv-BN-ReLU blocks with global pooling; any input side works."""

    cam_layer = "block2"

    def __init__(self, num_classes: int = 10, in_channels: int = 3, width: int = 32):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, padding=1, bias=False),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(2 * width, num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.block2(self.block1(x))), 1)


class ResNetClassifier(ZooClassifier):
    cam_layer = "backbone.layer4"

    def __init__(self, depth: int = 18, num_classes: int = 10):
        super().__init__()
        builders = {18: tv_models.resnet18, 50: tv_models.resnet50}
        if depth not in builders:
            raise UnsupportedModel(f"No ResNet of depth {depth} in the zoo")
        backbone = builders[depth](weights=None)
        in_features = backbone.fc.in_features
        backbone.fc = nn.Identity()
        self.backbone = backbone
        self.head = nn.Linear(in_features, num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


class VGGClassifier(ZooClassifier):
    cam_layer = "backbone.features"

    def __init__(self, num_classes: int = 10):
        super().__init__()
        backbone = tv_models.vgg13_bn(weights=None)
        layers = list(backbone.classifier.children())
        backbone.classifier = nn.Sequential(*layers[:-1])
        self.backbone = backbone
        self.head = nn.Linear(layers[-1].in_features, num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


ZOO: Dict[str, Callable[..., ZooClassifier]] = {
    "small_cnn": lambda num_classes, width=32: SmallCNN(num_classes, width=width),
    "resnet18": lambda num_classes, width=32: ResNetClassifier(18, num_classes),
    "resnet50": lambda num_classes, width=32: ResNetClassifier(50, num_classes),
    "vgg13": lambda num_classes, width=32: VGGClassifier(num_classes),
}


def build_model(arch: str, num_classes: int, width: int = 32) -> ZooClassifier:
    """Instantiate an untrained zoo model.

    Raises:
        UnsupportedModel: ``arch`` is not in the zoo
    """
    if arch not in ZOO:
        raise UnsupportedModel(f"Unknown architecture '{arch}', available: {sorted(ZOO)}")
    return ZOO[arch](num_classes, width=width)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Frozen wrapper
# ---------------------------------------------------------------------------

def weight_digest(module: nn.Module) -> str:
    """SHA-256 over every state-dict entry name, dtype, shape and bytes."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        array = tensor.detach().cpu().contiguous().numpy()
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("ascii"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


@dataclass
class FrozenModel:
    """A source model whose weights never change during a run.

    The wrapped module is switched to eval mode with gradients disabled, so
    batch-norm statistics and parameters stay put while gradients still flow
    through it to the inputs.
    """

    id: str
    module: nn.Module
    class_count: int = 0
    dataset: Optional[str] = None
    native_side: Optional[int] = None
    resize_to_native: bool = False
    mean: Tuple[float, ...] = (0.5, 0.5, 0.5)
    std: Tuple[float, ...] = (0.5, 0.5, 0.5)
    weight_digest: str = field(init=False)

    def __post_init__(self):
        self.module.eval()
        self.module.requires_grad_(False)
        if not self.class_count:
            head = getattr(self.module, "head", None)
            if not isinstance(head, nn.Linear):
                raise UnsupportedModel(f"Cannot infer class count of model '{self.id}'")
            self.class_count = head.out_features
        self.weight_digest = weight_digest(self.module)

    def _prepare(self, x: torch.Tensor) -> torch.Tensor:
        if self.resize_to_native and self.native_side and x.shape[-1] != self.native_side:
            return F.interpolate(x, size=(self.native_side, self.native_side), mode="bilinear", align_corners=False)
        return x

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(self._prepare(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        embed = getattr(self.module, "embed", None)
        if embed is None:
            raise UnsupportedModel(f"Model '{self.id}' exposes no feature embedding")
        return embed(self._prepare(x))

    def forward_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Penultimate features and logits from a single pass."""
        embed = getattr(self.module, "embed", None)
        head = getattr(self.module, "head", None)
        if embed is None or head is None:
            raise UnsupportedModel(f"Model '{self.id}' exposes no feature embedding")
        features = embed(self._prepare(x))
        return features, head(features)

    @property
    def feature_dim(self) -> int:
        head = getattr(self.module, "head", None)
        if isinstance(head, nn.Linear):
            return head.in_features
        side = self.native_side or 32
        with torch.no_grad():
            sample = torch.zeros(2, 3, side, side, device=self.device)
            return int(self.features(sample).shape[1])

    @property
    def device(self) -> torch.device:
        try:
            return next(self.module.parameters()).device
        except StopIteration:
            return torch.device("cpu")

    @property
    def bn_layers(self) -> List[nn.modules.batchnorm._BatchNorm]:
        return [m for m in self.module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    @property
    def bn_stats(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        return [(bn.running_mean.clone(), bn.running_var.clone()) for bn in self.bn_layers]

    def submodule(self, name: str) -> nn.Module:
        try:
            return self.module.get_submodule(name)
        except AttributeError as e:
            raise UnknownLayer(name) from e

    def current_digest(self) -> str:
        return weight_digest(self.module)

    def to(self, device: Union[str, torch.device]) -> "FrozenModel":
        self.module.to(device)
        return self

    def parameter_count(self) -> int:
        return count_parameters(self.module)


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------

def encode_weights(state: Dict[str, torch.Tensor]) -> bytes:
    """Magic, entry count, then per entry: name, shape and float32 LE values."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        array = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_weights(data: bytes, source: str = "<bytes>") -> Dict[str, torch.Tensor]:
    """Inverse of :func:`encode_weights`.

    Raises:
        CorruptCheckpoint: bad magic or truncated entries
    """
    if not data.startswith(WEIGHTS_MAGIC):
        raise CorruptCheckpoint(source, "bad weight container magic")
    pos = len(WEIGHTS_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state: Dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 4 * n > len(data):
                raise CorruptCheckpoint(source, f"entry '{name}' is truncated")
            array = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            state[name] = torch.from_numpy(array.astype(np.float32))
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(source, str(e)) from e
    if pos != len(data):
        raise CorruptCheckpoint(source, f"{len(data) - pos} trailing bytes")
    return state


def save_weights(module: nn.Module, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_weights(module.state_dict()))
    return path


def load_weights(module: nn.Module, path: PathLike) -> nn.Module:
    """Fill ``module`` from a weight container or a PyTorch ``.pt`` state dict.

    Raises:
        CorruptCheckpoint: file unreadable, malformed, or not matching the module
    """
    path = Path(path)
    try:
        if path.suffix == ".pt":
            state = torch.load(path, map_location="cpu", weights_only=True)
        else:
            state = decode_weights(path.read_bytes(), source=str(path))
    except OSError as e:
        raise CorruptCheckpoint(str(path), str(e)) from e

    reference = module.state_dict()
    converted = {}
    for name, tensor in state.items():
        if name in reference:
            tensor = tensor.to(reference[name].dtype)
        converted[name] = tensor
    try:
        module.load_state_dict(converted, strict=True)
    except RuntimeError as e:
        raise CorruptCheckpoint(str(path), f"weights do not fit the architecture: {e}") from e
    return module


def manifest_path(weights_path: PathLike) -> Path:
    weights_path = Path(weights_path)
    return weights_path.with_name(weights_path.name + ".manifest.yaml")


def write_manifest(weights_path: PathLike, model_id: str, arch: str, class_count: int,
                   dataset: str, digest: str, **extra) -> Path:
    """Write the identity record stored next to a weight file."""
    record = {
        "id": model_id,
        "arch": arch,
        "class_count": class_count,
        "dataset": dataset,
        "digest": digest,
        **extra,
    }
    path = manifest_path(weights_path)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=False)
    return path


def read_manifest(weights_path: PathLike) -> Optional[Dict]:
    path = manifest_path(weights_path)
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_frozen_model(
    spec: "ModelSpec",
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.5, 0.5, 0.5),
    native_side: Optional[int] = None,
    device: Union[str, torch.device] = "cpu",
) -> FrozenModel:
    """Build, load and freeze the model described by ``spec``.

    Raises:
        ConfigurationError: ``spec`` names no weight file or the file is missing
        CorruptCheckpoint: weights malformed or digest differs from the manifest
    """
    if not spec.weights:
        raise ConfigurationError(
            f"Model '{spec.id}' has no weights path",
            help_text="Set models' weights in the config, or run `kiop pretrain` for toy fixtures.",
        )
    if not Path(spec.weights).exists():
        raise ConfigurationError(
            f"Weights for model '{spec.id}' not found: {spec.weights}",
            help_text="Run `kiop pretrain --config <file>` to produce toy fixture weights.",
        )

    module = build_model(spec.arch, spec.class_count, width=spec.width)
    load_weights(module, spec.weights)
    frozen = FrozenModel(
        id=spec.id,
        module=module,
        class_count=spec.class_count,
        dataset=spec.dataset,
        native_side=spec.native_side or native_side,
        resize_to_native=spec.resize_to_native,
        mean=tuple(mean),
        std=tuple(std),
    ).to(device)

    manifest = read_manifest(spec.weights)
    if manifest and manifest.get("digest") and manifest["digest"] != frozen.weight_digest:
        raise CorruptCheckpoint(
            spec.weights,
            f"digest {frozen.weight_digest[:12]} does not match manifest {str(manifest['digest'])[:12]}",
        )
    logger.info(
        f"Loaded {spec.arch} '{spec.id}' ({frozen.parameter_count():,} params, "
        f"{frozen.class_count} classes, digest {frozen.weight_digest[:12]})"
    )
    return frozen
