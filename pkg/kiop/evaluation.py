"""Accuracy, Grad-CAM saliency and resource accounting."""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn
from torch.utils.data import TensorDataset

from .exceptions import EmptyDataset, UnknownLayer
from .fusion import LabelMapping, PromptedChain, apply_mapping
from .logging_config import get_logger
from .losses import eval_mode
from .models import FrozenModel, count_parameters
from .prompt import VisualPrompt, compose, fit_to_hole, header_size, param_count

logger = get_logger(__name__)

Split = Union[TensorDataset, Tuple[torch.Tensor, torch.Tensor]]
LogitsFn = Callable[[torch.Tensor], torch.Tensor]


def _split_tensors(split: Split) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(split, TensorDataset):
        return split.tensors[0], split.tensors[1]
    return split


def _chain_device(chain) -> Optional[torch.device]:
    if isinstance(chain, FrozenModel):
        return chain.device
    if isinstance(chain, PromptedChain):
        return chain.model_a.device
    if isinstance(chain, nn.Module):
        try:
            return next(chain.parameters()).device
        except StopIteration:
            return None
    return None


def accuracy(chain: LogitsFn, split: Split, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``chain`` on a labeled split.

    Raises:
        EmptyDataset: the split holds no samples
    """
    images, labels = _split_tensors(split)
    if images.shape[0] == 0:
        raise EmptyDataset("Cannot evaluate accuracy on an empty split")
    device = _chain_device(chain)
    mode = eval_mode(chain) if isinstance(chain, nn.Module) else nullcontext()
    correct = 0
    with mode, torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            if device is not None:
                batch = batch.to(device)
            predicted = chain(batch).argmax(dim=1).cpu()
            correct += int((predicted == labels[start:start + batch_size].cpu()).sum())
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

@dataclass
class GradCamResult:
    heatmaps: torch.Tensor
    composites: torch.Tensor
    class_indices: torch.Tensor


def default_cam_layer(module: nn.Module) -> str:
    """The model's declared Grad-CAM layer, else its last convolution."""
    declared = getattr(module, "cam_layer", "")
    if declared:
        return declared
    last = ""
    for name, child in module.named_modules():
        if isinstance(child, nn.Conv2d):
            last = name
    if not last:
        raise UnknownLayer("<no convolution found>")
    return last


def gradcam(
    x: torch.Tensor,
    model_a: FrozenModel,
    prompt: VisualPrompt,
    depth: int,
    target_layer: Optional[str] = None,
    mapping: Optional[LabelMapping] = None,
    class_index: Optional[torch.Tensor] = None,
) -> GradCamResult:
    """Grad-CAM of the prompted core model on composite inputs.

    Heatmaps are upsampled to the composite side and min-max normalized per
    sample; a heatmap with no spread is all zeros.

    Raises:
        UnknownLayer: ``target_layer`` does not exist in the model
    """
    layer_name = target_layer or default_cam_layer(model_a.module)
    layer = model_a.submodule(layer_name)

    captured: Dict[str, torch.Tensor] = {}

    def keep_gradient(grad: torch.Tensor) -> None:
        captured["gradients"] = grad

    def forward_hook(_module, _inputs, output):
        captured["activations"] = output
        output.register_hook(keep_gradient)

    x = fit_to_hole(x.to(model_a.device), prompt.partition.hole_side)
    with torch.no_grad():
        composite = compose(x, prompt, depth)
    composite = composite.detach().requires_grad_(True)

    handle = layer.register_forward_hook(forward_hook)
    try:
        logits = model_a(composite)
        if mapping is not None:
            logits = apply_mapping(logits, mapping)
        if class_index is None:
            class_index = logits.argmax(dim=1)
        class_index = class_index.to(logits.device)
        score = logits.gather(1, class_index.view(-1, 1)).sum()
        score.backward()
    finally:
        handle.remove()

    activations = captured["activations"].detach()
    gradients = captured["gradients"].detach()
    weights = gradients.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activations).sum(dim=1, keepdim=True))
    side = composite.shape[-1]
    cam = F.interpolate(cam, size=(side, side), mode="bilinear", align_corners=False).squeeze(1)

    flat = cam.view(cam.shape[0], -1)
    low = flat.min(dim=1, keepdim=True).values
    spread = flat.max(dim=1, keepdim=True).values - low
    normalized = torch.where(spread > 1e-12, (flat - low) / spread.clamp_min(1e-12), torch.zeros_like(flat))
    return GradCamResult(
        heatmaps=normalized.view_as(cam).cpu(),
        composites=composite.detach().cpu(),
        class_indices=class_index.detach().cpu(),
    )


def to_display(images: torch.Tensor, mean: Sequence[float], std: Sequence[float], clamp: bool = True) -> np.ndarray:
    """Denormalize ``[B, C, H, W]`` images to uint8 ``[B, H, W, C]``.

    Prompt pixels are unconstrained, so values outside ``[0, 1]`` are clamped
    when ``clamp`` is set and min-max rescaled otherwise.
    """
    mean_t = torch.tensor(list(mean), dtype=images.dtype).view(1, -1, 1, 1)
    std_t = torch.tensor(list(std), dtype=images.dtype).view(1, -1, 1, 1)
    pixels = images * std_t + mean_t
    if clamp:
        pixels = pixels.clamp(0.0, 1.0)
    else:
        low = pixels.amin(dim=(1, 2, 3), keepdim=True)
        high = pixels.amax(dim=(1, 2, 3), keepdim=True)
        pixels = (pixels - low) / (high - low).clamp_min(1e-12)
    return (pixels.permute(0, 2, 3, 1).numpy() * 255).round().astype(np.uint8)


def save_gradcam(
    result: GradCamResult,
    out_dir: Union[str, Path],
    mean: Sequence[float],
    std: Sequence[float],
    clamp: bool = True,
    prefix: str = "sample",
) -> List[Path]:
    """Write each heatmap as 8-bit grayscale PNG next to its composite."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    composites = to_display(result.composites, mean, std, clamp)
    for i, heatmap in enumerate(result.heatmaps):
        heat_path = out / f"{prefix}_{i:03d}_heatmap.png"
        comp_path = out / f"{prefix}_{i:03d}_composite.png"
        Image.fromarray((heatmap.numpy() * 255).round().astype(np.uint8)).save(heat_path)
        Image.fromarray(composites[i]).save(comp_path)
        written.extend([heat_path, comp_path])
    logger.info(f"Wrote {len(result.heatmaps)} Grad-CAM heatmaps to {out}")
    return written


# ---------------------------------------------------------------------------
# Resource accounting
# ---------------------------------------------------------------------------

@dataclass
class ResourceReport:
    """Trainable-parameter and storage footprint of a prompt against its models."""

    trainable_params: int
    prompt_bytes: int
    model_params: Dict[str, int] = field(default_factory=dict)
    model_bytes: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def format_summary(self) -> str:
        """Format like ``Prompt: 46,080 params (184,345 bytes) | resnet18: 11,181,642 params (44,726,568 bytes)``."""
        parts = [f"Prompt: {self.trainable_params:,} params ({self.prompt_bytes:,} bytes)"]
        for name, count in self.model_params.items():
            parts.append(f"{name}: {count:,} params ({self.model_bytes[name]:,} bytes)")
        return " | ".join(parts)


def resource_report(prompt: VisualPrompt, models: Mapping[str, Union[FrozenModel, nn.Module]]) -> ResourceReport:
    trainable = param_count(prompt)
    report = ResourceReport(trainable_params=trainable, prompt_bytes=trainable * 4 + header_size(prompt.partition))
    for name, model in models.items():
        module = model.module if isinstance(model, FrozenModel) else model
        report.model_params[name] = count_parameters(module)
        report.model_bytes[name] = sum(p.numel() * p.element_size() for p in module.parameters())
    return report


# ---------------------------------------------------------------------------
# Evaluation table
# ---------------------------------------------------------------------------

def evaluate_prompt(context, prompt: VisualPrompt, batch_size: Optional[int] = None) -> pd.DataFrame:
    """Acc.A through ring 1, raw core accuracy and Acc.B for every receiver chain.

    Args:
        context: :class:`~kiop.experiment.ExperimentContext` of the run
        prompt: Trained prompt
        batch_size: Evaluation batch size (config value when None)

    Returns:
        One-row DataFrame
    """
    cfg = context.config
    batch_size = batch_size or cfg.evaluation.batch_size
    prompt = prompt.to(context.device)
    core_test = context.core_dataset().test

    row = {
        "regime": cfg.regime,
        "partition": "-".join(str(s) for s in prompt.partition.sides),
        "trainable_params": param_count(prompt),
        "acc_A": accuracy(PromptedChain(context.core, prompt, 1), core_test, batch_size),
        "acc_A_raw": accuracy(context.core, core_test, batch_size),
    }
    single = len(context.receivers) == 1
    for i, (receiver, mapping, depth) in enumerate(zip(context.receivers, context.mappings, context.depths)):
        key = "acc_B" if single else f"acc_B{i + 1}"
        chain = PromptedChain(context.core, prompt, depth, mapping)
        row[key] = accuracy(chain, context.receiver_dataset(i).test, batch_size)
        row[f"{key}_teacher"] = accuracy(receiver, context.receiver_dataset(i).test, batch_size)
    logger.info("Evaluation: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("acc")))
    return pd.DataFrame([row])
