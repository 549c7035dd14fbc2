"""Knowledge fusion: label mapping and prompted forward chains.

The core model A reads its own data through ring 1 of the prompt (SMA) and a
receiver model's data through the outer rings (SMB), whose logits are then
projected onto the receiver's classes by a fixed random label mapping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch

from .exceptions import FrozenViolation, MappingInfeasible, ShapeMismatch
from .logging_config import get_logger
from .models import FrozenModel
from .prompt import VisualPrompt, compose, fit_to_hole

logger = get_logger(__name__)


@dataclass(frozen=True)
class LabelMapping:
    """Injective map from ``k_tgt`` target classes to source logit indices."""

    indices: Tuple[int, ...]
    k_src: int
    seed: int = 0

    @property
    def k_tgt(self) -> int:
        return len(self.indices)

    def index_tensor(self, device: Optional[torch.device] = None) -> torch.Tensor:
        return torch.tensor(self.indices, dtype=torch.long, device=device)


def random_label_mapping(k_src: int, k_tgt: int, seed: int) -> LabelMapping:
    """Draw ``k_tgt`` distinct source classes without replacement.

    The result is a pure function of ``(k_src, k_tgt, seed)`` and stays fixed
    for the whole run.

    Raises:
        MappingInfeasible: ``k_tgt > k_src``
    """
    if k_tgt > k_src or k_tgt < 1:
        raise MappingInfeasible(k_src, k_tgt)
    generator = torch.Generator().manual_seed(int(seed))
    indices = torch.randperm(k_src, generator=generator)[:k_tgt]
    return LabelMapping(tuple(int(i) for i in indices), k_src, int(seed))


def apply_mapping(logits: torch.Tensor, mapping: LabelMapping) -> torch.Tensor:
    """``out[:, j] = logits[:, mapping.indices[j]]``."""
    if logits.dim() != 2 or logits.shape[1] != mapping.k_src:
        raise ShapeMismatch("mapped logits", ("B", mapping.k_src), tuple(logits.shape))
    return logits.index_select(1, mapping.index_tensor(logits.device))


def sma_forward(x: torch.Tensor, model_a: FrozenModel, prompt: VisualPrompt) -> torch.Tensor:
    """Core model on its own data: image plus ring 1 only."""
    return model_a(compose(x, prompt, 1))


def smb_forward(
    x: torch.Tensor,
    model_a: FrozenModel,
    prompt: VisualPrompt,
    mapping: LabelMapping,
    depth: int,
) -> torch.Tensor:
    """Core model on receiver data: image plus rings ``1..depth``, mapped to receiver classes."""
    return apply_mapping(model_a(compose(x, prompt, depth)), mapping)


class PromptedChain:
    """Callable ``x -> logits`` that routes raw batches through a prompted core model.

    Inputs of any resolution are resized into the image hole first, so banks
    synthesized at a receiver's native side feed straight in.
    """

    def __init__(
        self,
        model_a: FrozenModel,
        prompt: VisualPrompt,
        depth: int,
        mapping: Optional[LabelMapping] = None,
    ):
        self.model_a = model_a
        self.prompt = prompt
        self.depth = depth
        self.mapping = mapping

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        x = fit_to_hole(x, self.prompt.partition.hole_side)
        if self.mapping is None:
            if self.depth != 1:
                return self.model_a(compose(x, self.prompt, self.depth))
            return sma_forward(x, self.model_a, self.prompt)
        return smb_forward(x, self.model_a, self.prompt, self.mapping, self.depth)


def assert_frozen(model: FrozenModel) -> bool:
    """Verify a model's weights still match the digest taken when it was frozen.

    Raises:
        FrozenViolation: any parameter or buffer changed
    """
    actual = model.current_digest()
    if actual != model.weight_digest:
        logger.error(f"Frozen model '{model.id}' changed during the run")
        raise FrozenViolation(model.id, model.weight_digest, actual)
    return True


def assert_all_frozen(models: Sequence[FrozenModel]) -> bool:
    for model in models:
        assert_frozen(model)
    return True
