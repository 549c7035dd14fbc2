"""Loss functions for synthesis and storing."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import TYPE_CHECKING, Callable, Dict, Iterator, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import DegenerateContrast, InvalidLabel, ShapeMismatch, UnsupportedModel
from .models import FrozenModel

if TYPE_CHECKING:
    from .config import SynthesisConfig

Teacher = Union[FrozenModel, nn.Module]
LogitsFn = Callable[[torch.Tensor], torch.Tensor]


def kl_sim(p_logits: torch.Tensor, q_logits: torch.Tensor, reduction: str = "batchmean") -> torch.Tensor:
    """KL(softmax(p) || softmax(q)).

    Args:
        p_logits: Reference logits ``[B, K]``
        q_logits: Predicted logits ``[B, K]``
        reduction: ``"batchmean"`` (mean over rows) or ``"sum"``

    Raises:
        ShapeMismatch: the two logit tensors differ in shape
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatch("logits", tuple(p_logits.shape), tuple(q_logits.shape))
    return F.kl_div(
        F.log_softmax(q_logits, dim=1),
        F.log_softmax(p_logits, dim=1),
        reduction=reduction,
        log_target=True,
    )


def _bn_host(teacher: Teacher) -> nn.Module:
    if isinstance(teacher, FrozenModel):
        return teacher.module
    if isinstance(teacher, nn.Module):
        return teacher
    raise UnsupportedModel("Batch-norm alignment needs an nn.Module teacher")


class BNStatsRecorder:
    """Forward hooks measuring how far batch statistics drift from running ones.

    Every batch-norm layer contributes ``||mu - running_mean||^2 +
    ||var - running_var||^2`` computed on the layer input with the biased
    variance. Only forward passes on the thread that entered the recorder are
    counted.
    """

    def __init__(self, teacher: Teacher):
        module = _bn_host(teacher)
        self.layers = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
        if not self.layers:
            raise UnsupportedModel("Teacher has no batch-norm layers to align with")
        self.terms: List[torch.Tensor] = []
        self._handles = []
        self._owner: Optional[int] = None

    def _hook(self, layer: nn.modules.batchnorm._BatchNorm, inputs, _output) -> None:
        if threading.get_ident() != self._owner:
            return
        x = inputs[0]
        dims = [0] + list(range(2, x.dim()))
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        self.terms.append(
            torch.sum((mean - layer.running_mean) ** 2) + torch.sum((var - layer.running_var) ** 2)
        )

    def __enter__(self) -> "BNStatsRecorder":
        self.terms = []
        self._owner = threading.get_ident()
        self._handles = [layer.register_forward_hook(self._hook) for layer in self.layers]
        return self

    def __exit__(self, *exc) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []
        self._owner = None

    def loss(self) -> torch.Tensor:
        if not self.terms:
            raise UnsupportedModel("No batch-norm statistics recorded; was the teacher called?")
        return torch.stack(self.terms).sum()


def bn_alignment_loss(teacher: Teacher, x: torch.Tensor) -> torch.Tensor:
    """Sum over BN layers of the squared gap between batch and running statistics."""
    with BNStatsRecorder(teacher) as recorder:
        teacher(x)
    return recorder.loss()


def class_prior_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    class_count = logits.shape[1]
    bad = (targets < 0) | (targets >= class_count)
    if bool(bad.any()):
        raise InvalidLabel(int(targets[bad][0]), class_count)
    return F.cross_entropy(logits, targets)


def class_prior_loss(teacher: LogitsFn, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the teacher's prediction against sampled targets.

    Raises:
        InvalidLabel: a target lies outside ``[0, K)``
    """
    return class_prior_from_logits(teacher(x), targets)


def adversarial_divergence_loss(teacher: LogitsFn, student: LogitsFn, x: torch.Tensor) -> torch.Tensor:
    """Negative teacher-student KL; minimizing it seeks disagreement."""
    return -kl_sim(teacher(x), student(x))


def inversion_terms(
    teacher: FrozenModel,
    student: Optional[LogitsFn],
    x: torch.Tensor,
    targets: torch.Tensor,
    cfg: "SynthesisConfig",
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], torch.Tensor]:
    """Weighted inversion loss from a single teacher pass.

    Returns:
        ``(total, parts, features)`` where ``parts`` holds the unweighted
        ``bn``, ``prior`` and ``adv`` terms and ``features`` the teacher's
        penultimate features for the contrastive term.
    """
    with BNStatsRecorder(teacher) as recorder:
        features, logits = teacher.forward_features(x)
    parts = {
        "bn": recorder.loss(),
        "prior": class_prior_from_logits(logits, targets),
    }
    total = cfg.omega * parts["bn"] + cfg.upsilon * parts["prior"]
    if cfg.mu_adv > 0 and student is not None:
        parts["adv"] = -kl_sim(logits, student(x))
        total = total + cfg.mu_adv * parts["adv"]
    return total, parts, features


def inversion_loss(
    teacher: FrozenModel,
    student: Optional[LogitsFn],
    x: torch.Tensor,
    targets: torch.Tensor,
    cfg: "SynthesisConfig",
) -> torch.Tensor:
    """``omega * L_bn + upsilon * L_prior + mu_adv * L_adv``; zero-weight terms contribute nothing."""
    total, _, _ = inversion_terms(teacher, student, x, targets, cfg)
    return total


def info_nce(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: Optional[torch.Tensor] = None,
    tau: float = 0.1,
) -> torch.Tensor:
    """InfoNCE over unit-norm embeddings.

    Each anchor's positive competes against every other anchor in the batch
    and every row of ``negatives``; the denominator includes the positive.

    Raises:
        DegenerateContrast: no negatives at all (single-sample batch, no extra negatives)
    """
    batch = anchors.shape[0]
    extra = 0 if negatives is None else negatives.shape[0]
    if batch - 1 + extra < 1:
        raise DegenerateContrast()

    positive = (anchors * positives).sum(dim=1, keepdim=True)
    logits = [positive]
    if batch > 1:
        similarity = anchors @ anchors.t()
        off_diagonal = ~torch.eye(batch, dtype=torch.bool, device=anchors.device)
        logits.append(similarity[off_diagonal].view(batch, batch - 1))
    if extra:
        logits.append(anchors @ negatives.t())
    logits = torch.cat(logits, dim=1) / tau
    labels = torch.zeros(batch, dtype=torch.long, device=anchors.device)
    return F.cross_entropy(logits, labels)


@contextmanager
def eval_mode(module: nn.Module) -> Iterator[nn.Module]:
    """Temporarily switch a module to eval mode."""
    was_training = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was_training)
