"""Data-free sample synthesis.

Each round re-initializes a small generator from a round-specific seed,
optimizes it together with its latent batch and a persistent contrastive
discriminator against a frozen teacher, and commits the lowest-loss batch to
the pair's :class:`~kiop.bank.DataBank`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from .bank import DataBank
from .constants import AUGMENT_RATIO, DISCRIMINATOR_EMBED, DISCRIMINATOR_HIDDEN, SYNTH_MAX_ATTEMPTS
from .exceptions import ConfigurationError, SynthesisDiverged
from .logging_config import get_logger
from .losses import info_nce, inversion_terms
from .models import FrozenModel, weight_digest

if TYPE_CHECKING:
    from .config import AugmentConfig, SynthesisConfig

logger = get_logger(__name__)

LogitsFn = Callable[[torch.Tensor], torch.Tensor]


def round_seed(base_seed: int, round_index: int, attempt: int = 0) -> int:
    """Deterministic per-round seed mixed from the pair seed, round and attempt."""
    sequence = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, int(round_index), int(attempt)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


class Generator(nn.Module):
    """Latent vector to image: linear projection, two upsample-conv stages, tanh.

    The tanh output lives in ``[-1, 1]`` and is mapped into the teacher's
    normalized input space with the dataset mean and std.
    """

    def __init__(
        self,
        z_dim: int,
        output_side: int,
        channels: int = 3,
        mean: Sequence[float] = (0.5, 0.5, 0.5),
        std: Sequence[float] = (0.5, 0.5, 0.5),
        width: int = 128,
    ):
        super().__init__()
        if output_side % 4:
            raise ConfigurationError(
                f"Generator output side must be a multiple of 4, got {output_side}",
                help_text="The generator upsamples twice by 2; pick a hole side or native_side divisible by 4.",
            )
        self.z_dim = z_dim
        self.init_size = output_side // 4
        self.width = width
        self.l1 = nn.Linear(z_dim, width * self.init_size ** 2)
        self.bn0 = nn.BatchNorm2d(width)
        self.conv_blocks1 = nn.Sequential(
            nn.Conv2d(width, width, 3, stride=1, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.conv_blocks2 = nn.Sequential(
            nn.Conv2d(width, width // 2, 3, stride=1, padding=1),
            nn.BatchNorm2d(width // 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width // 2, channels, 3, stride=1, padding=1),
        )
        self.register_buffer("mean", torch.tensor(list(mean), dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(list(std), dtype=torch.float32).view(1, -1, 1, 1))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        """DCGAN-style init drawn entirely from ``generator``."""
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * 0.02)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.copy_(1.0 + torch.randn(module.weight.shape, generator=generator) * 0.02)
                module.bias.zero_()
                module.reset_running_stats()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.l1(z).view(z.shape[0], self.width, self.init_size, self.init_size)
        img = self.bn0(out)
        img = F.interpolate(img, scale_factor=2)
        img = self.conv_blocks1(img)
        img = F.interpolate(img, scale_factor=2)
        img = torch.tanh(self.conv_blocks2(img))
        return ((img + 1.0) / 2.0 - self.mean) / self.std


class Discriminator(nn.Module):
    """Projection head over teacher features producing unit-norm embeddings."""

    def __init__(self, in_features: int, hidden: int = DISCRIMINATOR_HIDDEN, embed: int = DISCRIMINATOR_EMBED):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, embed),
        )

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        for module in self.net:
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_((torch.rand(module.weight.shape, generator=generator) * 2 - 1) * bound)
                module.bias.copy_((torch.rand(module.bias.shape, generator=generator) * 2 - 1) * bound)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(features), dim=1)


# ---------------------------------------------------------------------------
# Augmentation and contrastive term
# ---------------------------------------------------------------------------

def _crop_params(
    height: int,
    width: int,
    scale: Tuple[float, float],
    ratio: Tuple[float, float],
    generator: Optional[torch.Generator],
) -> Tuple[int, int, int, int]:
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        u = torch.rand(2, generator=generator).tolist()
        target_area = area * (scale[0] + (scale[1] - scale[0]) * u[0])
        aspect = math.exp(log_ratio[0] + (log_ratio[1] - log_ratio[0]) * u[1])
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (1,), generator=generator))
            left = int(torch.randint(0, width - w + 1, (1,), generator=generator))
            return top, left, h, w
    return 0, 0, height, width


def augment(
    x: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    cfg: Optional["AugmentConfig"] = None,
) -> torch.Tensor:
    """Random resized crop plus horizontal flip, sampled per image.

    Differentiable with respect to ``x``; output keeps the input shape.
    """
    scale = (cfg.scale_low, cfg.scale_high) if cfg is not None else (0.6, 1.0)
    flip_p = cfg.flip_p if cfg is not None else 0.5
    height, width = x.shape[-2:]
    views = []
    for image in x:
        top, left, h, w = _crop_params(height, width, scale, AUGMENT_RATIO, generator)
        view = TF.resized_crop(image, top, left, h, w, [height, width], antialias=False)
        if float(torch.rand(1, generator=generator)) < flip_p:
            view = torch.flip(view, dims=[-1])
        views.append(view)
    return torch.stack(views)


def contrastive_loss(
    batch: torch.Tensor,
    bank: Optional[DataBank],
    teacher: FrozenModel,
    discriminator: Discriminator,
    tau: float,
    augment_generator: Optional[torch.Generator] = None,
    negative_generator: Optional[torch.Generator] = None,
    augment_cfg: Optional["AugmentConfig"] = None,
    max_negatives: Optional[int] = None,
    features: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """InfoNCE between each sample and an augmented view of itself.

    Negatives are the other samples of the batch plus one stored bank batch,
    re-embedded with the current discriminator.

    Raises:
        DegenerateContrast: a single-sample batch with an empty bank
    """
    if features is None:
        features = teacher.features(batch)
    positive_features = teacher.features(augment(batch, augment_generator, augment_cfg))
    anchors = discriminator(features)
    positives = discriminator(positive_features)

    negatives = None
    if bank is not None and len(bank):
        stored = bank.negative_batch(negative_generator, max_negatives).to(batch.device)
        with torch.no_grad():
            stored_features = teacher.features(stored)
        negatives = discriminator(stored_features)
    return info_nce(anchors, positives, negatives, tau)


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

@dataclass
class RoundResult:
    """Outcome of one synthesize round for one pair."""

    pair: str
    round_index: int
    images: torch.Tensor
    targets: torch.Tensor
    loss: float
    trace: List[float] = field(default_factory=list)
    generator_init_digest: str = ""
    attempts: int = 1


class Synthesizer:
    """Round-by-round sample synthesis for one (teacher, student) pair.

    The discriminator persists across rounds; the generator and latent batch
    are rebuilt every round from :func:`round_seed`.
    """

    def __init__(
        self,
        name: str,
        teacher: FrozenModel,
        student: Optional[LogitsFn],
        cfg: "SynthesisConfig",
        bank: Optional[DataBank] = None,
        seed: int = 0,
        output_side: Optional[int] = None,
        device: Optional[torch.device] = None,
    ):
        self.name = name
        self.teacher = teacher
        self.student = student
        self.cfg = cfg
        self.bank = bank if bank is not None else DataBank(name)
        self.seed = int(seed)
        self.output_side = output_side or teacher.native_side or 32
        self.device = device or teacher.device
        self.discriminator = Discriminator(teacher.feature_dim)
        self.discriminator.reset_parameters(torch.Generator().manual_seed(self.seed))
        self.discriminator.to(self.device)

    def fresh_generator(self, round_index: int, attempt: int = 0) -> Generator:
        """The generator round ``round_index`` starts from."""
        generator = Generator(
            self.cfg.z_dim,
            self.output_side,
            mean=self.teacher.mean,
            std=self.teacher.std,
        )
        generator.reset_parameters(torch.Generator().manual_seed(round_seed(self.seed, round_index, attempt)))
        return generator

    def synthesize_round(self, round_index: int) -> RoundResult:
        """Run one round and commit the best batch to the bank.

        A non-finite loss triggers one re-seeded retry; a second divergence is
        fatal.

        Raises:
            SynthesisDiverged: the loss became non-finite on every attempt
            DegenerateContrast: contrastive term has no negatives
        """
        for attempt in range(SYNTH_MAX_ATTEMPTS):
            try:
                result = self._run(round_index, attempt)
            except SynthesisDiverged as e:
                if attempt + 1 >= SYNTH_MAX_ATTEMPTS:
                    raise
                logger.warning(f"{e}; retrying round {round_index} with a new seed")
                continue
            result.attempts = attempt + 1
            self.bank.append(result.images, result.targets, round_index)
            return result
        raise AssertionError("unreachable")

    def _run(self, round_index: int, attempt: int) -> RoundResult:
        cfg = self.cfg
        seed = round_seed(self.seed, round_index, attempt)
        rng = torch.Generator().manual_seed(seed)
        augment_rng = torch.Generator().manual_seed(seed + 1)
        negative_rng = torch.Generator().manual_seed(seed + 2)

        generator = self.fresh_generator(round_index, attempt)
        init_digest = weight_digest(generator)
        generator.to(self.device).train()

        z = torch.randn(cfg.batch_size, cfg.z_dim, generator=rng).to(self.device).requires_grad_(True)
        targets = torch.randint(0, self.teacher.class_count, (cfg.batch_size,), generator=rng).to(self.device)

        trainable = list(generator.parameters()) + [z]
        groups = [
            {"params": list(generator.parameters()), "lr": cfg.lr_generator},
            {"params": [z], "lr": cfg.lr_latent},
        ]
        if cfg.lambda_cr > 0:
            trainable += list(self.discriminator.parameters())
            groups.append({"params": list(self.discriminator.parameters()), "lr": cfg.lr_discriminator})
        optimizer = torch.optim.Adam(groups, betas=(0.5, 0.999))

        best_images: Optional[torch.Tensor] = None
        best_loss = math.inf
        trace: List[float] = []
        for step in range(cfg.steps):
            x = generator(z)
            inversion, _, features = inversion_terms(self.teacher, self.student, x, targets, cfg)
            total = cfg.lambda_inv * inversion
            if cfg.lambda_cr > 0:
                contrast = contrastive_loss(
                    x, self.bank, self.teacher, self.discriminator, cfg.tau,
                    augment_rng, negative_rng, cfg.augment, cfg.max_bank_negatives,
                    features=features,
                )
                total = total + cfg.lambda_cr * contrast

            value = float(total.detach())
            if not math.isfinite(value):
                raise SynthesisDiverged(self.name, round_index, step)
            trace.append(value)
            if value < best_loss:
                best_loss = value
                best_images = x.detach().clone()

            optimizer.zero_grad(set_to_none=True)
            total.backward(inputs=trainable)
            optimizer.step()

        logger.debug(
            f"[{self.name}] round {round_index}: loss {trace[0]:.4f} -> {trace[-1]:.4f} (best {best_loss:.4f})"
        )
        return RoundResult(
            pair=self.name,
            round_index=round_index,
            images=best_images.cpu(),
            targets=targets.cpu(),
            loss=best_loss,
            trace=trace,
            generator_init_digest=init_digest,
        )


def synthesize_round(
    teacher: FrozenModel,
    student: Optional[LogitsFn],
    bank: DataBank,
    cfg: "SynthesisConfig",
    round_index: int,
    seed: int = 0,
    discriminator: Optional[Discriminator] = None,
) -> RoundResult:
    """One-shot synthesis round for callers that do not keep a :class:`Synthesizer`."""
    synthesizer = Synthesizer(bank.name, teacher, student, cfg, bank=bank, seed=seed)
    if discriminator is not None:
        synthesizer.discriminator = discriminator
    return synthesizer.synthesize_round(round_index)
