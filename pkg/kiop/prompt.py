"""Ring-partitioned visual prompt.

A prompt is a chain of nested square rings around the input image. Ring ``i``
spans the square of side ``sides[i]`` minus the centered square of side
``sides[i-1]``; ``sides[0]`` is the image hole. When a ring width is odd the
extra pixel goes to the bottom and right bands. Composition to depth ``d`` pads
the image ring by ring and overwrites every ring pixel with its learned value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .constants import CHECKPOINT_MAGIC, DEFAULT_CHANNELS
from .exceptions import CorruptCheckpoint, InvalidDepth, InvalidPartition, ShapeMismatch
from .logging_config import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class RingPartition:
    """Nested square side lengths ``[s_0, ..., s_n]`` plus channel count."""

    sides: Tuple[int, ...]
    channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        sides = tuple(int(s) for s in self.sides)
        object.__setattr__(self, "sides", sides)
        if len(sides) < 2:
            raise InvalidPartition(sides, "need an image hole and at least one ring")
        if sides[0] < 1:
            raise InvalidPartition(sides, "image hole side must be >= 1")
        for inner, outer in zip(sides, sides[1:]):
            if outer <= inner:
                raise InvalidPartition(sides, f"side {outer} does not exceed {inner}")
        if self.channels < 1:
            raise InvalidPartition(sides, "channels must be >= 1")

    @property
    def ring_count(self) -> int:
        return len(self.sides) - 1

    @property
    def hole_side(self) -> int:
        return self.sides[0]

    @property
    def canvas_side(self) -> int:
        return self.sides[-1]

    def offset(self, ring: int) -> int:
        """Top/left border width of ring ``ring`` (1-based)."""
        return self.margins(ring)[0]

    def margins(self, ring: int) -> Tuple[int, int]:
        """Top/left and bottom/right border widths of ring ``ring``.

        An odd width puts the extra pixel on the bottom/right side.
        """
        self._check_ring(ring)
        width = self.sides[ring] - self.sides[ring - 1]
        return width // 2, width - width // 2

    def live_count(self, ring: int) -> int:
        self._check_ring(ring)
        return self.channels * (self.sides[ring] ** 2 - self.sides[ring - 1] ** 2)

    def ring_mask(self, ring: int) -> torch.Tensor:
        """Boolean ``[s_i, s_i]`` mask of the live region of ring ``ring``."""
        side = self.sides[ring]
        o = self.offset(ring)
        inner = self.sides[ring - 1]
        mask = torch.ones(side, side, dtype=torch.bool)
        mask[o:o + inner, o:o + inner] = False
        return mask

    def canvas_mask(self, ring: int) -> torch.Tensor:
        """Mask of ring ``ring`` embedded on the full ``s_n`` canvas."""
        lead, trail = self.outer_margins(ring)
        return F.pad(self.ring_mask(ring), (lead, trail, lead, trail), value=False)

    def outer_margins(self, ring: int) -> Tuple[int, int]:
        """Top/left and bottom/right distance from square ``s_ring`` to the canvas edge."""
        self._check_ring(ring)
        outer = [self.margins(r) for r in range(ring + 1, self.ring_count + 1)]
        return sum(m[0] for m in outer), sum(m[1] for m in outer)

    def band_slices(self, ring: int) -> List[Tuple[slice, slice]]:
        """Row/column slices of the top, bottom, left and right bands."""
        o = self.offset(ring)
        inner = self.sides[ring - 1]
        side = self.sides[ring]
        full = slice(0, side)
        mid = slice(o, o + inner)
        return [
            (slice(0, o), full),
            (slice(o + inner, side), full),
            (mid, slice(0, o)),
            (mid, slice(o + inner, side)),
        ]

    def _check_ring(self, ring: int) -> None:
        if not 1 <= ring <= self.ring_count:
            raise InvalidDepth(ring, self.ring_count)


def make_partition(sides: Sequence[int], channels: int = DEFAULT_CHANNELS) -> RingPartition:
    """Validate side lengths and build a :class:`RingPartition`.

    Raises:
        InvalidPartition: fewer than two sides, a non-positive hole or
            non-increasing sides.
    """
    return RingPartition(tuple(sides), channels)


class VisualPrompt(nn.Module):
    """Learnable ring pixels; the only trainable object in KiOP regimes.

    ``ring_params[i-1]`` holds a ``channels x s_i x s_i`` grid of which only
    the ring region is live; dead pixels stay at zero and never receive
    gradient.
    """

    def __init__(self, partition: RingPartition):
        super().__init__()
        self.partition = partition
        c = partition.channels
        self.ring_params = nn.ParameterList(
            nn.Parameter(torch.zeros(c, side, side)) for side in partition.sides[1:]
        )
        for ring in range(1, partition.ring_count + 1):
            self.register_buffer(f"mask_{ring}", partition.ring_mask(ring), persistent=False)

    @property
    def ring_masks(self) -> List[torch.Tensor]:
        return [getattr(self, f"mask_{ring}") for ring in range(1, self.partition.ring_count + 1)]

    def ring_parameter(self, ring: int) -> nn.Parameter:
        self.partition._check_ring(ring)
        return self.ring_params[ring - 1]

    def live_values(self, ring: int) -> torch.Tensor:
        """Live parameters of ``ring`` in ring-scan order (top, bottom, left, right)."""
        grid = self.ring_parameter(ring)
        return torch.cat([grid[:, rows, cols].reshape(-1) for rows, cols in self.partition.band_slices(ring)])

    @torch.no_grad()
    def set_live_values(self, ring: int, values: torch.Tensor) -> None:
        grid = self.ring_parameter(ring)
        start = 0
        for rows, cols in self.partition.band_slices(ring):
            block = grid[:, rows, cols]
            n = block.numel()
            grid[:, rows, cols] = values[start:start + n].view_as(block).to(grid)
            start += n

    def forward(self, x: torch.Tensor, depth: int) -> torch.Tensor:
        return compose(x, self, depth)


def init_prompt(
    partition: RingPartition,
    scheme: str = "zeros",
    seed: int = 0,
    low: float = -0.1,
    high: float = 0.1,
) -> VisualPrompt:
    """Create a prompt with ring parameters filled per ``scheme``.

    Args:
        partition: Validated ring partition
        scheme: ``"zeros"`` or ``"uniform"``
        seed: Seed for the uniform scheme; the result is a pure function of it
        low: Lower bound of the uniform scheme
        high: Upper bound of the uniform scheme

    Returns:
        Fresh :class:`VisualPrompt`
    """
    prompt = VisualPrompt(partition)
    if scheme == "zeros":
        return prompt
    if scheme != "uniform":
        raise ValueError(f"Unknown prompt init scheme: {scheme}")

    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for ring, param in enumerate(prompt.ring_params, start=1):
            values = torch.rand(param.shape, generator=generator) * (high - low) + low
            param.copy_(values * getattr(prompt, f"mask_{ring}"))
    return prompt


def compose(x: torch.Tensor, prompt: VisualPrompt, depth: int) -> torch.Tensor:
    """Place ``x`` in the image hole and surround it with rings ``1..depth``.

    Ring pixels hold the prompt values verbatim and no clamping is applied.
    Gradients reach ``x`` through the interior and ``ring_params[i]`` through
    its mask only.

    Raises:
        InvalidDepth: ``depth`` outside ``1..ring_count``
        ShapeMismatch: ``x`` is not a ``[B, channels, s_0, s_0]`` batch
    """
    partition = prompt.partition
    if not 1 <= depth <= partition.ring_count:
        raise InvalidDepth(depth, partition.ring_count)
    expected = (partition.channels, partition.hole_side, partition.hole_side)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatch("prompt input", expected, tuple(x.shape[1:]))

    canvas = x
    for ring in range(1, depth + 1):
        lead, trail = partition.margins(ring)
        canvas = F.pad(canvas, (lead, trail, lead, trail))
        canvas = torch.where(
            getattr(prompt, f"mask_{ring}"),
            prompt.ring_params[ring - 1].to(canvas.dtype),
            canvas,
        )
    return canvas


def fit_to_hole(x: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinearly resize a batch so it fits an image hole of ``side`` pixels."""
    if x.shape[-1] == side and x.shape[-2] == side:
        return x
    return F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)


def param_count(prompt: VisualPrompt) -> int:
    """Number of live prompt parameters, ``sum_i C * (s_i^2 - s_{i-1}^2)``."""
    partition = prompt.partition
    return sum(partition.live_count(ring) for ring in range(1, partition.ring_count + 1))


# ---------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------

def header_size(partition: RingPartition) -> int:
    """Bytes preceding the float payload in a prompt checkpoint."""
    return len(CHECKPOINT_MAGIC) + 8 + 4 * len(partition.sides)


def encode_prompt(prompt: VisualPrompt) -> bytes:
    """Serialize live parameters: magic, channels, ring count, sides, float32 LE payload."""
    partition = prompt.partition
    header = CHECKPOINT_MAGIC + struct.pack("<ii", partition.channels, partition.ring_count)
    header += np.asarray(partition.sides, dtype="<i4").tobytes()
    with torch.no_grad():
        payload = b"".join(
            prompt.live_values(ring).detach().cpu().numpy().astype("<f4").tobytes()
            for ring in range(1, partition.ring_count + 1)
        )
    return header + payload


def decode_prompt(data: bytes, source: str = "<bytes>") -> VisualPrompt:
    """Inverse of :func:`encode_prompt`.

    Raises:
        CorruptCheckpoint: bad magic, implausible header or payload size mismatch
    """
    magic_len = len(CHECKPOINT_MAGIC)
    if len(data) < magic_len + 8 or data[:magic_len] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(source, "bad header magic")
    channels, ring_count = struct.unpack_from("<ii", data, magic_len)
    if channels < 1 or ring_count < 1 or ring_count > 64:
        raise CorruptCheckpoint(source, f"implausible header: channels={channels}, rings={ring_count}")
    sides_start = magic_len + 8
    sides_end = sides_start + 4 * (ring_count + 1)
    if len(data) < sides_end:
        raise CorruptCheckpoint(source, "truncated sides array")
    sides = np.frombuffer(data[sides_start:sides_end], dtype="<i4").tolist()
    try:
        partition = make_partition(sides, channels)
    except InvalidPartition as e:
        raise CorruptCheckpoint(source, str(e)) from e

    counts = [partition.live_count(ring) for ring in range(1, ring_count + 1)]
    if len(data) - sides_end != 4 * sum(counts):
        raise CorruptCheckpoint(
            source, f"payload is {len(data) - sides_end} bytes, expected {4 * sum(counts)}"
        )

    prompt = VisualPrompt(partition)
    values = torch.from_numpy(np.frombuffer(data, dtype="<f4", offset=sides_end).astype(np.float32))
    start = 0
    for ring, n in enumerate(counts, start=1):
        prompt.set_live_values(ring, values[start:start + n])
        start += n
    return prompt


def save_prompt(prompt: VisualPrompt, path: PathLike) -> int:
    """Write a prompt checkpoint; returns the number of bytes written."""
    data = encode_prompt(prompt)
    Path(path).write_bytes(data)
    logger.debug(f"Saved prompt checkpoint {path} ({len(data)} bytes)")
    return len(data)


def load_prompt(path: PathLike) -> VisualPrompt:
    """Read a prompt checkpoint written by :func:`save_prompt`."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(str(path), str(e)) from e
    return decode_prompt(data, source=str(path))
