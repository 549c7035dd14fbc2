"""Append-only banks of synthesized samples."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from .exceptions import DataError, EmptyBank
from .logging_config import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class BankEntry:
    """One committed synthesis batch."""

    images: torch.Tensor
    targets: torch.Tensor
    round_index: int

    def __len__(self) -> int:
        return self.images.shape[0]


class DataBank:
    """Thread-safe, append-only store of synthetic batches.

    Entries are kept on the CPU in commit order; nothing is ever removed. When
    ``capacity`` is set, appends that would exceed it are rejected.
    """

    def __init__(self, name: str, capacity: Optional[int] = None):
        self.name = name
        self.capacity = capacity
        self._entries: List[BankEntry] = []
        self._lock = threading.Lock()
        self._cache: Optional[Tuple[torch.Tensor, torch.Tensor]] = None

    def append(self, images: torch.Tensor, targets: torch.Tensor, round_index: int) -> BankEntry:
        """Commit a batch; returns the stored entry."""
        if images.shape[0] != targets.shape[0]:
            raise DataError(
                f"Bank '{self.name}': {images.shape[0]} images but {targets.shape[0]} targets"
            )
        entry = BankEntry(images.detach().cpu().clone(), targets.detach().cpu().clone().long(), int(round_index))
        with self._lock:
            if self.capacity is not None and self._size() + len(entry) > self.capacity:
                raise DataError(f"Bank '{self.name}' is full ({self.capacity} samples)")
            self._entries.append(entry)
            self._cache = None
        logger.debug(f"Bank '{self.name}' committed round {round_index}: {len(entry)} samples")
        return entry

    def _size(self) -> int:
        return sum(len(e) for e in self._entries)

    def __len__(self) -> int:
        with self._lock:
            return self._size()

    @property
    def batch_count(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def entries(self) -> List[BankEntry]:
        with self._lock:
            return list(self._entries)

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """All images and targets concatenated in commit order."""
        with self._lock:
            if not self._entries:
                raise EmptyBank(self.name)
            if self._cache is None:
                self._cache = (
                    torch.cat([e.images for e in self._entries]),
                    torch.cat([e.targets for e in self._entries]),
                )
            return self._cache

    def sample(self, count: int, generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Uniform draw with replacement over every stored sample.

        Raises:
            EmptyBank: nothing committed yet
        """
        images, targets = self.tensors()
        idx = torch.randint(0, images.shape[0], (count,), generator=generator)
        return images[idx], targets[idx]

    def negative_batch(self, generator: Optional[torch.Generator] = None, cap: Optional[int] = None) -> torch.Tensor:
        """Images of one uniformly chosen stored batch, truncated to ``cap``."""
        with self._lock:
            if not self._entries:
                raise EmptyBank(self.name)
            pick = int(torch.randint(0, len(self._entries), (1,), generator=generator))
            images = self._entries[pick].images
        return images if cap is None else images[:cap]

    def extend(self, entries: List[BankEntry]) -> None:
        for entry in entries:
            self.append(entry.images, entry.targets, entry.round_index)


def bank_sample(
    bank: DataBank,
    count: int,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw ``count`` samples uniformly with replacement from ``bank``.

    Raises:
        EmptyBank: the bank holds no samples
    """
    return bank.sample(count, generator)
