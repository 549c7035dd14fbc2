"""Custom exceptions for kiop.

Every failure raised by the package derives from :class:`KiopError` so callers
(the CLI in particular) can separate configuration problems from runtime ones.
"""

from __future__ import annotations

from typing import Optional, Sequence


class KiopError(Exception):
    """Base exception for all kiop errors."""
    pass


class ConfigurationError(KiopError):
    """Configuration-related errors."""

    def __init__(self, message: str, help_text: Optional[str] = None):
        """Initialize ConfigurationError with optional help text.

        Args:
            message: Error message
            help_text: Optional helpful information for resolving the error
        """
        super().__init__(message)
        self.help_text = help_text


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class GeometryError(KiopError):
    """Prompt partition or tensor layout is inconsistent."""
    pass


class InvalidPartition(GeometryError):
    """Ring side lengths do not describe a valid nested partition."""

    def __init__(self, sides: Sequence[int], reason: str):
        self.sides = list(sides)
        self.reason = reason
        super().__init__(f"Invalid partition {self.sides}: {reason}")


class InvalidDepth(GeometryError):
    """Requested composition depth is outside 1..ring_count."""

    def __init__(self, depth: int, ring_count: int):
        self.depth = depth
        self.ring_count = ring_count
        super().__init__(f"Depth {depth} out of range 1..{ring_count}")


class ShapeMismatch(GeometryError):
    """Tensor shape or width does not match what the operation expects."""

    def __init__(self, what: str, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class CorruptCheckpoint(KiopError):
    """Prompt checkpoint could not be decoded."""

    def __init__(self, path: str, details: Optional[str] = None):
        self.path = path
        message = f"Corrupt prompt checkpoint: {path}"
        if details:
            message += f" ({details})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class MappingInfeasible(KiopError):
    """More target classes requested than the source model provides."""

    def __init__(self, k_src: int, k_tgt: int):
        self.k_src = k_src
        self.k_tgt = k_tgt
        super().__init__(
            f"Cannot map {k_tgt} target classes onto {k_src} source outputs"
        )


class FrozenViolation(KiopError):
    """A registered model's weights changed during a run."""

    def __init__(self, model_id: str, expected_digest: str, actual_digest: str):
        self.model_id = model_id
        self.expected_digest = expected_digest
        self.actual_digest = actual_digest
        super().__init__(
            f"Model '{model_id}' weights changed: "
            f"{expected_digest[:12]} -> {actual_digest[:12]}"
        )


class UnsupportedModel(KiopError):
    """Model lacks a capability an operation needs (e.g. BN layers)."""
    pass


class SnapshotMismatch(KiopError):
    """Head snapshot does not fit the student it is restored into."""
    pass


class UnknownLayer(KiopError):
    """Named layer does not exist in the model."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Unknown layer: {name}")


# ---------------------------------------------------------------------------
# Data and optimization
# ---------------------------------------------------------------------------

class DataError(KiopError):
    """Data-related errors."""
    pass


class InvalidLabel(DataError):
    """Target label outside the teacher's class range."""

    def __init__(self, label: int, class_count: int):
        self.label = label
        self.class_count = class_count
        super().__init__(f"Label {label} outside [0, {class_count})")


class EmptyBank(DataError):
    """Sampling requested from a data bank with no committed batches."""

    def __init__(self, name: str = "bank"):
        super().__init__(f"Data bank '{name}' is empty")


class EmptyDataset(DataError):
    """Evaluation split holds no samples."""
    pass


class IngestError(DataError):
    """Dataset files are unreadable or in an unknown layout."""

    def __init__(self, path: str, expected_layout: Optional[str] = None, details: Optional[str] = None):
        self.path = path
        self.expected_layout = expected_layout
        message = f"Cannot ingest dataset at {path}"
        if expected_layout:
            message += f" (expected layout: {expected_layout})"
        if details:
            message += f": {details}"
        super().__init__(message)


class DegenerateContrast(KiopError):
    """Contrastive loss has no negatives (single sample, empty bank)."""

    def __init__(self):
        super().__init__("Contrastive loss needs at least one negative sample")


class SynthesisDiverged(KiopError):
    """Synthesis objective became non-finite."""

    def __init__(self, pair: str, round_index: int, step: int):
        self.pair = pair
        self.round_index = round_index
        self.step = step
        super().__init__(
            f"Synthesis for pair '{pair}' diverged in round {round_index} at step {step}"
        )
