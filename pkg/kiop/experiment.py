"""Materialize an :class:`ExperimentConfig` into models, mappings and datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from .config import ExperimentConfig, ModelSpec
from .datasets import DatasetHandle, ingest_dataset, load_manifest
from .exceptions import InvalidPartition
from .fusion import LabelMapping, random_label_mapping
from .logging_config import get_logger
from .models import FrozenModel, load_frozen_model
from .prompt import RingPartition, make_partition

logger = get_logger(__name__)


def resolve_partition(cfg: ExperimentConfig) -> RingPartition:
    """Partition of the run; single-model transfer uses one undivided ring."""
    sides = cfg.partition.sides
    if cfg.regime == "kiop-t":
        sides = [sides[0], sides[-1]]
    return make_partition(sides, cfg.partition.channels)


def receiver_depths(regime: str, partition: RingPartition, receiver_count: int) -> List[int]:
    """Ring depth each receiver chain composes to.

    Two-model regimes compose every ring; receiver ``i`` of ``m`` in the
    multi-model regime composes rings ``1..i+1``.

    Raises:
        InvalidPartition: multi-model ring count is not ``m + 1``
    """
    if regime == "multi":
        if partition.ring_count != receiver_count + 1:
            raise InvalidPartition(
                partition.sides,
                f"{receiver_count} receivers need {receiver_count + 1} rings, got {partition.ring_count}",
            )
        return [i + 2 for i in range(receiver_count)]
    return [partition.ring_count] * receiver_count


def build_mappings(core: FrozenModel, receivers: List[FrozenModel], mapping_seed: int) -> List[LabelMapping]:
    return [
        random_label_mapping(core.class_count, receiver.class_count, mapping_seed + i)
        for i, receiver in enumerate(receivers)
    ]


def dataset_stats(cfg: ExperimentConfig, key: str):
    spec = cfg.datasets[key]
    return load_manifest(spec.manifest or key).channel_stats()


@dataclass
class ExperimentContext:
    """Everything a regime needs, built once per run."""

    config: ExperimentConfig
    device: torch.device
    partition: RingPartition
    core: FrozenModel
    receivers: List[FrozenModel]
    mappings: List[LabelMapping]
    depths: List[int]
    seeds: Dict[str, int]
    datasets: Dict[str, DatasetHandle] = field(default_factory=dict)

    @property
    def models(self) -> List[FrozenModel]:
        return [self.core, *self.receivers]

    def dataset(self, key: str) -> DatasetHandle:
        """Ingest (once) and return the dataset registered under ``key``."""
        if key not in self.datasets:
            self.datasets[key] = ingest_dataset(key, self.config.datasets[key], self.partition.hole_side)
        return self.datasets[key]

    def core_dataset(self) -> DatasetHandle:
        return self.dataset(self.config.core.dataset)

    def receiver_dataset(self, index: int) -> DatasetHandle:
        return self.dataset(self.config.receivers[index].dataset)


def _load(cfg: ExperimentConfig, spec: ModelSpec, hole_side: int, device: torch.device) -> FrozenModel:
    mean, std = dataset_stats(cfg, spec.dataset)
    return load_frozen_model(spec, mean=mean, std=std, native_side=hole_side, device=device)


def build_context(cfg: ExperimentConfig, device: Optional[str] = None) -> ExperimentContext:
    """Load frozen models and draw label mappings for ``cfg``.

    Datasets are ingested lazily through :meth:`ExperimentContext.dataset`.
    """
    seeds = cfg.seeds.resolved()
    torch.manual_seed(seeds["global"])
    torch_device = torch.device(device or cfg.device)
    partition = resolve_partition(cfg)

    core = _load(cfg, cfg.core, partition.hole_side, torch_device)
    receivers = [_load(cfg, spec, partition.hole_side, torch_device) for spec in cfg.receivers]
    mappings = build_mappings(core, receivers, seeds["mapping"])
    depths = receiver_depths(cfg.regime, partition, len(receivers))
    logger.info(
        f"Regime {cfg.regime}: core '{core.id}', receivers {[r.id for r in receivers]} "
        f"at depths {depths}, partition {list(partition.sides)}"
    )
    return ExperimentContext(
        config=cfg,
        device=torch_device,
        partition=partition,
        core=core,
        receivers=receivers,
        mappings=mappings,
        depths=depths,
        seeds=seeds,
    )
