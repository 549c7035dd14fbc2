"""Source-model preparation for toy and local experiments.

KiOP never trains its source models; this module only produces the frozen
weights a config points at when they do not exist yet.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .config import ExperimentConfig
from .datasets import ingest_dataset
from .evaluation import accuracy
from .exceptions import ConfigurationError
from .logging_config import get_logger
from .models import build_model, save_weights, weight_digest, write_manifest

logger = get_logger(__name__)


def fit_classifier(
    module: nn.Module,
    train: TensorDataset,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    device: str = "cpu",
    progress: bool = True,
) -> nn.Module:
    """Supervised cross-entropy training; returns the module in eval mode."""
    torch.manual_seed(seed)
    module.to(device).train()
    loader = DataLoader(train, batch_size=batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(seed))
    optimizer = torch.optim.Adam(module.parameters(), lr=lr)
    for epoch in tqdm(range(epochs), desc="Pretraining", disable=not progress):
        total = 0.0
        for images, labels in loader:
            images, labels = images.to(device), labels.to(device)
            loss = F.cross_entropy(module(images), labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * images.shape[0]
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss {total / len(train):.4f}")
    return module.eval()


def pretrain_models(cfg: ExperimentConfig, force: bool = False) -> pd.DataFrame:
    """Train and save every configured model whose weight file is missing.

    Returns:
        Table of ``id, arch, dataset, test_acc, weights`` for models trained now

    Raises:
        ConfigurationError: a model has no weights path to write to
    """
    rows: List[dict] = []
    hole = cfg.partition.sides[0]
    for spec in cfg.all_models():
        if not spec.weights:
            raise ConfigurationError(f"Model '{spec.id}' needs a weights path to pretrain into")
        if Path(spec.weights).exists() and not force:
            logger.info(f"Skipping '{spec.id}': {spec.weights} exists")
            continue

        dataset = ingest_dataset(spec.dataset, cfg.datasets[spec.dataset], hole)
        module = build_model(spec.arch, spec.class_count, width=spec.width)
        fit_classifier(
            module, dataset.train,
            epochs=cfg.pretrain.epochs, lr=cfg.pretrain.lr, batch_size=cfg.pretrain.batch_size,
            seed=cfg.seeds.global_seed, device=cfg.device, progress=cfg.storing.progress,
        )
        test_acc = accuracy(module, dataset.test, cfg.evaluation.batch_size)
        module.cpu()
        save_weights(module, spec.weights)
        write_manifest(
            spec.weights, spec.id, spec.arch, spec.class_count, spec.dataset,
            weight_digest(module), test_accuracy=round(test_acc, 6),
        )
        logger.info(f"Pretrained '{spec.id}' on '{spec.dataset}': test accuracy {test_acc:.4f}")
        rows.append({"id": spec.id, "arch": spec.arch, "dataset": spec.dataset,
                     "test_acc": test_acc, "weights": spec.weights})
    return pd.DataFrame(rows, columns=["id", "arch", "dataset", "test_acc", "weights"])
