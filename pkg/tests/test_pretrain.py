"""Tests for source-model preparation."""

import pytest
import torch
from torch.utils.data import TensorDataset

from kiop.config import validate_config
from kiop.exceptions import ConfigurationError
from kiop.models import SmallCNN, read_manifest, weight_digest
from kiop.pretrain import fit_classifier, pretrain_models


def test_fit_classifier_learns_separable_task():
    """Two constant-colour classes are separable after a few epochs."""
    labels = torch.tensor([0, 1] * 16)
    images = torch.stack([torch.full((3, 16, 16), 1.0 if y else -1.0) for y in labels])
    module = SmallCNN(2, width=8)
    before = weight_digest(module)

    fit_classifier(module, TensorDataset(images, labels), epochs=20, lr=1e-2, batch_size=8, progress=False)

    assert not module.training
    assert weight_digest(module) != before
    assert float((module(images).argmax(dim=1) == labels).float().mean()) >= 0.9


def test_pretrain_writes_missing_weights(toy_run, tmp_path):
    data, _ = toy_run
    data = dict(data)
    data["core"] = dict(data["core"], weights=str(tmp_path / "new" / "toy_a.kiopw"))
    cfg = validate_config(data)

    table = pretrain_models(cfg)

    assert table["id"].tolist() == ["toy_a"]
    manifest = read_manifest(tmp_path / "new" / "toy_a.kiopw")
    assert manifest["id"] == "toy_a"
    assert 0.0 <= manifest["test_accuracy"] <= 1.0
    assert pretrain_models(cfg).empty


def test_force_retrains_everything(toy_config):
    table = pretrain_models(toy_config, force=True)
    assert table["id"].tolist() == ["toy_a", "toy_b"]


def test_weights_path_required(toy_run):
    data, _ = toy_run
    data = dict(data)
    data["core"] = {k: v for k, v in data["core"].items() if k != "weights"}
    with pytest.raises(ConfigurationError):
        pretrain_models(validate_config(data))
