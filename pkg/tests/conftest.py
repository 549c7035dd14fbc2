"""Pytest configuration for kiop tests."""

import logging
import os
import sys

import pytest
import torch
import yaml

from kiop.config import ExperimentConfig, validate_config
from kiop.models import FrozenModel, SmallCNN, save_weights, weight_digest, write_manifest


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run toy-scale end-to-end tests")
    parser.addoption("--run-acceptance", action="store_true", default=False,
                     help="Run full-length acceptance runs on the bundled toy experiments")


def pytest_collection_modifyitems(config, items):
    gates = [(marker, option) for marker, option in (("slow", "--run-slow"), ("acceptance", "--run-acceptance"))
             if not config.getoption(option)]
    for item in items:
        for marker, option in gates:
            if marker in item.keywords:
                item.add_marker(pytest.mark.skip(reason=f"needs {option}"))


@pytest.fixture(scope="session", autouse=True)
def setup_test_environment():
    """
    Automatically set KIOP_ENV=test for all pytest runs and keep
    environment overrides from leaking into config tests.
    """
    saved = {key: os.environ.get(key) for key in ("KIOP_ENV", "KIOP_DEVICE", "KIOP_OUTPUT_DIR", "KIOP_SEED")}
    os.environ["KIOP_ENV"] = "test"
    for key in ("KIOP_DEVICE", "KIOP_OUTPUT_DIR", "KIOP_SEED"):
        os.environ.pop(key, None)

    yield

    for key, value in saved.items():
        if value is not None:
            os.environ[key] = value
        else:
            os.environ.pop(key, None)


@pytest.fixture
def preserve_excepthook():
    """Preserve and restore ``sys.excepthook`` around a test."""

    original_hook = sys.excepthook
    yield
    sys.excepthook = original_hook


def make_frozen(model_id: str = "a", num_classes: int = 10, width: int = 8, seed: int = 0) -> FrozenModel:
    """Seeded, untrained SmallCNN wrapped as a frozen model."""
    torch.manual_seed(seed)
    module = SmallCNN(num_classes, width=width)
    with torch.no_grad():
        for bn in (module.block1[1], module.block2[1]):
            bn.running_mean.uniform_(-0.2, 0.2)
            bn.running_var.uniform_(0.5, 1.5)
    return FrozenModel(model_id, module, native_side=32)


@pytest.fixture
def frozen_factory():
    """Factory building seeded tiny frozen models."""
    return make_frozen


@pytest.fixture
def frozen_pair():
    """Two tiny frozen models: core (10 classes) and receiver (10 classes)."""
    return make_frozen("core", 10, seed=0), make_frozen("receiver", 10, seed=1)


@pytest.fixture
def tiny_synthesis_overrides():
    return {"steps": 2, "batch_size": 4, "z_dim": 16, "max_bank_negatives": 4}


@pytest.fixture
def toy_run(tmp_path, tiny_synthesis_overrides):
    """Config data for a tiny toy run with untrained weights written to ``tmp_path``.

    Returns a ``(config_data, config_path)`` pair; the config file is YAML.
    """
    zoo = tmp_path / "zoo"
    paths = {}
    for i, name in enumerate(["toy_a", "toy_b", "toy_c"]):
        torch.manual_seed(100 + i)
        module = SmallCNN(10, width=8)
        paths[name] = save_weights(module, zoo / f"{name}.kiopw")
        write_manifest(paths[name], name, "small_cnn", 10, name, weight_digest(module))

    data = {
        "regime": "kiop-bf",
        "output_dir": str(tmp_path / "run"),
        "partition": {"sides": [32, 36, 64]},
        "core": {"id": "toy_a", "dataset": "toy_a", "width": 8, "weights": str(paths["toy_a"])},
        "receivers": [{"id": "toy_b", "dataset": "toy_b", "width": 8, "weights": str(paths["toy_b"])}],
        "datasets": {
            "toy_a": {"layout": "toy", "manifest": "toy", "variant": 0, "seed": 1, "train_size": 40, "test_size": 20},
            "toy_b": {"layout": "toy", "manifest": "toy", "variant": 1, "seed": 2, "train_size": 40, "test_size": 20},
            "toy_c": {"layout": "toy", "manifest": "toy", "variant": 2, "seed": 3, "train_size": 40, "test_size": 20},
        },
        "synthesis": dict(tiny_synthesis_overrides),
        "storing": {"iterations": 3, "batch_size": 4, "progress": False},
        "evaluation": {"batch_size": 16, "gradcam_count": 2},
        "pretrain": {"epochs": 1, "batch_size": 16},
        "seeds": {"global": 7},
    }
    config_path = tmp_path / "run.yaml"
    config_path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return data, config_path


@pytest.fixture
def toy_config(toy_run) -> ExperimentConfig:
    return validate_config(toy_run[0])


@pytest.fixture
def kiop_logger():
    """Close and drop handlers added to the package logger during a test."""
    logger = logging.getLogger("kiop")
    saved = (list(logger.handlers), logger.level, logger.propagate)
    yield logger
    for handler in logger.handlers:
        if handler not in saved[0]:
            handler.close()
    logger.handlers[:] = saved[0]
    logger.setLevel(saved[1])
    logger.propagate = saved[2]
