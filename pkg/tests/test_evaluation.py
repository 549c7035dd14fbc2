"""Tests for accuracy, Grad-CAM and resource accounting."""

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn
from torch.utils.data import TensorDataset

from kiop.evaluation import (
    accuracy,
    default_cam_layer,
    gradcam,
    resource_report,
    save_gradcam,
    to_display,
)
from kiop.exceptions import EmptyDataset, UnknownLayer
from kiop.fusion import PromptedChain, random_label_mapping
from kiop.models import SmallCNN
from kiop.prompt import init_prompt, make_partition


class FixedClassifier(nn.Module):
    """Predicts the label stored in the first pixel."""

    def forward(self, x):
        return nn.functional.one_hot(x[:, 0, 0, 0].long(), 3).float()


class TestAccuracy:
    """Top-1 accuracy."""

    def test_perfect_and_partial(self):
        labels = torch.tensor([0, 1, 2, 1])
        images = labels.float().view(4, 1, 1, 1).expand(4, 1, 2, 2).clone()
        assert accuracy(FixedClassifier(), (images, labels), batch_size=3) == 1.0
        assert accuracy(FixedClassifier(), (images, torch.tensor([0, 0, 2, 2])), batch_size=2) == 0.5

    def test_tensor_dataset(self):
        labels = torch.tensor([2, 2])
        images = torch.full((2, 1, 2, 2), 2.0)
        assert accuracy(FixedClassifier(), TensorDataset(images, labels)) == 1.0

    def test_empty_split(self):
        with pytest.raises(EmptyDataset):
            accuracy(FixedClassifier(), (torch.zeros(0, 1, 2, 2), torch.zeros(0, dtype=torch.long)))

    def test_restores_training_mode(self):
        module = SmallCNN(3, width=8)
        module.train()
        accuracy(module, (torch.randn(4, 3, 16, 16), torch.zeros(4, dtype=torch.long)))
        assert module.training

    def test_prompted_chain(self, frozen_factory):
        model = frozen_factory()
        chain = PromptedChain(model, init_prompt(make_partition([32, 36, 64])), 2, random_label_mapping(10, 10, 0))
        value = accuracy(chain, (torch.randn(6, 3, 32, 32), torch.arange(6)))
        assert 0.0 <= value <= 1.0


class TestGradCam:
    """Grad-CAM over prompted composites."""

    @pytest.fixture
    def prompt(self):
        return init_prompt(make_partition([32, 36, 64]), "uniform", seed=0)

    def test_shapes_and_range(self, frozen_factory, prompt):
        result = gradcam(torch.randn(3, 3, 32, 32), frozen_factory(), prompt, 2)
        assert result.heatmaps.shape == (3, 64, 64)
        assert result.composites.shape == (3, 3, 64, 64)
        assert float(result.heatmaps.min()) >= 0.0
        assert float(result.heatmaps.max()) <= 1.0

    def test_mapped_chain_and_explicit_class(self, frozen_factory, prompt):
        mapping = random_label_mapping(10, 4, 0)
        result = gradcam(torch.randn(2, 3, 28, 28), frozen_factory(), prompt, 2, mapping=mapping,
                         class_index=torch.tensor([1, 3]))
        assert result.class_indices.tolist() == [1, 3]

    def test_no_gradient_left_on_model(self, frozen_factory, prompt):
        model = frozen_factory()
        gradcam(torch.randn(2, 3, 32, 32), model, prompt, 1)
        assert all(p.grad is None for p in model.module.parameters())
        assert all(p.grad is None for p in prompt.ring_params)
        assert not model.submodule("block2")._forward_hooks

    def test_unknown_layer(self, frozen_factory, prompt):
        with pytest.raises(UnknownLayer):
            gradcam(torch.randn(1, 3, 32, 32), frozen_factory(), prompt, 1, target_layer="block7")

    def test_default_layer(self):
        assert default_cam_layer(SmallCNN(10)) == "block2"
        assert default_cam_layer(nn.Sequential(nn.Conv2d(3, 4, 3), nn.ReLU(), nn.Conv2d(4, 4, 3))) == "2"
        with pytest.raises(UnknownLayer):
            default_cam_layer(nn.Sequential(nn.Linear(2, 2)))

    def test_save_png(self, tmp_path, frozen_factory, prompt):
        result = gradcam(torch.randn(2, 3, 32, 32), frozen_factory(), prompt, 2)
        paths = save_gradcam(result, tmp_path / "cam", (0.5,) * 3, (0.5,) * 3)
        assert len(paths) == 4
        with Image.open(paths[0]) as heatmap:
            assert heatmap.size == (64, 64)
            assert heatmap.mode == "L"
        with Image.open(paths[1]) as composite:
            assert composite.mode == "RGB"


class TestDisplay:
    """Denormalization for emitted images."""

    def test_clamp(self):
        images = torch.tensor([[[[-3.0, 0.0], [1.0, 3.0]]]])
        out = to_display(images, (0.5,), (0.5,), clamp=True)
        assert out.dtype == np.uint8
        assert out[0, :, :, 0].tolist() == [[0, 128], [255, 255]]

    def test_min_max(self):
        images = torch.tensor([[[[-3.0, 0.0], [1.0, 3.0]]]])
        out = to_display(images, (0.5,), (0.5,), clamp=False)
        assert out.min() == 0
        assert out.max() == 255


class TestResourceReport:
    """Parameter and byte accounting."""

    def test_default_prompt(self):
        report = resource_report(init_prompt(make_partition([32, 36, 128])), {"small": SmallCNN(10, width=8)})
        assert report.trainable_params == 46080
        assert report.prompt_bytes == 184345
        assert report.model_params["small"] == sum(p.numel() for p in SmallCNN(10, width=8).parameters())
        assert report.model_bytes["small"] == 4 * report.model_params["small"]

    def test_summary_text(self, frozen_factory):
        report = resource_report(init_prompt(make_partition([32, 36, 128])), {"core": frozen_factory()})
        text = report.format_summary()
        assert text.startswith("Prompt: 46,080 params (184,345 bytes)")
        assert "core:" in text
        assert report.to_dict()["trainable_params"] == 46080
