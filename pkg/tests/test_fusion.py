"""Tests for label mapping and the prompted forward chains."""

import pytest
import torch

from kiop.exceptions import FrozenViolation, MappingInfeasible, ShapeMismatch
from kiop.fusion import (
    PromptedChain,
    apply_mapping,
    assert_all_frozen,
    assert_frozen,
    random_label_mapping,
    sma_forward,
    smb_forward,
)
from kiop.prompt import compose, init_prompt, make_partition


@pytest.fixture
def prompt():
    return init_prompt(make_partition([32, 36, 64]), "uniform", seed=2)


class TestLabelMapping:
    """Random label mapping."""

    def test_deterministic(self):
        assert random_label_mapping(10, 10, 3) == random_label_mapping(10, 10, 3)

    def test_distinct_in_range(self):
        mapping = random_label_mapping(100, 43, 1)
        assert mapping.k_tgt == 43
        assert len(set(mapping.indices)) == 43
        assert all(0 <= i < 100 for i in mapping.indices)

    def test_seed_changes_mapping(self):
        assert random_label_mapping(100, 10, 1).indices != random_label_mapping(100, 10, 2).indices

    def test_infeasible(self):
        with pytest.raises(MappingInfeasible):
            random_label_mapping(10, 43, 0)

    def test_apply_mapping(self):
        mapping = random_label_mapping(5, 3, 0)
        logits = torch.arange(10, dtype=torch.float32).view(2, 5)
        out = apply_mapping(logits, mapping)
        assert out.shape == (2, 3)
        for j, i in enumerate(mapping.indices):
            assert torch.equal(out[:, j], logits[:, i])

    def test_apply_mapping_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            apply_mapping(torch.zeros(2, 7), random_label_mapping(5, 3, 0))


class TestChains:
    """SMA and SMB forward chains."""

    def test_sma_uses_ring_one(self, frozen_factory, prompt):
        model = frozen_factory()
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(sma_forward(x, model, prompt), model(compose(x, prompt, 1)))

    def test_sma_ignores_outer_ring(self, frozen_factory, prompt):
        model = frozen_factory()
        x = torch.randn(2, 3, 32, 32)
        before = sma_forward(x, model, prompt)
        with torch.no_grad():
            prompt.ring_params[1].add_(5.0)
        assert torch.equal(sma_forward(x, model, prompt), before)

    def test_smb_output_width(self, frozen_factory, prompt):
        model = frozen_factory()
        mapping = random_label_mapping(10, 4, 0)
        out = smb_forward(torch.randn(2, 3, 32, 32), model, prompt, mapping, 2)
        assert out.shape == (2, 4)

    def test_prompted_chain_resizes(self, frozen_factory, prompt):
        """Native-side batches are fitted into the image hole."""
        model = frozen_factory()
        chain = PromptedChain(model, prompt, 2, random_label_mapping(10, 10, 0))
        assert chain(torch.randn(2, 3, 28, 28)).shape == (2, 10)

    def test_prompted_chain_matches_sma(self, frozen_factory, prompt):
        model = frozen_factory()
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(PromptedChain(model, prompt, 1)(x), sma_forward(x, model, prompt))


class TestFrozenChecks:
    """Digest verification."""

    def test_unchanged(self, frozen_pair):
        assert assert_all_frozen(frozen_pair)

    def test_violation(self, frozen_factory):
        model = frozen_factory()
        with torch.no_grad():
            model.module.block1[1].running_mean.add_(0.1)
        with pytest.raises(FrozenViolation) as exc_info:
            assert_frozen(model)
        assert exc_info.value.model_id == model.id
