"""Tests for the vanilla distillation baseline."""

import pytest
import torch
from torch import nn

from kiop.baselines import replace_head, restore_head, snapshot_head, vanilla_dfkd
from kiop.config import SynthesisConfig, VanillaConfig
from kiop.exceptions import SnapshotMismatch, UnsupportedModel
from kiop.models import SmallCNN, weight_digest


class TestHeadSnapshot:
    """Head snapshot, replacement and restore."""

    def test_restore_after_replacement(self):
        torch.manual_seed(0)
        student = SmallCNN(10, width=8)
        original = student.head.weight.detach().clone()
        snap = snapshot_head(student)
        replace_head(student, 5, seed=1)
        assert student.head.out_features == 5
        restore_head(student, snap)
        assert student.head.out_features == 10
        assert torch.equal(student.head.weight, original)

    def test_snapshot_is_a_copy(self):
        student = SmallCNN(10, width=8)
        snap = snapshot_head(student)
        with torch.no_grad():
            student.head.weight.add_(1.0)
        assert not torch.equal(snap.weight, student.head.weight)

    def test_replace_is_seeded(self):
        a, b = SmallCNN(10, width=8), SmallCNN(10, width=8)
        replace_head(a, 4, seed=3)
        replace_head(b, 4, seed=3)
        assert torch.equal(a.head.weight, b.head.weight)

    def test_restore_leaves_backbone(self):
        student = SmallCNN(10, width=8)
        snap = snapshot_head(student)
        with torch.no_grad():
            student.block1[0].weight.add_(1.0)
        changed = student.block1[0].weight.detach().clone()
        restore_head(student, snap)
        assert torch.equal(student.block1[0].weight, changed)

    def test_width_mismatch(self):
        snap = snapshot_head(SmallCNN(10, width=8))
        with pytest.raises(SnapshotMismatch):
            restore_head(SmallCNN(10, width=16), snap)

    def test_needs_linear_head(self):
        with pytest.raises(UnsupportedModel):
            snapshot_head(nn.Sequential(nn.Linear(2, 2)))


class TestVanillaDFKD:
    """Unfrozen-student distillation."""

    def test_student_trains_and_source_stays_frozen(self, frozen_factory, tiny_synthesis_overrides):
        source = frozen_factory("core", 10, seed=0)
        teacher = frozen_factory("teacher", 5, seed=1)
        before = weight_digest(source.module)

        result = vanilla_dfkd(
            source, teacher, SynthesisConfig(**tiny_synthesis_overrides),
            VanillaConfig(batch_size=4), iterations=2, seed=0, progress=False,
        )

        assert result.student.head.out_features == 5
        assert result.snapshot.class_count == 10
        assert weight_digest(source.module) == before
        assert weight_digest(result.student) != before
        records = result.metrics.records
        assert len(records) == 2
        assert records[0].student_digest != records[1].student_digest
        assert records[-1].bank_sizes == {"teacher": 8}
