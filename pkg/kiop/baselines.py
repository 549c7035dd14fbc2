"""Vanilla data-free distillation baseline.

A deep copy of the core model is distilled from the receiver model with every
weight unfrozen. Its original classification head is snapshotted first so
accuracy on the core task can be measured after training by putting the head
back, exposing how much the backbone forgot.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass
from typing import Optional

import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from .bank import DataBank, bank_sample
from .config import ExperimentConfig, SynthesisConfig, VanillaConfig, dump_config
from .evaluation import accuracy
from .exceptions import ConfigurationError, SnapshotMismatch, UnsupportedModel
from .experiment import ExperimentContext, build_context
from .fusion import assert_frozen
from .logging_config import attach_run_log, get_logger
from .losses import kl_sim
from .metrics import IterationMetrics, MetricsLog
from .models import FrozenModel, save_weights, weight_digest
from .run_store import RunStore
from .synthesis import Synthesizer

logger = get_logger(__name__)


@dataclass(frozen=True)
class HeadSnapshot:
    """Copy of a classifier's final linear layer."""

    weight: torch.Tensor
    bias: Optional[torch.Tensor]
    class_count: int

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


def _head(student: nn.Module) -> nn.Linear:
    head = getattr(student, "head", None)
    if not isinstance(head, nn.Linear):
        raise UnsupportedModel("Student has no linear 'head' to snapshot")
    return head


def snapshot_head(student: nn.Module) -> HeadSnapshot:
    head = _head(student)
    return HeadSnapshot(
        weight=head.weight.detach().clone(),
        bias=head.bias.detach().clone() if head.bias is not None else None,
        class_count=head.out_features,
    )


def replace_head(student: nn.Module, class_count: int, seed: int = 0) -> nn.Linear:
    """Swap in a freshly initialized head with ``class_count`` outputs."""
    old = _head(student)
    head = nn.Linear(old.in_features, class_count, bias=old.bias is not None)
    generator = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(old.in_features)
    with torch.no_grad():
        head.weight.copy_((torch.rand(head.weight.shape, generator=generator) * 2 - 1) * bound)
        if head.bias is not None:
            head.bias.copy_((torch.rand(head.bias.shape, generator=generator) * 2 - 1) * bound)
    student.head = head.to(old.weight.device)
    return student.head


def restore_head(student: nn.Module, snap: HeadSnapshot) -> nn.Module:
    """Put the snapshotted head back; every other weight is left as trained.

    Raises:
        SnapshotMismatch: the student's head input width differs from the snapshot
    """
    head = _head(student)
    if head.in_features != snap.in_features:
        raise SnapshotMismatch(
            f"Head takes {head.in_features} features, snapshot has {snap.in_features}"
        )
    if head.out_features != snap.class_count or (head.bias is None) != (snap.bias is None):
        head = nn.Linear(snap.in_features, snap.class_count, bias=snap.bias is not None).to(head.weight.device)
        student.head = head
    with torch.no_grad():
        head.weight.copy_(snap.weight)
        if snap.bias is not None:
            head.bias.copy_(snap.bias)
    return student


@dataclass
class VanillaResult:
    student: nn.Module
    snapshot: HeadSnapshot
    metrics: MetricsLog


def vanilla_dfkd(
    student_source: FrozenModel,
    teacher: FrozenModel,
    synthesis: SynthesisConfig,
    vanilla: VanillaConfig,
    iterations: int,
    seed: int = 0,
    metrics: Optional[MetricsLog] = None,
    progress: bool = True,
) -> VanillaResult:
    """Distill ``teacher`` into an unfrozen copy of ``student_source``.

    The registered source model is never touched; its copy gets a
    teacher-wide head when the class counts differ.

    Returns:
        VanillaResult with the trained student and the pre-training head snapshot
    """
    device = student_source.device
    student = copy.deepcopy(student_source.module)
    student.requires_grad_(True)
    snapshot = snapshot_head(student)
    if snapshot.class_count != teacher.class_count:
        replace_head(student, teacher.class_count, seed)
        logger.info(f"Student head replaced: {snapshot.class_count} -> {teacher.class_count} classes")

    metrics = metrics if metrics is not None else MetricsLog()
    bank = DataBank(teacher.id)
    synthesizer = Synthesizer(teacher.id, teacher, student, synthesis, bank=bank, seed=seed, device=device)
    optimizer = torch.optim.Adam(student.parameters(), lr=vanilla.student_lr)
    rng = torch.Generator().manual_seed(int(seed) + 1)

    for k in tqdm(range(iterations), desc="Vanilla KD", disable=not progress):
        start = time.perf_counter()
        student.eval()
        synthesizer.synthesize_round(k)

        student.train()
        x = bank_sample(bank, vanilla.batch_size, rng)[0].to(device)
        with torch.no_grad():
            reference = teacher(x)
        loss = kl_sim(reference, student(x))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        value = float(loss.detach())
        metrics.append(IterationMetrics(
            iter=k,
            loss_B=value,
            loss_total=value,
            bank_sizes={bank.name: len(bank)},
            lr=optimizer.param_groups[0]["lr"],
            wall_ms=(time.perf_counter() - start) * 1000.0,
            student_digest=weight_digest(student),
        ))

    student.eval()
    assert_frozen(student_source)
    assert_frozen(teacher)
    return VanillaResult(student, snapshot, metrics)


def run_vanilla(cfg: ExperimentConfig, context: Optional[ExperimentContext] = None) -> pd.DataFrame:
    """Baseline run: distill, evaluate on the receiver task, restore the head, evaluate on the core task.

    Returns:
        One-row table with ``acc_A_before``, ``acc_A`` (head restored) and ``acc_B``
    """
    if cfg.regime != "vanilla":
        raise ConfigurationError(f"run_vanilla expects regime 'vanilla', got '{cfg.regime}'")

    store = RunStore(cfg.output_dir)
    attach_run_log(store.run_dir)
    store.write_config(dump_config(cfg))
    store.reset_metrics()
    context = context or build_context(cfg)
    store.write_seeds(context.seeds)

    core, teacher = context.core, context.receivers[0]
    core_test = context.core_dataset().test
    receiver_test = context.receiver_dataset(0).test
    batch = cfg.evaluation.batch_size
    before = accuracy(core, core_test, batch)

    result = vanilla_dfkd(
        core, teacher, cfg.synthesis, cfg.vanilla,
        iterations=cfg.vanilla.iterations or cfg.storing.iterations,
        seed=context.seeds["synthesis"],
        metrics=MetricsLog(store),
        progress=cfg.storing.progress,
    )
    acc_b = accuracy(result.student, receiver_test, batch)
    restore_head(result.student, result.snapshot)
    acc_a = accuracy(result.student, core_test, batch)
    save_weights(result.student, store.run_dir / "student.kiopw")

    table = pd.DataFrame([{
        "regime": "vanilla",
        "core": core.id,
        "receiver": teacher.id,
        "acc_A_before": before,
        "acc_A": acc_a,
        "acc_B": acc_b,
        "acc_A_raw": accuracy(core, core_test, batch),
    }])
    store.write_table(table, "eval.csv")
    logger.info(f"Vanilla KD: Acc.A {before:.4f} -> {acc_a:.4f} (head restored), Acc.B {acc_b:.4f}")
    return table
