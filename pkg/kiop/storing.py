"""Knowledge storing: the KiOP trainer.

Each outer iteration runs one synthesize round per (teacher, chain) pair and
then updates the prompt, and only the prompt, to minimize

    alpha * L_A + beta * sum_i w_i * L_B_i

where ``L_A`` keeps the core model's behaviour on its own data through ring 1
and each ``L_B_i`` teaches the prompted core model to imitate receiver ``i``
through rings ``1..depth_i``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch.utils.data import TensorDataset
from tqdm import tqdm

from .bank import DataBank, bank_sample
from .config import ExperimentConfig, StoringConfig, SynthesisConfig, dump_config
from .constants import DEFAULT_EVAL_BATCH
from .evaluation import accuracy
from .exceptions import ConfigurationError, EmptyBank, ShapeMismatch
from .experiment import ExperimentContext, build_context, receiver_depths
from .fusion import LabelMapping, PromptedChain, assert_all_frozen, sma_forward, smb_forward
from .logging_config import attach_run_log, get_logger
from .losses import kl_sim
from .metrics import IterationMetrics, MetricsLog
from .models import FrozenModel
from .prompt import VisualPrompt, fit_to_hole, init_prompt
from .run_store import RunStore
from .synthesis import Synthesizer

logger = get_logger(__name__)

Source = Union[DataBank, TensorDataset]


def draw_batch(
    source: Source,
    batch_size: int,
    generator: Optional[torch.Generator],
    exact_sum: bool = False,
) -> torch.Tensor:
    """Images for one storing step: a uniform sample, or everything in exact-sum mode."""
    if isinstance(source, DataBank):
        if exact_sum:
            return source.tensors()[0]
        return bank_sample(source, batch_size, generator)[0]
    images = source.tensors[0]
    if images.shape[0] == 0:
        raise EmptyBank("real data")
    if exact_sum:
        return images
    idx = torch.randint(0, images.shape[0], (batch_size,), generator=generator)
    return images[idx]


def storing_loss_A(
    bank_a: Source,
    model_a: FrozenModel,
    prompt: VisualPrompt,
    batch_size: int,
    rng: Optional[torch.Generator] = None,
    exact_sum: bool = False,
) -> torch.Tensor:
    """KL between the raw core model and the core model behind ring 1.

    Raises:
        EmptyBank: ``bank_a`` is empty
    """
    x = draw_batch(bank_a, batch_size, rng, exact_sum).to(model_a.device)
    with torch.no_grad():
        reference = model_a(x)
    prompted = sma_forward(fit_to_hole(x, prompt.partition.hole_side), model_a, prompt)
    return kl_sim(reference, prompted, reduction="sum" if exact_sum else "batchmean")


def storing_loss_B(
    bank_b: Source,
    model_a: FrozenModel,
    model_b: FrozenModel,
    prompt: VisualPrompt,
    mapping: LabelMapping,
    depth: int,
    batch_size: int,
    rng: Optional[torch.Generator] = None,
    exact_sum: bool = False,
) -> torch.Tensor:
    """KL between a receiver model and the mapped, prompted core model.

    Raises:
        EmptyBank: ``bank_b`` is empty
        ShapeMismatch: mapping width differs from the receiver's class count
    """
    if mapping.k_tgt != model_b.class_count:
        raise ShapeMismatch("label mapping width", model_b.class_count, mapping.k_tgt)
    x = draw_batch(bank_b, batch_size, rng, exact_sum).to(model_a.device)
    with torch.no_grad():
        reference = model_b(x)
    prompted = smb_forward(fit_to_hole(x, prompt.partition.hole_side), model_a, prompt, mapping, depth)
    return kl_sim(reference, prompted, reduction="sum" if exact_sum else "batchmean")


@dataclass
class ReceiverChain:
    """A receiver model with its mapping, depth, weight and bank."""

    model: FrozenModel
    mapping: LabelMapping
    depth: int
    weight: float
    bank: DataBank
    synthesizer: Synthesizer

    @property
    def id(self) -> str:
        return self.model.id


@dataclass
class RunState:
    prompt: VisualPrompt
    banks: Dict[str, DataBank]
    iteration: int = 0
    metrics: List[IterationMetrics] = field(default_factory=list)


class KiopTrainer:
    """Alternates synthesis rounds and prompt-update steps for every KiOP regime.

    ``kiop-t`` drops the core term (alpha = 0). ``kiop-b``, or any regime with
    ``real_data_a`` set, feeds real core-model data to ``L_A`` instead of a
    synthetic bank. ``kiop-bf`` and ``multi`` synthesize for every pair.
    """

    def __init__(
        self,
        core: FrozenModel,
        receivers: Sequence[FrozenModel],
        prompt: VisualPrompt,
        synthesis: SynthesisConfig,
        storing: StoringConfig,
        *,
        regime: str = "kiop-bf",
        mappings: Sequence[LabelMapping],
        depths: Optional[Sequence[int]] = None,
        weights: Optional[Sequence[float]] = None,
        real_data_a: Optional[TensorDataset] = None,
        synthesis_seed: int = 0,
        storing_seed: int = 0,
        metrics: Optional[MetricsLog] = None,
        store: Optional[RunStore] = None,
        eval_splits: Optional[Tuple[TensorDataset, Sequence[TensorDataset]]] = None,
        eval_batch_size: int = DEFAULT_EVAL_BATCH,
    ):
        if len(mappings) != len(receivers):
            raise ConfigurationError(f"{len(receivers)} receivers but {len(mappings)} label mappings")
        if storing.eval_every and eval_splits is None:
            raise ConfigurationError(
                "storing.eval_every is set but no test splits were supplied",
                help_text="Pass eval_splits (core test split, one test split per receiver) or set eval_every to 0.",
            )
        self.core = core
        self.prompt = prompt
        self.storing = storing
        self.regime = regime
        self.alpha = 0.0 if regime == "kiop-t" else storing.alpha
        self.beta = storing.beta
        self.metrics = metrics if metrics is not None else MetricsLog(store)
        self.store = store
        self.iteration = 0
        self.rng = torch.Generator().manual_seed(int(storing_seed))
        self.eval_splits = eval_splits
        self.eval_batch_size = eval_batch_size
        device = core.device

        depths = list(depths) if depths is not None else receiver_depths(regime, prompt.partition, len(receivers))
        weights = list(weights) if weights is not None else [1.0] * len(receivers)

        self.use_real_a = regime == "kiop-b" or storing.real_data_a
        self.source_a: Optional[Source] = None
        self.synthesizer_a: Optional[Synthesizer] = None
        if self.alpha > 0:
            if self.use_real_a:
                if real_data_a is None:
                    raise ConfigurationError(
                        "Real core-model data requested but none supplied",
                        help_text="KiOP-B and real_data_a need the core model's training split.",
                    )
                self.source_a = real_data_a
            else:
                bank_a = DataBank(core.id)
                self.synthesizer_a = Synthesizer(
                    core.id, core, PromptedChain(core, prompt, 1), synthesis,
                    bank=bank_a, seed=synthesis_seed, device=device,
                )
                self.source_a = bank_a

        self.receivers: List[ReceiverChain] = []
        for i, (model, mapping, depth, weight) in enumerate(zip(receivers, mappings, depths, weights)):
            bank = DataBank(model.id)
            chain = PromptedChain(core, prompt, depth, mapping)
            synthesizer = Synthesizer(
                model.id, model, chain, synthesis, bank=bank, seed=synthesis_seed + i + 1, device=device,
            )
            self.receivers.append(ReceiverChain(model, mapping, depth, weight, bank, synthesizer))

        self.optimizer = torch.optim.Adam(prompt.parameters(), lr=storing.prompt_lr)
        self.scheduler = (
            torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=storing.iterations)
            if storing.cosine_decay else None
        )
        self.frozen_models = [core, *receivers]

    # -- state -------------------------------------------------------------

    @property
    def banks(self) -> Dict[str, DataBank]:
        banks = {r.id: r.bank for r in self.receivers}
        if isinstance(self.source_a, DataBank):
            banks = {self.core.id: self.source_a, **banks}
        return banks

    @property
    def synthesizers(self) -> List[Synthesizer]:
        found = [self.synthesizer_a] if self.synthesizer_a is not None else []
        return found + [r.synthesizer for r in self.receivers]

    @property
    def state(self) -> RunState:
        return RunState(self.prompt, self.banks, self.iteration, self.metrics.records)

    # -- iteration ---------------------------------------------------------

    def synthesize(self, round_index: int) -> None:
        """One synthesize round for every synthetic pair."""
        jobs = self.synthesizers
        if self.storing.concurrent_synthesis and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as executor:
                futures = {executor.submit(s.synthesize_round, round_index): s.name for s in jobs}
                for future in as_completed(futures):
                    future.result()
        else:
            for synthesizer in jobs:
                synthesizer.synthesize_round(round_index)

        if self.store is not None and self.storing.persist_banks:
            for name, bank in self.banks.items():
                self.store.save_bank_entry(name, bank.entries[-1])

    def storing_step(self) -> Tuple[float, Dict[str, float], float]:
        """One gradient step on the prompt.

        Returns:
            ``(loss_A, per-receiver L_B, sum_i w_i * L_B_i)``
        """
        self.optimizer.zero_grad(set_to_none=True)
        objective: Optional[torch.Tensor] = None
        cfg = self.storing

        loss_a = 0.0
        if self.source_a is not None:
            term = storing_loss_A(self.source_a, self.core, self.prompt, cfg.batch_size, self.rng, cfg.exact_sum)
            loss_a = float(term.detach())
            objective = self.alpha * term

        receiver_losses: Dict[str, float] = {}
        loss_b = 0.0
        for receiver in self.receivers:
            active = self.beta > 0 and receiver.weight > 0
            with torch.set_grad_enabled(active):
                term = storing_loss_B(
                    receiver.bank, self.core, receiver.model, self.prompt, receiver.mapping,
                    receiver.depth, cfg.batch_size, self.rng, cfg.exact_sum,
                )
            receiver_losses[receiver.id] = float(term.detach())
            loss_b += receiver.weight * receiver_losses[receiver.id]
            if active:
                weighted = self.beta * receiver.weight * term
                objective = weighted if objective is None else objective + weighted

        if objective is not None and objective.requires_grad:
            objective.backward()
            self.optimizer.step()
        return loss_a, receiver_losses, loss_b

    def evaluate(self) -> Tuple[float, Dict[str, float]]:
        """Acc.A through ring 1 and Acc.B of every receiver chain on the test splits."""
        core_test, receiver_tests = self.eval_splits
        acc_a = accuracy(PromptedChain(self.core, self.prompt, 1), core_test, self.eval_batch_size)
        acc_b = {
            r.id: accuracy(PromptedChain(self.core, self.prompt, r.depth, r.mapping), split, self.eval_batch_size)
            for r, split in zip(self.receivers, receiver_tests)
        }
        return acc_a, acc_b

    def step(self) -> IterationMetrics:
        """One outer iteration: synthesis, ``repeats`` storing steps, frozen check, metrics."""
        k = self.iteration
        start = time.perf_counter()
        self.synthesize(k)

        lr = self.optimizer.param_groups[0]["lr"]
        for _ in range(self.storing.repeats):
            loss_a, receiver_losses, loss_b = self.storing_step()
        if self.scheduler is not None:
            self.scheduler.step()

        if (k + 1) % self.storing.verify_frozen_every == 0:
            assert_all_frozen(self.frozen_models)

        record = IterationMetrics(
            iter=k,
            loss_A=loss_a,
            loss_B=loss_b,
            loss_total=self.alpha * loss_a + self.beta * loss_b,
            bank_sizes={name: len(bank) for name, bank in self.banks.items()},
            lr=lr,
            wall_ms=(time.perf_counter() - start) * 1000.0,
            receiver_losses=receiver_losses,
        )
        if self.storing.eval_every and (k + 1) % self.storing.eval_every == 0:
            record.acc_A, record.acc_B = self.evaluate()
        self.metrics.append(record)
        self.iteration += 1
        return record

    def run(self, iterations: Optional[int] = None) -> RunState:
        total = iterations if iterations is not None else self.storing.iterations
        if self.storing.concurrent_synthesis:
            logger.warning("Concurrent synthesis enabled: runs are not guaranteed to be bit-reproducible")
        for _ in tqdm(range(total), desc=f"KiOP {self.regime}", disable=not self.storing.progress):
            record = self.step()
            if record.iter % 10 == 0:
                logger.info(record.format_summary())
        assert_all_frozen(self.frozen_models)
        return self.state


def kiop_step(trainer: KiopTrainer) -> RunState:
    """Advance ``trainer`` by one outer iteration and return the new state."""
    trainer.step()
    return trainer.state


@dataclass
class TrainResult:
    prompt: VisualPrompt
    checkpoint_path: Path
    metrics_path: Path
    trainer: KiopTrainer
    context: ExperimentContext


def build_trainer(
    cfg: ExperimentConfig,
    context: ExperimentContext,
    store: Optional[RunStore] = None,
) -> KiopTrainer:
    """Fresh prompt plus trainer wired from a loaded context."""
    seeds = context.seeds
    prompt = init_prompt(
        context.partition, cfg.partition.init, seed=seeds["global"],
        low=cfg.partition.init_low, high=cfg.partition.init_high,
    ).to(context.device)
    uses_real = cfg.regime == "kiop-b" or cfg.storing.real_data_a
    real_data = context.core_dataset().train if uses_real and cfg.regime != "kiop-t" else None
    eval_splits = None
    if cfg.storing.eval_every:
        eval_splits = (
            context.core_dataset().test,
            [context.receiver_dataset(i).test for i in range(len(context.receivers))],
        )
    return KiopTrainer(
        context.core,
        context.receivers,
        prompt,
        cfg.synthesis,
        cfg.storing,
        regime=cfg.regime,
        mappings=context.mappings,
        depths=context.depths,
        weights=[spec.weight for spec in cfg.receivers],
        real_data_a=real_data,
        synthesis_seed=seeds["synthesis"],
        storing_seed=seeds["storing"],
        metrics=MetricsLog(store),
        store=store,
        eval_splits=eval_splits,
        eval_batch_size=cfg.evaluation.batch_size,
    )


def train(cfg: ExperimentConfig, context: Optional[ExperimentContext] = None) -> TrainResult:
    """Run a KiOP regime end to end and write the run directory.

    Returns:
        TrainResult with the final prompt, checkpoint path and metrics path
    """
    if cfg.regime == "vanilla":
        raise ConfigurationError("Regime 'vanilla' is run by kiop.baselines.run_vanilla")

    store = RunStore(cfg.output_dir)
    attach_run_log(store.run_dir)
    config_text = dump_config(cfg)
    store.write_config(config_text)
    store.reset_metrics()
    logger.info(f"Resolved configuration:\n{config_text}")

    context = context or build_context(cfg)
    store.write_seeds(context.seeds, mappings={m.seed: list(m.indices) for m in context.mappings})

    trainer = build_trainer(cfg, context, store)
    trainer.run()
    checkpoint = store.save_prompt(trainer.prompt)
    summary = trainer.metrics.get_summary()
    logger.info(f"Training finished: {summary.get('summary_text', '')}; checkpoint {checkpoint}")
    return TrainResult(trainer.prompt, checkpoint, store.metrics_path, trainer, context)


def train_multi(cfg: ExperimentConfig, context: Optional[ExperimentContext] = None) -> TrainResult:
    """Multi-receiver training; receiver ``i`` composes rings ``1..i+1``.

    Raises:
        ConfigurationError: regime is not ``multi``
        InvalidPartition: ring count is not receivers + 1
    """
    if cfg.regime != "multi":
        raise ConfigurationError(f"train_multi expects regime 'multi', got '{cfg.regime}'")
    return train(cfg, context)
