"""Tests for run-directory persistence and the metrics log."""

import numpy as np
import pandas as pd
import pytest
import torch

from kiop.bank import DataBank
from kiop.exceptions import CorruptCheckpoint
from kiop.metrics import IterationMetrics, MetricsLog
from kiop.prompt import init_prompt, make_partition
from kiop.run_store import RunStore


@pytest.fixture
def store(tmp_path):
    return RunStore(tmp_path / "run")


class TestArtifacts:
    """Config, seeds, prompt and tables."""

    def test_creates_directory(self, tmp_path):
        RunStore(tmp_path / "a" / "b")
        assert (tmp_path / "a" / "b").is_dir()

    def test_config_text_verbatim(self, store):
        store.write_config("regime: kiop-bf\n")
        assert store.config_path.read_text(encoding="utf-8") == "regime: kiop-bf\n"
        assert not list(store.run_dir.glob("*.tmp"))

    def test_seeds(self, store):
        assert store.read_seeds() is None
        store.write_seeds({"global": 7, "mapping": 1016}, regime="kiop-t")
        seeds = store.read_seeds()
        assert seeds["global"] == 7
        assert seeds["regime"] == "kiop-t"
        assert "timestamp" in seeds

    def test_prompt_round_trip(self, store):
        prompt = init_prompt(make_partition([32, 36, 64]), "uniform", seed=2)
        path = store.save_prompt(prompt)
        assert path.name == "prompt.kiop"
        loaded = store.load_prompt()
        assert all(torch.equal(a, b) for a, b in zip(prompt.ring_params, loaded.ring_params))

    def test_missing_prompt(self, store):
        with pytest.raises(CorruptCheckpoint):
            store.load_prompt()

    def test_overwrite_replaces(self, store):
        store.write_config("first\n")
        store.write_config("second\n")
        assert store.config_path.read_text(encoding="utf-8") == "second\n"

    def test_write_table(self, store):
        path = store.write_table(pd.DataFrame({"side": [36, 48], "acc": [0.5, 0.25]}), "sweep.csv")
        frame = pd.read_csv(path)
        assert frame["side"].tolist() == [36, 48]


class TestMetricsFile:
    """metrics.jsonl append and read."""

    def test_append_and_frame(self, store):
        store.append_metrics({"iter": 0, "loss_total": 1.5})
        store.append_metrics({"iter": 1, "loss_total": 0.5})
        assert [r["iter"] for r in store.read_metrics()] == [0, 1]
        frame = store.metrics_frame()
        assert frame["loss_total"].tolist() == [1.5, 0.5]

    def test_reset(self, store):
        store.append_metrics({"iter": 0})
        store.reset_metrics()
        assert store.read_metrics() == []
        assert store.metrics_frame().empty


class TestBankShards:
    """Synthetic bank persistence."""

    def test_round_trip_in_round_order(self, store):
        bank = DataBank("A")
        second = bank.append(torch.ones(2, 3, 4, 4), torch.tensor([1, 2]), 1)
        first = bank.append(torch.zeros(3, 3, 4, 4), torch.tensor([0, 0, 5]), 0)
        store.save_bank_entry("A", second)
        store.save_bank_entry("A", first)

        loaded = store.load_bank("A")
        assert len(loaded) == 5
        assert [entry.round_index for entry in loaded.entries] == [0, 1]
        assert loaded.entries[0].targets.tolist() == [0, 0, 5]
        assert torch.equal(loaded.entries[1].images, torch.ones(2, 3, 4, 4))

    def test_targets_stored_as_int32(self, store):
        entry = DataBank("B").append(torch.zeros(1, 3, 2, 2), torch.tensor([9]), 0)
        path = store.save_bank_entry("B", entry)
        with np.load(path) as data:
            assert data["targets"].dtype == np.int32

    def test_missing_bank_is_empty(self, store):
        assert len(store.load_bank("nothing")) == 0

    def test_corrupt_shard(self, store):
        store.bank_dir("A").mkdir(parents=True)
        (store.bank_dir("A") / "shard_000000.npz").write_bytes(b"not an archive")
        with pytest.raises(CorruptCheckpoint):
            store.load_bank("A")


class TestMetricsLog:
    """In-memory history mirrored to the store."""

    def test_mirrors_to_store(self, store):
        log = MetricsLog(store)
        log.append(IterationMetrics(iter=0, loss_A=0.5, loss_B=0.25, loss_total=0.75, bank_sizes={"A": 4}))
        assert len(log) == 1
        assert store.read_metrics()[0]["bank_sizes"] == {"A": 4}

    def test_empty_summary(self):
        log = MetricsLog()
        assert log.get_summary() == {"iterations": 0}
        assert log.last() is None

    def test_summary(self):
        log = MetricsLog()
        for i, total in enumerate((3.0, 2.0, 1.0)):
            log.append(IterationMetrics(iter=i, loss_total=total, wall_ms=10.0))
        summary = log.get_summary()
        assert summary["iterations"] == 3
        assert summary["first_loss_total"] == 3.0
        assert summary["final_loss_total"] == 1.0
        assert summary["wall_ms_total"] == 30.0
        assert summary["summary_text"].startswith("iter 2 | A 0.0000")

    def test_dynamics_single_receiver(self):
        log = MetricsLog()
        log.append(IterationMetrics(iter=0))
        log.append(IterationMetrics(iter=1, acc_A=0.9, acc_B={"b": 0.4}))
        assert log.dynamics() == [{"iter": 1, "acc_A": 0.9, "acc_B": 0.4}]
        summary = log.get_summary()
        assert summary["final_acc_A"] == 0.9
        assert summary["final_acc_B"] == {"b": 0.4}

    def test_dynamics_several_receivers(self):
        log = MetricsLog()
        log.append(IterationMetrics(iter=4, acc_A=0.5, acc_B={"b": 0.2, "c": 0.3}))
        assert log.dynamics() == [{"iter": 4, "acc_A": 0.5, "acc_B_b": 0.2, "acc_B_c": 0.3}]

    def test_no_accuracy_in_summary_without_evaluation(self):
        log = MetricsLog()
        log.append(IterationMetrics(iter=0))
        assert "final_acc_A" not in log.get_summary()
        assert log.dynamics() == []

    def test_records_are_a_copy(self):
        log = MetricsLog()
        log.append(IterationMetrics(iter=0))
        log.records.clear()
        assert len(log) == 1
