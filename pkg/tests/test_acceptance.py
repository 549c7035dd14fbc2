"""Acceptance runs on the bundled toy experiment files.

These pretrain real source models and run the full iteration counts, which
takes hours on CPU. Enable with ``pytest --run-acceptance``.
"""

import pytest

from kiop.baselines import run_vanilla
from kiop.config import deep_merge, read_config_file, validate_config
from kiop.evaluation import evaluate_prompt
from kiop.pretrain import pretrain_models
from kiop.resources import resource_path
from kiop.storing import train, train_multi

pytestmark = pytest.mark.acceptance

CHANCE = 0.1


def bundled(name, root, **updates):
    """A bundled experiment file with weights and outputs moved under ``root``."""
    data = read_config_file(str(resource_path("configs", "experiments", f"{name}.yaml")))
    for spec in [data["core"], *data["receivers"]]:
        spec["weights"] = str(root / "zoo" / f"{spec['id']}.kiopw")
    data["output_dir"] = str(root / name)
    return validate_config(deep_merge(data, dict(updates, storing=dict(updates.get("storing", {}), progress=False))))


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    """Workspace holding the three toy source models, each above 95% test accuracy."""
    root = tmp_path_factory.mktemp("acceptance")
    table = pretrain_models(bundled("toy_multi", root, pretrain={"epochs": 10}), force=True)
    assert len(table) == 3
    assert (table["test_acc"] >= 0.95).all(), table.to_string()
    return root


@pytest.fixture(scope="module")
def bilateral(root):
    """Evaluation rows of the data-free and real-data two-model runs, same seeds."""
    rows = {}
    for name in ("toy_bf", "toy_b"):
        result = train(bundled(name, root))
        rows[name] = evaluate_prompt(result.context, result.prompt).iloc[0]
    return rows


class TestTwoModelTransfer:
    """Partition [32, 36, 128], 500 iterations, batch 64."""

    def test_data_free_beats_three_times_chance(self, bilateral):
        row = bilateral["toy_bf"]
        assert row["partition"] == "32-36-128"
        assert row["acc_A"] >= 3 * CHANCE
        assert row["acc_B"] >= 3 * CHANCE

    def test_data_free_comparable_to_real_data(self, bilateral):
        data_free, real = bilateral["toy_bf"], bilateral["toy_b"]
        assert abs(data_free["acc_A"] - real["acc_A"]) <= 0.10
        assert abs(data_free["acc_B"] - real["acc_B"]) <= 0.10


class TestForgettingContrast:
    """Unfrozen distillation forgets the core task; the prompt leaves the core model untouched."""

    def test_vanilla_head_restored_accuracy_drops(self, root, bilateral):
        row = run_vanilla(bundled("toy_vanilla", root)).iloc[0]
        assert row["acc_A_before"] - row["acc_A"] >= 0.20
        assert bilateral["toy_bf"]["acc_A_raw"] == row["acc_A_before"]


class TestThreeModelStoring:
    """Two receivers on [32, 36, 128, 224] for 200 iterations."""

    def test_all_accuracies_above_chance(self, root):
        result = train_multi(bundled("toy_multi", root))
        assert [r.depth for r in result.trainer.receivers] == [2, 3]
        row = evaluate_prompt(result.context, result.prompt).iloc[0]
        assert row["acc_A"] > CHANCE
        assert row["acc_B1"] > CHANCE
        assert row["acc_B2"] > CHANCE
