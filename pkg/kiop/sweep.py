"""Prompt-core size sweep.

Trains one prompt per core side with the periphery side held fixed and
collects the evaluation rows into a single table. A core side that reaches
the periphery collapses to a single undivided ring, labelled with a ``*``.
With ``storing.eval_every`` set, the per-point accuracy curves are written
to ``sweep_dynamics.csv`` as well.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from .config import ExperimentConfig, validate_config, with_partition
from .evaluation import evaluate_prompt
from .exceptions import ConfigurationError
from .logging_config import get_logger
from .run_store import RunStore
from .storing import train

logger = get_logger(__name__)


def sweep_points(cfg: ExperimentConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """``(label, sides)`` for every configured core side."""
    hole = cfg.partition.sides[0]
    periphery = cfg.sweep.periphery_side
    points = []
    for core in cfg.sweep.core_sides:
        if core >= periphery:
            points.append((f"{periphery}*", (hole, periphery)))
        else:
            points.append((str(core), (hole, core, periphery)))
    return points


def run_sweep_point(
    config_data: Dict[str, Any], label: str, sides: Tuple[int, ...]
) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Train and evaluate one sweep point; picklable for process pools.

    Returns:
        The evaluation row and the accuracy curve recorded during training
        (empty unless ``storing.eval_every`` is set)
    """
    base = validate_config(config_data)
    updates: Dict[str, Any] = {"output_dir": str(Path(base.output_dir) / f"core_{label.rstrip('*')}")}
    if base.sweep.iterations:
        updates["storing"] = {"iterations": base.sweep.iterations}
    cfg = with_partition(base, sides, **updates)

    result = train(cfg)
    table = evaluate_prompt(result.context, result.prompt)
    RunStore(cfg.output_dir).write_table(table, "eval.csv")
    row = table.iloc[0].to_dict()
    last = result.trainer.metrics.last()
    row.update({
        "core_side": label,
        "final_loss": last.loss_total if last else float("nan"),
        "output_dir": cfg.output_dir,
    })
    curve = [dict(point, core_side=label) for point in result.trainer.metrics.dynamics()]
    return row, curve


def run_sweep(cfg: ExperimentConfig, jobs: Optional[int] = None) -> pd.DataFrame:
    """Run every sweep point, sequentially or across ``jobs`` processes.

    Returns:
        One row per core side, in configured order

    Raises:
        ConfigurationError: the regime has no single core/periphery split
    """
    if cfg.regime in ("multi", "vanilla"):
        raise ConfigurationError(f"Core-size sweep is not defined for regime '{cfg.regime}'")
    jobs = jobs or cfg.sweep.jobs
    points = sweep_points(cfg)
    data = cfg.model_dump(mode="json", by_alias=True)
    logger.info(f"Sweeping {len(points)} partitions with {jobs} job(s): {[p[0] for p in points]}")

    rows: Dict[str, Dict[str, Any]] = {}
    curves: Dict[str, List[Dict[str, Any]]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(run_sweep_point, data, label, sides): label for label, sides in points}
            for future in as_completed(futures):
                label = futures[future]
                rows[label], curves[label] = future.result()
    else:
        for label, sides in points:
            rows[label], curves[label] = run_sweep_point(data, label, sides)

    columns = ["core_side", "partition", "trainable_params", "acc_A", "acc_B"]
    table = pd.DataFrame([rows[label] for label, _ in points])
    table = table[columns + [c for c in table.columns if c not in columns]]
    store = RunStore(cfg.output_dir)
    store.write_table(table, "sweep.csv")

    dynamics = [point for label, _ in points for point in curves[label]]
    if dynamics:
        frame = pd.DataFrame(dynamics)
        frame = frame[["core_side", "iter"] + [c for c in frame.columns if c not in ("core_side", "iter")]]
        store.write_table(frame, "sweep_dynamics.csv")
        logger.info(f"Wrote {len(frame)} accuracy-curve points to sweep_dynamics.csv")
    return table
