"""Run-directory persistence.

Every artifact of a run (config, seeds, metrics, prompt checkpoint, bank
shards, evaluation tables) is written with file locking and atomic
temp-then-move replacement so a crash never leaves a half-written file.
"""

from __future__ import annotations

import json
import os
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch
from filelock import FileLock

from .bank import BankEntry, DataBank
from .exceptions import CorruptCheckpoint
from .logging_config import get_logger
from .prompt import VisualPrompt, encode_prompt, load_prompt

logger = get_logger(__name__)


class RunStore:
    """Owns the files of one run directory."""

    CONFIG_FILE = "config.yaml"
    METRICS_FILE = "metrics.jsonl"
    PROMPT_FILE = "prompt.kiop"
    SEEDS_FILE = "seeds.json"
    LOG_FILE = "run.log"
    BANKS_DIR = "banks"

    def __init__(self, run_dir: Union[str, Path]):
        """Initialize the store, creating the directory if needed.

        Args:
            run_dir: Output directory of the run
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.run_dir / ".kiop.lock"), timeout=30)

    @property
    def config_path(self) -> Path:
        return self.run_dir / self.CONFIG_FILE

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / self.METRICS_FILE

    @property
    def prompt_path(self) -> Path:
        return self.run_dir / self.PROMPT_FILE

    @property
    def seeds_path(self) -> Path:
        return self.run_dir / self.SEEDS_FILE

    def _atomic_write(self, target: Path, data: bytes) -> None:
        target.parent.mkdir(parents=True, exist_ok=True)
        temp = target.with_name(target.name + ".tmp")
        with self._lock:
            try:
                temp.write_bytes(data)
                if os.name == "nt" and target.exists():
                    target.unlink()
                shutil.move(str(temp), str(target))
            except Exception as e:
                if temp.exists():
                    try:
                        temp.unlink()
                    except OSError as cleanup_error:
                        logger.warning(f"Failed to cleanup temp file {temp}: {cleanup_error}")
                raise RuntimeError(f"Failed to write {target}: {e}") from e

    def write_config(self, text: str) -> Path:
        self._atomic_write(self.config_path, text.encode("utf-8"))
        return self.config_path

    def write_seeds(self, seeds: Dict[str, int], **extra: Any) -> Path:
        record = {"timestamp": datetime.now().isoformat(), **seeds, **extra}
        self._atomic_write(self.seeds_path, json.dumps(record, indent=2).encode("utf-8"))
        return self.seeds_path

    def read_seeds(self) -> Optional[Dict[str, Any]]:
        if not self.seeds_path.exists():
            return None
        with self._lock:
            return json.loads(self.seeds_path.read_text(encoding="utf-8"))

    def save_prompt(self, prompt: VisualPrompt, path: Optional[Path] = None) -> Path:
        target = Path(path) if path is not None else self.prompt_path
        data = encode_prompt(prompt)
        self._atomic_write(target, data)
        logger.debug(f"Prompt checkpoint saved: {target} ({len(data):,} bytes)")
        return target

    def load_prompt(self, path: Optional[Path] = None) -> VisualPrompt:
        target = Path(path) if path is not None else self.prompt_path
        if not target.exists():
            raise CorruptCheckpoint(str(target), "no prompt checkpoint in run directory")
        with self._lock:
            return load_prompt(target)

    # -- metrics -----------------------------------------------------------

    def append_metrics(self, record: Dict[str, Any]) -> None:
        """Append one JSON line to ``metrics.jsonl``."""
        line = json.dumps(record, sort_keys=False) + "\n"
        with self._lock:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(line)

    def read_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_path.exists():
            return []
        with self._lock:
            with open(self.metrics_path, "r", encoding="utf-8") as f:
                return [json.loads(line) for line in f if line.strip()]

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.read_metrics())

    def reset_metrics(self) -> None:
        with self._lock:
            if self.metrics_path.exists():
                self.metrics_path.unlink()

    # -- tables ------------------------------------------------------------

    def write_table(self, df: pd.DataFrame, name: str) -> Path:
        target = self.run_dir / name
        self._atomic_write(target, df.to_csv(index=False).encode("utf-8"))
        logger.info(f"Wrote {target}")
        return target

    # -- banks -------------------------------------------------------------

    def bank_dir(self, pair: str) -> Path:
        return self.run_dir / self.BANKS_DIR / pair

    def save_bank_entry(self, pair: str, entry: BankEntry) -> Path:
        """Persist one committed batch as ``banks/<pair>/shard_<round>.npz``."""
        target = self.bank_dir(pair) / f"shard_{entry.round_index:06d}.npz"
        target.parent.mkdir(parents=True, exist_ok=True)
        temp = target.with_name(target.name + ".tmp.npz")
        with self._lock:
            np.savez_compressed(
                temp,
                images=entry.images.numpy().astype(np.float32),
                targets=entry.targets.numpy().astype(np.int32),
                round_index=np.int64(entry.round_index),
            )
            shutil.move(str(temp), str(target))
        return target

    def load_bank(self, pair: str) -> DataBank:
        """Rebuild a bank from its shards in round order."""
        bank = DataBank(pair)
        for shard in sorted(self.bank_dir(pair).glob("shard_*.npz")):
            try:
                with np.load(shard) as data:
                    bank.append(
                        torch.from_numpy(data["images"]),
                        torch.from_numpy(data["targets"]),
                        int(data["round_index"]),
                    )
            except (OSError, KeyError, ValueError) as e:
                raise CorruptCheckpoint(str(shard), str(e)) from e
        return bank
