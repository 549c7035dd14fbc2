"""Per-iteration training metrics."""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from .logging_config import get_logger
from .run_store import RunStore

logger = get_logger(__name__)


@dataclass
class IterationMetrics:
    """One outer iteration of the storing loop."""

    iter: int
    loss_A: float = 0.0
    loss_B: float = 0.0
    loss_total: float = 0.0
    bank_sizes: Dict[str, int] = field(default_factory=dict)
    lr: float = 0.0
    wall_ms: float = 0.0
    receiver_losses: Dict[str, float] = field(default_factory=dict)
    student_digest: Optional[str] = None
    acc_A: Optional[float] = None
    acc_B: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def format_summary(self) -> str:
        """Format like ``iter 12 | A 0.0123 | B 0.4567 | total 0.4690 | 812 ms``."""
        text = (
            f"iter {self.iter} | A {self.loss_A:.4f} | B {self.loss_B:.4f} | "
            f"total {self.loss_total:.4f} | lr {self.lr:.2e} | {self.wall_ms:.0f} ms"
        )
        if self.acc_A is not None:
            text += f" | Acc.A {self.acc_A:.4f}"
        for name, value in self.acc_B.items():
            text += f" | Acc.B[{name}] {value:.4f}"
        return text


class MetricsLog:
    """Thread-safe in-memory metrics history, mirrored to ``metrics.jsonl`` when a store is attached."""

    def __init__(self, store: Optional[RunStore] = None):
        self._lock = threading.Lock()
        self._records: List[IterationMetrics] = []
        self.store = store

    def append(self, record: IterationMetrics) -> None:
        with self._lock:
            self._records.append(record)
        if self.store is not None:
            self.store.append_metrics(record.to_dict())
        logger.debug(record.format_summary())

    @property
    def records(self) -> List[IterationMetrics]:
        with self._lock:
            return list(self._records)

    def last(self) -> Optional[IterationMetrics]:
        with self._lock:
            return self._records[-1] if self._records else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def get_summary(self) -> Dict:
        with self._lock:
            if not self._records:
                return {"iterations": 0}
            first, last = self._records[0], self._records[-1]
            summary = {
                "iterations": len(self._records),
                "first_loss_total": first.loss_total,
                "final_loss_total": last.loss_total,
                "final_loss_A": last.loss_A,
                "final_loss_B": last.loss_B,
                "wall_ms_total": sum(r.wall_ms for r in self._records),
                "summary_text": last.format_summary(),
            }
            evaluated = [r for r in self._records if r.acc_A is not None or r.acc_B]
            if evaluated:
                summary["final_acc_A"] = evaluated[-1].acc_A
                summary["final_acc_B"] = dict(evaluated[-1].acc_B)
            return summary

    def dynamics(self) -> List[Dict]:
        """Accuracy curve: one row per evaluated iteration.

        A single receiver is reported as ``acc_B``; several get ``acc_B_<id>``.
        """
        with self._lock:
            evaluated = [r for r in self._records if r.acc_A is not None or r.acc_B]
        rows = []
        for record in evaluated:
            row = {"iter": record.iter, "acc_A": record.acc_A}
            if len(record.acc_B) == 1:
                row["acc_B"] = next(iter(record.acc_B.values()))
            else:
                row.update({f"acc_B_{name}": value for name, value in record.acc_B.items()})
            rows.append(row)
        return rows
