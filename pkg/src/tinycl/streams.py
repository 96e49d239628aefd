"""Task streams for class- and domain-incremental runs.

All reads of task data go through ``TaskStream`` accessors so the audit can
prove the training loop is rehearsal-free: while task t trains, any read of
another task's train split is recorded as a violation.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError


@dataclass
class TaskData:
    """One task's train/test partitions. Labels are global class ids."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    label_set: tuple[int, ...]

    def __post_init__(self):
        if not set(self.train_y) <= set(self.label_set) or not set(self.test_y) <= set(self.label_set):
            raise ProtocolError("task labels outside declared label set")

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return len(self.test_y)


@dataclass
class AccessAudit:
    """Counts train-split reads keyed by (task being trained, task read)."""

    training_task: int | None = None
    train_reads: dict[tuple[int | None, int], int] = field(default_factory=dict)
    test_reads: int = 0

    def record_train_read(self, task_idx: int):
        key = (self.training_task, task_idx)
        self.train_reads[key] = self.train_reads.get(key, 0) + 1

    def old_task_train_reads(self) -> int:
        """Reads of D_j train data while training task t != j (rehearsal)."""
        return sum(n for (t, j), n in self.train_reads.items()
                   if t is not None and j != t)


class TaskStream:
    """Ordered task list; mode is 'cil' (disjoint labels) or 'dil' (shared)."""

    def __init__(self, tasks: list[TaskData], mode: str):
        if mode not in ("cil", "dil"):
            raise ProtocolError(f"unknown stream mode {mode!r}")
        label_sets = [set(t.label_set) for t in tasks]
        if mode == "cil":
            for i in range(len(tasks)):
                for j in range(i + 1, len(tasks)):
                    if label_sets[i] & label_sets[j]:
                        raise ProtocolError(
                            f"cil stream: tasks {i + 1} and {j + 1} share labels "
                            f"{sorted(label_sets[i] & label_sets[j])}")
        else:
            for i, ls in enumerate(label_sets[1:], start=2):
                if ls != label_sets[0]:
                    raise ProtocolError(f"dil stream: task {i} label set differs from task 1")
        self._tasks = list(tasks)
        self.mode = mode
        self.audit = AccessAudit()

    @property
    def n_tasks(self) -> int:
        return len(self._tasks)

    def label_set(self, task_idx: int) -> tuple[int, ...]:
        return self._tasks[task_idx - 1].label_set

    def all_labels_through(self, upto_t: int) -> list[int]:
        """Class ids in first-appearance order through task upto_t."""
        seen: list[int] = []
        for t in self._tasks[:upto_t]:
            for c in t.label_set:
                if c not in seen:
                    seen.append(c)
        return seen

    @contextmanager
    def training(self, task_idx: int):
        if self.audit.training_task is not None:
            raise ProtocolError("nested training contexts")
        self.audit.training_task = task_idx
        try:
            yield self.audit
        finally:
            self.audit.training_task = None

    def train_arrays(self, task_idx: int) -> tuple[np.ndarray, np.ndarray]:
        self.audit.record_train_read(task_idx)
        td = self._tasks[task_idx - 1]
        return td.train_x, td.train_y

    def test_arrays(self, task_idx: int) -> tuple[np.ndarray, np.ndarray]:
        self.audit.test_reads += 1
        td = self._tasks[task_idx - 1]
        return td.test_x, td.test_y

    def task(self, task_idx: int) -> TaskData:
        """Direct task access for inspection; does not count as a data read."""
        return self._tasks[task_idx - 1]
