"""Per-iteration records of a policy-gradient run."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TraceRecord:
    k: int
    K: np.ndarray
    L: np.ndarray
    cost: float | None
    rel_error: float | None
    grad_norm: float | None = None
    step_scale: float = 1.0
    pop_costs: dict = field(default_factory=dict)
    pop_rel_errors: dict = field(default_factory=dict)


@dataclass
class ConvergenceTrace:
    method: str
    optimizer: str
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: TraceRecord):
        if self.records and rec.k <= self.records[-1].k:
            raise ValueError(f"trace iterations must increase (got {rec.k} after {self.records[-1].k})")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def last(self) -> TraceRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def ks(self) -> np.ndarray:
        return np.array([r.k for r in self.records])

    def costs(self) -> np.ndarray:
        return self.column("cost")

    def rel_errors(self) -> np.ndarray:
        return self.column("rel_error")

    def K_path(self) -> np.ndarray:
        return np.stack([r.K for r in self.records])

    def L_path(self) -> np.ndarray:
        return np.stack([r.L for r in self.records])
