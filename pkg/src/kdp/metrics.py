"""Per-plan compute counters and latency summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ForwardCounter:
    """Incremented by backends inside their sequential loops.

    ``nfe`` counts sequential policy forward calls; ``bef`` the total batch
    pushed through them.
    """

    nfe: int = 0
    bef: int = 0

    def record(self, batch):
        self.nfe += 1
        self.bef += int(batch)


@dataclass
class StepMetrics:
    nfe: int
    bef: int
    pl_ms: float
    e2e_ms: float = 0.0


def p50(values):
    return float(np.median(values)) if len(values) else float("nan")
