"""Per-round records shared by the optimizers and the experiment driver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COLUMNS = ("round", "loss_gap", "grad_norm", "dist_to_opt", "oracle_err_sq",
           "lemma1_bound", "inner_iters", "wall_ms")


@dataclass(frozen=True)
class TraceRow:
    round: int
    loss_gap: float
    grad_norm: float
    dist_to_opt: float
    oracle_err_sq: float
    lemma1_bound: float
    inner_iters: int = 0
    wall_ms: float = 0.0


@dataclass
class RunTrace:
    """Row k describes the model held after k communication rounds.

    ``oracle_err_sq`` in row k is measured at the point queried in round k
    (for gd and pigs that is the same model; for fgm it is the extrapolated
    point x_k while the model is y_{k-1}).
    """

    name: str = ""
    rows: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    x_avg: np.ndarray | None = None
    diverged: bool = False
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def loss_gap(self):
        return self.column("loss_gap")

    def plateau(self, tail=0.2):
        """Median loss gap over the last ``tail`` fraction of rounds."""
        gaps = self.loss_gap
        if gaps.size == 0:
            return float("nan")
        k = max(1, int(round(tail * gaps.size)))
        return float(np.median(gaps[-k:]))
