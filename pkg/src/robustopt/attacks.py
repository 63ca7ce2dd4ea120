"""Byzantine strategies.

Attacks are omniscient: they see every honest gradient of the round. All f
Byzantine clients send the same forged vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("alie", "ipm", "zero", "none", "custom")

DEFAULT_GRIDS = {
    "alie": (0.1, 0.3, 1.0, 3.0, 10.0, 30.0),
    "ipm": (0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
}
DEFAULT_SCALES = {"alie": 1.0, "ipm": 0.1}


def alie(honest_grads, z):
    """A Little Is Enough: coordinate-wise mean minus z population standard deviations."""
    G = np.atleast_2d(np.asarray(honest_grads, dtype=float))
    if G.shape[0] == 0:
        raise ValueError("alie needs at least one honest gradient")
    return G.mean(axis=0) - z * G.std(axis=0)


def ipm(honest_grads, epsilon):
    """Inner Product Manipulation: -epsilon times the honest mean."""
    G = np.atleast_2d(np.asarray(honest_grads, dtype=float))
    if G.shape[0] == 0:
        raise ValueError("ipm needs at least one honest gradient")
    return -epsilon * G.mean(axis=0)


_FORGERS = {"alie": alie, "ipm": ipm}


def _aggregate_with(aggregator, honest, forged, f):
    if f == 0:
        return aggregator(honest)
    return aggregator(np.vstack([honest, np.tile(forged, (f, 1))]))


def line_search_scale(attack, honest_grads, aggregator, grid=None, return_param=False):
    """Pick the attack parameter that pushes the aggregate furthest from the honest mean.

    Every candidate fills all ``aggregator.f`` Byzantine slots. Ties go to the
    smallest parameter.
    """
    kind = attack if isinstance(attack, str) else attack.kind
    if kind not in _FORGERS:
        raise ValueError(f"line search only applies to {tuple(_FORGERS)}, got {kind!r}")
    if grid is None:
        grid = attack.grid if not isinstance(attack, str) and attack.grid else DEFAULT_GRIDS[kind]
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("line-search grid is empty")
    H = np.atleast_2d(np.asarray(honest_grads, dtype=float))
    target = H.mean(axis=0)
    f = aggregator.f
    best, best_dev, best_p = None, -1.0, None
    for p in grid:
        cand = _FORGERS[kind](H, p)
        dev = float(np.linalg.norm(_aggregate_with(aggregator, H, cand, f) - target))
        if dev > best_dev:
            best, best_dev, best_p = cand, dev, p
    if return_param:
        return best, best_p, best_dev
    return best


@dataclass
class AttackStrategy:
    """What the Byzantine clients send.

    ``kind="none"`` sends the honest mean (a harmless participant),
    ``"zero"`` sends zeros, ``"custom"`` calls ``fn(honest_grads, rng)``.
    """

    kind: str = "none"
    scale: float | None = None
    grid: tuple | None = None
    line_search: bool = False
    fn: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {KINDS}")
        if self.line_search and self.kind not in _FORGERS:
            raise ValueError(f"line search is not defined for {self.kind!r}")
        if self.kind == "custom" and not callable(self.fn):
            raise ValueError("custom attack needs a callable fn")
        if self.scale is None:
            self.scale = DEFAULT_SCALES.get(self.kind, 0.0)
        if self.line_search and self.grid is None:
            self.grid = DEFAULT_GRIDS[self.kind]

    @classmethod
    def parse(cls, text):
        """``"alie"``, ``"ipm"``, ``"alie:ls"``, ``"ipm:ls"``, ``"zero"``, ``"none"``;
        ``"alie=2.5"`` sets the scale."""
        text = text.strip().lower()
        kind, _, opt = text.partition(":")
        kind, _, scale = kind.partition("=")
        if opt not in ("", "ls"):
            raise ValueError(f"unknown attack option {opt!r}")
        return cls(kind=kind, scale=float(scale) if scale else None, line_search=opt == "ls")

    def __str__(self):
        return self.kind + (":ls" if self.line_search else "")

    def forge(self, honest_grads, aggregator=None, rng=None):
        H = np.atleast_2d(np.asarray(honest_grads, dtype=float))
        if self.line_search:
            if aggregator is None:
                raise ValueError("line search needs the aggregator")
            return line_search_scale(self, H, aggregator)
        if self.kind in _FORGERS:
            return _FORGERS[self.kind](H, self.scale)
        if self.kind == "zero":
            return np.zeros(H.shape[1])
        if self.kind == "custom":
            return np.asarray(self.fn(H, rng), dtype=float)
        return H.mean(axis=0)
