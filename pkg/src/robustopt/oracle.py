"""One communication round: honest gradients, forged gradients, robust aggregate.

The server never learns which slot is Byzantine; the aggregate of all n
declared vectors serves as an inexact gradient of the honest mean loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregation import AggregatorSpec
from .attacks import AttackStrategy
from .problems import ClientPool, honest_variance


@dataclass
class AuditRecord:
    round: int
    true_grad: np.ndarray
    err_sq: float
    grad_norm_sq: float
    honest_var: float
    nu: float
    bound: float | None

    @property
    def deviation_ratio(self):
        """err / honest variance: the (f, nu) ratio for the true honest subset."""
        if self.honest_var <= 0.0:
            return 0.0 if self.err_sq <= 1e-300 else math.inf
        return self.err_sq / self.honest_var


def lemma1_bound(nu, G2, B2, grad_norm_sq):
    """nu G^2 + nu B^2 ||grad L_H||^2."""
    for name, v in (("nu", nu), ("G2", G2), ("B2", B2), ("grad_norm_sq", grad_norm_sq)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    if nu == 0:
        return 0.0
    return nu * G2 + nu * B2 * grad_norm_sq


def eq8_bound(nu, Delta, mu, grads_at_opt_ms, inner):
    """Error bound zeta^2 + alpha mu <grad L_H(x), x - x*> under Hessian similarity.

    ``zeta^2 = 2 nu grads_at_opt_ms`` where ``grads_at_opt_ms`` is the mean
    squared norm of the honest gradients at x*, and ``alpha = 4 nu Delta / mu``.
    A negative ``inner`` means the reference minimizer is wrong.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    if inner < 0:
        raise ValueError(f"negative <grad, x - x*> = {inner:.3e}: x* is not the minimizer")
    zeta2 = nu * 2.0 * grads_at_opt_ms
    alpha = nu * 4.0 * Delta / mu
    return zeta2 + alpha * mu * inner


class InexactOracle:
    """Simulates the server side of one round per call.

    Parameters
    ----------
    pool : ClientPool
    aggregator : AggregatorSpec
        Its ``f`` must match the pool's.
    rng_seed : int
        Seeds the generator handed to custom attacks.
    audit : bool
        Record the true honest gradient, the error and (when ``G2``/``B2`` are
        set) the certified bound on every call.
    """

    def __init__(self, pool, aggregator, rng_seed=0, audit=False, G2=None, B2=None):
        if isinstance(aggregator, str):
            aggregator = AggregatorSpec.parse(aggregator, pool.f)
        if aggregator.f != pool.f:
            raise ValueError(f"aggregator tolerates f={aggregator.f} but the pool has f={pool.f}")
        self.pool = pool
        self.aggregator = aggregator
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.round_counter = 0
        self.audit = audit
        self.G2 = G2
        self.B2 = B2
        self.nu = aggregator.coefficient(pool.n)
        self.records: list[AuditRecord] = []

    @property
    def dim(self):
        return self.pool.honest[0].dim

    def declared(self, x):
        """All n vectors received by the server, and the honest stack."""
        pool = self.pool
        H = pool.honest_grads(x)
        out = np.empty((pool.n, H.shape[1]))
        out[list(pool.honest_indices)] = H
        if pool.f:
            for slot, attack in zip(pool.byzantine_indices, pool.byzantine):
                out[slot] = attack.forge(H, self.aggregator, self.rng)
        return out, H

    def sample(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of shape ({self.dim},), got {x.shape}")
        V, H = self.declared(x)
        g = self.aggregator(V)
        record = None
        if self.audit:
            true = H.mean(axis=0)
            gn2 = float(true @ true)
            err = float(np.sum((g - true) ** 2))
            bound = None
            if self.G2 is not None and self.B2 is not None:
                bound = lemma1_bound(self.nu, self.G2, self.B2, gn2)
            record = AuditRecord(self.round_counter, true, err, gn2, honest_variance(H), self.nu, bound)
            self.records.append(record)
        self.round_counter += 1
        return g, record

    def __call__(self, x):
        return self.sample(x)[0]


def sample_inexact_gradient(oracle, x):
    """Functional form of :meth:`InexactOracle.sample`."""
    return oracle.sample(x)


def exact_oracle(loss):
    """An :class:`InexactOracle` with a single honest client and no adversary."""
    return InexactOracle(ClientPool([loss]), AggregatorSpec("mean", f=0))


def make_oracle(honest, aggregator="cwtm", attack="none", f=0, **kwargs):
    """Convenience constructor from plain pieces."""
    if isinstance(attack, str):
        attack = AttackStrategy.parse(attack)
    pool = ClientPool(list(honest), [attack] * f)
    if isinstance(aggregator, str):
        aggregator = AggregatorSpec.parse(aggregator, f)
    return InexactOracle(pool, aggregator, **kwargs)
