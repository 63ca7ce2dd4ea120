"""Loss oracles, client pools and heterogeneity bookkeeping.

A :class:`LossOracle` exposes ``value``, ``grad`` and (optionally) ``hvp`` at
any point. Honest clients each own one oracle; their arithmetic mean is the
global honest loss that every optimizer in this package tries to minimize.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls


class LossOracle:
    """Base class for differentiable losses on R^d.

    Subclasses implement ``value`` and ``grad``; ``hvp`` is optional and
    advertised through ``has_hvp``. ``mu`` and ``L`` are ``None`` when unknown.
    ``minimizer`` is filled in when a closed form (or a certified numerical
    reference) exists.
    """

    has_hvp = False

    def __init__(self, dim, mu=None, L=None, minimizer=None):
        if dim <= 0:
            raise ValueError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)
        self.mu = mu
        self.L = L
        self.minimizer = minimizer

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hvp(self, x, v):
        raise NotImplementedError(f"{type(self).__name__} has no Hessian-vector product")

    def hessian(self, x):
        """Dense Hessian assembled column by column from ``hvp``."""
        eye = np.eye(self.dim)
        H = np.column_stack([self.hvp(x, e) for e in eye])
        return 0.5 * (H + H.T)

    @property
    def kappa(self):
        if self.mu is None or self.L is None or self.mu <= 0:
            return math.inf
        return self.L / self.mu

    def bregman(self, x, y):
        """D(x; y) = f(x) - f(y) - <grad f(y), x - y>."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.value(x) - self.value(y) - float(self.grad(y) @ (x - y))


class QuadraticLoss(LossOracle):
    """f(x) = 0.5 x^T A x - b^T x (+ const)."""

    has_hvp = True

    def __init__(self, A, b, const=0.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
            raise ValueError(f"shape mismatch: A is {A.shape}, b is {b.shape}")
        if not np.allclose(A, A.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        A = 0.5 * (A + A.T)
        eigs = np.linalg.eigvalsh(A)
        scale = max(1.0, float(np.abs(eigs).max()))
        if eigs[0] < -1e-12 * scale:
            raise ValueError(f"A must be positive semidefinite (min eigenvalue {eigs[0]:.3e})")
        mu = max(float(eigs[0]), 0.0)
        L = float(eigs[-1])
        minimizer = np.linalg.solve(A, b) if mu > 1e-12 * scale else None
        super().__init__(A.shape[0], mu=mu, L=L, minimizer=minimizer)
        self.A = A
        self.b = b
        self.const = float(const)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.A @ x) - float(self.b @ x) + self.const

    def grad(self, x):
        return self.A @ np.asarray(x, dtype=float) - self.b

    def hvp(self, x, v):
        return self.A @ np.asarray(v, dtype=float)

    def hessian(self, x):
        return self.A.copy()


def make_quadratic(A, b, const=0.0):
    """Quadratic oracle ``0.5 x^T A x - b^T x``; rejects non-symmetric or indefinite ``A``."""
    return QuadraticLoss(A, b, const)


def _power_iteration_sq_norm(features, iters=50, seed=0):
    # Largest eigenvalue of A^T A, estimated from below.
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(features.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = features.T @ (features @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


class LogisticLoss(LossOracle):
    """Mean logistic loss with an l2 penalty.

    value(x) = (1/m) sum_i log(1 + exp(-y_i a_i^T x)) + (lam/2) ||x||^2
    """

    has_hvp = True

    def __init__(self, features, labels, lam):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        labels = np.asarray(labels, dtype=float).reshape(-1)
        if features.shape[0] == 0:
            raise ValueError("empty dataset")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"dimension mismatch: {features.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValueError("labels must be in {-1, +1}")
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        m = features.shape[0]
        # 50 power iterations then a 1.01 safety factor.
        sq = _power_iteration_sq_norm(features) * 1.01
        super().__init__(features.shape[1], mu=float(lam), L=float(lam) + sq / (4.0 * m))
        self.features = features
        self.labels = labels
        self.lam = float(lam)
        self.m = m

    def _margins(self, x):
        return self.labels * (self.features @ np.asarray(x, dtype=float))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        z = self._margins(x)
        return float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * self.lam * float(x @ x)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        z = self._margins(x)
        # sigma(-z) computed without overflow
        s = np.exp(-np.logaddexp(0.0, z))
        return -(self.features.T @ (self.labels * s)) / self.m + self.lam * x

    def hvp(self, x, v):
        z = self._margins(x)
        p = np.exp(-np.logaddexp(0.0, -z))
        w = p * (1.0 - p)
        Av = self.features @ np.asarray(v, dtype=float)
        return self.features.T @ (w * Av) / self.m + self.lam * np.asarray(v, dtype=float)


def make_logistic(features, labels, lam):
    """l2-regularized logistic regression oracle with mu = lam and a power-iteration L."""
    return LogisticLoss(features, labels, lam)


class MeanLoss(LossOracle):
    """Uniform average of several oracles (no sample-size weighting)."""

    def __init__(self, oracles):
        oracles = list(oracles)
        if not oracles:
            raise ValueError("need at least one oracle")
        dim = oracles[0].dim
        if any(o.dim != dim for o in oracles):
            raise ValueError("all oracles must share a dimension")
        mus = [o.mu for o in oracles]
        Ls = [o.L for o in oracles]
        mu = float(np.mean(mus)) if all(m is not None for m in mus) else None
        L = float(np.mean(Ls)) if all(v is not None for v in Ls) else None
        super().__init__(dim, mu=mu, L=L)
        self.oracles = oracles
        self.has_hvp = all(o.has_hvp for o in oracles)

    def value(self, x):
        return float(np.mean([o.value(x) for o in self.oracles]))

    def grad(self, x):
        return np.mean([o.grad(x) for o in self.oracles], axis=0)

    def hvp(self, x, v):
        return np.mean([o.hvp(x, v) for o in self.oracles], axis=0)


def mean_loss(oracles):
    """Global honest loss: exact quadratic when every member is quadratic."""
    oracles = list(oracles)
    if oracles and all(isinstance(o, QuadraticLoss) for o in oracles):
        A = np.mean([o.A for o in oracles], axis=0)
        b = np.mean([o.b for o in oracles], axis=0)
        c = float(np.mean([o.const for o in oracles]))
        return QuadraticLoss(A, b, c)
    return MeanLoss(oracles)


def reference_minimizer(loss, tol=1e-10, max_iter=1_000_000, x0=None):
    """Exact-gradient descent with step 1/L until ||grad|| <= tol.

    Returns ``(x_star, grad_norm)``. Quadratics with a closed-form minimizer
    are returned directly.
    """
    if loss.minimizer is not None:
        x = np.asarray(loss.minimizer, dtype=float)
        return x, float(np.linalg.norm(loss.grad(x)))
    if loss.L is None:
        raise ValueError("reference minimizer needs a known smoothness constant")
    x = np.zeros(loss.dim) if x0 is None else np.array(x0, dtype=float)
    step = 1.0 / loss.L
    g = loss.grad(x)
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gn <= tol:
            break
        x = x - step * g
        g = loss.grad(x)
        gn = float(np.linalg.norm(g))
    else:
        raise RuntimeError(f"reference minimizer did not reach ||grad|| <= {tol} (got {gn:.3e})")
    return x, gn


@dataclass
class ClientPool:
    """n clients: honest loss oracles plus f Byzantine attack strategies.

    ``byzantine_indices`` defaults to the last f slots of [n]; the honest
    clients fill the remaining slots in order.
    """

    honest: list
    byzantine: list = field(default_factory=list)
    byzantine_indices: tuple | None = None

    def __post_init__(self):
        self.honest = list(self.honest)
        self.byzantine = list(self.byzantine)
        if not self.honest:
            raise ValueError("a pool needs at least one honest client")
        n, f = self.n, self.f
        if self.byzantine_indices is None:
            self.byzantine_indices = tuple(range(n - f, n))
        idx = tuple(int(i) for i in self.byzantine_indices)
        if len(idx) != f or len(set(idx)) != f or any(not 0 <= i < n for i in idx):
            raise ValueError(f"byzantine_indices {idx} do not pick {f} distinct slots of [{n}]")
        self.byzantine_indices = idx
        bset = set(idx)
        self.honest_indices = tuple(i for i in range(n) if i not in bset)

    @property
    def n(self):
        return len(self.honest) + len(self.byzantine)

    @property
    def f(self):
        return len(self.byzantine)

    def honest_grads(self, x):
        return np.stack([o.grad(x) for o in self.honest])

    def mean_loss(self):
        return mean_loss(self.honest)


@dataclass
class HeterogeneityEstimate:
    """(G^2, B^2) certified on ``sample_points`` only."""

    G2: float
    B2: float
    sample_points: list
    max_violation: float
    variances: np.ndarray
    grad_norms_sq: np.ndarray


def honest_variance(grads):
    """(1/|H|) sum ||g_i - g_bar||^2 for a stack of honest gradients."""
    grads = np.asarray(grads, dtype=float)
    if np.all(grads == grads[0]):
        return 0.0  # the mean of equal rows can round away from them
    centered = grads - grads.mean(axis=0)
    return float(np.mean(np.sum(centered * centered, axis=1)))


def fit_heterogeneity(var, s):
    """Smallest-residual (G2, B2) >= 0 with ``var <= G2 + B2 s`` on every sample.

    Nonnegative least squares on (1, s); the intercept is then raised by the
    largest positive residual. Returns ``(G2, B2, max_violation)``.
    """
    var = np.asarray(var, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.all(s == 0.0):
        G2, B2 = float(var.max()), 0.0
    else:
        design = np.column_stack([np.ones_like(s), s])
        # rescale columns so nnls is well conditioned
        colscale = np.maximum(np.abs(design).max(axis=0), 1e-300)
        coef, _ = nnls(design / colscale, var)
        G2, B2 = (coef / colscale).tolist()
        G2 = max(G2, 0.0)
        B2 = max(B2, 0.0)
        G2 += max(0.0, float(np.max(var - (G2 + B2 * s))))
    # absorb rounding in the final comparison
    viol = float(np.max(var - (G2 + B2 * s)))
    while viol > 0.0:
        G2 = np.nextafter(G2 + viol, math.inf)
        viol = float(np.max(var - (G2 + B2 * s)))
    return float(G2), float(B2), viol


def estimate_heterogeneity(pool, points):
    """Fit and certify ``var(x) <= G2 + B2 ||grad L_H(x)||^2`` on ``points``.

    ``pool`` is a :class:`ClientPool` or a plain sequence of honest oracles.
    The fit is a nonnegative least squares on (1, ||grad||^2); the intercept is
    then raised by the largest positive residual so the inequality holds on
    every sampled point.
    """
    honest = pool.honest if isinstance(pool, ClientPool) else list(pool)
    points = [np.asarray(p, dtype=float) for p in points]
    if len(points) < 2:
        raise ValueError("need at least 2 sample points")
    var = np.empty(len(points))
    s = np.empty(len(points))
    for k, x in enumerate(points):
        grads = np.stack([o.grad(x) for o in honest])
        var[k] = honest_variance(grads)
        gbar = grads.mean(axis=0)
        s[k] = float(gbar @ gbar)

    G2, B2, viol = fit_heterogeneity(var, s)
    return HeterogeneityEstimate(float(G2), float(B2), points, viol, var, s)


@dataclass(frozen=True)
class ByzantineBounds:
    breakdown_ok: bool
    value_bound: float
    gradnorm_bound: float


def byzantine_bounds(G, B, mu, f, n):
    """Lower bounds on reachable error for any algorithm under (G,B)-heterogeneity.

    Returns the breakdown condition f/n <= 1/(B^2+2) and the function-value and
    squared-gradient-norm floors; both are ``inf`` past the breakdown point.
    """
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if not 0 <= f < n:
        raise ValueError(f"need 0 <= f < n, got f={f}, n={n}")
    G2 = float(G) ** 2
    B2 = float(B) ** 2
    breakdown_ok = f * (B2 + 2.0) <= n
    if f == 0:
        return ByzantineBounds(True, 0.0, 0.0)
    denom = n - (2.0 + B2) * f
    if denom <= 0:
        return ByzantineBounds(breakdown_ok, math.inf, math.inf)
    ratio = f / denom
    return ByzantineBounds(breakdown_ok, G2 / (8.0 * mu) * ratio, G2 / 4.0 * ratio)


def dirichlet_partition(labels, n_clients, beta, seed=0, max_retries=100):
    """Split sample indices across clients with Dir(beta) class proportions.

    Every index lands in exactly one client. Draws are repeated (up to
    ``max_retries`` times) until no client is empty.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not beta > 0:
        raise ValueError("beta must be positive")
    labels = np.asarray(labels).reshape(-1)
    if n_clients == 1:
        return [np.arange(labels.shape[0])]
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_retries):
        parts = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, float(beta)))
            cuts = (np.cumsum(props)[:-1] * idx.shape[0]).round().astype(int)
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if all(o.size > 0 for o in out):
            return out
    raise RuntimeError(
        f"could not produce {n_clients} nonempty clients in {max_retries} draws "
        f"({labels.shape[0]} samples, beta={beta})"
    )


def synthetic_clients(n_clients, samples_per_client, dim, heterogeneity=0.0,
                      separation=1.0, cond=1.0, seed=0):
    """Two-class Gaussian mixture split across clients.

    Each client's class means are the global means ``+-separation*u`` shifted
    by ``heterogeneity`` times a client-specific Gaussian offset. Feature
    scales decay geometrically from 1 to ``1/sqrt(cond)`` so the resulting
    logistic loss is ill conditioned when ``cond`` is large.

    Returns a list of ``(features, labels)`` pairs with labels in {-1, +1}.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    scales = np.geomspace(1.0, 1.0 / math.sqrt(cond), dim)
    out = []
    for _ in range(n_clients):
        shift = heterogeneity * rng.standard_normal((2, dim))
        y = np.where(rng.random(samples_per_client) < 0.5, -1.0, 1.0)
        means = np.where(y[:, None] > 0, separation * u + shift[0], -separation * u + shift[1])
        X = (means + rng.standard_normal((samples_per_client, dim))) * scales
        out.append((X, y))
    return out


def load_csv(path):
    """Read ``label, feature...`` rows; a non-numeric first cell marks a header.

    Returns ``(features, labels)`` as float arrays.
    """
    rows = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            if k == 0:
                try:
                    float(row[0])
                except ValueError:
                    continue
            rows.append([float(c) for c in row])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need a label column and at least one feature")
    return data[:, 1:], data[:, 0]


def binarize_labels(labels, positive_class=None):
    """Map class ids to {-1, +1}; two-class data maps the larger id to +1."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if np.all(np.isin(uniq, (-1, 1))):
        return labels.astype(float)
    if positive_class is None:
        if uniq.size != 2:
            raise ValueError(f"{uniq.size} classes found; pass positive_class")
        positive_class = uniq[1]
    return np.where(labels == positive_class, 1.0, -1.0)


def hessian_similarity(loss_a, loss_b, points):
    """max over points of ||hess_a(x) - hess_b(x)||_op."""
    worst = 0.0
    for x in points:
        D = loss_a.hessian(x) - loss_b.hessian(x)
        worst = max(worst, float(np.abs(np.linalg.eigvalsh(0.5 * (D + D.T))).max()))
    return worst


def random_points(rng, dim, count, center=None, radius=1.0):
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    return [center + radius * rng.standard_normal(dim) for _ in range(count)]


__all__: Sequence[str] = [
    "LossOracle", "QuadraticLoss", "LogisticLoss", "MeanLoss", "make_quadratic",
    "make_logistic", "mean_loss", "reference_minimizer", "ClientPool",
    "HeterogeneityEstimate", "honest_variance", "fit_heterogeneity",
    "estimate_heterogeneity",
    "ByzantineBounds", "byzantine_bounds", "dirichlet_partition",
    "synthetic_clients", "load_csv", "binarize_labels", "hessian_similarity",
    "random_points",
]
