"""Robust aggregation rules, mixing pre-aggregators and their coefficients.

Every rule takes an ``(n, d)`` stack of client vectors (or a list of 1-D
arrays) and returns a single vector. Mixings return another ``(n, d)`` stack.
Ties in trimming, neighbor selection and norm sorting always go to the lowest
input index.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

RULES = ("cwtm", "cwm", "gm", "krum", "mean")
MIXINGS = ("nnm", "frg")

# Breakdown fraction of NNM (mixing fails at or above it).
NNM_BREAKDOWN = 1.0 / 9.0
# Robust-summand constant assumed for GTS. frg(gts) on the complete graph with
# weights 1/(n-f) coincides with NNM, so rho = 4 reproduces NNM's delta; this
# value is not proven, see verify_robustness for empirical checks.
GTS_RHO = 4.0


class GeometricMedianWarning(RuntimeWarning):
    pass


def _stack(vectors):
    arr = np.asarray(vectors, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("expected a nonempty list of vectors")
    return arr


def cwtm(vectors, f):
    """Coordinate-wise trimmed mean: drop the f largest and f smallest per coordinate."""
    X = _stack(vectors)
    n = X.shape[0]
    if n <= 2 * f:
        raise ValueError(f"cwtm needs n > 2f, got n={n}, f={f}")
    S = np.sort(X, axis=0)
    return S[f:n - f].mean(axis=0)


def cwm(vectors):
    """Coordinate-wise median (mean of the two middle values for even n)."""
    X = _stack(vectors)
    return np.median(X, axis=0)


def mean(vectors):
    return _stack(vectors).mean(axis=0)


def gm_residual(vectors, m, eps=1e-12):
    """Stationarity residual of sum_i ||v_i - m|| at ``m``.

    Points within ``eps`` of ``m`` are treated as coinciding with it; with k
    of them the residual is max(0, ||sum of unit vectors to the others|| - k),
    which is zero exactly at a minimizer (including one sitting on data).
    """
    X = _stack(vectors)
    diff = X - m
    dist = np.linalg.norm(diff, axis=1)
    away = dist > eps
    pull = np.linalg.norm((diff[away] / dist[away, None]).sum(axis=0))
    return float(max(0.0, pull - np.count_nonzero(~away)))


def geometric_median(vectors, tol=1e-8, max_iter=1000, eps=1e-12, full_output=False):
    """Smoothed Weiszfeld iterations for the geometric median.

    Stops once :func:`gm_residual` is at most ``tol * n``. Each iteration
    also tests the nearest input vector, since the median often sits on one
    (and Weiszfeld only approaches such a point slowly). If ``max_iter`` runs
    out, the iterate with the smallest residual is returned and a
    :class:`GeometricMedianWarning` is emitted.

    With ``full_output=True`` returns ``(median, converged, n_iter, residual)``.
    """
    X = _stack(vectors)
    n = X.shape[0]
    m = X.mean(axis=0)
    best, best_res = m, math.inf
    converged = False
    it = 0
    for it in range(max_iter + 1):
        diff = X - m
        dist = np.maximum(np.linalg.norm(diff, axis=1), eps)
        for cand in (m, X[int(np.argmin(dist))]):
            res = gm_residual(X, cand, eps)
            if res < best_res:
                best, best_res = cand, res
        if best_res <= tol * n:
            converged = True
            break
        if it == max_iter:
            break
        w = 1.0 / dist
        m = (w[:, None] * X).sum(axis=0) / w.sum()
    if not converged:
        warnings.warn(
            f"Weiszfeld stopped after {max_iter} iterations with residual {best_res:.3e}",
            GeometricMedianWarning, stacklevel=2,
        )
    if full_output:
        return best.copy(), converged, it, best_res
    return best.copy()


def _sq_dists(X):
    # explicit differences, not the Gram trick: keeps zero distances exact
    D = np.empty((X.shape[0], X.shape[0]))
    for i in range(X.shape[0]):
        diff = X - X[i]
        D[i] = np.einsum("ij,ij->i", diff, diff)
    return D


def krum_scores(vectors, f, neighbors=None):
    """Sum of squared distances from each vector to its nearest neighbors (self excluded)."""
    X = _stack(vectors)
    n = X.shape[0]
    k = n - f - 1 if neighbors is None else int(neighbors)
    if k < 1 or k > n - 1:
        raise ValueError(f"krum needs 1 <= neighbors <= n-1, got {k} (n={n}, f={f})")
    D = _sq_dists(X)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(D[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def krum(vectors, f, neighbors=None):
    """Return the input vector with the smallest Krum score (lowest index on ties)."""
    X = _stack(vectors)
    n = X.shape[0]
    if n < f + 3:
        raise ValueError(f"krum needs n >= f + 3, got n={n}, f={f}")
    return X[int(np.argmin(krum_scores(X, f, neighbors)))].copy()


def nnm(vectors, f):
    """Nearest-neighbor mixing: replace each vector by the mean of its n - f nearest (self included)."""
    X = _stack(vectors)
    n = X.shape[0]
    if n <= f:
        raise ValueError(f"nnm needs n > f, got n={n}, f={f}")
    D = _sq_dists(X)
    out = np.empty_like(X)
    for i in range(n):
        nearest = np.argsort(D[i], kind="stable")[: n - f]
        out[i] = X[nearest].mean(axis=0)
    return out


def gts(diffs, f):
    """Geometrically trimmed sum: sum of the n - f smallest-norm vectors over n - f."""
    Z = _stack(diffs)
    n = Z.shape[0]
    if n <= f:
        raise ValueError(f"gts needs n > f, got n={n}, f={f}")
    norms = np.einsum("ij,ij->i", Z, Z)
    keep = np.argsort(norms, kind="stable")[: n - f]
    return Z[keep].sum(axis=0) / (n - f)


def frg_mix(vectors, f, summand=gts):
    """One server-emulated robust-gossip step on the complete graph (weights 1/(n-f), step 1).

    y_i = x_i - summand((x_i - x_j)_j, f)
    """
    X = _stack(vectors)
    n = X.shape[0]
    if n <= f:
        raise ValueError(f"frg needs n > f, got n={n}, f={f}")
    out = np.empty_like(X)
    for i in range(n):
        out[i] = X[i] - summand(X[i] - X, f)
    return out


def _base_coefficient(rule, n, f):
    if rule == "mean":
        return 0.0 if f == 0 else math.inf
    if n <= 2 * f:
        raise ValueError(f"{rule} needs n > 2f, got n={n}, f={f}")
    r = f / (n - 2 * f)
    if rule == "cwtm":
        return 6 * r * (1 + 6 * r)
    if rule == "krum":
        return 6 * (1 + 6 * r)
    if rule in ("gm", "cwm"):
        return 4 * (1 + r) ** 2
    raise ValueError(f"unknown rule {rule!r}")


def mixing_delta(mixing, n, f, rho=GTS_RHO):
    """Contraction factor delta of a mixing; raises past its breakdown point."""
    if mixing == "nnm":
        if f > 0 and f / n >= NNM_BREAKDOWN:
            raise ValueError(f"nnm breakdown exceeded: f/n = {f}/{n} >= 1/9")
        return 8 * f / (n - f)
    if mixing == "frg":
        if f > 0 and f / n >= 1.0 / (2 * rho + 1):
            raise ValueError(f"frg breakdown exceeded: f/n = {f}/{n} >= 1/(2 rho + 1), rho={rho}")
        return 2 * rho * f / (n - f)
    raise ValueError(f"unknown mixing {mixing!r}")


def lower_bound_coefficient(n, f):
    """No (f, nu)-robust rule has nu below f / (n - 2f)."""
    return f / (n - 2 * f)


@dataclass(frozen=True)
class AggregatorSpec:
    """A base rule preceded by an ordered chain of mixings.

    ``mixings`` are applied left to right to the client vectors, then ``rule``
    reduces the result.
    """

    rule: str = "cwtm"
    mixings: tuple = ()
    f: int = 0
    gm_tol: float = 1e-8
    gm_max_iter: int = 1000
    krum_neighbors: int | None = None
    gts_rho: float = GTS_RHO
    extras: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; choose from {RULES}")
        for m in self.mixings:
            if m not in MIXINGS:
                raise ValueError(f"unknown mixing {m!r}; choose from {MIXINGS}")
        if self.f < 0:
            raise ValueError("f must be >= 0")
        if not self.gm_tol > 0:
            raise ValueError("gm_tol must be positive")

    @classmethod
    def parse(cls, text, f, **kwargs):
        """Parse ``"cwtm"``, ``"nnm+cwtm"``, ``"frg(gts)+gm"`` and similar."""
        tokens = [t.strip().lower() for t in text.split("+") if t.strip()]
        if not tokens:
            raise ValueError("empty aggregator string")
        mixings = []
        for tok in tokens[:-1]:
            if tok in ("frg", "frg(gts)"):
                mixings.append("frg")
            elif tok == "nnm":
                mixings.append("nnm")
            else:
                raise ValueError(f"unknown mixing token {tok!r}")
        return cls(rule=tokens[-1], mixings=tuple(mixings), f=int(f), **kwargs)

    def __str__(self):
        names = ["frg(gts)" if m == "frg" else m for m in self.mixings]
        return "+".join(names + [self.rule])

    def mix(self, vectors):
        X = _stack(vectors)
        for m in self.mixings:
            X = nnm(X, self.f) if m == "nnm" else frg_mix(X, self.f)
        return X

    def reduce(self, X):
        if self.rule == "cwtm":
            return cwtm(X, self.f)
        if self.rule == "cwm":
            return cwm(X)
        if self.rule == "gm":
            return geometric_median(X, tol=self.gm_tol, max_iter=self.gm_max_iter)
        if self.rule == "krum":
            return krum(X, self.f, self.krum_neighbors)
        return mean(X)

    def __call__(self, vectors):
        return self.reduce(self.mix(vectors))

    def coefficient(self, n):
        return robustness_coefficient(self, n)


def robustness_coefficient(spec, n):
    """Closed-form nu of the composed aggregator; each mixing maps nu -> delta (1 + nu)."""
    f = spec.f
    nu = _base_coefficient(spec.rule, n, f)
    for m in reversed(spec.mixings):
        delta = mixing_delta(m, n, f, spec.gts_rho)
        nu = 0.0 if delta == 0 else delta * (1 + nu)
    return nu


@dataclass(frozen=True)
class RobustnessCheck:
    worst_ratio: float
    nu: float
    holds: bool
    worst_subset: tuple


def deviation_ratio(output, X, subset, floor=None):
    """||output - mean_S||^2 / var_S with numerically-zero handling."""
    S = X[list(subset)]
    center = S.mean(axis=0)
    err = float(np.sum((output - center) ** 2))
    var = float(np.mean(np.sum((S - center) ** 2, axis=1)))
    if floor is None:
        scale = 1.0 + float(np.abs(X).max())
        floor = (1e-12 * scale) ** 2
    if var <= floor:
        return 0.0 if err <= floor else math.inf
    return err / var


def verify_robustness(agg, vectors, f=None):
    """Brute-force the (f, nu) inequality over every honest subset of size n - f.

    ``agg`` is an :class:`AggregatorSpec` or an aggregator string.
    """
    X = _stack(vectors)
    n = X.shape[0]
    if isinstance(agg, str):
        agg = AggregatorSpec.parse(agg, f if f is not None else 0)
    elif f is not None and f != agg.f:
        raise ValueError(f"f={f} disagrees with aggregator f={agg.f}")
    f = agg.f
    if n > 12:
        raise ValueError(f"exhaustive subset enumeration limited to n <= 12, got {n}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GeometricMedianWarning)
        out = agg(X)
    nu = robustness_coefficient(agg, n)
    worst, worst_S = 0.0, ()
    for S in itertools.combinations(range(n), n - f):
        r = deviation_ratio(out, X, S)
        if r > worst or not worst_S:
            worst, worst_S = max(worst, r), S
    return RobustnessCheck(worst, nu, worst <= nu, worst_S)


def random_trial(rng, n, f, dim=5):
    """Random inputs for robustness checks: a Gaussian honest cloud plus f adversarial slots."""
    X = rng.standard_normal((n, dim)) * rng.uniform(0.1, 10.0)
    if f == 0:
        return X
    honest = X[: n - f]
    mu = honest.mean(axis=0)
    sd = honest.std(axis=0)
    kind = rng.integers(5)
    if kind == 0:
        X[n - f:] = mu + rng.uniform(1, 1e3) * rng.standard_normal(dim)
    elif kind == 1:
        X[n - f:] = mu - rng.uniform(0.1, 3.0) * sd
    elif kind == 2:
        X[n - f:] = -rng.uniform(0.1, 5.0) * mu
    elif kind == 3:
        X[n - f:] = honest[rng.integers(n - f)] + 1e-3 * rng.standard_normal((f, dim))
    # kind 4: leave the slots as ordinary Gaussian draws
    return X[rng.permutation(n)]


def verify_trials(rule, n, f, trials=200, seed=0, dim=5):
    """Worst :func:`verify_robustness` ratio over ``trials`` draws of :func:`random_trial`."""
    spec = AggregatorSpec.parse(rule, f) if isinstance(rule, str) else rule
    rng = np.random.default_rng(seed)
    worst = RobustnessCheck(0.0, spec.coefficient(n), True, ())
    for _ in range(trials):
        res = verify_robustness(spec, random_trial(rng, n, f, dim), f)
        if res.worst_ratio > worst.worst_ratio or not worst.worst_subset:
            worst = res
    return worst
