"""Robust distributed GD, the robust fast gradient method and PIGS.

Each optimizer calls its oracle exactly once per outer iteration, so the
number of trace rows equals the number of communication rounds.
"""

from __future__ import annotations

import decimal
import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .trace import RunTrace, TraceRow

DIVERGENCE_GAP = 1e12
FGM_VARIANTS = ("derived", "appendix", "maintext")


# --------------------------------------------------------------------------- #
# momentum schedule


@dataclass
class GammaSchedule:
    """gamma_0 = 1 and 2L + Gamma_k mu / 2 = 2L gamma_{k+1}^2 / Gamma_{k+1}.

    ``gamma`` and ``Gamma`` hold :class:`decimal.Decimal` values: for mu > 0
    the partial sums grow geometrically and leave float range after a few
    thousand steps, while the optimizer only needs their ratios.
    """

    gamma: list
    Gamma: list
    L: float
    mu: float

    def __len__(self):
        return len(self.gamma)

    def residual(self, k):
        """|2L + Gamma_k mu/2 - 2L gamma_{k+1}^2 / Gamma_{k+1}| evaluated exactly enough."""
        G_k, g1, G1 = self.Gamma[k], self.gamma[k + 1], self.Gamma[k + 1]
        ctx = decimal.Context(prec=_digits(G1) + 40)
        L = decimal.Decimal(self.L)
        mu = decimal.Decimal(self.mu)
        lhs = ctx.add(2 * L, ctx.multiply(G_k, mu) / 2)
        rhs = ctx.divide(ctx.multiply(2 * L, ctx.multiply(g1, g1)), G1)
        return float(abs(ctx.subtract(lhs, rhs)))

    def ratios(self):
        """Float arrays a_k = gamma_k/gamma_{k+1}, b_k = Gamma_{k-1}/Gamma_k, c_k = Gamma_k/Gamma_{k+1}."""
        K = len(self.gamma) - 1
        ctx = decimal.Context(prec=30)
        a = np.array([float(ctx.divide(self.gamma[k], self.gamma[k + 1])) for k in range(K)])
        b = np.array([0.0] + [float(ctx.divide(self.Gamma[k - 1], self.Gamma[k])) for k in range(1, K)])
        c = np.array([float(ctx.divide(self.Gamma[k], self.Gamma[k + 1])) for k in range(K)])
        return a, b, c


def _digits(x):
    return max(1, x.adjusted() + 1)


def gamma_schedule(L, mu, K):
    """gamma_0..gamma_K; gamma_{k+1} is the positive root of 2L g^2 - c g - c Gamma_k = 0, c = 2L + Gamma_k mu / 2."""
    if not L > 0:
        raise ValueError("L must be positive")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if K < 1:
        raise ValueError("K must be >= 1")
    D = decimal.Decimal
    Ld, mud = D(L), D(mu)
    one = D(1)
    gamma, Gamma = [one], [one]
    for _ in range(K):
        G = Gamma[-1]
        ctx = decimal.Context(prec=_digits(G) + 40)
        c = ctx.add(2 * Ld, ctx.multiply(G, mud) / 2)
        disc = ctx.add(ctx.multiply(c, c), ctx.multiply(ctx.multiply(8 * Ld, c), G))
        g = ctx.divide(ctx.add(c, ctx.sqrt(disc)), 4 * Ld)
        gamma.append(g)
        Gamma.append(ctx.add(G, g))
    return GammaSchedule(gamma, Gamma, float(L), float(mu))


# --------------------------------------------------------------------------- #
# shared bookkeeping


class _Recorder:
    def __init__(self, name, oracle, loss_ref, timing):
        if loss_ref.minimizer is None:
            raise ValueError("loss_ref needs a known minimizer for trace metrics")
        self.trace = RunTrace(name=name)
        self.oracle = oracle
        self.loss = loss_ref
        self.x_star = np.asarray(loss_ref.minimizer, dtype=float)
        self.f_star = loss_ref.value(self.x_star)
        self.timing = timing
        self.t0 = time.perf_counter()

    def query(self, x):
        g, rec = self.oracle.sample(x)
        true = rec.true_grad if rec is not None else self.loss.grad(x)
        err = float(np.sum((g - true) ** 2))
        bound = rec.bound if rec is not None and rec.bound is not None else math.nan
        return g, err, bound

    def row(self, k, model, err, bound, inner=0):
        gap = self.loss.value(model) - self.f_star
        wall = (time.perf_counter() - self.t0) * 1e3 if self.timing else 0.0
        self.trace.rows.append(TraceRow(
            k, float(gap), float(np.linalg.norm(self.loss.grad(model))),
            float(np.linalg.norm(model - self.x_star)), err, float(bound), int(inner), wall,
        ))
        if not (gap <= DIVERGENCE_GAP):
            self.trace.diverged = True
            return False
        return True


def gd(oracle, loss_ref, x0, eta, K, timing=False):
    """x_{k+1} = x_k - eta * g_k with g_k from one oracle round."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    if K < 1:
        raise ValueError("K must be >= 1")
    rec = _Recorder("gd", oracle, loss_ref, timing)
    x = np.array(x0, dtype=float)
    for k in range(K):
        g, err, bound = rec.query(x)
        if not rec.row(k, x, err, bound):
            break
        x = x - eta * g
    rec.trace.x_final = x
    return rec.trace


def fgm(oracle, loss_ref, x0, L, mu, K, variant="derived", timing=False):
    """Byzantine-resilient fast gradient method.

    y_k = x_k - g_k / (2L), then x_{k+1} mixes x_k, y_k and y_{k-1} with the
    momentum weights of :func:`gamma_schedule`. ``variant`` selects the mixing:

    ``"derived"``
        x_{k+1} = (Gamma_k/Gamma_{k+1}) y_k
                  + (gamma_k/gamma_{k+1}) (mu/(4L) x_k + y_k - (Gamma_{k-1}/Gamma_k) y_{k-1}),
        which equals the three-sequence (y, z, x) method exactly.
    ``"appendix"``
        x_{k+1} = (gamma_k/gamma_{k+1}) (mu/(4L) x_k + y_k)
                  + (Gamma_{k-1}/Gamma_k) (y_k - (gamma_k/gamma_{k+1}) y_{k-1}).
    ``"maintext"``
        x_{k+1} = y_k + (Gamma_{k-1}/Gamma_k)(gamma_k/gamma_{k+1})(y_k - y_{k-1})
                  - (Gamma_{k-1}/Gamma_k) y_k + (gamma_k/gamma_{k+1}) mu/(4L) x_k.

    The last two do not preserve fixed points when x* != 0 (their weights do
    not sum to one); they are kept for comparison. At k = 0, y_{-1} := y_0 and
    Gamma_{-1} := 0. The trace reports the y sequence.
    """
    if variant not in FGM_VARIANTS:
        raise ValueError(f"unknown fgm variant {variant!r}; choose from {FGM_VARIANTS}")
    if not (L > 0 and mu > 0 and L >= mu):
        raise ValueError(f"fgm needs L >= mu > 0, got L={L}, mu={mu}")
    if K < 1:
        raise ValueError("K must be >= 1")
    a, b, c = gamma_schedule(L, mu, K).ratios()
    r = mu / (4.0 * L)
    rec = _Recorder(f"fgm[{variant}]", oracle, loss_ref, timing)
    x = np.array(x0, dtype=float)
    model = x.copy()
    y_prev = None
    for k in range(K):
        g, err, bound = rec.query(x)
        if not rec.row(k, model, err, bound):
            break
        y = x - g / (2.0 * L)
        if y_prev is None:
            y_prev = y
        if variant == "derived":
            x_next = c[k] * y + a[k] * (r * x + y - b[k] * y_prev)
        elif variant == "appendix":
            x_next = a[k] * (r * x + y) + b[k] * (y - a[k] * y_prev)
        else:
            x_next = y + b[k] * a[k] * (y - y_prev) - b[k] * y + a[k] * r * x
        y_prev, x, model = y, x_next, y
    rec.trace.x_final = model
    return rec.trace


# --------------------------------------------------------------------------- #
# proximal step under similarity


class ProxSolveError(RuntimeError):
    """Inner solver gave up; ``x_best`` and ``criterion`` describe its best iterate."""

    def __init__(self, msg, x_best=None, criterion=None, round=None):
        super().__init__(msg)
        self.x_best = x_best
        self.criterion = criterion
        self.round = round


@dataclass
class ProxSubproblem:
    """phi(x) = proxy(x) + <g_tilde - grad proxy(x_k), x> + ||x - x_k||^2 / (2 eta)."""

    proxy: object
    g_tilde_k: np.ndarray
    grad_proxy_at_xk: np.ndarray
    x_k: np.ndarray
    eta: float

    @classmethod
    def build(cls, proxy, g_tilde, x_k, eta):
        x_k = np.asarray(x_k, dtype=float)
        return cls(proxy, np.asarray(g_tilde, dtype=float), proxy.grad(x_k), x_k, float(eta))

    @property
    def shift(self):
        return self.g_tilde_k - self.grad_proxy_at_xk

    def value(self, x):
        d = x - self.x_k
        return self.proxy.value(x) + float(self.shift @ x) + float(d @ d) / (2 * self.eta)

    def grad(self, x):
        return self.proxy.grad(x) + self.shift + (x - self.x_k) / self.eta

    def value_and_grad(self, x):
        return self.value(x), self.grad(x)


@dataclass
class ProxResult:
    x_next: np.ndarray
    inner_iters: int
    criterion_value: float
    threshold: float


def prox_criterion(sub, x, c, E):
    """(||grad phi(x)||^2, c ||x - x_k||^2 + E^2)."""
    g = sub.grad(x)
    d = x - sub.x_k
    return float(g @ g), c * float(d @ d) + E * E


def _two_loop(g, S, Y, h0):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        al = rho * float(s @ q)
        alphas.append((rho, al))
        q -= al * y
    q *= h0
    for (s, y), (rho, al) in zip(zip(S, Y), reversed(alphas)):
        be = rho * float(y @ q)
        q += (al - be) * s
    return q


def solve_prox(sub, c, E, max_inner=500, memory=10, armijo=1e-4):
    """Warm-started L-BFGS on phi that stops at the first iterate with
    ||grad phi(x)||^2 <= c ||x - x_k||^2 + E^2.

    Raises :class:`ProxSolveError` (carrying the best iterate) when
    ``max_inner`` iterations do not reach the criterion.
    """
    if c < 0 or E < 0:
        raise ValueError("c and E must be >= 0")
    x = sub.x_k.copy()
    fx, g = sub.value_and_grad(x)
    gsq = float(g @ g)
    if gsq <= E * E:
        return ProxResult(x, 0, gsq, E * E)
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    L_hat = getattr(sub.proxy, "L", None)
    h0 = 1.0 / (1.0 / sub.eta + (L_hat or 0.0))
    best_x, best_gap = x, gsq - E * E
    for it in range(1, max_inner + 1):
        d = -_two_loop(g, S, Y, h0)
        slope = float(g @ d)
        if not slope < 0:
            S.clear(), Y.clear()
            d = -h0 * g
            slope = float(g @ d)
        t = 1.0
        noise = 8 * np.finfo(float).eps * max(1.0, abs(fx))
        for _ in range(60):
            x_new = x + t * d
            f_new, g_new = sub.value_and_grad(x_new)
            if f_new <= fx + armijo * t * slope:
                break
            # inside rounding noise: accept if the gradient shrank
            if f_new - fx <= noise and float(g_new @ g_new) < float(g @ g):
                break
            t *= 0.5
        else:
            raise ProxSolveError(
                f"line search failed at inner iteration {it}", best_x, best_gap)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(s @ s) * (1.0 / sub.eta):
            S.append(s)
            Y.append(y)
            h0 = sy / float(y @ y)
        x, fx, g = x_new, f_new, g_new
        gsq, rhs = prox_criterion(sub, x, c, E)
        if gsq - rhs < best_gap:
            best_x, best_gap = x, gsq - rhs
        if gsq <= rhs:
            return ProxResult(x, it, gsq, rhs)
    raise ProxSolveError(
        f"prox criterion not met after {max_inner} inner iterations "
        f"(best ||grad||^2 - rhs = {best_gap:.3e})", best_x, best_gap)


def _avg_weight(k, a):
    """beta_k / B_k for beta_k = (1+a)^k, B_k = sum_{i<=k} beta_i, computed without overflow."""
    if a == 0:
        return 1.0 / (k + 1)
    return a / (a - math.expm1(-k * math.log1p(a)))


def pigs(oracle, loss_ref, proxy, x0, eta, c=None, E=1e-6, K=100, max_inner=500,
         mu=None, timing=False):
    """Preconditioned inexact gradient under similarity.

    Each round samples one inexact gradient and approximately minimizes
    :class:`ProxSubproblem` with :func:`solve_prox`. Besides the last iterate,
    ``trace.x_avg`` holds the average of x_0..x_K with weights
    (1 + eta mu / 8)^k. ``c`` defaults to 1e-3 / eta.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if K < 1:
        raise ValueError("K must be >= 1")
    if c is None:
        c = 1e-3 / eta
    mu = loss_ref.mu if mu is None else mu
    a = eta * (mu or 0.0) / 8.0
    rec = _Recorder("pigs", oracle, loss_ref, timing)
    x = np.array(x0, dtype=float)
    x_avg = x.copy()
    avg_gaps = []
    accepted = []
    for k in range(K):
        g, err, bound = rec.query(x)
        sub = ProxSubproblem.build(proxy, g, x, eta)
        try:
            res = solve_prox(sub, c, E, max_inner=max_inner)
        except ProxSolveError as exc:
            exc.round = k
            exc.args = (f"round {k}: {exc.args[0]}",)
            raise
        if not rec.row(k, x, err, bound, res.inner_iters):
            break
        accepted.append((res.criterion_value, res.threshold))
        x = res.x_next
        w = _avg_weight(k + 1, a)
        x_avg = (1 - w) * x_avg + w * x
        avg_gaps.append(loss_ref.value(x_avg) - rec.f_star)
    rec.trace.x_final = x
    rec.trace.x_avg = x_avg
    rec.trace.info.update(c=c, E=E, eta=eta, prox_checks=accepted, avg_loss_gap=avg_gaps)
    return rec.trace
