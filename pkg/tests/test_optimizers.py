import math

import numpy as np
import pytest

from conftest import spd
from robustopt.optimizers import (
    ProxSolveError,
    ProxSubproblem,
    _avg_weight,
    fgm,
    gamma_schedule,
    gd,
    pigs,
    prox_criterion,
    solve_prox,
)
from robustopt.oracle import exact_oracle, make_oracle
from robustopt.problems import make_logistic, make_quadratic, mean_loss, reference_minimizer

# ---------------------------------------------------------------- schedule


def test_gamma_mu_zero_first_step_is_golden_ratio():
    s = gamma_schedule(1.0, 0.0, 3)
    assert float(s.gamma[1]) == pytest.approx((1 + math.sqrt(5)) / 2, rel=1e-15)
    assert float(s.Gamma[1]) == pytest.approx(1 + (1 + math.sqrt(5)) / 2, rel=1e-15)


@pytest.mark.parametrize("kappa", [10.0, 1e2, 1e4])
def test_gamma_recursion_residual(kappa):
    L = kappa
    s = gamma_schedule(L, 1.0, 10_000)
    assert max(s.residual(k) for k in range(10_000)) <= 1e-9 * L


def test_gamma_schedule_positive_and_increasing():
    s = gamma_schedule(4.0, 0.5, 200)
    assert all(b > a for a, b in zip(s.Gamma, s.Gamma[1:]))
    a, b, c = s.ratios()
    assert np.all((a > 0) & (a <= 1)) and b[0] == 0.0 and np.all((c > 0) & (c < 1))


def test_gamma_schedule_validation():
    for args in ((0.0, 0.0, 5), (1.0, -1.0, 5), (1.0, 0.1, 0)):
        with pytest.raises(ValueError):
            gamma_schedule(*args)


# ---------------------------------------------------------------- fixtures


@pytest.fixture
def quad(rng):
    A = spd(rng, 6, 1.0, 50.0)
    return make_quadratic(A, A @ rng.standard_normal(6))


# ---------------------------------------------------------------- gd


def test_gd_linear_rate_exact_oracle(quad):
    K = 200
    tr = gd(exact_oracle(quad), quad, np.zeros(6), 1.0 / quad.L, K)
    d = tr.column("dist_to_opt")
    rate = 1 - 1 / quad.kappa
    for k in range(K):
        assert d[k] <= rate ** k * d[0] * (1 + 1e-9) + 1e-13


def test_gd_trace_rows_and_counter(quad):
    o = exact_oracle(quad)
    tr = gd(o, quad, np.zeros(6), 0.01, 37)
    assert len(tr) == 37 == o.round_counter
    assert [r.round for r in tr.rows] == list(range(37))
    assert all(r.inner_iters == 0 for r in tr.rows)
    assert all(r.wall_ms == 0.0 for r in tr.rows)


def test_gd_divergence_is_flagged(quad):
    tr = gd(exact_oracle(quad), quad, np.ones(6), 10.0 / quad.L, 500)
    assert tr.diverged and len(tr) < 500


def test_optimizers_need_a_reference_minimizer():
    q = make_quadratic(np.diag([1.0, 0.0]), [0.0, 0.0])
    with pytest.raises(ValueError, match="minimizer"):
        gd(exact_oracle(q), q, np.zeros(2), 0.5, 3)


# ---------------------------------------------------------------- fgm


def three_sequence(grad, x0, L, mu, K):
    """y, z, x form with L~ = 2L, mu~ = mu/2 and tau_k = gamma_{k+1}/Gamma_{k+1}."""
    s = gamma_schedule(L, mu, K)
    gam = [float(v) for v in s.gamma]
    Gam = [float(v) for v in s.Gamma]
    Lt, mt = 2 * L, mu / 2
    x = np.array(x0, dtype=float)
    acc = Lt * x
    ys = []
    for k in range(K):
        g = grad(x)
        y = x - g / Lt
        ys.append(y)
        acc = acc + gam[k] * (mt * x - g)
        z = acc / (Lt + mt * Gam[k])
        tau = gam[k + 1] / Gam[k + 1]
        x = (1 - tau) * y + tau * z
    return ys


def test_fgm_derived_matches_three_sequence_oracle(quad):
    K = 60
    x0 = np.ones(6)
    tr = fgm(exact_oracle(quad), quad, x0, quad.L, quad.mu, K)
    ys = three_sequence(quad.grad, x0, quad.L, quad.mu, K)
    # row k holds y_{k-1}
    for k in range(1, K):
        assert tr.rows[k].dist_to_opt == pytest.approx(np.linalg.norm(ys[k - 1] - quad.minimizer), rel=1e-9, abs=1e-12)
    np.testing.assert_allclose(tr.x_final, ys[K - 1], rtol=1e-9, atol=1e-12)


def test_fgm_derived_preserves_fixed_point(quad):
    xs = quad.minimizer
    tr = fgm(exact_oracle(quad), quad, xs, quad.L, quad.mu, 300)
    assert np.all(tr.column("dist_to_opt") <= 1e-12 * max(1.0, np.linalg.norm(xs)))


@pytest.mark.parametrize("variant", ["appendix", "maintext"])
def test_other_fgm_variants_drift_from_fixed_point(quad, variant):
    tr = fgm(exact_oracle(quad), quad, quad.minimizer, quad.L, quad.mu, 50, variant=variant)
    assert tr.column("dist_to_opt").max() > 1e-3


def test_fgm_beats_gd_on_ill_conditioned_quadratic(rng):
    A = spd(rng, 10, 1.0, 1e3)
    q = make_quadratic(A, rng.standard_normal(10))
    K = 400
    t_gd = gd(exact_oracle(q), q, np.zeros(10), 1 / q.L, K)
    t_fgm = fgm(exact_oracle(q), q, np.zeros(10), q.L, q.mu, K)
    assert t_fgm.loss_gap[-1] < 1e-3 * t_gd.loss_gap[-1]


def test_fgm_validation(quad):
    with pytest.raises(ValueError):
        fgm(exact_oracle(quad), quad, np.zeros(6), 1.0, 2.0, 5)
    with pytest.raises(ValueError, match="variant"):
        fgm(exact_oracle(quad), quad, np.zeros(6), quad.L, quad.mu, 5, variant="x")


# ---------------------------------------------------------------- prox step


def test_solve_prox_matches_closed_form(rng):
    d = 5
    A = spd(rng, d, 0.5, 20.0)
    b = rng.standard_normal(d)
    proxy = make_quadratic(A, b)
    x_k = rng.standard_normal(d)
    g = rng.standard_normal(d)
    eta = 0.7
    sub = ProxSubproblem.build(proxy, g, x_k, eta)
    exact = np.linalg.solve(A + np.eye(d) / eta, b - sub.shift + x_k / eta)
    res = solve_prox(sub, c=0.0, E=1e-12)
    assert np.linalg.norm(res.x_next - exact) <= 1e-8
    gsq, rhs = prox_criterion(sub, res.x_next, 0.0, 1e-12)
    assert gsq <= rhs and res.inner_iters >= 1


def test_solve_prox_accepts_warm_start_when_stationary(rng):
    q = make_quadratic(np.eye(3), np.zeros(3))
    x_k = rng.standard_normal(3)
    # grad phi(x_k) = g_tilde, so a zero inexact gradient makes x_k stationary
    sub = ProxSubproblem.build(q, np.zeros(3), x_k, 1.0)
    res = solve_prox(sub, 0.0, 1e-8)
    assert res.inner_iters == 0 and np.array_equal(res.x_next, x_k)


def test_solve_prox_reports_failure_with_best_iterate(logistic_loss, rng):
    sub = ProxSubproblem.build(logistic_loss, 10 * rng.standard_normal(4), np.zeros(4), 1e6)
    with pytest.raises(ProxSolveError) as info:
        solve_prox(sub, c=0.0, E=0.0, max_inner=1)
    assert info.value.x_best is not None and info.value.criterion > 0


def test_avg_weight_matches_direct_sum():
    a = 0.05
    for k in range(30):
        beta = [(1 + a) ** i for i in range(k + 1)]
        assert _avg_weight(k, a) == pytest.approx(beta[-1] / sum(beta), rel=1e-12)
    assert _avg_weight(4, 0.0) == 0.2
    assert 0 < _avg_weight(10**6, 0.1) <= 1


# ---------------------------------------------------------------- pigs


@pytest.fixture
def logistic_clients(rng):
    out = []
    w = rng.standard_normal(5)
    for _ in range(6):
        X = rng.standard_normal((120, 5))
        y = np.where(X @ w + 0.5 * rng.standard_normal(120) > 0, 1.0, -1.0)
        out.append(make_logistic(X, y, 0.05))
    glob = mean_loss(out)
    glob.minimizer = reference_minimizer(glob)[0]
    return out, glob


PROX_CHECKS = []


def _check_prox(trace):
    checks = trace.info["prox_checks"]
    PROX_CHECKS.extend(checks)
    assert all(gsq <= rhs for gsq, rhs in checks)


def test_pigs_round_accounting_and_prox_contract(logistic_clients):
    clients, glob = logistic_clients
    o = make_oracle(clients, "cwtm", "alie:ls", f=1)
    tr = pigs(o, glob, clients[0], np.zeros(5), eta=2.0, E=1e-8, K=25)
    assert len(tr) == 25 == o.round_counter
    assert tr.x_avg is not None and len(tr.info["avg_loss_gap"]) == 25
    assert all(r.inner_iters >= 0 for r in tr.rows)
    _check_prox(tr)


def test_pigs_exact_oracle_converges(logistic_clients):
    clients, glob = logistic_clients
    tr = pigs(exact_oracle(glob), glob, clients[0], np.zeros(5), eta=5.0, E=0.0, K=40)
    assert tr.loss_gap[-1] < 1e-10
    _check_prox(tr)


def test_pigs_with_global_proxy_is_proximal_point(quad):
    # proxy = global loss: one round solves the proximal step exactly
    tr = pigs(exact_oracle(quad), quad, quad, np.zeros(6), eta=1e6, E=1e-12, K=3)
    assert tr.rows[1].dist_to_opt <= 1e-4 * tr.rows[0].dist_to_opt
    _check_prox(tr)


def test_pigs_inner_failure_names_the_round(logistic_clients):
    clients, glob = logistic_clients
    with pytest.raises(ProxSolveError, match="round 0"):
        pigs(exact_oracle(glob), glob, clients[0], 3 * np.ones(5), eta=1e3, c=0.0, E=0.0, K=3, max_inner=1)


def test_pigs_validation(quad):
    with pytest.raises(ValueError):
        pigs(exact_oracle(quad), quad, quad, np.zeros(6), eta=0.0)


# ---------------------------------------------------------------- further examples


def test_gamma_mu_zero_closed_form():
    s = gamma_schedule(3.0, 0.0, 50)
    for k in range(50):
        G = float(s.Gamma[k])
        assert float(s.gamma[k + 1]) == pytest.approx((1 + math.sqrt(1 + 4 * G)) / 2, rel=1e-14)


def test_gamma_large_mu_stays_finite_and_positive():
    s = gamma_schedule(1.0, 4.0, 1000)
    a, b, c = s.ratios()
    assert all(g > 0 for g in s.gamma)
    assert all(y >= x for x, y in zip(s.gamma, s.gamma[1:]))
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(c))


def test_gd_identity_quadratic_one_step(rng):
    q = make_quadratic(np.eye(4), rng.standard_normal(4))
    tr = gd(exact_oracle(q), q, rng.standard_normal(4), 1.0, 2)
    np.testing.assert_allclose(tr.x_final, q.minimizer, atol=1e-15)
    assert tr.rows[1].dist_to_opt <= 1e-15


def test_gd_exact_oracle_gap_monotone(quad):
    tr = gd(exact_oracle(quad), quad, 5 * np.ones(6), 1 / quad.L, 300)
    assert np.all(np.diff(tr.loss_gap) <= 1e-14)


def test_fgm_rounds_within_sqrt_kappa_log_bound(rng):
    d, kappa = 20, 1e4
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    A = Q @ np.diag(np.geomspace(1, kappa, d)) @ Q.T
    q = make_quadratic(A, A @ rng.standard_normal(d))
    limit = 10 * math.sqrt(kappa) * math.log(1e6)
    tr = fgm(exact_oracle(q), q, np.zeros(d), q.L, q.mu, int(limit) + 1)
    gaps = tr.loss_gap
    assert np.any(gaps <= 1e-6 * gaps[0])


@pytest.mark.parametrize("method", ["gd", "fgm", "pigs"])
def test_all_methods_fix_the_minimizer(quad, method):
    o = exact_oracle(quad)
    xs = quad.minimizer
    if method == "gd":
        tr = gd(o, quad, xs, 1 / quad.L, 100)
    elif method == "fgm":
        tr = fgm(o, quad, xs, quad.L, quad.mu, 100)
    else:
        tr = pigs(o, quad, quad, xs, eta=1.0, E=1e-10, K=20)
    assert tr.column("dist_to_opt").max() <= 1e-12 * max(1.0, np.linalg.norm(xs))


def test_prox_subproblem_gradient_matches_fd(logistic_loss, rng):
    sub = ProxSubproblem.build(logistic_loss, rng.standard_normal(4), rng.standard_normal(4), 0.8)
    from conftest import fd_grad

    for _ in range(5):
        x = rng.standard_normal(4)
        np.testing.assert_allclose(sub.grad(x), fd_grad(sub.value, x), rtol=1e-6, atol=1e-8)


def test_pigs_huge_step_with_exact_proxy_lands_on_minimizer(logistic_clients):
    _, glob = logistic_clients
    eta = 1e6 / glob.mu
    tr = pigs(exact_oracle(glob), glob, glob, np.zeros(5), eta=eta, E=1e-10, K=2)
    assert np.linalg.norm(tr.x_final - glob.minimizer) <= 1e-6
    _check_prox(tr)
