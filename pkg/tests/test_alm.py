import numpy as np
import pytest

from eplrmf.alm import (
    AlmOptions,
    AlmState,
    ProxWeights,
    factor_step,
    l_step,
    prox_scalar,
    prox_vector,
    solve_weighted_l2,
    solve_weighted_lrmf,
)
from eplrmf.data import FactorPair, ObservedMatrix


def prox_grid_oracle(t, pairs, rho, levels=3, points=20001):
    """Independent dense-grid + local-refinement minimizer."""
    tt, sgn = abs(t), np.sign(t)
    coeff = np.array([c for c, _ in pairs])
    powers = np.array([p for _, p in pairs])

    def obj(s):
        return 0.5 * (tt - s) ** 2 + (coeff * s[:, None] ** powers[None, :]).sum(1) / rho

    lo, hi = 0.0, max(tt, 1e-12)
    for _ in range(levels):
        s = np.linspace(lo, hi, points)
        vals = obj(s)
        i = int(np.argmin(vals))
        lo, hi = s[max(i - 1, 0)], s[min(i + 1, points - 1)]
    return sgn * 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# factor_step


def test_factor_step_exact_rank_recovery():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((9, 5)) @ rng.standard_normal((5, 7))
    target = factor_step(target, 5).product()  # make it exactly rank 5
    fp = factor_step(target, 5)
    assert np.linalg.norm(target - fp.product()) <= 1e-10 * np.linalg.norm(target)


def test_factor_step_identity_residual():
    fp = factor_step(np.eye(4), 2)
    assert np.linalg.norm(np.eye(4) - fp.product()) ** 2 == pytest.approx(2.0, abs=1e-12)


def test_factor_step_matches_tail_energy():
    rng = np.random.default_rng(1)
    target = rng.standard_normal((40, 20))
    fp = factor_step(target, 4)
    tail = np.linalg.svd(target, compute_uv=False)[4:]
    resid = np.linalg.norm(target - fp.product()) ** 2
    assert resid == pytest.approx(float((tail**2).sum()), rel=1e-10)


def test_factor_step_eckart_young_dominance():
    # no rank-r competitor beats the truncated SVD residual
    rng = np.random.default_rng(2)
    target = rng.standard_normal((15, 12))
    fp = factor_step(target, 3)
    best = np.linalg.norm(target - fp.product())
    for _ in range(10):
        u = rng.standard_normal((15, 3))
        v = rng.standard_normal((12, 3))
        assert np.linalg.norm(target - u @ v.T) >= best - 1e-12


def test_factor_step_errors():
    with pytest.raises(ValueError):
        factor_step(np.array([[np.nan, 1.0], [0.0, 1.0]]), 1)
    with pytest.raises(ValueError):
        factor_step(np.eye(3), 4)


def test_balanced_split():
    rng = np.random.default_rng(3)
    fp = factor_step(rng.standard_normal((8, 6)), 2)
    # U and V carry sqrt of the singular values: their Gram diagonals agree
    np.testing.assert_allclose(
        np.linalg.norm(fp.u, axis=0), np.linalg.norm(fp.v, axis=0), rtol=1e-12
    )


# ---------------------------------------------------------------------------
# prox


def test_prox_quadratic_closed_form():
    assert prox_scalar(1.0, [(2.0, 2.0)], 1.0) == pytest.approx(0.2, abs=1e-14)
    assert prox_scalar(-3.0, [(0.5, 2.0)], 2.0) == pytest.approx(-3.0 / 1.5, abs=1e-14)


def test_prox_soft_threshold():
    assert prox_scalar(1.0, [(0.3, 1.0)], 1.0) == pytest.approx(0.7, abs=1e-14)
    assert prox_scalar(0.2, [(0.5, 1.0)], 1.0) == 0.0
    assert prox_scalar(-1.0, [(0.3, 1.0)], 1.0) == pytest.approx(-0.7, abs=1e-14)


def test_prox_nonconvex_example_with_grid_oracle():
    pairs = [(2.0, 0.5)]
    got = prox_scalar(1.0, pairs, 1.0)
    want = prox_grid_oracle(1.0, pairs, 1.0)
    assert got == pytest.approx(want, abs=1e-6)
    assert got == 0.0  # the nonsmooth point wins this instance


@pytest.mark.parametrize("seed", range(40))
def test_prox_randomized_against_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    powers = rng.choice([0.2, 0.5, 1.0, 1.5, 2.0], size=k)
    pairs = [(float(c), float(p)) for c, p in zip(rng.gamma(1.0, 2.0, k), powers)]
    t = float(rng.normal(0, 3))
    rho = float(rng.gamma(2.0, 1.0) + 0.05)
    got = prox_scalar(t, pairs, rho)
    want = prox_grid_oracle(t, pairs, rho)
    assert got == pytest.approx(want, abs=1e-6)


def test_prox_odd_in_t():
    rng = np.random.default_rng(9)
    coeff = rng.gamma(1.0, 1.0, (50, 3))
    powers = np.array([0.5, 1.0, 2.0])
    t = rng.normal(0, 2, 50)
    plus = prox_vector(t, coeff, powers, 0.7)
    minus = prox_vector(-t, coeff, powers, 0.7)
    np.testing.assert_array_equal(plus, -minus)


def test_prox_dominates_random_probes():
    rng = np.random.default_rng(10)
    coeff = rng.gamma(1.0, 2.0, (30, 2))
    powers = np.array([0.2, 1.5])
    t = rng.normal(0, 2, 30)
    rho = 0.9
    s = prox_vector(t, coeff, powers, rho)

    def objective(x):
        return 0.5 * (t - x) ** 2 + (coeff * np.abs(x)[:, None] ** powers[None, :]).sum(1) / rho

    base = objective(s)
    assert np.all(base <= objective(np.zeros_like(t)) + 1e-12)
    assert np.all(base <= objective(t) + 1e-12)
    for _ in range(10):
        probe = rng.uniform(-2, 2, 30) * np.abs(t)
        assert np.all(base <= objective(probe) + 1e-12)


def test_prox_zero_weights_returns_t():
    t = np.array([0.5, -1.2, 3.0])
    out = prox_vector(t, np.zeros((3, 2)), np.array([0.5, 2.0]), 1.0)
    np.testing.assert_allclose(out, t, atol=1e-12)


def test_prox_empty_input():
    out = prox_vector(np.zeros(0), np.zeros((0, 2)), np.array([1.0, 2.0]), 1.0)
    assert out.size == 0


def test_prox_rejects_bad_rho():
    with pytest.raises(ValueError):
        prox_scalar(1.0, [(1.0, 1.0)], 0.0)


# ---------------------------------------------------------------------------
# l_step


def _state(shape, rho=2.0, mult=None):
    return AlmState(
        l=np.zeros(shape),
        mult=np.zeros(shape) if mult is None else mult,
        rho=rho,
        alpha=1.05,
    )


def test_l_step_no_observations():
    rng = np.random.default_rng(4)
    y = np.full((5, 4), np.nan)
    y[0, 0] = 1.0  # ObservedMatrix requires at least a well-formed array
    data = ObservedMatrix(np.zeros((5, 4)), np.zeros((5, 4), dtype=bool))
    factors = FactorPair(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)))
    mult = rng.standard_normal((5, 4))
    state = _state((5, 4), rho=2.0, mult=mult)
    weights = ProxWeights(np.zeros((0, 1)), np.array([1.0]))
    out = l_step(data, factors, state, weights)
    np.testing.assert_allclose(out, factors.product() - mult / 2.0, atol=1e-14)


def test_l_step_zero_weights_equals_unobserved_solution():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((4, 3))
    data = ObservedMatrix(y, np.ones((4, 3), dtype=bool))
    factors = FactorPair(rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    mult = rng.standard_normal((4, 3))
    state = _state((4, 3), rho=1.7, mult=mult)
    weights = ProxWeights(np.zeros((12, 1)), np.array([1.0]))
    out = l_step(data, factors, state, weights)
    np.testing.assert_allclose(out, factors.product() - mult / 1.7, atol=1e-12)


def test_l_step_single_gaussian_component_closed_form():
    rng = np.random.default_rng(6)
    y = rng.standard_normal((3, 3))
    data = ObservedMatrix(y, np.ones((3, 3), dtype=bool))
    factors = FactorPair(rng.standard_normal((3, 1)), rng.standard_normal((3, 1)))
    mult = rng.standard_normal((3, 3))
    rho, c = 2.5, 1.3
    state = _state((3, 3), rho=rho, mult=mult)
    weights = ProxWeights(np.full((9, 1), c), np.array([2.0]))
    out = l_step(data, factors, state, weights)
    uv = factors.product()
    t = y - uv + mult / rho
    s = t / (1 + 2 * c / rho)
    np.testing.assert_allclose(out, y - s, atol=1e-12)


# ---------------------------------------------------------------------------
# solvers


def test_alm_recovers_noiseless_low_rank():
    rng = np.random.default_rng(7)
    y = rng.standard_normal((12, 8)) @ rng.standard_normal((8, 3))
    y = factor_step(y, 3).product()
    data = ObservedMatrix(y, np.ones_like(y, dtype=bool))
    weights = ProxWeights(np.ones((y.size, 1)), np.array([2.0]))
    init = factor_step(y + 0.1 * rng.standard_normal(y.shape), 3)
    factors, info = solve_weighted_lrmf(data, weights, 3, init)
    rel = np.linalg.norm(y - factors.product()) / np.linalg.norm(y)
    assert rel <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_alm_matches_weighted_l2_solver(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((40, 20)) + rng.standard_normal((40, 4)) @ rng.standard_normal((4, 20))
    mask = rng.random((40, 20)) > 0.2
    data = ObservedMatrix(np.where(mask, y, 0.0), mask)
    coeff = rng.gamma(2.0, 1.0, (data.n_obs, 2))
    weights = ProxWeights(coeff, np.array([2.0, 2.0]))
    init = factor_step(data.y, 4)
    fa, _ = solve_weighted_lrmf(data, weights, 4, init)
    amp = np.zeros(data.shape)
    amp[data.obs_rows, data.obs_cols] = np.sqrt(coeff.sum(1))
    fw, _ = solve_weighted_l2(data, amp, 4, init, max_iter=500, tol=1e-14)
    oa = weights.objective(data.residuals(fa.u, fa.v))
    ow = weights.objective(data.residuals(fw.u, fw.v))
    assert oa <= ow * (1 + 1e-4)


def test_alm_l1_robust_recovery():
    # ground truth with entries bounded away from zero so the corrupted entry
    # is not absorbable by a cheap rank-1 warp; from a nearby init the L1 prox
    # path settles on the truth while the quadratic path is dragged away
    rng = np.random.default_rng(8)
    signs = lambda size: rng.integers(0, 2, size) * 2 - 1
    u = (0.8 + rng.random((6, 1))) * signs((6, 1))
    v = (0.8 + rng.random((4, 1))) * signs((4, 1))
    y_clean = u @ v.T
    y = y_clean.copy()
    y[2, 2] += 25.0
    data = ObservedMatrix(y, np.ones_like(y, dtype=bool))
    init = FactorPair(
        u + 0.1 * rng.standard_normal(u.shape), v + 0.1 * rng.standard_normal(v.shape)
    )
    opts = AlmOptions(rho0=1.0, alpha=1.1, max_iter=300, tol=1e-7)
    weights = ProxWeights(np.ones((24, 1)), np.array([1.0]))
    factors, info = solve_weighted_lrmf(data, weights, 1, init, opts)
    clean = np.ones_like(y, dtype=bool)
    clean[2, 2] = False
    err = np.max(np.abs((y_clean - factors.product())[clean]))
    assert np.abs(y - factors.product()).sum() == pytest.approx(25.0, abs=1e-4)
    assert err <= 1e-3
    # same data and init under a pure quadratic loss: the outlier drags the fit
    l2_factors, _ = solve_weighted_lrmf(
        data, ProxWeights(np.ones((24, 1)), np.array([2.0])), 1, init, opts
    )
    l2_err = np.max(np.abs((y_clean - l2_factors.product())[clean]))
    assert l2_err > 10 * err


def test_alm_feasibility_tail_non_increasing():
    rng = np.random.default_rng(11)
    y = rng.standard_normal((10, 6))
    data = ObservedMatrix(y, np.ones_like(y, dtype=bool))
    weights = ProxWeights(rng.gamma(1.0, 1.0, (60, 1)), np.array([1.0]))
    _, info = solve_weighted_lrmf(data, weights, 2, factor_step(y, 2))
    trace = info["feasibility_trace"]
    tail = trace[-20:]
    assert np.all(np.diff(tail) <= 1e-12 * (1 + tail[:-1]))


def test_weighted_l2_uniform_weights_equals_svd():
    rng = np.random.default_rng(12)
    y = rng.standard_normal((10, 7))
    data = ObservedMatrix(y, np.ones_like(y, dtype=bool))
    init = FactorPair(rng.standard_normal((10, 3)), rng.standard_normal((7, 3)))
    factors, info = solve_weighted_l2(data, np.ones_like(y), 3, init, max_iter=300, tol=1e-14)
    got = np.linalg.norm(y - factors.product()) ** 2
    want = float((np.linalg.svd(y, compute_uv=False)[3:] ** 2).sum())
    assert got == pytest.approx(want, abs=1e-8 * (1 + want))


def test_weighted_l2_objective_non_increasing():
    rng = np.random.default_rng(13)
    y = rng.standard_normal((40, 20))
    mask = rng.random((40, 20)) > 0.2
    data = ObservedMatrix(np.where(mask, y, 0.0), mask)
    init = FactorPair(rng.standard_normal((40, 4)), rng.standard_normal((20, 4)))
    _, info = solve_weighted_l2(data, mask.astype(float), 4, init)
    trace = info["objective_trace"]
    assert np.all(np.diff(trace) <= 1e-10 * (1 + trace[:-1]))


def test_weighted_l2_hand_built_analytic_solution():
    # 2x2 rank-1 with weight zero at (1,1): exact fit of the three weighted
    # entries forces prediction 6 at the free corner
    y = np.array([[1.0, 2.0], [3.0, 7.0]])
    w = np.array([[1.0, 1.0], [1.0, 0.0]])
    data = ObservedMatrix(y, np.ones_like(y, dtype=bool))
    init = FactorPair(np.array([[1.0], [1.0]]), np.array([[1.0], [1.0]]))
    factors, info = solve_weighted_l2(data, w, 1, init, max_iter=200, tol=1e-15)
    fitted = factors.product()
    np.testing.assert_allclose(fitted[w > 0], y[w > 0], atol=1e-8)
    assert fitted[1, 1] == pytest.approx(6.0, abs=1e-7)


def test_alm_options_validation():
    with pytest.raises(ValueError):
        AlmOptions(rho0=0.0)
    with pytest.raises(ValueError):
        AlmOptions(alpha=1.0)
    with pytest.raises(ValueError):
        ProxWeights(np.ones((3, 1)), np.array([-1.0]))
    with pytest.raises(ValueError):
        ProxWeights(-np.ones((3, 1)), np.array([1.0]))
