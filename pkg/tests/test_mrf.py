import numpy as np
import pytest

from eplrmf.data import ObservedMatrix
from eplrmf.em import EmConfig, fit_pmoep
from eplrmf.mixture import MoEPModel, Responsibilities, e_step
from eplrmf.mrf import GridShape, MrfConfig, fit_pmoep_mrf, lower_bound, neighbor_sums, variational_e_step


def full_observed(shape):
    return ObservedMatrix(np.zeros(shape), np.ones(shape, dtype=bool))


def test_edges_are_symmetric_and_counted():
    grid = GridShape(height=3, width=3, frames=2)
    data = full_observed((9, 2))
    edges = grid.edges(data)
    # directed edges: spatial 2*(vertical 6 + horizontal 6) per frame * 2 frames
    # plus temporal 2*9
    assert edges.shape[0] == 2 * (12 * 2 + 9)
    pairs = set(map(tuple, edges))
    assert all((b, a) in pairs for a, b in pairs)


def test_interior_entry_has_six_neighbors():
    grid = GridShape(height=5, width=5, frames=3)
    data = full_observed((25, 3))
    edges = grid.edges(data)
    # entry: pixel (2,2) in frame 1 -> flat obs index = (2*5+2)*3 + 1
    target = (2 * 5 + 2) * 3 + 1
    assert np.count_nonzero(edges[:, 0] == target) == 6


def test_missing_entries_are_not_coupled():
    mask = np.ones((4, 2), dtype=bool)
    mask[1, 0] = False
    data = ObservedMatrix(np.zeros((4, 2)), mask)
    grid = GridShape(height=2, width=2, frames=2)
    edges = grid.edges(data)
    assert np.all(edges < data.n_obs)
    # the missing entry contributed no edges: its spatial+temporal partners
    # each lost one directed pair
    full = GridShape(height=2, width=2, frames=2).edges(full_observed((4, 2)))
    assert edges.shape[0] < full.shape[0]


def test_grid_shape_mismatch_raises():
    grid = GridShape(height=4, width=4, frames=3)
    with pytest.raises(ValueError):
        grid.check((15, 3))


def test_neighbor_sums_accumulate_both_directions():
    edges = np.array([[0, 1], [1, 0]])
    gamma = np.array([[1.0, 0.0], [0.25, 0.75]])
    out = neighbor_sums(edges, gamma)
    np.testing.assert_allclose(out, [[0.25, 0.75], [1.0, 0.0]])


def test_tau_zero_reduces_to_plain_e_step():
    rng = np.random.default_rng(0)
    model = MoEPModel(p=[1.0, 2.0], eta=[1.0, 4.0], pi=[0.4, 0.6])
    e = rng.normal(0, 1, 8)
    grid = GridShape(height=2, width=2, frames=2)
    edges = grid.edges(full_observed((4, 2)))
    init = Responsibilities(np.full((8, 2), 0.5))
    out = variational_e_step(e, model, edges, MrfConfig(tau=0.0), init)
    np.testing.assert_array_equal(out.gamma, e_step(e, model).gamma)


def test_no_neighbors_reduces_to_plain_e_step():
    model = MoEPModel(p=[1.0, 2.0], eta=[1.0, 4.0], pi=[0.4, 0.6])
    e = np.array([0.7])
    init = Responsibilities(np.array([[0.9, 0.1]]))
    out = variational_e_step(e, model, np.zeros((0, 2), dtype=np.int64),
                             MrfConfig(tau=10.0), init)
    np.testing.assert_array_equal(out.gamma, e_step(e, model).gamma)


def test_strong_coupling_reaches_consensus_on_2x2():
    # uniform likelihoods: identical components, so the data term cancels and
    # the coupled fixed point is driven purely by the neighbour field
    model = MoEPModel(p=[2.0, 2.0], eta=[1.0, 1.0], pi=[0.5, 0.5])
    e = np.zeros(4)
    grid = GridShape(height=2, width=2, frames=1, scheme="spatial4")
    edges = grid.edges(full_observed((4, 1)))
    gamma0 = np.full((4, 2), 0.5)
    gamma0[:, 0] += 0.02
    gamma0[:, 1] -= 0.02
    cfg = MrfConfig(tau=10.0, max_sweeps=500, damping=0.5)
    out = variational_e_step(e, model, edges, cfg, Responsibilities(gamma0))
    assert np.all(out.gamma[:, 0] > 0.99)

    # independent oracle: exhaustive damped evaluation of the fixed-point map
    g = gamma0.copy()
    for _ in range(500):
        s = np.zeros_like(g)
        for a, b in edges:
            s[a] += g[b]
        unnorm = 0.5 * np.exp(10.0 * s) * (1.0 / np.sqrt(np.pi))
        new = unnorm / unnorm.sum(axis=1, keepdims=True)
        g = 0.5 * g + 0.5 * new
    np.testing.assert_allclose(out.gamma, g, atol=1e-6)


def test_lower_bound_at_exact_posterior_matches_loglik():
    rng = np.random.default_rng(1)
    model = MoEPModel(p=[0.5, 2.0], eta=[0.5, 3.0], pi=[0.3, 0.7])
    e = rng.normal(0, 1, 10)
    resp = e_step(e, model)
    edges = np.zeros((0, 2), dtype=np.int64)
    got = lower_bound(e, model, edges, MrfConfig(tau=0.0), resp)
    want = float(model.mixture_log_pdf(e).sum())
    assert got == pytest.approx(want, rel=1e-10)


def test_lower_bound_single_component_counts_pairs():
    model = MoEPModel(p=[2.0], eta=[1.0], pi=[1.0])
    e = np.array([0.1, -0.2, 0.3, 0.05])
    grid = GridShape(height=2, width=2, frames=1, scheme="spatial4")
    edges = grid.edges(full_observed((4, 1)))
    resp = Responsibilities(np.ones((4, 1)))
    tau = 2.5
    got = lower_bound(e, model, edges, MrfConfig(tau=tau), resp)
    data_term = float(model.mixture_log_pdf(e).sum())
    assert got == pytest.approx(data_term + tau * edges.shape[0], rel=1e-12)


def test_lower_bound_toy_against_high_precision():
    import mpmath as mp

    mp.mp.dps = 40
    model = MoEPModel(p=[1.0, 2.0], eta=[2.0, 5.0], pi=[0.25, 0.75])
    e = np.array([0.3, -0.4, 0.0, 1.2])
    gamma = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [1.0, 0.0]])
    grid = GridShape(height=2, width=2, frames=1, scheme="spatial4")
    edges = grid.edges(full_observed((4, 1)))
    tau = 1.7
    got = lower_bound(e, model, edges, MrfConfig(tau=tau), Responsibilities(gamma))

    def logf(x, p, eta):
        p, eta, x = map(mp.mpf, (p, eta, x))
        return mp.log(p * eta ** (1 / p) / (2 * mp.gamma(1 / p))) - eta * abs(x) ** p

    want = mp.mpf(0)
    for i in range(4):
        for k, (p, eta, pi) in enumerate([(1.0, 2.0, 0.25), (2.0, 5.0, 0.75)]):
            if gamma[i, k] > 0:
                g = mp.mpf(gamma[i, k])
                want += g * (mp.log(mp.mpf(pi)) + logf(e[i], p, eta)) - g * mp.log(g)
    for a, b in edges:
        for k in range(2):
            want += mp.mpf(tau) * (2 * mp.mpf(gamma[a, k]) - 1) * (2 * mp.mpf(gamma[b, k]) - 1)
    assert got == pytest.approx(float(want), rel=1e-12)


def test_tau_zero_fit_is_bitwise_identical_to_plain_fit():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((16, 4)) @ rng.standard_normal((4, 6))
    y += rng.normal(0, 0.1, y.shape)
    grid = GridShape(height=4, width=4, frames=6)
    for seed in (0, 1, 2):
        cfg = EmConfig(rank=2, p_candidates=(1.0, 2.0), lam=0.02, restarts=2, seed=seed)
        plain = fit_pmoep(y, cfg)
        coupled = fit_pmoep_mrf(y, grid, cfg, MrfConfig(tau=0.0))
        np.testing.assert_array_equal(plain.objective_trace, coupled.objective_trace)
        np.testing.assert_array_equal(plain.factors.u, coupled.factors.u)
        np.testing.assert_array_equal(plain.factors.v, coupled.factors.v)


def test_responsibilities_stay_normalized_through_sweeps():
    rng = np.random.default_rng(4)
    model = MoEPModel(p=[0.5, 2.0], eta=[1.0, 10.0], pi=[0.5, 0.5])
    e = rng.normal(0, 0.5, 12)
    grid = GridShape(height=2, width=2, frames=3)
    edges = grid.edges(full_observed((4, 3)))
    init = e_step(e, model)
    out = variational_e_step(e, model, edges, MrfConfig(tau=3.0), init)
    np.testing.assert_allclose(out.gamma.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(out.gamma >= 0)


def test_mrf_config_validation():
    with pytest.raises(ValueError):
        MrfConfig(tau=-1.0)
    with pytest.raises(ValueError):
        MrfConfig(tau=1.0, damping=0.0)
    with pytest.raises(ValueError):
        GridShape(height=2, width=2, frames=1, scheme="eight")
