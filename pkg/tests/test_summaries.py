import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dirfactor.design import CovariateMatrix, Term
from dirfactor.errors import CovariateError, DataError
from dirfactor.model import LatentState, composition_from_state
from dirfactor.sampler import Chain
from dirfactor.summaries import (TrendGrid, age_group_average, composition_at, derivative,
                                 discrete_difference, lowess_smooth, population_average,
                                 population_trend, rescaled_v, rv_coefficient,
                                 sample_correlation, species_gram, trace_sigma, truth_trend,
                                 write_matrix_csv)


def random_state(seed, I=6, J=5, K=3, P=3, U=None, grouping=None):
    rng = np.random.default_rng(seed)
    U = J if U is None else U
    grouping = np.arange(J) if grouping is None else np.asarray(grouping)
    return LatentState(sigma=rng.uniform(0.1, 0.9, I), X=rng.normal(size=(K, I)),
                       Y=rng.normal(size=(K, U)), v=rng.normal(size=(P, I)),
                       Q=np.abs(rng.normal(size=(I, J))) + 0.2, T=np.ones(J),
                       delta=np.ones(K), grouping=grouping)


def mixed_covariates(J=5, seed=0):
    rng = np.random.default_rng(seed)
    raw = np.vstack([rng.uniform(-1, 1, J), np.arange(J) % 2])
    terms = [Term("linear", ("w1",)), Term("linear", ("w2",), binary=True),
             Term("interaction", ("w1", "w2"))]
    return CovariateMatrix(raw, ["w1", "w2"], terms)


# ---------------------------------------------------------------- rescaled v

def test_rescaled_v_zero_Y():
    s = random_state(0)
    s.Y[:] = 0
    np.testing.assert_allclose(rescaled_v(s), s.v / np.sqrt(5))


def test_rescaled_v_trace_oracle():
    s = random_state(1, J=6, U=3, grouping=[0, 0, 1, 1, 2, 2])
    Yj = s.Y[:, s.grouping]
    tr = np.trace(Yj.T @ Yj + np.eye(6))
    assert abs(trace_sigma(s) - tr) < 1e-10
    np.testing.assert_allclose(rescaled_v(s), s.v / np.sqrt(tr), atol=1e-14)


def test_rescaled_v_rotation_invariant():
    s = random_state(2)
    R, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))
    t = s.copy()
    t.Y = R @ s.Y
    np.testing.assert_allclose(rescaled_v(t), rescaled_v(s), atol=1e-12)


# ---------------------------------------------------------------- similarity

def test_sample_correlation_zero_Y():
    s = random_state(3)
    s.Y[:] = 0
    np.testing.assert_array_equal(sample_correlation(s), np.eye(5))


def test_sample_correlation_blocks():
    s = random_state(4, J=4, K=4)
    s.Y[2:, :2] = 0
    s.Y[:2, 2:] = 0
    S = sample_correlation(s)
    assert np.all(S[:2, 2:] == 0) and np.all(S[2:, :2] == 0)


def test_sample_correlation_loop_oracle():
    s = random_state(5, J=6, U=3, grouping=[0, 1, 1, 2, 2, 0])
    S = sample_correlation(s)
    Sig = s.Y.T @ s.Y + np.eye(3)
    for a in range(3):
        for b in range(3):
            assert abs(S[a, b] - Sig[a, b] / np.sqrt(Sig[a, a] * Sig[b, b])) < 1e-12
    assert sample_correlation(s, level="samples").shape == (6, 6)


def test_species_gram():
    s = random_state(6)
    s.X[:, 1] = s.X[:, 0] * 3
    G = species_gram(s, "X")
    assert abs(G[0, 1] - 1) < 1e-12
    for a in range(6):
        for b in range(6):
            ref = s.X[:, a] @ s.X[:, b] / np.linalg.norm(s.X[:, a]) / np.linalg.norm(s.X[:, b])
            assert abs(G[a, b] - np.clip(ref, -1, 1)) < 1e-12
    s.v = np.array([[1.0, 0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0, 0], [0, 0, 1, 1, 1, 1.0]])
    assert species_gram(s, "v")[0, 1] == 0


def test_species_gram_zero_norm_flagged():
    s = random_state(7)
    s.v[:, 2] = 0
    with pytest.warns(RuntimeWarning, match="species"):
        G = species_gram(s, "v")
    assert np.all(G[2, np.arange(6) != 2] == 0) and G[2, 2] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_similarity_properties(seed):
    s = random_state(seed)
    for M in (sample_correlation(s), species_gram(s, "X"), species_gram(s, "v")):
        np.testing.assert_allclose(M, M.T, atol=1e-15)
        np.testing.assert_array_equal(np.diag(M), 1.0)
        assert np.all(np.abs(M) <= 1)
    assert np.linalg.eigvalsh(sample_correlation(s)).min() > -1e-8


# ---------------------------------------------------------------- RV

def test_rv_examples():
    A = np.diag([1.0, 0.0])
    B = np.diag([0.0, 1.0])
    assert rv_coefficient(A, A) == pytest.approx(1.0)
    assert rv_coefficient(A, B) == 0.0
    with pytest.raises(ValueError):
        rv_coefficient(np.zeros((2, 2)), A)
    with pytest.raises(ValueError):
        rv_coefficient(np.eye(2), np.eye(3))


def test_rv_trace_oracle():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    A, B = a @ a.T, b @ b.T
    ref = np.trace(A @ B) / np.sqrt(np.trace(A @ A) * np.trace(B @ B))
    assert abs(rv_coefficient(A, B) - ref) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_rv_properties(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    A, B = a @ a.T, b @ b.T
    r = rv_coefficient(A, B)
    assert 0 <= r <= 1 + 1e-12
    assert abs(r - rv_coefficient(B, A)) < 1e-12
    assert abs(r - rv_coefficient(c * A, B)) < 1e-10


# ---------------------------------------------------------------- counterfactuals

def test_composition_at_reproduces_state():
    s = random_state(9)
    cov = mixed_covariates()
    for j in range(5):
        np.testing.assert_allclose(composition_at(s, cov, j), composition_from_state(s.sigma, s.Q[:, j]),
                                   atol=1e-12)


def test_composition_at_fresh_eps_on_simplex():
    s = random_state(10)
    s.X[:] = 0
    s.v[:] = 0
    P = composition_at(s, mixed_covariates(), 0, {"w1": 0.3}, rng=np.random.default_rng(0))
    assert abs(P.sum() - 1) < 1e-12 and np.all(P >= 0)


def test_composition_mean_vs_quadrature():
    # I = 2 species, no factors or effects: E_eps P_1 by 2-D quadrature
    m1, m2, s1, s2 = 2.0, 2.5, 0.3, 0.6
    state = LatentState(sigma=np.array([s1, s2]), X=np.array([[m1, m2]]), Y=np.array([[1.0]]),
                        v=np.zeros((1, 2)), Q=np.ones((2, 1)), T=np.ones(1), delta=np.ones(1))
    cov = CovariateMatrix([[0.0]], ["w"])

    def inner(q1):
        tail = stats.norm.cdf(-m2)
        body = integrate.quad(lambda q2: stats.norm.pdf(q2 - m2) * s1 * q1 * q1
                              / (s1 * q1 * q1 + s2 * q2 * q2), 0, np.inf, epsabs=1e-12)[0]
        return stats.norm.pdf(q1 - m1) * (tail + body)

    oracle = integrate.quad(inner, 0, np.inf, epsabs=1e-12)[0]
    rng = np.random.default_rng(11)
    n = 100_000
    eps = rng.standard_normal((n, 2))
    q = np.maximum(np.array([m1, m2]) + eps, 0) ** 2 * [s1, s2]
    ok = q.sum(axis=1) > 0
    allv = q[ok, 0] / q[ok].sum(axis=1)
    # the library agrees with the vectorized formula draw by draw
    vals = np.array([composition_at(state, cov, 0, eps=e)[0] for e in eps[ok][:20_000]])
    np.testing.assert_allclose(vals, allv[:20_000], atol=1e-12)
    assert abs(allv.mean() - oracle) < 4 * allv.std() / np.sqrt(allv.size)


def test_derivative_examples():
    s = random_state(12)
    cov = mixed_covariates()
    s.v[:] = 0
    np.testing.assert_array_equal(derivative(s, cov, 0, "w1"), np.zeros(6))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_derivative_finite_difference(seed, j):
    s = random_state(seed)
    cov = mixed_covariates()
    eps = np.random.default_rng(seed).standard_normal(6)
    # species 0 keeps every sample nondegenerate
    s.X[:, 0] = 0
    s.v[:, 0] = 0
    eps[0] = 1.0
    d = derivative(s, cov, j, "w1", eps=eps)
    assert abs(d.sum()) < 1e-10
    h = 1e-5
    w = cov.raw[0, j]
    hi = composition_at(s, cov, j, {"w1": w + h}, eps=eps)
    lo = composition_at(s, cov, j, {"w1": w - h}, eps=eps)
    fd = (hi - lo) / (2 * h)
    mask = np.abs(d) > 1e-8
    assert np.all(np.abs(d - fd)[~mask] < 1e-9)
    assert np.all(np.abs((d - fd)[mask] / d[mask]) < 1e-5)


def test_discrete_difference():
    s = random_state(13)
    cov = mixed_covariates()
    eps = np.random.default_rng(0).standard_normal(6)
    d = discrete_difference(s, cov, 1, "w2", eps=eps)
    assert abs(d.sum()) < 1e-12
    ref = composition_at(s, cov, 1, {"w2": 1}, eps=eps) - composition_at(s, cov, 1, {"w2": 0}, eps=eps)
    np.testing.assert_allclose(d, ref, atol=1e-15)
    s.v[1:] = 0
    np.testing.assert_allclose(discrete_difference(s, cov, 1, "w2", eps=eps), 0, atol=1e-15)
    with pytest.raises(CovariateError):
        discrete_difference(s, cov, 1, "w1")


def test_population_average():
    s = random_state(14)
    cov = mixed_covariates()
    w0 = np.array([0.2, 1.0])
    eps = np.random.default_rng(1).standard_normal(s.Q.shape)
    avg = population_average(s, cov, w0, eps=eps)
    ref = np.mean([composition_at(s, cov, j, w0, eps=eps[:, j]) for j in range(5)], axis=0)
    np.testing.assert_allclose(avg, ref, atol=1e-14)
    perm = np.array([3, 1, 4, 0, 2])
    t = s.copy()
    t.Y = s.Y[:, perm]
    cov2 = CovariateMatrix(cov.raw[:, perm], cov.names, cov.terms)
    np.testing.assert_allclose(population_average(t, cov2, w0, eps=eps[:, perm]), avg, atol=1e-14)
    one = random_state(15, J=1)
    c1 = CovariateMatrix(cov.raw[:, :1], cov.names, cov.terms)
    e1 = np.random.default_rng(2).standard_normal((6, 1))
    np.testing.assert_allclose(population_average(one, c1, w0, eps=e1),
                               composition_at(one, c1, 0, w0, eps=e1[:, 0]), atol=1e-14)


# ---------------------------------------------------------------- trends

def make_chain(n=30, zero_v=False):
    states = []
    for k in range(n):
        s = random_state(100 + k)
        if zero_v:
            s.v[:] = 0
        states.append(s)
    return Chain.from_states(states)


def test_trend_zero_v_flat():
    chain = make_chain(zero_v=True)
    cov = mixed_covariates()
    grid = np.linspace(-2, 2, 20)
    tg = population_trend(chain, cov, "w1", grid, rng=np.random.default_rng(0))
    assert tg.mean.shape == (20, 6)
    np.testing.assert_allclose(tg.mean.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tg.mean, np.repeat(tg.mean[:1], 20, axis=0), atol=1e-12)


def test_trend_bands():
    chain = make_chain()
    cov = mixed_covariates()
    tg = population_trend(chain, cov, "w1", np.linspace(-2, 2, 20), fixed={"w2": 1},
                          rng=np.random.default_rng(1))
    assert np.all(tg.lower <= tg.mean + 1e-15) and np.all(tg.mean <= tg.upper + 1e-15)
    med = np.median(tg.draws, axis=0)
    assert np.all((tg.lower <= med) & (med <= tg.upper))
    lo50, hi50 = tg.band(0.5)
    assert np.all(tg.lower <= lo50) and np.all(hi50 <= tg.upper)
    assert tg.fixed[1] == 1


def test_trend_errors():
    cov = mixed_covariates()
    with pytest.raises(DataError):
        population_trend(make_chain().subset(slice(0, 0)), cov, 0, [0, 1])
    with pytest.raises(DataError):
        population_trend(make_chain(), cov, 0, [1, 0])


def test_trend_csv(tmp_path):
    tg = TrendGrid("w1", np.array([0.0, 1.0]), np.zeros(2), 0.9,
                   np.random.default_rng(0).random((5, 2, 3)), ["a", "b", "c"])
    p = tmp_path / "t.csv"
    tg.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "species,grid_value,mean,lower,upper" and len(lines) == 7


def test_truth_trend_matches_population_average():
    s = random_state(16)
    cov = mixed_covariates()
    grid = np.array([-1.0, 0.5])
    rng = np.random.default_rng(3)
    tt = truth_trend(s, cov, "w1", grid, fixed={"w2": 0}, n_mc=50, rng=rng)
    rng = np.random.default_rng(3)
    ref = np.zeros((2, 6))
    for _ in range(50):
        eps = rng.standard_normal(s.Q.shape)
        for g, x in enumerate(grid):
            ref[g] += population_average(s, cov, [x, 0.0], eps=eps) / 50
    np.testing.assert_allclose(tt, ref, atol=1e-13)


# ---------------------------------------------------------------- groups, smoothing

def test_age_group_average():
    rng = np.random.default_rng(4)
    diffs = rng.normal(size=(3, 7, 2))
    ages = np.array([0.1, 0.5, 0.9, 1.2, 1.7, 2.0, 2.5])
    one = age_group_average(diffs, ages, [0, 3])
    np.testing.assert_allclose(one[:, 0], diffs.mean(axis=1))
    out = age_group_average(diffs, ages, [0, 1, 2, 3])
    for g, (a, b) in enumerate([(0, 1), (1, 2), (2, 3)]):
        m = (ages >= a) & ((ages < b) | ((b == 3) & (ages == 3)))
        np.testing.assert_allclose(out[:, g], diffs[:, m].mean(axis=1))
    with pytest.raises(DataError):
        age_group_average(diffs, ages, [0, 1, 1.1, 3])
    with pytest.raises(DataError):
        age_group_average(diffs, ages, [0.2, 3])


def test_lowess_linear_data():
    x = np.linspace(0, 1, 30)
    np.testing.assert_allclose(lowess_smooth(x, 2 * x + 1), 2 * x + 1, atol=1e-8)


def test_matrix_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_matrix_csv(p, np.eye(2), ["a", "b"])
    assert p.read_text().splitlines()[1] == "a,a,1.0"
