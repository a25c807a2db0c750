"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The long-running pieces (three 4e4-sweep chains per desk fit, 500 permutation
fits) make this module take roughly 45 minutes on one core.  Seeds are fixed
in advance; failures are reported as they are, not retried.
"""

import json
import shutil
import time

import numpy as np
import pytest
from scipy import stats

from dirfactor import cli
from dirfactor.design import CovariateMatrix, Term, reference_effects
from dirfactor.model import Hyperparams, LatentState, preset_spec, simulate_dataset
from dirfactor.sampler import (SamplerConfig, run_chain, sample_Q, sample_shrinkage,
                               sample_sigma, sample_T, sample_v, sample_X, sample_Y)
from dirfactor.scoring import score_chain
from dirfactor.summaries import composition_at, derivative
from dirfactor.validation import gpd_fit, loo_coverage, permutation_test, prior_reproduction_test

from helpers import grid_cdf, ks_pvalue, moment_z

pytestmark = pytest.mark.slow

N = 100_000
GRID = np.linspace(-2, 2, 20)
FIXED = {"w2": 0.0}
FIT = SamplerConfig(n_iterations=40_000, burn_in=20_000, thin=10)
HYPER = Hyperparams(K=4)
# replicated sigma chains start at 0.5; the log-scale tail of Beta(0.2, 0.3)
# needs a few hundred slice steps to be forgotten
SIGMA_STEPS = 300


def fit_three(data, seed):
    t0 = time.perf_counter()
    chains = [run_chain(data.table, data.covariates, HYPER,
                        SamplerConfig(**{**FIT.to_dict(), "seed": s}))
              for s in cli.chain_seeds(seed, 3)]
    return cli.pooled(chains), time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_fit():
    data = simulate_dataset(preset_spec("desk", seed=0))
    chain, seconds = fit_three(data, 0)
    return data, chain, seconds


# ---------------------------------------------------------------- 1

def _state(I, J, K=1, P=1, sigma=0.5, q=1.0, T=1.0):
    return LatentState(sigma=np.full(I, sigma), X=np.zeros((K, I)), Y=np.zeros((K, J)),
                       v=np.zeros((P, I)), Q=np.full((I, J), q), T=np.full(J, T),
                       delta=np.ones(K))


def test_1_conditional_moments(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}

    def check(name, draws, mean, var):
        zm, zv = moment_z(draws, mean, var)
        worst[name] = float(max(np.max(zm), np.max(zv)))

    # T_j ~ Gamma(n_j, D_j) with D_j = sum_i sigma_i (Q_ij)_+^2
    s = _state(4, N)
    s.sigma = np.array([0.2, 0.4, 0.6, 0.3])
    s.Q[:] = np.array([1.5, -0.3, 0.7, 2.0])[:, None]
    counts = np.zeros((4, N), int)
    counts[:, :] = np.array([3, 0, 5, 4])[:, None]
    D = 0.2 * 1.5 ** 2 + 0.6 * 0.7 ** 2 + 0.3 * 2.0 ** 2
    check("T", sample_T(s, counts, rng), 12 / D, 12 / D ** 2)

    # sigma with no positive scores: Beta(a + n, 1/2 - a)
    for a, n in ((0.2, 0), (0.1, 3)):
        s = _state(N, 1, q=-1.0)
        counts = np.full((N, 1), n)
        hyper = Hyperparams(alpha=a * N)
        for _ in range(SIGMA_STEPS):
            sample_sigma(s, counts, hyper, rng)
        b = stats.beta(a + n, 0.5 - a)
        check(f"sigma(a={a},n={n})", s.sigma, b.mean(), b.var())

    # Q for zero counts and vanishing tilt: N(mu, 1)
    s = _state(1000, 100, sigma=1e-300)
    s.v[:] = 0.7
    F = np.ones((1, 100))
    Q = sample_Q(s, np.zeros((1000, 100), int), F, rng).ravel()
    check("Q", Q, 0.7, 1.0)

    # X with identical species: N(A^-1 b, A^-1)
    K, J = 2, 6
    Yv = rng.normal(size=(K, J))
    Fx = rng.normal(size=(1, J))
    qrow = rng.normal(size=J)
    s = _state(N, J, K=K)
    s.Y, s.v[:], s.Q[:] = Yv, 0.4, qrow
    A = np.eye(K) + Yv @ Yv.T
    b = Yv @ (qrow - 0.4 * Fx[0])
    cov = np.linalg.inv(A)
    check("X", sample_X(s, None, Fx, rng).T, cov @ b, np.diag(cov))

    # Y with one sample per individual and identical samples
    I = 5
    Xv = rng.normal(size=(K, I))
    qcol = rng.normal(size=I)
    vv = rng.normal(size=(1, I))
    s = _state(I, N, K=K)
    s.X, s.v, s.delta = Xv, vv, np.array([1.5, 2.0])
    s.Q[:] = qcol[:, None]
    Fy = np.full((1, N), 0.3)
    gamma = 1 / np.cumprod([1.5, 2.0])
    A = np.diag(1 / gamma) + Xv @ Xv.T
    b = Xv @ (qcol - vv[0] * 0.3)
    cov = np.linalg.inv(A)
    check("Y", sample_Y(s, None, Fy, HYPER, rng).T, cov @ b, np.diag(cov))

    # v with identical species
    P = 2
    Fv = rng.normal(size=(P, J))
    s = _state(N, J, K=K, P=P)
    s.X[:] = np.array([[0.5], [-1.0]])
    s.Y, s.Q[:] = Yv, qrow
    A = np.eye(P) + Fv @ Fv.T
    b = Fv @ (qrow - np.array([0.5, -1.0]) @ Yv)
    cov = np.linalg.inv(A)
    check("v", sample_v(s, None, Fv, rng).T, cov @ b, np.diag(cov))

    # shrinkage: K = 1 and the first coordinate of K = 2
    h = Hyperparams(mgp_a1=2.0, mgp_a2=3.0)
    s = _state(3, 8, K=1)
    s.Y = rng.normal(size=(1, 8))
    ss = float(np.sum(s.Y ** 2))
    d = np.array([sample_shrinkage(s, h, rng)[0] for _ in range(N)])
    g = stats.gamma(2.0 + 4.0, scale=1 / (1 + ss / 2))
    check("delta(K=1)", d, g.mean(), g.var())
    s = _state(3, 8, K=2)
    s.Y = rng.normal(size=(2, 8))
    ss = np.sum(s.Y ** 2, axis=1)
    d = np.empty(N)
    for k in range(N):
        s.delta = np.array([1.0, 0.7])
        d[k] = sample_shrinkage(s, h, rng)[0]
    g = stats.gamma(2.0 + 8.0, scale=1 / (1 + (ss[0] + 0.7 * ss[1]) / 2))
    check("delta_1(K=2)", d, g.mean(), g.var())

    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 3 and elapsed < 120
    criterion(1, ok, f"max |z| = {top:.2f} over {len(worst)} conditionals, {elapsed:.0f}s")
    assert top < 3, worst
    assert elapsed < 120


# ---------------------------------------------------------------- 2

def _sigma_logdens(shape, tilt, a):
    def f(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return shape * x - (0.5 + a) * np.log1p(-np.exp(x)) - tilt * np.exp(x)
    return f


def _q_logdens(n, tilt, mu):
    def f(q):
        with np.errstate(divide="ignore"):
            return 2 * n * np.log(q) - tilt * q * q - 0.5 * (q - mu) ** 2
    return f


def test_2_grid_oracle_ks(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    M = 10_000
    pvals = {}
    for r in range(5):
        J = 3
        n = rng.integers(0, 20, J)
        a = rng.uniform(0.05, 0.45)
        shape = a + n.sum()
        tilt = shape * rng.uniform(2, 20)
        s = _state(M, J)
        s.T[:] = tilt / J
        counts = np.tile(n, (M, 1))
        hyper = Hyperparams(alpha=a * M)
        for _ in range(SIGMA_STEPS):
            sample_sigma(s, counts, hyper, rng)
        cdf = grid_cdf(_sigma_logdens(shape, tilt, a), -700.0, -1e-9)
        pvals[f"sigma{r}"] = ks_pvalue(np.log(s.sigma), cdf)

    for r in range(5):
        n = int(rng.integers(1, 50))
        sigma, T, mu = rng.uniform(0.05, 0.9), rng.gamma(2.0), rng.normal(0, 1.5)
        s = _state(100, 100, sigma=sigma, T=T)
        s.v[:] = mu
        F = np.ones((1, 100))
        counts = np.full((100, 100), n)
        for _ in range(40):
            sample_Q(s, counts, F, rng)
        cdf = grid_cdf(_q_logdens(n, sigma * T, mu), 1e-12, 50.0)
        pvals[f"Q{r}"] = ks_pvalue(s.Q.ravel(), cdf)

    elapsed = time.perf_counter() - t0
    low = min(pvals.values())
    ok = low > 0.01 and elapsed < 300
    criterion(2, ok, f"min KS p = {low:.3f} over {len(pvals)} states, {elapsed:.0f}s")
    assert low > 0.01, pvals
    assert elapsed < 300


# ---------------------------------------------------------------- 3

def test_3_prior_reproduction(criterion):
    t0 = time.perf_counter()
    good = prior_reproduction_test(n_cycles=50_000, seed=0)
    bad = prior_reproduction_test(n_cycles=50_000, seed=0, negative_control=True)
    elapsed = time.perf_counter() - t0
    ok = good.max_abs_z < 4 and bad.max_abs_z > 6 and elapsed < 600
    criterion(3, ok, f"max |z| = {good.max_abs_z:.2f}, control max |z| = "
                     f"{bad.max_abs_z:.1f}, {elapsed:.0f}s")
    assert good.max_abs_z < 4, dict(zip(good.names, good.z))
    assert bad.max_abs_z > 6, dict(zip(bad.names, bad.z))
    assert elapsed < 600


# ---------------------------------------------------------------- 4

def test_4_derivatives(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    I, J, K = 8, 5, 2
    terms = [Term("linear", ("w1",)), Term("linear", ("w2",), binary=True),
             Term("interaction", ("w1", "w2")),
             Term("spline", ("w1",), knots=(-0.5, 0.0, 0.5), boundary=(-2.0, 2.0))]
    h = 1e-5
    rel, sums = [], []
    while len(rel) < 100:
        raw = np.vstack([rng.uniform(-1.5, 1.5, J), rng.integers(0, 2, J)])
        cov = CovariateMatrix(raw, ["w1", "w2"], terms)
        state = LatentState(sigma=rng.uniform(0.05, 0.95, I), X=rng.normal(size=(K, I)),
                            Y=rng.normal(size=(K, J)), v=rng.normal(size=(cov.n_design, I)),
                            Q=np.zeros((I, J)), T=np.ones(J), delta=np.ones(K))
        j = int(rng.integers(J))
        eps = rng.normal(size=I)
        q = state.X.T @ state.Y[:, j] + state.v.T @ cov.design[:, j] + eps
        if np.sum(q > 0) < 2:
            continue  # composition is undefined or constant
        d = derivative(state, cov, j, "w1", eps=eps)
        w = raw[0, j]
        fd = (composition_at(state, cov, j, {"w1": w + h}, eps=eps)
              - composition_at(state, cov, j, {"w1": w - h}, eps=eps)) / (2 * h)
        rel.append(np.linalg.norm(d - fd) / np.linalg.norm(d))
        sums.append(abs(d.sum()))
    elapsed = time.perf_counter() - t0
    worst, wsum = max(rel), max(sums)
    ok = worst < 1e-6 and wsum < 1e-10 and elapsed < 60
    criterion(4, ok, f"max rel err = {worst:.1e}, max |sum| = {wsum:.1e}, {elapsed:.1f}s")
    assert worst < 1e-6
    assert wsum < 1e-10
    assert elapsed < 60


# ---------------------------------------------------------------- 5

def test_5_recovery(desk_fit, criterion):
    data, chain, seconds = desk_fit
    t0 = time.perf_counter()
    sc = score_chain(chain, data.truth)
    elapsed = seconds + time.perf_counter() - t0
    rv, sign = sc["rv_S"], sc["sign_agreement_active"]
    ok = rv >= 0.85 and sign >= 0.8 and elapsed < 45 * 60
    criterion(5, ok, f"RV = {rv:.3f}, sign agreement = {sign:.3f}, "
                     f"max species MSE = {sc['max_species_mse']:.3g}, {elapsed / 60:.1f} min")
    assert rv >= 0.85
    assert sign >= 0.8
    assert elapsed < 45 * 60


# ---------------------------------------------------------------- 6

def test_6_trend_coverage(desk_fit, criterion):
    data, chain, seconds = desk_fit
    t0 = time.perf_counter()
    base = score_chain(chain, data.truth, data.covariates, "w1", GRID, FIXED, 0.95,
                       n_mc=1000, rng=np.random.default_rng(6))
    zi = simulate_dataset(preset_spec("desk", seed=0, zero_threshold=1e-3))
    np.testing.assert_array_equal(zi.truth.Q, data.truth.Q)  # paired latents
    zi_chain, zi_seconds = fit_three(zi, 0)
    other = score_chain(zi_chain, zi.truth, zi.covariates, "w1", GRID, FIXED, 0.95,
                        n_mc=1000, rng=np.random.default_rng(6))
    elapsed = seconds + zi_seconds + time.perf_counter() - t0
    c0, c1 = base["trend_coverage"], other["trend_coverage"]
    ok = c0 >= 0.85 and c0 - c1 <= 0.05 and elapsed < 60 * 60
    criterion(6, ok, f"coverage = {c0:.3f}, zero-inflated = {c1:.3f}, "
                     f"{elapsed / 60:.1f} min")
    assert c0 >= 0.85
    assert c0 - c1 <= 0.05
    assert elapsed < 60 * 60


# ---------------------------------------------------------------- 7

def test_7_permutation(desk_fit, criterion):
    data = desk_fit[0]
    t0 = time.perf_counter()
    strong = permutation_test(data.table, data.covariates, "w1", 100,
                              SamplerConfig(n_iterations=5000, burn_in=2500, thin=5),
                              HYPER, seed=7)
    null_p = []
    short = SamplerConfig(n_iterations=1000, burn_in=500, thin=5)
    for r in range(20):
        v = reference_effects(30)[:2].copy()
        v[0] = 0.0
        d = simulate_dataset(preset_spec("desk", seed=1000 + r, design="main", v_matrix=v))
        null_p.append(permutation_test(d.table, d.covariates, "w1", 19, short, HYPER,
                                       seed=r).p_value)
    ks = stats.kstest(null_p, "uniform").pvalue
    elapsed = time.perf_counter() - t0
    ok = strong.p_value < 0.01 and ks > 0.01 and elapsed < 2 * 3600
    criterion(7, ok, f"strong p = {strong.p_value:.4f}, null KS p = {ks:.3f}, "
                     f"{elapsed / 60:.1f} min")
    assert strong.p_value < 0.01
    assert ks > 0.01, null_p
    assert elapsed < 2 * 3600


# ---------------------------------------------------------------- 8

def test_8_psis_loo(desk_fit, criterion):
    data, chain, seconds = desk_fit
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    gaps = []
    for k_true in (0.1, 0.3, 0.5, 0.7, 0.9):
        x = stats.genpareto.rvs(k_true, scale=1.5, size=2000, random_state=rng)
        gaps.append(abs(gpd_fit(x)[0] - stats.genpareto.fit(x, floc=0)[0]))
    rep = loo_coverage(chain, data.table, 0.95, np.random.default_rng(8))
    elapsed = seconds + time.perf_counter() - t0
    gap, cov = max(gaps), rep.mean_coverage
    ok = gap <= 0.05 and cov >= 0.85 and elapsed < 20 * 60
    criterion(8, ok, f"max |k - k_mle| = {gap:.3f}, LOO coverage = {cov:.3f}, "
                     f"{elapsed / 60:.1f} min")
    assert gap <= 0.05
    assert cov >= 0.85
    assert elapsed < 20 * 60


# ---------------------------------------------------------------- 9

def _pipeline(root):
    sim, fit, score = root / "sim", root / "fit", root / "score"
    short = ["--set", "sampler.n_iterations=200", "--set", "sampler.burn_in=100",
             "--set", "sampler.thin=5", "--set", "chains=2"]
    assert cli.main(["simulate", "--preset", "desk", "--seed", "9", "--out", str(sim)]) == 0
    cfg = str(sim / "config.yaml")
    assert cli.main(["fit", "--config", cfg, "--out", str(fit), *short]) == 0
    assert cli.main(["score", "--config", cfg, "--chains", str(fit), "--truth",
                     str(sim / "truth.json"), "--out", str(score), *short,
                     "--set", "score.n_mc=20"]) == 0
    out = {}
    for d in (sim, fit, score):
        man = json.loads((d / "manifest.json").read_text())
        man.pop("wall_clock_seconds")
        out[d.name] = man
    return out


def test_9_determinism(tmp_path, criterion):
    # same paths both times: the resolved config records absolute input paths
    root = tmp_path / "run"
    a = _pipeline(root)
    shutil.rmtree(root)
    b = _pipeline(root)
    n_files = sum(len(m["files"]) for m in a.values())
    criterion(9, a == b, f"{n_files} hashed files across simulate/fit/score")
    assert a == b
