import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isps import gpreg, simkit
from isps.gpreg import Dataset, SeKernelParams
from isps.sfsys import maglev_system

from conftest import random_dataset, random_kernel


def k_scalar(kp, x, y):
    """Term-by-term squared exponential."""
    s = 0.0
    for a, b, l in zip(x, y, kp.length_scales):
        s += (a - b) ** 2 / (-2.0 * l * l)
    return kp.signal_std ** 2 * math.exp(s)


def dense_oracle(kp, X, y, noise, Q):
    """Mean and variance from an explicit Gram matrix and a dense solve."""
    N = len(X)
    K = np.array([[k_scalar(kp, X[a], X[b]) for b in range(N)] for a in range(N)]) + noise ** 2 * np.eye(N)
    ks = np.array([[k_scalar(kp, q, X[a]) for a in range(N)] for q in Q])
    w = np.linalg.solve(K, y)
    mean = ks @ w
    var = np.array([kp.signal_std ** 2 - ks[r] @ np.linalg.solve(K, ks[r]) for r in range(len(Q))])
    return w, mean, var


# --- kernel ------------------------------------------------------------------

def test_kernel_diagonal_is_signal_variance():
    kp = SeKernelParams(119.0, (6.0, 1.45e4, 14.3))
    assert gpreg.kernel_eval(kp, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 14161.0


def test_kernel_matches_scalar_expansion():
    rng = np.random.default_rng(0)
    for _ in range(50):
        kp = random_kernel(rng, 3)
        x, y = rng.random(3), rng.random(3)
        assert gpreg.kernel_eval(kp, x, y) == pytest.approx(k_scalar(kp, x, y), rel=1e-14)


@given(arrays(float, 3, elements=st.floats(-10, 10)), arrays(float, 3, elements=st.floats(-10, 10)))
def test_kernel_symmetry_exact(x, y):
    kp = SeKernelParams(1.7, (0.3, 2.0, 5.0))
    assert gpreg.kernel_eval(kp, x, y) == gpreg.kernel_eval(kp, y, x)
    assert 0.0 <= gpreg.kernel_eval(kp, x, y) <= 1.7 ** 2


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        gpreg.kernel_eval(SeKernelParams(1.0, (1.0, 1.0)), [0.0], [0.0])


def test_gram_diagonal_exact():
    rng = np.random.default_rng(1)
    X = rng.uniform(-3, 3, (30, 2)) * 1e3
    kp = SeKernelParams(2.0, (0.5, 7.0))
    assert np.all(np.diag(gpreg.gram(kp, X, X)) == 4.0)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_kernel_params_validation(bad):
    with pytest.raises(ValueError):
        SeKernelParams(bad, (1.0,))
    with pytest.raises(ValueError):
        SeKernelParams(1.0, (1.0, bad))


# --- fit and posterior -------------------------------------------------------

def test_empty_model_is_prior():
    kp = SeKernelParams(1.5, (1.0, 2.0))
    m = gpreg.fit(Dataset.empty(2, 1, 0.1), kp)
    q = np.array([[0.3, -0.2], [5.0, 1.0]])
    assert np.all(gpreg.posterior_mean(m, q) == 0.0)
    assert np.all(gpreg.posterior_var(m, q) == 1.5 ** 2)
    assert np.all(gpreg.mean_gradient(m, q[0]) == 0.0)
    rho, norm = gpreg.max_std_over_domain(m, [0, 0], [1, 1])
    assert norm == 1.5 and rho[0] == 1.5


def test_single_point_closed_form():
    kp = SeKernelParams(2.0, (0.7,))
    x0, y0, s = 0.4, -1.3, 0.3
    m = gpreg.fit(Dataset([[x0]], [[y0]], s), kp)
    expected = 4.0 / (4.0 + s * s) * y0
    assert gpreg.posterior_mean(m, [x0])[0] == pytest.approx(expected, rel=1e-14)
    small = gpreg.fit(Dataset([[x0]], [[y0]], 1e-6), kp)
    assert abs(gpreg.posterior_mean(small, [x0])[0] - y0) < 1e-6


def test_alpha_weights_match_dense_solve():
    rng = np.random.default_rng(2)
    ds = random_dataset(rng, 20, 2)
    kp = random_kernel(rng, 2)
    m = gpreg.fit(ds, kp)
    w, _, _ = dense_oracle(kp, ds.inputs, ds.targets[:, 0], ds.noise_std, ds.inputs[:1])
    np.testing.assert_allclose(m.alpha[0], w, rtol=1e-10)


def test_mean_and_variance_match_dense_oracle():
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, 30, 3)
    kp = random_kernel(rng, 3)
    m = gpreg.fit(ds, kp)
    Q = rng.uniform(-2, 2, (100, 3))
    _, mean, var = dense_oracle(kp, ds.inputs, ds.targets[:, 0], ds.noise_std, Q)
    np.testing.assert_allclose(gpreg.posterior_mean(m, Q)[:, 0], mean, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(gpreg.posterior_var(m, Q)[:, 0], var, rtol=0, atol=1e-9)


def test_interpolation_with_tiny_noise():
    X = np.linspace(0, 9, 10)[:, None]
    y = np.cos(X[:, 0])[:, None]
    m = gpreg.fit(Dataset(X, y, 1e-8), SeKernelParams(1.0, (0.3,)))
    np.testing.assert_allclose(gpreg.posterior_mean(m, X), y, atol=1e-5)


def test_variance_at_training_point_bounded_by_noise():
    s = 1e-3
    m = gpreg.fit(Dataset([[0.5]], [[1.0]], s), SeKernelParams(3.0, (1.0,)))
    assert gpreg.posterior_var(m, [0.5])[0] <= s * s * (1 + 1e-3)


def test_multi_output_keeps_separate_kernels():
    rng = np.random.default_rng(5)
    ds = random_dataset(rng, 15, 2, n=2)
    k1, k2 = random_kernel(rng, 2), random_kernel(rng, 2)
    m = gpreg.fit(ds, [k1, k2])
    q = rng.uniform(-1, 1, (5, 2))
    for j, kp in enumerate((k1, k2)):
        single = gpreg.fit(Dataset(ds.inputs, ds.targets[:, [j]], ds.noise_std), kp)
        np.testing.assert_allclose(gpreg.posterior_mean(m, q)[:, j], gpreg.posterior_mean(single, q)[:, 0])
    with pytest.raises(ValueError, match="kernels"):
        gpreg.fit(ds, [k1])


def test_factorization_error_names_dimension():
    X = np.zeros((3, 1))
    Y = np.array([[0.0, 1.0], [0.0, np.nan], [0.0, 1.0]])
    with pytest.raises(gpreg.FactorizationError) as info:
        gpreg.fit(Dataset(X, Y, 0.1), SeKernelParams(1.0, (1.0,)))
    assert info.value.output_dim == 1


def test_dataset_validation():
    with pytest.raises(ValueError, match="rows"):
        Dataset(np.zeros((3, 1)), np.zeros((2, 1)), 0.1)
    with pytest.raises(ValueError, match="noise"):
        Dataset(np.zeros((3, 1)), np.zeros((3, 1)), 0.0)
    ds = Dataset(np.array([[0.0], [2.0]]), np.zeros((2, 1)), 0.1)
    with pytest.raises(ValueError, match="outside"):
        ds.check_inside([0.0], [1.0])


def test_adding_data_never_increases_variance():
    rng = np.random.default_rng(6)
    kp = SeKernelParams(1.3, (0.8, 1.1))
    X = rng.uniform(-2, 2, (20, 2))
    y = rng.normal(size=(20, 1))
    Q = rng.uniform(-2, 2, (50, 2))
    prev = gpreg.posterior_var(gpreg.fit(Dataset.empty(2, 1, 0.2), kp), Q)
    for N in range(1, 21):
        cur = gpreg.posterior_var(gpreg.fit(Dataset(X[:N], y[:N], 0.2), kp), Q)
        assert np.all(cur <= prev + 1e-9)
        prev = cur


def test_variance_nonnegative_on_ill_conditioned_data():
    X = np.linspace(0, 1, 40)[:, None]
    m = gpreg.fit(Dataset(X, np.sin(X), 1e-6), SeKernelParams(1.0, (5.0,)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var, raw = gpreg.posterior_var(m, np.linspace(0, 1, 200)[:, None], return_raw=True)
    assert np.all(var >= 0)
    assert np.all(raw >= -1e-8)


# --- gradients ---------------------------------------------------------------

def fd_jacobian(m, q, h=1e-5):
    J = np.zeros((m.output_dim, m.input_dim))
    for c in range(m.input_dim):
        e = np.zeros(m.input_dim)
        e[c] = h
        J[:, c] = (gpreg.posterior_mean(m, q + e) - gpreg.posterior_mean(m, q - e)) / (2 * h)
    return J


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    ds = random_dataset(rng, 25, 3, n=2)
    m = gpreg.fit(ds, [random_kernel(rng, 3), random_kernel(rng, 3)])
    for q in rng.uniform(-2, 2, (100, 3)):
        g = gpreg.mean_gradient(m, q)
        fd = fd_jacobian(m, q)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8) + 1e-10


def test_hessian_matches_gradient_differences():
    rng = np.random.default_rng(8)
    m = gpreg.fit(random_dataset(rng, 20, 2), random_kernel(rng, 2))
    h = 1e-5
    for q in rng.uniform(-2, 2, (20, 2)):
        H = gpreg.mean_hessian(m, q)[0]
        fd = np.column_stack([(gpreg.mean_gradient(m, q + h * e) - gpreg.mean_gradient(m, q - h * e))[0] / (2 * h)
                              for e in np.eye(2)])
        np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(H, H.T, atol=1e-12)


def test_gradient_zero_at_single_training_point():
    m = gpreg.fit(Dataset([[0.2, -0.4]], [[3.0]], 0.1), SeKernelParams(1.0, (0.5, 0.5)))
    assert np.all(gpreg.mean_gradient(m, np.array([0.2, -0.4])) == 0.0)


def test_mean_jet_agrees_with_batch_mean():
    rng = np.random.default_rng(9)
    m = gpreg.fit(random_dataset(rng, 15, 2), random_kernel(rng, 2))
    q = rng.uniform(-1, 1, 2)
    assert m.mean_jet(q, order=0)[0][0] == pytest.approx(gpreg.posterior_mean(m, q)[0], rel=1e-12)
    with pytest.raises(ValueError):
        m.mean_jet(np.zeros(3))


# --- hyperparameters ---------------------------------------------------------

def prior_sample(rng, kp, N, noise, span=5.0):
    X = np.sort(rng.uniform(0, span, N))[:, None]
    K = gpreg.gram(kp, X, X) + 1e-10 * np.eye(N)
    f = np.linalg.cholesky(K) @ rng.standard_normal(N)
    return Dataset(X, (f + noise * rng.standard_normal(N))[:, None], noise)


@pytest.mark.parametrize("seed", [12, 13, 14])
def test_hyperparameter_recovery_from_prior_sample(seed):
    # a span of 40 length scales keeps the sampling spread of the signal std well inside 25%
    rng = np.random.default_rng(seed)
    true = SeKernelParams(2.0, (0.5,))
    ds = prior_sample(rng, true, 200, 0.1, span=20.0)
    got = gpreg.fit_hyperparameters(ds, SeKernelParams(1.0, (1.0,)))
    assert got.signal_std == pytest.approx(2.0, rel=0.25)
    assert got.length_scales[0] == pytest.approx(0.5, rel=0.25)


def test_refit_from_optimum_does_not_decrease_likelihood():
    rng = np.random.default_rng(13)
    ds = prior_sample(rng, SeKernelParams(2.0, (0.5,)), 120, 0.1)
    first = gpreg.fit_hyperparameters(ds, SeKernelParams(1.0, (1.0,)))
    second = gpreg.fit_hyperparameters(ds, first)
    assert gpreg.log_marginal_likelihood(ds, second) >= gpreg.log_marginal_likelihood(ds, first) - 1e-9
    # deterministic given init and data
    assert gpreg.fit_hyperparameters(ds, first) == second


def test_likelihood_gradient_matches_finite_differences():
    rng = np.random.default_rng(14)
    ds = random_dataset(rng, 30, 2)
    kp = SeKernelParams(1.2, (0.7, 1.5))
    _, g = gpreg.log_marginal_likelihood(ds, kp, with_grad=True)
    theta = np.log([1.2, 0.7, 1.5])
    h = 1e-6
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        up = np.exp(theta + e)
        dn = np.exp(theta - e)
        fd = (gpreg.log_marginal_likelihood(ds, SeKernelParams(up[0], tuple(up[1:])))
              - gpreg.log_marginal_likelihood(ds, SeKernelParams(dn[0], tuple(dn[1:])))) / (2 * h)
        assert g[c] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_hyperparameter_fit_needs_five_samples():
    ds = Dataset(np.zeros((4, 1)), np.zeros((4, 1)), 0.1)
    with pytest.raises(ValueError, match="5"):
        gpreg.fit_hyperparameters(ds, SeKernelParams(1.0, (1.0,)))


# --- domain maximum of the standard deviation --------------------------------

def test_rho_bar_grid_refinement_is_monotone():
    rng = np.random.default_rng(15)
    m = gpreg.fit(random_dataset(rng, 12, 2, span=1.0), SeKernelParams(1.0, (0.4, 0.4)))
    vals = [gpreg.max_std_over_domain(m, [-1, -1], [1, 1], g, refine=False)[1] for g in (5, 9, 17)]
    assert vals[1] >= vals[0] - 1e-12 and vals[2] >= vals[1] - 1e-12
    refined = gpreg.max_std_over_domain(m, [-1, -1], [1, 1], 5)[1]
    assert refined >= vals[0]
    assert refined <= 1.0


@pytest.mark.slow
def test_trained_maglev_rho_bar_is_small(maglev_run):
    out, code, _ = maglev_run
    assert code == 0
    system = maglev_system()
    for i in range(1, 4):
        m = gpreg.load_model(out / "models" / f"subsystem_{i}.json")
        box = system.domain.sub(i)
        _, norm = gpreg.max_std_over_domain(m, box.lower, box.upper, 9)
        assert norm < 0.01


# --- persistence -------------------------------------------------------------

def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    ds = random_dataset(rng, 10, 3, n=2)
    path = tmp_path / "d.csv"
    gpreg.write_dataset_csv(ds, path)
    assert path.read_text().splitlines()[0] == "x1,x2,x3,y1,y2"
    back = gpreg.read_dataset_csv(path, ds.noise_std)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    m = gpreg.fit(random_dataset(rng, 10, 2), random_kernel(rng, 2))
    gpreg.save_model(m, tmp_path / "m.json")
    back = gpreg.load_model(tmp_path / "m.json")
    q = rng.uniform(-1, 1, (7, 2))
    np.testing.assert_array_equal(gpreg.posterior_mean(back, q), gpreg.posterior_mean(m, q))
    assert back.kernels == m.kernels


def test_scaled_start_escapes_a_badly_scaled_init():
    system = maglev_system()
    ds = simkit.generate_dataset(system, 3, simkit.DataGenConfig(samples=200, noise_std=0.01, seed=1))
    init = gpreg.SeKernelParams(1.0, (5.0, 5.0, 5.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gpreg.HyperparameterWarning)
        plain = gpreg.fit_hyperparameters(ds, init)
        scaled = gpreg.fit_hyperparameters(ds, init, scaled_start=True)
    assert gpreg.log_marginal_likelihood(ds, scaled) > gpreg.log_marginal_likelihood(ds, plain) + 100
    box = system.domain.sub(3)
    _, rho = gpreg.max_std_over_domain(gpreg.fit(ds, scaled), box.lo, box.hi, 9)
    assert rho < 0.02
