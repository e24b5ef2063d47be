import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_resilience.invariant_set import all_bounds, compute_sequences, sample_in_set
from lstm_resilience.lstm_core import LstmParams, simulate
from lstm_resilience.stability_cert import (
    DELTA_ISS,
    ISS,
    CertMatrix,
    LayerNorms,
    PowerIterationError,
    beta_tilde,
    certify,
    certify_range,
    decay_bound,
    delta_iss_matrix,
    induced_2norm,
    iss_matrix,
    mu,
    schur_2x2,
    spectral_radius_2x2,
    top_singular,
)

from conftest import certified_models, simplified_model, small_model


def jacobi_eigenvalues(S, sweeps=100):
    """Cyclic Jacobi rotations on a symmetric matrix; returns its eigenvalues."""
    A = np.array(S, dtype=float)
    n = A.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
    return np.diag(A)


def power_rho(M, iters=20000):
    """Dominant eigenvalue of a nonnegative 2x2 matrix by plain power iteration."""
    v = np.array([1.0, 1.0])
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        lam_new = float(v @ w / (v @ v))
        v = w / n
        if abs(lam_new - lam) < 1e-15:
            break
        lam = lam_new
    return float(np.linalg.norm(M @ v) / np.linalg.norm(v))


def random_cert_matrix(rng, scale=1.0):
    a = rng.uniform(0, scale, size=4)
    return CertMatrix(*a)


# -- induced 2-norm ---------------------------------------------------------------


def test_norm_zero_and_diagonal():
    assert induced_2norm(np.zeros((3, 4))) == 0.0
    assert induced_2norm(np.diag([3.0, -4.0])) == pytest.approx(4.0, rel=1e-12)


def test_norm_vs_jacobi(rng):
    for _ in range(20):
        M = rng.normal(size=(5, 5))
        ref = math.sqrt(max(jacobi_eigenvalues(M.T @ M)))
        assert induced_2norm(M) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8))
def test_singular_pair_consistency(seed, m, n):
    M = np.random.default_rng(seed).normal(size=(m, n))
    s, u, v = top_singular(M)
    np.testing.assert_allclose(M @ v, s * u, atol=1e-8 * max(s, 1))
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_norm_nearly_repeated_top_value():
    # a 1e-9 gap between the top two values: the value settles inside the gap
    M = np.diag([1.0 + 1e-9, 1.0, 0.5])
    assert 1.0 - 1e-12 <= induced_2norm(M) <= 1.0 + 1e-9 + 1e-12


def test_power_iteration_failure_reported():
    M = np.diag([1.0, 0.999999])
    with pytest.raises(PowerIterationError) as info:
        top_singular(M, tol=1e-300, max_iter=3, squarings=0)
    assert info.value.last_iterate is not None


# -- matrices ---------------------------------------------------------------------


def test_zero_params_matrices():
    p = LstmParams.zeros(2, 3, 1)
    seq = compute_sequences(p, 3)
    A, gains = delta_iss_matrix(p, seq, 0, 3)
    assert A.as_array().tolist() == [[0.5, 0.0], [0.25, 0.0]]
    assert A.alpha_s == 0.0 and gains.a_x == (0.0, 0.0)
    B, _ = iss_matrix(p, seq, 0, 3)
    assert B.as_array().tolist() == [[0.5, 0.0], [0.25, 0.0]]


def test_delta_iss_formula(rng):
    p = small_model(rng, scale=1.0)
    seq = compute_sequences(p, 4)
    k = 4
    A, gains = delta_iss_matrix(p, seq, 0, k)
    L = p.layers[0]
    n = {name: np.linalg.norm(getattr(L, name), 2) for name in LayerNorms.__dataclass_fields__}
    sf, si, so, pc, cb = (seq.sigma_f[0, k], seq.sigma_i[0, k], seq.sigma_o[0, k], seq.phi_c[0, k], seq.c_bar[0, k])
    a_s = 0.25 * n["U_f"] * cb + si * n["U_c"] + 0.25 * n["U_i"] * pc
    a_x = 0.25 * n["W_f"] * cb + si * n["W_c"] + 0.25 * n["W_i"] * pc
    ref = [[sf, a_s], [so * sf, a_s * so + 0.25 * math.tanh(cb) * n["U_o"]]]
    np.testing.assert_allclose(A.as_array(), ref, rtol=1e-9)
    np.testing.assert_allclose(gains.a_x, [a_x, a_x * so + 0.25 * math.tanh(cb) * n["W_o"]], rtol=1e-9)


def test_iss_bias_gain_last_layer_only(rng):
    p = small_model(rng, n_layers=2)
    seq = compute_sequences(p, 0)
    _, g1 = iss_matrix(p, seq, 0, 0)
    _, g2 = iss_matrix(p, seq, 1, 0)
    assert g1.a_b == (0.0, 0.0)
    assert g2.a_b == (seq.sigma_i[1, 0], seq.sigma_o[1, 0] * seq.sigma_i[1, 0])


def test_iss_rho_vs_eigen_oracle(rng):
    for _ in range(20):
        p = small_model(rng, scale=1.0)
        c = certify(p, 2, ISS)
        M = c.layers[0].matrix.as_array()
        assert c.rhos[0] == pytest.approx(max(abs(np.linalg.eigvals(M))), rel=1e-12)


def test_entries_nonincreasing_in_k(rng):
    for _ in range(20):
        p = simplified_model(rng)
        certs = certify_range(p, range(21))
        arr = np.array([c.layers[0].matrix.as_array().ravel() for c in certs])
        assert np.all(np.diff(arr, axis=0) <= 1e-12)


# -- spectral radius and Schur ----------------------------------------------------


def test_rho_examples():
    assert spectral_radius_2x2(CertMatrix(0.5, 0.0, 0.25, 0.0)) == 0.5
    assert spectral_radius_2x2(CertMatrix(1.0, 0.0, 0.0, 1.0)) == 1.0


def test_rho_negative_entry_rejected():
    with pytest.raises(ValueError, match="negative"):
        spectral_radius_2x2(CertMatrix(0.5, -0.1, 0.2, 0.3))


def test_rho_vs_power_iteration(rng):
    for _ in range(100):
        A = random_cert_matrix(rng)
        assert spectral_radius_2x2(A) == pytest.approx(power_rho(A.as_array()), abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_subnormal=False), min_size=4, max_size=4))
def test_discriminant_nonnegative_and_schur(entries):
    A = CertMatrix(*entries)
    assert A.discriminant >= 0
    f = schur_2x2(A)
    scale = max(1.0, max(entries))
    assert abs(f.lambda1) >= abs(f.lambda2) - 1e-12 * scale
    assert f.lambda1 + f.lambda2 == pytest.approx(A.trace, abs=1e-12 * scale)
    assert f.lambda1 * f.lambda2 == pytest.approx(A.det, abs=1e-10 * scale * scale)
    np.testing.assert_allclose(f.reconstruct(), A.as_array(), atol=1e-10 * scale)
    assert 0.0 <= f.r <= 1.0


def test_schur_examples():
    f = schur_2x2(CertMatrix(0.5, 0.0, 0.25, 0.0))
    assert (f.lambda1, f.lambda2, f.r) == (0.5, 0.0, 0.0)
    d = schur_2x2(CertMatrix(0.8, 0.0, 0.0, 0.4))
    assert d.nu == 0.0 and d.r == pytest.approx(0.5)


def test_mu_closed_forms():
    f = schur_2x2(CertMatrix(0.8, 0.0, 0.0, 0.4))
    for t in range(10):
        assert mu(f, t) == pytest.approx(math.sqrt(1 + 0.5 ** (2 * t)))
    assert mu(f, 0) == pytest.approx(math.sqrt(2))


def test_mu_repeated_eigenvalue_limit():
    f = schur_2x2(CertMatrix(0.6, 0.3, 0.0, 0.6))
    assert f.r == 1.0
    A = f.reconstruct()
    for t in range(1, 30):
        assert np.linalg.norm(np.linalg.matrix_power(A, t), 2) <= mu(f, t) * f.lambda1**t * (1 + 1e-12)


def test_mu_nilpotent():
    f = schur_2x2(CertMatrix(0.0, 0.7, 0.0, 0.0))
    assert f.lambda1 == 0.0
    assert decay_bound(f, 0) == 1.0
    assert decay_bound(f, 1) == pytest.approx(0.7)
    assert decay_bound(f, 2) == 0.0


def test_mu_dominance(rng):
    checked = 0
    while checked < 100:
        A = random_cert_matrix(rng, scale=0.7)
        rho = spectral_radius_2x2(A)
        if rho >= 1:
            continue
        f = schur_2x2(A)
        M = A.as_array()
        for t in range(51):
            lhs = np.linalg.norm(np.linalg.matrix_power(M, t), 2)
            assert lhs <= mu(f, t) * rho**t + 1e-10
        checked += 1


# -- certificates and beta_tilde ----------------------------------------------------


def test_zero_params_certificate():
    for k in (0, 5):
        c = certify(LstmParams.zeros(1, [2, 2], 1), k)
        assert c.verdict and c.rhos == [0.5, 0.5]
        assert c.to_dict()["verdict"] == "pass"


def test_unknown_kind():
    with pytest.raises(ValueError):
        certify(LstmParams.zeros(1, 1, 1), 0, kind="bogus")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_rho_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    p = simplified_model(rng) if seed % 2 else small_model(rng, scale=1.0, n_layers=2)
    certs = certify_range(p, range(51))
    rhos = np.array([c.rhos for c in certs])
    assert np.all(np.diff(rhos, axis=0) <= 1e-12)


def test_k0_matches_direct_formula(rng):
    """At k=0 the certificate uses eta(-1) = 1 directly (prior-work condition)."""
    sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    for _ in range(10):
        p = small_model(rng, scale=0.7)
        L = p.layers[0]
        row = lambda g: np.abs(L.W(g)).sum(1) + np.abs(L.U(g)).sum(1)  # noqa: E731
        sf, si, so = (sig(max(np.max(row(g) + L.b(g)), 0)) for g in "fio")
        pc = math.tanh(np.max(row("c") + np.abs(L.b_c)))
        cb = si * pc / (1 - sf)
        n = lambda M: np.linalg.norm(M, 2)  # noqa: E731
        a_s = 0.25 * n(L.U_f) * cb + si * n(L.U_c) + 0.25 * n(L.U_i) * pc
        M = np.array([[sf, a_s], [so * sf, a_s * so + 0.25 * math.tanh(cb) * n(L.U_o)]])
        assert certify(p, 0).rhos[0] == pytest.approx(max(abs(np.linalg.eigvals(M))), rel=1e-10)


def test_beta_tilde_trivial(rng):
    p = certified_models(rng, 1)[0]
    c = certify(p, 0)
    assert beta_tilde([0.0], 7, c) == 0.0
    assert beta_tilde([2.0], 0, c) == pytest.approx(mu(c.layers[0].schur, 0) * 2.0)
    with pytest.raises(ValueError):
        beta_tilde([1.0, 1.0], 0, c)


def test_beta_tilde_multilayer_large_t(rng):
    p = certified_models(rng, 1, n_layers=3, scale=0.2)[0]
    c = certify(p, 0)
    vals = [beta_tilde([1.0, 1.0, 1.0], t, c) for t in (0, 10, 100, 5000)]
    assert all(np.isfinite(vals)) and vals[-1] < vals[0]


def test_beta_tilde_soundness_short(rng):
    for p in certified_models(rng, 3):
        seq = compute_sequences(p, 0)
        lb = all_bounds(seq, 0)
        c = certify(p, 0, seq=seq)
        xs = rng.uniform(-1, 1, size=(60, p.n_x))
        for _ in range(5):
            s1, s2 = sample_in_set(rng, p, lb, n=2)
            d0 = np.linalg.norm(s1.as_vector() - s2.as_vector())
            t1, t2 = simulate(p, s1, xs), simulate(p, s2, xs)
            for t in range(60):
                d = np.linalg.norm(t1.state(t).as_vector() - t2.state(t).as_vector())
                assert d <= beta_tilde([d0], t + 1, c) + 1e-12
