import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blindtof.blind_amin import (DegenerateLinearization, RationalSpikeModel, SolverConfig, blind_solve,
                                 auto_sigma, estimate_sigma, extract_spikes, init_kernel, init_q_deterministic, model_from_spikes,
                                 noise_budget, p1_build, p1_solve, p1_step, p2_kernel, threshold_spikes)
from blindtof.forward_model import (BandlimitedDirichlet, MeasurementTrace, RaisedCosine, SpikeTrain, add_noise,
                                    dirichlet_spikes, make_kernel, simulate_trace)
from blindtof.pipeline import align_gauge, align_spikes
from blindtof.prony import prony_solve
from blindtof.signal_core import AcquisitionGrid, circ_conv, dft, poly_roots


def frame(x, N):
    """Move a real vector into the solver's modulated frame."""
    return x * np.exp(2j * np.pi * np.arange(N) * (N // 2) / N)


def small_scene(mode="circular"):
    grid = AcquisitionGrid(128, 1.0)
    k = make_kernel(RaisedCosine.from_fwhm(20.0, 8.0), grid)
    truth = SpikeTrain([50.3, 56.8], [1.0, 0.6])
    return grid, k, truth, simulate_trace(k, truth, mode)


# ---------------------------------------------------------------- model

@pytest.mark.parametrize("offset", [0, 32])
def test_model_extract_roundtrip(offset):
    grid = AcquisitionGrid(64, 1.0)
    truth = SpikeTrain([10.37, 41.82], [1.3, -0.4])
    est = extract_spikes(model_from_spikes(truth, grid, offset), grid)
    np.testing.assert_allclose(est.taus, truth.taus, atol=1e-9)
    np.testing.assert_allclose(est.gammas, truth.gammas, atol=1e-9)


def test_model_samples_match_dirichlet_in_shifted_frame():
    grid = AcquisitionGrid(64, 1.0)
    truth = SpikeTrain([10.37, 41.82], [1.3, -0.4])
    d = model_from_spikes(truth, grid, 32).samples(64)
    ref = dirichlet_spikes(truth, 64)
    # the two agree away from the Nyquist bin
    D, R = dft(d), dft(ref)
    mask = np.arange(64) != 32
    np.testing.assert_allclose(D[mask], R[mask], atol=1e-10)


def test_extract_single_root():
    u = np.exp(-2j * np.pi * 0.3)
    model = RationalSpikeModel(np.array([1.0]), np.array([1.0, -u]))
    grid = AcquisitionGrid(20, 0.5)
    assert extract_spikes(model, grid).taus[0] == pytest.approx(0.3 * grid.window)


def test_extract_on_grid_fallback():
    grid = AcquisitionGrid(16, 1.0)
    # exactly on the grid P/Q degenerates to 0/0; this is the limit the fallback sees
    model = model_from_spikes(SpikeTrain([5.0 + 1e-9], [2.0]), grid)
    spikes, info = extract_spikes(model, grid, return_info=True)
    assert any("on-grid" in f for f in info["flags"])
    assert spikes.taus[0] == pytest.approx(5.0, abs=1e-8)
    assert spikes.gammas[0] == pytest.approx(2.0, rel=1e-6)


def test_model_validation():
    with pytest.raises(ValueError):
        RationalSpikeModel(np.array([1.0, 2.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        RationalSpikeModel(np.array([1.0]), np.array([0.0, 0.0]))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(jmax=0)
    with pytest.raises(ValueError):
        SolverConfig(q_clamp=0.0)
    with pytest.raises(ValueError):
        SolverConfig(sigma=-1.0)
    assert SolverConfig().to_dict()["max_restarts"] == 10


# ---------------------------------------------------------------- initialisation

def test_init_kernel_identity_and_seed():
    g = np.sin(np.arange(32) / 3.0)
    np.testing.assert_array_equal(init_kernel(g), g)
    np.testing.assert_array_equal(init_kernel(g, 7), init_kernel(g, 7))
    assert not np.array_equal(init_kernel(g, 7), init_kernel(g, 8))


def test_init_kernel_spectrum():
    rng = np.random.default_rng(0)
    g = rng.standard_normal(256)
    G = np.abs(dft(g))
    for seed in range(10):
        F = np.abs(dft(init_kernel(g, seed)))
        # taking the real part averages a bin with its mirror: never larger
        assert np.all(F <= G * (1 + 1e-12) + 1e-12)
        # measured over these seeds the energy loss stays well below 3/4
        assert np.sum(F ** 2) >= 0.25 * np.sum(G ** 2)


def test_init_q_peaks():
    q = init_q_deterministic(np.array([0, 5, 0, 0, 3, 0, 0, 0.0]), 2)
    u = np.sort_complex(1 / poly_roots(q))
    expected = np.sort_complex(np.exp(-2j * np.pi * np.array([1, 4]) / 8))
    np.testing.assert_allclose(u, expected, atol=1e-12)
    assert np.linalg.norm(q) == pytest.approx(1.0)


def test_init_q_constant_fallback():
    u = 1 / poly_roots(init_q_deterministic(np.ones(8), 3))
    idx = np.round(-np.angle(u) * 8 / (2 * np.pi)).astype(int) % 8
    assert len(set(idx)) == 3


def test_init_q_off_grid():
    truth = SpikeTrain([12.4, 40.7], [1.0, 0.8])
    q = init_q_deterministic(dirichlet_spikes(truth, 64), 2)
    u = 1 / poly_roots(q)
    idx = np.sort(np.mod(-np.angle(u) * 64 / (2 * np.pi), 64))
    assert np.all(np.abs(idx - np.round(truth.taus)) <= 1)


# ---------------------------------------------------------------- spike step

def test_p1_build_dirac_kernel():
    rng = np.random.default_rng(1)
    N, K = 64, 2
    g = rng.standard_normal(N)
    phi = np.eye(N)[0]
    A, B, u = p1_build(phi, g, np.array([1.0, 0, 0]), g, K)
    assert A.shape == (64, 3) and B.shape == (64, 2) and u.shape == (64,)
    np.testing.assert_allclose(u, 0, atol=1e-12)
    # Q = 1: R cancels the 1/N of V, so A is d0 times plain Vandermonde columns
    V = np.exp(2j * np.pi * np.outer(np.arange(N), np.arange(3)) / N)
    np.testing.assert_allclose(A, g[:, None] * V, atol=1e-12)


def test_p1_build_plug_in_truth():
    grid, k, truth, _ = small_scene()
    N = grid.n_samples
    model = model_from_spikes(truth, grid, N // 2)
    phi_m = frame(k.samples, N)
    g_m = circ_conv(phi_m, RationalSpikeModel(model.p, model.q).samples(N))
    d0 = np.random.default_rng(2).standard_normal(N)
    A, B, u = p1_build(phi_m, g_m, model.q, d0, 2)
    obj = np.linalg.norm(u + A @ model.q - B @ model.p) ** 2
    assert obj <= 1e-16 * np.linalg.norm(g_m) ** 2


def _p1_inputs(seed):
    grid, k, truth, y = small_scene()
    N = grid.n_samples
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    phi_m, g_m = frame(k.samples, N), frame(y.samples, N)
    d0 = np.fft.ifft(np.fft.fft(g_m) / np.fft.fft(phi_m))
    return grid, k, truth, y, phi_m, g_m, d0, q


def test_p1_step_constraint_and_fixed_point():
    grid, k, truth, y, phi_m, g_m, d0, _ = _p1_inputs(0)
    q_true = model_from_spikes(truth, grid, 64).q
    q0 = q_true / np.linalg.norm(q_true)
    A, B, u = p1_build(phi_m, g_m, q0, d0, 2)
    p, q, _ = p1_step(A, B, u, q0)
    assert abs(np.vdot(q0, q) - 1) <= 1e-9
    cos = abs(np.vdot(q, q_true)) / (np.linalg.norm(q) * np.linalg.norm(q_true))
    assert 1 - cos <= 1e-8


def test_p1_step_zero_offset():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((20, 3)) + 1j * rng.standard_normal((20, 3))
    B = rng.standard_normal((20, 2)) + 1j * rng.standard_normal((20, 2))
    x_true = np.array([1.0, 0.5, -0.2])
    A[:, 2] = -(A[:, :2] @ x_true[:2] - B @ np.array([0.3, 0.7])) / x_true[2]  # Aq in range(B) for q = x_true
    q0 = x_true / np.vdot(x_true, x_true)
    p, q, _ = p1_step(A, B, np.zeros(20), q0)
    assert np.linalg.norm(B @ p - A @ q) <= 1e-10


def test_p1_step_degenerate():
    A = np.zeros((8, 3), dtype=complex)
    B = np.zeros((8, 2), dtype=complex)
    with pytest.raises(DegenerateLinearization):
        p1_step(A, B, np.ones(8), np.array([1.0, 0, 0]))


def test_p1_solve_converged_start():
    grid, k, truth, y = small_scene()
    q_true = model_from_spikes(truth, grid, 64).q
    cfg = SolverConfig(sigma=1e-9 * np.linalg.norm(y.samples))
    res = p1_solve(k.samples, y.samples, 2, q_true, cfg, 64)
    assert res.iterations == 1
    assert res.residual <= 1e-9 * np.linalg.norm(y.samples)


def test_p1_solve_single_step():
    grid, k, truth, y = small_scene()
    res = p1_solve(k.samples, y.samples, 2, np.array([1.0, 0.3, 0.1]), SolverConfig(jmax=1, sigma=0.0), 64)
    assert res.iterations == 1 and len(res.residuals) == 1


def test_p1_solve_from_peaks():
    grid = AcquisitionGrid(128, 1.0)
    k = make_kernel(BandlimitedDirichlet(30), grid)
    truth = SpikeTrain([40.3, 48.3], [1.0, 0.7])
    y = simulate_trace(k, truth, "circular")
    d0 = np.fft.ifft(np.fft.fft(frame(y.samples, 128)) / np.where(np.abs(np.fft.fft(frame(k.samples, 128))) > 1e-8,
                                                                    np.fft.fft(frame(k.samples, 128)), np.inf))
    q0 = init_q_deterministic(d0, 2)
    cfg = SolverConfig(sigma=1e-8 * np.linalg.norm(y.samples), jmax=20)
    res = p1_solve(k.samples, y.samples, 2, q0, cfg, 64)
    assert res.iterations <= 20
    assert res.residual <= 1e-8 * np.linalg.norm(y.samples)
    est = extract_spikes(res.model, grid)
    np.testing.assert_allclose(est.taus, truth.taus, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_p1_normalization_after_every_step(seed):
    grid, k, truth, y, phi_m, g_m, d0, q = _p1_inputs(seed)
    q0 = q / np.linalg.norm(q)
    q_j = q0
    for _ in range(5):
        A, B, u = p1_build(phi_m, g_m, q_j, d0, 2)
        p, q_j, _ = p1_step(A, B, u, q0)
        assert abs(np.vdot(q0, q_j) - 1) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 20))
def test_p1_best_iterate(seed, jmax):
    grid, k, truth, y, *_ , q = _p1_inputs(seed)
    noisy = add_noise(y, 25.0, seed)
    res = p1_solve(k.samples, noisy.samples, 2, q, SolverConfig(jmax=jmax, sigma=0.0), 64)
    assert res.residual <= min(res.residuals)
    assert len(res.residuals) == res.iterations <= jmax


# ---------------------------------------------------------------- kernel step

def test_p2_dirac():
    g = np.cos(np.arange(32) / 2.0)
    np.testing.assert_allclose(p2_kernel(np.eye(32)[0], g), g, atol=1e-12)
    np.testing.assert_array_equal(p2_kernel(np.eye(32)[3], np.zeros(32)), np.zeros(32))


def test_p2_true_spikes():
    grid, k, truth, y = small_scene()
    d = dirichlet_spikes(truth, 128)
    D = dft(d)
    keep = np.abs(D) > 1e-8 * np.abs(D).max()
    phi = p2_kernel(d, y.samples)
    np.testing.assert_allclose(dft(phi)[keep], dft(k.samples)[keep], atol=1e-8)
    idx = np.nonzero(k.samples)[0]
    np.testing.assert_allclose(p2_kernel(d, y.samples, support=idx), k.samples, atol=1e-9)


def test_p2_degenerate():
    with pytest.raises(ValueError):
        p2_kernel(np.zeros(8), np.ones(8))


# ---------------------------------------------------------------- noise level

def test_sigma_noiseless_bandlimited():
    grid = AcquisitionGrid(256, 1.0)
    k = make_kernel(BandlimitedDirichlet(40), grid)
    y = simulate_trace(k, SpikeTrain([70.2, 90.9], [1.0, 0.5]), "circular")
    assert estimate_sigma(y) <= 1e-9 * np.linalg.norm(y.samples)


def test_sigma_white_noise_calibration():
    rng = np.random.default_rng(11)
    N, s = 512, 0.3
    for _ in range(100):
        est = estimate_sigma(s * rng.standard_normal(N))
        assert 0.7 * s * np.sqrt(N) <= est <= 1.3 * s * np.sqrt(N)


def test_sigma_homogeneous():
    x = np.random.default_rng(4).standard_normal(128)
    assert estimate_sigma(-4.0 * x) == estimate_sigma(x) * 4.0
    assert estimate_sigma(-x) == estimate_sigma(x)
    assert estimate_sigma(2.7 * x) == pytest.approx(2.7 * estimate_sigma(x), rel=1e-12)
    with pytest.raises(ValueError):
        estimate_sigma(np.ones(8))


@pytest.mark.parametrize("N", [128, 512, 2976])
def test_auto_sigma_covers_noise(N):
    # the tolerance must account for the estimator spread, not just ||n||
    rng = np.random.default_rng(N)
    hits = [np.linalg.norm(n := 0.2 * rng.standard_normal(N)) <= auto_sigma(n) for _ in range(1000)]
    assert np.mean(hits) >= 0.98


def test_noise_budget_covers_noise():
    rng = np.random.default_rng(5)
    N, s = 512, 0.1
    norms = [np.linalg.norm(s * rng.standard_normal(N)) for _ in range(500)]
    assert np.mean(np.array(norms) <= noise_budget(s, N)) >= 0.99


# ---------------------------------------------------------------- thresholding

def test_threshold_examples():
    s = SpikeTrain([1.0, 5.0], [1.0, 0.02])
    same = threshold_spikes(s, 0.0)
    assert np.array_equal(same.taus, s.taus) and np.array_equal(same.gammas, s.gammas)
    kept = threshold_spikes(s, 0.05)
    assert kept.K == 1 and kept.taus[0] == 1.0


def test_threshold_removes_spurious_pair():
    grid = AcquisitionGrid(128, 1.0)
    k = make_kernel(RaisedCosine.from_fwhm(30.0, 6.0), grid)
    ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        t0 = rng.uniform(40, 60)
        truth = SpikeTrain([t0, t0 + rng.uniform(15, 30)], [1.0, rng.uniform(0.5, 1)])
        y = add_noise(simulate_trace(k, truth), 30.0, seed)
        kept = threshold_spikes(prony_solve(y, k, 4), 0.1)
        ok += kept.K == 2 and np.max(np.abs(kept.taus - truth.taus)) < 2.0
    assert ok >= 18


# ---------------------------------------------------------------- blind solve

def _aligned(truth, rep, k, grid):
    c, delta, _ = align_gauge(k.samples, rep.kernel.samples)
    return align_spikes(truth, rep.spikes, grid, c, delta)


def test_blind_small_scene():
    grid, k, truth, y = small_scene()
    sigma = 1e-9 * np.linalg.norm(y.samples)
    rep = blind_solve(y, SolverConfig(K=2, sigma=sigma))
    assert rep.converged and rep.residual <= sigma
    taus, gams = _aligned(truth, rep, k, grid)
    np.testing.assert_allclose(taus, truth.taus, atol=1e-6)
    np.testing.assert_allclose(gams, truth.gammas, rtol=1e-6)
    assert np.max(np.abs(rep.kernel.samples)) == pytest.approx(1.0)
    assert np.all(np.diff(rep.spikes.taus) > 0)


def test_blind_single_copy():
    grid = AcquisitionGrid(64, 1.0)
    k = make_kernel(RaisedCosine.from_fwhm(20.0, 6.0), grid)
    y = simulate_trace(k, SpikeTrain([30.0], [1.0]), "circular")
    rep = blind_solve(y, SolverConfig(K=1, sigma=1e-9))
    assert rep.converged
    taus, gams = _aligned(SpikeTrain([30.0], [1.0]), rep, k, grid)
    assert taus[0] == pytest.approx(30.0, abs=1e-9)
    assert gams[0] == pytest.approx(1.0, rel=1e-9)


def test_blind_rejects_large_k():
    grid, k, truth, y = small_scene()
    with pytest.raises(ValueError):
        blind_solve(y, SolverConfig(K=65, sigma=1.0))


def test_blind_deterministic():
    grid, k, truth, y = small_scene()
    cfg = SolverConfig(K=2, sigma=1e-9 * np.linalg.norm(y.samples), kernel_support=16, seed=3)
    a, b = blind_solve(y, cfg), blind_solve(y, cfg)
    np.testing.assert_array_equal(a.spikes.taus, b.spikes.taus)
    np.testing.assert_array_equal(a.kernel.samples, b.kernel.samples)


def test_blind_gauge_covariance():
    grid, k, truth, y = small_scene()
    s0 = 1e-9 * np.linalg.norm(y.samples)
    base = blind_solve(y, SolverConfig(K=2, sigma=s0, kernel_support=16))
    # power-of-two scaling is exact in floating point
    quad = blind_solve(MeasurementTrace(4.0 * y.samples, grid), SolverConfig(K=2, sigma=4 * s0, kernel_support=16))
    np.testing.assert_array_equal(quad.spikes.taus, base.spikes.taus)
    np.testing.assert_array_equal(quad.spikes.gammas, 4.0 * base.spikes.gammas)
    assert quad.residual == 4.0 * base.residual
    other = blind_solve(MeasurementTrace(3.7 * y.samples, grid), SolverConfig(K=2, sigma=3.7 * s0, kernel_support=16))
    np.testing.assert_allclose(other.spikes.taus, base.spikes.taus, atol=1e-6)
    np.testing.assert_allclose(other.spikes.gammas, 3.7 * base.spikes.gammas, rtol=1e-6)


def test_blind_consistent_with_prony():
    grid, k, truth, y = small_scene()
    rep = blind_solve(y, SolverConfig(K=2, sigma=1e-9 * np.linalg.norm(y.samples), kernel_support=16))
    again = prony_solve(y, rep.kernel, 2)
    assert np.max(np.abs(again.taus - rep.spikes.taus)) <= 1e-6 * grid.window
