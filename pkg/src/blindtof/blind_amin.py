"""Blind recovery of spikes and kernel by alternating minimization.

The trace is modelled as ``g = phi (*) d`` where ``d[n] = P(xi^n) / Q(xi^n)``
is the Dirichlet spike vector written as a ratio of polynomials. The spike
step (P1) fits ``P, Q`` with an iterative linearization; the kernel step (P2)
is a least-squares fit of ``phi`` restricted to a finite support window.

Internally the spike step works in a frequency-shifted frame: multiplying
both ``g`` and ``phi`` by ``xi^(n L0)`` with ``L0 = N // 2`` makes the
two-sided (real) Dirichlet vector an exact one-sided rational function.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .forward_model import KernelTrace, MeasurementTrace, SpikeTrain, dirichlet_spikes
from .prony import delays_from_roots
from .signal_core import AcquisitionGrid, circ_conv, circ_lsq, poly_eval, poly_from_roots, poly_roots
from .strang_fix import DEFAULT_BAND_THRESHOLD

__all__ = [
    "RationalSpikeModel",
    "SolverConfig",
    "SolveReport",
    "DegenerateLinearization",
    "model_from_spikes",
    "init_kernel",
    "init_q_deterministic",
    "p1_build",
    "p1_step",
    "p1_solve",
    "extract_spikes",
    "p2_kernel",
    "blind_solve",
    "auto_sigma",
    "estimate_sigma",
    "noise_budget",
    "threshold_spikes",
    "center_of_mass",
    "support_window",
]


class DegenerateLinearization(np.linalg.LinAlgError):
    """The constrained normal system of a spike step is singular."""


# --------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class RationalSpikeModel:
    """Coefficients of ``P`` (degree K-1) and ``Q`` (degree K), constant first.

    ``freq_offset`` is the frame shift ``L0``: the modelled vector is
    ``xi^(-n L0) P(xi^n) / Q(xi^n)``.
    """

    p: np.ndarray
    q: np.ndarray
    freq_offset: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=complex)
        q = np.asarray(self.q, dtype=complex)
        if q.size < 2 or p.size != q.size - 1:
            raise ValueError("need len(q) = len(p) + 1 >= 2")
        if not np.any(q):
            raise ValueError("Q must be nonzero")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def K(self) -> int:
        return self.q.size - 1

    def samples(self, N: int, q_clamp: float = 0.0) -> np.ndarray:
        """``d[n]`` on the N-point grid (shifted frame removed)."""
        z = np.exp(2j * np.pi * np.arange(N) / N)
        den = _clamp(poly_eval(self.q, z), q_clamp)
        d = poly_eval(self.p, z) / den
        return d * _modulation(N, -self.freq_offset)


@dataclass
class SolverConfig:
    """Knobs of :func:`blind_solve`.

    ``sigma`` is the l2 stopping tolerance; ``None`` means estimate it.
    ``kernel_support`` is the kernel length in samples; ``None`` means pick
    the smallest length whose fit meets ``sigma``.
    """

    K: int = 2
    sigma: Optional[float] = None
    jmax: int = 20
    max_restarts: int = 10
    max_outer: int = 50
    pinv_rel_threshold: float = 1e-8
    q_clamp: float = 1e-8
    seed: int = 0
    band_threshold: float = DEFAULT_BAND_THRESHOLD
    kernel_support: Optional[int] = None
    refine: bool = True
    refresh_d0: bool = False
    stall_tol: float = 1e-3
    fixed_point_tol: float = 1e-10

    def __post_init__(self):
        ints = {"K": self.K, "jmax": self.jmax, "max_restarts": self.max_restarts,
                "max_outer": self.max_outer}
        for name, v in ints.items():
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("pinv_rel_threshold", "q_clamp", "band_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v!r}")
        if self.sigma is not None and not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.kernel_support is not None and self.kernel_support < 1:
            raise ValueError("kernel_support must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SolveReport:
    spikes: SpikeTrain
    kernel: KernelTrace
    residual: float
    restarts_used: int
    iterations_used: int
    converged: bool
    degenerate_flags: list = field(default_factory=list)
    sigma: float = 0.0


# --------------------------------------------------------------------------
# small helpers

def _modulation(N: int, offset: int) -> np.ndarray:
    return np.exp(2j * np.pi * ((np.arange(N) * offset) % N) / N)


def _clamp(values: np.ndarray, rel: float) -> np.ndarray:
    """Floor ``|values|`` at ``rel * max|values|`` keeping the phase."""
    mag = np.abs(values)
    floor = rel * mag.max()
    if floor == 0.0:
        return values
    small = mag < floor
    if np.any(small):
        values = values.copy()
        phase = np.where(mag[small] > 0, values[small] / np.where(mag[small] > 0, mag[small], 1), 1.0)
        values[small] = floor * phase
    return values


def _samples(x) -> np.ndarray:
    if isinstance(x, (MeasurementTrace, KernelTrace)):
        return x.samples
    return np.asarray(x)


def center_of_mass(x) -> float:
    """Circular centre of mass of ``|x|``, in samples within ``[0, N)``."""
    a = np.abs(_samples(x))
    N = a.size
    z = np.sum(a * np.exp(2j * np.pi * np.arange(N) / N))
    if abs(z) == 0:
        return 0.0
    return float(np.mod(np.angle(z) * N / (2 * np.pi), N))


def support_window(center: float, length: int, N: int) -> np.ndarray:
    """Indices of a length-``length`` circular window centred at ``center``."""
    start = int(math.floor(center - (length - 1) / 2 + 0.5))
    return np.mod(start + np.arange(length), N)


def model_from_spikes(spikes: SpikeTrain, grid: AcquisitionGrid, freq_offset: int = 0) -> RationalSpikeModel:
    """Exact ``P, Q`` for a spike train (partial fractions summed up)."""
    N = grid.n_samples
    x = spikes.taus / grid.sample_period
    u = np.exp(-2j * np.pi * x / N)
    gam = spikes.gammas * u ** (-freq_offset)
    q = poly_from_roots(1.0 / u)
    p = np.zeros(spikes.K, dtype=complex)
    for k in range(spikes.K):
        others = poly_from_roots(1.0 / np.delete(u, k))
        p += gam[k] * (1 - u[k] ** N) / N * others
    return RationalSpikeModel(p, q, freq_offset)


# --------------------------------------------------------------------------
# initialisation

def init_kernel(g, seed=None) -> np.ndarray:
    """``Re(ifft(exp(j w) * fft(g)))`` with ``w ~ N(0, I)``; ``seed=None`` means ``w = 0``."""
    x = np.asarray(_samples(g), dtype=float)
    if seed is None:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = rng.standard_normal(x.size)
    return np.fft.ifft(np.exp(1j * w) * np.fft.fft(x)).real


def _peak_indices(a: np.ndarray, K: int) -> list:
    N = a.size
    left, right = np.roll(a, 1), np.roll(a, -1)
    maxima = np.nonzero((a > left) & (a > right))[0]
    chosen: list = []
    for i in maxima[np.argsort(-a[maxima], kind="stable")]:
        if all(min((i - j) % N, (j - i) % N) > 1 for j in chosen):
            chosen.append(int(i))
        if len(chosen) == K:
            return chosen
    for i in np.argsort(-a, kind="stable"):
        if len(chosen) == K:
            break
        if int(i) not in chosen:
            chosen.append(int(i))
    return chosen


def init_q_deterministic(d0, K: int) -> np.ndarray:
    """Unit-norm ``Q`` whose roots sit at the K most prominent peaks of ``|d0|``."""
    d0 = np.asarray(d0)
    N = d0.size
    if N < 2 * K:
        raise ValueError("need N >= 2K")
    idx = np.array(_peak_indices(np.abs(d0), K))
    u = np.exp(-2j * np.pi * idx / N)
    q = poly_from_roots(1.0 / u)
    return q / np.linalg.norm(q)


# --------------------------------------------------------------------------
# spike step

@lru_cache(maxsize=64)
def _vand(N: int, cols: int) -> np.ndarray:
    v = np.exp(2j * np.pi * (np.outer(np.arange(N), np.arange(cols)) % N) / N) / N
    v.setflags(write=False)
    return v


def _circ_apply(phi_hat: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``T_phi X`` column-wise, with ``phi_hat = fft(phi)``."""
    return np.fft.ifft(phi_hat[:, None] * np.fft.fft(X, axis=0), axis=0)


def p1_build(phi, g, q_j, d0, K: int, q_clamp: float = 1e-8):
    """Linearized spike-step matrices ``A, B`` and offset ``u``.

    ``A = T_phi R diag(d0) V_{K+1}``, ``B = T_phi R V_K``, ``u = g - T_phi d0``
    and ``R = diag(V_{K+1} q_j)^-1`` with the denominator floored at
    ``q_clamp * max``.
    """
    phi = np.asarray(_samples(phi))
    g = np.asarray(_samples(g))
    d0 = np.asarray(d0)
    q_j = np.asarray(q_j, dtype=complex)
    N = g.size
    if q_j.size != K + 1:
        raise ValueError(f"q must have K+1 = {K + 1} coefficients")
    if not np.any(q_j):
        raise ValueError("Q must be nonzero")
    den = _clamp(_vand(N, K + 1) @ q_j, q_clamp)
    rinv = 1.0 / den
    phi_hat = np.fft.fft(phi)
    A = _circ_apply(phi_hat, (rinv * d0)[:, None] * _vand(N, K + 1))
    B = _circ_apply(phi_hat, rinv[:, None] * _vand(N, K))
    u = g - np.fft.ifft(phi_hat * np.fft.fft(d0))
    return A, B, u


def p1_step(A, B, u, q0):
    """Minimise ``||u + A q - B p||`` subject to ``<q0, q> = 1``.

    Returns ``(p, q, lambda)``. The minimiser is the one of the bordered
    system ``[[C^H C, x0], [x0^H, 0]] [x; lambda] = [C^H u; 1]`` with
    ``C = [-A, B]``, but it is computed by eliminating the constraint
    (``x = x0 / |x0|^2 + Z y`` with ``Z`` spanning the orthogonal complement
    of ``x0``) and solving the reduced problem by SVD, which avoids squaring
    the condition number of ``C``.
    """
    C = np.hstack([-A, B])
    nq = A.shape[1]
    x0 = np.concatenate([np.asarray(q0, dtype=complex), np.zeros(B.shape[1])])
    n = C.shape[1]
    nrm2 = np.vdot(x0, x0).real
    if nrm2 == 0:
        raise DegenerateLinearization("degenerate linearization")
    # columns 1.. of a unitary with first column along x0
    Qfull, _ = np.linalg.qr(np.column_stack([x0, np.eye(n, dtype=complex)]))
    Z = Qfull[:, 1:n]
    xp = x0 / nrm2
    CZ = C @ Z
    s = np.linalg.svd(CZ, compute_uv=False)
    if s.size and (s[-1] <= 1e-14 * s[0] or not np.all(np.isfinite(s))):
        raise DegenerateLinearization("degenerate linearization")
    y, *_ = np.linalg.lstsq(CZ, u - C @ xp, rcond=None)
    x = xp + Z @ y
    grad = C.conj().T @ (u - C @ x)
    lam = np.vdot(x0, grad) / nrm2
    return x[nq:n], x[:nq], lam


def _fit_residual(phi, g, model: RationalSpikeModel, q_clamp: float) -> float:
    d = model.samples(g.size, q_clamp)
    return float(np.linalg.norm(g - np.fft.ifft(np.fft.fft(phi) * np.fft.fft(d))))


@dataclass
class P1Result:
    model: RationalSpikeModel
    residual: float
    iterations: int
    residuals: list


def p1_solve(phi, g, K: int, q0, config: SolverConfig, freq_offset: int = 0) -> P1Result:
    """Iterate the linearized spike step and keep the best iterate.

    ``phi`` and ``g`` are given in the original frame; the frame shift is
    applied here. The returned residual is ``||g - phi (*) d||`` of the best
    model seen, which need not be the last one.
    """
    phi = np.asarray(_samples(phi), dtype=float)
    g = np.asarray(_samples(g), dtype=float)
    N = g.size
    mod = _modulation(N, freq_offset)
    phi_m, g_m = phi * mod, g * mod
    d0 = circ_lsq(phi_m, g_m, config.pinv_rel_threshold)
    q0 = np.asarray(q0, dtype=complex)
    q0 = q0 / np.linalg.norm(q0)
    q_j = q0
    sigma = -1.0 if config.sigma is None else config.sigma
    best, best_res, history = None, math.inf, []
    j = 0
    for j in range(1, config.jmax + 1):
        A, B, u = p1_build(phi_m, g_m, q_j, d0, K, config.q_clamp)
        p_next, q_next, _ = p1_step(A, B, u, q0)
        model = RationalSpikeModel(p_next, q_next, freq_offset)
        res = _fit_residual(phi_m, g_m, RationalSpikeModel(p_next, q_next), config.q_clamp)
        history.append(res)
        if res < best_res:
            best, best_res = model, res
        if res <= sigma:
            break
        # a fixed point of the linearization: further steps repeat it
        step = np.linalg.norm(q_next - q_j * (np.vdot(q_j, q_next) / np.vdot(q_j, q_j)))
        if step <= config.fixed_point_tol * np.linalg.norm(q_next):
            break
        q_j = q_next
        if config.refresh_d0:
            d0 = RationalSpikeModel(p_next, q_next).samples(N, config.q_clamp)
    return P1Result(best, best_res, j, history)


def extract_spikes(model: RationalSpikeModel, grid: AcquisitionGrid, return_info: bool = False):
    """Delays from the roots of ``Q`` and amplitudes from the residues of ``P / Q``.

    With ``return_info=True`` also returns a dict holding the discarded
    imaginary part of the amplitudes and any flags.
    """
    N = grid.n_samples
    K = model.K
    z = poly_roots(model.q)
    z = z[np.abs(z) > 0]
    if z.size < K:
        raise ValueError(f"Q has only {z.size} usable roots, need {K}")
    est = delays_from_roots(1.0 / z, grid.window, keep=K)
    u = est.roots
    # residues at the raw roots closest to each projected one
    raw_u = 1.0 / z
    pick = [int(np.argmin(np.abs(raw_u - uk))) for uk in u]
    ur = raw_u[pick]
    dq = np.polynomial.polynomial.polyder(model.q)
    flags = list(est.flags)
    # roots far off the circle overflow ur**N; those go to the least-squares path
    with np.errstate(over="ignore", invalid="ignore"):
        denom = (1 - ur ** N) * poly_eval(dq, 1.0 / ur)
    on_grid = np.abs(1 - u ** N) < 1e-6
    gam = np.empty(K, dtype=complex)
    ok = ~on_grid & np.isfinite(denom) & (np.abs(denom) > 0)
    gam[ok] = -N * ur[ok] * poly_eval(model.p, 1.0 / ur[ok]) / denom[ok]
    gam[ok] *= ur[ok] ** model.freq_offset
    if np.any(~ok):
        flags.append("on-grid root: least-squares amplitudes" if np.any(on_grid)
                     else "unstable residue: least-squares amplitudes")
        d = model.samples(N)
        cols = np.stack([dirichlet_spikes(SpikeTrain([t], [1.0]), N, grid.sample_period) for t in est.taus], axis=1)
        gam = np.linalg.lstsq(cols.astype(complex), d, rcond=None)[0]
    spikes = SpikeTrain(est.taus, gam.real)
    if return_info:
        return spikes, {"imag_residue": float(np.abs(gam.imag).max()), "flags": flags}
    return spikes


# --------------------------------------------------------------------------
# kernel step

def p2_kernel(d, g, rel_threshold: float = 1e-8, support=None) -> np.ndarray:
    """Least-squares kernel for a fixed spike vector.

    Without ``support`` this is the truncated spectral inverse. With an index
    array ``support`` the kernel is forced to vanish outside those samples.
    """
    d = np.asarray(_samples(d))
    g = np.asarray(_samples(g), dtype=float)
    if not np.any(d):
        raise ValueError("degenerate spike vector")
    if support is None:
        return np.real(circ_lsq(d, g, rel_threshold))
    idx = np.asarray(support, dtype=int)
    D = _shift_columns(np.real(d), idx)
    coef, *_ = np.linalg.lstsq(D, g, rcond=None)
    phi = np.zeros(g.size)
    phi[idx] = coef
    return phi


def _shift_columns(d: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Columns ``roll(d, i)`` for ``i`` in ``idx``: ``phi (*) d = D phi[idx]``."""
    N = d.size
    rows = (np.arange(N)[:, None] - idx[None, :]) % N
    return d[rows]


# --------------------------------------------------------------------------
# noise level

def estimate_sigma(g) -> float:
    """l2 noise budget from the top quarter of the spectrum.

    For white noise of standard deviation ``s`` each DFT coefficient has a
    Rayleigh magnitude with median ``s sqrt(N ln 2)``; the estimate is
    ``median |G[f]| / sqrt(ln 2)`` over bins with ``|f| >= 3N/8``, an estimate
    of ``s sqrt(N)``.
    """
    x = np.asarray(_samples(g), dtype=float)
    N = x.size
    if N < 16:
        raise ValueError("need at least 16 samples to estimate the noise level")
    f = np.abs(np.fft.fftfreq(N, 1.0 / N))
    top = np.abs(np.fft.fft(x))[f >= 3 * N / 8]
    return float(np.median(top) / math.sqrt(math.log(2.0)))


def noise_budget(std: float, N: int, z: float = 3.0) -> float:
    """Upper ``z``-sigma quantile of ``||n||`` for white noise: ``std sqrt(N + z sqrt(2N))``."""
    return float(std * math.sqrt(N + z * math.sqrt(2 * N)))


def auto_sigma(g, z_est: float = 2.0) -> float:
    """Stopping tolerance when none is given.

    :func:`estimate_sigma` tracks the typical noise norm, which half of all
    noise draws exceed, so it is widened twice: by :func:`noise_budget` for
    the spread of ``||n||`` and by ``z_est`` standard errors of the median
    itself (relative error ``1 / (2 ln 2 sqrt(n))`` for ``n`` independent
    Rayleigh bins).
    """
    x = np.asarray(_samples(g), dtype=float)
    N = x.size
    n_bins = np.count_nonzero(np.arange(N // 2 + 1) >= 3 * N / 8)
    rel = 1.0 / (2 * math.log(2.0) * math.sqrt(n_bins))
    return noise_budget(estimate_sigma(x) / math.sqrt(N), N) * (1 + z_est * rel)


def threshold_spikes(spikes: SpikeTrain, rel_threshold: float) -> SpikeTrain:
    """Drop spikes with ``|gamma| < rel_threshold * max |gamma|`` (the largest always survives)."""
    if not 0 <= rel_threshold < 1:
        raise ValueError("rel_threshold must lie in [0, 1)")
    a = np.abs(spikes.gammas)
    keep = a >= rel_threshold * a.max()
    return SpikeTrain(spikes.taus[keep], spikes.gammas[keep])


# --------------------------------------------------------------------------
# blind loop

def _spike_vector(x: np.ndarray, gammas: np.ndarray, N: int) -> np.ndarray:
    """Real Dirichlet vector for delays ``x`` in samples (no validation, any real x)."""
    f = np.fft.fftfreq(N, 1.0 / N)
    S = np.exp(-2j * np.pi * np.outer(f, x) / N) @ np.asarray(gammas, dtype=complex)
    if N % 2 == 0:
        S[N // 2] = np.sum(gammas * np.cos(np.pi * x))
    return np.fft.ifft(S).real


def _kernel_fit(d: np.ndarray, g: np.ndarray, idx: np.ndarray):
    """Support-constrained kernel least squares via its Toeplitz normal equations.

    ``D^T D`` is the circular autocorrelation of ``d`` laid out as a Toeplitz
    matrix and ``D^T g`` the cross-correlation, both one FFT away.
    """
    N = d.size
    S = idx.size
    dh = np.fft.fft(d)
    ac = np.fft.ifft(np.abs(dh) ** 2).real
    gh = np.fft.fft(g)
    xc = np.fft.ifft(gh * np.conj(dh)).real
    lags = np.arange(S)
    G = ac[np.abs(lags[:, None] - lags[None, :]) % N]
    G[np.diag_indices(S)] *= 1.0 + 1e-13
    try:
        coef = np.linalg.solve(G, xc[idx])
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(_shift_columns(d, idx), g, rcond=None)[0]
    phi = np.zeros(N)
    phi[idx] = coef
    r = g - np.fft.ifft(np.fft.fft(phi) * dh).real
    return coef, r


@dataclass
class _Candidate:
    x: np.ndarray        # delays in samples
    gammas: np.ndarray
    phi: np.ndarray
    residual: float
    iterations: int = 0
    flags: list = field(default_factory=list)


def _varpro_refine(cand: _Candidate, g: np.ndarray, idx: np.ndarray) -> _Candidate:
    """Joint polish of delays and amplitude ratios with the kernel eliminated.

    The largest amplitude is pinned to 1 during the fit (scale gauge); the
    kernel is re-solved by least squares at every evaluation.
    """
    N = g.size
    K = cand.x.size
    ref = int(np.argmax(np.abs(cand.gammas)))
    others = [k for k in range(K) if k != ref]
    g0 = cand.gammas[ref]

    def unpack(theta):
        gam = np.empty(K)
        gam[ref] = 1.0
        gam[others] = theta[K:]
        return theta[:K], gam

    def resid(theta):
        x, gam = unpack(theta)
        return _kernel_fit(_spike_vector(x, gam, N), g, idx)[1]

    theta0 = np.concatenate([cand.x, cand.gammas[others] / g0])
    sol = least_squares(resid, theta0, method="lm", x_scale=1.0, xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=200 * (theta0.size + 1))
    x, gam = unpack(sol.x)
    d = _spike_vector(x, gam, N)
    coef, r = _kernel_fit(d, g, idx)
    res = float(np.linalg.norm(r))
    if not res < cand.residual:
        return cand
    phi = np.zeros(N)
    phi[idx] = coef
    return _Candidate(np.mod(x, N), gam, phi, res, cand.iterations, cand.flags + ["refined"])


def _alternate(g: np.ndarray, grid: AcquisitionGrid, config: SolverConfig, S: int,
               phi0: np.ndarray, q0: Optional[np.ndarray], sigma: float) -> _Candidate:
    """One restart: spike step, kernel step, repeated until the fit stalls."""
    N = g.size
    K = config.K
    L0 = N // 2
    idx = support_window(center_of_mass(phi0), S, N)
    phi = np.zeros(N)
    phi[idx] = phi0[idx]
    if not np.any(phi):
        phi[idx] = 1.0
    if q0 is None:
        d0 = circ_lsq(phi * _modulation(N, L0), g * _modulation(N, L0), config.pinv_rel_threshold)
        q0 = init_q_deterministic(d0, K)
    p1_cfg = replace(config, sigma=sigma)
    best: Optional[_Candidate] = None
    iters = 0
    for _ in range(config.max_outer):
        r1 = p1_solve(phi, g, K, q0, p1_cfg, L0)
        iters += r1.iterations
        spikes = extract_spikes(r1.model, grid)
        x = spikes.taus / grid.sample_period
        d = _spike_vector(x, spikes.gammas, N)
        if not np.any(d):
            break
        idx = support_window(center_of_mass(phi), S, N)
        coef, r = _kernel_fit(d, g, idx)
        phi = np.zeros(N)
        phi[idx] = coef
        res = float(np.linalg.norm(r))
        improved = best is None or res < best.residual * (1 - config.stall_tol)
        if best is None or res < best.residual:
            best = _Candidate(x, spikes.gammas, phi, res, iters)
        if res <= sigma or not improved:
            break
        q0 = r1.model.q
    if best is None:
        raise DegenerateLinearization("no usable spike estimate")
    best.iterations = iters
    return best


def _longest_run(hit: np.ndarray) -> int:
    """Longest circular run of ``True``."""
    if not np.any(hit):
        return 0
    if np.all(hit):
        return hit.size
    rolled = np.roll(hit, -int(np.nonzero(~hit)[0][0]))
    edges = np.diff(np.concatenate([[0], rolled.astype(int), [0]]))
    starts, ends = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]
    return int((ends - starts).max())


def _support_candidates(g: np.ndarray, sigma: float) -> list:
    """Increasing kernel lengths to try as the upper end of the support search.

    Each candidate is the longest run of samples above a floor, plus two.
    Floors range from 1e-2 of the peak down to the noise level, since
    sinc ringing of off-grid spikes can lift every sample above a tiny floor.
    The shortest arc holding every significant sample and ``N`` close the list.
    """
    N = g.size
    peak = np.abs(g).max()
    noise = 3.0 * sigma / math.sqrt(N)
    out = set()
    for rel in (1e-2, 1e-3, 1e-4, 1e-6, 1e-9):
        run = _longest_run(np.abs(g) > max(rel * peak, noise))
        if run:
            out.add(min(run + 2, N))
    hit = np.abs(g) > max(noise, 1e-9 * peak)
    if np.any(hit):
        idx = np.nonzero(hit)[0]
        gaps = np.diff(np.concatenate([idx, [idx[0] + N]])) - 1
        out.add(int(N - gaps.max()))
    out.add(N)
    return sorted(out)


def _restart_inputs(g: np.ndarray, K: int, seed: int, r: int):
    if r == 0:
        return init_kernel(g, None), None
    rng = np.random.default_rng([seed, r])
    phi0 = init_kernel(g, rng)
    q0 = rng.standard_normal(K + 1) + 1j * rng.standard_normal(K + 1)
    return phi0, q0


def _solve_fixed_support(g, grid, config, S, sigma):
    """Run the restart schedule for one support length; stop at the first fit within ``sigma``."""
    N = g.size
    best, flags, used = None, [], 0
    for r in range(config.max_restarts):
        used = r + 1
        phi0, q0 = _restart_inputs(g, config.K, config.seed, r)
        try:
            cand = _alternate(g, grid, config, S, phi0, q0, sigma)
        except (DegenerateLinearization, ValueError) as exc:
            flags.append(f"restart {r}: {exc}")
            continue
        if config.refine:
            cand = _varpro_refine(cand, g, support_window(center_of_mass(cand.phi), S, N))
        if best is None or cand.residual < best.residual:
            best = cand
        if best.residual <= sigma:
            break
    return best, used, flags


def blind_solve(g: MeasurementTrace, config: SolverConfig) -> SolveReport:
    """Jointly estimate spikes and kernel from one trace.

    Restart 0 uses ``w = 0`` (the trace itself) for the kernel and a peak
    picked ``Q``; later restarts draw random kernel phases and a Gaussian
    ``Q`` from ``default_rng([seed, restart])``. The kernel is confined to a
    window of ``kernel_support`` samples; when that is unset, the smallest
    window whose best fit meets ``sigma`` is found by bisection.

    The reported kernel is scaled to unit peak and shifted by a whole number
    of samples so its centre of mass sits where the trace's does.
    """
    x = np.asarray(g.samples, dtype=float)
    grid = g.grid
    N = grid.n_samples
    K = config.K
    if 2 * K > N:
        raise ValueError(f"need K <= N/2, got K={K}, N={N}")
    sigma = auto_sigma(x) if config.sigma is None else float(config.sigma)
    if not np.any(x):
        raise ValueError("all-zero trace")

    flags: list = []
    restarts = 0
    if config.kernel_support is not None:
        best, restarts, f = _solve_fixed_support(x, grid, config, min(config.kernel_support, N), sigma)
        flags += f
    else:
        lo, best, hi = 0, None, N
        for hi in _support_candidates(x, sigma):
            cand, used, f = _solve_fixed_support(x, grid, config, hi, sigma)
            restarts += used
            flags += f
            if cand is not None and (best is None or cand.residual < best.residual):
                best = cand
            if cand is not None and cand.residual <= sigma:
                break
            lo = hi
        if best is not None and best.residual <= sigma:
            while hi - lo > 1:
                mid = (lo + hi) // 2
                cand, used, _ = _solve_fixed_support(x, grid, config, mid, sigma)
                restarts += used
                if cand is not None and cand.residual <= sigma:
                    best, hi = cand, mid
                else:
                    lo = mid
        flags.append(f"kernel support {hi}")
    if best is None:
        raise DegenerateLinearization("all restarts degenerate: " + "; ".join(flags))

    phi, xk, gam = best.phi, best.x, best.gammas
    # gauge: integer shift to the trace's centre of mass, unit peak
    shift = int(round(center_of_mass(x) - center_of_mass(phi)))
    shift = (shift + N // 2) % N - N // 2
    phi = np.roll(phi, shift)
    xk = np.mod(xk - shift, N)
    peak_idx = int(np.argmax(np.abs(phi)))
    scale = phi[peak_idx]
    phi = phi / scale
    gam = gam * scale
    taus = xk * grid.sample_period
    taus[taus >= grid.window] -= grid.window
    spikes = SpikeTrain(taus, gam)
    d = _spike_vector(xk, gam, N)
    residual = float(np.linalg.norm(x - circ_conv(phi, d)))
    return SolveReport(
        spikes=spikes,
        kernel=KernelTrace(phi, grid),
        residual=residual,
        restarts_used=restarts,
        iterations_used=best.iterations,
        converged=bool(residual <= sigma),
        degenerate_flags=flags + best.flags,
        sigma=sigma,
    )
