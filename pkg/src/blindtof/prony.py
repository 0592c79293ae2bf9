"""Known-kernel spike recovery: annihilating filter, roots, amplitude fit."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

from .forward_model import KernelTrace, MeasurementTrace, SpikeTrain, dirichlet_spikes
from .signal_core import circ_conv, poly_roots
from .strang_fix import DEFAULT_BAND_THRESHOLD, exp_repro_coeffs, fourier_series_coeffs, moments

__all__ = [
    "AnnihilatingFilter",
    "DelayEstimate",
    "annihilation_matrix",
    "annihilating_filter",
    "delays_from_roots",
    "delays_from_filter",
    "spike_columns",
    "amplitudes_ls",
    "prony_solve",
]


@dataclass(frozen=True)
class AnnihilatingFilter:
    """Unit-norm taps ``h[0..K]`` of ``H(z) = sum_m h[m] z**-m``."""

    h: np.ndarray
    singular_values: np.ndarray = field(repr=False, default=None)

    @property
    def K(self) -> int:
        return self.h.size - 1

    def roots(self) -> np.ndarray:
        """The ``u_k`` with ``H(u_k) = 0``."""
        # z**K H(z) = h[0] z**K + ... + h[K]; constant-first order is h reversed
        return poly_roots(self.h[::-1])


@dataclass
class DelayEstimate:
    taus: np.ndarray
    roots: np.ndarray
    flags: list = field(default_factory=list)


DEGENERATE_GAP = 1e-7


def annihilation_matrix(y, K: int) -> np.ndarray:
    """(M-K) x (K+1) matrix whose rows are ``[y[m], y[m-1], ..., y[m-K]]``."""
    y = np.asarray(y, dtype=complex)
    return toeplitz(y[K:], y[K::-1])


def annihilating_filter(y, K: int) -> AnnihilatingFilter:
    """Total-least-squares annihilating filter of a moment sequence.

    Needs ``M >= 2K`` moments; the taps are the right singular vector of the
    annihilation matrix for the smallest singular value.
    """
    y = np.asarray(y, dtype=complex)
    if K < 1:
        raise ValueError("K must be >= 1")
    if y.size < 2 * K:
        raise ValueError(f"insufficient moments: need {2 * K}, got {y.size}")
    if not np.any(y):
        raise ValueError("moment sequence is identically zero")
    A = annihilation_matrix(y, K)
    _, s, vh = np.linalg.svd(A, full_matrices=True)
    h = vh[-1].conj()
    return AnnihilatingFilter(h / np.linalg.norm(h), s)


def delays_from_roots(u, window: float, keep: int | None = None) -> DelayEstimate:
    """Map roots ``u_k = exp(-j 2 pi tau_k / window)`` to sorted delays in ``[0, window)``.

    Roots are projected radially onto the unit circle. If ``keep`` is given and
    more roots are supplied, the ``keep`` closest to the circle are used.
    """
    u = np.asarray(u, dtype=complex)
    if keep is not None and u.size > keep:
        u = u[np.argsort(np.abs(np.log(np.abs(u) + 1e-300)))[:keep]]
    flags = []
    if np.any(u == 0):
        raise ValueError("zero root cannot be mapped to a delay")
    if u.size > 1:
        gaps = np.abs(u[:, None] - u[None, :]) + np.eye(u.size)
        # a double root comes back from eigvals split by ~sqrt(eps)
        if gaps.min() < DEGENERATE_GAP:
            flags.append("degenerate roots")
    on_circle = u / np.abs(u)
    taus = np.mod(-window / (2 * np.pi) * np.angle(on_circle), window)
    # angle() can return exactly -0 or a value that wraps to window itself
    taus[taus >= window] = 0.0
    order = np.argsort(taus)
    return DelayEstimate(taus[order], on_circle[order], flags)


def delays_from_filter(h: AnnihilatingFilter, window: float) -> DelayEstimate:
    if window <= 0:
        raise ValueError("window must be positive")
    est = delays_from_roots(h.roots(), window, keep=h.K)
    if est.flags:
        warnings.warn("degenerate roots in annihilating filter", RuntimeWarning, stacklevel=2)
    return est


def spike_columns(kernel_samples: np.ndarray, taus, sample_period: float) -> np.ndarray:
    """N x K matrix whose k-th column is ``phi (*) d(tau_k)`` for a unit spike."""
    N = kernel_samples.size
    cols = []
    for tau in np.atleast_1d(taus):
        d = dirichlet_spikes(SpikeTrain([tau], [1.0]), N, sample_period)
        cols.append(circ_conv(kernel_samples, d))
    return np.stack(cols, axis=1)


def amplitudes_ls(g, taus, kernel: KernelTrace) -> np.ndarray:
    """Least-squares amplitudes for fixed delays, fitted in the measurement domain."""
    x = g.samples if isinstance(g, MeasurementTrace) else np.asarray(g, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if 2 * taus.size > x.size:
        raise ValueError("need K <= N/2")
    A = spike_columns(kernel.samples, taus, kernel.grid.sample_period)
    G = A.T @ A
    if taus.size > 1 and np.linalg.cond(G) > 1e12:
        raise ValueError("indistinguishable spikes")
    return np.linalg.solve(G, A.T @ x)


def prony_solve(g: MeasurementTrace, kernel: KernelTrace, K: int,
                band_threshold: float = DEFAULT_BAND_THRESHOLD) -> SpikeTrain:
    """Kernel coefficients, moments, annihilation, roots, then amplitudes."""
    grid = g.grid
    if grid.n_samples < 2 * K:
        raise ValueError(f"need N >= 2K, got N={grid.n_samples}, K={K}")
    sk = fourier_series_coeffs(kernel, band_threshold)
    if sk.band < 2 * K:
        raise ValueError(f"insufficient moments: kernel band M={sk.band} < 2K={2 * K}")
    y = moments(g, exp_repro_coeffs(sk))
    est = delays_from_filter(annihilating_filter(y, K), grid.window)
    gammas = amplitudes_ls(g, est.taus, kernel)
    return SpikeTrain(est.taus, gammas)
