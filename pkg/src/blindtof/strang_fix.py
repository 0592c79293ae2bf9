"""Exponential reproduction for known kernels: Fourier-series band, reproducing
coefficients and exponential moments of a measurement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forward_model import KernelTrace, MeasurementTrace
from .signal_core import AcquisitionGrid

__all__ = [
    "SpectralKernel",
    "MomentMatrix",
    "fourier_series_coeffs",
    "exp_repro_coeffs",
    "moment_identity_error",
    "moments",
    "reproduction_residual",
]

DEFAULT_BAND_THRESHOLD = 1e-4


@dataclass(frozen=True)
class SpectralKernel:
    """Fourier-series coefficients ``dft(phi) / N`` and the usable band.

    ``bins`` lists the signed frequency of each in-band moment. By default it is
    ``0..M-1``; the two-sided variant uses ``-(M'-1)..(M'-1)``.
    """

    fs_coeffs: np.ndarray
    band: int
    grid: AcquisitionGrid
    bins: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.bins is None:
            object.__setattr__(self, "bins", np.arange(self.band))
        elif len(self.bins) != self.band:
            raise ValueError("bins must have one entry per in-band moment")

    @property
    def in_band(self) -> np.ndarray:
        return self.fs_coeffs[np.mod(self.bins, self.fs_coeffs.size)]


@dataclass(frozen=True)
class MomentMatrix:
    """``U[m, n]``: weights turning samples into the m-th exponential moment."""

    U: np.ndarray
    spectral: SpectralKernel

    @property
    def frequencies(self) -> np.ndarray:
        N = self.U.shape[1]
        return 2j * np.pi * self.spectral.bins / N


def fourier_series_coeffs(kernel: KernelTrace, band_threshold: float = DEFAULT_BAND_THRESHOLD,
                          two_sided: bool = False) -> SpectralKernel:
    """Riemann-sum Fourier coefficients and the longest leading run of strong bins.

    The band ``M`` is the largest count such that every bin ``0..M-1`` has
    magnitude at least ``band_threshold * max``. DC is always kept.

    With ``two_sided=True`` the mirrored negative bins are added, giving
    ``2M - 1`` consecutive signed frequencies (capped so no bin repeats).
    For a real kernel the mirrored bins are exactly as strong.
    """
    if not 0.0 < band_threshold < 1.0:
        raise ValueError("band_threshold must lie in (0, 1)")
    phi = kernel.samples
    N = phi.size
    coeffs = np.fft.fft(phi) / N
    mag = np.abs(coeffs)
    peak = mag.max()
    if peak == 0.0:
        raise ValueError("all-zero kernel")
    weak = np.nonzero(mag < band_threshold * peak)[0]
    band = int(weak[0]) if weak.size else N
    band = max(band, 1)
    if two_sided:
        half = min(band, (N + 1) // 2)
        return SpectralKernel(coeffs, 2 * half - 1, kernel.grid, np.arange(-(half - 1), half))
    return SpectralKernel(coeffs, band, kernel.grid)


def exp_repro_coeffs(sk: SpectralKernel, N: int | None = None) -> MomentMatrix:
    """Reproducing coefficients ``U = (1/N) diag(phi_fs)^-1 W`` for the in-band bins."""
    N = sk.fs_coeffs.size if N is None else N
    if N != sk.fs_coeffs.size:
        raise ValueError(f"spectral kernel has {sk.fs_coeffs.size} coefficients, expected {N}")
    M = sk.band
    if not 1 <= M <= N:
        raise ValueError(f"band must lie in [1, N], got {M}")
    c = sk.in_band
    floor = 1e-14 * np.abs(sk.fs_coeffs).max()
    bad = np.nonzero(np.abs(c) <= floor)[0]
    if bad.size:
        raise ValueError(f"Strang-Fix condition violated at bin {int(bad[0])}")
    # U[m, n] = xi^{-n f_m} / (N c[m]); for f_m = m this is W_N^M transposed
    f = np.asarray(sk.bins)
    U = np.exp(-2j * np.pi * (np.outer(f, np.arange(N)) % N) / N) / (N * c[:, None])
    return MomentMatrix(U, sk)


def moment_identity_error(mm: MomentMatrix) -> float:
    """Max-entry error of ``U V_N^M diag(phi_fs) - I / N``."""
    U = mm.U
    M, N = U.shape
    f = np.asarray(mm.spectral.bins)
    V = np.exp(2j * np.pi * (np.outer(np.arange(N), f) % N) / N) / N
    lhs = U @ V @ np.diag(mm.spectral.in_band)
    return float(np.abs(lhs - np.eye(M) / N).max())


def moments(g, mm: MomentMatrix) -> np.ndarray:
    """Exponential moments ``y = U g``; for the circulant model ``y[m] = sum_k gamma_k u_k**m``."""
    x = g.samples if isinstance(g, MeasurementTrace) else np.asarray(g)
    if x.ndim != 1 or x.size != mm.U.shape[1]:
        raise ValueError(f"trace length {x.shape} incompatible with moment matrix {mm.U.shape}")
    return mm.U @ x


def reproduction_residual(mm: MomentMatrix, kernel: KernelTrace, m: int, oversample: int = 8) -> float:
    """Max deviation of ``sum_n U[m, n] phi(nT - t)`` from ``exp(-j 2 pi m t / (N T))``.

    Evaluated on a grid ``oversample`` times finer than the sampling grid over
    one window, using periodised shifts of the analytic kernel.
    """
    if kernel.family is None:
        raise ValueError("reproduction_residual needs an analytic kernel descriptor")
    M, N = mm.U.shape
    if not 0 <= m < M:
        raise ValueError(f"m={m} outside band 0..{M - 1}")
    if oversample < 2:
        raise ValueError("oversample must be >= 2")
    T = kernel.grid.sample_period
    t = np.arange(N * oversample) * (T / oversample)
    n = np.arange(N)
    # phi_bar(t - nT) = phi(nT - t)
    shifted = kernel.evaluate(n[None, :] * T - t[:, None])
    approx = shifted @ mm.U[m]
    target = np.exp(-2j * np.pi * mm.spectral.bins[m] * t / (N * T))
    return float(np.abs(approx - target).max())
