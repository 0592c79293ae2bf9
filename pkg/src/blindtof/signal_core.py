"""Shared numerics: DFT conventions, Vandermonde matrices, circulant algebra, roots.

Conventions used throughout the package:

* forward DFT is unnormalised, ``X[m] = sum_n x[n] exp(-2j*pi*n*m/N)``;
  the inverse carries the ``1/N`` factor;
* polynomial coefficient vectors are stored constant term first,
  ``c[0] + c[1] z + ... + c[D] z**D``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AcquisitionGrid",
    "dft",
    "idft",
    "vandermonde_w",
    "vandermonde_v",
    "circ_conv",
    "circ_lsq",
    "circulant_matrix",
    "poly_roots",
    "poly_from_roots",
    "poly_eval",
    "centered_frequencies",
]


@dataclass(frozen=True)
class AcquisitionGrid:
    """Uniform sampling grid: ``n_samples`` samples spaced ``sample_period`` seconds."""

    n_samples: int
    sample_period: float
    window: float = field(init=False)

    def __post_init__(self):
        n = int(self.n_samples)
        if n != self.n_samples or n < 2:
            raise ValueError(f"n_samples must be an integer >= 2, got {self.n_samples!r}")
        if not (np.isfinite(self.sample_period) and self.sample_period > 0):
            raise ValueError(f"sample_period must be > 0, got {self.sample_period!r}")
        object.__setattr__(self, "n_samples", n)
        object.__setattr__(self, "sample_period", float(self.sample_period))
        object.__setattr__(self, "window", n * float(self.sample_period))

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.sample_period


def _vector(x, name="x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def dft(x) -> np.ndarray:
    x = _vector(x)
    if x.size == 0:
        raise ValueError("empty signal")
    return np.fft.fft(x)


def idft(X) -> np.ndarray:
    X = _vector(X, "X")
    if X.size == 0:
        raise ValueError("empty signal")
    return np.fft.ifft(X)


def _root_of_unity_powers(N: int, rows: int, cols: int, sign: int) -> np.ndarray:
    if N < 1 or rows < 1 or cols < 1:
        raise ValueError(f"sizes must be positive, got N={N}, rows={rows}, cols={cols}")
    # reduce the exponent mod N before exponentiating to keep entries exact-ish
    e = np.outer(np.arange(rows), np.arange(cols)) % N
    return np.exp(sign * 2j * np.pi * e / N)


def vandermonde_w(N: int, M: int) -> np.ndarray:
    """N x M matrix with entries ``xi_N**(-n*m)``."""
    return _root_of_unity_powers(N, N, M, -1)


def vandermonde_v(N: int, M: int) -> np.ndarray:
    """N x M matrix with entries ``xi_N**(n*m) / N``."""
    return _root_of_unity_powers(N, N, M, +1) / N


def centered_frequencies(N: int) -> np.ndarray:
    """Signed integer frequency of each DFT bin, in ``[-(N//2), (N-1)//2]``."""
    return np.fft.fftfreq(N, 1.0 / N).round().astype(int)


def circ_conv(a, b) -> np.ndarray:
    """Circular convolution ``c[m] = sum_n a[(m-n) % N] b[n]`` computed via the DFT."""
    a = _vector(a, "a")
    b = _vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    out = np.fft.ifft(np.fft.fft(a) * np.fft.fft(b))
    if np.isrealobj(a) and np.isrealobj(b):
        return out.real
    return out


def circulant_matrix(a) -> np.ndarray:
    """Dense circulant ``T[m, n] = a[(m - n) % N]``; for tests and small problems."""
    a = _vector(a, "a")
    N = a.size
    idx = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
    return a[idx]


def circ_lsq(a, g, rel_threshold: float = 1e-8) -> np.ndarray:
    """Truncated-pseudoinverse solution of ``min_x ||g - a (*) x||_2``.

    Bins with ``|A[l]| < rel_threshold * max|A|`` are treated as the null space
    and the solution is set to zero there.
    """
    a = _vector(a, "a")
    g = _vector(g, "g")
    if a.shape != g.shape:
        raise ValueError(f"length mismatch: {a.size} vs {g.size}")
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError(f"rel_threshold must lie in (0, 1), got {rel_threshold}")
    A = np.fft.fft(a)
    mag = np.abs(A)
    peak = mag.max()
    if peak == 0.0:
        raise ValueError("degenerate convolution kernel")
    keep = mag >= rel_threshold * peak
    X = np.zeros_like(A)
    X[keep] = np.fft.fft(g)[keep] / A[keep]
    x = np.fft.ifft(X)
    if np.isrealobj(a) and np.isrealobj(g):
        return x.real
    return x


def _trim(coeffs, rel_tol=1e-14) -> np.ndarray:
    c = np.asarray(coeffs, dtype=complex)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("coefficients must be a non-empty vector")
    if not np.all(np.isfinite(c)):
        raise ValueError("coefficients contain non-finite entries")
    scale = np.abs(c).max()
    if scale == 0.0:
        raise ValueError("zero polynomial has no well-defined roots")
    nz = np.nonzero(np.abs(c) > rel_tol * scale)[0]
    return c[: nz[-1] + 1]


def poly_roots(coeffs) -> np.ndarray:
    """All roots of ``sum_k c[k] z**k`` as eigenvalues of the companion matrix.

    Trailing coefficients below ``1e-14 * max|c|`` are trimmed first, so the
    number of returned roots is the effective degree.
    """
    c = _trim(coeffs)
    D = c.size - 1
    if D < 1:
        raise ValueError("polynomial has degree 0 after trimming")
    comp = np.zeros((D, D), dtype=complex)
    comp[1:, :-1] = np.eye(D - 1)
    comp[:, -1] = -c[:-1] / c[-1]
    # LAPACK geev balances the matrix before the QR iteration
    return np.linalg.eigvals(comp)


def poly_from_roots(roots) -> np.ndarray:
    """Coefficients (constant first) of ``prod_k (1 - z / r_k)``.

    With ``r_k = 1/u_k`` this is ``prod_k (1 - u_k z)``, i.e. the annihilating
    filter written in ``z`` instead of ``z**-1``. A zero root contributes a
    plain factor ``z``.
    """
    r = np.asarray(roots, dtype=complex).ravel()
    if not np.all(np.isfinite(r)):
        raise ValueError("roots must be finite")
    c = np.array([1.0 + 0j])
    for rk in r:
        shifted = np.concatenate([[0.0], c])
        if rk == 0:
            c = shifted
        else:
            c = np.concatenate([c, [0.0]]) - shifted / rk
    return c


def poly_eval(coeffs, z) -> np.ndarray:
    """Evaluate ``sum_k c[k] z**k`` (Horner)."""
    c = np.asarray(coeffs)
    z = np.asarray(z)
    out = np.zeros(np.broadcast(z).shape, dtype=np.result_type(c, z, complex))
    for ck in c[::-1]:
        out = out * z + ck
    return out
