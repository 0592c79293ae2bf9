"""Synthetic scenes and measurements.

Kernels are evaluated periodically on ``[0, window)``, which is the setting in
which the Fourier-series description of a time-localised kernel is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erfc, erfcx

from .signal_core import AcquisitionGrid, circ_conv

__all__ = [
    "Gaussian",
    "RaisedCosine",
    "EMG",
    "MSeqAutocorr",
    "BandlimitedDirichlet",
    "KernelFamily",
    "SpikeTrain",
    "KernelTrace",
    "MeasurementTrace",
    "ImageTensor",
    "make_kernel",
    "dirichlet_spikes",
    "spike_spectrum",
    "simulate_trace",
    "add_noise",
    "simulate_tensor",
    "family_from_dict",
    "family_to_dict",
    "ramp_scene",
]

_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


# --------------------------------------------------------------------------
# kernel families

@dataclass(frozen=True)
class Gaussian:
    center: float
    fwhm: float

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")

    @property
    def sigma(self) -> float:
        return self.fwhm * _FWHM_TO_SIGMA

    def support(self, window: float):
        return self.center - 8 * self.sigma, self.center + 8 * self.sigma

    def evaluate(self, t, window: float):
        x = (np.asarray(t, dtype=float) - self.center) / self.sigma
        return np.exp(-0.5 * x * x)

    def derivative(self, t, window: float):
        x = (np.asarray(t, dtype=float) - self.center) / self.sigma
        return -x / self.sigma * np.exp(-0.5 * x * x)

    def max_slope(self, window: float) -> float:
        return math.exp(-0.5) / self.sigma


@dataclass(frozen=True)
class RaisedCosine:
    """``0.5 (1 + cos(2 pi (t - center) / width))`` on ``|t - center| <= width / 2``.

    The full width at half maximum is ``width / 2``.
    """

    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("width must be positive")

    @classmethod
    def from_fwhm(cls, center: float, fwhm: float) -> "RaisedCosine":
        return cls(center, 2.0 * fwhm)

    def support(self, window: float):
        return self.center - self.width / 2, self.center + self.width / 2

    def evaluate(self, t, window: float):
        x = np.asarray(t, dtype=float) - self.center
        inside = np.abs(x) <= self.width / 2
        return np.where(inside, 0.5 * (1.0 + np.cos(2 * np.pi * x / self.width)), 0.0)

    def derivative(self, t, window: float):
        x = np.asarray(t, dtype=float) - self.center
        inside = np.abs(x) <= self.width / 2
        return np.where(inside, -np.pi / self.width * np.sin(2 * np.pi * x / self.width), 0.0)

    def max_slope(self, window: float) -> float:
        return math.pi / self.width


@dataclass(frozen=True)
class EMG:
    """Exponentially modified Gaussian, a common TCSPC instrument-response shape.

    ``center`` and ``sigma`` belong to the Gaussian part, ``decay`` is the
    exponential tail constant. Scaled so the peak value is 1.
    """

    center: float
    sigma: float
    decay: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.decay > 0):
            raise ValueError("sigma and decay must be positive")

    def support(self, window: float):
        return self.center - 8 * self.sigma, self.center + 8 * self.sigma + 35 * self.decay

    def _raw(self, t):
        lam = 1.0 / self.decay
        s = self.sigma
        x = np.asarray(t, dtype=float) - self.center
        z = (lam * s * s - x) / (math.sqrt(2.0) * s)
        # erfcx form is stable for z >= 0, the plain form for z < 0
        with np.errstate(over="ignore", under="ignore"):
            left = np.exp(-x * x / (2 * s * s)) * erfcx(np.maximum(z, 0.0))
            right = np.exp(lam * (lam * s * s / 2 - np.maximum(x, lam * s * s))) * erfc(np.minimum(z, 0.0))
        return 0.5 * lam * np.where(z >= 0, left, right)

    def _raw_derivative(self, t):
        lam = 1.0 / self.decay
        s = self.sigma
        x = np.asarray(t, dtype=float) - self.center
        gauss = np.exp(-x * x / (2 * s * s)) / (math.sqrt(2 * math.pi) * s)
        return lam * (gauss - self._raw(t))

    def _peak(self) -> float:
        lo, hi = self.center - 3 * self.sigma, self.center + 3 * self.sigma + 3 * self.decay
        t = np.linspace(lo, hi, 4001)
        return float(self._raw(t).max())

    def evaluate(self, t, window: float):
        return self._raw(t) / self._peak()

    def derivative(self, t, window: float):
        return self._raw_derivative(t) / self._peak()

    def max_slope(self, window: float) -> float:
        lo, hi = self.support(window)
        t = np.linspace(lo, hi, 20001)
        return float(np.abs(self.derivative(t, window)).max())


@dataclass(frozen=True)
class MSeqAutocorr:
    """Main lobe of the periodic autocorrelation of a rectangular-chip m-sequence.

    The off-peak floor ``-1/(2**order - 1)`` is removed, which leaves a triangle
    of half-width ``chip``. Continuous but not differentiable at three points.
    """

    center: float
    chip: float
    order: int = 7

    def __post_init__(self):
        if not self.chip > 0 or self.order < 2:
            raise ValueError("chip must be positive and order >= 2")

    def support(self, window: float):
        return self.center - self.chip, self.center + self.chip

    def evaluate(self, t, window: float):
        x = np.abs(np.asarray(t, dtype=float) - self.center)
        return np.clip(1.0 - x / self.chip, 0.0, None)

    def derivative(self, t, window: float):
        x = np.asarray(t, dtype=float) - self.center
        return np.where(np.abs(x) < self.chip, -np.sign(x) / self.chip, 0.0)

    def max_slope(self, window: float) -> float:
        return 1.0 / self.chip


@dataclass(frozen=True)
class BandlimitedDirichlet:
    """Periodic kernel whose Fourier series is flat on ``|m| <= L`` and zero beyond.

    ``center=None`` puts the peak in the middle of the window.
    """

    L: int
    center: Optional[float] = None

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 0:
            raise ValueError("L must be a non-negative integer")

    def _center(self, window):
        return window / 2 if self.center is None else self.center

    def support(self, window: float):
        return 0.0, 0.0  # periodic; time-localisation is not claimed

    def evaluate(self, t, window: float):
        x = 2 * np.pi * (np.asarray(t, dtype=float) - self._center(window)) / window
        m = np.arange(1, self.L + 1)
        return (1.0 + 2.0 * np.cos(np.multiply.outer(x, m)).sum(axis=-1)) / (2 * self.L + 1)

    def derivative(self, t, window: float):
        x = 2 * np.pi * (np.asarray(t, dtype=float) - self._center(window)) / window
        m = np.arange(1, self.L + 1)
        dx = 2 * np.pi / window
        return -2.0 * dx * (m * np.sin(np.multiply.outer(x, m))).sum(axis=-1) / (2 * self.L + 1)

    def max_slope(self, window: float) -> float:
        t = np.linspace(0, window, 64 * (2 * self.L + 1) + 1)
        return float(np.abs(self.derivative(t, window)).max())


KernelFamily = Union[Gaussian, RaisedCosine, EMG, MSeqAutocorr, BandlimitedDirichlet]

_FAMILIES = {
    "gaussian": Gaussian,
    "raised_cosine": RaisedCosine,
    "emg": EMG,
    "mseq_autocorr": MSeqAutocorr,
    "bandlimited_dirichlet": BandlimitedDirichlet,
}


def family_from_dict(spec: dict) -> KernelFamily:
    """Build a family from ``{"family": name, **params}`` (times in seconds)."""
    params = dict(spec)
    name = params.pop("family", None)
    if name not in _FAMILIES:
        raise ValueError(f"unknown kernel family {name!r}; choose from {sorted(_FAMILIES)}")
    if name == "raised_cosine" and "fwhm" in params:
        return RaisedCosine.from_fwhm(params["center"], params["fwhm"])
    return _FAMILIES[name](**params)


def family_to_dict(family: KernelFamily) -> dict:
    name = {v: k for k, v in _FAMILIES.items()}[type(family)]
    out = {"family": name}
    out.update({k: getattr(family, k) for k in family.__dataclass_fields__})
    return out


# --------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class SpikeTrain:
    """Reflectivities ``gammas`` at delays ``taus`` (seconds), kept sorted by delay."""

    taus: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        taus = np.atleast_1d(np.asarray(self.taus, dtype=float))
        gammas = np.atleast_1d(np.asarray(self.gammas, dtype=float))
        if taus.ndim != 1 or taus.shape != gammas.shape:
            raise ValueError("taus and gammas must be 1-D of equal length")
        if taus.size < 1:
            raise ValueError("a spike train needs at least one spike")
        if not (np.all(np.isfinite(taus)) and np.all(np.isfinite(gammas))):
            raise ValueError("spike parameters must be finite")
        order = np.argsort(taus, kind="stable")
        object.__setattr__(self, "taus", taus[order])
        object.__setattr__(self, "gammas", gammas[order])

    @property
    def K(self) -> int:
        return self.taus.size

    def validate(self, grid: AcquisitionGrid) -> None:
        if np.any(self.taus < 0) or np.any(self.taus >= grid.window):
            raise ValueError("spike delays must lie in [0, window)")
        if np.any(self.gammas == 0):
            raise ValueError("spike amplitudes must be nonzero")

    def to_records(self) -> list:
        return [{"tau_s": float(t), "gamma": float(g)} for t, g in zip(self.taus, self.gammas)]

    @classmethod
    def from_records(cls, records) -> "SpikeTrain":
        return cls([r["tau_s"] for r in records], [r["gamma"] for r in records])


@dataclass(frozen=True)
class KernelTrace:
    samples: np.ndarray
    grid: AcquisitionGrid
    family: Optional[KernelFamily] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape != (self.grid.n_samples,):
            raise ValueError(f"kernel length {s.shape} does not match grid ({self.grid.n_samples},)")
        if not np.all(np.isfinite(s)):
            raise ValueError("kernel samples must be finite")
        object.__setattr__(self, "samples", s)

    def evaluate(self, t) -> np.ndarray:
        """Continuous-time kernel value, periodised over the window."""
        if self.family is None:
            raise ValueError("kernel has no analytic descriptor for continuous evaluation")
        w = self.grid.window
        return self.family.evaluate(np.mod(t, w), w)


@dataclass(frozen=True)
class MeasurementTrace:
    samples: np.ndarray
    grid: AcquisitionGrid

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape != (self.grid.n_samples,):
            raise ValueError(f"trace length {s.shape} does not match grid ({self.grid.n_samples},)")
        if not np.all(np.isfinite(s)):
            raise ValueError("trace samples must be finite")
        object.__setattr__(self, "samples", s)


@dataclass
class ImageTensor:
    """H x W grid of traces; ``data[row, col, n]`` with time fastest."""

    data: np.ndarray
    grid: AcquisitionGrid

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != self.grid.n_samples:
            raise ValueError(f"tensor shape {self.data.shape} incompatible with N={self.grid.n_samples}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor contains non-finite samples")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def trace(self, row: int, col: int) -> MeasurementTrace:
        return MeasurementTrace(self.data[row, col].astype(float), self.grid)


# --------------------------------------------------------------------------
# operations

def make_kernel(family: KernelFamily, grid: AcquisitionGrid) -> KernelTrace:
    window = grid.window
    if not isinstance(family, BandlimitedDirichlet):
        lo, hi = family.support(window)
        if lo < 0 or hi >= window:
            raise ValueError("kernel not time-localized in window")
    samples = family.evaluate(grid.times(), window)
    if isinstance(family, BandlimitedDirichlet):
        # zero the out-of-band bins exactly; evaluation leaves ~1e-16 leakage
        spec = np.fft.fft(samples)
        freqs = np.fft.fftfreq(grid.n_samples, 1.0 / grid.n_samples)
        spec[np.abs(freqs) > family.L] = 0.0
        samples = np.fft.ifft(spec).real
    return KernelTrace(samples, grid, family)


def spike_spectrum(spikes: SpikeTrain, N: int, sample_period: float = 1.0) -> np.ndarray:
    """DFT of the Dirichlet spike vector: ``sum_k gamma_k exp(-2j pi f tau_k / (N T))``.

    ``f`` is the signed frequency of each bin; for even ``N`` the Nyquist bin
    holds the real part ``sum_k gamma_k cos(pi tau_k / T)`` so the time-domain
    vector stays real.
    """
    f = np.fft.fftfreq(N, 1.0 / N)
    x = np.asarray(spikes.taus) / sample_period  # delays in samples
    phase = np.exp(-2j * np.pi * np.outer(f, x) / N)
    S = phase @ np.asarray(spikes.gammas, dtype=complex)
    if N % 2 == 0:
        S[N // 2] = np.sum(spikes.gammas * np.cos(np.pi * x))
    return S


def dirichlet_spikes(spikes: SpikeTrain, N: int, sample_period: float = 1.0) -> np.ndarray:
    """Periodised, band-limited spike vector ``d`` with ``g = phi (*) d``.

    ``d[n] = (1/N) sum_k gamma_k sum_f exp(2j pi f (n - tau_k / T) / N)`` over the
    signed frequencies ``f`` of an N-point DFT. On-grid spikes give exact
    Kronecker deltas; off-grid spikes give periodic sinc profiles.
    """
    if N < 2 * spikes.K:
        raise ValueError(f"need N >= 2K, got N={N}, K={spikes.K}")
    d = np.fft.ifft(spike_spectrum(spikes, N, sample_period)).real
    # snap on-grid spikes exactly (ifft leaves ~1e-17 ripple elsewhere)
    x = np.asarray(spikes.taus) / sample_period
    if np.all(np.abs(x - np.round(x)) == 0):
        d = np.zeros(N)
        np.add.at(d, np.round(x).astype(int) % N, spikes.gammas)
    return d


def simulate_trace(kernel: KernelTrace, spikes: SpikeTrain, mode: str = "continuous") -> MeasurementTrace:
    """Sampled measurement of ``sum_k gamma_k phi(t - tau_k)``.

    ``continuous`` evaluates the analytic kernel at ``nT - tau_k``; ``circular``
    convolves the kernel samples with :func:`dirichlet_spikes`.
    """
    grid = kernel.grid
    spikes.validate(grid)
    if mode == "continuous":
        if kernel.family is None:
            raise ValueError("continuous mode needs an analytic kernel descriptor")
        t = grid.times()[:, None] - spikes.taus[None, :]
        g = kernel.evaluate(t) @ spikes.gammas
    elif mode == "circular":
        g = circ_conv(kernel.samples, dirichlet_spikes(spikes, grid.n_samples, grid.sample_period))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return MeasurementTrace(g, grid)


def add_noise(g: MeasurementTrace, snr_db: float, seed: int) -> MeasurementTrace:
    """Add white Gaussian noise with expected ``10 log10(|g|^2 / |noise|^2) = snr_db``."""
    if math.isinf(snr_db) and snr_db > 0:
        return g
    if not snr_db > 0:
        raise ValueError("snr_db must be positive or +inf")
    x = g.samples
    N = x.size
    std = np.linalg.norm(x) / math.sqrt(N * 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return MeasurementTrace(x + std * rng.standard_normal(N), g.grid)


def noise_std(g: np.ndarray, snr_db: float) -> float:
    """Per-sample noise standard deviation that :func:`add_noise` would use."""
    if math.isinf(snr_db):
        return 0.0
    return float(np.linalg.norm(g) / math.sqrt(g.size * 10.0 ** (snr_db / 10.0)))


def simulate_tensor(scene: Sequence[Sequence[SpikeTrain]], kernel: KernelTrace,
                    snr_db: float = math.inf, seed: int = 0, mode: str = "continuous") -> ImageTensor:
    """Simulate every pixel; pixel ``(r, c)`` uses noise seed ``seed ^ (r * W + c)``."""
    H = len(scene)
    W = len(scene[0]) if H else 0
    if H == 0 or W == 0 or any(len(row) != W for row in scene):
        raise ValueError("scene must be a non-empty rectangular grid of spike trains")
    data = np.empty((H, W, kernel.grid.n_samples))
    for r in range(H):
        for c in range(W):
            g = simulate_trace(kernel, scene[r][c], mode)
            data[r, c] = add_noise(g, snr_db, seed ^ (r * W + c)).samples
    return ImageTensor(data, kernel.grid)


def ramp_scene(height: int, width: int, tau_start_s: float, tau_stop_s: float, gamma: float = 1.0,
               background: dict | None = None) -> list:
    """Depth ramp along the columns (with a small row tilt), optionally in front of a flat wall."""
    scene = []
    for r in range(height):
        row = []
        for c in range(width):
            frac = (c + 0.25 * r / max(height - 1, 1)) / max(width - 1, 1)
            taus, gams = [tau_start_s + frac * (tau_stop_s - tau_start_s)], [gamma]
            if background:
                taus.append(float(background["tau_s"]))
                gams.append(float(background["gamma"]))
            row.append(SpikeTrain(taus, gams))
        scene.append(row)
    return scene
