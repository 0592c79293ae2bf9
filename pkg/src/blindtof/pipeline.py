"""Tensor-scale batch solving, metrics, depth conversion, light-in-flight frames and file formats."""
from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .blind_amin import SolverConfig, _spike_vector, auto_sigma, blind_solve
from .forward_model import ImageTensor, KernelTrace, MeasurementTrace, SpikeTrain
from .prony import prony_solve
from .signal_core import AcquisitionGrid, circ_conv

__all__ = [
    "SPEED_OF_LIGHT",
    "PixelReport",
    "ReportMap",
    "TensorFormatError",
    "batch_solve",
    "depth_map",
    "amplitude_map",
    "separation",
    "fractional_shift",
    "kernel_at",
    "lif_frames",
    "mse",
    "psnr_kernel",
    "align_gauge",
    "align_spikes",
    "save_tensor",
    "load_tensor",
    "save_reports",
    "load_reports",
    "save_depth_csv",
    "save_depth_raw",
]

SPEED_OF_LIGHT = 3.0e8  # m/s
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# per-pixel results

@dataclass
class PixelReport:
    row: int
    col: int
    spikes: Optional[SpikeTrain]
    residual: float = math.nan
    converged: bool = False
    kernel: Optional[np.ndarray] = field(default=None, repr=False)
    error: Optional[str] = None
    restarts: int = 0
    iterations: int = 0


@dataclass
class ReportMap:
    """H x W grid of pixel reports plus the acquisition grid they refer to."""

    reports: list
    grid: AcquisitionGrid

    @property
    def height(self) -> int:
        return len(self.reports)

    @property
    def width(self) -> int:
        return len(self.reports[0]) if self.reports else 0

    def __iter__(self):
        for row in self.reports:
            yield from row

    def converged_fraction(self) -> float:
        flags = [r.converged for r in self]
        return float(np.mean(flags)) if flags else 0.0

    def kernel_tensor(self) -> ImageTensor:
        """Recovered kernels as an H x W x N tensor (zeros where a pixel failed)."""
        out = np.zeros((self.height, self.width, self.grid.n_samples))
        for r in self:
            if r.kernel is not None:
                out[r.row, r.col] = r.kernel
        return ImageTensor(out, self.grid)


def _solve_pixel(args) -> PixelReport:
    row, col, samples, grid, config, mode, kernel = args
    g = MeasurementTrace(samples, grid)
    try:
        if mode == "blind":
            rep = blind_solve(g, config)
            return PixelReport(row, col, rep.spikes, rep.residual, rep.converged, rep.kernel.samples,
                               None, rep.restarts_used, rep.iterations_used)
        spikes = prony_solve(g, kernel, config.K, config.band_threshold)
        d = _spike_vector(spikes.taus / grid.sample_period, spikes.gammas, grid.n_samples)
        residual = float(np.linalg.norm(samples - circ_conv(kernel.samples, d)))
        sigma = auto_sigma(samples) if config.sigma is None else config.sigma
        return PixelReport(row, col, spikes, residual, residual <= sigma, kernel.samples.copy())
    except (ValueError, np.linalg.LinAlgError) as exc:
        return PixelReport(row, col, None, math.nan, False, None, f"{type(exc).__name__}: {exc}")


def _solve_chunk(chunk):
    return [_solve_pixel(a) for a in chunk]


def batch_solve(tensor: ImageTensor, config: SolverConfig, mode: str = "blind",
                kernel: Optional[KernelTrace] = None, parallelism: int = 1) -> ReportMap:
    """Solve every pixel independently.

    Pixel ``(row, col)`` runs with seed ``config.seed ^ (row * W + col)``, so
    the output does not depend on ``parallelism``. Failing pixels are kept
    with their error message instead of aborting the batch.
    """
    if mode not in ("blind", "known"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "known" and kernel is None:
        raise ValueError("known mode needs a kernel")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    H, W = tensor.height, tensor.width
    jobs = []
    for r in range(H):
        for c in range(W):
            cfg = SolverConfig(**{**config.to_dict(), "seed": config.seed ^ (r * W + c)})
            jobs.append((r, c, np.asarray(tensor.data[r, c], dtype=float), tensor.grid, cfg, mode, kernel))
    if parallelism == 1 or len(jobs) == 1:
        flat = [_solve_pixel(j) for j in jobs]
    else:
        # static interleaved partition; order is restored below
        chunks = [jobs[i::parallelism] for i in range(parallelism)]
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(_solve_chunk, chunks))
        flat = [None] * len(jobs)
        for i, part in enumerate(parts):
            for j, rep in enumerate(part):
                flat[i + j * parallelism] = rep
    if all(rep.spikes is None for rep in flat):
        raise RuntimeError("every pixel failed: " + (flat[0].error or "unknown error"))
    grid_reports = [flat[r * W:(r + 1) * W] for r in range(H)]
    return ReportMap(grid_reports, tensor.grid)


# --------------------------------------------------------------------------
# depth and amplitude maps

def _per_pixel(reports: ReportMap, k: int, pick) -> np.ndarray:
    out = np.full((reports.height, reports.width), np.nan)
    for r in reports:
        if r.spikes is not None and k < r.spikes.K:
            out[r.row, r.col] = pick(r.spikes, k)
    return out


def depth_map(reports: ReportMap, k: int = 0) -> np.ndarray:
    """Depth ``c tau / 2`` of the k-th return (sorted by delay); NaN where unresolved."""
    return _per_pixel(reports, k, lambda s, i: SPEED_OF_LIGHT * s.taus[i] / 2)


def amplitude_map(reports: ReportMap, k: int = 0) -> np.ndarray:
    """Amplitude of the k-th return, ordered by delay like :func:`depth_map`."""
    return _per_pixel(reports, k, lambda s, i: s.gammas[i])


def separation(tau_a: float, tau_b: float) -> float:
    """Distance in metres between two returns: ``|tau_a - tau_b| c / 2``."""
    return abs(tau_a - tau_b) * SPEED_OF_LIGHT / 2


# --------------------------------------------------------------------------
# continuous kernels from samples

def fractional_shift(x: np.ndarray, delta: float) -> np.ndarray:
    """Trigonometric interpolation of ``x`` delayed by ``delta`` samples.

    Same convention as the circulant model: equals ``x (*) d`` for a unit
    spike at ``delta``.
    """
    x = np.asarray(x, dtype=float)
    if float(delta).is_integer():
        return np.roll(x, int(delta))
    return circ_conv(x, _spike_vector(np.array([delta]), np.array([1.0]), x.size))


def kernel_at(samples: np.ndarray, t: np.ndarray, sample_period: float) -> np.ndarray:
    """Periodic trigonometric interpolant of kernel samples evaluated at times ``t``."""
    samples = np.asarray(samples, dtype=float)
    N = samples.size
    X = np.fft.fft(samples)
    f = np.fft.fftfreq(N, 1.0 / N)
    u = np.atleast_1d(np.asarray(t, dtype=float)) / sample_period
    ph = np.exp(2j * np.pi * np.outer(u, f) / N)
    if N % 2 == 0:
        ph[:, N // 2] = np.cos(np.pi * u)
    return (ph @ X).real / N


def lif_frames(reports: ReportMap, times: Sequence[float]) -> list:
    """Light-in-flight frames ``sum_k gamma_k phi(t - tau_k)`` per pixel, clipped at zero."""
    grid = reports.grid
    times = np.asarray(list(times), dtype=float)
    if times.size == 0:
        return []
    if np.any(times < 0) or np.any(times >= grid.window):
        raise ValueError("frame times must lie in [0, window)")
    frames = np.zeros((times.size, reports.height, reports.width))
    for r in reports:
        if r.spikes is None or r.kernel is None:
            continue
        t = times[:, None] - r.spikes.taus[None, :]
        vals = kernel_at(r.kernel, t.ravel(), grid.sample_period).reshape(t.shape)
        frames[:, r.row, r.col] = vals @ r.spikes.gammas
    return list(np.clip(frames, 0.0, None))


# --------------------------------------------------------------------------
# metrics and gauge alignment

def mse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def align_gauge(phi_true, phi_est):
    """Best scale ``c`` and delay ``delta`` (samples) with ``phi_true ~ c * shift(phi_est, delta)``.

    The delay starts from the circular cross-correlation peak and is refined
    continuously. Returns ``(c, delta, aligned)``.
    """
    a = np.asarray(phi_true, dtype=float)
    b = np.asarray(phi_est, dtype=float)
    N = a.size
    if not np.any(b):
        return 0.0, 0.0, np.zeros_like(a)
    xc = np.fft.ifft(np.fft.fft(a) * np.conj(np.fft.fft(b))).real
    k0 = int(np.argmax(np.abs(xc)))
    k0 = (k0 + N // 2) % N - N // 2

    def fit(delta):
        s = fractional_shift(b, delta)
        c = float(s @ a / (s @ s))
        return c, s

    def cost(delta):
        c, s = fit(delta)
        return float(np.sum((a - c * s) ** 2))

    res = minimize_scalar(cost, bounds=(k0 - 1.0, k0 + 1.0), method="bounded",
                          options={"xatol": 1e-10})
    delta = float(res.x) if res.fun <= cost(k0) else float(k0)
    c, s = fit(delta)
    return c, delta, c * s


def psnr_kernel(phi_true, phi_est, align: bool = True) -> float:
    """``10 log10(max|phi_true|^2 / mse)``, by default after gauge alignment; ``inf`` for a perfect match."""
    a = np.asarray(phi_true, dtype=float)
    aligned = align_gauge(a, phi_est)[2] if align else np.asarray(phi_est, dtype=float)
    err = mse(a, aligned)
    if err == 0.0:
        return math.inf
    return float(10 * np.log10(np.max(np.abs(a)) ** 2 / err))


def align_spikes(truth: SpikeTrain, est: SpikeTrain, grid: AcquisitionGrid,
                 scale: float = 1.0, delta: float = 0.0):
    """Map estimates into the truth gauge and pair them up.

    Delays become ``tau - delta T`` (mod window) and amplitudes ``gamma / scale``.
    Pairing minimises the summed circular delay distance over permutations.
    Returns ``(tau_est, gamma_est)`` ordered like ``truth``; missing spikes are NaN.
    """
    w = grid.window
    taus = np.mod(est.taus - delta * grid.sample_period, w)
    gams = est.gammas / scale if scale != 0 else est.gammas * np.nan
    K = truth.K
    out_t = np.full(K, np.nan)
    out_g = np.full(K, np.nan)
    best, best_cost = None, math.inf
    n = min(K, taus.size)
    for perm in itertools.permutations(range(taus.size), n):
        for slots in itertools.combinations(range(K), n):
            dist = [abs((taus[p] - truth.taus[s] + w / 2) % w - w / 2) for p, s in zip(perm, slots)]
            if sum(dist) < best_cost:
                best, best_cost = (perm, slots), sum(dist)
    if best is not None:
        for p, s in zip(*best):
            # unwrap next to the true delay
            out_t[s] = truth.taus[s] + ((taus[p] - truth.taus[s] + w / 2) % w - w / 2)
            out_g[s] = gams[p]
    return out_t, out_g


# --------------------------------------------------------------------------
# file formats

class TensorFormatError(ValueError):
    """Problem with a tensor or map file; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code.replace('_', ' ')}: {message}")
        self.code = code


_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _paths(base) -> tuple:
    base = Path(base)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_tensor(base, tensor: ImageTensor, dtype: str = "f64") -> tuple:
    """Write ``<base>.json`` (header) and ``<base>.bin`` (little-endian, time fastest)."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    hpath, bpath = _paths(base)
    header = {
        "version": FORMAT_VERSION,
        "height": tensor.height,
        "width": tensor.width,
        "num_samples": tensor.grid.n_samples,
        "sample_period_s": tensor.grid.sample_period,
        "dtype": dtype,
    }
    hpath.write_text(json.dumps(header, indent=2) + "\n")
    np.ascontiguousarray(tensor.data, dtype=_DTYPES[dtype]).tofile(bpath)
    return hpath, bpath


def _read_header(hpath: Path, required: Sequence[str]) -> dict:
    try:
        header = json.loads(hpath.read_text())
    except json.JSONDecodeError as exc:
        raise TensorFormatError("malformed_header", f"{hpath}: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorFormatError("malformed_header", f"{hpath}: header must be a JSON object")
    if header.get("version") != FORMAT_VERSION:
        raise TensorFormatError("version_mismatch", f"{hpath}: version {header.get('version')!r}, "
                                                    f"expected {FORMAT_VERSION}")
    missing = [k for k in required if k not in header]
    if missing:
        raise TensorFormatError("malformed_header", f"{hpath}: missing {missing}")
    if header["dtype"] not in _DTYPES:
        raise TensorFormatError("malformed_header", f"{hpath}: unknown dtype {header['dtype']!r}")
    return header


def load_tensor(base) -> ImageTensor:
    hpath, bpath = _paths(base)
    header = _read_header(hpath, ["height", "width", "num_samples", "sample_period_s", "dtype"])
    try:
        H, W, N = int(header["height"]), int(header["width"]), int(header["num_samples"])
        grid = AcquisitionGrid(N, float(header["sample_period_s"]))
    except (TypeError, ValueError) as exc:
        raise TensorFormatError("malformed_header", f"{hpath}: {exc}") from exc
    data = np.fromfile(bpath, dtype=_DTYPES[header["dtype"]])
    if data.size != H * W * N:
        raise TensorFormatError("size_mismatch", f"{bpath}: {data.size} values, header implies {H * W * N}")
    return ImageTensor(data.reshape(H, W, N).astype(float), grid)


def _report_record(r: PixelReport) -> dict:
    rec = {
        "x": r.col,
        "y": r.row,
        "spikes": r.spikes.to_records() if r.spikes is not None else [],
        "residual": None if math.isnan(r.residual) else r.residual,
        "converged": bool(r.converged),
    }
    if r.error:
        rec["error"] = r.error
    return rec


def save_reports(path, reports) -> Path:
    """One JSON object per pixel, row-major."""
    path = Path(path)
    with path.open("w") as fh:
        for r in reports:
            fh.write(json.dumps(_report_record(r)) + "\n")
    return path


def load_reports(path, grid: AcquisitionGrid, kernels: Optional[ImageTensor] = None) -> ReportMap:
    """Read a report file; pixel order in the file is irrelevant."""
    recs = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                recs.append((int(rec["y"]), int(rec["x"]), rec))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TensorFormatError("malformed_header", f"{path}:{line_no}: {exc}") from exc
    if not recs:
        raise TensorFormatError("size_mismatch", f"{path}: no records")
    H = max(r for r, _, _ in recs) + 1
    W = max(c for _, c, _ in recs) + 1
    if len(recs) != H * W or len({(r, c) for r, c, _ in recs}) != H * W:
        raise TensorFormatError("size_mismatch", f"{path}: {len(recs)} records do not tile a {H}x{W} grid")
    if kernels is not None and (kernels.height, kernels.width) != (H, W):
        raise TensorFormatError("size_mismatch", "kernel tensor and report grid differ in size")
    grid_reports = [[None] * W for _ in range(H)]
    for r, c, rec in recs:
        spikes = SpikeTrain.from_records(rec["spikes"]) if rec["spikes"] else None
        residual = math.nan if rec.get("residual") is None else float(rec["residual"])
        kern = kernels.data[r, c].copy() if kernels is not None else None
        grid_reports[r][c] = PixelReport(r, c, spikes, residual, bool(rec.get("converged", False)),
                                         kern, rec.get("error"))
    return ReportMap(grid_reports, grid)


def save_depth_csv(path, depth: np.ndarray) -> Path:
    """Comma-separated grid of metres, one image row per line; NaN written as ``nan``."""
    path = Path(path)
    np.savetxt(path, depth, delimiter=",", fmt="%.9g")
    return path


def save_depth_raw(base, depth: np.ndarray, k: int = 0) -> tuple:
    """Raw little-endian float32 map plus a JSON header."""
    hpath, bpath = _paths(base)
    header = {"version": FORMAT_VERSION, "height": int(depth.shape[0]), "width": int(depth.shape[1]),
              "dtype": "f32", "units": "m", "k": int(k)}
    hpath.write_text(json.dumps(header, indent=2) + "\n")
    np.ascontiguousarray(depth, dtype="<f4").tofile(bpath)
    return hpath, bpath


def default_parallelism() -> int:
    """``BLINDTOF_PARALLELISM`` if set, else 1."""
    try:
        return max(1, int(os.environ.get("BLINDTOF_PARALLELISM", "1")))
    except ValueError:
        return 1
