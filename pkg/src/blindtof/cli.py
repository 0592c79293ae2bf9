"""Command-line entry point: ``blindtof simulate | solve | eval | lif``."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .blind_amin import SolverConfig
from .forward_model import (ImageTensor, KernelTrace, SpikeTrain, family_from_dict, family_to_dict,
                            make_kernel, ramp_scene, simulate_tensor)
from .pipeline import (PixelReport, ReportMap, TensorFormatError, align_gauge, align_spikes, amplitude_map,
                       batch_solve, default_parallelism, depth_map, lif_frames, load_reports, load_tensor,
                       mse, psnr_kernel, save_depth_csv, save_depth_raw, save_reports, save_tensor, separation)
from .signal_core import AcquisitionGrid

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SOLVER = 4

# solver settings a config file or flag may override
_SOLVER_KEYS = {
    "k": "K", "sigma": "sigma", "jmax": "jmax", "restarts": "max_restarts", "seed": "seed",
    "kernel_support": "kernel_support", "max_outer": "max_outer", "band_threshold": "band_threshold",
}


class CliIOError(Exception):
    pass


class CliSolverError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, files: list, extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "outputs": {Path(f).name: _sha256(f) for f in sorted(map(str, files))},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _emit(args, payload: dict, table: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        print(table)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliIOError(f"{path} is not valid JSON: {exc}") from exc


def _load_tensor(base) -> ImageTensor:
    try:
        return load_tensor(base)
    except (OSError, TensorFormatError) as exc:
        raise CliIOError(str(exc)) from exc


def _load_kernel_file(path, grid: AcquisitionGrid) -> KernelTrace:
    spec = _read_json(path)
    try:
        samples = np.asarray(spec["samples"], dtype=float)
        period = float(spec["sample_period_s"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliIOError(f"{path}: kernel file needs 'sample_period_s' and 'samples'") from exc
    if samples.size != grid.n_samples or not math.isclose(period, grid.sample_period, rel_tol=1e-12):
        raise CliIOError(f"{path}: kernel grid does not match the tensor")
    return KernelTrace(samples, grid)


def _kernel_json(kernel: KernelTrace) -> dict:
    out = {"sample_period_s": kernel.grid.sample_period, "samples": kernel.samples.tolist()}
    if kernel.family is not None:
        out["family"] = family_to_dict(kernel.family)
    return out


# --------------------------------------------------------------------------
# scene description

def _scene_from_json(spec: dict):
    """Grid, kernel, spike map, snr, seed and mode from a scene description.

    Pixels come from one of ``pixels`` (explicit list), ``spikes`` (same
    train everywhere, with ``height``/``width``) or ``ramp``.
    """
    try:
        g = spec["grid"]
        grid = AcquisitionGrid(int(g["num_samples"]), float(g["sample_period_s"]))
        kernel = make_kernel(family_from_dict(spec["kernel"]), grid)
        snr = spec.get("snr_db")
        snr = math.inf if snr is None else float(snr)
        seed = int(spec.get("seed", 0))
        mode = spec.get("mode", "continuous")
        if "pixels" in spec:
            H = 1 + max(int(p["y"]) for p in spec["pixels"])
            W = 1 + max(int(p["x"]) for p in spec["pixels"])
            scene = [[None] * W for _ in range(H)]
            for p in spec["pixels"]:
                scene[int(p["y"])][int(p["x"])] = SpikeTrain.from_records(p["spikes"])
            if any(s is None for row in scene for s in row):
                raise ValueError("pixel list does not cover a full rectangle")
        elif "spikes" in spec:
            H, W = int(spec.get("height", 1)), int(spec.get("width", 1))
            train = SpikeTrain.from_records(spec["spikes"])
            scene = [[train] * W for _ in range(H)]
        elif "ramp" in spec:
            scene = ramp_scene(**spec["ramp"])
        else:
            raise ValueError("scene needs 'pixels', 'spikes' or 'ramp'")
    except (KeyError, TypeError, ValueError) as exc:
        raise CliIOError(f"invalid scene description: {exc}") from exc
    return grid, kernel, scene, snr, seed, mode


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    spec = _read_json(args.scene)
    grid, kernel, scene, snr, seed, mode = _scene_from_json(spec)
    tensor = simulate_tensor(scene, kernel, snr, seed, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list(save_tensor(out / "tensor", tensor, args.dtype))
    truth = ReportMap([[PixelReport(r, c, s, 0.0, True) for c, s in enumerate(row)]
                       for r, row in enumerate(scene)], grid)
    files.append(save_reports(out / "truth.jsonl", truth))
    kpath = out / "kernel.json"
    kpath.write_text(json.dumps(_kernel_json(kernel)) + "\n")
    files.append(kpath)
    manifest = _write_manifest(out, "simulate", {"scene": spec, "dtype": args.dtype}, files)
    _emit(args, manifest, "\n".join(f"{name}  {digest}" for name, digest in manifest["outputs"].items()))
    return EXIT_OK


def _solver_config(args) -> SolverConfig:
    base = SolverConfig().to_dict()
    if args.config:
        file_cfg = _read_json(args.config)
        unknown = set(file_cfg) - set(_SOLVER_KEYS) - set(base) - {"mode", "parallelism"}
        if unknown:
            raise CliIOError(f"{args.config}: unknown keys {sorted(unknown)}")
        for key, value in file_cfg.items():
            base[_SOLVER_KEYS.get(key, key)] = value
    for flag, key in _SOLVER_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if base.get("sigma") == "auto":
        base["sigma"] = None
    elif base.get("sigma") is not None:
        base["sigma"] = float(base["sigma"])
    base["refine"] = base.get("refine", True) and not args.no_refine
    return SolverConfig(**{k: base[k] for k in SolverConfig().to_dict()})


def _file_setting(args, key, default):
    if getattr(args, key, None) is not None:
        return getattr(args, key)
    if args.config:
        return _read_json(args.config).get(key, default)
    return default


def cmd_solve(args) -> int:
    tensor = _load_tensor(args.input)
    config = _solver_config(args)
    mode = _file_setting(args, "mode", "blind")
    parallelism = int(_file_setting(args, "parallelism", default_parallelism()))
    kernel = _load_kernel_file(args.kernel, tensor.grid) if mode == "known" else None
    try:
        reports = batch_solve(tensor, config, mode, kernel, parallelism)
    except RuntimeError as exc:
        raise CliSolverError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [save_reports(out / "reports.jsonl", reports)]
    for k in range(config.K):
        depth = depth_map(reports, k)
        files.append(save_depth_csv(out / f"depth_k{k}.csv", depth))
        files.extend(save_depth_raw(out / f"depth_k{k}", depth, k))
        files.append(save_depth_csv(out / f"amplitude_k{k}.csv", amplitude_map(reports, k)))
    files.extend(save_tensor(out / "kernels", reports.kernel_tensor()))
    frac = reports.converged_fraction()
    effective = {**config.to_dict(), "mode": mode, "parallelism": parallelism}
    manifest = _write_manifest(out, "solve", effective, files, {"converged_fraction": frac})
    failed = [r.error for r in reports if r.error]
    _emit(args, manifest, f"pixels: {reports.height}x{reports.width}  converged: {100 * frac:.1f}%  "
                          f"failed: {len(failed)}")
    return EXIT_OK if frac >= 0.99 else EXIT_SOLVER


def _evaluate(truth: ReportMap, est: ReportMap, true_kernel, grid: AcquisitionGrid) -> dict:
    if (truth.height, truth.width) != (est.height, est.width):
        raise CliIOError(f"dimension mismatch: truth {truth.height}x{truth.width}, "
                         f"estimate {est.height}x{est.width}")
    rows, d_tau, d_gam, psnrs = [], [], [], []
    for t in truth:
        e = est.reports[t.row][t.col]
        scale, delta = 1.0, 0.0
        psnr = None
        if e.spikes is None:
            rows.append({"x": t.col, "y": t.row, "failed": True})
            continue
        if true_kernel is not None and e.kernel is not None and np.any(e.kernel):
            scale, delta, _ = align_gauge(true_kernel, e.kernel)
            psnr = psnr_kernel(true_kernel, e.kernel)
            psnrs.append(psnr)
        te, ge = align_spikes(t.spikes, e.spikes, grid, scale, delta)
        ok = ~np.isnan(te)
        d_tau.extend(((te[ok] - t.spikes.taus[ok]) / 1e-8).tolist())
        d_gam.extend((ge[ok] - t.spikes.gammas[ok]).tolist())
        row = {"x": t.col, "y": t.row, "gamma_true": t.spikes.gammas.tolist(), "tau_true_1e-8s":
               (t.spikes.taus / 1e-8).tolist(), "gamma_est": ge.tolist(), "tau_est_1e-8s": (te / 1e-8).tolist(),
               "psnr_db": psnr}
        if t.spikes.K >= 2 and np.all(ok[:2]):
            row["separation_true_cm"] = 100 * separation(*t.spikes.taus[:2])
            row["separation_est_cm"] = 100 * separation(*te[:2])
        rows.append(row)
    summary = {
        "mse_gamma": mse(d_gam, np.zeros(len(d_gam))) if d_gam else None,
        "mse_tau_1e-8s": mse(d_tau, np.zeros(len(d_tau))) if d_tau else None,
        "psnr_db_mean": (float(np.mean(psnrs)) if psnrs and np.all(np.isfinite(psnrs)) else
                         (math.inf if psnrs else None)),
        "pixels": len(rows),
    }
    return {"summary": summary, "pixels": rows}


def _fmt(values) -> str:
    return "[" + ",".join(f"{v:.2f}" for v in values) + "]"


def cmd_eval(args) -> int:
    tensor_grid = _grid_from_header(args.tensor)
    kernels = _load_tensor(args.kernels) if args.kernels else None
    try:
        truth = load_reports(args.truth, tensor_grid)
        est = load_reports(args.reports, tensor_grid, kernels)
    except (OSError, TensorFormatError) as exc:
        raise CliIOError(str(exc)) from exc
    true_kernel = _load_kernel_file(args.true_kernel, tensor_grid).samples if args.true_kernel else None
    result = _evaluate(truth, est, true_kernel, tensor_grid)
    lines = [f"{'pixel':>9} {'Gamma':>16} {'tau (1e-8 s)':>16} {'Gamma est':>16} {'tau est':>16} {'PSNR dB':>8}"]
    for row in sorted(result["pixels"], key=lambda r: (r["y"], r["x"])):
        if row.get("failed"):
            lines.append(f"{row['y']:>4},{row['x']:<4} failed")
            continue
        psnr = "" if row["psnr_db"] is None else f"{row['psnr_db']:.2f}"
        lines.append(f"{row['y']:>4},{row['x']:<4} {_fmt(row['gamma_true']):>16} {_fmt(row['tau_true_1e-8s']):>16} "
                     f"{_fmt(row['gamma_est']):>16} {_fmt(row['tau_est_1e-8s']):>16} {psnr:>8}")
    s = result["summary"]
    lines.append(f"MSE(Gamma) = {s['mse_gamma']}   MSE(tau) = {s['mse_tau_1e-8s']} (1e-8 s)^2   "
                 f"mean PSNR = {s['psnr_db_mean']}")
    _emit(args, result, "\n".join(lines))
    return EXIT_OK


def _grid_from_header(base) -> AcquisitionGrid:
    return _load_tensor(base).grid


def cmd_lif(args) -> int:
    grid = _grid_from_header(args.tensor)
    kernels = _load_tensor(args.kernels)
    try:
        reports = load_reports(args.reports, grid, kernels)
    except (OSError, TensorFormatError) as exc:
        raise CliIOError(str(exc)) from exc
    if args.times:
        times = [float(t) for t in args.times.split(",") if t.strip()]
    else:
        count = math.ceil(grid.window / args.stride)
        times = [i * args.stride for i in range(count)]
    if any(t < 0 or t >= grid.window for t in times):
        raise CliUsage(f"frame times must lie in [0, {grid.window:g}) s")
    frames = lif_frames(reports, times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, frame in enumerate(frames):
        files.append(save_depth_csv(out / f"frame_{i:04d}.csv", frame))
    manifest = _write_manifest(out, "lif", {"times_s": times}, files, {"times_s": times})
    _emit(args, manifest, f"{len(frames)} frames written to {out}")
    return EXIT_OK


class CliUsage(Exception):
    pass


# --------------------------------------------------------------------------
# parser

def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _sigma(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("sigma must be 'auto' or a number") from exc
    if v < 0:
        raise argparse.ArgumentTypeError("sigma must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults (flags override it)")
    common.add_argument("--json", action="store_true", help="print JSON instead of a table")

    parser = argparse.ArgumentParser(prog="blindtof", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a tensor from a scene description")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", parents=[common], help="recover spikes for every pixel")
    p.add_argument("--input", required=True, help="tensor base path (header .json + payload .bin)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["blind", "known"], default=None)
    p.add_argument("--kernel", help="kernel JSON (known mode)")
    p.add_argument("--k", type=int, default=None, help="spikes per pixel")
    p.add_argument("--sigma", type=_sigma, default=None, help="'auto' or an l2 tolerance")
    p.add_argument("--jmax", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parallelism", type=int, default=None,
                   help="worker processes (default: $BLINDTOF_PARALLELISM or 1)")
    p.add_argument("--kernel-support", dest="kernel_support", type=int, default=None,
                   help="kernel length in samples (default: smallest that fits)")
    p.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    p.add_argument("--band-threshold", dest="band_threshold", type=_positive_float, default=None)
    p.add_argument("--no-refine", action="store_true", help="skip the final joint polish")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", parents=[common], help="compare reports with ground truth")
    p.add_argument("--reports", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--tensor", required=True, help="tensor base path (for the grid)")
    p.add_argument("--kernels", help="recovered kernel tensor base path")
    p.add_argument("--true-kernel", dest="true_kernel", help="ground-truth kernel JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lif", parents=[common], help="render light-in-flight frames")
    p.add_argument("--reports", required=True)
    p.add_argument("--kernels", required=True, help="recovered kernel tensor base path")
    p.add_argument("--tensor", required=True, help="tensor base path (for the grid)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--times", help="comma-separated frame times in seconds")
    group.add_argument("--stride", type=_positive_float, help="frame spacing in seconds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lif)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "solve":
        mode = _file_setting(args, "mode", "blind") if not args.config or Path(args.config).exists() else args.mode
        if mode == "known" and not args.kernel:
            parser.error("--kernel is required in known mode")
        if args.kernel and not Path(args.kernel).is_file():
            parser.error(f"kernel file not found: {args.kernel}")
    try:
        return args.func(args)
    except CliUsage as exc:
        parser.error(str(exc))
    except CliIOError as exc:
        print(f"blindtof: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CliSolverError as exc:
        print(f"blindtof: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"blindtof: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
