"""Command-line surface: simulate, reconstruct, evaluate, export, convergence.

Every subcommand takes ``--config <json>`` plus flag overrides (flags win) and
``--seed``. Exit codes: 0 success, 1 usage error, 2 data error (missing or
malformed files, degenerate inputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import GsvrError, InvalidParameterError
from .field import rasterize
from .formats import (export_pointcloud, export_slices, read_field,
                      read_history, write_field, write_history_csv,
                      write_history_json, write_states_json)
from .metrics import ncc, psnr, ssim
from .motion import SliceStack
from .nifti import read_nifti, read_stack, write_nifti
from .psf import build_psf
from .simulate import (DEFAULT_ORIENTATIONS, AcquisitionParams, MotionParams,
                       make_phantom, simulate_protocol)
from .train import fit
from .volume import VolumeGrid


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not sys.exit."""

    def error(self, message):
        raise _UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("n_gaussians", "epochs", "top_k", "lambda_reg", "seed",
                "reseed_every", "rotation_warmup"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_psf", False):
        overrides["use_psf"] = False
    return cfg.replace(**overrides) if overrides else cfg


def _add_config_flags(p: argparse.ArgumentParser, seed_default=None):
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=seed_default)


# --------------------------------------------------------------------------
# Subcommands

def _cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt = make_phantom(args.size, seed=args.seed or 0, spacing=args.spacing)
    acq = AcquisitionParams(inplane=args.inplane, thickness=args.thickness,
                            noise_std=args.noise,
                            orientations=DEFAULT_ORIENTATIONS[:args.stacks])
    motion = MotionParams(rot_max=args.max_rot, trans_max=args.max_trans,
                          seed=args.seed or 0)
    stacks, truths = simulate_protocol(gt, acq, motion)
    write_nifti(gt, out / "ground_truth.nii")
    for i, stack in enumerate(stacks):
        write_nifti(VolumeGrid(stack.data, stack.affine), out / f"stack_{i:02d}.nii")
    write_states_json(truths, out / "truth_states.json")
    print(f"wrote {len(stacks)} stacks + ground truth + truth states to {out}")
    return 0


def _read_stacks(paths: Sequence[Path], thickness: Optional[float]) -> List[SliceStack]:
    stacks = []
    for p in paths:
        stack, _ = read_stack(p)
        if thickness is not None:
            stack = SliceStack(stack.data, stack.affine, stack.inplane_spacing,
                               thickness, stack.mask)
        stacks.append(stack)
    return stacks


def _cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    stacks = _read_stacks(args.stacks, args.thickness)
    psf_models = [build_psf(s.inplane_spacing, s.thickness,
                            cfg.inplane_fwhm_factor) for s in stacks]
    field, states, history = fit(
        stacks, cfg.init_config(), cfg.loss_config(), cfg.optim_config(),
        use_psf=cfg.use_psf, psf_models=psf_models, verbose=args.verbose)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    write_field(field, out / "field.gsvr")
    write_states_json([states], out / "slice_states.json")
    write_history_json(history, out / "history.json")
    write_history_csv(history, out / "history.csv")
    grid = _target_grid(stacks, args.resolution)
    volume = rasterize(field, grid, K=cfg.top_k, delta=cfg.delta)
    write_nifti(volume, out / "volume.nii")
    print(f"reconstructed {field.count} primitives from {len(stacks)} stacks -> {out}")
    return 0


def _target_grid(stacks: Sequence[SliceStack], resolution: float) -> VolumeGrid:
    """Isotropic grid covering the union of the stacks' native pixel grids."""
    corners = []
    for s in stacks:
        nx, ny, ns = s.data.shape
        idx = np.array([[i, j, k] for i in (0, nx - 1)
                        for j in (0, ny - 1) for k in (0, ns - 1)], dtype=float)
        corners.append(idx @ s.affine[:3, :3].T + s.affine[:3, 3])
    pts = np.concatenate(corners)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    shape = np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 2)
    affine = np.eye(4)
    affine[:3, :3] *= resolution
    affine[:3, 3] = lo
    return VolumeGrid(np.zeros(shape), affine)


def _cmd_evaluate(args) -> int:
    pred, _ = read_nifti(args.pred, normalize=not args.raw)
    gt, _ = read_nifti(args.gt, normalize=not args.raw)
    mask = None
    if args.mask:
        mask_grid, _ = read_nifti(args.mask, normalize=False)
        mask = mask_grid.data > 0.5
    rows = [("psnr_db", psnr(pred.data, gt.data, mask=mask)),
            ("ssim", ssim(pred.data, gt.data, mask=mask)),
            ("ncc", ncc(pred.data, gt.data, mask=mask))]
    for name, value in rows:
        print(f"{name},{value:.6f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerows([(n, f"{v:.6f}") for n, v in rows])
    return 0


def _cmd_export(args) -> int:
    field = read_field(args.field)
    wrote = []
    if args.ply:
        export_pointcloud(field, args.gamma, args.ply)
        wrote.append(str(args.ply))
    if args.png:
        if args.grid:
            grid, _ = read_nifti(args.grid, normalize=False)
        else:
            lo = field.means.min(axis=0) - 2.0
            hi = field.means.max(axis=0) + 2.0
            shape = np.maximum(np.ceil((hi - lo) / args.resolution).astype(int) + 1, 2)
            affine = np.eye(4)
            affine[:3, :3] *= args.resolution
            affine[:3, 3] = lo
            grid = VolumeGrid(np.zeros(shape), affine)
        volume = rasterize(field, grid, K=min(args.top_k, field.count))
        export_slices(volume, args.axis, args.png)
        wrote.append(str(args.png))
    if not wrote:
        raise _UsageError("export: nothing to do; pass --ply and/or --png")
    print("wrote " + ", ".join(wrote))
    return 0


def _cmd_convergence(args) -> int:
    history = read_history(args.history)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "psnr", "ssim", "seconds"])
        for record in history:
            writer.writerow([record.get("epoch"), record.get("loss"),
                             "" if record.get("psnr") is None else record["psnr"],
                             "" if record.get("ssim") is None else record["ssim"],
                             record.get("seconds")])
    print(f"wrote convergence table for {len(history)} epochs to {args.out}")
    return 0


# --------------------------------------------------------------------------
# Parser assembly

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsvr",
                     description="Slice-to-volume reconstruction with a Gaussian "
                                 "primitive field and an analytic PSF forward model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[], help="phantom -> motion-corrupted stacks")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.5)
    p.add_argument("--stacks", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--inplane", type=float, default=0.5)
    p.add_argument("--thickness", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--max-rot", type=float, default=6.0)
    p.add_argument("--max-trans", type=float, default=4.0)
    _add_config_flags(p, seed_default=0)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct", help="stacks -> field + volume + history")
    p.add_argument("--stacks", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--thickness", type=float, default=None,
                   help="override slice thickness in mm (default: third-axis spacing)")
    p.add_argument("--resolution", type=float, default=1.0,
                   help="output raster spacing in mm")
    p.add_argument("--n-gaussians", dest="n_gaussians", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float, default=None)
    p.add_argument("--reseed-every", dest="reseed_every", type=int, default=None)
    p.add_argument("--rotation-warmup", dest="rotation_warmup", type=int, default=None)
    p.add_argument("--no-psf", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("evaluate", help="pred + gt (+ mask) -> metrics table")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--raw", action="store_true",
                   help="skip percentile intensity normalization on load")
    p.add_argument("--out", type=Path, default=None, help="also write a CSV")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export", help="field file -> PLY point cloud / PNG montage")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--ply", type=Path, default=None)
    p.add_argument("--gamma", type=float, default=0.6,
                   help="ellipsoid shrink factor for the PLY, in (0, 1]")
    p.add_argument("--png", type=Path, default=None)
    p.add_argument("--axis", default="z", choices=("x", "y", "z"))
    p.add_argument("--grid", type=Path, default=None,
                   help="NIfTI whose grid the PNG montage is rasterized on")
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--top-k", dest="top_k", type=int, default=50)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("convergence", help="history JSON -> per-epoch CSV curves")
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_convergence)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (GsvrError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
