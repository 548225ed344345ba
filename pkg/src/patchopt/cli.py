"""Command-line pipeline: stats -> select -> plan, plus the numeric checks.

All reports are UTF-8 JSON on stdout; diagnostics go to stderr. Exit codes:
0 success, 1 invariant failure, 2 usage or input error. Subcommands are
deterministic given (inputs, config, seed). PATCHOPT_THREADS caps the
per-scan fan-out of ``stats``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import loss, patch_select, synth, verify, vit_core
from .lesion_stats import AGGREGATION_MODES, aggregate_scan_stats
from .lesion_stats import lesion_stats as compute_lesion_stats
from .config import (
    REFERENCE_RESULTS,
    REPRODUCIBILITY_NOTE,
    PipelineConfig,
    load_config,
)
from .gradcheck import gradient_check
from .tokenizer import EmbeddingParams, read_tokens, tokenize_volume, write_tokens
from .volume_io import NiftiError, read_nifti

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _parse_triple(text: str, kind=float):
    parts = [kind(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_ints(text: str):
    return tuple(int(p) for p in text.split(","))


def _load_pipeline_config(path: str | None) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


def _max_workers() -> int:
    raw = os.environ.get("PATCHOPT_THREADS", "")
    if raw.strip():
        n = int(raw)
        if n < 1:
            raise ValueError(f"PATCHOPT_THREADS must be >= 1, got {raw}")
        return n
    return min(8, os.cpu_count() or 1)


def _collect_volumes(paths: list[str]) -> list[Path]:
    files: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            files.extend(sorted(path.glob("*.nii")))
        else:
            files.append(path)
    return files


def cmd_stats(args) -> int:
    try:
        cfg = _load_pipeline_config(args.config).override(
            connectivity=args.connectivity,
            aggregation_mode=args.mode,
            target_label=args.target_label,
            bins=args.bins,
        )
    except (ValueError, OSError) as e:
        return _fail(str(e))

    files = _collect_volumes(args.paths)
    if not files:
        return _fail("NoScans: no .nii volumes found in the given paths")

    def load_one(path: Path):
        vol = read_nifti(path)
        return path.stem, compute_lesion_stats(
            vol, cfg.target_label, bins=cfg.bins, connectivity=cfg.connectivity
        )

    results, failures = [], []
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        for path, outcome in zip(files, pool.map(lambda p: _attempt(load_one, p), files)):
            if isinstance(outcome, Exception):
                failures.append(f"{path}: {outcome}")
            else:
                results.append(outcome)
    if failures:
        for line in failures:
            print(f"error: unreadable volume: {line}", file=sys.stderr)
        return EXIT_USAGE

    ds = aggregate_scan_stats(results, cfg.aggregation_mode)
    report = ds.to_dict(dataset_id=args.dataset_id)
    report["target_label"] = cfg.target_label
    _emit(report)
    return EXIT_OK


def _attempt(fn, *a):
    try:
        return fn(*a)
    except (NiftiError, OSError, ValueError) as e:
        return e


def _decision_report(cfg: PipelineConfig, mean_mm3: float) -> dict:
    edge = patch_select.target_edge(
        mean_mm3,
        spacing_mm=cfg.spacing_mm,
        mode=cfg.unit_mode,
        scale=cfg.scale_s,
    )
    decision = patch_select.select_patch(edge, cfg.candidates, cfg.dims, unit_mode=cfg.unit_mode)
    report = decision.to_dict()
    report["mean_volume_mm3"] = mean_mm3
    report["spacing_mm"] = list(cfg.spacing_mm)
    if cfg.unit_mode == "paper-literal":
        report["scale_s"] = cfg.scale_s
    report["reference_results"] = REFERENCE_RESULTS
    report["reproducibility_note"] = REPRODUCIBILITY_NOTE
    return report


def cmd_select(args) -> int:
    try:
        cfg = _load_pipeline_config(args.config).override(
            dims=args.dims,
            spacing_mm=args.spacing,
            candidates=args.candidates,
            unit_mode=args.unit_mode,
            scale_s=args.scale_s,
        )
    except (ValueError, OSError) as e:
        return _fail(str(e))

    if args.volume_mm3 is not None:
        mean = args.volume_mm3
    elif args.stats:
        try:
            with open(args.stats) as f:
                mean = float(json.load(f)["dataset_mean_mm3"])
        except (OSError, KeyError, ValueError) as e:
            return _fail(f"cannot read mean volume from {args.stats}: {e}")
    else:
        return _fail("need --volume-mm3 or --stats")
    if not np.isfinite(mean) or mean <= 0:
        return _fail(f"mean volume must be positive, got {mean}")
    if cfg.unit_mode == "paper-literal" and cfg.scale_s is None:
        return _fail("paper-literal mode requires --scale-s")

    _emit(_decision_report(cfg, mean))
    return EXIT_OK


def cmd_plan(args) -> int:
    try:
        cfg = _load_pipeline_config(args.config).override(
            dims=args.dims,
            spacing_mm=args.spacing,
            candidates=args.candidates,
            unit_mode=args.unit_mode,
            scale_s=args.scale_s,
        )
    except (ValueError, OSError) as e:
        return _fail(str(e))

    entries = []
    for path in args.reports:
        try:
            with open(path) as f:
                data = json.load(f)
            dataset_id = data.get("dataset_id") or Path(path).stem
            mean = float(data["dataset_mean_mm3"])
        except (OSError, KeyError, ValueError) as e:
            return _fail(f"bad stats report {path}: {e}")
        if mean <= 0:
            return _fail(f"{path}: dataset mean must be positive, got {mean}")
        edge = patch_select.target_edge(
            mean, spacing_mm=cfg.spacing_mm, mode=cfg.unit_mode, scale=cfg.scale_s
        )
        selected = patch_select.select_patch(edge, cfg.candidates, cfg.dims).selected
        entries.append((dataset_id, mean, selected))

    try:
        plan = patch_select.transfer_plan(entries)
    except patch_select.NeedTwoDatasets as e:
        return _fail(str(e))
    report = plan.to_dict()
    report["reference_results"] = REFERENCE_RESULTS
    report["reproducibility_note"] = REPRODUCIBILITY_NOTE
    _emit(report)
    return EXIT_OK


def cmd_tokenize(args) -> int:
    geo = patch_select.token_geometry(args.dims, args.patch)
    patch_dim = args.patch**3 * args.channels
    params = EmbeddingParams.seeded(patch_dim, geo.token_count, args.embed, args.seed)
    rng = np.random.default_rng(args.seed)
    volume = rng.normal(0.0, 1.0, (*args.dims, args.channels))
    seq = tokenize_volume(volume, args.patch, params)
    report = {
        "dims": list(args.dims),
        "patch": args.patch,
        "channels": args.channels,
        "embed_dim": args.embed,
        "seed": args.seed,
        "grid": list(geo.grid),
        "token_count": geo.token_count,
        "patch_dim": patch_dim,
        "padded_dims": list(geo.padded_dims),
        "pad_voxels": geo.pad_voxels,
    }
    if args.out:
        write_tokens(args.out, seq.tokens)
        report["tokens_file"] = str(args.out)
    _emit(report)
    return EXIT_OK


def cmd_forward(args) -> int:
    config = vit_core.PRESETS[args.config]
    params = vit_core.ViTParams.seeded(config, args.seed)
    if args.tokens:
        z0 = read_tokens(args.tokens)
        if z0.shape[1] != config.hidden:
            return _fail(f"token width {z0.shape[1]} != hidden size {config.hidden}")
    else:
        rng = np.random.default_rng(args.seed)
        z0 = rng.normal(0.0, 1.0, (args.n_tokens, config.hidden))
    try:
        z_out, _ = vit_core.forward(z0, config, params)
    except vit_core.NonFiniteActivation as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    _emit({
        "config": args.config,
        "seed": args.seed,
        "tokens": int(z0.shape[0]),
        "hidden": config.hidden,
        "output_sha256": hashlib.sha256(np.ascontiguousarray(z_out).tobytes()).hexdigest(),
        "output_fro_norm": float(np.linalg.norm(z_out)),
        "output_min": float(z_out.min()),
        "output_max": float(z_out.max()),
    })
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = vit_core.PRESETS[args.config]
    result = gradient_check(
        config, seed=args.seed, n_tokens=args.n_tokens,
        perturb=1e-3 if args.perturb_grad else 0.0,
    )
    passed = result["max_rel_err"] < args.tolerance
    _emit({
        "config": args.config,
        "seed": args.seed,
        "tolerance": args.tolerance,
        "max_rel_err": result["max_rel_err"],
        "per_tensor": result["per_tensor"],
        "passed": passed,
    })
    return EXIT_OK if passed else EXIT_INVARIANT


def cmd_gradcheck_loss(args) -> int:
    result = loss.loss_gradient_check(args.voxels, args.classes, seed=args.seed)
    passed = result["max_rel_grad_err"] < args.tolerance
    _emit({**result, "tolerance": args.tolerance, "passed": passed})
    return EXIT_OK if passed else EXIT_INVARIANT


def cmd_synth(args) -> int:
    if args.spec:
        try:
            with open(args.spec) as f:
                spec = synth.PhantomSpec.from_dict(json.load(f))
        except (OSError, KeyError, ValueError) as e:
            return _fail(f"bad phantom spec {args.spec}: {e}")
    elif args.random_lesions is not None:
        dims = args.dims or (64, 64, 64)
        spacing = args.spacing or (1.0, 1.0, 1.0)
        try:
            spec = synth.random_spec(dims, spacing, args.random_lesions, args.seed, name=args.name)
        except (synth.OverlapError, synth.OutOfBounds) as e:
            return _fail(str(e))
    else:
        return _fail("need --spec or --random-lesions")
    try:
        nii, sidecar = synth.write_fixture(spec, args.out)
    except (synth.OverlapError, synth.OutOfBounds, OSError) as e:
        return _fail(str(e))
    _emit({
        "nii": str(nii),
        "sidecar": str(sidecar),
        "lesion_count": len(spec.lesions),
        "analytic_mean_volume_mm3": spec.analytic_mean_volume_mm3,
    })
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.geometry_only and args.config == "base":
        checks = verify.run_checks(geometry_only=True)
    else:
        checks = verify.run_checks(
            seed=args.seed, tolerance=args.tolerance,
            perturb_grad=args.perturb_grad, geometry_only=args.geometry_only,
        )
    all_passed = all(c.passed for c in checks)
    _emit({
        "preset": args.config,
        "seed": args.seed,
        "checks": [c.to_dict() for c in checks],
        "all_passed": all_passed,
    })
    return EXIT_OK if all_passed else EXIT_INVARIANT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchopt",
        description="lesion statistics, patch-size selection, and encoder verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-scan and dataset lesion statistics")
    p.add_argument("paths", nargs="+", help=".nii files or directories of them")
    p.add_argument("--dataset-id", default="dataset")
    p.add_argument("--target-label", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=None)
    p.add_argument("--mode", choices=AGGREGATION_MODES, default=None)
    p.add_argument("--config", help="JSON pipeline config file")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("select", help="pick the patch size matching a mean lesion volume")
    p.add_argument("--volume-mm3", type=float)
    p.add_argument("--stats", help="stats report JSON to take the dataset mean from")
    p.add_argument("--spacing", type=_parse_triple, metavar="SX,SY,SZ")
    p.add_argument("--dims", type=lambda t: _parse_triple(t, int), metavar="H,W,L")
    p.add_argument("--candidates", type=_parse_ints, metavar="M1,M2,...")
    p.add_argument("--unit-mode", choices=patch_select.UNIT_MODES)
    p.add_argument("--scale-s", type=float, help="scalar under the cube root in paper-literal mode")
    p.add_argument("--config", help="JSON pipeline config file")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("plan", help="order datasets for pretrain-then-finetune")
    p.add_argument("reports", nargs="+", help="two or more stats report JSON files")
    p.add_argument("--spacing", type=_parse_triple, metavar="SX,SY,SZ")
    p.add_argument("--dims", type=lambda t: _parse_triple(t, int), metavar="H,W,L")
    p.add_argument("--candidates", type=_parse_ints, metavar="M1,M2,...")
    p.add_argument("--unit-mode", choices=patch_select.UNIT_MODES)
    p.add_argument("--scale-s", type=float)
    p.add_argument("--config", help="JSON pipeline config file")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("tokenize", help="patch-embed a seeded random volume")
    p.add_argument("--dims", type=lambda t: _parse_triple(t, int), required=True, metavar="H,W,L")
    p.add_argument("--patch", type=int, required=True)
    p.add_argument("--embed", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write tokens as PTOK binary")
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("forward", help="run the encoder, print checksum and norms")
    p.add_argument("--config", choices=tuple(vit_core.PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokens", help="PTOK token file; otherwise seeded random tokens")
    p.add_argument("--n-tokens", type=int, default=4)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of encoder gradients")
    p.add_argument("--config", choices=tuple(vit_core.PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--n-tokens", type=int, default=4)
    p.add_argument("--perturb-grad", action="store_true", help="inject a fault (negative control)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gradcheck-loss", help="finite-difference check of the loss gradient")
    p.add_argument("--voxels", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck_loss)

    p = sub.add_parser("synth", help="write a phantom volume with analytic lesion volumes")
    p.add_argument("--spec", help="phantom spec JSON (see README for the schema)")
    p.add_argument("--random-lesions", type=int, help="generate a seeded random phantom instead")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="phantom")
    p.add_argument("--dims", type=lambda t: _parse_triple(t, int), metavar="H,W,L")
    p.add_argument("--spacing", type=_parse_triple, metavar="SX,SY,SZ")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--config", choices=tuple(vit_core.PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--perturb-grad", action="store_true", help="inject a fault (negative control)")
    p.add_argument("--geometry-only", action="store_true",
                   help="only geometry and parameter-count checks, no forward pass")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (NiftiError, ValueError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
