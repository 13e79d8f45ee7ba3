"""
Command-line interface

Exit codes: 0 success, 1 usage or validation error, 2 numerical abort.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from echoinr.config import (
    RunConfig,
    RuntimeSettings,
    dump_model,
    load_config,
    load_phantom_spec,
    load_psf,
)
from echoinr.errors import EchoInrError, NumericalAbort
from echoinr.experiments import compare_methods
from echoinr.image import load_image, save_image
from echoinr.losses import LossWeights
from echoinr.metrics import evaluate_pair, match_wires, wire_clusters
from echoinr.model import HashGridConfig, InrModel
from echoinr.phantom import PRESETS, PhantomSpec, rasterize
from echoinr.psf import build_kernel
from echoinr.render import add_noise, convolve_psf, log_compress, rebeam
from echoinr.rl import RlConfig, rl_deconvolve
from echoinr.tensorgraph import set_default_dtype
from echoinr.train import TrainConfig, make_sampling, psf_grid_search, train
from echoinr.utils import (
    count_parameters,
    ensure_parent,
    parse_range,
    resolve_seed,
    save_model,
    setup_logging,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse variant that reports usage errors with exit code 1 instead of 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=str, default=None, help="Path to config file")
    parser.add_argument(
        "--seed", type=int, default=None, help="Random seed (drawn and logged if omitted)"
    )
    parser.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING, ...")
    parser.add_argument("--dtype", choices=["float64", "float32"], default="float64",
                        help="Scalar type of the tensors")
    return parser


def _add_image_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=str, required=True, help="Output PFM path")
    parser.add_argument("--preview", action="store_true", help="Also write an 8-bit PGM preview")


def _add_spacing(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dx", type=float, default=None, help="Lateral pixel spacing (mm)")
    parser.add_argument("--dz", type=float, default=None, help="Axial pixel spacing (mm)")


def _add_phantom_source(parser: argparse.ArgumentParser, required: bool) -> None:
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument("--spec", type=str, help="Phantom spec YAML")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Built-in phantom")


def _actions(parser: argparse.ArgumentParser):
    return parser.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)


def build_parser() -> ArgumentParser:
    common = _common()
    parser = ArgumentParser(
        prog="echoinr", description="Ultrasound deconvolution with implicit neural representations"
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    # phantom
    phantom = commands.add_parser("phantom", help="Synthetic phantoms")
    phantom_actions = _actions(phantom)
    gen = phantom_actions.add_parser("gen", parents=[common], help="Rasterize a phantom spec")
    _add_phantom_source(gen, required=True)
    _add_image_out(gen)

    # render
    render = commands.add_parser("render", parents=[common], help="Simulate a B-mode image")
    render.add_argument("action", nargs="?", choices=["rebeam"], help="Re-render at --freq")
    render.add_argument("--echo", type=str, required=True, help="Echogenicity map PFM")
    render.add_argument("--psf", type=str, default=None, help="PSF parameter YAML")
    render.add_argument("--noise-sigma", type=float, default=0.0, help="Envelope noise sigma")
    render.add_argument("--freq", type=float, default=None, help="Rebeam frequency (MHz)")
    render.add_argument("--dr", type=float, default=None, help="Dynamic range (dB)")
    render.add_argument("--eps", type=float, default=None, help="Log compression floor")
    _add_spacing(render)
    _add_image_out(render)

    # deconv
    deconv = commands.add_parser("deconv", help="Deconvolve a B-mode image")
    deconv_actions = _actions(deconv)
    rl = deconv_actions.add_parser("rl", parents=[common], help="Richardson-Lucy")
    rl.add_argument("--bmode", type=str, required=True, help="B-mode PFM or PGM")
    rl.add_argument("--psf", type=str, default=None, help="PSF parameter YAML")
    rl.add_argument("--iters", type=int, default=None, help="Iterations")
    rl.add_argument("--eps", type=float, default=None, help="Division guard")
    rl.add_argument("--linear", action="store_true", help="Deconvolve the envelope")
    rl.add_argument("--dr", type=float, default=None, help="Dynamic range (dB)")
    _add_spacing(rl)
    _add_image_out(rl)

    inr = deconv_actions.add_parser("inr", parents=[common], help="Implicit neural representation")
    inr.add_argument("--bmode", type=str, required=True, help="B-mode PFM or PGM")
    inr.add_argument("--psf", type=str, default=None, help="PSF parameter YAML")
    inr.add_argument("--iterations", type=int, default=None, help="Training iterations")
    inr.add_argument("--learning-rate", type=float, default=None, help="Adam learning rate")
    inr.add_argument("--oversample", type=int, default=None, help="Subsamples per pixel axis")
    inr.add_argument("--no-jitter", action="store_true", help="Sample subcell centers only")
    inr.add_argument("--lambda", dest="ssim_weight", type=float, default=None, help="SSIM weight")
    inr.add_argument("--tv", type=float, default=None, help="TV weight")
    inr.add_argument("--l2-sum", action="store_true", help="Sum squared errors")
    inr.add_argument("--table-log2", type=int, default=None, help="log2 of the hash table size")
    inr.add_argument("--levels", type=int, default=None, help="Resolution levels")
    inr.add_argument("--dr", type=float, default=None, help="Dynamic range (dB)")
    inr.add_argument("--checkpoint", type=str, default=None, help="Checkpoint path (.npz)")
    inr.add_argument("--history", type=str, default=None, help="Loss history CSV")
    _add_spacing(inr)
    _add_image_out(inr)

    # psf
    psf = commands.add_parser("psf", help="PSF utilities")
    psf_actions = _actions(psf)
    search = psf_actions.add_parser("grid-search", parents=[common], help="Fit f-number, cycles")
    search.add_argument("--target", type=str, required=True, help="B-mode PFM")
    search.add_argument("--psf", type=str, default=None, help="Base PSF parameter YAML")
    search.add_argument("--fnum", type=str, default="1.0:4.0:0.5", help="f-number start:stop:step")
    search.add_argument("--cycles", type=str, default="1:5", help="Cycle range start:stop")
    search.add_argument("--short-iters", type=int, default=500, help="Iterations per candidate")
    search.add_argument("--workers", type=int, default=1, help="Concurrent candidate fits")
    search.add_argument(
        "--rank-by", choices=["speckle", "loss"], default="speckle", help="Candidate ranking"
    )
    search.add_argument("--scores", type=str, default=None, help="Score table CSV")
    search.add_argument("--out", type=str, required=True, help="Best PSF YAML")
    _add_spacing(search)

    export = psf_actions.add_parser("export", parents=[common], help="Write the discretized kernel")
    export.add_argument("--psf", type=str, default=None, help="PSF parameter YAML")
    export.add_argument("--dx", type=float, required=True, help="Lateral spacing (mm)")
    export.add_argument("--dz", type=float, required=True, help="Axial spacing (mm)")
    _add_image_out(export)

    # eval
    evaluate = commands.add_parser("eval", help="Evaluation")
    eval_actions = _actions(evaluate)
    metrics = eval_actions.add_parser("metrics", parents=[common], help="PSNR and SSIM")
    metrics.add_argument("--pred", type=str, required=True, help="Estimate PFM")
    metrics.add_argument("--gt", type=str, required=True, help="Reference PFM")
    metrics.add_argument("--dr", type=float, default=None, help="Dynamic range (dB)")
    metrics.add_argument("--pred-space", choices=["auto", "echo", "bmode"], default="auto")
    metrics.add_argument("--gt-space", choices=["auto", "echo", "bmode"], default="auto")
    metrics.add_argument("--out", type=str, default=None, help="CSV report")

    wires = eval_actions.add_parser("wires", parents=[common], help="Wire target analysis")
    wires.add_argument("--pred", type=str, required=True, help="Estimate PFM")
    _add_phantom_source(wires, required=True)
    wires.add_argument("--threshold", type=float, default=0.2, help="Fraction of the maximum")
    wires.add_argument("--min-pixels", type=int, default=3, help="Noise filter size")
    wires.add_argument("--tol", type=float, default=0.2, help="Matching tolerance (mm)")
    wires.add_argument("--out", type=str, default=None, help="CSV report")

    compare = eval_actions.add_parser("compare", parents=[common], help="RL vs INR on a phantom")
    _add_phantom_source(compare, required=True)
    compare.add_argument("--psf", type=str, default=None, help="PSF parameter YAML")
    compare.add_argument("--iterations", type=int, default=None, help="INR iterations")
    compare.add_argument("--dr", type=float, default=None, help="Dynamic range (dB)")
    compare.add_argument("--out-dir", type=str, required=True, help="Output directory")
    return parser


# Command implementations


def _psf(args, config: RunConfig):
    return load_psf(args.psf) if getattr(args, "psf", None) else config.psf


def _dr(args, config: RunConfig) -> float:
    return args.dr if getattr(args, "dr", None) is not None else config.train.dynamic_range


def _phantom_spec(args, seed: Optional[int]) -> PhantomSpec:
    spec = load_phantom_spec(args.spec) if args.spec else PRESETS[args.preset]()
    if seed is not None:
        spec = spec.model_copy(update={"rng_seed": seed})
    return spec


def _image_space(metadata: dict, requested: str) -> str:
    if requested != "auto":
        return requested
    return "bmode" if metadata.get("kind") == "bmode" else "echo"


def cmd_phantom_gen(args, config: RunConfig) -> int:
    spec = _phantom_spec(args, args.seed)
    logger.info("Phantom seed %d", spec.rng_seed)
    echo = rasterize(spec)
    save_image(
        args.out, echo,
        metadata={"kind": "echogenicity", "seed": spec.rng_seed,
                  "wires": len(spec.wires), "inclusions": len(spec.inclusions)},
        preview=args.preview or config.io.preview,
    )
    print(f"✅ Phantom {echo.shape[0]}x{echo.shape[1]} written to {args.out}")
    return EXIT_OK


def cmd_render(args, config: RunConfig) -> int:
    echo, _ = load_image(args.echo, args.dx, args.dz)
    params = _psf(args, config)
    dr = _dr(args, config)
    eps = args.eps if args.eps is not None else config.train.log_eps

    if args.action == "rebeam":
        if args.freq is None:
            raise UsageError("render rebeam requires --freq")
        bmode = rebeam(echo, params, args.freq, dr, eps)
        frequency = args.freq
    else:
        envelope = convolve_psf(echo, build_kernel(params, echo.dx, echo.dz))
        if args.noise_sigma > 0:
            seed = resolve_seed(args.seed if args.seed is not None else config.seed)
            envelope = add_noise(envelope, args.noise_sigma, np.random.default_rng(seed))
        bmode = log_compress(envelope, dr, eps)
        frequency = params.center_frequency

    save_image(
        args.out, bmode,
        metadata={"kind": "bmode", "dynamic_range": dr, "center_frequency": frequency},
        preview=args.preview or config.io.preview,
    )
    print(f"✅ B-mode at {frequency:g} MHz written to {args.out}")
    return EXIT_OK


def cmd_deconv_rl(args, config: RunConfig) -> int:
    bmode, _ = load_image(args.bmode, args.dx, args.dz)
    bmode = bmode.with_values(np.clip(bmode.values, 0.0, 1.0))
    params = _psf(args, config)

    # Override config with command line arguments
    overrides = {}
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.eps is not None:
        overrides["eps"] = args.eps
    if args.linear:
        overrides["linear"] = True
    if args.dr is not None:
        overrides["dynamic_range"] = args.dr
    rl_cfg = RlConfig.model_validate({**config.rl.model_dump(), **overrides})

    residuals: List[float] = []
    estimate = rl_deconvolve(bmode, build_kernel(params, bmode.dx, bmode.dz), rl_cfg, residuals)
    save_image(
        args.out, estimate,
        metadata={"kind": "bmode", "method": "rl", "iterations": rl_cfg.iterations,
                  "dynamic_range": rl_cfg.dynamic_range},
        preview=args.preview or config.io.preview,
    )
    print(f"✅ Richardson-Lucy ({rl_cfg.iterations} iterations, final residual "
          f"{residuals[-1]:.5f}) written to {args.out}")
    return EXIT_OK


def cmd_deconv_inr(args, config: RunConfig) -> int:
    target, _ = load_image(args.bmode, args.dx, args.dz)
    target = target.with_values(np.clip(target.values, 0.0, 1.0))
    params = _psf(args, config)
    seed = resolve_seed(args.seed if args.seed is not None else config.seed)
    out = Path(args.out)
    checkpoint = args.checkpoint or str(out.with_suffix(".npz"))
    history = args.history or str(out.with_name(out.stem + "_history.csv"))

    # Override config with command line arguments
    train_overrides = {"seed": seed, "checkpoint_path": checkpoint}
    if args.iterations is not None:
        train_overrides["iterations"] = args.iterations
    if args.learning_rate is not None:
        train_overrides["learning_rate"] = args.learning_rate
    if args.oversample is not None:
        train_overrides["oversample"] = args.oversample
    if args.no_jitter:
        train_overrides["jitter"] = False
    if args.dr is not None:
        train_overrides["dynamic_range"] = args.dr
    train_cfg = TrainConfig.model_validate({**config.train.model_dump(), **train_overrides})

    loss_overrides = {}
    if args.ssim_weight is not None:
        loss_overrides["ssim_weight"] = args.ssim_weight
    if args.tv is not None:
        loss_overrides["tv_weight"] = args.tv
    if args.l2_sum:
        loss_overrides["l2_reduction"] = "sum"
    weights = LossWeights.model_validate({**config.loss.model_dump(), **loss_overrides})

    grid_overrides = {}
    if args.table_log2 is not None:
        grid_overrides["table_size"] = 2**args.table_log2
    if args.levels is not None:
        grid_overrides["levels"] = args.levels
    grid = HashGridConfig.model_validate({**config.hash_grid.model_dump(), **grid_overrides})

    sampling = make_sampling(target, train_cfg, params)
    kernel = build_kernel(params, sampling.fine_dx, sampling.fine_dz)
    model = InrModel(grid.for_grid(*sampling.fine_shape), seed=seed)
    print(f"Model parameters: {count_parameters(model):,} (oversample {sampling.oversample})")

    report = train(target, kernel, model, train_cfg, weights, sampling)

    estimate = report.estimate()
    save_image(
        args.out, estimate,
        metadata={"kind": "echogenicity", "method": "inr", "seed": seed,
                  "iterations": train_cfg.iterations, "oversample": sampling.oversample},
        preview=args.preview or config.io.preview,
    )
    save_model(model, checkpoint, metadata={"iterations": train_cfg.iterations, "seed": seed})
    report.to_csv(str(ensure_parent(history)))
    print(f"✅ INR estimate written to {args.out} (final loss {report.final_loss:.5f})")
    return EXIT_OK


def cmd_psf_grid_search(args, config: RunConfig) -> int:
    target, _ = load_image(args.target, args.dx, args.dz)
    target = target.with_values(np.clip(target.values, 0.0, 1.0))
    base = _psf(args, config)
    seed = resolve_seed(args.seed if args.seed is not None else config.seed)
    f_numbers = parse_range(args.fnum)
    cycles = parse_range(args.cycles, integer=True)
    print(f"Grid search over {len(f_numbers) * len(cycles)} candidates")

    result = psf_grid_search(
        target, base, f_numbers, cycles,
        short_iters=args.short_iters,
        cfg=config.train.model_copy(update={"seed": seed}),
        weights=config.loss,
        workers=args.workers,
        rank_by=args.rank_by,
    )
    dump_model(result.best, args.out, section="psf")
    scores = args.scores or str(Path(args.out).with_suffix(".csv"))
    result.to_csv(str(ensure_parent(scores)))
    print(f"✅ Best PSF f#={result.best.f_number:g} cycles={result.best.n_cycles} "
          f"written to {args.out}")
    return EXIT_OK


def cmd_psf_export(args, config: RunConfig) -> int:
    kernel = build_kernel(_psf(args, config), args.dx, args.dz)
    save_image(args.out, kernel.to_image(), metadata={"kind": "psf"}, preview=args.preview)
    print(f"✅ PSF kernel {kernel.shape[0]}x{kernel.shape[1]} written to {args.out}")
    return EXIT_OK


def _write_csv(path: str, header: List[str], rows: List[List]) -> None:
    with open(ensure_parent(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_eval_metrics(args, config: RunConfig) -> int:
    pred, pred_meta = load_image(args.pred)
    gt, gt_meta = load_image(args.gt)
    record = evaluate_pair(
        pred, gt, _dr(args, config),
        _image_space(pred_meta, args.pred_space), _image_space(gt_meta, args.gt_space),
        pred_id=Path(args.pred).name, gt_id=Path(args.gt).name,
    )
    print(f"PSNR: {record.psnr_text} dB  SSIM: {record.ssim:.4f}")
    if args.out:
        _write_csv(args.out, ["pred", "gt", "psnr", "ssim", "dynamic_range"], [record.row()])
    return EXIT_OK


def cmd_eval_wires(args, config: RunConfig) -> int:
    pred, _ = load_image(args.pred)
    spec = _phantom_spec(args, None)
    report = wire_clusters(pred, args.threshold, args.min_pixels)
    match = match_wires(report, spec, args.tol)
    print(f"Detected {report.detected} clusters, matched {match.matched}/{len(spec.wires)} wires")
    print(f"Mean radius {report.mean_radius:.4f} mm (std {report.radius_std:.4f}), "
          f"mean localization error {match.mean_error:.4f} mm")
    if args.out:
        rows = [[f"{c.center[0]:.6f}", f"{c.center[1]:.6f}", f"{c.radius:.6f}", c.pixel_count]
                for c in report.clusters]
        _write_csv(args.out, ["x_mm", "z_mm", "radius_mm", "pixels"], rows)
    return EXIT_OK


def cmd_eval_compare(args, config: RunConfig) -> int:
    seed = resolve_seed(args.seed if args.seed is not None else config.seed)
    spec = _phantom_spec(args, seed)
    train_cfg = config.train.model_copy(update={"seed": seed})
    if args.iterations is not None:
        train_cfg = train_cfg.model_copy(update={"iterations": args.iterations})
    dr = _dr(args, config)

    result = compare_methods(
        spec, _psf(args, config), train_cfg, config.rl, config.loss, config.hash_grid, dr
    )

    out_dir = Path(args.out_dir)
    save_image(out_dir / "ground_truth.pfm", result.ground_truth, {"kind": "echogenicity"})
    save_image(out_dir / "bmode.pfm", result.bmode, {"kind": "bmode", "dynamic_range": dr})
    save_image(out_dir / "rl.pfm", result.rl_estimate, {"kind": "bmode", "method": "rl"})
    save_image(out_dir / "inr.pfm", result.inr_estimate, {"kind": "echogenicity", "method": "inr"})
    result.report.to_csv(str(out_dir / "inr_history.csv"))
    _write_csv(
        str(out_dir / "metrics.csv"),
        ["pred", "gt", "psnr", "ssim", "dynamic_range"],
        [result.rl_metrics.row(), result.inr_metrics.row()],
    )
    print(f"RL : PSNR {result.rl_metrics.psnr_text} dB  SSIM {result.rl_metrics.ssim:.4f}")
    print(f"INR: PSNR {result.inr_metrics.psnr_text} dB  SSIM {result.inr_metrics.ssim:.4f}")
    if result.inr_match is not None:
        print(
            f"Wires: INR {result.inr_wires.detected} clusters "
            f"({result.inr_match.matched} matched), B-mode {result.bmode_wires.detected} clusters"
        )
    print(f"✅ Comparison written to {out_dir}")
    return EXIT_OK


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("render", None): cmd_render,
    ("render", "rebeam"): cmd_render,
    ("deconv", "rl"): cmd_deconv_rl,
    ("deconv", "inr"): cmd_deconv_inr,
    ("psf", "grid-search"): cmd_psf_grid_search,
    ("psf", "export"): cmd_psf_export,
    ("eval", "metrics"): cmd_eval_metrics,
    ("eval", "wires"): cmd_eval_wires,
    ("eval", "compare"): cmd_eval_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"echoinr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        config = load_config(args.config)
        settings = RuntimeSettings()
        setup_logging(
            args.log_level or settings.log_level or config.monitoring.log_level,
            settings.log_file or config.monitoring.log_file,
        )
        set_default_dtype(args.dtype)
        return COMMANDS[(args.command, args.action)](args, config)
    except NumericalAbort as exc:
        logger.error("Numerical abort: %s", exc)
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, EchoInrError, ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
