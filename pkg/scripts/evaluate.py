"""
Experiment driver: RL vs INR comparison, PSF grid search and multi-frequency rebeaming
"""

import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from echoinr.config import load_config  # noqa: E402
from echoinr.experiments import compare_methods  # noqa: E402
from echoinr.model import HashGridConfig  # noqa: E402
from echoinr.phantom import (  # noqa: E402
    inclusion_phantom_spec,
    rasterize,
    speckle_phantom_spec,
    wire_phantom_spec,
)
from echoinr.render import decompress, lateral_width_db, rebeam, render  # noqa: E402
from echoinr.train import psf_grid_search  # noqa: E402
from echoinr.utils import parse_range, setup_logging  # noqa: E402


def plot_comparison(result, title, save_path):
    """Ground truth, B-mode and both estimates side by side, all in B-mode space"""
    from echoinr.render import log_compress

    panels = [
        ("Ground truth", log_compress(result.ground_truth).values),
        ("B-mode", result.bmode.values),
        (f"RL ({result.rl_metrics.psnr_text} dB)", result.rl_estimate.values),
        (f"INR ({result.inr_metrics.psnr_text} dB)", log_compress(result.inr_estimate).values),
    ]
    width, depth = result.ground_truth.extent_mm
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    for ax, (name, values) in zip(axes, panels):
        ax.imshow(values, cmap="gray", vmin=0, vmax=1, extent=(0, width, depth, 0))
        ax.set_title(name)
        ax.set_xlabel("x (mm)")
    axes[0].set_ylabel("z (mm)")
    fig.suptitle(title)

    os.makedirs(os.path.dirname(save_path), exist_ok=True)
    fig.savefig(save_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(f"✅ Comparison figure saved to {save_path}")


def plot_loss_history(history, save_path):
    """Total loss per iteration with a 100-iteration moving average"""
    total = history[:, 0]
    window = min(100, len(total))
    smooth = np.convolve(total, np.ones(window) / window, mode="valid")

    plt.figure(figsize=(10, 5))
    plt.semilogy(total, alpha=0.4, label="total")
    plt.semilogy(np.arange(window - 1, len(total)), smooth, label=f"{window}-iteration mean")
    plt.xlabel("Iteration")
    plt.ylabel("Loss")
    plt.legend()
    plt.grid(True, alpha=0.3)

    os.makedirs(os.path.dirname(save_path), exist_ok=True)
    plt.savefig(save_path, dpi=150, bbox_inches="tight")
    plt.close()
    print(f"✅ Loss history saved to {save_path}")


def run_comparisons(config, out_dir):
    """Both desk-scale phantoms; returns a list of summary rows"""
    rows = []
    for name, spec in (("inclusions", inclusion_phantom_spec()), ("wires", wire_phantom_spec())):
        print(f"\nRunning {name} phantom...")
        result = compare_methods(
            spec, config.psf, config.train, config.rl, config.loss, config.hash_grid,
            config.train.dynamic_range,
        )
        plot_comparison(result, f"{name} phantom", os.path.join(out_dir, f"{name}_comparison.png"))
        plot_loss_history(result.report.history, os.path.join(out_dir, f"{name}_loss.png"))
        rows.append((name, result))
    return rows


def run_rebeam(result, config, out_dir, frequencies=(6.0, 8.0, 10.0)):
    """Rebeam the INR estimate of the wire phantom and measure the lateral -6 dB width"""
    estimate = result.inr_estimate
    # deepest wire of the axial column: nothing else shares its row
    wire = wire_phantom_spec().wires[-1]
    row = int(wire.center[1] // estimate.dz)
    widths = []
    fig, axes = plt.subplots(1, len(frequencies), figsize=(4 * len(frequencies), 4))
    for ax, frequency in zip(axes, frequencies):
        bmode = rebeam(estimate, config.psf, frequency, config.train.dynamic_range)
        profile = decompress(bmode, config.train.dynamic_range).values[row]
        widths.append(lateral_width_db(profile, estimate.dx))
        ax.imshow(bmode.values, cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"{frequency:g} MHz, -6 dB width {widths[-1]:.3f} mm")
    path = os.path.join(out_dir, "rebeam.png")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(f"✅ Rebeam figure saved to {path}")
    return widths


def main(args):
    """Main evaluation function"""

    # Load configuration
    config = load_config(args.config)
    setup_logging(config.monitoring.log_level, config.monitoring.log_file)

    # Override config with command line arguments
    if args.iterations:
        config = config.model_copy(
            update={"train": config.train.model_copy(update={"iterations": args.iterations})}
        )
    if args.seed is not None:
        config = config.model_copy(
            update={"train": config.train.model_copy(update={"seed": args.seed})}
        )

    results = run_comparisons(config, args.out_dir)

    print("\n" + "=" * 60)
    print("COMPARISON RESULTS")
    print("=" * 60)
    for name, result in results:
        rl, inr = result.rl_metrics, result.inr_metrics
        print(f"{name:>10}  RL : PSNR {rl.psnr_text:>8} dB  SSIM {rl.ssim:.4f}")
        print(f"{'':>10}  INR: PSNR {inr.psnr_text:>8} dB  SSIM {inr.ssim:.4f}")
        if result.inr_match is not None:
            print(
                f"{'':>10}  wires: INR {result.inr_wires.detected} clusters "
                f"({result.inr_match.matched} matched), B-mode {result.bmode_wires.detected}"
            )
    print("=" * 60)

    wires = dict(results)["wires"]
    widths = run_rebeam(wires, config, args.out_dir)
    print("\n📊 -6 dB widths at 6/8/10 MHz: " + ", ".join(f"{w:.3f} mm" for w in widths))

    if args.grid_search:
        print("\nRunning PSF grid search on a speckle patch...")
        dr = config.train.dynamic_range
        patch = render(rasterize(speckle_phantom_spec()), config.psf, dr)
        search = psf_grid_search(
            patch, config.psf, parse_range("1.0:4.0:0.5"), parse_range("1:5", integer=True),
            short_iters=args.short_iters, cfg=config.train,
            grid_config=HashGridConfig(levels=8, table_size=2**14), workers=args.workers,
        )
        search.to_csv(os.path.join(args.out_dir, "grid_search.csv"))
        print(f"📊 Best PSF: f#={search.best.f_number:g} cycles={search.best.n_cycles}")

    print("\n✨ Evaluation complete!")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the deconvolution experiments")
    parser.add_argument("--config", type=str, default=None, help="Path to config file")
    parser.add_argument("--out-dir", type=str, default="runs/eval", help="Output directory")
    parser.add_argument("--iterations", type=int, default=None, help="INR iterations")
    parser.add_argument("--seed", type=int, default=None, help="Random seed")
    parser.add_argument("--grid-search", action="store_true", help="Also run the PSF grid search")
    parser.add_argument("--short-iters", type=int, default=500, help="Iterations per candidate")
    parser.add_argument("--workers", type=int, default=1, help="Concurrent grid-search fits")

    args = parser.parse_args()
    main(args)
