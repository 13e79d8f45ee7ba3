"""
End-to-end tests of the echoinr command line
"""

import csv

import numpy as np
import pytest

from echoinr import cli
from echoinr.errors import NumericalAbort
from echoinr.image import load_image
from echoinr.utils import load_model

SMALL_SPEC = """\
width_mm: 2.0
depth_mm: 2.0
dx: 0.05
dz: 0.05
background_mean: 0.05
rng_seed: 3
wires:
  - {center: [1.0, 1.0]}
"""


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    """Run every command from an empty directory so configs/ defaults apply"""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def small_bmode(workdir):
    """40 x 40 echogenicity map and its B-mode rendering"""
    (workdir / "small.yaml").write_text(SMALL_SPEC)
    assert cli.main(["phantom", "gen", "--spec", "small.yaml", "--out", "small_echo.pfm"]) == 0
    assert cli.main(["render", "--echo", "small_echo.pfm", "--out", "small_bmode.pfm"]) == 0
    return workdir / "small_bmode.pfm"


def test_no_arguments_is_usage_error(capsys):
    """Missing subcommand exits with 1"""
    assert cli.main([]) == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_unknown_option_is_usage_error():
    """Unrecognized flags exit with 1"""
    assert cli.main(["phantom", "gen", "--preset", "wires", "--out", "a.pfm", "--bogus"]) == 1


def test_phantom_gen_is_byte_identical(workdir):
    """Same preset and seed write identical files"""
    for name in ("a.pfm", "b.pfm"):
        assert cli.main(["phantom", "gen", "--preset", "wires", "--seed", "7", "--out", name]) == 0
    assert (workdir / "a.pfm").read_bytes() == (workdir / "b.pfm").read_bytes()
    image, metadata = load_image(workdir / "a.pfm")
    assert image.shape == (128, 128)
    assert metadata["seed"] == 7
    assert metadata["wires"] == 12


def test_phantom_gen_preview(workdir):
    """--preview adds an 8-bit PGM next to the PFM"""
    assert cli.main(["phantom", "gen", "--preset", "wires", "--out", "p.pfm", "--preview"]) == 0
    assert (workdir / "p.pgm").exists()


def test_render_zero_noise_matches_noiseless(workdir):
    """--noise-sigma 0 changes nothing"""
    cli.main(["phantom", "gen", "--preset", "wires", "--out", "echo.pfm"])
    assert cli.main(["render", "--echo", "echo.pfm", "--out", "clean.pfm"]) == 0
    args = ["render", "--echo", "echo.pfm", "--noise-sigma", "0", "--seed", "1", "--out", "n.pfm"]
    assert cli.main(args) == 0
    assert (workdir / "clean.pfm").read_bytes() == (workdir / "n.pfm").read_bytes()


def test_rebeam_at_native_frequency_matches_render(workdir):
    """Rebeaming at 8 MHz reproduces the default rendering"""
    cli.main(["phantom", "gen", "--preset", "wires", "--out", "echo.pfm"])
    cli.main(["render", "--echo", "echo.pfm", "--out", "clean.pfm"])
    args = ["render", "rebeam", "--echo", "echo.pfm", "--freq", "8", "--out", "r.pfm"]
    assert cli.main(args) == 0
    assert (workdir / "clean.pfm").read_bytes() == (workdir / "r.pfm").read_bytes()


def test_rebeam_requires_frequency(workdir):
    """rebeam without --freq is a usage error"""
    cli.main(["phantom", "gen", "--preset", "wires", "--out", "echo.pfm"])
    assert cli.main(["render", "rebeam", "--echo", "echo.pfm", "--out", "r.pfm"]) == 1


def test_render_nyquist_violation_exits_1(workdir):
    """A PSF too fine for the map spacing is reported, not crashed on"""
    cli.main(["phantom", "gen", "--preset", "inclusions", "--out", "echo.pfm"])
    (workdir / "psf.yaml").write_text("center_frequency: 12.0\n")
    assert cli.main(["render", "--echo", "echo.pfm", "--psf", "psf.yaml", "--out", "b.pfm"]) == 1


def test_eval_metrics_identical_images(workdir, capsys):
    """An image compared with itself has infinite PSNR and unit SSIM"""
    cli.main(["phantom", "gen", "--preset", "wires", "--out", "echo.pfm"])
    capsys.readouterr()
    args = ["eval", "metrics", "--pred", "echo.pfm", "--gt", "echo.pfm", "--out", "m.csv"]
    assert cli.main(args) == 0
    assert "PSNR: inf dB  SSIM: 1.0000" in capsys.readouterr().out
    with open(workdir / "m.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["pred", "gt", "psnr", "ssim", "dynamic_range"]
    assert rows[1][2] == "inf"


def test_eval_wires_on_ground_truth(workdir, capsys):
    """All twelve wires of the rasterized preset are found"""
    cli.main(["phantom", "gen", "--preset", "wires", "--out", "echo.pfm"])
    args = ["eval", "wires", "--pred", "echo.pfm", "--preset", "wires", "--out", "w.csv"]
    assert cli.main(args) == 0
    assert "matched 12/12 wires" in capsys.readouterr().out
    with open(workdir / "w.csv") as f:
        assert len(list(csv.reader(f))) == 13


def test_deconv_rl(small_bmode, workdir):
    """Richardson-Lucy writes a B-mode estimate of the same size"""
    args = ["deconv", "rl", "--bmode", str(small_bmode), "--iters", "5", "--out", "rl.pfm"]
    assert cli.main(args) == 0
    estimate, metadata = load_image(workdir / "rl.pfm")
    assert estimate.shape == (40, 40)
    assert metadata["iterations"] == 5


def test_deconv_rl_zero_iterations_rejected(small_bmode):
    """--iters 0 fails validation with exit code 1"""
    args = ["deconv", "rl", "--bmode", str(small_bmode), "--iters", "0", "--out", "rl.pfm"]
    assert cli.main(args) == 1


def test_numerical_abort_exits_2(small_bmode, mocker):
    """Non-finite values during a computation map to exit code 2"""
    mocker.patch.object(cli, "rl_deconvolve", side_effect=NumericalAbort("boom", op="rl_update"))
    args = ["deconv", "rl", "--bmode", str(small_bmode), "--out", "rl.pfm"]
    assert cli.main(args) == cli.EXIT_NUMERICAL


def test_deconv_inr_writes_outputs(small_bmode, workdir):
    """INR deconvolution writes the estimate, a checkpoint and the loss history"""
    args = [
        "deconv", "inr", "--bmode", str(small_bmode), "--iterations", "3", "--levels", "4",
        "--table-log2", "10", "--seed", "5", "--out", "inr.pfm",
    ]
    assert cli.main(args) == 0
    estimate, metadata = load_image(workdir / "inr.pfm")
    assert estimate.shape == (40, 40)
    assert np.all(estimate.values >= 0)
    assert metadata["oversample"] == 2
    model, _ = load_model(str(workdir / "inr.npz"))
    assert model.config.levels == 4
    lines = (workdir / "inr_history.csv").read_text().splitlines()
    assert len(lines) == 4


def test_psf_grid_search_single_candidate(small_bmode, workdir):
    """A one-point grid writes that PSF and its score"""
    args = [
        "psf", "grid-search", "--target", str(small_bmode), "--fnum", "2.0:2.0",
        "--cycles", "2:2", "--short-iters", "2", "--seed", "1", "--out", "best.yaml",
    ]
    assert cli.main(args) == 0
    text = (workdir / "best.yaml").read_text()
    assert text.startswith("psf:")
    assert len((workdir / "best.csv").read_text().splitlines()) == 2
    assert (workdir / "best.csv").read_text().startswith("f_number,n_cycles,loss,speckle")
    assert cli.main(args + ["--rank-by", "loss"]) == 0
    assert cli.main(args + ["--rank-by", "fit"]) == cli.EXIT_USAGE


def test_bad_range_is_usage_error(small_bmode):
    """Malformed ranges exit with 1"""
    args = ["psf", "grid-search", "--target", str(small_bmode), "--fnum", "4:1", "--out", "b.yaml"]
    assert cli.main(args) == 1


def test_psf_export(workdir):
    """The exported kernel sums to one"""
    assert cli.main(["psf", "export", "--dx", "0.05", "--dz", "0.05", "--out", "k.pfm"]) == 0
    kernel, metadata = load_image(workdir / "k.pfm")
    assert metadata["kind"] == "psf"
    assert kernel.values.sum() == pytest.approx(1.0, abs=1e-5)


def test_invalid_config_exits_1(workdir, capsys):
    """Config validation errors are reported with their line"""
    (workdir / "bad.yaml").write_text("rl:\n  iterationz: 3\n")
    args = ["psf", "export", "--config", "bad.yaml", "--dx", "0.05", "--dz", "0.05"]
    args += ["--out", "k.pfm"]
    assert cli.main(args) == 1
    assert "bad.yaml:2" in capsys.readouterr().err


def test_deconv_inr_is_byte_identical_for_a_seed(small_bmode, workdir):
    """Two runs with the same seed write identical estimates, checkpoints and histories"""
    for name in ("a", "b"):
        args = [
            "deconv", "inr", "--bmode", str(small_bmode), "--iterations", "4", "--levels", "4",
            "--table-log2", "10", "--seed", "11", "--out", f"{name}/inr.pfm",
        ]
        assert cli.main(args) == 0
    for filename in ("inr.pfm", "inr.npz", "inr_history.csv"):
        first = (workdir / "a" / filename).read_bytes()
        assert first == (workdir / "b" / filename).read_bytes(), filename


def test_phantom_gen_without_seed_uses_spec_seed(workdir, caplog, mocker):
    """Without --seed the spec's own seed is used and logged"""
    (workdir / "small.yaml").write_text(SMALL_SPEC)
    mocker.patch.object(cli, "setup_logging")
    caplog.set_level("INFO")
    assert cli.main(["phantom", "gen", "--spec", "small.yaml", "--out", "echo.pfm"]) == 0
    assert "Phantom seed 3" in caplog.text
    _, metadata = load_image(workdir / "echo.pfm")
    assert metadata["seed"] == 3
