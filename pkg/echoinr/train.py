"""
Training loop for the echogenicity INR and PSF grid-search calibration
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from echoinr.errors import DomainError, NumericalAbort
from echoinr.image import Image2D
from echoinr.losses import LossWeights, total_loss
from echoinr.model import HashGridConfig, InrModel, SamplingSpec, estimate_map, sample_grid
from echoinr.optim import Adam
from echoinr.psf import PsfKernel, PsfParams, build_kernel
from echoinr.render import DEFAULT_DYNAMIC_RANGE, DEFAULT_LOG_EPS, decompress, render_bmode
from echoinr.tensorgraph import Tape, Tensor
from echoinr.utils import AverageMeter, derive_seed, format_time, save_model

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("total", "ssim", "l2", "tv")


class TrainConfig(BaseModel):
    """Optimizer and rendering settings of one training run"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(0.01, gt=0)
    iterations: int = Field(5000, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    oversample: Optional[int] = Field(None, ge=1)
    jitter: bool = True
    dynamic_range: float = Field(DEFAULT_DYNAMIC_RANGE, gt=0)
    log_eps: float = Field(DEFAULT_LOG_EPS, gt=0)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    checkpoint_path: Optional[str] = None


@dataclass
class TrainReport:
    """Per-iteration loss history (columns total, ssim, l2, tv) and the trained model"""

    history: np.ndarray
    wall_clock: float
    model: InrModel
    sampling: SamplingSpec

    @property
    def final_loss(self) -> float:
        return float(self.history[-1, 0])

    def tail_loss(self, fraction: float = 0.05) -> float:
        """Mean total loss over the last fraction of iterations (damps jitter noise)"""
        count = max(1, int(len(self.history) * fraction))
        return float(self.history[-count:, 0].mean())

    def estimate(self) -> Image2D:
        return estimate_map(self.model, self.sampling)

    def to_csv(self, path: str) -> None:
        iterations = np.arange(len(self.history))[:, None]
        np.savetxt(
            path,
            np.hstack([iterations, self.history]),
            delimiter=",",
            header="iteration," + ",".join(HISTORY_COLUMNS),
            comments="",
            fmt=["%d"] + ["%.17g"] * len(HISTORY_COLUMNS),
        )


def auto_oversample(dx: float, dz: float, params: PsfParams) -> int:
    """Smallest o with max(dx, dz) / o <= lambda / 4"""
    return max(1, int(math.ceil(max(dx, dz) / (params.wavelength / 4.0) - 1e-9)))


def make_sampling(
    target: Image2D, cfg: TrainConfig, params: Optional[PsfParams] = None
) -> SamplingSpec:
    """Pixel grid of the target with the configured (or automatic) oversampling"""
    if cfg.oversample is not None:
        oversample = cfg.oversample
    elif params is not None:
        oversample = auto_oversample(target.dx, target.dz, params)
    else:
        oversample = 1
    return SamplingSpec.for_image(
        target, oversample=oversample, jitter=cfg.jitter, rng_seed=cfg.seed
    )


def train(
    target: Image2D,
    kernel: PsfKernel,
    model: InrModel,
    cfg: TrainConfig,
    weights: Optional[LossWeights] = None,
    sampling: Optional[SamplingSpec] = None,
) -> TrainReport:
    """
    Fit the INR so that its rendered B-mode matches the target

    Args:
        target: Observed B-mode image with values in [0, 1]
        kernel: PSF sampled at the fine (oversampled) spacing
        model: Model to optimize in place
        cfg: Optimizer and rendering settings
        weights: Loss term weights
        sampling: Grid description; derived from target and kernel when omitted

    Returns:
        TrainReport with the loss history
    """
    weights = weights or LossWeights()
    if sampling is None:
        oversample = cfg.oversample or max(1, int(round(target.dx / kernel.dx)))
        sampling = SamplingSpec.for_image(
            target, oversample=oversample, jitter=cfg.jitter, rng_seed=cfg.seed
        )
    if (sampling.rows, sampling.cols) != target.shape:
        raise DomainError(f"Sampling grid {sampling.rows}x{sampling.cols} != target {target.shape}")
    if not kernel.matches(sampling.fine_dx, sampling.fine_dz):
        raise DomainError(
            f"PSF sampled at dx={kernel.dx:.4g}, dz={kernel.dz:.4g} mm but the fine grid uses "
            f"dx={sampling.fine_dx:.4g}, dz={sampling.fine_dz:.4g} mm"
        )

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    target_tensor = Tensor(target.values)
    history = np.empty((cfg.iterations, len(HISTORY_COLUMNS)))
    losses = AverageMeter()

    start_time = time.time()
    for iteration in range(cfg.iterations):
        with Tape() as tape:
            fine = sample_grid(model, sampling, rng)
            pred = render_bmode(fine, kernel, sampling.oversample, cfg.dynamic_range, cfg.log_eps)
            terms = total_loss(pred, target_tensor, fine, weights)

        values = terms.as_floats()
        if not np.isfinite(values[0]):
            found = tape.first_non_finite()
            op = found[1] if found else None
            raise NumericalAbort(
                f"Non-finite loss at iteration {iteration}; first non-finite tensor "
                f"produced by op '{op}'",
                op=op,
                iteration=iteration,
            )

        optimizer.zero_grad()
        tape.backward(terms.total)
        optimizer.step()

        history[iteration] = values
        losses.update(values[0])
        if (iteration + 1) % cfg.log_every == 0:
            logger.info(
                "Iteration [%d/%d] loss %.5f (avg %.5f) ssim %.4f l2 %.5f tv %.5f",
                iteration + 1, cfg.iterations, values[0], losses.avg, *values[1:],
            )
            losses.reset()
        due = cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0
        if due and cfg.checkpoint_path:
            save_model(model, cfg.checkpoint_path, metadata={"iteration": iteration + 1})

    wall_clock = time.time() - start_time
    logger.info(
        "Training finished: %d iterations in %s, final loss %.5f",
        cfg.iterations, format_time(wall_clock), history[-1, 0],
    )
    return TrainReport(history=history, wall_clock=wall_clock, model=model, sampling=sampling)


# PSF grid search

RANKINGS = ("speckle", "loss")


def axis_autocorrelation(values: np.ndarray, axis: int, max_lag: int) -> np.ndarray:
    """
    Normalized autocovariance of a field along one axis for lags 1..max_lag

    Args:
        values: 2-D field
        axis: 0 (axial) or 1 (lateral)
        max_lag: Largest lag in samples

    Returns:
        (max_lag,) array; NaN when the field is constant
    """
    centered = values - values.mean()
    power = float(np.mean(centered * centered))
    if power == 0.0:
        return np.full(max_lag, np.nan)
    n = centered.shape[axis]
    lags = np.empty(max_lag)
    for lag in range(1, max_lag + 1):
        head = np.take(centered, np.arange(n - lag), axis=axis)
        tail = np.take(centered, np.arange(lag, n), axis=axis)
        lags[lag - 1] = float(np.mean(head * tail)) / power
    return lags


def profile_autocorrelation(profile: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation of a 1-D kernel profile for lags 1..max_lag, zero past it"""
    full = np.correlate(profile, profile, mode="full")
    center = profile.size - 1
    lags = np.zeros(max_lag)
    available = full[center + 1 : center + 1 + max_lag] / full[center]
    lags[: available.size] = available
    return lags


@dataclass(frozen=True)
class SpeckleWindow:
    """Crop margins and lag counts shared by every candidate of one search"""

    margin_rows: int
    margin_cols: int
    lag_rows: int
    lag_cols: int

    @classmethod
    def for_search(cls, shape, base: PsfKernel, widest: Sequence[PsfKernel]) -> "SpeckleWindow":
        rows, cols = shape
        base_rows, base_cols = base.center
        margin_rows = min(base_rows, rows // 4)
        margin_cols = min(base_cols, cols // 4)
        lag_rows = min(max(k.center[0] for k in widest), (rows - 2 * margin_rows) // 3)
        lag_cols = min(max(k.center[1] for k in widest), (cols - 2 * margin_cols) // 3)
        return cls(margin_rows, margin_cols, max(lag_rows, 0), max(lag_cols, 0))

    def crop(self, values: np.ndarray) -> np.ndarray:
        rows, cols = values.shape
        return values[
            self.margin_rows : rows - self.margin_rows, self.margin_cols : cols - self.margin_cols
        ]


def speckle_mismatch(
    target: Image2D, kernel: PsfKernel, window: SpeckleWindow, dynamic_range: float
) -> float:
    """
    Squared distance between the speckle correlation of a B-mode and the one a kernel predicts

    For i.i.d. scatterers the envelope h * s has the autocovariance of h, so along each
    axis the normalized autocovariance of the decompressed target should follow the
    autocorrelation of the kernel's axis profile. The target should be a speckle region.

    Args:
        target: B-mode image in [0, 1]
        kernel: Candidate PSF sampled at the target spacing
        window: Margins and lags of the comparison
        dynamic_range: dB range used to decompress the target

    Returns:
        Sum of squared differences over the axial and lateral lags (NaN if undefined)
    """
    envelope = window.crop(decompress(target, dynamic_range).values)
    mismatch = 0.0
    if window.lag_rows:
        measured = axis_autocorrelation(envelope, 0, window.lag_rows)
        predicted = profile_autocorrelation(kernel.values.sum(axis=1), window.lag_rows)
        mismatch += float(np.sum((measured - predicted) ** 2))
    if window.lag_cols:
        measured = axis_autocorrelation(envelope, 1, window.lag_cols)
        predicted = profile_autocorrelation(kernel.values.sum(axis=0), window.lag_cols)
        mismatch += float(np.sum((measured - predicted) ** 2))
    if not (window.lag_rows or window.lag_cols):
        return math.nan
    return mismatch


@dataclass(frozen=True)
class GridScore:
    f_number: float
    n_cycles: int
    loss: float
    speckle: float


@dataclass
class GridSearchResult:
    best: PsfParams
    scores: List[GridScore]
    rank_by: str = "speckle"

    def ranking(self) -> np.ndarray:
        """Score of every candidate under the active ranking, lower is better"""
        return np.array([getattr(s, self.rank_by) for s in self.scores])

    def score_of(self, f_number: float, n_cycles: int) -> float:
        for s, value in zip(self.scores, self.ranking()):
            if math.isclose(s.f_number, f_number) and s.n_cycles == n_cycles:
                return float(value)
        raise KeyError(f"No candidate f#={f_number} cycles={n_cycles}")

    def to_csv(self, path: str) -> None:
        table = np.array([[s.f_number, s.n_cycles, s.loss, s.speckle] for s in self.scores])
        np.savetxt(
            path, table, delimiter=",", header="f_number,n_cycles,loss,speckle", comments="",
            fmt=["%.4g", "%d", "%.17g", "%.17g"],
        )


def psf_grid_search(
    target: Image2D,
    base: PsfParams,
    f_numbers: Sequence[float],
    cycles: Sequence[int],
    short_iters: int = 500,
    cfg: Optional[TrainConfig] = None,
    grid_config: Optional[HashGridConfig] = None,
    weights: Optional[LossWeights] = None,
    workers: int = 1,
    rank_by: str = "speckle",
) -> GridSearchResult:
    """
    Score every (f-number, cycles) pair and keep the best

    Each candidate trains a fresh model seeded from (cfg.seed, candidate index),
    so results do not depend on ``workers``; its ``loss`` is the mean total loss over
    the last 5% of iterations. Its ``speckle`` score compares the speckle correlation
    of the target with the one the candidate kernel predicts. The fit loss keeps
    falling as the kernel narrows (a narrow kernel and a smoothed map reproduce any
    wider blur), so candidates are ranked by ``speckle`` unless ``rank_by="loss"``.
    Ties keep the first candidate in grid order.

    Args:
        target: Observed B-mode image, ideally a target-free speckle region
        base: PSF parameters whose other fields stay fixed
        f_numbers: Candidate f-numbers
        cycles: Candidate pulse lengths in cycles
        short_iters: Iterations per candidate
        cfg: Training settings (iterations are replaced by short_iters)
        grid_config: Encoding of the per-candidate models
        weights: Loss weights
        workers: Candidate fits run concurrently on this many threads
        rank_by: 'speckle' or 'loss'

    Returns:
        GridSearchResult with the argmin and the full score table
    """
    if not f_numbers or not cycles:
        raise ValueError("Grid search needs at least one f-number and one cycle count")
    if rank_by not in RANKINGS:
        raise ValueError(f"Unknown ranking {rank_by!r}; use one of {', '.join(RANKINGS)}")
    cfg = cfg or TrainConfig()
    grid_config = grid_config or HashGridConfig(levels=8, table_size=2**14)
    candidates = [(float(f), int(c)) for f in f_numbers for c in cycles]
    sampling = make_sampling(target, cfg, base)
    fine_grid = grid_config.for_grid(*sampling.fine_shape)

    def candidate_params(f_number: float, n_cycles: int) -> PsfParams:
        return base.model_copy(update={"f_number": f_number, "n_cycles": n_cycles})

    def pixel_kernel(params: PsfParams) -> PsfKernel:
        return build_kernel(params, target.dx, target.dz, enforce_nyquist=False)

    widest = [pixel_kernel(candidate_params(max(f_numbers), max(cycles)))]
    window = SpeckleWindow.for_search(target.shape, pixel_kernel(base), widest)

    def run(index: int) -> GridScore:
        f_number, n_cycles = candidates[index]
        params = candidate_params(f_number, n_cycles)
        kernel = build_kernel(params, sampling.fine_dx, sampling.fine_dz)
        seed = derive_seed(cfg.seed, index)
        model = InrModel(fine_grid, seed=seed)
        run_cfg = cfg.model_copy(
            update={"iterations": short_iters, "seed": seed, "checkpoint_every": 0}
        )
        report = train(target, kernel, model, run_cfg, weights, sampling)
        speckle = speckle_mismatch(target, pixel_kernel(params), window, cfg.dynamic_range)
        score = GridScore(f_number, n_cycles, report.tail_loss(), speckle)
        logger.info(
            "Candidate f#=%.2f cycles=%d: loss %.5f speckle %.5f",
            f_number, n_cycles, score.loss, score.speckle,
        )
        return score

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, range(len(candidates))))
    else:
        scores = [run(i) for i in range(len(candidates))]

    result = GridSearchResult(best=base, scores=scores, rank_by=rank_by)
    ranking = result.ranking()
    if np.all(np.isnan(ranking)):
        logger.warning("No %s score is defined; ranking by fit loss", rank_by)
        result.rank_by = "loss"
        ranking = result.ranking()
    best = scores[int(np.nanargmin(ranking))]
    result.best = candidate_params(best.f_number, best.n_cycles)
    logger.info(
        "Best PSF: f#=%.2f cycles=%d (%s %.5f)",
        best.f_number, best.n_cycles, result.rank_by, getattr(best, result.rank_by),
    )
    return result
