"""
Evaluation: PSNR/SSIM between log-compressed maps and wire-target analysis
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from echoinr.errors import DomainError, ShapeError
from echoinr.image import Image2D
from echoinr.losses import ssim_loss
from echoinr.phantom import PhantomSpec
from echoinr.render import DEFAULT_DYNAMIC_RANGE, log_compress
from echoinr.tensorgraph import Tensor

logger = logging.getLogger(__name__)

Circle = Tuple[float, float, float]
# relative slack of the containment test in the enclosing-circle search
CIRCLE_TOLERANCE = 1e-12


@dataclass
class MetricsRecord:
    psnr: float
    ssim: float
    pred_id: str = ""
    gt_id: str = ""
    dynamic_range: float = DEFAULT_DYNAMIC_RANGE

    @property
    def psnr_text(self) -> str:
        return "inf" if math.isinf(self.psnr) else f"{self.psnr:.4f}"

    def row(self) -> List[str]:
        return [
            self.pred_id, self.gt_id, self.psnr_text, f"{self.ssim:.6f}", f"{self.dynamic_range:g}"
        ]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr", a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM, the same computation as the training loss term"""
    return ssim_loss(Tensor(a), Tensor(b)).item()


def evaluate_pair(
    pred: Image2D,
    gt: Image2D,
    dynamic_range: float = DEFAULT_DYNAMIC_RANGE,
    pred_space: str = "echo",
    gt_space: str = "echo",
    pred_id: str = "",
    gt_id: str = "",
) -> MetricsRecord:
    """
    PSNR and SSIM after bringing both images to clipped B-mode space

    Args:
        pred: Estimate
        gt: Reference
        dynamic_range: dB range of the log compression
        pred_space: 'echo' (linear echogenicity, compressed here) or 'bmode'
        gt_space: as pred_space
        pred_id: Label in reports
        gt_id: Label in reports

    Returns:
        MetricsRecord
    """

    def to_bmode(image: Image2D, space: str) -> np.ndarray:
        if space == "echo":
            clipped = image.with_values(np.maximum(image.values, 0.0))
            return log_compress(clipped, dynamic_range).values
        if space == "bmode":
            return np.clip(image.values, 0.0, 1.0)
        raise ValueError(f"Unknown image space {space!r}; use 'echo' or 'bmode'")

    if pred.shape != gt.shape:
        raise ShapeError("evaluate_pair", pred.shape, gt.shape)
    if not pred.same_grid(gt):
        raise DomainError(
            f"Pixel spacing differs: ({pred.dx:g}, {pred.dz:g}) vs ({gt.dx:g}, {gt.dz:g}) mm"
        )
    a, b = to_bmode(pred, pred_space), to_bmode(gt, gt_space)
    return MetricsRecord(psnr(a, b), ssim_metric(a, b), pred_id, gt_id, dynamic_range)


# Minimum enclosing circle (randomized incremental construction)


def _in_circle(c: Optional[Circle], p) -> bool:
    if c is None:
        return False
    reach = c[2] * (1.0 + CIRCLE_TOLERANCE) + CIRCLE_TOLERANCE
    return math.hypot(p[0] - c[0], p[1] - c[1]) <= reach


def _cross(x0, y0, x1, y1, x2, y2) -> float:
    return (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)


def diameter_circle(a, b) -> Circle:
    cx, cy = (a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0
    return cx, cy, max(math.hypot(cx - a[0], cy - a[1]), math.hypot(cx - b[0], cy - b[1]))


def circumcircle(a, b, c) -> Optional[Circle]:
    """Circle through three points, or None when they are collinear"""
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2.0
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2.0
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by)) * 2.0
    if d == 0.0:
        return None
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    x = ox + (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    y = oy + (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r = max(math.hypot(x - p[0], y - p[1]) for p in (a, b, c))
    return x, y, r


def _circle_two_points(points, p, q) -> Circle:
    circ = diameter_circle(p, q)
    left: Optional[Circle] = None
    right: Optional[Circle] = None
    for r in points:
        if _in_circle(circ, r):
            continue
        cross = _cross(p[0], p[1], q[0], q[1], r[0], r[1])
        c = circumcircle(p, q, r)
        if c is None:
            continue
        side = _cross(p[0], p[1], q[0], q[1], c[0], c[1])
        if cross > 0.0 and (left is None or side > _cross(*p, *q, left[0], left[1])):
            left = c
        elif cross < 0.0 and (right is None or side < _cross(*p, *q, right[0], right[1])):
            right = c
    if left is None and right is None:
        return circ
    if left is None:
        return right
    if right is None:
        return left
    return left if left[2] <= right[2] else right


def _circle_one_point(points, p) -> Circle:
    c: Circle = (p[0], p[1], 0.0)
    for i, q in enumerate(points):
        if not _in_circle(c, q):
            c = diameter_circle(p, q) if c[2] == 0.0 else _circle_two_points(points[: i + 1], p, q)
    return c


def minimum_enclosing_circle(
    points: Sequence[Sequence[float]], rng: Optional[np.random.Generator] = None
) -> Circle:
    """
    Smallest circle containing every point, expected linear time

    Args:
        points: (N, 2) coordinates, N >= 1
        rng: Shuffle source (fixed seed by default, so results are reproducible)

    Returns:
        (center x, center z, radius)
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("Minimum enclosing circle of an empty point set")
    rng = rng if rng is not None else np.random.default_rng(0)
    shuffled = [tuple(p) for p in pts[rng.permutation(len(pts))]]
    c: Optional[Circle] = None
    for i, p in enumerate(shuffled):
        if not _in_circle(c, p):
            c = _circle_one_point(shuffled[: i + 1], p)
    return c


# Wire analysis


@dataclass(frozen=True)
class WireCluster:
    center: Tuple[float, float]
    radius: float
    pixel_count: int


@dataclass
class WireReport:
    clusters: List[WireCluster] = field(default_factory=list)
    matched: Optional[int] = None

    @property
    def detected(self) -> int:
        return len(self.clusters)

    @property
    def mean_radius(self) -> float:
        return float(np.mean([c.radius for c in self.clusters])) if self.clusters else 0.0

    @property
    def radius_std(self) -> float:
        return float(np.std([c.radius for c in self.clusters])) if self.clusters else 0.0


def wire_clusters(image: Image2D, threshold_frac: float = 0.2, min_pixels: int = 3) -> WireReport:
    """
    Detect point targets: relative threshold, 8-connected components, noise filter,
    minimum enclosing circle per component

    Args:
        image: Non-negative map (echogenicity estimate or B-mode)
        threshold_frac: Foreground level as a fraction of the image maximum
        min_pixels: Components smaller than this are dropped as noise

    Returns:
        WireReport with centers and radii in mm
    """
    values = image.values
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return WireReport()

    mask = (values >= threshold_frac * peak).astype(np.uint8)
    count, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)

    rows, cols = np.nonzero(labels)
    order = np.argsort(labels[rows, cols], kind="stable")
    rows, cols = rows[order], cols[order]
    bounds = np.searchsorted(labels[rows, cols], np.arange(1, count + 1))

    clusters = []
    for label in range(1, count):
        if stats[label, cv2.CC_STAT_AREA] < min_pixels:
            continue
        lo, hi = bounds[label - 1], bounds[label]
        points = np.stack([(cols[lo:hi] + 0.5) * image.dx, (rows[lo:hi] + 0.5) * image.dz], axis=1)
        x, z, r = minimum_enclosing_circle(points)
        clusters.append(WireCluster(center=(x, z), radius=r, pixel_count=hi - lo))

    logger.info(
        "Wire analysis: %d components, %d kept (min %d px)", count - 1, len(clusters), min_pixels
    )
    return WireReport(clusters=clusters)


@dataclass
class WireMatch:
    matched: int
    errors: List[float]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors else 0.0


def match_wires(report: WireReport, spec: PhantomSpec, tol_mm: float = 0.2) -> WireMatch:
    """
    Greedy one-to-one matching of detected clusters to known wire positions

    Pairs are taken in order of increasing distance; each cluster and each wire
    is used at most once and only pairs within tol_mm count.

    Args:
        report: Detected clusters
        spec: Phantom with the true wire positions
        tol_mm: Maximum center distance of a match

    Returns:
        WireMatch with the matched count and per-match localization errors
    """
    pairs = []
    for ci, cluster in enumerate(report.clusters):
        for wi, wire in enumerate(spec.wires):
            dx = cluster.center[0] - wire.center[0]
            dz = cluster.center[1] - wire.center[1]
            distance = math.hypot(dx, dz)
            if distance <= tol_mm:
                pairs.append((distance, ci, wi))
    pairs.sort()

    used_clusters, used_wires, errors = set(), set(), []
    for distance, ci, wi in pairs:
        if ci in used_clusters or wi in used_wires:
            continue
        used_clusters.add(ci)
        used_wires.add(wi)
        errors.append(distance)

    report.matched = len(errors)
    return WireMatch(matched=len(errors), errors=errors)
