from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from app.scene import Bounds


PSNR_CAP = 99.0
F_SCORE_THRESHOLD = 0.02
METERS_TO_CM = 100.0


@dataclass(frozen=True)
class MetricReport:
    chamfer_l1: Optional[float] = None  # cm
    f_score: Optional[float] = None  # percent at f_score_threshold
    psnr: Optional[float] = None  # dB
    ssim: Optional[float] = None
    f_score_threshold: float = F_SCORE_THRESHOLD
    details: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.f_score is not None and not 0.0 <= self.f_score <= 100.0:
            raise ValueError(f"f_score must lie in [0, 100], got {self.f_score}")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim must lie in [-1, 1], got {self.ssim}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Human-readable two-column table of the headline metrics."""
        rows = [
            ("Chamfer-L1 (cm)", self.chamfer_l1),
            (f"F-score (<{self.f_score_threshold * METERS_TO_CM:g} cm, %)", self.f_score),
            ("PSNR (dB)", self.psnr),
            ("SSIM", self.ssim),
        ]
        frame = pd.DataFrame(
            [(name, "-" if value is None else f"{value:.4f}") for name, value in rows],
            columns=["metric", "value"],
        )
        return frame.to_string(index=False)


def _check_points(name: str, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        raise ValueError(f"{name} point set is empty")
    if points.shape[-1] != 3:
        raise ValueError(f"{name} points must be [N, 3], got {points.shape}")
    return points


def nearest_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    distances, _ = cKDTree(target).query(source)
    return np.asarray(distances, dtype=np.float64)


def _both_directions(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = _check_points("pred", pred)
    gt = _check_points("gt", gt)
    return nearest_distances(pred, gt), nearest_distances(gt, pred)


def chamfer_l1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of the two mean nearest-neighbour distances, in centimeters."""
    to_gt, to_pred = _both_directions(pred, gt)
    return float(0.5 * (to_gt.mean() + to_pred.mean()) * METERS_TO_CM)


def f_score(pred: np.ndarray, gt: np.ndarray, threshold: float = F_SCORE_THRESHOLD) -> float:
    """
    Harmonic mean of precision and recall at `threshold` meters, in percent.

    Args:
        pred: [N, 3] reconstructed surface samples
        gt: [M, 3] reference surface samples
        threshold: distance under which a point counts as matched

    Returns:
        0 when both precision and recall are 0
    """
    to_gt, to_pred = _both_directions(pred, gt)
    precision = float(np.mean(to_gt < threshold))
    recall = float(np.mean(to_pred < threshold))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def _check_images(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; capped at 99 dB."""
    a, b = _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03), per channel then averaged."""
    a, b = _check_images(a, b)
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            channel_axis=-1 if a.ndim == 3 else None,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def percentile(values: Sequence[float], p: float) -> Optional[float]:
    if len(values) == 0:
        return None
    return float(np.percentile(np.asarray(values, dtype=float), p))


def summarize_distances(distances: Sequence[float]) -> dict:
    """Distribution of point-to-surface distances, in centimeters."""
    if len(distances) == 0:
        return {"count": 0}
    cm = np.asarray(distances, dtype=float) * METERS_TO_CM
    return {
        "count": int(len(cm)),
        "mean_cm": float(np.mean(cm)),
        "median_cm": percentile(cm, 50),
        "p75_cm": percentile(cm, 75),
        "p90_cm": percentile(cm, 90),
        "max_cm": float(np.max(cm)),
    }


def crop_to_bounds(points: np.ndarray, bounds: Optional[Bounds]) -> np.ndarray:
    if bounds is None:
        return points
    return points[bounds.contains(points, tol=1e-6)]


def evaluate(
    pred_points: Optional[np.ndarray] = None,
    gt_points: Optional[np.ndarray] = None,
    pred_images: Sequence[np.ndarray] = (),
    gt_images: Sequence[np.ndarray] = (),
    threshold: float = F_SCORE_THRESHOLD,
) -> MetricReport:
    """
    Geometry metrics from two point sets and image metrics averaged over image pairs.

    Either half may be omitted; its fields stay None.
    """
    chamfer = fscore = psnr_value = ssim_value = None
    details: Dict[str, float] = {}
    if pred_points is not None and gt_points is not None:
        chamfer = chamfer_l1(pred_points, gt_points)
        fscore = f_score(pred_points, gt_points, threshold)
        to_gt, to_pred = _both_directions(pred_points, gt_points)
        details.update({f"accuracy_{k}": v for k, v in summarize_distances(to_gt).items()})
        details.update({f"completeness_{k}": v for k, v in summarize_distances(to_pred).items()})
    if len(pred_images) != len(gt_images):
        raise ValueError(f"Got {len(pred_images)} predicted images but {len(gt_images)} references")
    if len(pred_images):
        psnr_value = float(np.mean([psnr(p, g) for p, g in zip(pred_images, gt_images)]))
        ssim_value = float(np.mean([ssim(p, g) for p, g in zip(pred_images, gt_images)]))
        details["image_pairs"] = len(pred_images)
    return MetricReport(
        chamfer_l1=chamfer,
        f_score=fscore,
        psnr=psnr_value,
        ssim=ssim_value,
        f_score_threshold=threshold,
        details=details,
    )
