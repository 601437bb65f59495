"""Segmentation quality measures used for evaluation and for disagreement scoring.

All functions take float maps in [0, 1]. Measures that compare against a
ground truth mask (S, E, F) require the mask to be binary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .tensor import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
BETA2 = 0.3
N_THRESHOLDS = 256
_EPS = np.finfo(np.float64).eps


class NonBinaryGroundTruthError(ValueError):
    pass


class EmptyGroundTruthError(ValueError):
    pass


def thresholds() -> np.ndarray:
    """256 evenly spaced binarization levels in (0, 1]; ``pred >= t`` is foreground."""
    return (np.arange(N_THRESHOLDS) + 1.0) / N_THRESHOLDS


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def _binary_gt(gt: np.ndarray) -> np.ndarray:
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise NonBinaryGroundTruthError("ground truth must contain only 0 and 1")
    return gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, gt) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window."""
    x, y = _pair(pred, gt)
    if x.ndim != 2:
        raise DimensionError(f"ssim expects 2-D maps, got {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"maps of extent {x.shape} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()

    def filt(a):
        v = np.lib.stride_tricks.sliding_window_view(a, win.shape)
        return np.tensordot(v, win, axes=([2, 3], [0, 1]))

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(pred, gt) -> float:
    return float(np.clip(ssim_map(pred, gt).mean(), -1.0, 1.0))


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _s_object(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _s_object(pred[gt])
    bg = _s_object(1.0 - pred[~gt])
    return u * fg + (1.0 - u) * bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    ys, xs = np.nonzero(gt)
    # 1-based centroid rounded half away from zero, as in the original MATLAB code
    return int(np.floor(xs.mean() + 1.0 + 0.5)), int(np.floor(ys.mean() + 1.0 + 0.5))


def _quadrant_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    g = gt.astype(np.float64)
    parts = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    score = 0.0
    for rows, cols in parts:
        p, q = pred[rows, cols], g[rows, cols]
        if p.size == 0:
            continue
        score += p.size / area * _quadrant_ssim(p, q)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    pred, gt = _pair(pred, gt)
    g = _binary_gt(gt)
    y = g.mean()
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())
    q = alpha * _object_score(pred, g) + (1.0 - alpha) * _region_score(pred, g)
    return float(min(max(q, 0.0), 1.0))


# ---------------------------------------------------------------------------
# E-measure
# ---------------------------------------------------------------------------


def _confusion(pred: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, ...]:
    """TP, FP, FN, TN counts for every threshold level."""
    t = thresholds()
    fg_vals = np.sort(pred[g])
    bg_vals = np.sort(pred[~g])
    tp = (fg_vals.size - np.searchsorted(fg_vals, t, side="left")).astype(np.float64)
    fp = (bg_vals.size - np.searchsorted(bg_vals, t, side="left")).astype(np.float64)
    fn = fg_vals.size - tp
    tn = bg_vals.size - fp
    return tp, fp, fn, tn


def _enhanced(b: float, gv: float, mb: np.ndarray, mg: float) -> np.ndarray:
    pb = b - mb
    pg = gv - mg
    align = 2.0 * pb * pg / (pb * pb + pg * pg + _EPS)
    return (align + 1.0) ** 2 / 4.0


def e_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    g = _binary_gt(gt)
    n = g.size
    tp, fp, fn, tn = _confusion(pred, g)
    if not g.any():
        return tn / n
    if g.all():
        return tp / n
    mb = (tp + fp) / n
    mg = g.mean()
    total = (
        tp * _enhanced(1.0, 1.0, mb, mg)
        + fp * _enhanced(1.0, 0.0, mb, mg)
        + fn * _enhanced(0.0, 1.0, mb, mg)
        + tn * _enhanced(0.0, 0.0, mb, mg)
    )
    return total / n


def e_measure(pred, gt) -> tuple[float, float]:
    """Enhanced-alignment measure over the threshold sweep: (mean, max)."""
    curve = e_measure_curve(pred, gt)
    return float(curve.mean()), float(curve.max())


# ---------------------------------------------------------------------------
# F-measure
# ---------------------------------------------------------------------------


def f_measure_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    g = _binary_gt(gt)
    tp, fp, fn, _ = _confusion(pred, g)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(
            precision + recall > 0,
            (1 + beta2) * precision * recall / (beta2 * precision + recall),
            0.0,
        )
    return f


def _matlab_gauss2d(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    k[k < _EPS * k.max()] = 0
    return k / k.sum()


def weighted_f_measure(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with Gaussian pixel dependency and distance-decayed importance."""
    pred, gt = _pair(pred, gt)
    g = _binary_gt(gt)
    if not g.any():
        raise EmptyGroundTruthError("weighted F-measure is undefined for an all-zero ground truth")
    dist, (iy, ix) = ndimage.distance_transform_edt(~g, return_indices=True)
    err = np.abs(pred - g)
    et = err.copy()
    et[~g] = err[iy[~g], ix[~g]]
    ea = ndimage.convolve(et, _matlab_gauss2d(), mode="constant", cval=0.0)
    min_e_ea = np.where(g & (ea < err), ea, err)
    importance = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e_ea * importance
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (tpw + fpw + _EPS)
    q = (1 + beta2) * recall * precision / (recall + beta2 * precision + _EPS)
    return float(min(max(q, 0.0), 1.0))


def f_measure(pred, gt) -> tuple[float, float]:
    """(mean F-beta over the threshold sweep, weighted F-measure)."""
    return float(f_measure_curve(pred, gt).mean()), weighted_f_measure(pred, gt)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    ssim: float
    s_measure: float
    e_measure_mean: float
    e_measure_max: float
    f_measure_mean: float
    f_measure_weighted: float

    CSV_COLUMNS = ("mae", "ssim", "sm", "em_mean", "em_max", "fm_mean", "fm_weighted")

    def as_row(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def evaluate(pred, gt) -> MetricReport:
    pred, gt = _pair(pred, gt)
    em_mean, em_max = e_measure(pred, gt)
    fm_mean, fm_w = f_measure(pred, gt)
    return MetricReport(
        mae=mae(pred, gt),
        ssim=ssim(pred, gt),
        s_measure=s_measure(pred, gt),
        e_measure_mean=em_mean,
        e_measure_max=em_max,
        f_measure_mean=fm_mean,
        f_measure_weighted=fm_w,
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    rows = np.array([r.as_row() for r in reports])
    return MetricReport(*[float(v) for v in rows.mean(axis=0)])
