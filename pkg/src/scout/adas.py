"""Disagreement scoring, KDE normalization, and sample selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from . import metrics
from .augment import AugmenterParams, compose_augment
from .tensor import no_grad

MODES = ("center", "top_k_easy", "top_k_hard", "random")


class DegenerateScoresError(ValueError):
    pass


@dataclass
class ScoreReport:
    id: str
    raw_score: float
    norm_score: float
    rank: int = 0
    selected: bool = False


@dataclass
class SelectionResult:
    selected: list[str]
    remaining: list[str]
    mode: str
    center: float | None = None
    reports: list[ScoreReport] = field(default_factory=list)


def score(teacher_pred, student_pred) -> float:
    """SSIM minus MAE between two prediction maps; 1 iff they are identical."""
    t = np.asarray(teacher_pred, dtype=np.float64)
    s = np.asarray(student_pred, dtype=np.float64)
    t = t.reshape(t.shape[-2:]) if t.ndim > 2 else t
    s = s.reshape(s.shape[-2:]) if s.ndim > 2 else s
    return metrics.ssim(t, s) - metrics.mae(t, s)


def silverman_bandwidth(scores: np.ndarray) -> float:
    return 1.06 * float(np.std(scores, ddof=1)) * len(scores) ** (-0.2)


def kde_normalize(scores: Sequence[float]) -> np.ndarray:
    """Gaussian-KDE CDF evaluated at each score: mean_j Phi((s_i - s_j) / h)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise DegenerateScoresError("need at least two scores")
    if np.all(s == s[0]):
        raise DegenerateScoresError("all scores identical")
    h = silverman_bandwidth(s)
    if not h > 0 or not np.isfinite(h):
        # spreads below float resolution behave like identical scores
        raise DegenerateScoresError(f"bandwidth {h} is not positive")
    return ndtr((s[:, None] - s[None, :]) / h).mean(axis=1)


def parse_mode(mode: str, center: float = 0.5) -> tuple[str, float]:
    """Accepts 'center', 'center_0.3', 'top_k_easy', 'top_k_hard', 'random'."""
    if mode.startswith("center_"):
        return "center", float(mode.split("_", 1)[1])
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    return mode, center


def rank_reports(ids: Sequence[str], raw: Sequence[float], norm: Sequence[float]) -> list[ScoreReport]:
    """Rank 1 is the highest normalized score; ties go to the smaller id."""
    order = sorted(range(len(ids)), key=lambda i: (-norm[i], ids[i]))
    reports = [ScoreReport(ids[i], float(raw[i]), float(norm[i])) for i in range(len(ids))]
    for r, i in enumerate(order, start=1):
        reports[i].rank = r
    return reports


def select(
    reports: Sequence[ScoreReport],
    budget: int,
    mode: str = "center",
    center: float = 0.5,
    seed: int = 0,
) -> SelectionResult:
    mode, center = parse_mode(mode, center)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if mode == "center":
        key = lambda r: (abs(r.norm_score - center), r.id)  # noqa: E731
    elif mode == "top_k_easy":
        key = lambda r: (-r.norm_score, r.id)  # noqa: E731
    elif mode == "top_k_hard":
        key = lambda r: (r.norm_score, r.id)  # noqa: E731
    else:
        key = None
    if key is None:
        by_id = sorted(reports, key=lambda r: r.id)
        perm = np.random.default_rng(seed).permutation(len(by_id))
        ordered = [by_id[i] for i in perm]
    else:
        ordered = sorted(reports, key=key)
    chosen = {r.id for r in ordered[:budget]}
    for r in reports:
        r.selected = r.id in chosen
    selected = [r.id for r in ordered[:budget]]
    remaining = sorted(r.id for r in reports if r.id not in chosen)
    return SelectionResult(selected, remaining, mode, center if mode == "center" else None, list(reports))


def kmeans(features: np.ndarray, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 100):
    """k-means++ seeding then Lloyd iterations; returns (centroids, labels)."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    c = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = c.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - c, axis=1)))
        c = new
        if shift < tol:
            break
    return c, labels


def kmeans_init(features: np.ndarray, k: int, seed: int = 0, ids: Sequence[str] | None = None) -> list[str]:
    """Pick the sample nearest each k-means centroid, falling back to the next nearest on collisions."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (M, D) array")
    m = x.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must lie in [1, {m}]")
    ids = [str(i) for i in range(m)] if ids is None else list(ids)
    centers, _ = kmeans(x, k, seed)
    taken: set[int] = set()
    out = []
    for c in centers:
        dist = np.sqrt(((x - c) ** 2).sum(axis=1))
        for idx in sorted(range(m), key=lambda i: (dist[i], ids[i])):
            if idx not in taken:
                taken.add(idx)
                out.append(ids[idx])
                break
    return out


Predictor = Callable[[np.ndarray], np.ndarray]


def score_samples(
    samples: Sequence[tuple[str, np.ndarray]],
    teacher: Callable,
    student: Callable,
    params: AugmenterParams | None = None,
    batch_size: int = 16,
) -> list[float]:
    """Augment each image, predict with both models, and return the raw scores in input order."""
    params = params or AugmenterParams.identity()
    raw: list[float] = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = np.stack([img for _, img in chunk])
            aug = compose_augment(x, None, params).images
            tp = teacher(aug).data
            sp = student(aug).data
            raw.extend(score(tp[i, 0], sp[i, 0]) for i in range(len(chunk)))
    return raw


def normalize_or_uniform(raw: Sequence[float]) -> np.ndarray:
    try:
        return kde_normalize(raw)
    except DegenerateScoresError:
        return np.full(len(raw), 0.5)


def run_selection_round(
    samples: Sequence[tuple[str, np.ndarray]],
    teacher: Callable,
    student: Callable,
    params: AugmenterParams | None,
    budget: int,
    mode: str = "center",
    center: float = 0.5,
    seed: int = 0,
    batch_size: int = 16,
) -> SelectionResult:
    """Score every unlabeled (id, CHW image) pair, normalize, and select ``budget`` of them."""
    if budget > len(samples):
        raise ValueError(f"budget {budget} exceeds {len(samples)} unlabeled samples")
    ids = [sid for sid, _ in samples]
    if parse_mode(mode, center)[0] == "random":
        # no scoring; a constant norm makes the rank fall back to id order
        raw = [float("nan")] * len(ids)
        norm = [0.5] * len(ids)
    else:
        raw = score_samples(samples, teacher, student, params, batch_size)
        norm = normalize_or_uniform(raw)
    reports = rank_reports(ids, raw, norm)
    return select(reports, budget, mode, center, seed)
