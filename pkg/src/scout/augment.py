"""Differentiable color and affine augmenters and their adversarial update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, no_grad

PARAM_NAMES = ("brightness", "log_contrast", "gain_r", "gain_g", "gain_b", "angle", "log_scale", "tx", "ty")


class ParameterRangeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AugmentBounds:
    angle: float = math.pi
    log_scale: float = math.log(2.0)
    translation: float = 0.5
    brightness: float = 0.5
    log_contrast: float = math.log(2.0)
    gain: tuple[float, float] = (0.5, 1.5)


@dataclass
class AugmenterParams:
    """Color parameters (b, log c, per-channel gains) and affine parameters (angle, log scale, t)."""

    brightness: float = 0.0
    log_contrast: float = 0.0
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    angle: float = 0.0
    log_scale: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls) -> AugmenterParams:
        return cls()

    def vector(self) -> np.ndarray:
        return np.array(
            [self.brightness, self.log_contrast, *self.gains, self.angle, self.log_scale, *self.translation],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, v) -> AugmenterParams:
        v = [float(x) for x in np.asarray(v, dtype=np.float64).reshape(-1)]
        if len(v) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} values, got {len(v)}")
        return cls(v[0], v[1], (v[2], v[3], v[4]), v[5], v[6], (v[7], v[8]))

    def to_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.vector().tolist()))

    @classmethod
    def from_dict(cls, d: dict) -> AugmenterParams:
        return cls.from_vector([d[k] for k in PARAM_NAMES])

    def project(self, bounds: AugmentBounds = AugmentBounds()) -> AugmenterParams:
        v = self.vector()
        v[0] = np.clip(v[0], -bounds.brightness, bounds.brightness)
        v[1] = np.clip(v[1], -bounds.log_contrast, bounds.log_contrast)
        v[2:5] = np.clip(v[2:5], *bounds.gain)
        v[5] = np.clip(v[5], -bounds.angle, bounds.angle)
        v[6] = np.clip(v[6], -bounds.log_scale, bounds.log_scale)
        v[7:9] = np.clip(v[7:9], -bounds.translation, bounds.translation)
        return AugmenterParams.from_vector(v)

    def jitter(self, rng: np.random.Generator, sigma: float = 0.05, bounds: AugmentBounds = AugmentBounds()):
        v = self.vector() + rng.normal(0.0, sigma, size=len(PARAM_NAMES))
        return AugmenterParams.from_vector(v).project(bounds)


@dataclass
class AugmentedBatch:
    images: Tensor
    grid: Tensor
    masks: Tensor | None = None


def _unpack(params) -> list[Tensor]:
    """Nine scalar-ish tensors from AugmenterParams or a length-9 vector tensor."""
    if isinstance(params, AugmenterParams):
        v = params.vector()
        return [Tensor(v[0]), Tensor(v[1]), Tensor(v[2:5]), Tensor(v[5]), Tensor(v[6]), Tensor(v[7]), Tensor(v[8])]
    vec = T.as_tensor(params)
    if vec.shape != (len(PARAM_NAMES),):
        raise DimensionError(f"augmenter vector must have shape (9,), got {vec.shape}")
    return [vec[0], vec[1], vec[2:5], vec[5], vec[6], vec[7], vec[8]]


def apply_color(img, params) -> Tensor:
    """g * (c * (x - 0.5) + 0.5) + b per channel; not clamped."""
    x = T.as_tensor(img)
    if x.ndim < 3 or x.shape[-3] != 3:
        raise DimensionError(f"color augment needs (..., 3, H, W) input, got {x.shape}")
    b, logc, g = _unpack(params)[:3]
    c = T.exp(logc)
    return (c * (x - 0.5) + 0.5) * g.reshape(3, 1, 1) + b


def _check_geo(params, bounds: AugmentBounds) -> None:
    v = params.vector() if isinstance(params, AugmenterParams) else T.as_tensor(params).data
    tol = 1e-12
    if abs(v[5]) > bounds.angle + tol:
        raise ParameterRangeError(f"angle {v[5]} outside [-{bounds.angle}, {bounds.angle}]")
    if abs(v[6]) > bounds.log_scale + tol:
        raise ParameterRangeError(f"log-scale {v[6]} outside [-{bounds.log_scale}, {bounds.log_scale}]")
    if max(abs(v[7]), abs(v[8])) > bounds.translation + tol:
        raise ParameterRangeError(f"translation ({v[7]}, {v[8]}) outside +-{bounds.translation}")


def pixel_centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def affine_grid(params, h: int, w: int) -> Tensor:
    """Inverse-warp sampling grid for q = s * R(angle) p + t, as (h, w, 2) of (x, y)."""
    _, _, _, angle, logs, tx, ty = _unpack(params)
    u = Tensor(np.broadcast_to(pixel_centers(w)[None, :], (h, w)))
    v = Tensor(np.broadcast_to(pixel_centers(h)[:, None], (h, w)))
    ca, sa = T.cos(angle), T.sin(angle)
    inv_s = T.exp(-1.0 * logs)
    du, dv = u - tx, v - ty
    gx = (ca * du + sa * dv) * inv_s
    gy = (ca * dv - sa * du) * inv_s
    return T.stack([gx, gy], axis=-1)


def apply_geometric(img, mask=None, params=None, bounds: AugmentBounds = AugmentBounds()) -> AugmentedBatch:
    params = AugmenterParams.identity() if params is None else params
    _check_geo(params, bounds)
    x = T.as_tensor(img)
    h, w = x.shape[-2:]
    grid = affine_grid(params, h, w)
    out = T.bilinear_sample(x, grid)
    warped = None
    if mask is not None:
        m = T.as_tensor(mask)
        if m.shape[-2:] != (h, w):
            raise DimensionError(f"mask {m.shape} does not match image {x.shape}")
        warped = T.bilinear_sample(m, grid)
    return AugmentedBatch(out, grid, warped)


def compose_augment(img, mask=None, params=None, bounds: AugmentBounds = AugmentBounds()) -> AugmentedBatch:
    """Geometric warp first, then color; the mask only receives the warp."""
    params = AugmenterParams.identity() if params is None else params
    geo = apply_geometric(img, mask, params, bounds)
    return AugmentedBatch(apply_color(geo.images, params), geo.grid, geo.masks)


def render(x) -> np.ndarray:
    """Clamp augmented values into [0, 1] for metrics or serialization."""
    return np.clip(T.as_tensor(x).data, 0.0, 1.0)


def aug_loss(teacher_pred, student_pred, gt) -> Tensor:
    """BCE(teacher, gt) - BCE(student, gt)."""
    return T.loss_bce(teacher_pred, gt) - T.loss_bce(student_pred, gt)


Predictor = Callable[[Tensor], Tensor]


def _frozen_call(model, x: Tensor) -> Tensor:
    frozen = getattr(model, "frozen", None)
    if frozen is None:
        return model(x)
    with frozen():
        return model(x)


def aug_objective(vec, images, masks, teacher: Predictor, student: Predictor, bounds=AugmentBounds()) -> Tensor:
    """L_Aug on a batch as a function of the flat augmenter vector."""
    batch = compose_augment(images, masks, vec, bounds)
    return aug_loss(_frozen_call(teacher, batch.images), _frozen_call(student, batch.images), batch.masks)


@dataclass
class StepInfo:
    loss_before: float
    loss_after: float
    lr_used: float
    accepted: bool
    halvings: int
    grad: np.ndarray = field(repr=False, default=None)


def augmenter_step(
    params: AugmenterParams,
    batch: tuple[np.ndarray, np.ndarray],
    teacher: Predictor,
    student: Predictor,
    lr: float,
    bounds: AugmentBounds = AugmentBounds(),
    max_halvings: int = 8,
) -> tuple[AugmenterParams, StepInfo]:
    """One projected gradient-descent step on L_Aug w.r.t. the augmenter only.

    If the full step does not lower L_Aug the step size is halved up to
    ``max_halvings`` times; when none succeeds the parameters are returned
    unchanged with ``accepted=False``.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    images, masks = batch
    vec = Tensor(params.vector(), requires_grad=True)
    loss = aug_objective(vec, images, masks, teacher, student, bounds)
    T.backward(loss)
    grad = vec.grad.copy()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("augmenter gradient is not finite")
    before = float(loss.data)
    if lr == 0:
        return params, StepInfo(before, before, 0.0, False, 0, grad)

    step = lr
    for k in range(max_halvings + 1):
        cand = AugmenterParams.from_vector(params.vector() - step * grad).project(bounds)
        with no_grad():
            after = float(aug_objective(cand.vector(), images, masks, teacher, student, bounds).data)
        if after < before:
            return cand, StepInfo(before, after, step, True, k, grad)
        step *= 0.5
    return params, StepInfo(before, before, 0.0, False, max_halvings, grad)
