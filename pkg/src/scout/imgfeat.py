"""Image IO, cold-start descriptors (color / texture / frequency) and mask pooling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import fft, ndimage

from .tensor import DimensionError

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_MAX = 4.0 * np.sqrt(2.0)


class ImageNotFoundError(FileNotFoundError):
    pass


class UnsupportedFormatError(ValueError):
    pass


class CorruptImageError(ValueError):
    pass


@dataclass
class Image:
    """Pixels as an (H, W, C) float array in [0, 1], C in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DimensionError(f"image must be HxWx1 or HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.pixels[:, :, 0]
        return self.pixels @ LUMA

    def rgb(self) -> np.ndarray:
        return self.pixels if self.channels == 3 else np.repeat(self.pixels, 3, axis=2)

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.rgb().transpose(2, 0, 1))


def load_image(path, size: int | None = None) -> Image:
    """Read an 8-bit gray/RGB PNG or a PGM/PPM file, scaled to [0, 1].

    When ``size`` is given the image is resampled to ``size`` x ``size``.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageNotFoundError(path)
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise UnsupportedFormatError(f"{path}: format {im.format} not supported")
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormatError(f"{path}: mode {im.mode} not supported (8-bit L or RGB only)")
            im.load()
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: unrecognized image data") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, (UnsupportedFormatError, FileNotFoundError)):
            raise
        raise CorruptImageError(f"{path}: {exc}") from exc
    return Image(arr)


def save_image(img: Image | np.ndarray, path) -> None:
    """Write as 8-bit PNG (or PGM/PPM by extension), rounding to 1/255 steps."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    arr = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def _hist(values: np.ndarray, bins: int, upper: float) -> np.ndarray:
    idx = np.minimum((values.reshape(-1) / upper * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.float64)


def color_feature(img: Image, bins_per_channel: int = 8) -> np.ndarray:
    """Per-channel intensity histograms, concatenated and normalized to sum 1."""
    if bins_per_channel < 2:
        raise ValueError("bins_per_channel must be >= 2")
    rgb = img.rgb()
    h = np.concatenate([_hist(rgb[:, :, c], bins_per_channel, 1.0) for c in range(3)])
    return h / h.sum()


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def texture_feature(img: Image, bins: int = 16) -> np.ndarray:
    """Histogram of Sobel gradient magnitudes clipped to [0, 4*sqrt(2)]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    mag = np.clip(sobel_magnitude(img.gray()), 0.0, SOBEL_MAX)
    h = _hist(mag, bins, SOBEL_MAX)
    return h / h.sum()


def frequency_feature(img: Image, k: int = 8) -> np.ndarray:
    """Top-left k x k block of the orthonormal 2-D DCT-II of the gray image."""
    gray = img.gray()
    if k < 1 or k > min(gray.shape):
        raise DimensionError(f"k={k} exceeds image extent {gray.shape}")
    return fft.dctn(gray, type=2, norm="ortho")[:k, :k].reshape(-1)


@dataclass(frozen=True)
class FeatureConfig:
    color_bins: int = 8
    texture_bins: int = 16
    dct_k: int = 8

    @property
    def layout(self) -> tuple[int, int, int]:
        return 3 * self.color_bins, self.texture_bins, self.dct_k**2

    @property
    def length(self) -> int:
        return sum(self.layout)


@dataclass
class FeatureVector:
    values: np.ndarray
    layout: tuple[int, int, int]

    def segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a, b, _ = self.layout
        return self.values[:a], self.values[a : a + b], self.values[a + b :]


def assemble_features(img: Image, cfg: FeatureConfig = FeatureConfig()) -> FeatureVector:
    values = np.concatenate(
        [
            color_feature(img, cfg.color_bins),
            texture_feature(img, cfg.texture_bins),
            frequency_feature(img, cfg.dct_k),
        ]
    )
    return FeatureVector(values, cfg.layout)


@dataclass
class CorpusStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> CorpusStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def corpus_stats(features: np.ndarray) -> CorpusStats:
    """Per-dimension mean/std over rows; constant dimensions get std 1."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return CorpusStats(mu, sd)


def standardize(features: np.ndarray, stats: CorpusStats) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells over [i*n_in/n_out, (i+1)*n_in/n_out)."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    cells = np.arange(n_in)
    lo = np.maximum(edges[:-1, None], cells[None, :])
    hi = np.minimum(edges[1:, None], cells[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / (n_in / n_out)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average pooling of an (H, W) map onto an (h, w) grid."""
    mask = np.asarray(mask, dtype=np.float64)
    if h <= 0 or w <= 0:
        raise ValueError(f"target extents must be positive, got {h}x{w}")
    H, W = mask.shape
    if h > H or w > W:
        raise DimensionError(f"cannot downsample {H}x{W} to {h}x{w}")
    if H % h == 0 and W % w == 0:
        return mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return np.clip(_area_matrix(H, h) @ mask @ _area_matrix(W, w).T, 0.0, 1.0)
