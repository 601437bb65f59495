"""Deterministic synthetic camouflage scenes.

Each image is a procedural texture background with one object whose outline
is a shape-family template perturbed by smoothed noise. Inside the object the
texture is a blend: ``kappa`` times a fresh draw of the background texture plus
``1 - kappa`` times a contrasting texture, so kappa = 1 hides the object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .manifest import Manifest, Record

FAMILIES = ("circle", "square", "triangle", "cross", "ring")
TEXTURES = ("mottled", "striped", "speckled", "cloudy")
TEXT_TEMPLATE = "a {class_word} camouflaged against {texture_word} background"


@dataclass
class SynthConfig:
    size: int = 64
    min_frac: float = 0.08
    max_frac: float = 0.25
    kappa: float = 0.7
    kappa_range: tuple[float, float] | None = None
    families: tuple[str, ...] = FAMILIES
    textures: tuple[str, ...] = TEXTURES
    test_fraction: float = 0.2
    seed: int = 0
    divisor: int = 8

    def validate(self) -> None:
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.kappa_range is not None:
            lo, hi = self.kappa_range
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"kappa_range must satisfy 0 <= lo <= hi <= 1, got {self.kappa_range}")
        if self.size % self.divisor:
            raise ValueError(f"size {self.size} must be divisible by {self.divisor}")
        if not 0.0 < self.min_frac <= self.max_frac < 1.0:
            raise ValueError("need 0 < min_frac <= max_frac < 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        unknown = set(self.families) - set(FAMILIES) or set(self.textures) - set(TEXTURES)
        if unknown:
            raise ValueError(f"unknown family/texture names: {sorted(unknown)}")


def _template(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed 'insideness' field: positive inside the unit shape."""
    if family == "circle":
        return 1.0 - np.hypot(u, v)
    if family == "square":
        return 1.0 - np.maximum(np.abs(u), np.abs(v)) * 1.15
    if family == "triangle":
        return np.minimum.reduce([v + 0.6, 0.9 - v - 1.7 * u, 0.9 - v + 1.7 * u]) * 1.2
    if family == "cross":
        return np.maximum(0.35 - np.abs(u), 0.35 - np.abs(v)) * 2.5 * (1.0 - np.maximum(np.abs(u), np.abs(v)))
    if family == "ring":
        r = np.hypot(u, v)
        return 0.35 - np.abs(r - 0.65)
    raise ValueError(f"unknown shape family {family!r}")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def texture(rng: np.random.Generator, style: str, size: int) -> np.ndarray:
    """Zero-mean, unit-ish intensity field for one texture style."""
    if style == "mottled":
        return _smooth_noise(rng, size, 2.5)
    if style == "cloudy":
        return _smooth_noise(rng, size, 6.0) + 0.3 * _smooth_noise(rng, size, 1.0)
    if style == "speckled":
        return _smooth_noise(rng, size, 0.7)
    if style == "striped":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.35)
        yy, xx = np.mgrid[0:size, 0:size]
        phase = freq * (np.cos(theta) * xx + np.sin(theta) * yy)
        return np.sin(2 * np.pi * phase) + 0.4 * _smooth_noise(rng, size, 1.0)
    raise ValueError(f"unknown texture {style!r}")


def _colorize(field: np.ndarray, base: np.ndarray, amp: np.ndarray) -> np.ndarray:
    return base[None, None, :] + amp[None, None, :] * field[..., None]


def make_mask(rng: np.random.Generator, family: str, size: int, min_frac: float, max_frac: float) -> np.ndarray:
    """Binary mask with exactly A pixels, A drawn uniformly within the area bounds."""
    scale = rng.uniform(0.25, 0.4) * size
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    field = _template(family, u, v) + 0.15 * _smooth_noise(rng, size, 3.0)
    field = ndimage.gaussian_filter(field, 1.0, mode="nearest")
    lo = int(np.ceil(min_frac * size * size))
    hi = int(np.floor(max_frac * size * size))
    area = int(rng.integers(lo, hi + 1))
    order = np.argsort(-field.ravel(), kind="stable")
    mask = np.zeros(size * size, dtype=bool)
    mask[order[:area]] = True
    return mask.reshape(size, size)


@dataclass
class SynthSample:
    image: np.ndarray  # (S, S, 3) in [0, 1]
    mask: np.ndarray  # (S, S) bool
    class_word: str
    texture_word: str
    kappa: float

    @property
    def referring_text(self) -> str:
        return TEXT_TEMPLATE.format(class_word=self.class_word, texture_word=self.texture_word)


def make_sample(cfg: SynthConfig, index: int) -> SynthSample:
    rng = np.random.default_rng([cfg.seed, index])
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    style = cfg.textures[int(rng.integers(len(cfg.textures)))]
    kappa = cfg.kappa if cfg.kappa_range is None else float(rng.uniform(*cfg.kappa_range))
    s = cfg.size
    base = rng.uniform(0.3, 0.7, size=3)
    amp = rng.uniform(0.08, 0.16, size=3)
    bg = _colorize(texture(rng, style, s), base, amp)
    same = _colorize(texture(rng, style, s), base, amp)
    other_style = TEXTURES[(TEXTURES.index(style) + 1 + int(rng.integers(len(TEXTURES) - 1))) % len(TEXTURES)]
    shift = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.3, 0.45, size=3)
    other = _colorize(texture(rng, other_style, s), np.clip(base + shift, 0.05, 0.95), amp)
    mask = make_mask(rng, family, s, cfg.min_frac, cfg.max_frac)
    obj = kappa * same + (1.0 - kappa) * other
    img = np.where(mask[..., None], obj, bg)
    return SynthSample(np.clip(img, 0.0, 1.0), mask, family, style, kappa)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def synth_generate(cfg: SynthConfig, n: int, out_dir) -> Manifest:
    """Write ``n`` images, masks, the manifest and the hidden ground truth under ``out_dir``."""
    cfg.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    n_test = int(round(cfg.test_fraction * n))
    width = max(4, len(str(n - 1)))
    records, truth = [], []
    for i in range(n):
        sample = make_sample(cfg, i)
        sid = f"img{i:0{width}d}"
        img_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
        PILImage.fromarray(_to_u8(sample.image)).save(out / img_rel)
        PILImage.fromarray(sample.mask.astype(np.uint8) * 255).save(out / mask_rel)
        t = {
            "id": sid,
            "mask_path": mask_rel,
            "class_word": sample.class_word,
            "referring_text": sample.referring_text,
            "kappa": sample.kappa,
        }
        truth.append(t)
        if i >= n - n_test:
            records.append(Record(sid, img_rel, mask_rel, sample.class_word, sample.referring_text, "test"))
        else:
            records.append(Record(sid, img_rel))
    with open(out / "ground_truth.jsonl", "w", encoding="utf-8") as fh:
        for t in truth:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    meta = {
        "generator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
        "seed": cfg.seed,
        "truth_path": "ground_truth.jsonl",
        "label_cost": 0,
    }
    manifest = Manifest(records, meta, out)
    manifest.save(out / "manifest.jsonl")
    return manifest
