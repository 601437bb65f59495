"""Tiny encoder-decoder used as teacher and student."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmenterParams, compose_augment
from .nn import Module
from .tensor import DimensionError, Tensor, no_grad

WEIGHTS_MAGIC = b"SCOUTWTS"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class SegConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 3
    head_init: str = "normal"  # or "zero"

    @property
    def levels(self) -> int:
        return len(self.channels)


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class SegModel(Module):
    """Encoder levels conv3x3 -> SiLU -> 2x avg-pool; decoder upsamples with skip concat.

    Level ``k`` (1-based) features have extent H / 2**k.
    """

    def __init__(self, cfg: SegConfig = SegConfig(), seed: int = 0):
        super().__init__()
        if cfg.levels < 2:
            raise ValueError("need at least two encoder levels")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        prev = cfg.in_channels
        for k, c in enumerate(ch, start=1):
            self.param(f"enc{k}.w", _he(rng, (c, prev, 3, 3)))
            self.param(f"enc{k}.b", np.zeros(c))
            prev = c
        for k in range(cfg.levels - 1, 0, -1):
            cin = ch[k] + ch[k - 1]
            self.param(f"dec{k}.w", _he(rng, (ch[k - 1], cin, 3, 3)))
            self.param(f"dec{k}.b", np.zeros(ch[k - 1]))
        self.param("dec0.w", _he(rng, (ch[0], ch[0], 3, 3)))
        self.param("dec0.b", np.zeros(ch[0]))
        if cfg.head_init == "zero":
            head = np.zeros((1, ch[0], 1, 1))
        else:
            head = rng.normal(0.0, 0.1, size=(1, ch[0], 1, 1))
        self.param("head.w", head)
        self.param("head.b", np.zeros(1))

    def _p(self, name: str) -> Tensor:
        return self._params[name]

    def check_input(self, x: Tensor) -> None:
        if x.ndim not in (3, 4) or x.shape[-3] != self.cfg.in_channels:
            raise DimensionError(f"expected (N,){self.cfg.in_channels},H,W input, got {x.shape}")
        f = 2**self.cfg.levels
        if x.shape[-1] % f or x.shape[-2] % f:
            raise DimensionError(f"input extent {x.shape[-2:]} not divisible by {f}")

    def encode(self, x) -> list[Tensor]:
        x = T.as_tensor(x)
        self.check_input(x)
        h = x - 0.5
        feats = []
        for k in range(1, self.cfg.levels + 1):
            h = T.avg_pool2d(T.silu(T.conv2d(h, self._p(f"enc{k}.w"), self._p(f"enc{k}.b"), pad=1)), 2)
            feats.append(h)
        return feats

    def decode(self, feats: Sequence[Tensor]) -> Tensor:
        ch_axis = feats[0].ndim - 3
        d = feats[-1]
        for k in range(self.cfg.levels - 1, 0, -1):
            d = T.concat([T.upsample_nearest(d, 2), feats[k - 1]], axis=ch_axis)
            d = T.silu(T.conv2d(d, self._p(f"dec{k}.w"), self._p(f"dec{k}.b"), pad=1))
        d = T.silu(T.conv2d(T.upsample_nearest(d, 2), self._p("dec0.w"), self._p("dec0.b"), pad=1))
        return T.sigmoid(T.conv2d(d, self._p("head.w"), self._p("head.b")))

    def forward(self, x, fuser: Callable[[list[Tensor]], list[Tensor]] | None = None):
        """Return (mask, encoder features); ``fuser`` may replace features before decoding."""
        feats = self.encode(x)
        dec_in = fuser(feats) if fuser is not None else feats
        return self.decode(dec_in), feats

    def __call__(self, x) -> Tensor:
        return self.forward(x)[0]

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self(x).data


def clone_model(model: SegModel) -> SegModel:
    twin = SegModel(model.cfg)
    twin.load_state_dict(model.state_dict())
    return twin


def ema_update(teacher: Module, student: Module, m: float = 0.99) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {m}")
    tp, sp = teacher.named_parameters(), student.named_parameters()
    if [(n, t.shape) for n, t in tp] != [(n, s.shape) for n, s in sp]:
        raise ValueError("teacher and student architectures differ")
    for (_, t), (_, s) in zip(tp, sp):
        t.data = m * t.data + (1.0 - m) * s.data


def pseudo_label(teacher, image, params: AugmenterParams | None = None) -> np.ndarray:
    """Teacher prediction on the augmented image; no graph is recorded."""
    with no_grad():
        aug = compose_augment(image, None, params or AugmenterParams.identity())
        return teacher(aug.images).data


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------


def save_weights(path, sections: dict[str, Module], meta: dict | None = None) -> None:
    """Header (magic, version, JSON descriptor) then little-endian float64 values.

    Values follow section order, then parameter declaration order.
    """
    desc = {
        "meta": meta or {},
        "sections": {
            name: [[p, list(t.shape)] for p, t in mod.named_parameters()] for name, mod in sections.items()
        },
    }
    blob = json.dumps(desc, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(blob)))
        fh.write(blob)
        for mod in sections.values():
            for _, t in mod.named_parameters():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_weights(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    desc = json.loads(raw[16 : 16 + n].decode("utf-8"))
    offset = 16 + n
    states: dict[str, dict[str, np.ndarray]] = {}
    for sec, entries in desc["sections"].items():
        state = {}
        for name, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            state[name] = arr.astype(np.float64)
            offset += 8 * count
        states[sec] = state
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return desc["meta"], states


def seg_config_dict(cfg: SegConfig) -> dict:
    return asdict(cfg)
