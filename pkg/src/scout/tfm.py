"""Text fusion: clue attention, codebook retrieval, and text-visual cross-attention."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .imgfeat import downsample_mask
from .nn import Module
from .tensor import DimensionError, Tensor

FIXED_TEXT = "Camouflaged objects; hidden objects; concealed objects"


class UnknownTextError(KeyError):
    pass


class UndefinedSimilarityError(ValueError):
    pass


class MissingClassWordError(ValueError):
    pass


class TextEmbedder:
    """Deterministic unit-norm text vectors standing in for a frozen text encoder.

    In hash mode the vector is a seeded Gaussian draw keyed by the SHA-256 of
    the UTF-8 text; in table mode it is looked up in a ``{text: [floats]}`` map.
    """

    def __init__(self, dim: int = 32, seed: int = 0, table: dict[str, Sequence[float]] | None = None):
        self.dim = dim
        self.seed = seed
        self.table = None
        if table is not None:
            self.table = {}
            for k, v in table.items():
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (dim,):
                    raise DimensionError(f"table entry {k!r} has shape {v.shape}, expected ({dim},)")
                self.table[k] = v / np.linalg.norm(v)

    @property
    def mode(self) -> str:
        return "hash" if self.table is None else "table"

    @classmethod
    def from_file(cls, path, seed: int = 0) -> TextEmbedder:
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        dim = len(next(iter(table.values())))
        return cls(dim=dim, seed=seed, table=table)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        if self.table is not None:
            try:
                return self.table[text].copy()
            except KeyError:
                raise UnknownTextError(text) from None
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
        v = np.random.default_rng([self.seed, *words]).standard_normal(self.dim)
        return v / np.linalg.norm(v)


def embed_text(embedder: TextEmbedder, text: str) -> np.ndarray:
    return embedder.embed(text)


@dataclass
class Codebook:
    words: list[str]
    vectors: np.ndarray  # (K, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != len(self.words):
            raise DimensionError("one vector per class word required")

    def to_json(self) -> dict[str, list[float]]:
        return {w: v.tolist() for w, v in zip(self.words, self.vectors)}

    @classmethod
    def from_json(cls, d: dict) -> Codebook:
        words = list(d)
        return cls(words, np.array([d[w] for w in words], dtype=np.float64))


def init_codebook(class_words: Sequence[str | None], embedder: TextEmbedder) -> Codebook:
    """One entry per distinct class word, sorted for determinism."""
    words = sorted({w for w in class_words if w})
    if not words:
        raise ValueError("cannot initialize a codebook from an empty labeled set")
    return Codebook(words, np.stack([embedder.embed(w) for w in words]))


# ---------------------------------------------------------------------------
# attention pieces (all accept an optional leading batch axis)
# ---------------------------------------------------------------------------


def flatten_positions(feature: Tensor) -> Tensor:
    """(N, C, h, w) or (C, h, w) -> (N, h*w, C) or (h*w, C)."""
    *lead, c, h, w = feature.shape
    x = feature.reshape(*lead, c, h * w)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return x.transpose(axes)


def clue_attention(query: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, top_feature: Tensor):
    """Return (A, Q_clue) with A = softmax(q Wq (F Wk)^T / sqrt(d_h)) over positions and Q_clue = A F Wv."""
    if top_feature.shape[-1] != wk.shape[0]:
        raise DimensionError(f"feature channels {top_feature.shape[-1]} != projection rows {wk.shape[0]}")
    d_h = wk.shape[1]
    qc = T.matmul(query, wq)
    kc = T.matmul(top_feature, wk)
    vc = T.matmul(top_feature, wv)
    kt = kc.transpose(tuple(range(kc.ndim - 2)) + (kc.ndim - 1, kc.ndim - 2))
    attn = T.softmax(T.matmul(qc, kt) * (1.0 / math.sqrt(d_h)), axis=-1)
    return attn, T.matmul(attn, vc)


def attn_supervision_loss(attn: Tensor, target: np.ndarray | Tensor, rescale: bool = True) -> Tensor:
    """BCE between the attention map (max-rescaled unless ``rescale`` is off) and a pooled mask."""
    target = T.as_tensor(target)
    if attn.size != target.size:
        raise DimensionError(f"attention {attn.shape} and target {target.shape} differ in size")
    target = target.reshape(attn.shape)
    a = attn / T.amax(attn, axis=-1, keepdims=True) if rescale else attn
    return T.loss_bce(a, target)


def _l2norm(x: Tensor) -> Tensor:
    return T.sqrt((x * x).sum(axis=-1, keepdims=True))


def codebook_similarity(q: Tensor, vectors: Tensor) -> Tensor:
    """Cosine similarity of ``q`` (..., d) to every codebook row, shape (..., K)."""
    q, vectors = T.as_tensor(q), T.as_tensor(vectors)
    if q.shape[-1] != vectors.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != codebook dim {vectors.shape[-1]}")
    if np.any(np.linalg.norm(q.data, axis=-1) == 0) or np.any(np.linalg.norm(vectors.data, axis=-1) == 0):
        raise UndefinedSimilarityError("cosine similarity with a zero vector")
    qn = q / _l2norm(q)
    vn = vectors / _l2norm(vectors)
    return T.matmul(qn, vn.T)


def clue_vector(weights: Tensor, vectors: Tensor) -> Tensor:
    """Similarity-weighted sum of codebook rows."""
    weights, vectors = T.as_tensor(weights), T.as_tensor(vectors)
    if weights.shape[-1] != vectors.shape[0]:
        raise DimensionError(f"{weights.shape[-1]} weights for {vectors.shape[0]} entries")
    if weights.ndim == 1:
        return T.matmul(weights.reshape(1, -1), vectors).reshape(-1)
    return T.matmul(weights, vectors)


def clue_loss(v_clue: Tensor, class_words, embedder: TextEmbedder) -> Tensor:
    if isinstance(class_words, str):
        class_words = [class_words]
    if any(not w for w in class_words):
        raise MissingClassWordError("labeled sample without a class word")
    target = np.stack([embedder.embed(w) for w in class_words]).reshape(v_clue.shape)
    return T.loss_mse(v_clue, Tensor(target))


def cross_attend(feature: Tensor, tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Image positions attend over text tokens; returns a map shaped like ``feature``."""
    *lead, c, h, w = feature.shape
    d_h = wq.shape[1]
    pos = flatten_positions(feature)
    q = T.matmul(pos, wq)
    k = T.matmul(tokens, wk)
    v = T.matmul(tokens, wv)
    kt = k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    a = T.softmax(T.matmul(q, kt) * (1.0 / math.sqrt(d_h)), axis=-1)
    out = T.matmul(a, v)  # (..., P, C)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return out.transpose(axes).reshape(*lead, c, h, w)


def fuse(text_features: Tensor, v_clue: Tensor, features: Sequence[Tensor], projections) -> list[Tensor]:
    """Concatenate text and clue tokens, then add per-level cross-attention to each feature map."""
    text_features, v_clue = T.as_tensor(text_features), T.as_tensor(v_clue)
    if text_features.shape[-1] != v_clue.shape[-1]:
        raise DimensionError("text features and clue vector must share their dimension")
    tokens = T.concat([text_features, v_clue], axis=-2)
    return [f + cross_attend(f, tokens, *proj) for f, proj in zip(features, projections)]


def tfm_loss(attn_loss: Tensor, clue: Tensor | None, lam_t: int) -> Tensor:
    if lam_t not in (0, 1):
        raise ValueError(f"lambda_t must be 0 or 1, got {lam_t}")
    if lam_t == 0:
        return attn_loss
    if clue is None:
        raise MissingClassWordError("lambda_t = 1 requires a clue loss")
    return attn_loss + clue


# ---------------------------------------------------------------------------
# trainable module
# ---------------------------------------------------------------------------


@dataclass
class TFMOutput:
    fused: list[Tensor]
    attn: Tensor
    q_clue: Tensor
    similarity: Tensor
    v_clue: Tensor


class TextFusion(Module):
    """Clue-attention query/projections, per-level cross-attention, and the codebook."""

    def __init__(
        self,
        channels: Sequence[int],
        codebook: Codebook,
        dim: int = 32,
        seed: int = 0,
        train_codebook: bool = True,
    ):
        super().__init__()
        self.channels = tuple(channels)
        self.dim = dim
        self.train_codebook = train_codebook
        rng = np.random.default_rng(seed)
        top = self.channels[-1]
        self.param("clue.query", rng.normal(0, 1.0, size=(1, dim)))
        self.param("clue.wq", rng.normal(0, 1.0 / math.sqrt(dim), size=(dim, dim)))
        self.param("clue.wk", rng.normal(0, 1.0 / math.sqrt(top), size=(top, dim)))
        self.param("clue.wv", rng.normal(0, 1.0 / math.sqrt(top), size=(top, dim)))
        for k, c in enumerate(self.channels, start=1):
            self.param(f"fuse{k}.wq", rng.normal(0, 1.0 / math.sqrt(c), size=(c, dim)))
            self.param(f"fuse{k}.wk", rng.normal(0, 1.0 / math.sqrt(dim), size=(dim, dim)))
            self.param(f"fuse{k}.wv", rng.normal(0, 0.1 / math.sqrt(dim), size=(dim, c)))
        self.words: list[str] = []
        self._codebook_const: Tensor | None = None
        self.set_codebook(codebook)

    def set_codebook(self, codebook: Codebook) -> None:
        if codebook.vectors.shape[1] != self.dim:
            raise DimensionError(f"codebook dim {codebook.vectors.shape[1]} != {self.dim}")
        self.words = list(codebook.words)
        if self.train_codebook:
            self.param("codebook", codebook.vectors.copy())
        else:
            self._params.pop("codebook", None)
            self._codebook_const = Tensor(codebook.vectors.copy())

    def extend_codebook(self, words: Sequence[str], embedder: TextEmbedder) -> list[str]:
        """Append entries for unseen class words; returns the words added."""
        new = sorted({w for w in words if w and w not in self.words})
        if new:
            vecs = np.vstack([self.codebook_tensor().data, np.stack([embedder.embed(w) for w in new])])
            self.set_codebook(Codebook(self.words + new, vecs))
        return new

    def codebook_tensor(self) -> Tensor:
        return self._params["codebook"] if self.train_codebook else self._codebook_const

    def codebook(self) -> Codebook:
        return Codebook(list(self.words), self.codebook_tensor().data.copy())

    def projections(self) -> list[tuple[Tensor, Tensor, Tensor]]:
        p = self._params
        return [(p[f"fuse{k}.wq"], p[f"fuse{k}.wk"], p[f"fuse{k}.wv"]) for k in range(1, len(self.channels) + 1)]

    def __call__(self, features: Sequence[Tensor], text: np.ndarray) -> TFMOutput:
        """``text`` is (N, d) or (d,) sentence vectors matching the batch of ``features``."""
        p = self._params
        top = flatten_positions(features[-1])
        attn, q_clue = clue_attention(p["clue.query"], p["clue.wq"], p["clue.wk"], p["clue.wv"], top)
        book = self.codebook_tensor()
        sim = codebook_similarity(q_clue, book)
        v_clue = clue_vector(sim, book)
        text = np.asarray(text, dtype=np.float64)
        text_tokens = Tensor(text.reshape(*v_clue.shape[:-2], 1, self.dim))
        fused = fuse(text_tokens, v_clue, features, self.projections())
        return TFMOutput(fused, attn, q_clue, sim, v_clue)


def attention_target(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pool (N, 1, H, W) or (H, W) masks onto the attention grid, flattened per sample."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 2:
        return downsample_mask(masks, h, w).reshape(1, 1, h * w)
    flat = masks.reshape(-1, *masks.shape[-2:])
    return np.stack([downsample_mask(m, h, w).reshape(1, h * w) for m in flat])
