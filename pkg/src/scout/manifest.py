"""JSON-Lines dataset manifests, the hidden ground-truth store, and the in-memory corpus.

A manifest file starts with one metadata object (``"type": "meta"``) followed
by one record per line. Unlabeled records carry no mask or class word; the
generator's ground truth lives in a separate file that only :meth:`reveal`
reads, which is how annotation is simulated.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgfeat import load_image

SPLITS = ("labeled", "unlabeled", "remaining", "test")


class ManifestError(ValueError):
    pass


class NotRevealedError(KeyError):
    pass


@dataclass
class Record:
    id: str
    image_path: str
    mask_path: str | None = None
    class_word: str | None = None
    referring_text: str | None = None
    split: str = "unlabeled"


@dataclass
class Manifest:
    records: list[Record]
    meta: dict = field(default_factory=dict)
    root: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        self.validate()

    # -- io ------------------------------------------------------------
    @classmethod
    def load(cls, path) -> Manifest:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("type") != "meta":
            raise ManifestError(f"{path}: first line must be the metadata object")
        meta = lines[0]
        records = [Record(**rec) for rec in lines[1:]]
        return cls(records, meta, path.parent)

    def save(self, path) -> None:
        path = Path(path)
        self.validate()
        meta = {"type": "meta", **{k: v for k, v in self.meta.items() if k != "type"}}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    def copy(self) -> Manifest:
        return Manifest(copy.deepcopy(self.records), copy.deepcopy(self.meta), self.root)

    # -- queries -------------------------------------------------------
    def validate(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("record ids are not unique")
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"{r.id}: unknown split {r.split!r}")
            if r.split == "labeled" and (r.mask_path is None or r.class_word is None):
                raise ManifestError(f"{r.id}: labeled records need a mask and class word")

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}

    def ids(self, *splits: str) -> list[str]:
        return sorted(r.id for r in self.records if r.split in splits)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def truth_path(self) -> Path | None:
        t = self.meta.get("truth_path")
        return self.resolve(t) if t else None

    def load_truth(self) -> dict[str, dict]:
        if self.truth_path is None or not self.truth_path.exists():
            return {}
        base = self.truth_path.parent
        out = {}
        with open(self.truth_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    # truth paths are relative to the truth file; re-express them against root
                    d["mask_path"] = relpath(base / d["mask_path"], self.root)
                    out[d["id"]] = d
        return out

    # -- mutation ------------------------------------------------------
    def log_state(self, command: str) -> None:
        prev = {r.id: r.split for r in self.records}
        self.meta.setdefault("history", []).append({"command": command, "previous_splits": prev})

    def reveal(self, ids) -> int:
        """Copy ground truth into the given records and mark them labeled."""
        truth = self.load_truth()
        recs = self.by_id()
        n = 0
        for i in ids:
            r = recs[i]
            if r.split == "labeled":
                continue
            if i not in truth:
                raise NotRevealedError(f"no ground truth for {i}")
            t = truth[i]
            r.mask_path = t["mask_path"]
            r.class_word = t["class_word"]
            r.referring_text = t.get("referring_text")
            r.split = "labeled"
            n += 1
        self.meta["label_cost"] = int(self.meta.get("label_cost", 0)) + n
        return n

    def set_splits(self, splits: dict[str, str]) -> None:
        for r in self.records:
            if r.id in splits:
                r.split = splits[r.id]
        self.validate()


class Corpus:
    """Images of a manifest held in memory as (3, S, S) arrays.

    Masks are only readable for labeled and test samples; :meth:`reveal`
    moves samples to the labeled split and counts the annotation cost.
    """

    def __init__(self, manifest: Manifest, size: int):
        self.size = size
        self.manifest = manifest
        self.splits = {r.id: r.split for r in manifest.records}
        self._rec = manifest.by_id()
        self._truth = manifest.load_truth()
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}
        self._meta: dict[str, dict] = {}
        for r in manifest.records:
            self._images[r.id] = load_image(manifest.resolve(r.image_path), size).chw()
            if r.split in ("labeled", "test"):
                self._store(r.id, r.mask_path, r.class_word, r.referring_text)
        self.label_cost = 0

    def _store(self, sid, mask_path, class_word, text) -> None:
        if mask_path is None:
            raise NotRevealedError(f"{sid}: no mask available")
        m = load_image(self.manifest.resolve(mask_path), self.size).gray()
        self._masks[sid] = (m >= 0.5).astype(np.float64)
        self._meta[sid] = {"class_word": class_word, "referring_text": text}

    def ids(self, *splits: str) -> list[str]:
        return sorted(i for i, s in self.splits.items() if s in splits)

    def image(self, sid: str) -> np.ndarray:
        return self._images[sid]

    def images(self, ids) -> np.ndarray:
        return np.stack([self._images[i] for i in ids])

    def mask(self, sid: str) -> np.ndarray:
        if sid not in self._masks:
            raise NotRevealedError(f"{sid} has not been annotated")
        return self._masks[sid]

    def masks(self, ids) -> np.ndarray:
        return np.stack([self.mask(i)[None] for i in ids])

    def class_word(self, sid: str) -> str | None:
        return self._meta.get(sid, {}).get("class_word")

    def referring_text(self, sid: str) -> str | None:
        return self._meta.get(sid, {}).get("referring_text")

    def reveal(self, ids) -> None:
        for i in ids:
            if self.splits[i] == "labeled":
                continue
            t = self._truth.get(i)
            if t is None:
                raise NotRevealedError(f"no ground truth for {i}")
            self._store(i, t["mask_path"], t["class_word"], t.get("referring_text"))
            self.splits[i] = "labeled"
            self.label_cost += 1


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def relpath(path, start) -> str:
    return os.path.relpath(path, start)
