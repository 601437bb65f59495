"""Loss assembly and the phased semi-supervised loop.

Phases run in a fixed order: cold start (initial labeled set), pretrain on
the labeled set, selection round(s), then joint training over labeled and
remaining data. Each training iteration performs (1) an Adam step on the
student and text-fusion weights, (2) an augmenter step on L_Aug, and (3) an
EMA update of the teacher.

All randomness derives from ``config.seed`` through fixed stream ids::

    (seed, 1)          cold-start k-means seeding / random draw
    (seed, 2)          segmentation network init (teacher is a copy)
    (seed, 3, e)       pretrain batch order for epoch e
    (seed, 4, e)       joint-phase permutation of remaining ids for epoch e
    (seed, 5, e)       joint-phase permutation of labeled ids for epoch e
    (seed, 6, p, e)    augmenter jitter for phase p (0 pretrain, 1 joint), epoch e
    (seed, 7, r)       random-mode selection in round r
    (seed, 8)          text-fusion init

Permutations are drawn over the sorted id lists. Joint iteration ``i`` of an
epoch takes remaining ids ``perm_u[i*U:(i+1)*U]`` and labeled ids
``perm_l[(i*L + j) % n_l]`` for ``j < L``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import adas, metrics
from . import tensor as T
from . import tfm as tfm_mod
from .augment import AugmentBounds, AugmenterParams, aug_loss, augmenter_step, compose_augment
from .imgfeat import FeatureConfig, assemble_features, corpus_stats, standardize, Image
from .manifest import Corpus, config_hash
from .nn import Adam, Module, checksum_of
from .segnet import SegConfig, SegModel, ema_update, load_weights, save_weights
from .tensor import Tensor, no_grad
from .tfm import FIXED_TEXT, TextEmbedder, TextFusion, attention_target, init_codebook

PHASES = ("cold_start", "pretrain", "selection", "joint")
IOU_EPS = 1e-6


class ConfigError(ValueError):
    pass


class TrainPhaseError(RuntimeError):
    def __init__(self, phase: str, snapshot: dict, cause: Exception):
        super().__init__(f"phase {phase!r} failed: {cause!r}")
        self.phase = phase
        self.snapshot = snapshot


@dataclass
class LossConfig:
    lambda_u: float = 1.0
    lambda_u_ramp: bool = False
    pseudo_label: str = "soft"  # soft | threshold
    pseudo_threshold: float = 0.5
    seg_bce: bool = True
    seg_iou: bool = True
    seg_ssim: bool = True
    attn_rescale: bool = True

    def validate(self) -> None:
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if self.pseudo_label not in ("soft", "threshold"):
            raise ConfigError(f"pseudo_label must be soft or threshold, got {self.pseudo_label!r}")
        if self.pseudo_label == "threshold" and not 0.0 < self.pseudo_threshold < 1.0:
            raise ConfigError("pseudo_threshold must lie in (0, 1)")


@dataclass
class TrainConfig:
    seed: int = 0
    image_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    label_budget: int = 20
    cold_start_fraction: float = 0.5
    cold_start: str = "kmeans"  # kmeans | random
    selection_mode: str = "center"  # center | center_<c> | top_k_easy | top_k_hard | random | none
    selection_center: float = 0.5
    rounds: int = 1
    pretrain_epochs: int = 3
    joint_epochs: int = 10
    batch_size: int = 4
    unlabeled_batch_size: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_milestones: tuple[float, ...] = (2 / 3, 5 / 6)
    ema_momentum: float = 0.99
    ema_warmup: bool = True
    use_augmenter: bool = True
    augmenter_lr: float = 0.05
    augmenter_jitter: float = 0.0
    use_tfm: bool = True
    text_dim: int = 32
    train_codebook: bool = True
    eval_every: int = 1
    eval_text: str = "fixed"  # fixed | precise
    eval_model: str = "student"  # student | teacher
    feature_color_bins: int = 8
    feature_texture_bins: int = 16
    feature_dct_k: int = 8
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.cold_start not in ("kmeans", "random"):
            raise ConfigError(f"cold_start must be kmeans or random, got {self.cold_start!r}")
        if self.selection_mode != "none":
            try:
                adas.parse_mode(self.selection_mode, self.selection_center)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.eval_text not in ("fixed", "precise") or self.eval_model not in ("student", "teacher"):
            raise ConfigError("eval_text must be fixed|precise and eval_model student|teacher")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1)")
        if self.image_size % (2 ** len(self.channels)):
            raise ConfigError(f"image_size must be divisible by {2 ** len(self.channels)}")
        if self.label_budget < 1 or self.rounds < 1:
            raise ConfigError("label_budget and rounds must be >= 1")
        self.loss.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        for k in ("channels", "lr_milestones"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d, loss=loss)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_SSIM_KERNEL = metrics.gaussian_window()[None, None]


def ssim_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Mean local SSIM of (N, 1, H, W) maps with the metric's Gaussian window."""
    w = Tensor(_SSIM_KERNEL)
    mx, my = T.conv2d(pred, w), T.conv2d(target, w)
    sxx = T.conv2d(pred * pred, w) - mx * mx
    syy = T.conv2d(target * target, w) - my * my
    sxy = T.conv2d(pred * target, w) - mx * my
    num = (2.0 * mx * my + metrics.SSIM_C1) * (2.0 * sxy + metrics.SSIM_C2)
    den = (mx * mx + my * my + metrics.SSIM_C1) * (sxx + syy + metrics.SSIM_C2)
    return (num / den).mean()


def iou_loss(pred: Tensor, target: Tensor) -> Tensor:
    inter = (pred * target).sum(axis=(-2, -1))
    union = pred.sum(axis=(-2, -1)) + target.sum(axis=(-2, -1)) - inter
    return (1.0 - (inter + IOU_EPS) / (union + IOU_EPS)).mean()


def _as_batch(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(1, *x.shape)
    return x


def seg_loss(pred, target, cfg: LossConfig | None = None) -> Tensor:
    """BCE + IoU loss + (1 - SSIM) on (N, 1, H, W), (1, H, W) or (H, W) maps."""
    cfg = cfg or LossConfig()
    pred, target = _as_batch(T.as_tensor(pred)), _as_batch(T.as_tensor(target))
    if pred.shape != target.shape:
        raise T.DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    total = Tensor(0.0)
    if cfg.seg_bce:
        total = total + T.loss_bce(pred, target)
    if cfg.seg_iou:
        total = total + iou_loss(pred, target)
    if cfg.seg_ssim:
        total = total + (1.0 - ssim_tensor(pred, target))
    return total


def total_loss(sup: Tensor, unsup: Tensor | None, lambda_u: float) -> Tensor:
    if lambda_u < 0:
        raise ValueError("lambda_u must be >= 0")
    if unsup is None or lambda_u == 0:
        return T.as_tensor(sup) + 0.0
    return sup + lambda_u * unsup


# ---------------------------------------------------------------------------
# model branches
# ---------------------------------------------------------------------------


class Branch(Module):
    """Segmentation network with an optional text-fusion module, run on sentence vectors."""

    def __init__(self, seg: SegModel, fusion: TextFusion | None = None):
        super().__init__()
        self.seg = seg
        self.fusion = fusion

    def named_parameters(self):
        out = [("seg." + n, t) for n, t in self.seg.named_parameters()]
        if self.fusion is not None:
            out += [("tfm." + n, t) for n, t in self.fusion.named_parameters()]
        return out

    def forward(self, x, text: np.ndarray | None = None):
        """Return (mask, tfm output or None)."""
        if self.fusion is None:
            return self.seg(x), None
        holder = {}

        def fuser(feats):
            holder["out"] = self.fusion(feats, text)
            return holder["out"].fused

        mask, _ = self.seg.forward(x, fuser)
        return mask, holder["out"]

    def predictor(self, text: np.ndarray | None):
        return _Predictor(self, text)

    def copy(self) -> Branch:
        seg = SegModel(self.seg.cfg)
        seg.load_state_dict(self.seg.state_dict())
        fusion = None
        if self.fusion is not None:
            f = self.fusion
            fusion = TextFusion(f.channels, f.codebook(), f.dim, train_codebook=f.train_codebook)
            fusion.load_state_dict(f.state_dict())
        return Branch(seg, fusion)


class _Predictor:
    def __init__(self, branch: Branch, text):
        self.branch = branch
        self.text = text

    def __call__(self, x):
        return self.branch.forward(x, self.text)[0]

    def frozen(self):
        return self.branch.frozen()


@dataclass
class Models:
    student: Branch
    teacher: Branch
    embedder: TextEmbedder | None = None

    @property
    def use_tfm(self) -> bool:
        return self.student.fusion is not None


def _text_vectors(models: Models, texts: Sequence[str | None]) -> np.ndarray | None:
    if not models.use_tfm:
        return None
    return np.stack([models.embedder.embed(t or FIXED_TEXT) for t in texts])


def _top_extent(models: Models, size: int) -> int:
    return size // 2 ** models.student.seg.cfg.levels


def _tfm_terms(models: Models, out, target_masks: np.ndarray, class_words, lam_t: int, cfg: LossConfig):
    h = _top_extent(models, target_masks.shape[-1])
    target = attention_target(target_masks, h, h)
    attn = tfm_mod.attn_supervision_loss(out.attn, target, rescale=cfg.attn_rescale)
    clue = None
    if lam_t == 1:
        clue = tfm_mod.clue_loss(out.v_clue, list(class_words), models.embedder)
    return tfm_mod.tfm_loss(attn, clue, lam_t), attn, clue


@dataclass
class LabeledBatch:
    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, 1, H, W)
    class_words: list[str]
    texts: list[str]


def supervised_loss(batch: LabeledBatch, models: Models, params: AugmenterParams, cfg: LossConfig,
                    with_aug: bool = True):
    """L_s = seg(student, co-warped gt) + L_Aug + L_TFM with lambda_t = 1.

    L_Aug enters as a constant: its gradient belongs to the augmenter, which
    has its own step. ``with_aug=False`` drops the term (augmenter disabled).
    Returns the loss tensor and a dict of float components.
    """
    if batch.masks is None:
        raise ValueError("supervised batch without ground truth")
    with no_grad():
        aug = compose_augment(batch.images, batch.masks, params)
    x, y = aug.images, aug.masks
    text = _text_vectors(models, batch.texts)
    pred, out = models.student.forward(x, text)
    seg = seg_loss(pred, y, cfg)
    loss = seg
    parts = {"seg": float(seg.data), "aug": 0.0, "tfm": 0.0, "lambda_t": 1}
    if with_aug:
        with no_grad():
            t_pred = models.teacher.forward(x, text)[0]
            l_aug = aug_loss(t_pred, pred.detach(), y)
        loss = loss + l_aug.detach()
        parts["aug"] = float(l_aug.data)
    if out is not None:
        tl, _, _ = _tfm_terms(models, out, y.data, batch.class_words, 1, cfg)
        loss = loss + tl
        parts["tfm"] = float(tl.data)
    return loss, parts


def make_pseudo_labels(teacher_pred: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if cfg.pseudo_label == "threshold":
        return (teacher_pred >= cfg.pseudo_threshold).astype(np.float64)
    return teacher_pred


def unsupervised_loss(images: np.ndarray, models: Models, params: AugmenterParams, cfg: LossConfig):
    """L_u = seg(student, teacher pseudo-label) + L_TFM with lambda_t = 0 (no L_Aug)."""
    with no_grad():
        x = compose_augment(images, None, params).images
    text = _text_vectors(models, [None] * len(images))
    with no_grad():
        pseudo = make_pseudo_labels(models.teacher.forward(x, text)[0].data, cfg)
    pred, out = models.student.forward(x, text)
    seg = seg_loss(pred, Tensor(pseudo), cfg)
    loss = seg
    parts = {"seg": float(seg.data), "tfm": 0.0, "lambda_t": 0}
    if out is not None:
        tl, _, _ = _tfm_terms(models, out, pseudo, None, 0, cfg)
        loss = loss + tl
        parts["tfm"] = float(tl.data)
    return loss, parts


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    record: dict
    models: Models
    augmenter: AugmenterParams
    test_reports: dict[str, metrics.MetricReport]
    splits: dict[str, str]
    timing: dict[str, float]


def lr_at(cfg: TrainConfig, epoch: int, n_epochs: int) -> float:
    lr = cfg.lr
    for frac in cfg.lr_milestones:
        if n_epochs and epoch >= frac * n_epochs:
            lr *= cfg.lr_decay
    return lr


def lambda_u_at(cfg: TrainConfig, epoch: int) -> float:
    lu = cfg.loss.lambda_u
    if cfg.loss.lambda_u_ramp and cfg.joint_epochs:
        ramp = max(1, math.ceil(0.2 * cfg.joint_epochs))
        lu *= min(1.0, (epoch + 1) / ramp)
    return lu


def ema_momentum_at(cfg: TrainConfig, iteration: int) -> float:
    """min(1 - 1/(t + 1), m): the teacher tracks the student closely while few steps exist."""
    if not cfg.ema_warmup:
        return cfg.ema_momentum
    return min(1.0 - 1.0 / (iteration + 1), cfg.ema_momentum)


def build_models(cfg: TrainConfig, class_words: Sequence[str]) -> Models:
    seg = SegModel(SegConfig(channels=tuple(cfg.channels)), seed=[cfg.seed, 2])
    fusion = None
    embedder = None
    if cfg.use_tfm:
        embedder = TextEmbedder(cfg.text_dim, seed=cfg.seed)
        book = init_codebook(class_words, embedder)
        fusion = TextFusion(cfg.channels, book, cfg.text_dim, seed=[cfg.seed, 8], train_codebook=cfg.train_codebook)
    student = Branch(seg, fusion)
    return Models(student, student.copy(), embedder)


def predict(models: Models, corpus: Corpus, ids: Sequence[str], which: str = "student", text: str = "fixed",
            batch_size: int = 16) -> np.ndarray:
    branch = models.student if which == "student" else models.teacher
    outs = []
    with no_grad():
        for s in range(0, len(ids), batch_size):
            chunk = list(ids[s : s + batch_size])
            texts = [corpus.referring_text(i) if text == "precise" else None for i in chunk]
            outs.append(branch.forward(corpus.images(chunk), _text_vectors(models, texts))[0].data[:, 0])
    return np.concatenate(outs) if outs else np.zeros((0, corpus.size, corpus.size))


def evaluate_split(models: Models, corpus: Corpus, ids: Sequence[str], cfg: TrainConfig):
    preds = predict(models, corpus, ids, cfg.eval_model, cfg.eval_text)
    return {i: metrics.evaluate(p, corpus.mask(i)) for i, p in zip(ids, preds)}


class Trainer:
    def __init__(self, cfg: TrainConfig, corpus: Corpus):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus
        self.bounds = AugmentBounds()
        self.augmenter = AugmenterParams.identity()
        self.models: Models | None = None
        self.opt: Adam | None = None
        self.iteration = 0
        self.history: list[dict] = []
        self.epochs: list[dict] = []
        self.phases: list[dict] = []
        self.selection: dict = {"rounds": []}
        self.timing: dict[str, float] = {}
        self.feature_stats: dict | None = None

    # -- helpers -------------------------------------------------------
    def _rng(self, *stream) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, *stream])

    def _labeled_batch(self, ids: Sequence[str]) -> LabeledBatch:
        c = self.corpus
        return LabeledBatch(
            c.images(ids), c.masks(ids), [c.class_word(i) for i in ids], [c.referring_text(i) for i in ids]
        )

    def _new_optimizer(self) -> None:
        self.opt = Adam(self.models.student.parameters(), lr=self.cfg.lr)

    def _applied_params(self, jitter: np.ndarray | None) -> AugmenterParams:
        if not self.cfg.use_augmenter:
            return AugmenterParams.identity()
        if jitter is None:
            return self.augmenter
        return AugmenterParams.from_vector(self.augmenter.vector() + jitter).project(self.bounds)

    def _jitter(self, phase: int, epoch: int) -> np.ndarray | None:
        if not self.cfg.use_augmenter or self.cfg.augmenter_jitter <= 0:
            return None
        return self._rng(6, phase, epoch).normal(0.0, self.cfg.augmenter_jitter, size=9)

    def _step(self, phase: str, epoch: int, lab_ids, unl_ids, lam_u: float, lr: float, jitter) -> None:
        cfg, models = self.cfg, self.models
        params = self._applied_params(jitter)
        lab = self._labeled_batch(lab_ids)
        self.opt.zero_grad()
        sup, sp = supervised_loss(lab, models, params, cfg.loss, cfg.use_augmenter)
        unsup, up = (None, {})
        if len(unl_ids) and lam_u > 0:
            unsup, up = unsupervised_loss(self.corpus.images(unl_ids), models, params, cfg.loss)
        loss = total_loss(sup, unsup, lam_u)
        T.backward(loss)
        self.opt.lr = lr
        self.opt.step()
        entry = {
            "iter": self.iteration,
            "phase": phase,
            "epoch": epoch,
            "loss": float(loss.data),
            "sup": float(sup.data),
            "unsup": float(unsup.data) if unsup is not None else 0.0,
            "seg_s": sp["seg"],
            "aug": sp["aug"],
            "tfm_s": sp["tfm"],
            "seg_u": up.get("seg", 0.0),
            "tfm_u": up.get("tfm", 0.0),
        }
        if cfg.use_augmenter:
            text = _text_vectors(models, lab.texts)
            self.augmenter, info = augmenter_step(
                self.augmenter,
                (lab.images, lab.masks),
                models.teacher.predictor(text),
                models.student.predictor(text),
                cfg.augmenter_lr,
                self.bounds,
            )
            entry["aug_step"] = info.loss_after
        ema_update(models.teacher, models.student, ema_momentum_at(cfg, self.iteration))
        self.history.append(entry)
        self.iteration += 1

    def _phase(self, name: str):
        trainer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                self.start = trainer.iteration
                return self

            def __exit__(self, et, ev, tb):
                trainer.timing[name] = trainer.timing.get(name, 0.0) + time.perf_counter() - self.t0
                snap = trainer.snapshot() if ev is not None else None
                entry = {"name": name, "start_iter": self.start, "end_iter": trainer.iteration}
                if ev is not None:
                    entry["failed"] = True
                trainer.phases.append(entry)
                if ev is not None and not isinstance(ev, TrainPhaseError):
                    raise TrainPhaseError(name, snap, ev) from ev
                return False

        return _Ctx()

    def snapshot(self) -> dict:
        return {
            "iteration": self.iteration,
            "phases_done": [p["name"] for p in self.phases if not p.get("failed")],
            "labeled": self.corpus.ids("labeled"),
            "augmenter": self.augmenter.to_dict(),
        }

    # -- phases --------------------------------------------------------
    def cold_start(self, n0: int) -> list[str]:
        cfg = self.cfg
        pool = self.corpus.ids("unlabeled")
        n0 = min(n0, len(pool))
        if cfg.cold_start == "random":
            chosen = sorted(self._rng(1).choice(pool, size=n0, replace=False).tolist())
        else:
            fcfg = FeatureConfig(cfg.feature_color_bins, cfg.feature_texture_bins, cfg.feature_dct_k)
            feats = np.stack(
                [assemble_features(Image(self.corpus.image(i).transpose(1, 2, 0)), fcfg).values for i in pool]
            )
            stats = corpus_stats(feats)
            self.feature_stats = {**stats.to_dict(), "resolution": cfg.image_size}
            chosen = adas.kmeans_init(standardize(feats, stats), n0, seed=[cfg.seed, 1], ids=pool)
        self.corpus.reveal(chosen)
        self.selection["cold_start"] = {"mode": cfg.cold_start, "ids": list(chosen)}
        return chosen

    def supervised_epochs(self, n_epochs: int, stream: int = 3) -> None:
        cfg = self.cfg
        labeled = self.corpus.ids("labeled")
        for e in range(n_epochs):
            jitter = self._jitter(0, e)
            perm = self._rng(stream, e).permutation(len(labeled))
            losses = []
            for s in range(0, len(labeled), cfg.batch_size):
                ids = [labeled[j] for j in perm[s : s + cfg.batch_size]]
                self._step("pretrain", e, ids, [], 0.0, cfg.lr, jitter)
                losses.append(self.history[-1]["loss"])
            self.epochs.append({"phase": "pretrain", "epoch": e, "mean_loss": float(np.mean(losses))})

    def selection_round(self, r: int, budget: int) -> None:
        cfg = self.cfg
        pool = self.corpus.ids("unlabeled")
        budget = min(budget, len(pool))
        models = self.models
        text = _text_vectors(models, [None]) if models.use_tfm else None

        def pred(branch):
            return lambda x: branch.forward(x, None if text is None else np.repeat(text, x.shape[0], axis=0))[0]

        res = adas.run_selection_round(
            [(i, self.corpus.image(i)) for i in pool],
            pred(models.teacher),
            pred(models.student),
            self._applied_params(None),
            budget,
            cfg.selection_mode,
            cfg.selection_center,
            seed=[cfg.seed, 7, r],
        )
        self.corpus.reveal(res.selected)
        self.selection["rounds"].append(
            {
                "round": r,
                "mode": res.mode,
                "center": res.center,
                "budget": budget,
                "selected": res.selected,
                "reports": [asdict(rep) for rep in res.reports],
            }
        )
        if models.use_tfm:
            words = [self.corpus.class_word(i) for i in res.selected]
            added = models.student.fusion.extend_codebook(words, models.embedder)
            if added:
                models.teacher.fusion.extend_codebook(words, models.embedder)
                self._new_optimizer()

    def joint_epochs(self) -> None:
        cfg = self.cfg
        labeled = self.corpus.ids("labeled")
        rest = self.corpus.ids("unlabeled", "remaining")
        test_ids = self.corpus.ids("test")
        n_l = len(labeled)
        L, U = cfg.batch_size, cfg.unlabeled_batch_size
        for e in range(cfg.joint_epochs):
            lr = lr_at(cfg, e, cfg.joint_epochs)
            lam_u = lambda_u_at(cfg, e)
            jitter = self._jitter(1, e)
            perm_u = self._rng(4, e).permutation(len(rest))
            perm_l = self._rng(5, e).permutation(n_l)
            n_iter = math.ceil(len(rest) / U) if rest else math.ceil(n_l / L)
            losses = []
            for i in range(n_iter):
                unl = [rest[j] for j in perm_u[i * U : (i + 1) * U]]
                lab = [labeled[perm_l[(i * L + j) % n_l]] for j in range(min(L, n_l))]
                self._step("joint", e, lab, unl, lam_u, lr, jitter)
                losses.append(self.history[-1]["loss"])
            epoch = {"phase": "joint", "epoch": e, "lr": lr, "lambda_u": lam_u, "mean_loss": float(np.mean(losses))}
            if test_ids and cfg.eval_every and (e + 1) % cfg.eval_every == 0:
                reps = evaluate_split(self.models, self.corpus, test_ids, cfg)
                epoch["test"] = metrics.mean_report(list(reps.values())).to_dict()
            self.epochs.append(epoch)

    # -- driver --------------------------------------------------------
    def run(self) -> TrainResult:
        cfg = self.cfg
        pool = self.corpus.ids("unlabeled")
        if not pool and not self.corpus.ids("labeled"):
            raise ConfigError("corpus has no training samples")
        budget = min(cfg.label_budget, len(pool))
        selecting = cfg.selection_mode != "none"
        n0 = budget if not selecting else max(1, int(round(budget * cfg.cold_start_fraction)))

        with self._phase("cold_start"):
            if pool:
                self.cold_start(n0)
        with self._phase("pretrain"):
            self.models = build_models(cfg, [self.corpus.class_word(i) for i in self.corpus.ids("labeled")])
            self._new_optimizer()
            self.supervised_epochs(cfg.pretrain_epochs)
        with self._phase("selection"):
            remaining_budget = budget - len(self.selection.get("cold_start", {}).get("ids", []))
            if selecting and remaining_budget > 0:
                per_round = [remaining_budget // cfg.rounds + (r < remaining_budget % cfg.rounds) for r in range(cfg.rounds)]
                for r, b in enumerate(per_round):
                    if r > 0:
                        self.supervised_epochs(cfg.pretrain_epochs, stream=30 + r)
                    self.selection_round(r, b)
            for i in self.corpus.ids("unlabeled"):
                self.corpus.splits[i] = "remaining"
        with self._phase("joint"):
            self.joint_epochs()

        test_ids = self.corpus.ids("test")
        reports = evaluate_split(self.models, self.corpus, test_ids, cfg) if test_ids else {}
        record = self.record(reports)
        return TrainResult(record, self.models, self.augmenter, reports, dict(self.corpus.splits), self.timing)

    def record(self, reports: dict[str, metrics.MetricReport]) -> dict:
        cfg = self.cfg
        m = self.models
        final = metrics.mean_report(list(reports.values())).to_dict() if reports else None
        return {
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg.to_dict()),
            "seed": cfg.seed,
            "phases": self.phases,
            "selection": self.selection,
            "label_cost": self.corpus.label_cost,
            "splits": {s: self.corpus.ids(s) for s in ("labeled", "remaining", "test")},
            "feature_stats": self.feature_stats,
            "rounds": cfg.rounds,
            "epochs": self.epochs,
            "history": self.history,
            "augmenter": self.augmenter.to_dict(),
            "codebook_words": m.student.fusion.words if m.use_tfm else [],
            "checksums": {"student": m.student.checksum(), "teacher": m.teacher.checksum(),
                          "all": checksum_of(m.student, m.teacher)},
            "test_metrics": final,
        }


def train_run(cfg: TrainConfig, corpus: Corpus) -> TrainResult:
    return Trainer(cfg, corpus).run()


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _branch_meta(branch: Branch) -> dict | None:
    f = branch.fusion
    if f is None:
        return None
    out = {"channels": list(f.channels), "dim": f.dim, "train_codebook": f.train_codebook, "words": list(f.words)}
    if not f.train_codebook:
        out["codebook"] = f.codebook().to_json()
    return out


def save_models(path, cfg: TrainConfig, models: Models, augmenter: AugmenterParams) -> None:
    """Write teacher and student branches; the augmenter and model layout go in the header."""
    meta = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg.to_dict()),
        "image_size": cfg.image_size,
        "seg": {"channels": list(cfg.channels)},
        "embedder_seed": models.embedder.seed if models.embedder else None,
        "text_dim": models.embedder.dim if models.embedder else None,
        "tfm": {"student": _branch_meta(models.student), "teacher": _branch_meta(models.teacher)},
        "augmenter": augmenter.to_dict(),
    }
    save_weights(path, {"teacher": models.teacher, "student": models.student}, meta)


def _branch_from(meta_seg: dict, tmeta: dict | None, state: dict[str, np.ndarray]) -> Branch:
    seg = SegModel(SegConfig(channels=tuple(meta_seg["channels"])))
    fusion = None
    if tmeta is not None:
        if tmeta["train_codebook"]:
            book = tfm_mod.Codebook(tmeta["words"], state["tfm.codebook"])
        else:
            book = tfm_mod.Codebook.from_json(tmeta["codebook"])
        fusion = TextFusion(tmeta["channels"], book, tmeta["dim"], train_codebook=tmeta["train_codebook"])
    branch = Branch(seg, fusion)
    branch.load_state_dict(state)
    return branch


def load_models(path) -> tuple[dict, Models, AugmenterParams]:
    meta, states = load_weights(path)
    for sec in ("teacher", "student"):
        if sec not in states:
            raise ValueError(f"{path}: missing section {sec!r}")
    student = _branch_from(meta["seg"], meta["tfm"]["student"], states["student"])
    teacher = _branch_from(meta["seg"], meta["tfm"]["teacher"], states["teacher"])
    embedder = None
    if student.fusion is not None:
        embedder = TextEmbedder(meta["text_dim"], seed=meta["embedder_seed"])
    return meta, Models(student, teacher, embedder), AugmenterParams.from_dict(meta["augmenter"])
