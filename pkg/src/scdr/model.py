"""Two-branch recognition model: capture, discrimination, vote fusion, training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import backbone
from .backbone import Branch, EmbeddingConfig, build_branch
from .capture import CamResult, capture
from .discriminate import DiscConfig, disc_loss, mine_all, score_matrix
from .errors import BatchError, ConfigError
from .ops import cross_entropy, softmax
from .optim import LrSchedule, sgd_step
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    whole: float = 1.0
    local: float = 0.5
    disc: float = 0.5
    fuse: float = 1.0

    def __post_init__(self):
        if min(self.whole, self.local, self.disc, self.fuse) < 0:
            raise ConfigError(f"loss weights must be ≥ 0, got {self}")


BASELINE_WEIGHTS = LossWeights(whole=1.0, local=0.0, disc=0.0, fuse=0.0)


@dataclass
class LossBreakdown:
    l_whole: float
    l_local: float
    l_disc: float
    l_fuse: float
    total: float

    def recompose(self, w: LossWeights) -> float:
        return w.whole * self.l_whole + w.local * self.l_local + w.disc * self.l_disc + w.fuse * self.l_fuse


@dataclass
class SCDRModel:
    whole: Branch
    local: Branch
    votes: Tensor  # logits of the whole/local voting weights
    mu: float = 1.0
    disc: DiscConfig = field(default_factory=DiscConfig)

    @property
    def config(self) -> EmbeddingConfig:
        return self.whole.config

    def named_parameters(self) -> dict[str, Tensor]:
        named = {f"whole.{k}": v for k, v in self.whole.named_parameters().items()}
        named.update({f"local.{k}": v for k, v in self.local.named_parameters().items()})
        named["votes"] = self.votes
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def build_model(config: EmbeddingConfig, seed: int, mu: float = 1.0, margin: float = 0.3) -> SCDRModel:
    """Both branches get independent parameters derived from ``seed``."""
    s_whole, s_local = np.random.SeedSequence(seed).generate_state(2)
    return SCDRModel(
        whole=build_branch(config, int(s_whole)),
        local=build_branch(config, int(s_local)),
        votes=Tensor(np.zeros(2, dtype=np.float32), requires_grad=True),
        mu=mu,
        disc=DiscConfig(margin),
    )


def fuse_predictions(p_whole, p_local, votes) -> Tensor:
    """Convex combination ``a_w p_whole + a_l p_local`` with ``(a_w, a_l) = softmax(votes)``."""
    pw = p_whole if isinstance(p_whole, Tensor) else Tensor(p_whole)
    pl = p_local if isinstance(p_local, Tensor) else Tensor(p_local)
    v = votes if isinstance(votes, Tensor) else Tensor(votes)
    a = softmax(v)
    return a[0] * pw + a[1] * pl


@dataclass
class StepResult:
    total: Tensor
    losses: LossBreakdown
    captures: list[CamResult]
    outcomes: list


def compute_losses(model: SCDRModel, images: np.ndarray, labels: np.ndarray, weights: LossWeights,
                   local_images: np.ndarray | None = None) -> StepResult:
    """Forward both branches on a batch and assemble the weighted total loss.

    ``local_images`` overrides the capture step (used to freeze masks when
    differentiating numerically).
    """
    labels = np.asarray(labels, dtype=np.int64)
    out_w = backbone.forward(model.whole, images)
    if local_images is None:
        captures = [capture(out_w.maps.data[i], out_w.prob.data[i], model.whole.head, images[i], model.mu)
                    for i in range(len(images))]
        local_images = np.stack([c.local_image for c in captures])
    else:
        captures = []
    out_l = backbone.forward(model.local, np.asarray(local_images, dtype=images.dtype))

    l_whole = cross_entropy(out_w.prob, labels)
    l_local = cross_entropy(out_l.prob, labels)
    scores = score_matrix(out_w.maps, out_l.maps, labels)
    outcomes = mine_all(scores)
    l_disc = disc_loss(scores, outcomes, model.disc)
    fused = fuse_predictions(out_w.prob.detach(), out_l.prob.detach(), model.votes)
    l_fuse = cross_entropy(fused, labels)

    total = l_whole * weights.whole + l_local * weights.local + l_disc * weights.disc + l_fuse * weights.fuse
    losses = LossBreakdown(l_whole.item(), l_local.item(), l_disc.item(), l_fuse.item(), total.item())
    return StepResult(total, losses, captures, outcomes)


def train_step(model: SCDRModel, images: np.ndarray, labels: np.ndarray, weights: LossWeights,
               epoch: int, schedule: LrSchedule) -> LossBreakdown:
    labels = np.asarray(labels)
    counts = np.unique(labels, return_counts=True)[1]
    if len(counts) < 2 or counts.min() < 2:
        raise BatchError(f"batch needs ≥ 2 classes with ≥ 2 samples each, got counts {counts.tolist()}")
    step = compute_losses(model, images, labels, weights)
    step.total.backward()
    sgd_step(model.parameters(), epoch, schedule)
    return step.losses


# inference ---------------------------------------------------------------


@dataclass
class Prediction:
    label: int
    prob: np.ndarray
    cam: CamResult
    p_whole: np.ndarray
    p_local: np.ndarray


def predict_batch(model: SCDRModel, images: np.ndarray) -> list[Prediction]:
    images = np.asarray(images, dtype=np.float32)
    out_w = backbone.forward(model.whole, images)
    cams = [capture(out_w.maps.data[i], out_w.prob.data[i], model.whole.head, images[i], model.mu)
            for i in range(len(images))]
    out_l = backbone.forward(model.local, np.stack([c.local_image for c in cams]).astype(np.float32))
    fused = fuse_predictions(out_w.prob.detach(), out_l.prob.detach(), model.votes.detach()).data
    return [Prediction(int(np.argmax(fused[i])), fused[i], cams[i], out_w.prob.data[i], out_l.prob.data[i])
            for i in range(len(images))]


def predict(model: SCDRModel, image: np.ndarray) -> tuple[int, np.ndarray, CamResult]:
    """Whole branch -> capture -> local branch -> fused argmax (lowest index on ties)."""
    p = predict_batch(model, np.asarray(image)[None])[0]
    return p.label, p.prob, p.cam


# training loop -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_classes: int = 4
    batch_per_class: int = 4
    schedule: LrSchedule = field(default_factory=LrSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


def epoch_batches(labels: np.ndarray, batch_classes: int, batch_per_class: int, seed: int,
                  epoch: int) -> list[np.ndarray]:
    """Class-balanced P×Q batches; ``ceil(n / (P·Q))`` of them per epoch.

    The stream depends only on (seed, epoch), so resuming at an epoch
    boundary replays the same batches.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    p = min(batch_classes, len(classes))
    q = min(batch_per_class, int(min(np.sum(labels == c) for c in classes)))
    if p < 2 or q < 2:
        raise BatchError(f"cannot form class-balanced batches (P={p}, Q={q})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
    n_batches = math.ceil(len(labels) / (p * q))
    pools = {int(c): np.flatnonzero(labels == c) for c in classes}
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(classes, size=p, replace=False)
        batches.append(np.concatenate([rng.choice(pools[int(c)], size=q, replace=False) for c in chosen]))
    return batches


@dataclass
class EpochLog:
    epoch: int
    l_whole: float
    l_local: float
    l_disc: float
    l_fuse: float
    total: float
    lr: float

    def as_row(self) -> dict:
        return asdict(self)


def train(model: SCDRModel, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          start_epoch: int = 0, on_epoch_end: Callable[[int, EpochLog], None] | None = None) -> list[EpochLog]:
    """Run epochs ``start_epoch .. config.epochs - 1``; returns one log row per epoch."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("empty training set")
    if len(np.unique(labels)) < 2:
        raise ConfigError("training needs at least two classes (discrimination loss undefined)")
    images = np.asarray(images, dtype=np.float32)
    log = []
    for epoch in range(start_epoch, config.epochs):
        parts = []
        for idx in epoch_batches(labels, config.batch_classes, config.batch_per_class, config.seed, epoch):
            parts.append(train_step(model, images[idx], labels[idx], config.weights, epoch, config.schedule))
        mean = {k: float(np.mean([getattr(b, k) for b in parts]))
                for k in ("l_whole", "l_local", "l_disc", "l_fuse", "total")}
        row = EpochLog(epoch=epoch, lr=config.schedule.lr(epoch), **mean)
        log.append(row)
        if on_epoch_end is not None:
            on_epoch_end(epoch, row)
    return log


# evaluation ----------------------------------------------------------------


@dataclass
class Metrics:
    per_class_accuracy: dict[int, float]
    average: float
    confusion: list[list[int]]
    counts: dict[int, int]
    omitted_classes: list[int] = field(default_factory=list)
    mask_iou: float | None = None
    disk_iou: float | None = None
    mode: str = "fused"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return d


def metrics_from_predictions(y_true, y_pred, num_classes: int, mode: str = "fused") -> Metrics:
    y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    counts = confusion.sum(axis=1)
    per_class = {c: float(confusion[c, c] / counts[c]) for c in range(num_classes) if counts[c] > 0}
    omitted = [c for c in range(num_classes) if counts[c] == 0]
    average = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return Metrics(per_class, average, confusion.tolist(), {c: int(counts[c]) for c in range(num_classes)},
                   omitted, mode=mode)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def centered_disk(area: float, size: tuple[int, int]) -> np.ndarray:
    """Disk at the image centre whose pixel count approximates ``area``."""
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy - (H - 1) / 2) ** 2 + (xx - (W - 1) / 2) ** 2
    order = np.argsort(d2, axis=None, kind="stable")
    disk = np.zeros(H * W, dtype=bool)
    disk[order[:int(round(area))]] = True
    return disk.reshape(H, W)


def evaluate(model: SCDRModel, images: np.ndarray, labels: np.ndarray, glyph_masks: np.ndarray | None = None,
             mode: str = "fused", batch_size: int = 64) -> Metrics:
    """Per-class and macro-average accuracy, confusion matrix, optional mask IoU.

    ``mode`` selects the prediction: fused vote, whole branch or local branch.
    """
    if mode not in ("fused", "whole", "local"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    images = np.asarray(images, dtype=np.float32)
    preds, ious, disks = [], [], []
    for start in range(0, len(images), batch_size):
        batch = predict_batch(model, images[start:start + batch_size])
        for j, p in enumerate(batch):
            prob = {"fused": p.prob, "whole": p.p_whole, "local": p.p_local}[mode]
            preds.append(int(np.argmax(prob)))
            if glyph_masks is not None:
                truth = glyph_masks[start + j]
                ious.append(iou(p.cam.mask, truth))
                disks.append(iou(centered_disk(p.cam.mask.sum(), truth.shape), truth))
    m = metrics_from_predictions(labels, preds, model.config.num_classes, mode)
    if glyph_masks is not None and ious:
        m.mask_iou = float(np.mean(ious))
        m.disk_iou = float(np.mean(disks))
    return m
