"""Cross-branch cosine scores, hardest-pair mining and the margin hinge loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateVectorError, DimensionError, NumericError
from .ops import l2_normalize_rows
from .tensor import Tensor, stack

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscConfig:
    margin: float = 0.3

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be ≥ 0, got {self.margin}")


@dataclass
class ScoreMatrix:
    """``values[i, j]`` = cos(whole features of i, local features of j)."""

    values: Tensor  # B×B
    labels: np.ndarray
    whole_units: Tensor  # B×d
    local_units: Tensor  # B×d


@dataclass(frozen=True)
class MiningOutcome:
    anchor: int
    hardest_negative: int
    hardest_positive: int
    l_neg: float
    l_pos: float
    valid: bool


def _as_batch(maps) -> Tensor:
    if isinstance(maps, Tensor):
        return maps
    return stack(list(maps))


def score_matrix(whole_maps, local_maps, labels) -> ScoreMatrix:
    """Cosine similarity of every whole-branch/local-branch feature pair.

    ``whole_maps`` and ``local_maps`` are lists of h×w×c maps (or stacked
    B×h×w×c tensors).  The result stays connected to both branches.
    """
    whole, local = _as_batch(whole_maps), _as_batch(local_maps)
    labels = np.asarray(labels)
    if whole.shape != local.shape:
        raise DimensionError(f"whole maps {whole.shape} and local maps {local.shape} differ")
    b = whole.shape[0]
    if b < 2:
        raise DimensionError(f"need a batch of at least 2, got {b}")
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape} labels for a batch of {b}")
    try:
        wu = l2_normalize_rows(whole.reshape(b, -1))
    except DegenerateVectorError as exc:
        raise DegenerateVectorError(f"whole branch: {exc}") from None
    try:
        lu = l2_normalize_rows(local.reshape(b, -1))
    except DegenerateVectorError as exc:
        raise DegenerateVectorError(f"local branch: {exc}") from None
    return ScoreMatrix(values=wu @ lu.T, labels=labels, whole_units=wu, local_units=lu)


def mine(scores: ScoreMatrix, anchor: int) -> MiningOutcome:
    """Most similar other-class sample and least similar same-class sample.

    The anchor itself is never a positive candidate.  Ties resolve to the
    lowest index.  A missing candidate set gives ``valid=False`` and -1.
    """
    values = scores.values.data
    labels = scores.labels
    b = len(labels)
    if not 0 <= anchor < b:
        raise IndexError(f"anchor {anchor} outside batch of {b}")
    row = values[anchor]
    neg = np.flatnonzero(labels != labels[anchor])
    pos = np.flatnonzero((labels == labels[anchor]) & (np.arange(b) != anchor))
    hn = int(neg[np.argmax(row[neg])]) if neg.size else -1
    hp = int(pos[np.argmin(row[pos])]) if pos.size else -1
    return MiningOutcome(
        anchor=anchor,
        hardest_negative=hn,
        hardest_positive=hp,
        l_neg=float(row[hn]) if hn >= 0 else float("nan"),
        l_pos=float(row[hp]) if hp >= 0 else float("nan"),
        valid=hn >= 0 and hp >= 0,
    )


def mine_all(scores: ScoreMatrix) -> list[MiningOutcome]:
    return [mine(scores, i) for i in range(len(scores.labels))]


def margin_hinge(l_neg, l_pos, margin: float):
    """``max(l_neg + margin - l_pos, 0)`` for floats, arrays or tensors."""
    if isinstance(l_neg, Tensor) or isinstance(l_pos, Tensor):
        return (l_neg + margin - l_pos).relu()
    return np.maximum(np.asarray(l_neg) + margin - np.asarray(l_pos), 0.0)


def pair_similarity(scores: ScoreMatrix, anchors, others) -> Tensor:
    """Sum of the elementwise product of unit whole/local features."""
    return (scores.whole_units[anchors] * scores.local_units[others]).sum(axis=1)


def disc_loss(scores: ScoreMatrix, outcomes: Sequence[MiningOutcome], config: DiscConfig = DiscConfig()) -> Tensor:
    """Mean hinge over valid anchors; exact 0 (and a warning) if none are valid."""
    valid = [o for o in outcomes if o.valid]
    if not valid:
        logger.warning("no valid anchor in batch; discrimination loss set to 0")
        return Tensor(np.zeros((), dtype=scores.values.dtype))
    a = np.array([o.anchor for o in valid])
    n = np.array([o.hardest_negative for o in valid])
    p = np.array([o.hardest_positive for o in valid])
    l_neg = pair_similarity(scores, a, n)
    l_pos = pair_similarity(scores, a, p)
    table = scores.values.data
    if not (np.allclose(l_neg.data, table[a, n], rtol=0, atol=1e-6)
            and np.allclose(l_pos.data, table[a, p], rtol=0, atol=1e-6)):
        raise NumericError("product-sum similarities disagree with the score matrix")
    return margin_hinge(l_neg, l_pos, config.margin).mean()
