"""Per-branch loss: label-smoothed ID loss + soft-margin batch-hard triplet + weighted center loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, IndexOutOfRange, NonFiniteInput, ShapeMismatch
from .tensor import Tensor


@dataclass
class LossConfig:
    num_classes: int
    center_weight: float = 5e-4
    epsilon: float = 0.1
    center_lr: float = 0.5

    def __post_init__(self):
        if self.center_weight < 0:
            raise ValueError("center_weight must be >= 0")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


@dataclass
class CenterTable:
    """One (num_classes, dim) center matrix per branch; updated outside the optimizer."""

    centers: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 0.5

    @classmethod
    def zeros(cls, dims: dict[str, int], num_classes: int, lr: float = 0.5) -> "CenterTable":
        return cls({name: np.zeros((num_classes, d)) for name, d in dims.items()}, lr)

    def __getitem__(self, branch: str) -> np.ndarray:
        return self.centers[branch]

    def update(self, branch: str, features: np.ndarray, labels) -> None:
        self.centers[branch] = update_centers(features, labels, self.centers[branch], self.lr)


@dataclass
class BatchSpec:
    P: int
    K: int

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise DegenerateBatch("P x K batches need P >= 2 and K >= 2")

    @property
    def size(self) -> int:
        return self.P * self.K


def smoothing_weights(num_classes, epsilon):
    """(true-class weight, other-class weight).  Works on floats and Fractions alike."""
    return 1 - epsilon * (num_classes - 1) / num_classes, epsilon / num_classes


def _float_weights(num_classes: int, epsilon: float) -> tuple[float, float]:
    # on = 1 - (C - 1) * off rounded once, so the exact sum of the float
    # vector is within half an ulp of 1 and math.fsum returns exactly 1.0
    off = float(epsilon) / num_classes
    return float(1 - (num_classes - 1) * Fraction(off)), off


def smoothed_targets(y: int, num_classes: int, epsilon: float) -> np.ndarray:
    if not 0 <= y < num_classes:
        raise IndexOutOfRange(f"label {y} outside [0, {num_classes})")
    on, off = _float_weights(num_classes, epsilon)
    q = np.full(num_classes, off, dtype=np.float64)
    q[y] = on
    return q


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if len(labels) != n:
        raise ShapeMismatch(f"{len(labels)} labels for {n} samples")
    return labels


def id_loss(logits, labels, epsilon: float = 0.1) -> Tensor:
    """Batch mean of the cross-entropy against smoothed targets."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    labels = _labels(labels, n)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise IndexOutOfRange(f"labels must lie in [0, {c})")
    on, off = _float_weights(c, epsilon)
    q = np.full((n, c), off)
    q[np.arange(n), labels] = on
    return -(T.log_softmax(logits, axis=1) * q).sum() / n


def _check_triplet_batch(labels: np.ndarray) -> None:
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise DegenerateBatch("triplet loss needs at least two identities in the batch")
    if counts.min() < 2:
        raise DegenerateBatch(f"identity {values[counts.argmin()]} appears only once in the batch")


def _distance(sq: Tensor) -> Tensor:
    # sqrt with d(0) = 0 and zero gradient there (duplicates are legal)
    zero = (sq.data == 0).astype(np.float64)
    return T.sqrt(sq + zero) * (1.0 - zero)


def pairwise_sq_dists(features: Tensor) -> Tensor:
    n, d = features.shape
    diff = features.reshape(n, 1, d) - features.reshape(1, n, d)
    return (diff * diff).sum(axis=2)


def triplet_loss(features, labels) -> Tensor:
    """Sum over anchors of softplus(hardest positive - hardest negative) Euclidean distance.

    The anchor counts as its own positive (distance 0).  Hard examples are
    selected on the current values; ties go to the lowest batch index.
    """
    features = T.as_tensor(features)
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be (N, d), got {features.shape}")
    n = features.shape[0]
    labels = _labels(labels, n)
    _check_triplet_batch(labels)

    sq = pairwise_sq_dists(features)
    same = labels[:, None] == labels[None, :]
    pos_idx = np.where(same, sq.data, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, sq.data).argmin(axis=1)
    rows = np.arange(n)
    d_pos = _distance(sq[rows, pos_idx])
    d_neg = _distance(sq[rows, neg_idx])
    return T.softplus(d_pos - d_neg).sum()


def center_loss(features, labels, centers: np.ndarray) -> Tensor:
    """Half the summed squared distance of each feature to its identity's center."""
    features = T.as_tensor(features)
    n = features.shape[0]
    labels = _labels(labels, n)
    centers = np.asarray(centers, dtype=np.float64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= len(centers):
        raise IndexOutOfRange(f"labels must index one of {len(centers)} centers")
    if centers.shape[1:] != features.shape[1:]:
        raise ShapeMismatch(f"centers {centers.shape} do not match features {features.shape}")
    diff = features - centers[labels]
    return (diff * diff).sum() * 0.5


def update_centers(features, labels, centers: np.ndarray, lr_c: float) -> np.ndarray:
    """Move each referenced center by lr_c times the mean offset of its batch members."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    labels = _labels(labels, len(feats))
    centers = np.asarray(centers, dtype=np.float64)
    new = centers.copy()
    for label in np.unique(labels):
        if not 0 <= label < len(centers):
            raise IndexOutOfRange(f"label {label} has no center")
        members = feats[labels == label]
        new[label] = centers[label] + lr_c * (members - centers[label]).mean(axis=0)
    return new


def total_loss(outputs, labels, centers: CenterTable, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Unweighted sum over branches of ID + triplet + lambda * center.

    Returns the scalar loss and a ``{branch: {term: value}}`` breakdown.
    """
    total = None
    breakdown: dict[str, dict[str, float]] = {}
    for bf in outputs:
        terms = {}
        for term, fn in (
            ("id", lambda: id_loss(bf.logits, labels, cfg.epsilon)),
            ("triplet", lambda: triplet_loss(bf.f, labels)),
            ("center", lambda: center_loss(bf.f, labels, centers[bf.branch_id])),
        ):
            try:
                terms[term] = fn()
            except NonFiniteInput as exc:
                raise NonFiniteInput(f"branch {bf.branch_id} term {term}: {exc}") from exc
        branch_loss = terms["id"] + terms["triplet"] + terms["center"] * cfg.center_weight
        breakdown[bf.branch_id] = {k: v.item() for k, v in terms.items()}
        breakdown[bf.branch_id]["total"] = branch_loss.item()
        total = branch_loss if total is None else total + branch_loss
    return total, breakdown
