"""
Training objectives.

    L_cls = 1/C sum_c [ l_c softplus(-p_c) + (1 - l_c) softplus(p_c) ]
    L_aux = 1/N+ sum_R+ (1 - sigmoid(a)) + 1/N- sum_R- sigmoid(a)
    L_seg = softmax cross-entropy over labeled pixels
    L_reg = sum w(i, j) |s(i, j) - s(neighbor)| / (H W C'),  w = exp(-|dI|^2 / sigma_r^2)
    L     = lambda1 (L_scd + L_seg + L_equ + L_aux) + lambda2 L_reg + lambda3 L_cls

Losses that can have no support (no labeled pixels, no reliable pairs)
return (loss, valid) with a zero loss when valid is False.
"""

import logging
from dataclasses import dataclass

import numpy as np

from scripts.autograd import Tensor, as_tensor, log_softmax
from scripts.errors import NumericError, ShapeError
from scripts.segmentation.cam import IGNORE_INDEX

logger = logging.getLogger("TSCDLosses")

REG_SIGMA = 0.1
AUXILIARY_COMPONENTS = ("scd", "seg", "equ", "aux")


@dataclass
class ImageLabel:
    """Multi-hot presence vector over the C foreground classes."""

    present: np.ndarray

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        if self.present.ndim != 1:
            raise ShapeError(f"image label must be a length-C vector, got {self.present.shape}")
        if not self.present.any():
            raise ValueError("an image label needs at least one present class")

    @property
    def num_classes(self):
        return self.present.size

    @classmethod
    def from_mask(cls, mask, num_classes):
        present = np.zeros(num_classes, dtype=bool)
        for value in np.unique(mask):
            if 1 <= value <= num_classes:
                present[value - 1] = True
        return cls(present)


@dataclass
class AffinityLabels:
    """Reliable pixel pairs as flat indices into a label grid (row * width + col)."""

    positive: np.ndarray
    negative: np.ndarray

    @property
    def num_positive(self):
        return len(self.positive)

    @property
    def num_negative(self):
        return len(self.negative)


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def classification_loss(p, l):
    """Multi-label soft-margin loss on class logits."""
    p = as_tensor(p)
    present = l.present if isinstance(l, ImageLabel) else np.asarray(l, dtype=bool)
    if p.shape != present.shape:
        raise ShapeError(f"logits {p.shape} do not match label {present.shape}")
    if not np.all(np.isfinite(p.data)):
        raise NumericError("classification logits are not finite")
    target = present.astype(np.float64)
    return (target * (-p).softplus() + (1.0 - target) * p.softplus()).mean()


def label_at_grid(label, grid_hw):
    """Nearest sampling of a full-resolution label at the centers of a coarser grid."""
    height, width = label.labels.shape
    rows = np.floor((np.arange(grid_hw[0]) + 0.5) * height / grid_hw[0]).astype(np.int64)
    cols = np.floor((np.arange(grid_hw[1]) + 0.5) * width / grid_hw[1]).astype(np.int64)
    return label.labels[np.ix_(rows, cols)]


def build_affinity_labels(refined, pair_positions):
    """Positive and negative pairs among all u < v of the sampled positions.

    `refined` is a label map on the attention grid (a PseudoLabel or array);
    pairs touching IGNORE are left out.
    """
    labels = refined.labels if hasattr(refined, "labels") else np.asarray(refined)
    positions = np.asarray(pair_positions, dtype=np.int64)
    width = labels.shape[1]
    flat = positions[:, 0] * width + positions[:, 1]
    classes = labels[positions[:, 0], positions[:, 1]]
    u, v = np.triu_indices(len(positions), k=1)
    reliable = (classes[u] != IGNORE_INDEX) & (classes[v] != IGNORE_INDEX)
    same = classes[u] == classes[v]
    pairs = np.stack([flat[u], flat[v]], axis=1)
    return AffinityLabels(positive=pairs[reliable & same], negative=pairs[reliable & ~same])


def fused_affinity(A1, A2):
    """Head-averaged mean of two attention logit maps, symmetrized: N x N."""
    A1, A2 = as_tensor(A1), as_tensor(A2)
    if A1.shape != A2.shape or A1.ndim != 3 or A1.shape[1] != A1.shape[2]:
        raise ShapeError(f"attention maps must be equal heads x N x N, got {A1.shape} and {A2.shape}")
    mean = (A1.mean(axis=0) + A2.mean(axis=0)) * 0.5
    return (mean + mean.T) * 0.5


def aux_affinity_loss(A1, A2, labels):
    """Affinity loss on the fused attention; returns (loss, valid)."""
    if labels.num_positive == 0 and labels.num_negative == 0:
        return Tensor(0.0), False
    a = fused_affinity(A1, A2)
    loss = Tensor(0.0)
    if labels.num_positive:
        pos = a[labels.positive[:, 0], labels.positive[:, 1]]
        loss = loss + (1.0 - pos.sigmoid()).mean()
    if labels.num_negative:
        neg = a[labels.negative[:, 0], labels.negative[:, 1]]
        loss = loss + neg.sigmoid().mean()
    return loss, True


def segmentation_loss(s, target):
    """Mean softmax cross-entropy over non-IGNORE pixels; returns (loss, valid)."""
    s = as_tensor(s)
    if s.ndim != 3 or s.shape[:2] != target.shape:
        raise ShapeError(f"logits {s.shape} do not match label {target.shape}")
    if s.shape[-1] != target.num_classes + 1:
        raise ShapeError(f"expected {target.num_classes + 1} channels including background, got {s.shape[-1]}")
    rows, cols = np.nonzero(target.valid_mask())
    if rows.size == 0:
        return Tensor(0.0), False
    classes = target.labels[rows, cols].astype(np.int64)
    return -log_softmax(s, axis=-1)[rows, cols, classes].mean(), True


def edge_weights(img, sigma=REG_SIGMA):
    """Weights for right and down neighbor pairs, shaped H x (W-1) x 1 and (H-1) x W x 1."""
    x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    right = np.exp(-((x[:, 1:] - x[:, :-1]) ** 2).sum(axis=-1, keepdims=True) / sigma ** 2)
    down = np.exp(-((x[1:] - x[:-1]) ** 2).sum(axis=-1, keepdims=True) / sigma ** 2)
    return right, down


def reg_loss(s, img, sigma=REG_SIGMA):
    """Image-weighted total variation of H x W x C' probabilities."""
    s = as_tensor(s)
    x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if s.ndim != 3 or s.shape[:2] != x.shape[:2]:
        raise ShapeError(f"probabilities {s.shape} do not match image {x.shape}")
    right, down = edge_weights(x, sigma)
    total = Tensor(0.0)
    if s.shape[1] > 1:
        total = total + ((s[:, 1:] - s[:, :-1]).abs() * right).sum()
    if s.shape[0] > 1:
        total = total + ((s[1:] - s[:-1]).abs() * down).sum()
    return total / float(s.size)


def total_loss(components, w, warmup=False):
    """Weighted sum of the named components; absent components count as zero.

    During warmup only the classification term contributes.
    """
    for name, value in components.items():
        if as_tensor(value).size != 1:
            raise ShapeError(f"loss component {name} is not a scalar")
    total = w.lambda3 * as_tensor(components["cls"])
    if warmup:
        return total
    for name in AUXILIARY_COMPONENTS:
        if name in components:
            total = total + w.lambda1 * as_tensor(components[name])
    if "reg" in components:
        total = total + w.lambda2 * as_tensor(components["reg"])
    return total
