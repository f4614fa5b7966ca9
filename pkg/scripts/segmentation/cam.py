"""
Class scores, class activation maps and threshold pseudo-labels.

    y_c = 1/(H'W') * sum_k w[c, k] * sum_i f[i, k]        (GAP then FC)
    m_c = ReLU(sum_k w[c, k] * f[:, :, k])

Pseudo-labels use class 0 for background, 1..C for the foreground classes
(CAM channel c maps to label c + 1) and IGNORE_INDEX for unreliable pixels.
"""

import logging
from dataclasses import dataclass

import numpy as np

from scripts.autograd import Tensor, bilinear_resize, matmul
from scripts.errors import ShapeError

logger = logging.getLogger("CamGenerator")

IGNORE_INDEX = 255
DEFAULT_HI = 0.55
DEFAULT_LO = 0.35


@dataclass
class ClassifierHead:
    """Fully connected classifier without bias; weights are C x K."""

    weights: Tensor

    def __post_init__(self):
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"classifier weights must be C x K with C, K >= 1, got {self.weights.shape}")

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def feature_channels(self):
        return self.weights.shape[1]


@dataclass
class Cam:
    maps: Tensor
    normalized: bool = False

    @property
    def num_classes(self):
        return self.maps.shape[-1]


@dataclass
class PseudoLabel:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        valid = (self.labels <= self.num_classes) | (self.labels == IGNORE_INDEX)
        if not np.all(valid):
            bad = np.unique(self.labels[~valid]).tolist()
            raise ValueError(f"pseudo-label holds indices {bad} outside 0..{self.num_classes} and {IGNORE_INDEX}")

    @property
    def shape(self):
        return self.labels.shape

    def valid_mask(self):
        return self.labels != IGNORE_INDEX


def _check_channels(f, head):
    if f.ndim != 3 or f.shape[-1] != head.feature_channels:
        raise ShapeError(f"features {f.shape} do not match head with {head.feature_channels} channels")


def class_scores(f, head):
    """Global-average-pooled features through the classifier: a length-C vector."""
    _check_channels(f, head)
    return matmul(head.weights, f.mean(axis=(0, 1)))


def compute_cam(f, head):
    """Unnormalized class activation maps H' x W' x C."""
    _check_channels(f, head)
    return Cam(maps=matmul(f, head.weights.T).relu(), normalized=False)


def upsample_cam(cam, height, width):
    return Cam(maps=bilinear_resize(cam.maps, height, width), normalized=cam.normalized)


def normalize_cam(cam, present_classes):
    """Divide each present class map by its maximum; absent classes become zero.

    `present_classes` is a length-C multi-hot vector over the CAM channels.
    The result carries no gradient: normalized maps feed label generation only.
    """
    present = np.asarray(present_classes, dtype=bool)
    if present.shape != (cam.num_classes,):
        raise ShapeError(f"presence vector {present.shape} does not match {cam.num_classes} CAM channels")
    values = cam.maps.data
    peaks = values.max(axis=(0, 1))
    scale = np.where(peaks > 0, peaks, 1.0)
    normalized = np.where(present, values / scale, 0.0)
    return Cam(maps=Tensor(normalized), normalized=True)


def scores_to_pseudo_label(scores, hi=DEFAULT_HI, lo=DEFAULT_LO):
    """Dual-threshold labeling of H x W x C foreground scores in [0, 1].

    max >= hi -> argmax class, max < lo -> background, otherwise IGNORE.
    Ties go to the lowest class index.
    """
    if not lo < hi:
        raise ValueError(f"thresholds must satisfy lo < hi, got lo={lo}, hi={hi}")
    scores = np.asarray(scores)
    best = scores.max(axis=-1)
    winner = scores.argmax(axis=-1) + 1
    labels = np.full(best.shape, IGNORE_INDEX, dtype=np.uint8)
    labels[best >= hi] = winner[best >= hi]
    labels[best < lo] = 0
    return PseudoLabel(labels=labels, num_classes=scores.shape[-1])


def cam_to_pseudo_label(cam, hi=DEFAULT_HI, lo=DEFAULT_LO):
    if not cam.normalized:
        raise ValueError("cam_to_pseudo_label needs a normalized CAM; call normalize_cam first")
    return scores_to_pseudo_label(cam.maps.data, hi, lo)
