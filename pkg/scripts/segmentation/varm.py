"""
Variation-aware refinement of CAM score maps.

For every pixel the neighbor set N(i, j) is the pixel itself plus the
8-connected offsets at each dilation rate (49 taps for the default rates).
Out-of-bounds neighbors are clamped to the border.

    V(i, j)       = sum_ch (x(i, j-1) - x(i, j))^2 + (x(i+1, j) - x(i, j))^2
    k_rgb(ij, kl) = -(alpha * |I_ij - I_kl|)^2 / sigma_ij^2
    k(ij, kl)     = softmax_N(k_rgb) - beta * softmax_N(V at the neighbors)
    P_t(i, j, c)  = sum_{(k, l) in N(i, j)} k(ij, kl) P_{t-1}(k, l, c)

|I_ij - I_kl| is the channel-mean absolute difference, sigma_ij its standard
deviation over N(i, j) floored at SIGMA_FLOOR. After the beta correction the
kernel is clamped at zero and each row renormalized to sum to one, so every
refinement step is a convex combination. With beta = 0 the kernel is the
plain softmax of k_rgb (the pixel-adaptive refinement baseline).

Refinement carries no gradient: its output is a supervision target.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from scripts.autograd import Tensor, as_tensor
from scripts.errors import ShapeError
from scripts.segmentation.cam import (
    DEFAULT_HI,
    DEFAULT_LO,
    IGNORE_INDEX,
    PseudoLabel,
    scores_to_pseudo_label,
)

logger = logging.getLogger("VarmRefiner")

SIGMA_FLOOR = 1e-6
DEFAULT_DILATIONS = (1, 2, 4, 8, 12, 24)


@dataclass
class VarmConfig:
    alpha: float = 4.0
    beta: float = 0.01
    dilations: tuple = field(default_factory=lambda: DEFAULT_DILATIONS)
    iterations: int = 10

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if not self.dilations or min(self.dilations) <= 0:
            raise ValueError(f"dilations must be positive, got {self.dilations}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")


@dataclass
class VarmKernel:
    """Per-pixel weights H x W x T over `offsets` (T x 2, center first)."""

    weights: np.ndarray
    offsets: np.ndarray
    row_normalized: bool


def neighbor_offsets(dilations):
    offsets = [(0, 0)]
    for d in dilations:
        for dy in (-d, 0, d):
            for dx in (-d, 0, d):
                if dy or dx:
                    offsets.append((dy, dx))
    return np.array(offsets, dtype=np.int64)


def gather_neighbors(x, offsets):
    """Stack x at every offset with border clamping: H x W x T (x ...)."""
    x = np.asarray(x, dtype=np.float64)
    height, width = x.shape[:2]
    pad = int(np.abs(offsets).max()) if len(offsets) else 0
    padding = [(pad, pad), (pad, pad)] + [(0, 0)] * (x.ndim - 2)
    padded = np.pad(x, padding, mode="edge")
    taps = [padded[pad + dy:pad + dy + height, pad + dx:pad + dx + width] for dy, dx in offsets]
    return np.stack(taps, axis=2)


def _image_array(img):
    values = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError(f"image must be H x W x channels, got {values.shape}")
    return values


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def pixel_variation(img):
    """Forward-difference variation energy per pixel (H x W)."""
    x = _image_array(img)
    left = np.concatenate([x[:, :1], x[:, :-1]], axis=1)
    below = np.concatenate([x[1:], x[-1:]], axis=0)
    return Tensor((((left - x) ** 2) + ((below - x) ** 2)).sum(axis=-1))


def local_kernel(img, cfg):
    """Raw affinities k_rgb, H x W x T."""
    x = _image_array(img)
    offsets = neighbor_offsets(cfg.dilations)
    neighbors = gather_neighbors(x, offsets)
    diff = np.abs(x[:, :, None, :] - neighbors).mean(axis=-1)
    sigma = np.maximum(diff.std(axis=2, keepdims=True), SIGMA_FLOOR)
    return -((cfg.alpha * diff) ** 2) / sigma ** 2


def correction_kernel(img, cfg):
    offsets = neighbor_offsets(cfg.dilations)
    affinity = _softmax(local_kernel(img, cfg), axis=2)
    if cfg.beta == 0:
        return VarmKernel(weights=affinity, offsets=offsets, row_normalized=True)
    variation = gather_neighbors(pixel_variation(img).data, offsets)
    weights = np.maximum(affinity - cfg.beta * _softmax(variation, axis=2), 0.0)
    totals = weights.sum(axis=2, keepdims=True)
    # a row can only vanish when beta outweighs every affinity; keep the plain affinity there
    weights = np.where(totals > 0, weights / np.where(totals > 0, totals, 1.0), affinity)
    return VarmKernel(weights=weights, offsets=offsets, row_normalized=True)


def refine(P0, img, cfg, kernel=None):
    """Iteratively smooth H x W x C' scores with the correction kernel."""
    scores = as_tensor(P0).data
    x = _image_array(img)
    if scores.ndim != 3 or scores.shape[:2] != x.shape[:2]:
        raise ShapeError(f"scores {scores.shape} do not match image {x.shape}")
    if scores.min() < -1e-9 or scores.max() > 1 + 1e-9:
        raise ValueError("refine expects scores in [0, 1]")
    if cfg.iterations == 0:
        return Tensor(scores)
    kernel = kernel or correction_kernel(x, cfg)
    refined = scores
    for _ in range(cfg.iterations):
        refined = np.einsum("hwt,hwtc->hwc", kernel.weights, gather_neighbors(refined, kernel.offsets))
    logger.debug(f"refined {scores.shape} scores over {len(kernel.offsets)} taps, {cfg.iterations} iterations")
    return Tensor(refined)


def refine_pseudo_label(cam, img, cfg, hi=DEFAULT_HI, lo=DEFAULT_LO):
    """Refine normalized CAM scores and threshold them into a pseudo-label.

    The constant background channels at hi and lo are fixed points of the
    row-normalized kernel, so thresholding the refined foreground scores is
    the same as refining with the background channels in place.
    """
    if not cam.normalized:
        raise ValueError("refine_pseudo_label needs a normalized CAM")
    return scores_to_pseudo_label(refine(cam.maps, img, cfg).data, hi, lo)


def refine_label_map(label, img, cfg):
    """Refine a hard label map through one-hot scores.

    IGNORE pixels start with all-zero scores; pixels still all-zero after
    refinement stay IGNORE. With zero iterations the label is returned as is.
    """
    labels = label.labels
    channels = label.num_classes + 1
    onehot = np.zeros(labels.shape + (channels,))
    valid = labels != IGNORE_INDEX
    rows, cols = np.nonzero(valid)
    onehot[rows, cols, labels[valid].astype(np.int64)] = 1.0
    refined = refine(Tensor(onehot), img, cfg).data
    out = refined.argmax(axis=-1).astype(np.uint8)
    out[refined.max(axis=-1) <= 0] = IGNORE_INDEX
    return PseudoLabel(labels=out, num_classes=label.num_classes)
