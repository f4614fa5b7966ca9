"""
Feature correspondence between an image and its affine-transformed view.

A correspondence sample holds cosine similarities between feature vectors
at n sampled positions of view 1 and their counterparts in view 2:

    matrix[i, j] = <a(p_i), b(q_j)> / (|a(p_i)| |b(q_j)|)

An all-zero feature vector has cosine 0 with everything.

The self-correspondence distillation loss aligns the segmentation
correspondence S with the CAM correspondence M, which acts as a fixed
(detached) target:

    L = -1/(n1 n2) * sum_ij M_ij * max(S_ij, 0)
"""

import logging
from dataclasses import dataclass

import numpy as np

from scripts.autograd import as_tensor, bilinear_resize, detach, flip, l2_normalize, matmul
from scripts.errors import SamplingError, ShapeError

logger = logging.getLogger("Correspondence")

SUPPORTED_SCALES = (1.0, 0.5, 0.75)


@dataclass(frozen=True)
class AffineTransform:
    """Optional downscale followed by an optional horizontal flip."""

    flip: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"unsupported rescale factor {self.scale}; choose from {SUPPORTED_SCALES}")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def hflip(cls):
        return cls(flip=True)

    @classmethod
    def rescale(cls, factor):
        return cls(scale=factor)

    @classmethod
    def hflip_rescale(cls, factor):
        return cls(flip=True, scale=factor)

    @property
    def kind(self):
        if self.flip and self.scale != 1.0:
            return "hflip+rescale"
        if self.flip:
            return "hflip"
        if self.scale != 1.0:
            return "rescale"
        return "identity"

    def output_size(self, height, width):
        return int(round(height * self.scale)), int(round(width * self.scale))

    def __str__(self):
        return self.kind if self.scale == 1.0 else f"{self.kind}({self.scale})"


@dataclass
class CorrSample:
    positions_1: np.ndarray
    positions_2: np.ndarray
    matrix: object

    @property
    def n(self):
        return len(self.positions_1)


def apply_transform(t, x):
    """A(x) for an H x W (x D) map: rescale with bilinear_resize, then mirror columns."""
    out = as_tensor(x)
    if t.scale != 1.0:
        out = bilinear_resize(out, *t.output_size(*out.shape[:2]))
    if t.flip:
        out = flip(out, axis=1)
    return out


def map_positions(t, positions, src_hw, dst_hw):
    """Grid positions of view 1 mapped onto the view-2 grid through `t`.

    Pixel centers follow the half-pixel convention of the resampler; the
    result is rounded and clipped to the destination grid.
    """
    positions = np.asarray(positions, dtype=np.int64)
    (src_h, src_w), (dst_h, dst_w) = src_hw, dst_hw
    rows, cols = positions[:, 0], positions[:, 1]
    if (src_h, src_w) != (dst_h, dst_w):
        rows = np.rint((rows + 0.5) * dst_h / src_h - 0.5).astype(np.int64)
        cols = np.rint((cols + 0.5) * dst_w / src_w - 0.5).astype(np.int64)
        rows = np.clip(rows, 0, dst_h - 1)
        cols = np.clip(cols, 0, dst_w - 1)
    if t.flip:
        cols = dst_w - 1 - cols
    return np.stack([rows, cols], axis=1)


def sample_positions(height, width, n, rng_seed):
    """n distinct grid coordinates drawn uniformly without replacement.

    `rng_seed` is an int seed or a numpy Generator owned by the caller.
    """
    if n < 1 or n > height * width:
        raise SamplingError(f"cannot draw {n} distinct positions from a {height}x{width} grid")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    flat = rng.choice(height * width, size=n, replace=False)
    return np.stack(np.divmod(flat, width), axis=1).astype(np.int64)


def _check_positions(positions, grid_hw, name):
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise SamplingError(f"{name} must be an n x 2 array of (row, col), got {positions.shape}")
    inside = (
        (positions[:, 0] >= 0) & (positions[:, 0] < grid_hw[0])
        & (positions[:, 1] >= 0) & (positions[:, 1] < grid_hw[1])
    )
    if not np.all(inside):
        raise SamplingError(f"{name} has positions outside the {grid_hw[0]}x{grid_hw[1]} grid")
    return positions


def corr_volume(a, b, positions_1, positions_2):
    """Cosine similarities between a at positions_1 and b at positions_2 (channel axis last)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"correspondence needs H x W x C maps with equal C, got {a.shape} and {b.shape}")
    p1 = _check_positions(positions_1, a.shape[:2], "positions_1")
    p2 = _check_positions(positions_2, b.shape[:2], "positions_2")
    va = l2_normalize(a[p1[:, 0], p1[:, 1]], axis=-1)
    vb = l2_normalize(b[p2[:, 0], p2[:, 1]], axis=-1)
    return CorrSample(positions_1=p1, positions_2=p2, matrix=matmul(va, vb.T))


def scd_loss(M, S):
    """Self-correspondence distillation loss; gradients reach S only."""
    if not (np.array_equal(M.positions_1, S.positions_1) and np.array_equal(M.positions_2, S.positions_2)):
        raise SamplingError("CAM and segmentation correspondences were built from different positions")
    if M.matrix.shape != S.matrix.shape:
        raise ShapeError(f"correspondence matrices differ: {M.matrix.shape} vs {S.matrix.shape}")
    target = detach(M.matrix)
    n1, n2 = S.matrix.shape
    return -(target * S.matrix.relu()).sum() / float(n1 * n2)


def equivariant_loss(m1, m2, t):
    """Mean absolute difference between A(m1) and m2."""
    transformed = apply_transform(t, m1.maps)
    if transformed.shape != m2.maps.shape:
        raise ShapeError(f"A(m1) has shape {transformed.shape} but m2 has {m2.maps.shape}")
    return (transformed - m2.maps).abs().mean()


def self_correspondence_loss(cam1, cam2, seg1, seg2, t, n, rng):
    """SCD loss between two views.

    Positions are drawn on the view-1 CAM grid and mapped through `t`;
    segmentation logits are resized to their CAM's resolution first.
    Returns (loss, positions_1, positions_2).
    """
    h1, w1 = cam1.maps.shape[:2]
    h2, w2 = cam2.maps.shape[:2]
    positions_1 = sample_positions(h1, w1, n, rng)
    positions_2 = map_positions(t, positions_1, (h1, w1), (h2, w2))
    s1 = bilinear_resize(seg1, h1, w1)
    s2 = bilinear_resize(seg2, h2, w2)
    M = corr_volume(detach(cam1.maps), detach(cam2.maps), positions_1, positions_2)
    S = corr_volume(s1, s2, positions_1, positions_2)
    return scd_loss(M, S), positions_1, positions_2
