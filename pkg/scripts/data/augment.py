"""Random rescale, horizontal flip and crop applied jointly to image and mask."""

import logging
from dataclasses import dataclass

import numpy as np

from scripts.autograd import bilinear_resize
from scripts.data.synthetic import Sample, labels_from_mask
from scripts.segmentation.cam import IGNORE_INDEX

logger = logging.getLogger("SyntheticShapes")


@dataclass
class AugmentConfig:
    scale_min: float = 0.75
    scale_max: float = 1.25
    flip_prob: float = 0.5
    crop_size: int = 64

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"invalid scale range {self.scale_min}..{self.scale_max}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.crop_size < 4 or self.crop_size % 4:
            raise ValueError(f"crop_size must be a positive multiple of 4, got {self.crop_size}")


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    flip: bool
    top: int
    left: int


def scaled_size(height, width, scale):
    return max(1, int(round(height * scale))), max(1, int(round(width * scale)))


def sample_augmentation(shape, cfg, rng):
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    flip = bool(rng.random() < cfg.flip_prob)
    height, width = scaled_size(shape[0], shape[1], scale)
    top = int(rng.integers(0, max(height - cfg.crop_size, 0) + 1))
    left = int(rng.integers(0, max(width - cfg.crop_size, 0) + 1))
    return AugmentParams(scale=scale, flip=flip, top=top, left=left)


def _nearest(mask, height, width):
    rows = np.floor((np.arange(height) + 0.5) * mask.shape[0] / height).astype(np.int64)
    cols = np.floor((np.arange(width) + 0.5) * mask.shape[1] / width).astype(np.int64)
    return mask[np.ix_(rows, cols)]


def _crop(array, top, left, size, fill):
    out = np.full((size, size) + array.shape[2:], fill, dtype=array.dtype)
    window = array[top:top + size, left:left + size]
    out[:window.shape[0], :window.shape[1]] = window
    return out


def apply_augmentation(sample, params, crop_size):
    """Rescale, then flip, then crop to crop_size x crop_size.

    Areas outside the rescaled image are zero in the image and IGNORE in the
    mask. The image-level label is recounted from the cropped mask.
    """
    height, width = scaled_size(*sample.image.shape[:2], params.scale)
    image = bilinear_resize(sample.image, height, width).data
    if params.flip:
        image = image[:, ::-1]
    image = _crop(image, params.top, params.left, crop_size, 0.0)
    if sample.gt_mask is None:
        return Sample(image=image, image_label=sample.image_label, gt_mask=None, name=sample.name)
    mask = _nearest(sample.gt_mask, height, width)
    if params.flip:
        mask = mask[:, ::-1]
    mask = _crop(mask, params.top, params.left, crop_size, IGNORE_INDEX)
    return Sample(image=image, image_label=labels_from_mask(mask, len(sample.image_label)),
                  gt_mask=mask, name=sample.name)


def augment(sample, rng, cfg=None):
    cfg = cfg or AugmentConfig()
    params = sample_augmentation(sample.image.shape, cfg, rng)
    return apply_augmentation(sample, params, cfg.crop_size)
