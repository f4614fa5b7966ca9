"""Synthetic-shapes dataset, pixmap I/O and augmentation."""

from scripts.data.image_io import quantize, read_image, read_label, write_image, write_label
from scripts.data.synthetic import (
    CLASS_NAMES,
    Dataset,
    Sample,
    SyntheticSpec,
    generate,
    generate_sample,
    labels_from_mask,
    load_dataset,
    save_dataset,
)
from scripts.data.augment import AugmentConfig, AugmentParams, apply_augmentation, augment, sample_augmentation
