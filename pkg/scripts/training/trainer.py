"""
End-to-end training loop.

Per image and step: draw a second view A(I), run both views through the
shared network, turn each view's CAMs into (optionally VARM-refined)
pseudo-labels, then combine the classification, segmentation,
regularization, SCD, equivariant and auxiliary losses. Pseudo-labels are
recomputed from the current CAMs at every step. During warmup only the
classification loss is active.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from scripts.autograd import AdamW, Tensor, no_grad, softmax
from scripts.data.augment import AugmentParams, apply_augmentation, augment
from scripts.errors import NumericError, TrainingDiverged
from scripts.segmentation.cam import cam_to_pseudo_label, normalize_cam, upsample_cam
from scripts.segmentation.correspondence import (
    AffineTransform,
    apply_transform,
    equivariant_loss,
    sample_positions,
    self_correspondence_loss,
)
from scripts.segmentation.losses import (
    aux_affinity_loss,
    build_affinity_labels,
    classification_loss,
    label_at_grid,
    reg_loss,
    segmentation_loss,
    total_loss,
)
from scripts.segmentation.model import TSCDNet, save_checkpoint
from scripts.segmentation.varm import refine_pseudo_label

logger = logging.getLogger("TSCDTrainer")

LOSS_COLUMNS = ("total", "cls", "seg", "reg", "scd", "equ", "aux")
LOSS_LOG_FLOAT_FORMAT = "%.12e"
AUGMENT_TRIES = 10


def attach_log_file(path):
    """Add a file handler for `path` to the root logger; returns the handler."""
    handler = logging.FileHandler(path)
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    logging.getLogger().addHandler(handler)
    return handler


def draw_transform(cfg, rng):
    flip = bool(rng.random() < cfg.scd.flip_prob)
    scale = float(cfg.scd.scales[int(rng.integers(len(cfg.scd.scales)))])
    return AffineTransform(flip=flip, scale=scale)


def pseudo_label(output, image, present, cfg):
    """Threshold (and optionally refine) the normalized, upsampled CAM of one view."""
    height, width = image.shape[:2]
    with no_grad():
        cam = normalize_cam(upsample_cam(output.cam, height, width), present)
    if cfg.uses("varm"):
        return refine_pseudo_label(cam, image, cfg.varm, cfg.cam.hi, cfg.cam.lo)
    return cam_to_pseudo_label(cam, cfg.cam.hi, cfg.cam.lo)


def sample_losses(net, image, present, cfg, rng, warmup):
    """Named loss tensors for one training image."""
    t = draw_transform(cfg, rng)
    view2 = apply_transform(t, image).data
    out1, out2 = net(image), net(view2)
    losses = {"cls": (classification_loss(out1.class_logits, present)
                      + classification_loss(out2.class_logits, present)) * 0.5}
    if warmup:
        return losses

    seg_terms, reg_terms = [], []
    labels = []
    for out, img in ((out1, image), (out2, view2)):
        label = pseudo_label(out, img, present, cfg)
        labels.append(label)
        loss, valid = segmentation_loss(out.seg_logits, label)
        if valid:
            seg_terms.append(loss)
        reg_terms.append(reg_loss(softmax(out.seg_logits, axis=-1), img, cfg.reg_sigma))
    losses["seg"] = sum(seg_terms[1:], seg_terms[0]) / len(seg_terms) if seg_terms else Tensor(0.0)
    losses["reg"] = (reg_terms[0] + reg_terms[1]) * 0.5

    grid_h, grid_w = out1.cam.maps.shape[:2]
    if cfg.uses("scd"):
        losses["scd"], positions, _ = self_correspondence_loss(
            out1.cam, out2.cam, out1.seg_logits, out2.seg_logits, t, cfg.scd.n, rng)
    else:
        positions = sample_positions(grid_h, grid_w, cfg.scd.n, rng)
    if cfg.uses("equ"):
        losses["equ"] = equivariant_loss(out1.cam, out2.cam, t)
    if cfg.uses("aux"):
        affinity = build_affinity_labels(label_at_grid(labels[0], (grid_h, grid_w)), positions)
        loss, valid = aux_affinity_loss(*out1.attention_logits, affinity)
        losses["aux"] = loss if valid else Tensor(0.0)
    return losses


def _as_float(value):
    return float(value.item()) if isinstance(value, Tensor) else float(value)


def train_step(net, optimizer, batch, cfg, rng, warmup=False):
    """One AdamW update on the batch-averaged total loss; returns the component values."""
    per_sample = []
    try:
        optimizer.zero_grad()
        totals = []
        for sample in batch:
            losses = sample_losses(net, sample.image, sample.image_label, cfg, rng, warmup)
            per_sample.append(losses)
            totals.append(total_loss(losses, cfg.weights, warmup=warmup))
        total = sum(totals[1:], totals[0]) / len(totals)
        total.backward()
        optimizer.step()
    except NumericError as exc:
        dump = {name: [_as_float(v) for v in (s.get(name) for s in per_sample) if v is not None]
                for name in LOSS_COLUMNS[1:]}
        raise TrainingDiverged(f"non-finite values during training: {exc}", components=dump) from exc

    components = {"total": total.item()}
    for name in LOSS_COLUMNS[1:]:
        values = [_as_float(s[name]) for s in per_sample if name in s]
        components[name] = float(np.mean(values)) if values else 0.0
    return components


class TSCDTrainer:
    """Owns the network, optimizer and random stream of one training run."""

    def __init__(self, cfg, dataset, net=None):
        self.cfg = cfg
        self.dataset = dataset
        self.net = net or TSCDNet.create(cfg.seed, cfg.model)
        self.optimizer = AdamW(self.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.history = []

    def _augmented(self, sample):
        for _ in range(AUGMENT_TRIES):
            candidate = augment(sample, self.rng, self.cfg.aug)
            if candidate.image_label.any():
                return candidate
        return apply_augmentation(sample, AugmentParams(1.0, False, 0, 0), self.cfg.aug.crop_size)

    def next_batch(self):
        size = self.cfg.batch_size
        indices = self.rng.choice(len(self.dataset), size=size, replace=len(self.dataset) < size)
        return [self._augmented(self.dataset[int(i)]) for i in indices]

    def train_step(self, batch=None):
        batch = batch if batch is not None else self.next_batch()
        warmup = self.step < self.cfg.warmup_iterations
        try:
            components = train_step(self.net, self.optimizer, batch, self.cfg, self.rng, warmup)
        except TrainingDiverged as exc:
            exc.step = self.step
            logger.error(f"Training diverged at step {self.step}: {exc.components}")
            raise
        components = {"step": self.step, "warmup": int(warmup), **components}
        self.history.append(components)
        self.step += 1
        return components

    def fit(self, iterations=None, log_every=50):
        iterations = self.cfg.iterations if iterations is None else iterations
        logger.info(f"Training for {iterations} iterations "
                    f"({self.cfg.warmup_iterations} warmup, batch {self.cfg.batch_size}, lr {self.cfg.lr})")
        progress = tqdm(range(iterations), desc="Training")
        for _ in progress:
            components = self.train_step()
            progress.set_postfix(loss=f"{components['total']:.4f}")
            if log_every and components["step"] % log_every == 0:
                logger.info(f"step {components['step']}: " +
                            ", ".join(f"{k}={components[k]:.4f}" for k in LOSS_COLUMNS))
        return self.loss_log()

    def loss_log(self):
        return pd.DataFrame(self.history, columns=["step", "warmup", *LOSS_COLUMNS])

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.loss_log().to_csv(out / "loss_log.csv", index=False, float_format=LOSS_LOG_FLOAT_FORMAT)
        save_checkpoint(self.net.parameters(), out / "checkpoint.bin")
        logger.info(f"Wrote loss log and checkpoint to {out}")
