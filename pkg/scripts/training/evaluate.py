"""
mIoU evaluation.

IoU_c = TP / (TP + FP + FN) from a (C+1) x (C+1) confusion matrix over all
pixels with a ground-truth class. Classes absent from both prediction and
ground truth (zero union) are left out of the mean.
"""

import concurrent.futures
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from scripts.autograd import no_grad
from scripts.segmentation.cam import IGNORE_INDEX, normalize_cam, upsample_cam
from scripts.segmentation.varm import VarmConfig, refine

logger = logging.getLogger("Evaluator")


@dataclass
class Metrics:
    class_names: tuple
    confusion: np.ndarray
    iou: np.ndarray
    miou: float
    pixel_accuracy: float

    def table(self):
        """class,iou rows followed by the miou footer."""
        rows = [{"class": name, "iou": value} for name, value in zip(self.class_names, self.iou)]
        rows.append({"class": "miou", "iou": self.miou})
        return pd.DataFrame(rows, columns=["class", "iou"])

    def to_csv(self, path):
        self.table().to_csv(path, index=False, na_rep="nan", encoding="utf-8")

    def summary(self):
        return (self.table().to_string(index=False, float_format=lambda v: f"{v:.4f}")
                + f"\npixel accuracy: {self.pixel_accuracy:.4f}")


def confusion(pred, gt, num_classes):
    """Confusion counts (rows = ground truth) over pixels whose ground truth is not IGNORE."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    keep = gt != IGNORE_INDEX
    return confusion_matrix(gt[keep], pred[keep], labels=list(range(num_classes + 1)))


def metrics_from_confusion(cm, class_names):
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    np.divide(tp, union, out=iou, where=union > 0)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else 0.0
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return Metrics(class_names=tuple(class_names), confusion=cm, iou=iou, miou=miou, pixel_accuracy=accuracy)


def metrics_from_predictions(preds, gts, class_names):
    num_classes = len(class_names) - 1
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        cm += confusion(pred, gt, num_classes)
    return metrics_from_confusion(cm, class_names)


def _map_images(fn, dataset, workers, desc):
    """fn(sample) for every sample of the dataset, ordered by index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")

    def run(sample):
        with no_grad():
            return fn(sample)

    results = [None] * len(dataset)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(run, dataset[i]): i for i in range(len(dataset))}
        for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures), desc=desc):
            index = futures[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"Error evaluating {dataset[index].name}: {e}")
                raise
    return results


def evaluate(dataset, net, workers=1):
    """Segmentation mIoU of the network's predictions against the ground-truth masks."""
    if any(sample.gt_mask is None for sample in dataset.samples):
        raise ValueError("evaluation needs ground-truth masks for every image")
    preds = _map_images(lambda s: net.predict(s.image), dataset, workers, "Evaluating")
    metrics = metrics_from_predictions(preds, [s.gt_mask for s in dataset.samples],
                                       ("background", *dataset.class_names))
    logger.info(f"Evaluated {len(dataset)} images: mIoU {metrics.miou:.4f}")
    return metrics


def dense_pseudo_label(scores, background):
    """Argmax over a constant background score and the foreground scores (no IGNORE band)."""
    best = scores.max(axis=-1)
    labels = (scores.argmax(axis=-1) + 1).astype(np.uint8)
    labels[best < background] = 0
    return labels


REFINEMENT_METHODS = ("cam", "rgb", "varm")


def refinement_study(dataset, net, cam_cfg, varm_cfg, workers=1):
    """Pseudo-label mIoU against ground truth for plain CAMs, beta = 0 refinement and VARM.

    Pseudo-labels are built from ground-truth image labels, with a single
    background threshold halfway between the two CAM thresholds.
    """
    background = 0.5 * (cam_cfg.hi + cam_cfg.lo)
    variants = {
        "rgb": VarmConfig(alpha=varm_cfg.alpha, beta=0.0, dilations=varm_cfg.dilations,
                          iterations=varm_cfg.iterations),
        "varm": varm_cfg,
    }

    def labels_for(sample):
        height, width = sample.image.shape[:2]
        cam = normalize_cam(upsample_cam(net(sample.image).cam, height, width), sample.image_label)
        scores = {"cam": cam.maps.data}
        for name, cfg in variants.items():
            scores[name] = refine(cam.maps, sample.image, cfg).data
        return {name: dense_pseudo_label(values, background) for name, values in scores.items()}

    results = _map_images(labels_for, dataset, workers, "Refinement study")
    class_names = ("background", *dataset.class_names)
    rows = []
    for method in REFINEMENT_METHODS:
        metrics = metrics_from_predictions([r[method] for r in results], [s.gt_mask for s in dataset.samples],
                                           class_names)
        rows.append({"method": method, "miou": metrics.miou})
        logger.info(f"Refinement study: {method} mIoU {metrics.miou:.4f}")
    return pd.DataFrame(rows, columns=["method", "miou"])

