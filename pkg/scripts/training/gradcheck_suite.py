"""Finite-difference checks of every training loss on small random inputs."""

import logging

import numpy as np
import pandas as pd

from scripts.autograd import flip, gradcheck, softmax
from scripts.segmentation.cam import Cam, PseudoLabel
from scripts.segmentation.correspondence import AffineTransform, corr_volume, equivariant_loss, scd_loss
from scripts.segmentation.losses import (
    AffinityLabels,
    LossWeights,
    aux_affinity_loss,
    classification_loss,
    reg_loss,
    segmentation_loss,
    total_loss,
)

logger = logging.getLogger("GradCheck")


def _cases(rng):
    present = np.array([True, False, True, False])
    positions_1 = np.array([[0, 0], [1, 2], [3, 1], [2, 3]])
    positions_2 = np.array([[0, 3], [1, 1], [3, 2], [2, 0]])
    grid_positions = np.array([[0, 0], [1, 2], [2, 1]])
    cam1, cam2 = rng.uniform(0.0, 1.0, (4, 4, 3)), rng.uniform(0.0, 1.0, (4, 4, 3))
    target = PseudoLabel(np.array([[0, 1, 2], [255, 3, 0], [1, 1, 255]]), num_classes=3)
    affinity = AffinityLabels(positive=np.array([[0, 1], [2, 3]]), negative=np.array([[0, 2], [1, 3], [0, 3]]))
    image = rng.uniform(0.0, 1.0, (4, 4, 3))
    hflip = AffineTransform.hflip()

    def scd(t):
        M = corr_volume(cam1, cam2, positions_1, positions_2)
        S = corr_volume(t[0], t[1], positions_1, positions_2)
        return scd_loss(M, S)

    def total(t):
        # all six terms share the 3 x 3 x 4 logits
        logits = t[1]
        seg, _ = segmentation_loss(logits, target)
        M = corr_volume(cam1[:3, :3], cam2[:3, :3], grid_positions, grid_positions[::-1])
        S = corr_volume(logits, flip(logits, axis=1), grid_positions, grid_positions[::-1])
        aux, _ = aux_affinity_loss(logits[:2, :2].reshape(1, 4, 4), logits[1:, 1:].reshape(1, 4, 4), affinity)
        components = {
            "cls": classification_loss(t[0], present[:3]),
            "seg": seg,
            "reg": reg_loss(softmax(logits, axis=-1), image[:3, :3]),
            "scd": scd_loss(M, S),
            "equ": equivariant_loss(Cam(logits[:, :, :2]), Cam(logits[:, :, 2:]), hflip),
            "aux": aux,
        }
        return total_loss(components, LossWeights())

    return [
        ("scd", scd, [rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))]),
        ("equivariant", lambda t: equivariant_loss(Cam(t[0]), Cam(t[1]), hflip),
         [rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))]),
        ("classification", lambda t: classification_loss(t[0], present), [rng.normal(size=4)]),
        ("auxiliary", lambda t: aux_affinity_loss(t[0], t[1], affinity)[0],
         [rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))]),
        ("segmentation", lambda t: segmentation_loss(t[0], target)[0], [rng.normal(size=(3, 3, 4))]),
        ("regularization", lambda t: reg_loss(t[0], image), [rng.uniform(0.05, 0.95, size=(4, 4, 3))]),
        ("total", total, [rng.normal(size=3), rng.normal(size=(3, 3, 4))]),
    ]


def run_gradcheck(seed=0, h=1e-5, tol=1e-4):
    """One row per loss: parameter count, errors and pass/fail."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn, arrays in _cases(rng):
        result = gradcheck(fn, arrays, name=name, h=h, tol=tol)
        rows.append({
            "loss": result.name,
            "params": result.num_params,
            "max_abs_error": result.max_abs_error,
            "relative_error": result.relative_error,
            "passed": result.passed,
        })
    table = pd.DataFrame(rows)
    failed = int((~table["passed"]).sum())
    logger.info(f"Gradient check: {len(table) - failed}/{len(table)} losses within {tol:g}")
    return table
