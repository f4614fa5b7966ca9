"""CAM heatmaps and segmentation overlays written as P6 images."""

import logging
from pathlib import Path

import matplotlib
import numpy as np

from scripts.autograd import no_grad
from scripts.data.image_io import write_image
from scripts.segmentation.cam import normalize_cam, upsample_cam

logger = logging.getLogger("Renderer")

PALETTE = np.array([
    [0, 0, 0],
    [230, 60, 50],
    [50, 180, 80],
    [60, 90, 220],
    [240, 200, 40],
    [160, 70, 200],
], dtype=np.float64) / 255.0
BLEND = 0.5


def present_classes(class_logits):
    """Classes with sigmoid(p) > 0.5, or the top-scoring class if there is none."""
    present = np.asarray(class_logits) > 0.0
    if not present.any():
        present[int(np.argmax(class_logits))] = True
    return present


def heatmap(scores, image):
    colored = matplotlib.colormaps["jet"](np.clip(scores, 0.0, 1.0))[..., :3]
    return BLEND * colored + (1.0 - BLEND) * image


def overlay(labels, image):
    colors = PALETTE[np.asarray(labels) % len(PALETTE)]
    return BLEND * colors + (1.0 - BLEND) * image


def render(net, image, out_dir, class_names):
    """Write cam_<class>.ppm for each present class and segmentation.ppm; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    height, width = image.shape[:2]
    with no_grad():
        output = net(image)
        present = present_classes(output.class_logits.data)
        cam = normalize_cam(upsample_cam(output.cam, height, width), present)
        labels = output.seg_logits.data.argmax(axis=-1)

    written = []
    for index in np.flatnonzero(present):
        path = out / f"cam_{class_names[index]}.ppm"
        write_image(path, heatmap(cam.maps.data[..., index], image))
        written.append(path)
    path = out / "segmentation.ppm"
    write_image(path, overlay(labels, image))
    written.append(path)
    logger.info(f"Rendered {len(written) - 1} CAM heatmaps and a segmentation overlay to {out}")
    return written
