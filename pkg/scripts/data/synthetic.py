"""
Deterministic synthetic-shapes dataset.

Each image holds 1-3 filled shapes (circle, square, triangle) over a
textured background. Image-level labels are derived from the ground-truth
mask after occlusion, so they always agree with it. Image i is drawn from
its own stream default_rng([seed, i]) and does not depend on worker count.

On-disk layout under a dataset directory:

    classes.txt        class names in index order (index 1 = first line)
    images/NNNN.ppm    P6 image
    labels/NNNN.txt    comma-separated names of the present classes
    masks/NNNN.pgm     P5 class-index mask (0 = background)
"""

import concurrent.futures
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

from scripts.data.image_io import quantize, read_image, read_label, write_image, write_label
from scripts.errors import GenerationError

logger = logging.getLogger("SyntheticShapes")

CLASS_NAMES = ("circle", "square", "triangle")
CLASS_COLORS = {
    "circle": (0.85, 0.25, 0.2),
    "square": (0.2, 0.7, 0.3),
    "triangle": (0.25, 0.35, 0.85),
}
MIN_VISIBLE_PIXELS = 25


@dataclass
class SyntheticSpec:
    num_images: int = 200
    size: int = 64
    classes: tuple = field(default_factory=lambda: CLASS_NAMES)
    min_shapes: int = 1
    max_shapes: int = 3
    color_jitter: float = 0.08
    texture: float = 0.06
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.num_images < 1:
            raise ValueError(f"num_images must be at least 1, got {self.num_images}")
        if self.size < 4 or self.size % 4:
            raise ValueError(f"image size must be a positive multiple of 4, got {self.size}")
        unknown = [name for name in self.classes if name not in CLASS_COLORS]
        if unknown or not self.classes:
            raise ValueError(f"classes must be a non-empty subset of {CLASS_NAMES}, got {self.classes}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError(f"shape count range {self.min_shapes}..{self.max_shapes} is invalid")

    @property
    def num_classes(self):
        return len(self.classes)


@dataclass
class Sample:
    image: np.ndarray
    image_label: np.ndarray
    gt_mask: np.ndarray
    name: str = ""

    @property
    def present_classes(self):
        return np.flatnonzero(self.image_label) + 1


@dataclass
class Dataset:
    class_names: tuple
    samples: list

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]


def labels_from_mask(mask, num_classes):
    """Multi-hot presence vector over classes 1..num_classes."""
    counts = np.bincount(np.asarray(mask, dtype=np.int64).ravel(), minlength=256)
    return counts[1:num_classes + 1] > 0


def _shape_mask(kind, size, rng):
    radius = int(rng.integers(size // 8, size // 4 + 1))
    cy, cx = (int(v) for v in rng.integers(radius, size - radius + 1, size=2))
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    box = (cx - radius, cy - radius, cx + radius, cy + radius)
    if kind == "circle":
        draw.ellipse(box, fill=1)
    elif kind == "square":
        draw.rectangle(box, fill=1)
    else:
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)], fill=1)
    return np.array(canvas, dtype=bool)


def _background(spec, rng):
    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.uniform(-spec.texture, spec.texture, size=(spec.size // 4, spec.size // 4, 1))
    coarse = np.kron(coarse, np.ones((4, 4, 1)))
    fine = rng.uniform(-spec.texture / 2, spec.texture / 2, size=(spec.size, spec.size, 3))
    return base + tint + coarse + fine


def _compose(spec, rng):
    image = _background(spec, rng)
    mask = np.zeros((spec.size, spec.size), dtype=np.uint8)
    owners = np.full((spec.size, spec.size), -1, dtype=np.int64)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for order in range(count):
        index = int(rng.integers(spec.num_classes))
        kind = spec.classes[index]
        pixels = _shape_mask(kind, spec.size, rng)
        color = np.array(CLASS_COLORS[kind]) + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        image[pixels] = color
        mask[pixels] = index + 1
        owners[pixels] = order
    visible = np.bincount(owners[owners >= 0], minlength=count)
    return image, mask, bool(visible.min() >= MIN_VISIBLE_PIXELS)


def generate_sample(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(spec.max_retries):
        image, mask, ok = _compose(spec, rng)
        if ok:
            # keep the in-memory image on the 8-bit grid written to disk
            image = quantize(np.clip(image, 0.0, 1.0)) / 255.0
            return Sample(image=image, image_label=labels_from_mask(mask, spec.num_classes),
                          gt_mask=mask, name=f"{index:04d}")
    raise GenerationError(
        f"image {index}: could not place shapes with {MIN_VISIBLE_PIXELS}+ visible pixels "
        f"in {spec.max_retries} attempts at size {spec.size}"
    )


def generate(spec, workers=1):
    """Generate every image of `spec`; the result is ordered by index."""
    samples = [None] * spec.num_images
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(generate_sample, spec, i): i for i in range(spec.num_images)}
        for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures), desc="Generating shapes"):
            index = futures[future]
            try:
                samples[index] = future.result()
            except Exception as e:
                logger.error(f"Error generating image {index}: {e}")
                raise
    logger.info(f"Generated {spec.num_images} images of {spec.size}x{spec.size} (seed {spec.seed})")
    return Dataset(class_names=spec.classes, samples=samples)


def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    for sub in ("images", "labels", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "classes.txt").write_text("\n".join(dataset.class_names) + "\n", encoding="utf-8")
    for sample in dataset.samples:
        write_image(out / "images" / f"{sample.name}.ppm", sample.image)
        write_label(out / "masks" / f"{sample.name}.pgm", sample.gt_mask)
        names = [dataset.class_names[c - 1] for c in sample.present_classes]
        (out / "labels" / f"{sample.name}.txt").write_text(",".join(names) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(dataset)} samples to {out}")


def load_dataset(data_dir, with_masks=True):
    """Read a dataset directory; image-level labels come from labels/*.txt."""
    root = Path(data_dir)
    if not (root / "images").is_dir() or not (root / "classes.txt").is_file():
        raise FileNotFoundError(f"{root} is not a dataset directory (missing images/ or classes.txt)")
    class_names = tuple(line.strip() for line in (root / "classes.txt").read_text(encoding="utf-8").splitlines()
                        if line.strip())
    samples = []
    for image_path in tqdm(sorted((root / "images").glob("*.ppm")), desc="Loading dataset"):
        name = image_path.stem
        present = np.zeros(len(class_names), dtype=bool)
        label_text = (root / "labels" / f"{name}.txt").read_text(encoding="utf-8").strip()
        for token in filter(None, (t.strip() for t in label_text.split(","))):
            if token not in class_names:
                raise ValueError(f"{name}: unknown class {token!r} in label file")
            present[class_names.index(token)] = True
        mask = read_label(root / "masks" / f"{name}.pgm") if with_masks else None
        samples.append(Sample(image=read_image(image_path), image_label=present, gt_mask=mask, name=name))
    if not samples:
        raise FileNotFoundError(f"{root / 'images'} holds no .ppm images")
    return Dataset(class_names=class_names, samples=samples)
