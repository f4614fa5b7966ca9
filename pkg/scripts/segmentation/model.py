"""
Small shared-weight segmentation network.

    img -> conv s2 -> conv s2 -> conv -> conv = f    (1/4 resolution, K channels)
    f   -> attention block 1 -> attention block 2 = g
    p   = classifier(GAP(g))                          (class logits)
    cam = ReLU(f W^T)                                 (same classifier weights)
    s   = upsample(concat(f, g) W_seg + b_seg)        (C + 1 channels)

Both views of an image go through the same parameter tensors.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scripts.autograd import Tensor, as_tensor, bilinear_resize, concat, conv2d, matmul, softmax
from scripts.errors import CheckpointError, ShapeError
from scripts.segmentation.cam import ClassifierHead, class_scores, compute_cam

logger = logging.getLogger("TSCDNet")

CHECKPOINT_MAGIC = b"TSCDCKPT"
CHECKPOINT_VERSION = 1
DOWNSAMPLE = 4
ATTENTION_BLOCKS = ("attn1", "attn2")


@dataclass
class ModelConfig:
    num_classes: int = 3
    channels: int = 32
    stem_channels: int = 16

    def __post_init__(self):
        if min(self.num_classes, self.channels, self.stem_channels) < 1:
            raise ValueError(f"model sizes must be positive: {self}")


@dataclass
class ModelOutput:
    features: Tensor
    attention: tuple
    attention_logits: tuple
    class_logits: Tensor
    seg_logits: Tensor
    cam: object


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed, cfg=None, zero_heads=False):
    """Scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    k, stem, c = cfg.channels, cfg.stem_channels, cfg.num_classes
    shapes = {
        "stem.w": ((3, 3, 3, stem), 27),
        "conv2.w": ((3, 3, stem, k), 9 * stem),
        "conv3.w": ((3, 3, k, k), 9 * k),
        "conv4.w": ((3, 3, k, k), 9 * k),
    }
    for block in ATTENTION_BLOCKS:
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{block}.{proj}"] = ((k, k), k)
    shapes["cls.w"] = ((c, k), k)
    shapes["seg.w"] = ((2 * k, c + 1), 2 * k)

    params = {}
    for name, (shape, fan_in) in shapes.items():
        values = _uniform(rng, shape, fan_in)
        if zero_heads and name in ("cls.w", "seg.w"):
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
        if name.endswith(".w") and name != "cls.w":
            bias = f"{name[:-2]}.b"
            params[bias] = Tensor(np.zeros(shape[-1]), requires_grad=True, name=bias)
    return params


def attention_block(x, wq, wk, wv, wo):
    """Single-head self-attention over the h x w grid with a residual projection.

    Returns (output h x w x K, weights 1 x N x N, logits 1 x N x N).
    """
    height, width, channels = x.shape
    tokens = x.reshape(height * width, channels)
    q, k, v = matmul(tokens, wq), matmul(tokens, wk), matmul(tokens, wv)
    logits = matmul(q, k.T) / np.sqrt(channels)
    weights = softmax(logits, axis=-1)
    out = tokens + matmul(matmul(weights, v), wo)
    n = height * width
    return out.reshape(height, width, channels), weights.reshape(1, n, n), logits.reshape(1, n, n)


class TSCDNet:
    """Encoder, attention blocks and the two heads over a shared parameter dict."""

    def __init__(self, params):
        missing = [name for name in init_params(0, ModelConfig(1, 1, 1)) if name not in params]
        if missing:
            raise CheckpointError(f"parameters missing: {', '.join(missing)}")
        self.params = params
        self.head = ClassifierHead(params["cls.w"])

    @classmethod
    def create(cls, seed, cfg=None, zero_heads=False):
        net = cls(init_params(seed, cfg, zero_heads))
        logger.info(f"Initialized network: {net.num_classes} classes, {net.channels} channels, "
                    f"{net.num_parameters()} parameters (seed {seed})")
        return net

    @classmethod
    def from_params(cls, params):
        return cls(params)

    @property
    def num_classes(self):
        return self.params["cls.w"].shape[0]

    @property
    def channels(self):
        return self.params["cls.w"].shape[1]

    @property
    def config(self):
        return ModelConfig(self.num_classes, self.channels, self.params["stem.w"].shape[-1])

    def parameters(self):
        return self.params

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def _conv(self, x, name, stride):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, padding=1).relu()

    def encode(self, img):
        img = as_tensor(img)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ShapeError(f"expected an H x W x 3 image, got {img.shape}")
        height, width = img.shape[:2]
        if height % DOWNSAMPLE or width % DOWNSAMPLE or height == 0 or width == 0:
            raise ShapeError(f"image size {height}x{width} is not divisible by {DOWNSAMPLE}")
        x = img - 0.5
        x = self._conv(x, "stem", 2)
        x = self._conv(x, "conv2", 2)
        x = self._conv(x, "conv3", 1)
        return self._conv(x, "conv4", 1)

    def forward(self, img):
        img = as_tensor(img)
        f = self.encode(img)
        g = f
        weights, logits = [], []
        for block in ATTENTION_BLOCKS:
            g, a, z = attention_block(g, *(self.params[f"{block}.{p}"] for p in ("wq", "wk", "wv", "wo")))
            weights.append(a)
            logits.append(z)
        p = class_scores(g, self.head)
        fused = matmul(concat([f, g], axis=-1), self.params["seg.w"]) + self.params["seg.b"]
        s = bilinear_resize(fused, img.shape[0], img.shape[1])
        return ModelOutput(
            features=f,
            attention=tuple(weights),
            attention_logits=tuple(logits),
            class_logits=p,
            seg_logits=s,
            cam=compute_cam(f, self.head),
        )

    __call__ = forward

    def predict(self, img):
        """Class-index map: argmax of the segmentation logits at image resolution."""
        return self.forward(img).seg_logits.data.argmax(axis=-1).astype(np.uint8)


def save_checkpoint(params, path):
    """Write the parameter dict in sorted name order."""
    names = sorted(params)
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<II", CHECKPOINT_VERSION, len(names))
    for name in names:
        encoded = name.encode("utf-8")
        shape = params[name].shape
        header += struct.pack("<H", len(encoded)) + encoded
        header += struct.pack(f"<B{len(shape)}I", len(shape), *shape)
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(bytes(header) + payload)
    logger.info(f"Saved {len(names)} tensors to {path}")


def load_checkpoint(path):
    """Read a checkpoint back into trainable tensors keyed by name."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        table = []
        for _ in range(count):
            (length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + length].decode("utf-8")
            offset += length
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            table.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc

    params = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * size
        if end > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated at tensor {name}")
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    return params
