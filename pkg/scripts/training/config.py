"""
Flat `key = value` configuration.

Every key is declared once in REGISTRY with its parser, default and help
text. Files are parsed with python-dotenv, then `--set key=value`
overrides are applied; unknown keys are errors.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from scripts.data.augment import AugmentConfig
from scripts.errors import ConfigError
from scripts.segmentation.cam import DEFAULT_HI, DEFAULT_LO
from scripts.segmentation.correspondence import SUPPORTED_SCALES, AffineTransform
from scripts.segmentation.losses import REG_SIGMA, LossWeights
from scripts.segmentation.model import DOWNSAMPLE, ModelConfig
from scripts.segmentation.varm import DEFAULT_DILATIONS, VarmConfig

logger = logging.getLogger("TSCDConfig")

COMPONENTS = ("varm", "scd", "aux", "equ")


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_tuple(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _auto_int(text):
    return "auto" if text.strip().lower() == "auto" else int(text)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


REGISTRY = {
    "train.iterations": Key(int, 3000, "optimizer steps"),
    "train.warmup_iterations": Key(_auto_int, "auto", "classification-only steps; auto = 10% of iterations"),
    "train.batch_size": Key(int, 4, "images per step"),
    "train.lr": Key(float, 6e-5, "AdamW learning rate (constant)"),
    "train.weight_decay": Key(float, 0.01, "AdamW decoupled weight decay"),
    "train.seed": Key(int, 0, "seed for initialization, batching, augmentation and sampling"),
    "loss.lambda1": Key(float, 0.1, "weight of the SCD, segmentation, equivariant and auxiliary losses"),
    "loss.lambda2": Key(float, 0.01, "weight of the regularization loss"),
    "loss.lambda3": Key(float, 1.0, "weight of the classification loss"),
    "loss.scd": Key(_bool, True, "enable the self-correspondence distillation loss"),
    "loss.aux": Key(_bool, True, "enable the attention-affinity auxiliary loss"),
    "loss.equ": Key(_bool, True, "enable the equivariant regularization loss"),
    "reg.sigma": Key(float, REG_SIGMA, "image-gradient scale of the regularization weights"),
    "varm.enabled": Key(_bool, True, "refine pseudo-labels with VARM before supervision"),
    "varm.alpha": Key(float, 4.0, "RGB affinity sharpness"),
    "varm.beta": Key(float, 0.01, "pixel-variation correction strength (0 = plain RGB affinity)"),
    "varm.dilations": Key(_int_tuple, DEFAULT_DILATIONS, "neighborhood dilation rates"),
    "varm.iterations": Key(int, 10, "refinement iterations"),
    "scd.n": Key(int, 40, "positions sampled for the correspondence losses"),
    "scd.flip_prob": Key(float, 0.5, "probability that the second view is flipped"),
    "scd.scales": Key(_float_tuple, SUPPORTED_SCALES, "rescale factors drawn for the second view"),
    "cam.hi": Key(float, DEFAULT_HI, "foreground threshold"),
    "cam.lo": Key(float, DEFAULT_LO, "background threshold"),
    "model.channels": Key(int, 32, "feature channels K"),
    "model.stem_channels": Key(int, 16, "channels of the first convolution"),
    "aug.scale_min": Key(float, 0.75, "smallest random rescale"),
    "aug.scale_max": Key(float, 1.25, "largest random rescale"),
    "aug.flip_prob": Key(float, 0.5, "horizontal flip probability"),
    "aug.crop_size": Key(int, 64, "training crop size"),
}


def defaults():
    return {key: spec.default for key, spec in REGISTRY.items()}


def parse_assignment(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _apply(values, key, raw, source):
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key {key!r} in {source}")
    try:
        values[key] = REGISTRY[key].parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key} in {source}: {raw!r} ({exc})") from exc


def load_config(path=None, overrides=()):
    """Resolved flat mapping: defaults, then the file, then overrides."""
    values = defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        for key, raw in dotenv_values(path, encoding="utf-8").items():
            if raw is None:
                raise ConfigError(f"config key {key!r} in {path} has no value")
            _apply(values, key, raw, str(path))
        logger.info(f"Loaded configuration from {path}")
    for item in overrides:
        key, raw = parse_assignment(item) if isinstance(item, str) else item
        _apply(values, key, str(raw), "overrides")
    return values


def dump_config(values, path):
    lines = [f"{key} = {_fmt(values[key])}" for key in REGISTRY]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def describe_keys():
    """Help text listing every key and its default."""
    return "\n".join(f"  {key} = {_fmt(spec.default)}  ({spec.help})" for key, spec in REGISTRY.items())


@dataclass
class ScdConfig:
    n: int = 40
    flip_prob: float = 0.5
    scales: tuple = SUPPORTED_SCALES

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.n < 2:
            raise ValueError(f"scd.n must be at least 2, got {self.n}")
        unsupported = [s for s in self.scales if s not in SUPPORTED_SCALES]
        if not self.scales or unsupported:
            raise ValueError(f"scd.scales must be drawn from {SUPPORTED_SCALES}, got {self.scales}")


@dataclass
class CamConfig:
    hi: float = DEFAULT_HI
    lo: float = DEFAULT_LO

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError(f"thresholds must satisfy 0 <= lo < hi <= 1, got lo={self.lo}, hi={self.hi}")


@dataclass
class TrainConfig:
    iterations: int = 3000
    warmup_iterations: int = 300
    batch_size: int = 4
    lr: float = 6e-5
    weight_decay: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    varm: VarmConfig = field(default_factory=VarmConfig)
    scd: ScdConfig = field(default_factory=ScdConfig)
    cam: CamConfig = field(default_factory=CamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    components: frozenset = frozenset(COMPONENTS)
    reg_sigma: float = REG_SIGMA

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if not 0 <= self.warmup_iterations <= self.iterations:
            raise ValueError(f"warmup_iterations {self.warmup_iterations} must lie in 0..{self.iterations}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown training components {sorted(unknown)}")
        self.components = frozenset(self.components)
        self._check_views()

    def _check_views(self):
        """Both views must reach the network at a size it accepts, with room for scd.n positions."""
        crop = self.aug.crop_size
        for scale in self.scd.scales:
            height, _ = AffineTransform(flip=False, scale=scale).output_size(crop, crop)
            if height % DOWNSAMPLE:
                raise ValueError(f"aug.crop_size {crop} rescaled by {scale:g} gives {height}x{height}, "
                                 f"which is not divisible by {DOWNSAMPLE}")
        cells = (crop // DOWNSAMPLE) ** 2
        if self.scd.n > cells:
            raise ValueError(f"scd.n = {self.scd.n} exceeds the {cells} positions of the "
                             f"{crop // DOWNSAMPLE}x{crop // DOWNSAMPLE} CAM grid of a {crop} crop")

    def uses(self, component):
        return component in self.components


def build_train_config(values, num_classes):
    """Typed training configuration from a resolved flat mapping."""
    iterations = values["train.iterations"]
    warmup = values["train.warmup_iterations"]
    if warmup == "auto":
        warmup = iterations // 10
    components = {"varm"} if values["varm.enabled"] else set()
    components |= {name for name in ("scd", "aux", "equ") if values[f"loss.{name}"]}
    try:
        return TrainConfig(
            iterations=iterations,
            warmup_iterations=warmup,
            batch_size=values["train.batch_size"],
            lr=values["train.lr"],
            weight_decay=values["train.weight_decay"],
            seed=values["train.seed"],
            weights=LossWeights(values["loss.lambda1"], values["loss.lambda2"], values["loss.lambda3"]),
            varm=VarmConfig(
                alpha=values["varm.alpha"],
                beta=values["varm.beta"],
                dilations=values["varm.dilations"],
                iterations=values["varm.iterations"],
            ),
            scd=ScdConfig(n=values["scd.n"], flip_prob=values["scd.flip_prob"], scales=values["scd.scales"]),
            cam=CamConfig(hi=values["cam.hi"], lo=values["cam.lo"]),
            model=ModelConfig(
                num_classes=num_classes,
                channels=values["model.channels"],
                stem_channels=values["model.stem_channels"],
            ),
            aug=AugmentConfig(
                scale_min=values["aug.scale_min"],
                scale_max=values["aug.scale_max"],
                flip_prob=values["aug.flip_prob"],
                crop_size=values["aug.crop_size"],
            ),
            components=frozenset(components),
            reg_sigma=values["reg.sigma"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def thread_count():
    """Worker threads for generation and evaluation pools (SCD_THREADS, default 1)."""
    load_dotenv()
    raw = os.getenv("SCD_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"SCD_THREADS must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"SCD_THREADS must be at least 1, got {threads}")
    return threads
