"""
Component ablation: each variant is trained under the same seeds and
evaluated on a held-out split. Rows follow the order in which components
are added to the baseline.
"""

import logging

import numpy as np
import pandas as pd

from scripts.training.config import build_train_config
from scripts.training.evaluate import evaluate, refinement_study
from scripts.training.trainer import TSCDTrainer

logger = logging.getLogger("AblationRunner")

# the baseline trains on raw CAM pseudo-labels with classification, segmentation and regularization losses
VARIANTS = (
    ("baseline", ()),
    ("+VARM", ("varm",)),
    ("+VARM+SCD", ("varm", "scd")),
    ("+aux", ("varm", "scd", "aux")),
    ("+equ", ("varm", "scd", "aux", "equ")),
)
DEFAULT_SEEDS = (0, 1, 2)


def variant_overrides(components):
    return {
        "varm.enabled": "varm" in components,
        "loss.scd": "scd" in components,
        "loss.aux": "aux" in components,
        "loss.equ": "equ" in components,
    }


def train_variant(values, components, seed, train_set):
    resolved = {**values, **variant_overrides(components), "train.seed": seed}
    cfg = build_train_config(resolved, train_set.num_classes)
    trainer = TSCDTrainer(cfg, train_set)
    trainer.fit()
    return trainer


def ablation_run(values, train_set, val_set, seeds=DEFAULT_SEEDS, variants=VARIANTS, workers=1):
    """mIoU per variant and seed plus the median over seeds."""
    rows = []
    for name, components in variants:
        scores = {}
        for seed in seeds:
            logger.info(f"Training variant {name} with seed {seed}")
            trainer = train_variant(values, components, seed, train_set)
            scores[f"seed_{seed}"] = evaluate(val_set, trainer.net, workers).miou
        median = float(np.median(list(scores.values())))
        logger.info(f"Variant {name}: median mIoU {median:.4f}")
        rows.append({"variant": name, **scores, "median_miou": median})
    return pd.DataFrame(rows)


def refinement_run(values, train_set, val_set, seeds=DEFAULT_SEEDS, workers=1):
    """Pseudo-label quality of CAM / beta = 0 / VARM from networks trained on the full objective."""
    tables = []
    for seed in seeds:
        trainer = train_variant(values, VARIANTS[-1][1], seed, train_set)
        table = refinement_study(val_set, trainer.net, trainer.cfg.cam, trainer.cfg.varm, workers)
        tables.append(table.set_index("method")["miou"].rename(f"seed_{seed}"))
    result = pd.concat(tables, axis=1)
    result["median_miou"] = result.median(axis=1)
    return result.reset_index()


# (previous variant, next variant, required median mIoU gain); mIoU is a fraction, so 0.01 is one point
EXPECTED_GAINS = (
    ("baseline", "+VARM", 0.01),
    ("+VARM", "+VARM+SCD", 0.01),
    ("+VARM+SCD", "+aux", 0.0),
    ("+aux", "+equ", 0.0),
)


def ablation_direction(table, expected=EXPECTED_GAINS):
    """Check each step of the component table against its required median gain."""
    medians = table.set_index("variant")["median_miou"]
    rows = []
    for before, after, required in expected:
        gain = float(medians[after] - medians[before])
        rows.append({"step": f"{before} -> {after}", "gain": gain, "required": required,
                     "holds": bool(gain >= required)})
    checks = pd.DataFrame(rows)
    for row in checks.itertuples():
        if not row.holds:
            logger.warning(f"Ablation step {row.step} gained {row.gain:+.4f}, needs {row.required:+.4f}")
    return checks
