#!/usr/bin/env python3
"""
Command-line entry point: dataset generation, training, label refinement,
evaluation, gradient checks, rendering and ablations.

Usage: python -m scripts.tscd <command> [options]

Exit codes: 0 success, 1 check failure, 2 usage or input error,
3 numeric failure.
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from scripts.data.image_io import read_image, read_label, write_label
from scripts.data.synthetic import CLASS_NAMES, SyntheticSpec, generate, load_dataset, save_dataset
from scripts.errors import NumericError, ShapeError, TrainingDiverged, TSCDError
from scripts.segmentation.cam import PseudoLabel
from scripts.segmentation.model import TSCDNet, load_checkpoint
from scripts.segmentation.varm import DEFAULT_DILATIONS, VarmConfig, refine_label_map
from scripts.training.ablation import DEFAULT_SEEDS, ablation_direction, ablation_run, refinement_run
from scripts.training.config import build_train_config, describe_keys, dump_config, load_config, thread_count
from scripts.training.evaluate import evaluate
from scripts.training.gradcheck_suite import run_gradcheck
from scripts.training.render import render
from scripts.training.trainer import TSCDTrainer, attach_log_file

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger("TSCDCli")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _csv_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _int_list(text):
    return tuple(int(v) for v in _csv_list(text))


def _config_overrides(args):
    overrides = list(args.set or [])
    for flag, key in (("iterations", "train.iterations"), ("seed", "train.seed"),
                      ("lr", "train.lr"), ("batch_size", "train.batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    return overrides


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} {path} does not exist")


def cmd_gen(args):
    spec = SyntheticSpec(num_images=args.n, size=args.size, classes=args.classes, seed=args.seed)
    dataset = generate(spec, workers=thread_count())
    save_dataset(dataset, args.out)
    return EXIT_OK


def cmd_train(args):
    _require_dir(args.data, "dataset")
    train_set = load_dataset(args.data)
    values = load_config(args.config, _config_overrides(args))
    cfg = build_train_config(values, train_set.num_classes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = attach_log_file(out / "train.log")
    try:
        dump_config(values, out / "config.cfg")
        trainer = TSCDTrainer(cfg, train_set)
        try:
            trainer.fit()
        finally:
            trainer.save(out)
        eval_set = load_dataset(args.val) if args.val else train_set
        metrics = evaluate(eval_set, trainer.net, workers=thread_count())
        metrics.to_csv(out / "metrics.csv")
        print(metrics.summary())
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_refine(args):
    image = read_image(args.image)
    labels = read_label(args.label)
    if image.shape[:2] != labels.shape:
        raise ShapeError(f"image {image.shape[:2]} and label {labels.shape} sizes differ")
    cfg = VarmConfig(alpha=args.alpha, beta=args.beta, dilations=args.dilations, iterations=args.iters)
    if cfg.iterations == 0:
        shutil.copyfile(args.label, args.out)
        return EXIT_OK
    valid = labels[labels != 255]
    num_classes = max(int(valid.max()) if valid.size else 0, args.num_classes)
    refined = refine_label_map(PseudoLabel(labels, num_classes), image, cfg)
    write_label(args.out, refined.labels)
    changed = int(np.count_nonzero(refined.labels != labels))
    logger.info(f"Refined {args.label}: {changed} pixels changed, written to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    _require_dir(args.data, "dataset")
    dataset = load_dataset(args.data)
    net = TSCDNet.from_params(load_checkpoint(args.ckpt))
    metrics = evaluate(dataset, net, workers=thread_count())
    if args.out:
        metrics.to_csv(args.out)
    print(metrics.table().to_csv(index=False, na_rep="nan"), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    table = run_gradcheck(seed=args.seed, tol=args.tol)
    print(table.to_string(index=False))
    if not table["passed"].all():
        logger.error(f"Gradient check failed for: {', '.join(table.loc[~table['passed'], 'loss'])}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_render(args):
    net = TSCDNet.from_params(load_checkpoint(args.ckpt))
    if len(args.classes) != net.num_classes:
        raise ValueError(f"checkpoint has {net.num_classes} classes but {len(args.classes)} names were given")
    render(net, read_image(args.image), args.out, args.classes)
    return EXIT_OK


def cmd_ablation(args):
    _require_dir(args.data, "dataset")
    _require_dir(args.val, "validation dataset")
    train_set, val_set = load_dataset(args.data), load_dataset(args.val)
    values = load_config(args.config, _config_overrides(args))
    workers = thread_count()
    if args.study == "components":
        table = ablation_run(values, train_set, val_set, seeds=args.seeds, workers=workers)
    else:
        table = refinement_run(values, train_set, val_set, seeds=args.seeds, workers=workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"ablation_{args.study}.csv", index=False)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if args.study == "components":
        checks = ablation_direction(table)
        checks.to_csv(out / "ablation_direction.csv", index=False)
        print(checks.to_string(index=False, float_format=lambda v: f"{v:+.4f}"))
    return EXIT_OK


def _add_training_flags(parser):
    parser.add_argument('--config', type=str, help='key = value configuration file')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='override a configuration key')
    parser.add_argument('--iterations', type=int, help='override train.iterations')
    parser.add_argument('--seed', type=int, help='override train.seed')
    parser.add_argument('--lr', type=float, help='override train.lr')
    parser.add_argument('--batch-size', type=int, help='override train.batch_size')


def build_parser():
    parser = argparse.ArgumentParser(description='Weakly supervised segmentation with self correspondence distillation')
    sub = parser.add_subparsers(dest='command', required=True)
    formatter = argparse.ArgumentDefaultsHelpFormatter
    keys_help = f"configuration keys and defaults:\n{describe_keys()}"

    p = sub.add_parser('gen', help='generate a synthetic-shapes dataset', formatter_class=formatter)
    p.add_argument('--out', type=str, required=True, help='output dataset directory')
    p.add_argument('--n', type=int, default=200, help='number of images')
    p.add_argument('--size', type=int, default=64, help='image height and width (multiple of 4)')
    p.add_argument('--classes', type=_csv_list, default=CLASS_NAMES, help='comma-separated class names')
    p.add_argument('--seed', type=int, default=0, help='dataset seed')
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser('train', help='train a network', epilog=keys_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument('--data', type=str, required=True, help='training dataset directory')
    p.add_argument('--out', type=str, required=True, help='output directory')
    p.add_argument('--val', type=str, help='dataset for the final metrics (default: the training set)')
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('refine', help='refine a label map with VARM', formatter_class=formatter)
    p.add_argument('--image', type=str, required=True, help='P6 image')
    p.add_argument('--label', type=str, required=True, help='P5 label map (255 = ignore)')
    p.add_argument('--out', type=str, required=True, help='refined P5 label map')
    p.add_argument('--alpha', type=float, default=4.0, help='RGB affinity sharpness')
    p.add_argument('--beta', type=float, default=0.01, help='pixel-variation correction strength')
    p.add_argument('--iters', type=int, default=10, help='refinement iterations')
    p.add_argument('--dilations', type=_int_list, default=DEFAULT_DILATIONS, help='dilation rates')
    p.add_argument('--num-classes', type=int, default=len(CLASS_NAMES), help='foreground classes')
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser('eval', help='mIoU of a checkpoint on a dataset', formatter_class=formatter)
    p.add_argument('--data', type=str, required=True, help='dataset directory with masks')
    p.add_argument('--ckpt', type=str, required=True, help='checkpoint file')
    p.add_argument('--out', type=str, help='also write the metrics CSV here')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference checks of every loss', formatter_class=formatter)
    p.add_argument('--seed', type=int, default=0, help='seed for the random inputs')
    p.add_argument('--tol', type=float, default=1e-4, help='relative error bound')
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('render', help='CAM heatmaps and segmentation overlay', formatter_class=formatter)
    p.add_argument('--ckpt', type=str, required=True, help='checkpoint file')
    p.add_argument('--image', type=str, required=True, help='P6 image')
    p.add_argument('--out', type=str, required=True, help='output directory')
    p.add_argument('--classes', type=_csv_list, default=CLASS_NAMES, help='comma-separated class names')
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('ablation', help='component or refinement ablation', epilog=keys_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument('--data', type=str, required=True, help='training dataset directory')
    p.add_argument('--val', type=str, required=True, help='validation dataset directory')
    p.add_argument('--out', type=str, required=True, help='output directory')
    p.add_argument('--seeds', type=_int_list, default=DEFAULT_SEEDS, help='training seeds')
    p.add_argument('--study', choices=('components', 'refine'), default='components', help='which ablation')
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        logger.error(f"Training diverged at step {e.step}: {e}")
        for name, values in e.components.items():
            logger.error(f"  {name}: {values}")
        return EXIT_NUMERIC
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (TSCDError, ValueError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
