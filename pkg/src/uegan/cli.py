"""Command-line entry point: ``uegan {train,infer,eval,gradcheck,synth}``.

Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import io
from .errors import UEGANError
from .gradcheck import format_table, run_suite
from .inference import ensemble_average, predict_image, select_threshold
from .metrics import MetricConfig, evaluate
from .network import generator_forward
from .tensor import Tensor, no_grad, sigmoid
from .training import predict_probs, synth_dataset, train, validate

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _run_config(args):
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    overrides = {}
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg.train = dataclasses.replace(cfg.train, **overrides)
    return cfg


def _dataset(cfg):
    tc = cfg.train
    data = synth_dataset(tc.train_count + tc.val_count, tc.image_size, seed=tc.seed)
    return data[: tc.train_count], data[tc.train_count :]


def cmd_train(args):
    cfg = _run_config(args)
    os.makedirs(args.out, exist_ok=True)
    io.save_config(os.path.join(args.out, "config.txt"), cfg)
    train_set, val_set = _dataset(cfg)

    def checkpoint(step, gen, critic):
        io.save_checkpoint(os.path.join(args.out, f"generator_{step:06d}.uegt"), gen)
        io.save_checkpoint(os.path.join(args.out, f"critic_{step:06d}.uegt"), critic)

    def dump(step, gen, critic):
        io.save_checkpoint(os.path.join(args.out, f"dump_generator_{step:06d}.uegt"), gen)
        io.save_checkpoint(os.path.join(args.out, f"dump_critic_{step:06d}.uegt"), critic)

    with open(os.path.join(args.out, "reports.jsonl"), "w", encoding="utf-8") as stream:
        result = train(
            train_set,
            cfg.model,
            cfg.loss,
            cfg.train,
            report_stream=stream,
            checkpoint_fn=checkpoint,
            checkpoint_every=args.checkpoint_every,
            dump_fn=dump,
        )
    io.save_checkpoint(os.path.join(args.out, "generator.uegt"), result.gen_params)
    io.save_checkpoint(os.path.join(args.out, "critic.uegt"), result.critic_params)
    summary = validate(val_set, result.gen_params, cfg.model, tta=cfg.train.tta, metric=cfg.train.threshold_metric)
    with open(os.path.join(args.out, "validation.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _parse_threshold(text):
    if text == "auto":
        return "auto"
    try:
        t = float(text)
    except ValueError:
        raise UsageError(f"--threshold expects a number or 'auto', got {text!r}") from None
    if not 0.0 <= t <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    return t


def _save_attention(directory, image, params, model_config):
    os.makedirs(directory, exist_ok=True)
    with no_grad():
        out, maps = generator_forward(Tensor(image), params, model_config, training=False, return_maps=True)
    for s, stage in sorted(maps.items()):
        for kind, value in sorted(stage.items()):
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            io.save_gray(os.path.join(directory, f"stage{s}_{kind}.pgm"), data[0, 0])
    for level, pred in enumerate(out.intermediates):
        io.save_gray(os.path.join(directory, f"level{level}_prob.pgm"), sigmoid(pred).data[0, 0])


def cmd_infer(args):
    threshold = _parse_threshold(args.threshold)
    cfg = _run_config(args)
    paths = [args.model] + [p for p in (args.ensemble or "").split(",") if p]
    models = [io.load_checkpoint(p) for p in paths]
    image = io.load_raster(args.input)
    if image.ndim != 3:
        raise UsageError("--input must be a PPM (P6) image")
    batch = image[None]
    probs = predict_image(batch, models, cfg.model, tile=args.tile, overlap=args.overlap, tta=args.tta)[0, 0]
    if threshold == "auto":
        _, val_set = _dataset(cfg)
        members = [predict_probs(val_set, m, cfg.model, tta=args.tta) for m in models]
        val_probs = [ensemble_average(ps) for ps in zip(*members)]
        threshold = select_threshold(val_probs, [s.mask for s in val_set], cfg.train.threshold_metric)
    io.save_mask(args.output, probs >= threshold)
    if args.probs:
        io.save_gray(args.probs, probs)
    if args.attention_dir:
        _save_attention(args.attention_dir, batch, models[0], cfg.model)
    print(json.dumps({"threshold": threshold, "building_fraction": float(np.mean(probs >= threshold))}))
    return 0


def cmd_eval(args):
    pred = io.load_raster(args.pred)
    gt = io.load_raster(args.gt)
    if pred.ndim != 2 or gt.ndim != 2:
        raise UsageError("--pred and --gt must be PGM masks")
    config = MetricConfig(rho=args.rho, connectivity=args.connectivity)
    print(json.dumps(evaluate(pred, gt, config), sort_keys=True))
    return 0


def cmd_gradcheck(args):
    rows, elapsed = run_suite(seed=args.seed, instances=args.instances)
    print(format_table(rows, elapsed))
    return 0 if all(r["passed"] for r in rows) else 1


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    samples = synth_dataset(args.count, args.size, seed=args.seed)
    for i, s in enumerate(samples):
        io.save_image(os.path.join(args.out, f"image_{i:04d}.ppm"), s.image)
        io.save_mask(os.path.join(args.out, f"mask_{i:04d}.pgm"), s.mask)
    print(json.dumps({"count": len(samples), "size": args.size, "out": args.out}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="uegan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adversarial training on the synthetic dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a PPM image into a PGM mask")
    p.add_argument("--model", required=True, help="generator checkpoint (.uegt)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="config the model was trained with")
    p.add_argument("--seed", type=int, help="seed of the validation set used by --threshold auto")
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--ensemble", help="extra checkpoints, comma separated")
    p.add_argument("--threshold", default="0.5", help="T in [0,1] or 'auto'")
    p.add_argument("--probs", help="also write the probability map as PGM")
    p.add_argument("--attention-dir", help="write attention maps as PGM files here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics for a predicted mask against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--rho", type=int, default=3)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"uegan: error: {exc}", file=sys.stderr)
        return 2
    except (UEGANError, OSError, ValueError) as exc:
        print(f"uegan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
