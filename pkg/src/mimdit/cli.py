"""Command-line front end.

Exit codes: 0 on success, 1 for contract violations (bad arguments, malformed
configs or files, shape mismatches), 2 for numerical failures (non-finite
training or sampling states, failed gradient checks). Usage errors therefore
map to 1, not argparse's default.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import tensor as T
from .backbone import load_checkpoint, save_checkpoint
from .degradations import build_dataset, load_dataset, write_pgm, write_ppm
from .errors import ConfigurationError, MimError, NumericalFailureError, ParameterError, PersistenceError
from .flow import SamplerConfig
from .gradcheck import CHECK_COORDS_PER_TENSOR, FD_TOLERANCE, backbone_gradient_check
from .routing import VARIANTS
from .training import (
    ExperimentConfig,
    aggregate_traces,
    collect_routing_traces,
    load_ini,
    psnr_from_mse,
    render_ablation_table,
    render_routing_report,
    restoration_noise,
    restore_image,
    run_ablation,
    train_model,
    write_trace_file,
)


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _load_config(args):
    config = load_ini(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config.validate()


def _export_image(path_base, image, channels):
    if channels == 1:
        write_pgm(path_base + ".pgm", image)
    elif channels == 3:
        write_ppm(path_base + ".ppm", image)
    else:
        raise ParameterError(f"image export supports 1 or 3 channels, got {channels}")


def cmd_gen_data(args):
    config = _load_config(args)
    d = config.data
    count = d.count if args.count is None else args.count
    kinds = tuple(k.strip() for k in args.kinds.split(",")) if args.kinds else d.kinds
    samples = build_dataset(
        args.out,
        count,
        kinds,
        (d.severity_lo, d.severity_hi),
        config.seed,
        height=d.height,
        width=d.width,
        channels=d.channels,
    )
    print(f"wrote {len(samples)} samples to {args.out}")
    if args.export_dir:
        os.makedirs(args.export_dir, exist_ok=True)
        for i, sample in enumerate(samples):
            _export_image(os.path.join(args.export_dir, f"clean_{i:04d}"), sample.clean, d.channels)
            _export_image(
                os.path.join(args.export_dir, f"degraded_{i:04d}"), sample.degraded, d.channels
            )
        print(f"exported {2 * len(samples)} images to {args.export_dir}")


def cmd_train(args):
    config = _load_config(args)
    samples = load_dataset(args.data) if args.data else None
    model, history = train_model(config, samples=samples, log_fn=print)
    save_checkpoint(args.out, model)
    if history:
        print(f"trained {config.train_steps} steps, final loss {history[-1]:.8f}")
    else:
        print("trained 0 steps")
    print(f"saved checkpoint to {args.out}")


def cmd_restore(args):
    config = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise ParameterError(f"sample index {args.index} outside dataset of {len(samples)}")
    sample = samples[args.index]
    sampler = SamplerConfig(steps=args.steps) if args.steps is not None else config.sampler
    noise = restoration_noise(model.config, config.seed, args.index)
    restored = restore_image(model, sample.degraded, sampler, noise)
    try:
        with open(args.out, "wb") as f:
            T.write_tensor(f, T.Tensor(restored))
    except OSError as e:
        raise PersistenceError(f"cannot write restored tensor {args.out}: {e}")
    mse = float(np.mean((restored - sample.clean) ** 2))
    kind = sample.spec.kind if sample.spec is not None else "unknown"
    print(
        f"restored sample {args.index} ({kind}): mse {mse:.8f}, psnr {psnr_from_mse(mse):.8f}"
    )
    print(f"wrote restored tensor to {args.out}")
    if args.export:
        _export_image(args.export, np.clip(restored, 0.0, 1.0), model.config.channels)
        print(f"exported restored image at {args.export}")


def cmd_ablate(args):
    config = _load_config(args)
    variants = (
        tuple(v.strip() for v in args.variants.split(",")) if args.variants else VARIANTS
    )
    rows = run_ablation(config, variants, log_fn=print)
    table = render_ablation_table(rows)
    try:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table)
    except OSError as e:
        raise PersistenceError(f"cannot write ablation table {args.out}: {e}")
    print(table, end="")


def cmd_route_report(args):
    config = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    traces = collect_routing_traces(model, samples, config.seed)
    if args.trace_out:
        write_trace_file(args.trace_out, traces)
        print(f"wrote {len(traces)} routing traces to {args.trace_out}")
    report = aggregate_traces(traces, all_blocks=args.all_blocks)
    text = render_routing_report(report)
    try:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise PersistenceError(f"cannot write routing report {args.out}: {e}")
    print(text, end="")


def cmd_grad_check(args):
    base = args.seed if args.seed is not None else 0
    failures = 0
    for offset in range(args.seeds):
        err = backbone_gradient_check(base + offset, coords_per_tensor=args.coords)
        ok = err < FD_TOLERANCE
        print(f"seed {base + offset}: max relative error {err:.3e} {'PASS' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    if failures:
        raise NumericalFailureError(
            f"{failures} of {args.seeds} gradient checks exceeded {FD_TOLERANCE}"
        )
    print(f"all {args.seeds} gradient checks within {FD_TOLERANCE}")


def build_parser():
    parser = _CliParser(prog="mimdit", description="Mixture-of-experts diffusion restorer")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config file")
        p.add_argument("--seed", type=int, help="override the experiment seed")

    gen = sub.add_parser("gen-data", help="synthesize a paired degradation dataset")
    common(gen)
    gen.add_argument("--out", required=True, help="dataset file to write")
    gen.add_argument("--count", type=int, help="number of samples")
    gen.add_argument("--kinds", help="comma-separated degradation kinds")
    gen.add_argument("--export-dir", help="also write images here as PGM/PPM")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train a model and save a checkpoint")
    common(train)
    train.add_argument("--data", help="dataset file; synthesized from the config when omitted")
    train.add_argument("--out", required=True, help="checkpoint file to write")
    train.set_defaults(func=cmd_train)

    restore = sub.add_parser("restore", help="restore one dataset sample with a trained model")
    common(restore)
    restore.add_argument("--checkpoint", required=True, help="checkpoint file")
    restore.add_argument("--data", required=True, help="dataset file")
    restore.add_argument("--index", type=int, default=0, help="sample index")
    restore.add_argument("--out", required=True, help="restored tensor file to write")
    restore.add_argument("--steps", type=int, help="override sampler steps")
    restore.add_argument("--export", help="also write the restored image at this path prefix")
    restore.set_defaults(func=cmd_restore)

    ablate = sub.add_parser("ablate", help="train and compare architecture variants")
    common(ablate)
    ablate.add_argument("--out", required=True, help="table file to write")
    ablate.add_argument("--variants", help="comma-separated variant names")
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("route-report", help="summarize routing decisions by degradation kind")
    common(report)
    report.add_argument("--checkpoint", required=True, help="checkpoint file")
    report.add_argument("--data", required=True, help="labeled dataset file")
    report.add_argument("--out", required=True, help="report file to write")
    report.add_argument("--all-blocks", action="store_true", help="average over every block")
    report.add_argument("--trace-out", help="also write raw routing trace lines here")
    report.set_defaults(func=cmd_route_report)

    check = sub.add_parser("grad-check", help="finite-difference check of model gradients")
    check.add_argument("--seed", type=int, help="base seed (default 0)")
    check.add_argument("--seeds", type=int, default=5, help="number of seeds to run")
    check.add_argument(
        "--coords",
        type=int,
        default=CHECK_COORDS_PER_TENSOR,
        help="coordinates sampled per parameter tensor",
    )
    check.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except NumericalFailureError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except MimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
