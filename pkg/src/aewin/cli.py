"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

import numpy as np

from . import analysis
from .backbone import ModelSpec, load_spec, load_weights, model_forward, save_weights, stage_config, stage_resolutions
from .data import CLASS_NAMES, synthetic_example
from .numerics import ContainerError, Tensor, load_tensors
from .train import DEFAULT_BATCH, DEFAULT_LR, DEFAULT_TRAIN_SIZE, DivergenceError, train_toy
from .verify import DEFAULT_SIZES, DEFAULT_WINDOWS, CheckResult, run_gradcheck, run_verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# Reference sizes of the two presets: parameters, and multiply-accumulates at 224^2.
REFERENCE_PARAMS = {"aewin-t": 22e6, "aewin-b": 77e6}
REFERENCE_FLOPS = {"aewin-t": 4.0e9, "aewin-b": 14.6e9}


class UsageError(Exception):
    pass


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for item in text.split(","):
        try:
            h, w = item.lower().split("x")
            sizes.append((int(h), int(w)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {item!r}, expected HxW") from None
    return sizes


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}, expected e.g. 2,4") from None


def _print_checks(results: list[CheckResult], label: str) -> int:
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        bound = f"< {r.tolerance:g}" if r.tolerance > 0 else "== 0"
        print(f"{status}  {r.name:<{width}}  {r.value:.3e}  ({bound}, {r.cases} cases)")
    if failed:
        print(f"{label}: {len(failed)} check(s) failed: {', '.join(r.name for r in failed)}")
        return EXIT_FAIL
    print(f"{label}: all {len(results)} checks passed")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_verify(seed=args.seed, sizes=args.sizes, windows=args.windows, seeds=args.seeds)
    return _print_checks(results, "verify")


def cmd_gradcheck(args) -> int:
    return _print_checks(run_gradcheck(seed=args.seed), "gradcheck")


def _spec_arg(args) -> ModelSpec:
    name = getattr(args, "spec_name", None) or args.spec
    try:
        return load_spec(name)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_flops(args) -> int:
    spec = _spec_arg(args)
    size = args.size
    report = analysis.flops_model(spec, size)
    ref = REFERENCE_FLOPS.get(spec.name) if size == 224 else None
    print(analysis.render_flops(report, as_csv=args.csv, reference=ref), end="\n" if not args.csv else "")
    if args.compare_global:
        last = len(spec.dims) - 1
        h, w = stage_resolutions(spec, size, size)[last]
        c = spec.dims[last]
        m = stage_config(spec, last, h, w).window
        glob = analysis.flops_global(h, w, c)
        local = analysis.flops_aewin(h, w, c, m)
        print(f"final stage {h}x{w}x{c}: global attention {glob}, AEWin attention {local}")
    return EXIT_OK


def cmd_params(args) -> int:
    spec = _spec_arg(args)
    text = analysis.render_params(spec, as_csv=args.csv, reference=REFERENCE_PARAMS.get(spec.name))
    print(text, end="\n" if not args.csv else "")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    spec = _spec_arg(args)

    def show(entry):
        if args.csv:
            print(f"{entry.step},{entry.loss:.17g},{entry.accuracy:.6f}", flush=True)
        elif entry.step % args.log_every == 0 or entry.step == args.steps:
            print(f"step {entry.step:4d}  loss {entry.loss:.6f}  acc {entry.accuracy:.3f}", flush=True)

    if args.csv:
        print("step,loss,accuracy")
    try:
        result = train_toy(
            spec,
            seed=args.seed,
            steps=args.steps,
            lr=args.lr,
            batch_size=args.batch_size,
            train_size=args.train_size,
            image_size=args.image_size,
            on_step=show,
        )
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if not args.csv:
        print(f"initial loss {result.initial_loss:.6f}")
        print(f"final loss {result.final_loss:.6f}  training accuracy {result.final_accuracy:.3f}")
    if args.out:
        save_weights(args.out, result.params, spec)
        if not args.csv:
            print(f"saved weights to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    spec = _spec_arg(args) if args.spec else None
    try:
        params, spec = load_weights(args.weights, spec)
    except (ContainerError, OSError) as exc:
        print(f"cannot load weights: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.synthetic is not None:
        image, label = synthetic_example(args.seed, args.synthetic, patch=spec.patch_size, window=spec.window)
        print(f"synthetic example {args.synthetic} (label {label})")
    else:
        try:
            tensors, _ = load_tensors(args.image)
        except (ContainerError, OSError) as exc:
            print(f"cannot load image: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if "image" not in tensors:
            print(f"{args.image}: no tensor named 'image'", file=sys.stderr)
            return EXIT_USAGE
        image = tensors["image"].data
    try:
        logits = model_forward(Tensor(image), params, spec).data
    except ValueError as exc:
        print(f"image does not fit spec {spec.name}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cls = int(np.argmax(logits))
    name = f" ({CLASS_NAMES[cls]})" if spec.num_classes == len(CLASS_NAMES) else ""
    print(f"class {cls}{name}")
    print("logits " + " ".join(f"{v:.17g}" for v in logits))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--spec", default=argparse.SUPPRESS, help="preset name or JSON spec file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("--csv", action="store_true", default=argparse.SUPPRESS, help="comma-separated output")

    parser = argparse.ArgumentParser(prog="aewin", parents=[common], description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="oracle equivalence, round-trip and reachability")
    p.add_argument("--sizes", type=_parse_sizes, default=None, help="grid sizes, e.g. 4x4,8x8")
    p.add_argument("--windows", type=_parse_ints, default=None, help="window sizes, e.g. 2,4")
    p.add_argument("--seeds", type=int, default=10, help="random draws per grid point")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference gradient checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", parents=[common], help="itemized multiply-accumulate report")
    p.add_argument("spec_name", nargs="?", metavar="SPEC")
    p.add_argument("size", nargs="?", type=int, default=224, metavar="SIZE")
    p.add_argument("--compare-global", action="store_true", help="also print global attention cost at the last stage")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("params", parents=[common], help="parameter count breakdown")
    p.add_argument("spec_name", nargs="?", metavar="SPEC")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train-toy", parents=[common], help="SGD on the synthetic orientation task")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    p.add_argument("--train-size", type=int, default=DEFAULT_TRAIN_SIZE)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train_toy, spec_default="aewin-toy")

    p = sub.add_parser("infer", parents=[common], help="classify one image with saved weights")
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="tensor container holding an 'image' tensor [H, W, 3]")
    src.add_argument("--synthetic", type=int, metavar="INDEX", help="use synthetic example INDEX (with --seed)")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("seed", 0), ("out", None), ("csv", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    if not hasattr(args, "spec"):
        args.spec = getattr(args, "spec_default", None)
    if args.command in ("flops", "params") and not (args.spec_name or args.spec):
        parser.error(f"{args.command} needs a spec name")
    if args.command == "verify":
        args.sizes = args.sizes or DEFAULT_SIZES
        args.windows = args.windows or DEFAULT_WINDOWS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
