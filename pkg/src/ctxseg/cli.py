"""``ctxseg`` command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image

from . import bundle as bundle_io
from .benchmark import AXES, ablate, make_inputs, run_benchmark
from .config import load_config
from .data import ShiftSpec, load_domain_dir, load_folder, save_dataset, synth_domain
from .errors import (BundleError, ConfigError, DataError, DimensionError, DuplicateIdError, MemoryFileError,
                     StageError, VariantMismatchError)
from .memory import load_memory, save_memory
from .metrics import binarize
from .pipeline import (DeploymentState, INSERTION_POLICIES, TrainConfig, Variant, build_memory, deploy_step,
                       new_memory, train_contextnet, train_feature_models, train_noda)
from .report import emit_ablation, emit_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (DataError, MemoryFileError, BundleError, VariantMismatchError, DimensionError, DuplicateIdError,
               OSError)

log = logging.getLogger("ctxseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _paths(text: str) -> list:
    return [Path(v) for v in text.split(",") if v.strip()]


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    shift = ShiftSpec(gamma=args.gamma, invert=args.invert, noise_sigma=args.noise,
                      bias_amplitude=args.bias, deform_magnitude=args.deform)
    out = Path(args.out).resolve()
    handle = synth_domain(args.n, shift, args.seed, size=args.size, domain_id=args.domain or out.name,
                          invert_fraction=args.invert_fraction, max_acquisition_noise=args.acquisition_noise)
    if handle.domain_id != out.name:
        out = out.parent / handle.domain_id
    save_dataset(handle, out.parent)
    print(f"wrote {len(handle)} samples to {out}")
    return EXIT_OK


def _config(args) -> TrainConfig:
    return load_config(args.config) if args.config else TrainConfig()


def cmd_train(args) -> int:
    config = _config(args)
    variant = Variant.parse(args.variant)
    if variant is Variant.TRANSFER:
        raise UsageError("train: TransferLearnt is produced by the eval command")
    source = load_domain_dir(args.source, size=config.resolution)
    if variant is Variant.NODA:
        bundle = train_noda(source, config)
    else:
        extractor, sae = train_feature_models(source, config, with_sae=variant is Variant.CN2)
        memory = build_memory(source, variant, extractor, sae, config)
        bundle = train_contextnet(source, memory, variant, config, extractor, sae)
        if args.memory_out:
            save_memory(memory, args.memory_out)
    bundle_io.save_bundle(bundle, args.out)
    print(f"{variant.value} bundle written to {args.out} (final loss {bundle.history[-1] if bundle.history else 'n/a'})")
    return EXIT_OK


def cmd_build_memory(args) -> int:
    bundle = bundle_io.load_bundle(args.bundle, vgg_weights=args.vgg_weights)
    variant = Variant.parse(args.variant)
    if variant is not bundle.variant:
        raise VariantMismatchError(f"bundle is {bundle.variant.value}, requested a {variant.value} memory")
    data = load_domain_dir(args.data, size=bundle.config.resolution)
    memory = build_memory(data, variant, bundle.extractor, bundle.sae, bundle.config)
    save_memory(memory, args.out)
    print(f"memory with {len(memory)} records written to {args.out}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    bundle = bundle_io.load_bundle(args.bundle, vgg_weights=args.vgg_weights)
    images = load_folder(args.images, args.masks, size=bundle.config.resolution)
    memory = None
    if args.memory:
        memory = load_memory(args.memory)
    elif bundle.variant.uses_context:
        memory = new_memory(images.domain_id, bundle.variant, bundle.config, bundle.extractor_id)
    state = DeploymentState(bundle, memory, args.policy)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    digest = bundle.parameter_digest()
    for sample in images:
        pred, state = deploy_step(state, sample.image, sample.mask, sample.id)
        Image.fromarray(binarize(pred) * 255).save(out / "masks" / f"{sample.id}.png")
    if state.memory is not None:
        save_memory(state.memory, out / "memory.ctxm")
    summary = {"steps": state.steps, "skipped": state.skipped, "policy": args.policy,
               "memory_records": len(state.memory) if state.memory is not None else 0,
               "parameters_unchanged": bundle.parameter_digest() == digest}
    (out / "deploy.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"deployed on {state.steps} images; {len(state.skipped)} insertions skipped")
    return EXIT_OK


def _benchmark_inputs(args):
    config = _config(args)
    source = load_domain_dir(args.source, size=config.resolution)
    targets = [load_domain_dir(p, size=config.resolution) for p in args.targets]
    return make_inputs(source, targets, config, args.seeds, args.source_train, args.target_memory)


def cmd_eval(args) -> int:
    inputs = _benchmark_inputs(args)
    report = run_benchmark(inputs, None, keep_cases=not args.no_overlays)
    emit_report(report, args.out, overlays=not args.no_overlays)
    print((Path(args.out) / "table.txt").read_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    inputs = _benchmark_inputs(args)
    report = ablate(inputs, args.axis, args.grid)
    paths = emit_ablation(report, args.out)
    print(paths["table"].read_text(), end="")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxseg", description="Memory-conditioned segmentation with continual domain adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic two-lobe domain")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--invert", action="store_true")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--bias", type=float, default=0.0)
    s.add_argument("--deform", type=float, default=0.0)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--domain", help="domain id (default: name of --out)")
    s.add_argument("--invert-fraction", type=float, default=0.0)
    s.add_argument("--acquisition-noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a NoDA, ContextNet1 or ContextNet2 bundle")
    s.add_argument("--variant", required=True, choices=["noda", "cn1", "cn2"])
    s.add_argument("--source", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--memory-out", help="also save the source memory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-memory", help="build a domain memory with a trained bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", required=True, choices=["cn1", "cn2"])
    s.add_argument("--out", required=True)
    s.add_argument("--vgg-weights")
    s.set_defaults(func=cmd_build_memory)

    s = sub.add_parser("deploy", help="segment a stream of images, growing the memory")
    s.add_argument("--bundle", required=True)
    s.add_argument("--memory", help="starting memory (default: empty)")
    s.add_argument("--images", required=True)
    s.add_argument("--masks")
    s.add_argument("--policy", choices=INSERTION_POLICIES, default="always")
    s.add_argument("--out", required=True)
    s.add_argument("--vgg-weights")
    s.set_defaults(func=cmd_deploy)

    for name, helptext in (("eval", "run the four-method benchmark"), ("ablate", "sweep one ablation axis")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--source", required=True)
        s.add_argument("--targets", required=True, type=_paths)
        s.add_argument("--config")
        s.add_argument("--seeds", type=_ints, default=[0])
        s.add_argument("--source-train", type=int, help="source training samples (default 3/4)")
        s.add_argument("--target-memory", type=int, help="target memory/fine-tune samples (default 2/3)")
        s.add_argument("--out", required=True)
        if name == "eval":
            s.add_argument("--no-overlays", action="store_true")
            s.set_defaults(func=cmd_eval)
        else:
            s.add_argument("--axis", required=True, choices=AXES)
            s.add_argument("--grid", required=True, type=lambda t: [v for v in t.split(",") if v.strip()])
            s.set_defaults(func=cmd_ablate)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("internal failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
