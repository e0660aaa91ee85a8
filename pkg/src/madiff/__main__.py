"""
CLI entry point for madiff.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .codecs import load_image, load_mask, save_image
from .config import COMPONENTS, RunConfig, load_run_config, merge_overrides
from .dataset import generate_sprites, load_landmarks, load_manifest, to_training_set
from .denoiser import ConditionId, load_model, save_model, train
from .errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, MadiffError, RangeError, ValidationError
from .evaluation import Evaluator
from .logging_config import configure_production_logging, get_logger, log_exception, log_run_config
from .metrics import write_report
from .scheduler import make_schedule
from .trackers import TrainingTracker
from .translator import (
    ReferenceSpec,
    TranslationOptions,
    build_components,
    ddim_makeup_transfer,
    makeup_transfer,
    multi_makeup_transfer,
    translate,
)


class MadiffArgumentParser(argparse.ArgumentParser):
    """Usage errors go to stderr with the machine-parseable prefix and exit 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"MADIFF-E{ValidationError.code}: {message}\n")
        sys.exit(EXIT_USAGE)


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _k_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K list '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("the K list is empty")
    return values


def _shared_flags(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    """Run-wide flags; subcommands repeat them with suppressed defaults so either position works."""
    default = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="Run configuration file (JSON or YAML)", **default)
    parser.add_argument("--debug", action="store_true", help="Enable debug logging", **default)
    parser.add_argument("--log-dir", help="Directory for log files (default: ./logs)", **default)
    parser.add_argument("--no-file-logs", action="store_true", help="Disable log files", **default)
    parser.add_argument("--quiet", action="store_true", help="Hide progress lines", **default)


def build_parser() -> argparse.ArgumentParser:
    parser = MadiffArgumentParser(
        prog="madiff",
        description="Cross-domain makeup diffusion: data, training, translation and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --out data/sprites --n 2000 --seed 7
  %(prog)s train --data data/sprites --out model.bin --config run.yaml
  %(prog)s translate --model model.bin --input face.ppm --from nomakeup --to makeup --out out.ppm
  %(prog)s transfer --model model.bin --source s.ppm --ref r.ppm --lm-source s.json --lm-ref r.json --out out.ppm
  %(prog)s multi-transfer --spec job.json --out out.ppm
  %(prog)s eval --task removal --manifest data/sprites --model model.bin --report report.json
  %(prog)s sweep-k --model model.bin --manifest data/sprites --k-list 40,80,120,160,200 --report sweep.json
        """,
    )
    _shared_flags(parser)
    parser.add_argument("--version", action="version", version=f"madiff v{__version__}")

    shared = argparse.ArgumentParser(add_help=False)
    _shared_flags(shared, suppress=True)
    commands = parser.add_subparsers(
        dest="command", metavar="COMMAND", parser_class=MadiffArgumentParser
    )
    commands.required = True

    gen = commands.add_parser("gen-data", parents=[shared], help="Generate a sprite corpus")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--n", type=int, required=True, help="Number of sprites (>= 2)")
    gen.add_argument("--seed", type=int, default=0, help="Run seed for the generator (default: 0)")
    gen.add_argument("--size", type=int, default=32, choices=[16, 32, 64], help="Sprite side (default: 32)")
    gen.add_argument("--ratio", type=float, default=0.5, help="Share of makeup sprites (default: 0.5)")

    tr = commands.add_parser("train", parents=[shared], help="Train the conditional denoiser")
    tr.add_argument("--data", help="Corpus directory or manifest.json (default: paths.data)")
    tr.add_argument("--out", help="Model file to write (default: paths.model)")
    tr.add_argument("--iterations", type=int, help="Override training.iterations")
    tr.add_argument("--batch-size", type=int, help="Override training.batch_size")
    tr.add_argument("--arch", choices=["unet", "mlp"], help="Override model.architecture")
    tr.add_argument("--seed", type=int, help="Run seed")

    def translation_flags(sub):
        sub.add_argument("--model", help="Model file (default: paths.model)")
        sub.add_argument("--K", type=int, help="Number of noising steps (in model steps)")
        sub.add_argument("--gamma", type=_unit_interval, help="Stochasticity in [0, 1]")
        sub.add_argument("--seed", type=int, help="Run seed")
        sub.add_argument("--variant", choices=["posterior", "marginal"], help="Encoding chain")

    tl = commands.add_parser("translate", parents=[shared], help="Translate between domains or tags")
    translation_flags(tl)
    tl.add_argument("--input", required=True, help="Source image (PPM)")
    tl.add_argument("--from", dest="source_cond", required=True, help="nomakeup | makeup | tag:<name>")
    tl.add_argument("--to", dest="target_cond", required=True, help="nomakeup | makeup | tag:<name>")
    tl.add_argument("--mask", help="Preserve mask (PGM); 255 pixels are kept from the source")
    tl.add_argument("--out", required=True, help="Output image (PPM)")

    tf = commands.add_parser("transfer", parents=[shared], help="Single-reference makeup transfer")
    translation_flags(tf)
    tf.add_argument("--source", required=True, help="Source image (PPM)")
    tf.add_argument("--ref", required=True, help="Reference image (PPM)")
    tf.add_argument("--lm-source", required=True, help="Source landmarks JSON")
    tf.add_argument("--lm-ref", required=True, help="Reference landmarks JSON")
    for component, flag in (("face", "face"), ("eyes", "eyes"), ("lips", "lips"), ("eyebrows", "brows")):
        tf.add_argument(
            f"--alpha-{flag}",
            dest=f"alpha_{component}",
            type=_unit_interval,
            help=f"Blend weight for {component}",
        )
    tf.add_argument("--cam", choices=["default", "off", "literal"], help="Component-aware masking")
    tf.add_argument(
        "--component-mask",
        action="append",
        default=[],
        metavar="NAME=PATH",
        help="Source-frame component mask (PGM); repeat per component",
    )
    tf.add_argument("--ddim", action="store_true", help="Use DDIM inversion with skipped steps")
    tf.add_argument("--out", required=True, help="Output image (PPM)")

    mt = commands.add_parser("multi-transfer", parents=[shared], help="Multi-reference makeup transfer")
    mt.add_argument("--spec", required=True, help="Job description (JSON)")
    mt.add_argument("--model", help="Model file (over the job's 'model', then paths.model)")
    mt.add_argument("--seed", type=int, help="Run seed")
    mt.add_argument("--out", required=True, help="Output image (PPM)")

    ev = commands.add_parser("eval", parents=[shared], help="Evaluate removal or transfer on a corpus")
    ev.add_argument("--task", choices=["removal", "transfer"], required=True)
    ev.add_argument("--manifest", help="Corpus directory or manifest.json (default: paths.data)")
    ev.add_argument("--model", help="Model file (default: paths.model)")
    ev.add_argument("--report", required=True, help="Report JSON to write")
    ev.add_argument("--pairs", type=int, default=10, help="Number of source/reference pairs")
    ev.add_argument("--with-reference", action="store_true", help="Reference-guided removal")
    ev.add_argument("--seed", type=int, help="Run seed")

    sw = commands.add_parser("sweep-k", parents=[shared], help="Identity and style metrics across K")
    sw.add_argument("--model", help="Model file (default: paths.model)")
    sw.add_argument("--manifest", help="Corpus directory or manifest.json (default: paths.data)")
    sw.add_argument("--k-list", type=_k_list, required=True, help="Comma-separated K values")
    sw.add_argument("--report", required=True, help="Report JSON to write")
    sw.add_argument("--pairs", type=int, default=10, help="Number of source/reference pairs")
    sw.add_argument("--seed", type=int, help="Run seed")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Config file over defaults, then command-line flags over both.

    ``--seed`` is the run seed: it replaces the section seeds of the config file, and
    model init, training draws and translation draws are all split off it.
    """
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides: Dict[str, Any] = {}
    if args.command == "train":
        overrides = {
            "training.iterations": args.iterations,
            "training.batch_size": args.batch_size,
            "model.architecture": args.arch,
        }
    elif args.command in ("translate", "transfer"):
        overrides = {
            "translation.gamma": args.gamma,
            "translation.encode_variant": args.variant,
        }
        if args.command == "transfer":
            overrides["translation.cam"] = args.cam
            overrides.update(
                {
                    f"translation.alpha.{name}": getattr(args, f"alpha_{name}")
                    for name in ("face", "eyes", "lips", "eyebrows")
                }
            )
    config = merge_overrides(config, overrides)
    seed = getattr(args, "seed", None)
    return config if seed is None else config.with_run_seed(seed)


def _path(flag: Optional[str], configured: Optional[str], what: str) -> str:
    """The flag's path, else the config's ``paths`` entry."""
    value = flag or configured
    if not value:
        raise ValidationError(f"no {what} given")
    return value


def _model_path(args, config: RunConfig) -> str:
    return _path(args.model, config.paths.model, "model file (--model or paths.model)")


def _data_path(flag: Optional[str], config: RunConfig) -> str:
    return _path(flag, config.paths.data, "corpus (--data/--manifest or paths.data)")


def _options(config: RunConfig, args: argparse.Namespace, model) -> TranslationOptions:
    K = getattr(args, "K", None)
    overrides = {} if K is None else {"K": K}
    opts = TranslationOptions.from_config(config, model.schedule.T, **overrides)
    if opts.K > model.schedule.T:
        raise ValidationError(f"K={opts.K} exceeds the model's {model.schedule.T} steps")
    return opts


def cmd_gen_data(args, config: RunConfig) -> None:
    logger = get_logger(__name__)
    try:
        manifest = generate_sprites(
            args.n, args.seed, args.size, args.ratio, args.out, quiet=args.quiet
        )
    except OSError as e:
        raise ValidationError(f"cannot write corpus to {args.out}: {e}")
    logger.info(f"Corpus with {len(manifest)} sprites written to {args.out}")


def cmd_train(args, config: RunConfig) -> None:
    logger = get_logger(__name__)
    manifest = load_manifest(_data_path(args.data, config))
    out_path = _path(args.out, config.paths.model, "model file (--out or paths.model)")
    data = to_training_set(manifest)
    schedule = make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    tracker = TrainingTracker(
        total=config.training.iterations,
        log_every=config.training.log_every,
        quiet=args.quiet,
    )
    model = train(data, config, schedule, tracker)
    out = save_model(model, out_path)
    loss_log = tracker.write_csv(Path(out_path).with_suffix(".loss.csv"))
    logger.info(f"Model written to {out}; loss log {loss_log}")


def cmd_translate(args, config: RunConfig) -> None:
    model = load_model(_model_path(args, config))
    opts = _options(config, args, model)
    l_so = ConditionId.parse(args.source_cond, model.vocabulary)
    l_ta = ConditionId.parse(args.target_cond, model.vocabulary)
    mask = load_mask(args.mask) if args.mask else None
    output = translate(load_image(args.input), l_so, l_ta, opts, model, mask)
    save_image(output, args.out)


def _component_masks(entries: Sequence[str]) -> Dict[str, Any]:
    masks = {}
    for entry in entries:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise ValidationError(f"--component-mask expects NAME=PATH, got '{entry}'")
        masks[name] = load_mask(path)
    return masks


def cmd_transfer(args, config: RunConfig) -> None:
    model = load_model(_model_path(args, config))
    opts = _options(config, args, model)
    source = load_image(args.source)
    reference = load_image(args.ref)
    src_lm = load_landmarks(args.lm_source)
    ref_lm = load_landmarks(args.lm_ref)
    masks = _component_masks(args.component_mask)
    components = build_components(masks, opts) if masks else None
    run = ddim_makeup_transfer if args.ddim else makeup_transfer
    output = run(source, reference, src_lm, ref_lm, components, opts, model)
    save_image(output, args.out)


CAM_MODES = ("default", "off", "literal")
SCOPES = ("overlap", "union", "global")
JOB_KEYS = (
    "model", "source", "source_landmarks", "refs", "references", "components",
    "K", "gamma", "seed", "cam", "scope",
)


def _read_job(path: Path) -> Dict[str, Any]:
    """
    Load a multi-transfer job.

    The job names ``source`` and ``refs`` (``[{image, landmarks, mask, alpha}]``) with
    optional ``K``, ``gamma``, ``seed`` and ``cam``. ``cam`` is either a mode name or a
    ``{component: t_c}`` table in model steps. ``references`` is accepted for ``refs``;
    ``model``, ``source_landmarks``, ``components`` and ``scope`` are optional extras.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            job = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read job file {path}: {e}")
    if not isinstance(job, dict):
        raise ValidationError("job file must hold a JSON object")
    unknown = sorted(set(job) - set(JOB_KEYS))
    if unknown:
        raise ValidationError(f"unknown job keys: {', '.join(unknown)}")
    if "source" not in job:
        raise ValidationError("job file lacks 'source'")
    if "refs" in job and "references" in job:
        raise ValidationError("job file gives both 'refs' and 'references'")
    refs = job.get("refs", job.get("references"))
    if not isinstance(refs, list) or not refs:
        raise ValidationError("job 'refs' must be a nonempty list")
    job["refs"] = refs
    if not isinstance(job.get("components", {}), dict):
        raise ValidationError("job 'components' must map component names to mask files")
    return job


def _source_landmarks(job: Dict[str, Any], source: Path, base: Path) -> Path:
    """The job's ``source_landmarks``, else a landmarks file stored next to the source."""
    if job.get("source_landmarks"):
        return base / job["source_landmarks"]
    candidates = (
        source.with_suffix(".landmarks.json"),
        source.with_suffix(".json"),
        source.parent.parent / "landmarks" / f"{source.stem}.json",
    )
    for candidate in candidates:
        if candidate.is_file():
            return candidate
    raise ValidationError(
        f"no landmarks for {source}: set 'source_landmarks' or place {candidates[0].name} next to it"
    )


def _job_int(job: Dict[str, Any], key: str, low: int, high: int) -> int:
    value = job[key]
    if isinstance(value, bool) or not isinstance(value, int) or not low <= value <= high:
        raise RangeError(f"job '{key}' must be an integer in [{low}, {high}], got {value!r}")
    return value


def _job_overrides(job: Dict[str, Any], args, model) -> Dict[str, Any]:
    """Option overrides from the job; K and cam t_c are literal model steps."""
    T = model.schedule.T
    overrides: Dict[str, Any] = {}
    if "K" in job:
        overrides["K"] = _job_int(job, "K", 1, T)
    if "gamma" in job:
        gamma = job["gamma"]
        if isinstance(gamma, bool) or not isinstance(gamma, (int, float)) or not 0.0 <= gamma <= 1.0:
            raise RangeError(f"job 'gamma' must be a number in [0, 1], got {gamma!r}")
        overrides["gamma"] = float(gamma)
    if "scope" in job:
        if job["scope"] not in SCOPES:
            raise ValidationError(f"job 'scope' must be one of {', '.join(SCOPES)}")
        overrides["constraint_scope"] = job["scope"]
    if "seed" in job and args.seed is None:
        overrides["seed"] = _job_int(job, "seed", 0, 2**64 - 1)
    cam = job.get("cam")
    if isinstance(cam, str):
        if cam not in CAM_MODES:
            raise ValidationError(f"job 'cam' must be one of {', '.join(CAM_MODES)}")
        overrides["cam"] = cam
    elif isinstance(cam, dict):
        unknown = sorted(set(cam) - set(COMPONENTS))
        if unknown:
            raise ValidationError(f"job 'cam' names unknown components: {', '.join(unknown)}")
        overrides["t_c"] = {str(name): _job_int(cam, name, 1, T) for name in cam}
    elif cam is not None:
        raise ValidationError("job 'cam' must be a mode name or a {component: t_c} table")
    return overrides


def cmd_multi_transfer(args, config: RunConfig) -> None:
    spec_path = Path(args.spec)
    job = _read_job(spec_path)
    base = spec_path.parent

    def at(rel: str) -> Path:
        return base / rel

    if args.model:
        model_path = Path(args.model)
    elif job.get("model"):
        model_path = at(job["model"])
    else:
        what = "model file (--model, the job's 'model' or paths.model)"
        model_path = Path(_path(None, config.paths.model, what))
    model = load_model(model_path)

    defaults = TranslationOptions.from_config(config, model.schedule.T)
    overrides = _job_overrides(job, args, model)
    if "t_c" in overrides:
        overrides["t_c"] = {**defaults.t_c, **overrides["t_c"]}
    opts = dataclasses.replace(defaults, **overrides)

    refs = []
    for index, raw in enumerate(job["refs"]):
        if not isinstance(raw, dict) or "image" not in raw or "landmarks" not in raw:
            raise ValidationError(f"reference {index} needs 'image' and 'landmarks'")
        refs.append(
            ReferenceSpec(
                image=load_image(at(raw["image"])),
                landmarks=load_landmarks(at(raw["landmarks"])),
                mask=load_mask(at(raw["mask"])) if raw.get("mask") else None,
                alpha=raw.get("alpha", 0.8),
            )
        )
    masks = {name: load_mask(at(rel)) for name, rel in job.get("components", {}).items()}
    components = build_components(masks, opts) if masks else None
    source = at(job["source"])
    output = multi_makeup_transfer(
        load_image(source),
        load_landmarks(_source_landmarks(job, source, base)),
        refs,
        opts,
        model,
        components,
    )
    save_image(output, args.out)


def cmd_eval(args, config: RunConfig) -> None:
    model = load_model(_model_path(args, config))
    manifest = load_manifest(_data_path(args.manifest, config))
    evaluator = Evaluator(model, manifest, _options(config, args, model), args.pairs, args.quiet)
    if args.task == "removal":
        report = evaluator.evaluate_removal(with_reference=args.with_reference)
    else:
        report = evaluator.evaluate_transfer()
    write_report(report, args.report, config.to_dict())


def cmd_sweep_k(args, config: RunConfig) -> None:
    model = load_model(_model_path(args, config))
    manifest = load_manifest(_data_path(args.manifest, config))
    evaluator = Evaluator(model, manifest, _options(config, args, model), args.pairs, args.quiet)
    write_report(evaluator.sweep_k(args.k_list), args.report, config.to_dict())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "transfer": cmd_transfer,
    "multi-transfer": cmd_multi_transfer,
    "eval": cmd_eval,
    "sweep-k": cmd_sweep_k,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point with argument parsing."""
    args = build_parser().parse_args(argv)

    # Logging first so config errors are recorded too
    logger = configure_production_logging(
        debug=args.debug, log_dir=args.log_dir, disable_file_logging=args.no_file_logs
    )

    try:
        config = resolve_config(args)
        log_run_config(logger, config.to_dict())
        logger.info(f"Running '{args.command}'")
        COMMANDS[args.command](args, config)
        logger.info(f"'{args.command}' completed successfully")
        return EXIT_OK
    except MadiffError as e:
        log_exception(logger, e, args.command)
        sys.stderr.write(e.cli_message() + "\n")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Cancelled by user")
        return EXIT_RUNTIME
    except Exception as e:
        log_exception(logger, e, args.command)
        sys.stderr.write(f"MADIFF-E{MadiffError.code}: {type(e).__name__}: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
