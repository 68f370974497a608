import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch

from app.config import dump_run_config, load_run_config, settings, write_resolved_config
from app.exceptions import ConvergenceError, MuseError, UsageError
from app.schemas.run_config import RunConfig
from app.services.emotion_space import EMOTION_NAMES, EmotionWheel, default_wheel

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exceptions (exit code 1)."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _configure_logging() -> None:
    level = logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )


# ---------------------------------------------------------------------------
# Shared resolution helpers

def _resolve_config(args, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    path = args.config
    if path is None and Path(settings.run_config_path).exists():
        path = settings.run_config_path
    overrides = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_run_config(path, overrides)


def _models_dir(args, config: RunConfig) -> str:
    return getattr(args, "models", None) or config.paths.models_dir or settings.models_dir


def _output_dir(config: RunConfig) -> str:
    return config.paths.output_dir or settings.output_dir


def _wheel(config: RunConfig) -> EmotionWheel:
    if config.paths.wheel_path:
        return EmotionWheel.from_file(config.paths.wheel_path)
    return default_wheel()


def _bundle(args, config: RunConfig):
    from app.services.muse_synthesis import synthesis_service

    synthesis_service.use_models_dir(_models_dir(args, config))
    return synthesis_service.bundle


def _parse_grid(text: str) -> List[float]:
    try:
        return [float(value) for value in text.split(",") if value.strip()]
    except ValueError as e:
        raise UsageError(f"Invalid eta grid '{text}': {e}")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_data_gen(args) -> int:
    from app.services.glyph_data import generate_dataset, save_dataset

    config = _resolve_config(args, {"data.n": args.n, "data.rho": args.rho, "data.seed": args.data_seed})
    out = args.out or config.paths.data_dir or settings.data_dir
    dataset = generate_dataset(config.data.n, config.data.rho, config.data.seed)
    save_dataset(dataset, out)
    write_resolved_config(config, out)
    return 0


def cmd_train(args) -> int:
    from app.models.checkpoints import BUNDLE_FILES, save_checkpoint
    from app.services.glyph_data import load_dataset
    from app.services.trainer import trainer_service

    config = _resolve_config(args)
    dataset = load_dataset(args.data or config.paths.data_dir or settings.data_dir)
    seed = config.seed

    if args.kind == "denoiser":
        role = "denoiser"
        train = lambda: trainer_service.train_denoiser(dataset, config, seed)  # noqa: E731
    elif args.kind == "embedder":
        role = "embedder"
        train = lambda: trainer_service.train_embedder(dataset, config, seed)  # noqa: E731
    else:
        # Same architecture as the guidance classifier; only the training data shrinks
        arch = "guide" if args.reduced else args.arch
        fraction = config.classifier.reduced_fraction if args.reduced else args.subset_fraction
        role = "reduced" if args.reduced else arch
        train = lambda: trainer_service.train_classifier(dataset, arch, seed, config, fraction)  # noqa: E731

    out = Path(args.out or Path(_models_dir(args, config)) / BUNDLE_FILES[role])
    try:
        model = train()
    except ConvergenceError as e:
        if e.model is not None:
            rejected = out.with_name(f"{out.stem}.nonconverged.pt")
            save_checkpoint(e.model, str(rejected))
            logger.error(f"Training did not converge; model kept at {rejected}")
        raise
    save_checkpoint(model, str(out))
    write_resolved_config(config, str(out))
    return 0


def cmd_calibrate_eta(args) -> int:
    from app.services.glyph_data import load_dataset, sample_prompts
    from app.services.muse_synthesis import calibrate_eta

    config = _resolve_config(args)
    models = _bundle(args, config)
    if args.data:
        prompts = load_dataset(args.data).prompts[:args.n]
    else:
        prompts = [prompt for prompt, _ in sample_prompts(args.n, config.data.seed)]
    eta = calibrate_eta(prompts, models, config, seeds=range(args.seeds), percentile=args.percentile)

    calibrated = config.model_copy(update={"guidance": config.guidance.model_copy(update={"eta": eta})})
    target = Path(args.write or args.config or settings.run_config_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(dump_run_config(calibrated) + "\n")
    percentile = config.guidance.eta_percentile if args.percentile is None else args.percentile
    print(json.dumps({"eta": eta, "percentile": percentile}))
    logger.info(f"Calibrated eta written to {target}")
    return 0


def cmd_gen(args) -> int:
    from app.services.glyph_data import save_png, tensor_to_image
    from app.services.muse_synthesis import generate, write_trace

    config = _resolve_config(args, {"guidance.eta": args.eta})
    models = _bundle(args, config)
    out = Path(args.out)
    trace_path = out.with_name(f"{out.stem}.trace.jsonl")
    write_resolved_config(config, str(out))
    prompt = None if args.emotion_only else args.prompt
    result = generate(
        prompt, args.emotion, models, config, config.seed, sampler=args.sampler,
        wheel=_wheel(config), trace_path=str(trace_path) if args.sampler == "muse" else None,
    )
    if args.sampler != "muse":
        write_trace(result.trace, trace_path)
    save_png(tensor_to_image(result.image), out)
    logger.info(f"Image written to {out}")
    return 0


def cmd_gen_set(args) -> int:
    from app.services.eval_harness import generate_set

    config = _resolve_config(args, {"guidance.eta": args.eta})
    models = _bundle(args, config)
    emotions = args.emotions.split(",") if args.emotions else EMOTION_NAMES
    generate_set(
        models, config, emotions, range(args.n), sampler=args.sampler,
        emotion_only=args.emotion_only, wheel=_wheel(config), out_dir=args.out,
    )
    write_resolved_config(config, args.out)
    return 0


def cmd_edit(args) -> int:
    from app.services.glyph_data import image_to_tensor, load_png, save_png, tensor_to_image
    from app.services.muse_synthesis import edit

    config = _resolve_config(args, {"guidance.eta": args.eta})
    models = _bundle(args, config)
    out = Path(args.out)
    write_resolved_config(config, str(out))
    source = image_to_tensor(load_png(args.image))
    result = edit(
        source, args.prompt, args.emotion, models, config, config.seed,
        wheel=_wheel(config), trace_path=str(out.with_name(f"{out.stem}.trace.jsonl")),
    )
    save_png(tensor_to_image(result.image), out)
    logger.info(f"Edited image written to {out}")
    return 0


def cmd_eval(args) -> int:
    from app.config import config_hash
    from app.schemas.report import EvalReport
    from app.services.eval_harness import GeneratedSet, evaluate_set
    from app.services.glyph_data import load_dataset

    config = _resolve_config(args)
    models = _bundle(args, config)
    generated = GeneratedSet.from_dataset(load_dataset(args.set))
    reference = load_dataset(args.ref).image_tensor() if args.ref else None
    row = evaluate_set(generated, models, args.condition or Path(args.set).name, reference, _wheel(config))
    report = EvalReport(
        title=f"evaluation of {args.set}", config_hash=config_hash(config), rows=[row],
        notes=["FD (toy): Frechet distance on joint-embedder image features"],
    )
    report.write_csv(args.out)
    write_resolved_config(config, args.out)
    print(report.render_summary())
    return 0


def cmd_sweep_eta(args) -> int:
    from app.services.eval_harness import sweep_eta
    from app.services.glyph_data import load_dataset
    from app.services.plotting import plot_eta_sweep

    config = _resolve_config(args)
    models = _bundle(args, config)
    reference = load_dataset(args.ref).image_tensor() if args.ref else None
    result = sweep_eta(_parse_grid(args.grid), models, config, seeds=range(args.n), reference=reference,
                       wheel=_wheel(config))
    out = Path(args.out or Path(_output_dir(config)) / "eta_sweep")
    result.report.write_csv(out / "eta_sweep.csv")
    (out / "trend.json").write_text(result.trend.model_dump_json(indent=2) + "\n")
    plot_eta_sweep(result, out / "eta_sweep.png")
    write_resolved_config(config, str(out))
    print(result.report.render_summary())
    return 0


def cmd_ablate_losses(args) -> int:
    from app.services.eval_harness import ablate_guidance_classifier, ablate_losses

    config = _resolve_config(args)
    models = _bundle(args, config)
    out = Path(args.out or Path(_output_dir(config)) / "ablations")
    report = ablate_losses(models, config, seeds=range(args.n), wheel=_wheel(config))
    report.write_csv(out / "loss_ablation.csv")
    print(report.render_summary())
    if args.classifiers:
        swap = ablate_guidance_classifier(models, config, seeds=range(args.n), wheel=_wheel(config))
        swap.write_csv(out / "classifier_ablation.csv")
        print(swap.render_summary())
    write_resolved_config(config, str(out))
    return 0


def cmd_compare(args) -> int:
    from app.services.eval_harness import baseline_comparison
    from app.services.glyph_data import load_dataset

    config = _resolve_config(args)
    models = _bundle(args, config)
    reference = load_dataset(args.ref).image_tensor() if args.ref else None
    report = baseline_comparison(models, config, seeds=range(args.n), reference=reference, wheel=_wheel(config))
    out = Path(args.out or Path(_output_dir(config)) / "baselines.csv")
    report.write_csv(out)
    write_resolved_config(config, str(out))
    print(report.render_summary())
    return 0


def cmd_plot_trace(args) -> int:
    from app.services.muse_synthesis import read_trace
    from app.services.plotting import plot_inner_losses, plot_trace_probabilities

    trace = read_trace(args.trace)
    out = Path(args.out)
    plot_trace_probabilities(trace, out)
    if args.inner:
        plot_inner_losses(trace, out.with_name(f"{out.stem}_inner{out.suffix or '.png'}"), args.step)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="muse", description=f"{settings.app_name} v{settings.app_version}")
    parser.add_argument("--config", help="run config JSON (flags override its values)")
    subparsers = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    subparsers.required = True

    def common(sub, models=True):
        sub.add_argument("--config", default=argparse.SUPPRESS, help="run config JSON")
        sub.add_argument("--seed", type=int)
        if models:
            sub.add_argument("--models", help="directory holding the checkpoint bundle")
        return sub

    data = subparsers.add_parser("data", help="synthetic glyph datasets")
    data_sub = data.add_subparsers(dest="action", parser_class=ArgumentParser)
    data_sub.required = True
    data_gen = data_sub.add_parser("gen", help="generate a glyph dataset")
    data_gen.add_argument("--config", default=argparse.SUPPRESS, help="run config JSON")
    data_gen.add_argument("--seed", dest="data_seed", type=int, help="dataset seed")
    data_gen.add_argument("--n", type=int)
    data_gen.add_argument("--rho", type=float)
    data_gen.add_argument("--out")
    data_gen.set_defaults(handler=cmd_data_gen)

    train = common(subparsers.add_parser("train", help="train one model of the stack"), models=True)
    train.add_argument("kind", choices=["denoiser", "classifier", "embedder"])
    train.add_argument("--data")
    train.add_argument("--arch", choices=["guide", "agnostic"], default="guide")
    train.add_argument("--subset-fraction", type=float, default=1.0)
    train.add_argument("--reduced", action="store_true", help="reduced-data classifier (guide architecture, smaller subset)")
    train.add_argument("--out")
    train.set_defaults(handler=cmd_train)

    calibrate = common(subparsers.add_parser("calibrate-eta", help="set eta from closed-gate s_clip values"))
    calibrate.add_argument("--data")
    calibrate.add_argument("--percentile", type=float)
    calibrate.add_argument("--n", type=int, default=16, help="number of prompts")
    calibrate.add_argument("--seeds", type=int, default=1, help="seeds per prompt")
    calibrate.add_argument("--write", help="config file to write (default: the input config)")
    calibrate.set_defaults(handler=cmd_calibrate_eta)

    gen = common(subparsers.add_parser("gen", help="generate one image"))
    source = gen.add_mutually_exclusive_group(required=True)
    source.add_argument("--prompt")
    source.add_argument("--emotion-only", action="store_true")
    gen.add_argument("--emotion", required=True, choices=EMOTION_NAMES)
    gen.add_argument("--eta", type=float)
    gen.add_argument("--sampler", choices=["muse", "cfg", "cg"], default="muse")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    gen_set = common(subparsers.add_parser("gen-set", help="generate emotions x seeds into a directory"))
    gen_set.add_argument("--emotions", help="comma-separated subset (default: all eight)")
    gen_set.add_argument("--n", type=int, default=25, help="seeds per emotion")
    gen_set.add_argument("--emotion-only", action="store_true")
    gen_set.add_argument("--eta", type=float)
    gen_set.add_argument("--sampler", choices=["muse", "cfg", "cg"], default="muse")
    gen_set.add_argument("--out", required=True)
    gen_set.set_defaults(handler=cmd_gen_set)

    edit = common(subparsers.add_parser("edit", help="edit an image toward an emotion"))
    edit.add_argument("--image", required=True)
    edit.add_argument("--prompt", required=True)
    edit.add_argument("--emotion", required=True, choices=EMOTION_NAMES)
    edit.add_argument("--eta", type=float)
    edit.add_argument("--out", required=True)
    edit.set_defaults(handler=cmd_edit)

    evaluate = common(subparsers.add_parser("eval", help="score a generated set"))
    evaluate.add_argument("--set", required=True)
    evaluate.add_argument("--ref")
    evaluate.add_argument("--condition")
    evaluate.add_argument("--out", required=True)
    evaluate.set_defaults(handler=cmd_eval)

    sweep = common(subparsers.add_parser("sweep-eta", help="metrics over a grid of eta values"))
    sweep.add_argument("--grid", default="-inf,5,10,13,inf")
    sweep.add_argument("--n", type=int, default=5, help="seeds per emotion per eta")
    sweep.add_argument("--ref")
    sweep.add_argument("--out")
    sweep.set_defaults(handler=cmd_sweep_eta)

    ablate = common(subparsers.add_parser("ablate-losses", help="loss-term ablation"))
    ablate.add_argument("--n", type=int, default=25, help="seeds per emotion")
    ablate.add_argument("--classifiers", action="store_true", help="also swap the guidance classifier")
    ablate.add_argument("--out")
    ablate.set_defaults(handler=cmd_ablate_losses)

    compare = common(subparsers.add_parser("compare-baselines", help="CFG vs classifier guidance vs tokens"))
    compare.add_argument("--n", type=int, default=10)
    compare.add_argument("--ref")
    compare.add_argument("--out")
    compare.set_defaults(handler=cmd_compare)

    plot = subparsers.add_parser("plot-trace", help="plot a synthesis trace")
    plot.add_argument("--trace", required=True)
    plot.add_argument("--out", required=True)
    plot.add_argument("--inner", action="store_true", help="also plot inner-loop losses")
    plot.add_argument("--step", type=int)
    plot.set_defaults(handler=cmd_plot_trace)

    return parser


def _report(error: MuseError) -> int:
    print(json.dumps(error.to_record(), default=str), file=sys.stderr)
    return error.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    torch.set_num_threads(settings.num_threads)
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args) or 0
    except MuseError as e:
        logger.error(f"{e.code}: {e.message}")
        return _report(e)
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return _report(MuseError(str(e) or type(e).__name__))
