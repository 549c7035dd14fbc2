import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, cli_overrides, load_config
from .exceptions import ConfigurationError, KiopError
from .logging_config import get_default_logger, get_logger, setup_logging

logger = get_logger(__name__)


def _prompt_path(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    return Path(args.prompt) if getattr(args, "prompt", None) else Path(cfg.output_dir) / "prompt.kiop"


def _run_train(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    if cfg.regime == "vanilla":
        from .baselines import run_vanilla

        print(run_vanilla(cfg).to_string(index=False))
        return

    from .storing import train, train_multi

    result = train_multi(cfg) if cfg.regime == "multi" else train(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if args.eval:
        from .evaluation import evaluate_prompt
        from .run_store import RunStore

        table = evaluate_prompt(result.context, result.prompt)
        RunStore(cfg.output_dir).write_table(table, "eval.csv")
        print(table.to_string(index=False))


def _run_eval(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    from .evaluation import evaluate_prompt
    from .experiment import build_context
    from .prompt import load_prompt
    from .run_store import RunStore

    prompt = load_prompt(_prompt_path(args, cfg))
    table = evaluate_prompt(build_context(cfg), prompt)
    RunStore(cfg.output_dir).write_table(table, "eval.csv")
    print(table.to_string(index=False))


def _run_gradcam(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    from .evaluation import gradcam, save_gradcam
    from .experiment import build_context
    from .prompt import load_prompt

    context = build_context(cfg)
    prompt = load_prompt(_prompt_path(args, cfg)).to(context.device)
    count = args.count or cfg.evaluation.gradcam_count
    if args.chain == "A":
        split, depth, mapping = context.core_dataset().test, 1, None
    else:
        split, depth, mapping = context.receiver_dataset(0).test, context.depths[0], context.mappings[0]

    result = gradcam(split.tensors[0][:count], context.core, prompt, depth,
                     cfg.evaluation.gradcam_layer, mapping)
    paths = save_gradcam(result, Path(cfg.output_dir) / "gradcam", context.core.mean, context.core.std,
                         clamp=cfg.partition.clamp_for_display, prefix=f"chain{args.chain}")
    print(f"wrote {len(paths)} images to {Path(cfg.output_dir) / 'gradcam'}")


def _run_report(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    from .evaluation import resource_report
    from .experiment import resolve_partition
    from .models import build_model
    from .prompt import init_prompt, load_prompt

    path = _prompt_path(args, cfg)
    prompt = load_prompt(path) if args.prompt or path.exists() else init_prompt(resolve_partition(cfg))
    models = {spec.id: build_model(spec.arch, spec.class_count, width=spec.width) for spec in cfg.all_models()}
    report = resource_report(prompt, models)
    logger.info(f"Resource report: {json.dumps(report.to_dict())}")
    print(report.format_summary())


def _run_sweep(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    from .sweep import run_sweep

    print(run_sweep(cfg, jobs=args.jobs).to_string(index=False))


def _run_pretrain(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    from .pretrain import pretrain_models

    table = pretrain_models(cfg, force=args.force)
    print(table.to_string(index=False) if len(table) else "all weights present")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kiop", description="Knowledge-in-one-prompt experiments")
    subparsers = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment config file (YAML or JSON)")
    common.add_argument("--seed", type=int, help="Global seed override")
    common.add_argument("--out", help="Output directory override")
    common.add_argument("--regime", choices=["kiop-t", "kiop-b", "kiop-bf", "multi", "vanilla"],
                        help="Regime override")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train a prompt (any regime)")
    train_parser.add_argument("--eval", action="store_true", help="Evaluate the prompt after training")
    train_parser.set_defaults(func=_run_train)

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Acc.A / Acc.B of a trained prompt")
    eval_parser.add_argument("--prompt", help="Prompt checkpoint (default: <out>/prompt.kiop)")
    eval_parser.set_defaults(func=_run_eval)

    cam_parser = subparsers.add_parser("gradcam", parents=[common], help="Grad-CAM heatmaps of prompted inputs")
    cam_parser.add_argument("--prompt", help="Prompt checkpoint (default: <out>/prompt.kiop)")
    cam_parser.add_argument("--chain", choices=["A", "B"], default="B", help="Core chain or receiver chain")
    cam_parser.add_argument("--count", type=int, help="Number of test samples")
    cam_parser.set_defaults(func=_run_gradcam)

    report_parser = subparsers.add_parser("report", parents=[common], help="Parameter and storage accounting")
    report_parser.add_argument("--prompt", help="Prompt checkpoint (default: configured partition)")
    report_parser.set_defaults(func=_run_report)

    sweep_parser = subparsers.add_parser("sweep", parents=[common], help="Prompt-core size sweep")
    sweep_parser.add_argument("--jobs", type=int, help="Parallel processes")
    sweep_parser.set_defaults(func=_run_sweep)

    pretrain_parser = subparsers.add_parser("pretrain", parents=[common], help="Produce missing source-model weights")
    pretrain_parser.add_argument("--force", action="store_true", help="Retrain even if weights exist")
    pretrain_parser.set_defaults(func=_run_pretrain)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the ``kiop`` command line interface.

    Returns:
        0 on success, 2 on configuration errors, 1 on runtime errors
    """
    get_default_logger()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 0

    try:
        cfg = load_config(args.config, cli_overrides(args.seed, args.out, args.regime))
        setup_logging(cfg.log_level)
        args.func(args, cfg)
    except ConfigurationError as e:
        logger.debug(e.help_text or "")
        print(f"kiop: configuration error: {e}", file=sys.stderr)
        return 2
    except KiopError as e:
        print(f"kiop: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"kiop: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
