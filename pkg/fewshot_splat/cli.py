"""
Command-line entry point: fewshot-splat <subcommand>.

    fit-depth   align raw monocular depth to sparse SfM depth
    train       split, sample, fit, initialize, train and evaluate one k-shot run
    render      render color PNGs and depth PFMs from a PLY checkpoint
    eval        aggregate metrics of training runs into results.csv
    synth       write the procedural three-plane test scene

Config precedence: defaults < --config file < flags.
Exit codes: 0 ok, 1 contract error, 2 input/format error, 3 numerical failure,
4 degenerate geometry (split or fit).
"""
import argparse
import warnings

from fewshot_splat import __version__
from fewshot_splat.config import DepthFitConfig, config_from_mapping, load_train_config
from fewshot_splat.console import CONSOLE
from fewshot_splat.controller import INIT_SOURCES, run_fit_depth, run_train, run_render, run_eval, run_synth
from fewshot_splat.errors import FewShotSplatError


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# (flags, argparse kwargs, config field or None); every flag of every subcommand is listed here
FIT_FLAGS = [
    (("--weighting",), dict(choices=("literal", "residual"),
                            help="'literal': fit s*raw+t to w*D_sparse; 'residual': weighted least squares"),
     "weighting"),
    (("--no-adjust",), dict(action="store_const", const=False, dest="adjust",
                            help="use raw depth as the prior without scale/offset alignment"), "adjust"),
    (("--min-views",), dict(type=int, help="SfM point must be seen by this many selected views (default 3)"),
     "min_views"),
    (("--raw-format",), dict(choices=("pfm", "png16"), help="raw depth file format (overrides the manifest)"),
     "raw_format"),
    (("--depth-scale",), dict(type=float, dest="png_depth_scale",
                              help="units per count for png16 raw depth (overrides the manifest)"),
     "png_depth_scale"),
    (("--canny-low",), dict(type=float, help="low hysteresis threshold, fraction of the peak gradient"),
     "canny_low"),
    (("--canny-high",), dict(type=float, help="high hysteresis threshold, fraction of the peak gradient"),
     "canny_high"),
]

TRAIN_FLAGS = [
    (("--max-iterations",), dict(type=int, help="iteration limit (default 30000)"), "max_iterations"),
    (("--no-depth",), dict(action="store_const", const=False, dest="depth_loss",
                           help="disable the depth-prior loss"), "depth_loss"),
    (("--no-smooth",), dict(action="store_const", const=False, dest="smooth_loss",
                            help="disable the edge-aware smoothness loss"), "smooth_loss"),
    (("--no-early-stop",), dict(action="store_const", const=False, dest="early_stop",
                                help="disable depth-loss early stopping"), "early_stop"),
    (("--no-densify",), dict(action="store_const", const=False, dest="densify",
                             help="disable densification and pruning"), "densify"),
    (("--opacity-reset",), dict(action="store_const", const=True, dest="opacity_reset",
                                help="re-enable the periodic opacity reset"), "opacity_reset"),
    (("--lambda-ssim",), dict(type=float, help="D-SSIM weight (default 0.2)"), "lambda_ssim"),
    (("--lambda-depth",), dict(type=float, help="depth loss weight (default 0.1)"), "lambda_depth"),
    (("--lambda-smooth",), dict(type=float, help="smoothness loss weight (default 0.01)"), "lambda_smooth"),
    (("--depth-target",), dict(choices=("dense", "sparse"),
                               help="supervise depth with the aligned prior or only at SfM samples"),
     "depth_target"),
    (("--early-stop-window",), dict(type=int, help="moving-average window (default 100)"), "early_stop_window"),
    (("--early-stop-patience",), dict(type=int, help="evaluations without improvement (default 5)"),
     "early_stop_patience"),
    (("--checkpoint-every",), dict(type=int, help="write a checkpoint every N iterations (0: final only)"),
     "checkpoint_every"),
    (("--background",), dict(type=_floats, help="background RGB as r,g,b in [0, 1]"), "background"),
    (("--threads",), dict(type=int, help="tile worker threads (default FEWSHOT_SPLAT_THREADS or CPU count)"),
     "threads"),
]

RUN_FLAGS = [
    (("--k",), dict(type=int, required=True, help="number of training views"), None),
    (("--seed",), dict(type=int, help="k-shot sampling and training seed (default: config file seed, else 0)"), None),
    (("--output", "-o"), dict(required=True, help="run output directory"), None),
    (("--config",), dict(help="flat key = value TrainConfig file"), None),
    (("--init",), dict(choices=INIT_SOURCES, default="sparse",
                       help="splat initialization: filtered points, unprojected priors or all points"), None),
    (("--prior-dir",), dict(help="read priors <stem>.pfm from this directory instead of fitting raw depth"),
     None),
    (("--quiet",), dict(action="store_true", help="no progress bar"), None),
]

FIT_RUN_FLAGS = [
    (("--output", "-o"), dict(required=True, help="directory for priors and fit_report.csv"), None),
    (("--k",), dict(type=int, help="fit only a k-shot selection (default: every view)"), None),
    (("--seed",), dict(type=int, default=0, help="k-shot sampling seed"), None),
]

RENDER_FLAGS = [
    (("--output", "-o"), dict(required=True, help="directory for images/ and depths/"), None),
    (("--views",), dict(type=_ints, help="comma-separated view ids (default: all)"), None),
    (("--background",), dict(type=_floats, default=(0.0, 0.0, 0.0), help="background RGB as r,g,b"), None),
    (("--threads",), dict(type=int, help="tile worker threads"), None),
]

EVAL_FLAGS = [
    (("--output", "-o"), dict(required=True, help="directory for results.csv and tables"), None),
    (("--seeds",), dict(type=_ints, help="expected seeds; runs missing from this list are flagged"), None),
]

SYNTH_FLAGS = [
    (("--width",), dict(type=int, default=128, help="image width"), None),
    (("--height",), dict(type=int, default=96, help="image height"), None),
    (("--seed",), dict(type=int, default=0, help="sampling and noise seed"), None),
    (("--noise",), dict(type=float, default=0.05, help="multiplicative raw-depth noise"), None),
    (("--name",), dict(default="synthetic", help="scene id written to the manifest"), None),
]

FLAG_REGISTRY = {
    "fit-depth": FIT_RUN_FLAGS + FIT_FLAGS,
    "train": RUN_FLAGS + TRAIN_FLAGS + FIT_FLAGS,
    "render": RENDER_FLAGS,
    "eval": EVAL_FLAGS,
    "synth": SYNTH_FLAGS,
}


def _add_flags(parser: argparse.ArgumentParser, flags) -> None:
    for names, kwargs, field_name in flags:
        kwargs = dict(kwargs)
        if field_name is not None and "action" not in kwargs:
            kwargs.setdefault("dest", field_name)
            kwargs.setdefault("default", None)
        if kwargs.get("action") == "store_const":
            kwargs.setdefault("default", None)
        parser.add_argument(*names, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-splat",
                                     description="Depth-regularized Gaussian splatting from a few posed images")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit-depth", help="align raw depth to sparse SfM depth")
    fit.add_argument("manifest", help="scene manifest file")
    _add_flags(fit, FLAG_REGISTRY["fit-depth"])

    train = sub.add_parser("train", help="run one k-shot training and evaluation")
    train.add_argument("manifest", help="scene manifest file")
    _add_flags(train, FLAG_REGISTRY["train"])

    render = sub.add_parser("render", help="render a checkpoint")
    render.add_argument("checkpoint", help="splat PLY file")
    render.add_argument("manifest", help="scene manifest file")
    _add_flags(render, FLAG_REGISTRY["render"])

    evaluate = sub.add_parser("eval", help="aggregate training runs")
    evaluate.add_argument("runs", nargs="+", help="training run directories")
    _add_flags(evaluate, FLAG_REGISTRY["eval"])

    synth = sub.add_parser("synth", help="write the procedural test scene")
    synth.add_argument("output", help="scene directory")
    _add_flags(synth, FLAG_REGISTRY["synth"])
    return parser


def _overrides(args: argparse.Namespace, flags) -> dict:
    values = {}
    for _, _, field_name in flags:
        if field_name is not None and getattr(args, field_name, None) is not None:
            values[field_name] = getattr(args, field_name)
    return values


def _fit_config(args: argparse.Namespace) -> DepthFitConfig:
    return config_from_mapping(DepthFitConfig, _overrides(args, FIT_FLAGS))


def _echo_warning(message, category, filename, lineno, file=None, line=None):
    CONSOLE.print(f"⚠️ {message}")


def main(argv=None) -> int:
    """
    Parse arguments, run the subcommand and return its exit code.
    """
    args = build_parser().parse_args(argv)
    previous, warnings.showwarning = warnings.showwarning, _echo_warning

    try:
        if args.command == "fit-depth":
            result = run_fit_depth(args.manifest, args.output, _fit_config(args), k=args.k, seed=args.seed)
        elif args.command == "train":
            overrides = _overrides(args, TRAIN_FLAGS)
            if args.seed is not None:
                overrides["seed"] = args.seed
            config = load_train_config(args.config, overrides)
            result = run_train(args.manifest, args.output, args.k, config.seed, config, _fit_config(args),
                               init_source=args.init, prior_dir=args.prior_dir, show_progress=not args.quiet)
        elif args.command == "render":
            result = run_render(args.checkpoint, args.manifest, args.output, view_ids=args.views,
                                background=args.background, threads=args.threads)
        elif args.command == "eval":
            result = run_eval(args.runs, args.output, expected_seeds=args.seeds)
        else:
            result = run_synth(args.output, args.width, args.height, args.seed, args.noise, args.name)
    except FewShotSplatError as e:
        CONSOLE.print(f"❌ {e}")
        return e.exit_code
    finally:
        warnings.showwarning = previous
    return result["exit_code"]


if __name__ == "__main__":
    raise SystemExit(main())
