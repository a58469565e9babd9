import argparse
import logging
import os
import sys
from typing import Any, Dict, List, NoReturn, Optional

from dynaconf import Dynaconf, Validator

from slide_search_tool.command import (
    bench,
    build_index,
    evaluate,
    ingest,
    query,
    standard_args,
    synth,
    train,
)
from slide_search_tool.complexity import DEFAULT_BUDGET
from slide_search_tool.constants import (
    BASELINE_FRACTIONS,
    CONFIG_FILE,
    DEFAULT_DIM,
    DEFAULT_FLOAT_WIDTH,
    DEFAULT_MOSAICS,
    ENVVAR_PREFIX,
    PACKAGE_NAME,
    SYNTH_SIGMA,
    VALID_FLOAT_WIDTHS,
    VERSION_STRING,
    ExitCodes,
    QueryTargets,
)
from slide_search_tool.errors import SlideSearchError, UsageError
from slide_search_tool.evaluation import Directions


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting, so usage mistakes map to exit code 1."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def setup_parser() -> argparse.ArgumentParser:
    # pylint: disable=too-many-statements
    data_name = "--data"
    data_arg: Dict[str, Any] = {
        "type": str,
        "help": "Dataset directory holding manifest.csv and slides/*.pemb.",
        "required": True,
    }
    model_name = "--model"
    model_arg: Dict[str, Any] = {
        "type": str,
        "help": "Encoder model file written by the train command.",
        "required": False,
    }
    index_name = "--index"
    index_arg: Dict[str, Any] = {
        "type": str,
        "help": "PSIX index file written by the build-index command.",
    }

    # -- root parser

    parser = ArgumentParser(
        description="Slide Search Tool: train a multimodal slide encoder, build binary "
        + "mosaic indexes and query them by slide or by report.",
        prog=PACKAGE_NAME,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    parser.add_argument("--debug", action="store_true", dest="debug")
    subparsers = parser.add_subparsers(dest="command")

    # -- synth command

    synth_help_text = "Generate a separable synthetic dataset of slides and paired reports."
    synth_parser = subparsers.add_parser(
        "synth",
        help=synth_help_text,
        description=synth_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    synth_parser.add_argument("--classes", type=int, default=4, help="Number of classes.")
    synth_parser.add_argument(
        "--per-class", type=int, default=50, dest="per_class", help="Slides per class."
    )
    synth_parser.add_argument(
        "--patches-low", type=int, default=8, dest="patches_low", help="Fewest patches per slide."
    )
    synth_parser.add_argument(
        "--patches-high", type=int, default=32, dest="patches_high", help="Most patches per slide."
    )
    synth_parser.add_argument("--dim", type=int, default=DEFAULT_DIM, help="Embedding dim.")
    synth_parser.add_argument(
        "--sigma", type=float, default=SYNTH_SIGMA, help="Patch noise around the class center."
    )
    synth_parser.add_argument("--out", type=str, required=True, help="Dataset directory.")
    standard_args.for_seed(synth_parser)
    synth_parser.set_defaults(func=synth.run)

    # -- ingest command

    ingest_help_text = "Add one slide's patch embeddings (PEMB or CSV) to a dataset directory."
    ingest_parser = subparsers.add_parser(
        "ingest",
        help=ingest_help_text,
        description=ingest_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    ingest_parser.add_argument("--input", type=str, required=True, help="PEMB or CSV file.")
    ingest_parser.add_argument("--out", type=str, required=True, help="Dataset directory.")
    ingest_parser.add_argument(
        "--id", type=str, default=None, help="Slide id. Defaults to the input file name."
    )
    ingest_parser.add_argument("--label", type=str, default=None, help="Class label.")
    report_group = ingest_parser.add_mutually_exclusive_group()
    report_group.add_argument("--report", type=str, default=None, help="Paired report text.")
    report_group.add_argument(
        "--report-file", type=str, default=None, dest="report_file", help="File with the report."
    )
    ingest_parser.set_defaults(func=ingest.run)

    # -- train command

    train_help_text = "Train the encoder on slide/report pairs and save the best checkpoint."
    train_parser = subparsers.add_parser(
        "train",
        help=train_help_text,
        description=train_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    train_parser.add_argument(data_name, **data_arg)
    train_parser.add_argument(
        "--config", type=str, default=None, help="Training settings as KEY=VALUE lines."
    )
    train_parser.add_argument("--out", type=str, required=True, help="Model file to write.")
    train_parser.add_argument("--trace", type=str, default=None, help="Loss trace CSV to write.")
    train_parser.add_argument(
        "--epochs", type=int, default=None, help="Overrides epochs from --config."
    )
    train_parser.add_argument(
        "--check-gradients",
        action="store_true",
        default=False,
        dest="check_gradients",
        help="Compare gradients with finite differences before training.",
    )
    standard_args.for_seed(train_parser, default=None)
    standard_args.for_progress(train_parser)
    standard_args.for_output_format(train_parser)
    train_parser.set_defaults(func=train.run)

    # -- build-index command

    build_index_help_text = "Encode every slide of a dataset into a PSIX index."
    build_index_parser = subparsers.add_parser(
        "build-index",
        help=build_index_help_text,
        description=build_index_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    build_index_parser.add_argument(data_name, **data_arg)
    build_index_parser.add_argument(model_name, **{**model_arg, "required": True})
    build_index_parser.add_argument("--out", type=str, required=True, help="Index file to write.")
    build_index_parser.add_argument(
        "--float-width",
        type=int,
        choices=VALID_FLOAT_WIDTHS,
        default=DEFAULT_FLOAT_WIDTH,
        dest="float_width",
        help="Bytes per stored vector component.",
    )
    build_index_parser.set_defaults(func=build_index.run)

    # -- query command

    query_help_text = "Rank indexed slides or reports against a slide, a report or an indexed id."
    query_parser = subparsers.add_parser(
        "query",
        help=query_help_text,
        description=query_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    query_parser.add_argument(index_name, **{**index_arg, "required": True})
    query_parser.add_argument(model_name, **model_arg)
    query_source = query_parser.add_mutually_exclusive_group(required=True)
    query_source.add_argument("--slide", type=str, help="PEMB or CSV file of the query slide.")
    query_source.add_argument("--text", type=str, help="Query report text.")
    query_source.add_argument("--id", type=str, help="Indexed slide id, queried leave-one-out.")
    query_parser.add_argument(
        "--target",
        choices=(QueryTargets.IMAGE, QueryTargets.TEXT),
        default=QueryTargets.IMAGE,
        help="Rank slides (image) or stored reports (text).",
    )
    standard_args.for_fusion(query_parser)
    standard_args.for_output_format(query_parser)
    query_parser.set_defaults(func=query.run)

    # -- eval command

    eval_help_text = (
        "Leave-one-out accuracy of an index, accuracy of a rankings file, rater agreement, "
        + "or a McNemar comparison of two rankings files."
    )
    eval_parser = subparsers.add_parser(
        "eval",
        help=eval_help_text,
        description=eval_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    eval_source = eval_parser.add_mutually_exclusive_group(required=True)
    eval_source.add_argument(index_name, **index_arg)
    eval_source.add_argument("--rankings", type=str, help="Rankings CSV to score.")
    eval_source.add_argument(
        "--raters", type=str, help="CSV with subject_id, optional truth and one column per rater."
    )
    eval_source.add_argument(
        "--compare", type=str, nargs=2, metavar="RANKINGS", help="Two rankings CSVs to compare."
    )
    eval_parser.add_argument(
        "--labels", type=str, default=None, help="CSV of slide_id,label overriding index labels."
    )
    eval_parser.add_argument(
        "--direction",
        choices=Directions.ALL,
        action="append",
        default=None,
        help="Retrieval direction to evaluate; repeat for several. Default: image-to-image.",
    )
    eval_parser.add_argument(
        "--rankings-out", type=str, default=None, dest="rankings_out", help="Rankings CSV to write."
    )
    eval_parser.add_argument(
        "--threshold", type=int, default=3, help="Correct raters needed for a panel majority."
    )
    standard_args.for_fusion(eval_parser)
    standard_args.for_output_format(eval_parser)
    eval_parser.set_defaults(func=evaluate.run)

    # -- bench command

    bench_help_text = (
        "Measure query cost of the fixed-mosaic index against fractional sampling, "
        + "or print the analytic cost model."
    )
    bench_parser = subparsers.add_parser(
        "bench",
        help=bench_help_text,
        description=bench_help_text,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    bench_parser.add_argument(
        "--sizes", type=int, nargs="+", default=[1000, 2000, 4000], help="Index sizes S."
    )
    bench_parser.add_argument(
        "--baseline-sizes",
        type=int,
        nargs="+",
        default=[50, 100, 200],
        dest="baseline_sizes",
        help="Database sizes for the baseline.",
    )
    bench_parser.add_argument("--repetitions", type=int, default=5, help="Timed runs per size.")
    bench_parser.add_argument(
        "--p-bar", type=int, default=1000, dest="p_bar", help="Patches per slide."
    )
    bench_parser.add_argument(
        "--fractions",
        type=float,
        nargs="+",
        default=[BASELINE_FRACTIONS[0]],
        help="Baseline sampling fractions.",
    )
    bench_parser.add_argument("--m", type=int, default=DEFAULT_MOSAICS, help="Mosaics per slide.")
    bench_parser.add_argument("--dim", type=int, default=DEFAULT_DIM, help="Embedding dim.")
    bench_parser.add_argument(
        "--budget", type=int, default=DEFAULT_BUDGET, help="Op budget for capacity figures."
    )
    bench_parser.add_argument(
        "--analytic",
        action="store_true",
        default=False,
        help="Print cost-model and storage figures without timing anything.",
    )
    bench_parser.add_argument(
        "--plot-data", type=str, default=None, dest="plot_data", help="Plot CSV to write."
    )
    bench_parser.add_argument("--out", type=str, default=None, help="Measurements CSV to write.")
    standard_args.for_workers(bench_parser)
    standard_args.for_seed(bench_parser)
    standard_args.for_progress(bench_parser)
    standard_args.for_output_format(bench_parser)
    bench_parser.set_defaults(func=bench.run)

    return parser


def setup_dynaconf() -> Dict[str, Any]:
    config_file_settings_raw = Dynaconf(
        settings_file=CONFIG_FILE,
        envvar_prefix=ENVVAR_PREFIX,
        validators=[
            Validator("BETA", is_type_of=(int, float)),
            Validator("EPSILON", is_type_of=float),
            Validator("TOP_K", is_type_of=int),
            Validator("MODE", is_type_of=str),
            Validator("SHORTLIST", is_type_of=int),
            Validator("WORKERS", is_type_of=int),
            Validator("FORMAT", is_type_of=str),
            Validator("FLOAT_WIDTH", is_type_of=int),
            Validator("SEED", is_type_of=int),
            Validator("DIM", is_type_of=int),
            Validator("PROGRESS", is_type_of=bool),
        ],
    )
    # Dynaconf stores its keys in ALL CAPS
    return {k.lower(): v for k, v in config_file_settings_raw.as_dict().items()}


def dynaconf_argparse_merge(
    argparse_dict: Dict[str, Any], config_file_settings: Dict[str, Any], argv: List[str]
) -> None:
    # Set up another parser w/ no defaults
    aux_parser = argparse.ArgumentParser(argument_default=argparse.SUPPRESS, allow_abbrev=False)
    for k in argparse_dict:
        arg_name = k.replace("_", "-")
        if isinstance(argparse_dict[k], bool):
            aux_parser.add_argument("--" + arg_name, action="store_true")
        else:
            aux_parser.add_argument("--" + arg_name)
    # cli_args only contains args that were passed in the command line
    cli_args, _ = aux_parser.parse_known_args(argv)
    for key, value in config_file_settings.items():
        if key in argparse_dict and key not in cli_args:
            argparse_dict[key] = value


def run(argv: Optional[List[str]] = None) -> int:
    # setup logger and print version info as necessary
    logging.basicConfig(
        format="%(levelname)s: %(message)s",
        level=logging.INFO,
    )
    argv = sys.argv[1:] if argv is None else argv

    parser = setup_parser()
    try:
        # if no args are passed, print the help output
        args = parser.parse_args(args=argv if argv else ["--help"])
    except UsageError as err:
        parser.print_usage(sys.stderr)
        logging.error(err)
        return ExitCodes.USAGE
    except SystemExit as err:
        # --help and --version
        return int(err.code or 0)

    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    if any(key.startswith(f"{ENVVAR_PREFIX}_") for key in os.environ):
        logging.info("Found environment variables prefixed with '%s'", ENVVAR_PREFIX)
    if os.path.exists(CONFIG_FILE):
        logging.info(
            "Found config file %s (note: command line options will override config file settings)",
            CONFIG_FILE,
        )
    config_file_settings = setup_dynaconf()
    dynaconf_argparse_merge(vars(args), config_file_settings, argv)
    if args.debug:
        for key, value in vars(args).items():
            logging.debug(f"{key}={value}")  # pylint: disable=W1203

    if getattr(args, "func", None) is None:
        parser.print_help()
        return ExitCodes.USAGE

    try:
        return_code, out = args.func(args)
    except SlideSearchError as err:
        logging.error("%s", err)
        return err.exit_code
    except Exception as err:  # pylint: disable=broad-except
        # Catch arbitrary exceptions without printing help message
        logging.warning('Unhandled exception: "%s"', err)
        logging.debug("Full error traceback:", exc_info=err, stack_info=True)
        return ExitCodes.USAGE

    if return_code != 0:
        logging.error(out)
    elif out:
        logging.info(out)
    return return_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
