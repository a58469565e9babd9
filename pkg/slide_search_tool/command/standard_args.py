import argparse
from typing import Optional

from slide_search_tool.constants import (
    DEFAULT_BETA,
    DEFAULT_EPSILON,
    DEFAULT_TOP_K,
    OutputFormats,
    RetrievalModes,
)
from slide_search_tool.index import FusionConfig


def for_output_format(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--format",
        choices=OutputFormats.ALL,
        default=OutputFormats.TABLE,
        help="How results are printed. csv and json-lines are stable for scripting.",
        required=False,
    )


def for_fusion(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--beta",
        type=float,
        default=DEFAULT_BETA,
        help="Weight of the semantic distance in the fused score.",
        required=False,
    )
    parser.add_argument(
        "--no-normalize",
        action="store_true",
        default=False,
        dest="no_normalize",
        help="Fuse raw distances instead of per-query z-scores.",
        required=False,
    )
    parser.add_argument(
        "--epsilon",
        type=float,
        default=DEFAULT_EPSILON,
        help="Added to the standard deviation when z-scoring.",
        required=False,
    )
    parser.add_argument(
        "--top-k",
        type=int,
        default=DEFAULT_TOP_K,
        dest="top_k",
        help="Number of results to return.",
        required=False,
    )
    parser.add_argument(
        "--mode",
        choices=RetrievalModes.ALL,
        default=RetrievalModes.FUSED,
        help="Rank by the fused score or by a single distance family.",
        required=False,
    )
    parser.add_argument(
        "--shortlist",
        type=int,
        default=None,
        help="Keep only this many candidates after the mosaic stage before fusing.",
        required=False,
    )
    for_workers(parser)


def for_workers(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Threads used to scan candidates. Results do not depend on this value.",
        required=False,
    )


def for_progress(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--progress",
        action="store_true",
        default=False,
        help="Show a progress bar.",
        required=False,
    )


def for_seed(parser: argparse.ArgumentParser, default: Optional[int] = 0) -> None:
    parser.add_argument(
        "--seed",
        type=int,
        default=default,
        help="Random seed; identical seeds give identical outputs.",
        required=False,
    )


def fusion_config(args: argparse.Namespace, top_k: Optional[int] = None) -> FusionConfig:
    return FusionConfig(
        beta=args.beta,
        normalize=not args.no_normalize,
        epsilon=args.epsilon,
        top_k=args.top_k if top_k is None else top_k,
        mode=args.mode,
        shortlist=args.shortlist,
        workers=args.workers,
    )
