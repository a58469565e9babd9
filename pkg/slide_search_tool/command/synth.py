import argparse
import logging
from typing import Tuple

from slide_search_tool.embeddings import write_dataset
from slide_search_tool.synthetic import synth_dataset


def run(args: argparse.Namespace) -> Tuple[int, str]:
    dataset = synth_dataset(
        classes=args.classes,
        slides_per_class=args.per_class,
        patches_low=args.patches_low,
        patches_high=args.patches_high,
        dim=args.dim,
        seed=args.seed,
        sigma=args.sigma,
    )
    write_dataset(dataset, args.out)
    logging.info(
        "%d classes x %d slides, %d-%d patches of dim %d",
        args.classes,
        args.per_class,
        args.patches_low,
        args.patches_high,
        args.dim,
    )
    return 0, ""
