import argparse
import logging
import os
from typing import Tuple

from slide_search_tool.embeddings import PairedSample, append_to_dataset, read_patches
from slide_search_tool.errors import DataError


def run(args: argparse.Namespace) -> Tuple[int, str]:
    patches = read_patches(args.input)
    slide_id = args.id or os.path.splitext(os.path.basename(args.input))[0]
    report = args.report or ""
    if args.report_file:
        try:
            with open(args.report_file, "r", encoding="utf-8") as report_file:
                report = report_file.read().strip()
        except (OSError, UnicodeDecodeError) as err:
            raise DataError(f"cannot read report file {args.report_file}: {err}") from err
    append_to_dataset(
        PairedSample(slide_id=slide_id, label=args.label, report=report, patches=patches),
        args.out,
    )
    logging.info(
        "Ingested %s as %s (%d patches, dim %d)",
        args.input,
        slide_id,
        patches.n_patches,
        patches.dim,
    )
    return 0, ""
