import argparse
import logging
import os
from typing import Any, List, Tuple

from slide_search_tool import cli_output
from slide_search_tool.command.standard_args import fusion_config
from slide_search_tool.errors import UsageError
from slide_search_tool.evaluation import (
    DEFAULT_KS,
    Directions,
    accuracy_suite,
    compare_rankings,
    consistency_distribution,
    evaluate_direction,
    fleiss_kappa,
    interpret_kappa,
    metric_name,
    panel_mv_accuracy,
    rater_table_from_labels,
    read_labels,
    read_rankings,
    read_rater_table,
    write_rankings,
)
from slide_search_tool.index_format import load_index

METRIC_COLUMNS = ["metric", "value"]


def rankings_path(base: str, direction: str, several: bool) -> str:
    if not several:
        return base
    root, ext = os.path.splitext(base)
    return f"{root}-{direction}{ext or '.csv'}"


def evaluate_index(args: argparse.Namespace) -> Tuple[int, str]:
    index = load_index(args.index)
    labels = read_labels(args.labels) if args.labels else None
    directions = args.direction or [Directions.IMAGE_TO_IMAGE]
    if not index.has_text and any(d != Directions.IMAGE_TO_IMAGE for d in directions):
        raise UsageError(f"{args.index} holds no report embeddings for cross-modal evaluation")
    cfg = fusion_config(args)

    columns = ["direction", "queries"] + [metric_name(k) for k in DEFAULT_KS] + ["seconds"]
    rows: List[List[Any]] = []
    total_seconds = 0.0
    for direction in directions:
        report = evaluate_direction(index, direction, cfg, labels)
        rows.append(
            [direction, report.queries]
            + [report.metrics[metric_name(k)] for k in DEFAULT_KS]
            + [report.seconds]
        )
        total_seconds += report.seconds
        if args.rankings_out:
            path = rankings_path(args.rankings_out, direction, len(directions) > 1)
            write_rankings(path, report)
            logging.info("Wrote %s rankings to %s", direction, path)
    print(cli_output.render(columns, rows, args.format, "Leave-one-out retrieval"))
    logging.info("Total retrieval time: %.3f s", total_seconds)
    return 0, ""


def evaluate_rankings(args: argparse.Namespace) -> Tuple[int, str]:
    suite = accuracy_suite(read_rankings(args.rankings))
    rows = [[name, value] for name, value in suite.items()]
    print(cli_output.render(METRIC_COLUMNS, rows, args.format, "Retrieval accuracy"))
    return 0, ""


def evaluate_raters(args: argparse.Namespace) -> Tuple[int, str]:
    study = read_rater_table(args.raters)
    kappa = fleiss_kappa(rater_table_from_labels(study.labels))
    rows: List[List[Any]] = [
        ["subjects", len(study.labels)],
        ["raters", len(study.rater_names)],
        ["fleiss_kappa", "degenerate" if kappa is None else kappa],
        ["agreement", interpret_kappa(kappa)],
    ]
    for bucket, share in consistency_distribution(study.labels).items():
        rows.append([f"consistency {bucket}", share])
    if study.truth is not None:
        rows.append(
            [f"panel_mv@{args.threshold}", panel_mv_accuracy(study.decisions(), args.threshold)]
        )
    print(cli_output.render(METRIC_COLUMNS, rows, args.format, "Rater agreement"))
    return 0, ""


def evaluate_comparison(args: argparse.Namespace) -> Tuple[int, str]:
    first, second = args.compare
    results = compare_rankings(read_rankings(first), read_rankings(second))
    columns = ["metric", "b", "c", "p_value", "test"]
    rows = [
        [name, r.b, r.c, r.p_value, "exact" if r.exact else "chi2"] for name, r in results.items()
    ]
    print(cli_output.render(columns, rows, args.format, f"McNemar: {first} vs {second}"))
    return 0, ""


def run(args: argparse.Namespace) -> Tuple[int, str]:
    if args.index:
        return evaluate_index(args)
    if args.rankings:
        return evaluate_rankings(args)
    if args.raters:
        return evaluate_raters(args)
    return evaluate_comparison(args)
