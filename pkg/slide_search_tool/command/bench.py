import argparse
import logging
from typing import Any, List, Tuple

from slide_search_tool import cli_output
from slide_search_tool.complexity import (
    SCALING_HEADER,
    CostModelParams,
    baseline_ops_per_candidate,
    baseline_store_bytes,
    capacity_under_budget,
    fixed_mosaic_ops_per_candidate,
    linearity_ratios,
    measure_scaling,
    plot_curves,
    storage_table,
    write_plot_csv,
    write_scaling_csv,
)
from slide_search_tool.constants import BenchMethods


def analytic_rows(args: argparse.Namespace) -> List[List[Any]]:
    fixed = fixed_mosaic_ops_per_candidate(args.m, args.dim)
    rows: List[List[Any]] = [
        ["fixed-mosaic mosaic ops per candidate", fixed.mosaic],
        ["fixed-mosaic total ops per candidate", fixed.total],
    ]
    for f in args.fractions:
        setting = f"P={args.p_bar}, f={f:g}"
        params = CostModelParams(
            s=1, p_bar=args.p_bar, f=f, m=args.m, dim=args.dim, budget=args.budget
        )
        rows.append(
            [
                f"baseline ops per candidate ({setting})",
                baseline_ops_per_candidate(args.p_bar, args.p_bar, f),
            ]
        )
        for method, size in capacity_under_budget(params).items():
            rows.append([f"capacity {method} (budget={args.budget}, {setting})", size])
        rows.append(
            [f"baseline store bytes ({setting})", baseline_store_bytes(args.p_bar, f, args.dim)]
        )
    footprints = storage_table(args.dim)
    for footprint in footprints:
        rows.append([f"mosaic bytes (m={footprint.m})", footprint.mosaic_bytes])
    rows.append([f"semantic bytes (dim={args.dim}, float64)", footprints[0].semantic_bytes])
    return rows


def run(args: argparse.Namespace) -> Tuple[int, str]:
    if args.plot_data:
        write_plot_csv(args.plot_data, plot_curves(args.sizes, args.m, args.dim, args.budget))
        logging.info("Wrote plot data to %s", args.plot_data)

    if args.analytic:
        rows = analytic_rows(args)
        print(cli_output.render(["quantity", "value"], rows, args.format, "Cost model"))
        return 0, ""

    measured = measure_scaling(
        sizes=args.sizes,
        repetitions=args.repetitions,
        seed=args.seed,
        p_bar=args.p_bar,
        fractions=args.fractions,
        baseline_sizes=args.baseline_sizes,
        m=args.m,
        dim=args.dim,
        workers=args.workers,
        progress=args.progress,
    )
    if args.out:
        write_scaling_csv(args.out, measured)
        logging.info("Wrote %d measurements to %s", len(measured), args.out)
    for small, large, ratio in linearity_ratios(measured, BenchMethods.FIXED_MOSAIC):
        logging.info("fixed-mosaic time(S=%d) / time(S=%d) = %.2f", large, small, ratio)
    table = [row.as_row() for row in measured]
    print(cli_output.render(SCALING_HEADER, table, args.format, "Scaling"))
    return 0, ""
