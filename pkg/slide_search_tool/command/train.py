import argparse
import logging
from dataclasses import replace
from typing import Tuple

from slide_search_tool import cli_output
from slide_search_tool.embeddings import embed_reports, read_dataset
from slide_search_tool.encoder import EncoderModel, HashTextEmbedder, save_model
from slide_search_tool.errors import NumericError
from slide_search_tool.training import (
    Batch,
    TrainConfig,
    gradient_check,
    train,
    write_loss_trace,
)

GRADIENT_CHECK_SLIDES = 4
GRADIENT_CHECK_ENTRIES = 8
GRADIENT_CHECK_TOLERANCE = 1e-4
TRACE_COLUMNS = ["epoch", "train_loss", "val_loss", "l_c", "l_d"]


def check_gradients(config: TrainConfig, model: EncoderModel, batch: Batch) -> None:
    status_pass = cli_output.success("PASS")
    status_fail = cli_output.failed("FAIL")
    errors = gradient_check(batch, model, config, max_entries=GRADIENT_CHECK_ENTRIES)
    for name, error in errors.items():
        status = status_pass if error <= GRADIENT_CHECK_TOLERANCE else status_fail
        logging.info("[%s] gradient check %s: relative error %.3g", status, name, error)
    worst = max(errors, key=errors.__getitem__)
    if errors[worst] > GRADIENT_CHECK_TOLERANCE:
        raise NumericError(
            f"gradient check failed with relative error {errors[worst]:.3g}", parameter=worst
        )


def run(args: argparse.Namespace) -> Tuple[int, str]:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    logging.debug("train config: %s", config)

    dataset = read_dataset(args.data)
    embed_reports(dataset, HashTextEmbedder(dataset.dim))

    if args.check_gradients:
        model = EncoderModel(config.encoder_spec(dataset.dim), seed=config.seed)
        check_gradients(
            config, model, Batch.from_samples(dataset.samples[:GRADIENT_CHECK_SLIDES])
        )

    result = train(config, dataset, progress=args.progress)
    save_model(result.model, args.out)
    if args.trace:
        write_loss_trace(result.trace, args.trace)
        logging.info("Wrote loss trace to %s", args.trace)

    rows = [[r.epoch, r.train_loss, r.val_loss, r.l_c, r.l_d] for r in result.trace]
    print(cli_output.render(TRACE_COLUMNS, rows, args.format, title="Loss trace"))
    logging.info("Best checkpoint: epoch %d", result.best_epoch)
    return 0, ""
