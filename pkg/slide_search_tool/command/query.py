import argparse
import logging
from typing import Any, List, Tuple

from slide_search_tool import cli_output
from slide_search_tool.command.standard_args import fusion_config
from slide_search_tool.constants import QueryTargets
from slide_search_tool.embeddings import read_patches
from slide_search_tool.encoder import EncoderModel, HashTextEmbedder, embed_text, load_model
from slide_search_tool.errors import UsageError
from slide_search_tool.index import (
    RankedMatch,
    RetrievalIndex,
    query_from_patches,
    query_from_record,
    query_image,
    query_image_to_text,
    query_text_to_image,
    query_text_to_text,
)
from slide_search_tool.index_format import load_index

IMAGE_COLUMNS = [
    "rank",
    "candidate_id",
    "label",
    "fused_distance",
    "mosaic_distance",
    "semantic_distance",
]
MATCH_COLUMNS = ["rank", "candidate_id", "label", "distance"]


def _require_model(args: argparse.Namespace) -> EncoderModel:
    if not args.model:
        raise UsageError("--model is required to encode a slide file or a report")
    return load_model(args.model)


def _label(index: RetrievalIndex, candidate_id: str) -> str:
    return index.label_name(index.record(candidate_id)) or ""


def _match_rows(index: RetrievalIndex, matches: List[RankedMatch]) -> List[List[Any]]:
    return [[m.rank, m.candidate_id, _label(index, m.candidate_id), m.distance] for m in matches]


def run(args: argparse.Namespace) -> Tuple[int, str]:
    index = load_index(args.index)
    cfg = fusion_config(args)
    if args.text is not None:
        model = _require_model(args)
        text = embed_text(args.text, HashTextEmbedder(index.dim), model)
        if args.target == QueryTargets.TEXT:
            matches = query_text_to_text(text, index, cfg.top_k)
        else:
            matches = query_text_to_image(text, index, cfg.top_k)
        rows = _match_rows(index, matches)
        print(cli_output.render(MATCH_COLUMNS, rows, args.format, "Report query"))
        return 0, ""

    if args.slide is not None:
        query = query_from_patches(read_patches(args.slide), _require_model(args))
        title = f"Slide query {args.slide}"
    else:
        query = query_from_record(index.record(args.id))
        title = f"Leave-one-out query {args.id}"

    if args.target == QueryTargets.TEXT:
        matches = query_image_to_text(query.semantic, index, cfg.top_k, exclude_id=query.slide_id)
        print(cli_output.render(MATCH_COLUMNS, _match_rows(index, matches), args.format, title))
        return 0, ""

    results = query_image(query, index, cfg)
    rows = [
        [
            r.rank,
            r.candidate_id,
            _label(index, r.candidate_id),
            r.fused_distance,
            r.mosaic_distance,
            r.semantic_distance,
        ]
        for r in results
    ]
    logging.debug("ranked %d candidates with %s", len(results), cfg)
    print(cli_output.render(IMAGE_COLUMNS, rows, args.format, title))
    return 0, ""
