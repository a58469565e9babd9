import argparse
from typing import Tuple

from slide_search_tool.embeddings import read_dataset
from slide_search_tool.encoder import HashTextEmbedder, load_model
from slide_search_tool.errors import DimensionError
from slide_search_tool.index import build_index
from slide_search_tool.index_format import save_index


def run(args: argparse.Namespace) -> Tuple[int, str]:
    model = load_model(args.model)
    dataset = read_dataset(args.data)
    if dataset.dim != model.spec.dim:
        raise DimensionError(
            f"dataset dim {dataset.dim} does not match model dim {model.spec.dim}"
        )
    embedder = HashTextEmbedder(model.spec.dim)
    index = build_index(dataset, model, embedder, float_width=args.float_width)
    save_index(index, args.out)
    return 0, ""
