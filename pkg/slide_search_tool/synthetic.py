import logging
from typing import List, Optional

import numpy as np

from slide_search_tool.constants import SYNTH_SIGMA
from slide_search_tool.core import PatchEmbeddingMatrix
from slide_search_tool.embeddings import PairedDataset, PairedSample
from slide_search_tool.encoder import HashTextEmbedder, TextEmbedder
from slide_search_tool.errors import UsageError

VOCABULARY_PER_CLASS = 12
TOKENS_PER_REPORT = 8


def class_vocabulary(class_index: int) -> List[str]:
    return [f"class{class_index}-finding{k}" for k in range(VOCABULARY_PER_CLASS)]


def synth_dataset(
    classes: int,
    slides_per_class: int,
    patches_low: int,
    patches_high: int,
    dim: int,
    seed: int,
    sigma: float = SYNTH_SIGMA,
    embedder: Optional[TextEmbedder] = None,
) -> PairedDataset:
    """Separable slide/report pairs: one unit-sphere center per class.

    Each slide draws N in [patches_low, patches_high] patches from
    Normal(center, sigma^2 I); its report is a bag of tokens drawn from a
    vocabulary private to the class.
    """
    if classes < 2:
        raise UsageError(f"need at least 2 classes, got {classes}")
    if slides_per_class < 1:
        raise UsageError(f"need at least 1 slide per class, got {slides_per_class}")
    if patches_low < 1 or patches_high < patches_low:
        raise UsageError(f"invalid patch range [{patches_low}, {patches_high}]")
    if sigma < 0:
        raise UsageError(f"sigma must be >= 0, got {sigma}")

    embedder = embedder or HashTextEmbedder(dim)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    dataset = PairedDataset()
    for g in range(classes):
        vocabulary = class_vocabulary(g)
        for i in range(slides_per_class):
            n_patches = int(rng.integers(patches_low, patches_high + 1))
            patches = centers[g] + sigma * rng.standard_normal((n_patches, dim))
            report = " ".join(rng.choice(vocabulary, size=TOKENS_PER_REPORT).tolist())
            dataset.samples.append(
                PairedSample(
                    slide_id=f"slide-{g:02d}-{i:04d}",
                    label=f"class_{g}",
                    report=report,
                    patches=PatchEmbeddingMatrix(patches),
                    text_vector=embedder(report),
                )
            )
    logging.debug(
        "Synthesized %d slides (%d classes, dim %d, seed %d)", len(dataset), classes, dim, seed
    )
    return dataset
