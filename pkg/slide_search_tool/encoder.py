"""Vision branch forward pass and the text embedder interface.

The network is a small float64 torch module:

    patches (N x C)
      -> CorrelationLayer        single-head self-attention with residual
      -> MosaicGenerator         M gated-attention branches, one mosaic each
      -> aggregator              gated attention over the M mosaics
      -> projection, L2 norm     slide-level semantic vector

The module-level functions (correlate, gated_attention_pool, ...) are the
inference entry points; they run without autograd and return core types.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Protocol, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch
from torch import nn

from slide_search_tool.constants import (
    DEFAULT_DIM,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_MOSAICS,
    DEFAULT_TEMPERATURE_LOGIT,
)
from slide_search_tool.core import (
    MosaicSet,
    PatchEmbeddingMatrix,
    SemanticVector,
    l2_normalize,
)
from slide_search_tool.errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    UsageError,
)

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderSpec:
    dim: int = DEFAULT_DIM
    m: int = DEFAULT_MOSAICS
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    use_projection: bool = True
    residual: bool = True

    def __post_init__(self) -> None:
        if self.dim < 1 or self.m < 1 or self.hidden_dim < 1:
            raise UsageError(f"invalid encoder shape: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class GatedAttentionParams:
    """V1, V2 (D x C) and w (D) of one gated attention head, as plain arrays."""

    v1: np.ndarray
    v2: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        v1, v2, w = (np.asarray(x, dtype=np.float64) for x in (self.v1, self.v2, self.w))
        if v1.ndim != 2 or v1.shape != v2.shape or w.shape != (v1.shape[0],):
            raise DimensionError(
                f"inconsistent gated attention shapes: {v1.shape}, {v2.shape}, {w.shape}"
            )
        for name, value in (("v1", v1), ("v2", v2), ("w", w)):
            object.__setattr__(self, name, value)

    @property
    def hidden_dim(self) -> int:
        return int(self.v1.shape[0])


def _uniform(generator: torch.Generator, bound: float, *shape: int) -> torch.Tensor:
    return (torch.rand(*shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def gated_pool(
    rows: torch.Tensor, v1: torch.Tensor, v2: torch.Tensor, w: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gated attention pooling over the rows of an R x C tensor.

    Returns the pooled C vector and the R softmax weights.
    """
    gate = torch.tanh(rows @ v1.T) * torch.sigmoid(rows @ v2.T)
    weights = torch.softmax(gate @ w, dim=0)
    return weights @ rows, weights


class CorrelationLayer(nn.Module):
    """Single-head scaled dot-product self-attention across patches.

    Exact O(N^2) attention; an approximate kernel can replace `attention`
    without touching callers.
    """

    def __init__(self, dim: int, generator: torch.Generator, residual: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.residual = residual
        self.query = nn.Parameter(_uniform(generator, bound, dim, dim))
        self.key = nn.Parameter(_uniform(generator, bound, dim, dim))
        self.value = nn.Parameter(_uniform(generator, bound, dim, dim))

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = x @ self.query.T, x @ self.key.T, x @ self.value.T
        scores = torch.softmax(q @ k.T / math.sqrt(x.shape[1]), dim=-1)
        return scores @ v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mixed = self.attention(x)
        return x + mixed if self.residual else mixed


class GatedAttention(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, generator: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.v1 = nn.Parameter(_uniform(generator, bound, hidden_dim, dim))
        self.v2 = nn.Parameter(_uniform(generator, bound, hidden_dim, dim))
        self.w = nn.Parameter(_uniform(generator, bound, hidden_dim))

    def forward(self, rows: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return gated_pool(rows, self.v1, self.v2, self.w)

    def params(self) -> GatedAttentionParams:
        return GatedAttentionParams(
            *(p.detach().numpy().copy() for p in (self.v1, self.v2, self.w))
        )


class MosaicGenerator(nn.Module):
    """M independent gated attention branches stored as stacked tensors."""

    def __init__(self, dim: int, hidden_dim: int, m: int, generator: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.v1 = nn.Parameter(_uniform(generator, bound, m, hidden_dim, dim))
        self.v2 = nn.Parameter(_uniform(generator, bound, m, hidden_dim, dim))
        self.w = nn.Parameter(_uniform(generator, bound, m, hidden_dim))

    @property
    def m(self) -> int:
        return int(self.w.shape[0])

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        # x: N x C -> mosaics M x C, weights M x N
        gate = torch.tanh(torch.einsum("nc,mdc->mnd", x, self.v1)) * torch.sigmoid(
            torch.einsum("nc,mdc->mnd", x, self.v2)
        )
        weights = torch.softmax(torch.einsum("mnd,md->mn", gate, self.w), dim=1)
        return weights @ x, weights

    def branch(self, index: int) -> GatedAttentionParams:
        return GatedAttentionParams(
            *(p[index].detach().numpy().copy() for p in (self.v1, self.v2, self.w))
        )


class EncoderModel(nn.Module):
    projection: Optional[nn.Parameter]
    text_projection: Optional[nn.Parameter]

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.spec = spec
        self.correlation = CorrelationLayer(spec.dim, generator, residual=spec.residual)
        self.mosaic_generator = MosaicGenerator(spec.dim, spec.hidden_dim, spec.m, generator)
        self.aggregator = GatedAttention(spec.dim, spec.hidden_dim, generator)
        if spec.use_projection:
            self.projection = nn.Parameter(torch.eye(spec.dim, dtype=DTYPE))
            self.text_projection = nn.Parameter(torch.eye(spec.dim, dtype=DTYPE))
        else:
            self.register_parameter("projection", None)
            self.register_parameter("text_projection", None)
        self.temperature_logit = nn.Parameter(torch.tensor(DEFAULT_TEMPERATURE_LOGIT, dtype=DTYPE))

    def mosaics(self, patches: torch.Tensor) -> torch.Tensor:
        rows, _ = self.mosaic_generator(self.correlation(patches))
        return rows

    def slide_vector(self, mosaics: torch.Tensor) -> torch.Tensor:
        """Aggregated and projected slide vector, before normalization."""
        pooled, _ = self.aggregator(mosaics)
        if self.projection is not None:
            pooled = self.projection @ pooled
        return pooled

    def text_vector(self, raw_text: torch.Tensor) -> torch.Tensor:
        if self.text_projection is not None:
            return self.text_projection @ raw_text
        return raw_text

    def forward(self, patches: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mosaics = self.mosaics(patches)
        vector = self.slide_vector(mosaics)
        return mosaics, vector / torch.linalg.vector_norm(vector)


def _check_dim(dim: int, model: EncoderModel) -> None:
    if dim != model.spec.dim:
        raise DimensionError(f"input dim {dim} does not match encoder dim {model.spec.dim}")


def _tensor(data: npt.ArrayLike) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)


def correlate(patches: PatchEmbeddingMatrix, model: EncoderModel) -> PatchEmbeddingMatrix:
    _check_dim(patches.dim, model)
    with torch.no_grad():
        out = model.correlation(_tensor(patches.data))
    return PatchEmbeddingMatrix(out.numpy())


def gated_attention_pool(
    rows: npt.ArrayLike, params: GatedAttentionParams
) -> Tuple[np.ndarray, np.ndarray]:
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] != params.v1.shape[1]:
        raise DimensionError(f"cannot pool rows of shape {matrix.shape}")
    with torch.no_grad():
        pooled, weights = gated_pool(
            _tensor(matrix), _tensor(params.v1), _tensor(params.v2), _tensor(params.w)
        )
    return pooled.numpy(), weights.numpy()


def generate_mosaics(patches: PatchEmbeddingMatrix, model: EncoderModel) -> MosaicSet:
    _check_dim(patches.dim, model)
    with torch.no_grad():
        rows = model.mosaics(_tensor(patches.data))
    return MosaicSet(rows.numpy())


def aggregate(mosaics: MosaicSet, model: EncoderModel) -> SemanticVector:
    _check_dim(mosaics.dim, model)
    with torch.no_grad():
        vector = model.slide_vector(_tensor(mosaics.rows)).numpy()
    if not np.any(vector):
        raise DegenerateInputError("aggregated slide vector is zero")
    return l2_normalize(vector)


def encode_slide(
    patches: PatchEmbeddingMatrix, model: EncoderModel
) -> Tuple[MosaicSet, SemanticVector]:
    mosaics = generate_mosaics(patches, model)
    return mosaics, aggregate(mosaics, model)


class TextEmbedder(Protocol):
    """Maps a report string to a raw dim-sized vector, deterministically."""

    dim: int

    def __call__(self, report: str) -> np.ndarray: ...


class HashTextEmbedder:
    """Signed feature hashing of whitespace tokens into `dim` buckets."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def _bucket_and_sign(self, text: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "little") % self.dim
        return bucket, 1.0 if digest[4] & 1 else -1.0

    def __call__(self, report: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        tokens = report.lower().split()
        for token in tokens:
            bucket, sign = self._bucket_and_sign(token)
            vector[bucket] += sign
        if tokens and not vector.any():
            # every token cancelled out; the whole report gets one bucket instead
            bucket, _ = self._bucket_and_sign(" ".join(tokens))
            vector[bucket] = 1.0
        return vector


def embed_text(
    report: str, embedder: TextEmbedder, model: Optional[EncoderModel] = None
) -> SemanticVector:
    """Embeds a report; with a model the trained text projection is applied first."""
    if not report or not report.strip():
        raise DegenerateInputError("cannot embed an empty report")
    raw = np.asarray(embedder(report), dtype=np.float64)
    if raw.shape != (embedder.dim,):
        raise DimensionError(f"embedder returned shape {raw.shape}, expected ({embedder.dim},)")
    if model is not None:
        _check_dim(embedder.dim, model)
        with torch.no_grad():
            raw = model.text_vector(_tensor(raw)).numpy()
    return l2_normalize(raw)


def save_model(model: EncoderModel, path: str) -> None:
    torch.save({"spec": model.spec.to_dict(), "state_dict": model.state_dict()}, path)
    logging.info("Saved encoder model to %s", path)


def load_model(path: str) -> EncoderModel:
    try:
        checkpoint = torch.load(path, weights_only=True)
    except FileNotFoundError as err:
        raise DataError(f"model file not found: {path}") from err
    except Exception as err:  # pylint: disable=broad-except
        raise FormatError(f"not a model file: {err}", path=path) from err
    try:
        model = EncoderModel(EncoderSpec(**checkpoint["spec"]))
        model.load_state_dict(checkpoint["state_dict"])
    except (KeyError, IndexError, TypeError, ValueError, RuntimeError, UsageError) as err:
        raise FormatError(f"model weights do not fit the stored shape: {err}", path=path) from err
    model.eval()
    return model


def as_tensor(values: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return _tensor(values)
