"""Joint training of the encoder: L = L_c + alpha * L_d.

L_c is the symmetric InfoNCE loss between slide vectors and projected text
vectors with in-batch negatives; L_d is the mean off-diagonal Gram entry of
each slide's mosaics, averaged over the batch.
"""

import copy
import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from schema import SchemaError
from tqdm import tqdm

from slide_search_tool.constants import (
    DEFAULT_HIDDEN_DIM,
    DEFAULT_MOSAICS,
    VALIDATION_FRACTION,
)
from slide_search_tool.core import MosaicSet, PatchEmbeddingMatrix
from slide_search_tool.embeddings import PairedDataset, PairedSample
from slide_search_tool.encoder import DTYPE, EncoderModel, EncoderSpec, as_tensor
from slide_search_tool.errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    PreconditionError,
    UsageError,
)
from slide_search_tool.schemas import TRAIN_CONFIG_SCHEMA
from slide_search_tool.util import chunk_list, read_key_value_file, write_csv

UNIT_ROW_TOLERANCE = 1e-6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 8e-5
    weight_decay: float = 0.05
    epochs: int = 100
    alpha: float = 1.0
    seed: int = 0
    m: int = DEFAULT_MOSAICS
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    normalize_mosaics_for_ld: bool = True
    abs_diversity: bool = False
    use_projection: bool = True
    val_fraction: float = VALIDATION_FRACTION

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown train config keys: {unknown}")
        try:
            validated = TRAIN_CONFIG_SCHEMA.validate(dict(values))
        except SchemaError as err:
            raise UsageError(f"invalid train config: {err}") from err
        return replace(cls(), **validated)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        return cls.from_dict(read_key_value_file(path))

    def encoder_spec(self, dim: int) -> EncoderSpec:
        return EncoderSpec(
            dim=dim, m=self.m, hidden_dim=self.hidden_dim, use_projection=self.use_projection
        )


@dataclass
class Batch:
    """Slides and raw text vectors; pair i <-> i is positive, all others negative."""

    slides: List[PatchEmbeddingMatrix]
    texts: List[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.slides) != len(self.texts):
            raise DimensionError(
                f"batch has {len(self.slides)} slides but {len(self.texts)} texts"
            )
        if not self.slides:
            raise DataError("empty batch")

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample]) -> "Batch":
        texts = []
        for sample in samples:
            if sample.text_vector is None:
                raise DataError(f"slide {sample.slide_id} has no paired report")
            texts.append(sample.text_vector)
        return cls(slides=[s.patches for s in samples], texts=texts)

    def __len__(self) -> int:
        return len(self.slides)


@dataclass(frozen=True)
class LossBreakdown:
    total: torch.Tensor
    contrastive: torch.Tensor
    diversity: torch.Tensor


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    l_c: float
    l_d: float


@dataclass
class TrainResult:
    model: EncoderModel
    trace: List[EpochRecord]
    best_epoch: int


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, trace: List[EpochRecord]):
        super().__init__(message)
        self.trace = trace


def _check_unit_rows(rows: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        deviation = (torch.linalg.vector_norm(rows, dim=1) - 1.0).abs().max().item()
    if not deviation <= UNIT_ROW_TOLERANCE:
        raise PreconditionError(f"{name} rows must be unit-norm (max deviation {deviation:.3g})")


def tree_sum(values: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pairwise reduction with a fixed shape, independent of evaluation order."""
    level = list(values)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


def info_nce_loss(
    image_embs: Union[npt.ArrayLike, torch.Tensor],
    text_embs: Union[npt.ArrayLike, torch.Tensor],
    temperature_logit: Union[float, torch.Tensor],
) -> torch.Tensor:
    """Symmetric InfoNCE with logits exp(temperature_logit) * <image_i, text_j>."""
    image, text = as_tensor(image_embs), as_tensor(text_embs)  # type: ignore[arg-type]
    if image.ndim != 2 or image.shape != text.shape or image.shape[0] < 1:
        raise DimensionError(f"embedding shapes {tuple(image.shape)} / {tuple(text.shape)}")
    _check_unit_rows(image, "image")
    _check_unit_rows(text, "text")
    logit = torch.as_tensor(temperature_logit, dtype=DTYPE)
    similarities = torch.exp(logit) * (image @ text.T)
    targets = torch.arange(image.shape[0])
    return 0.5 * (
        F.cross_entropy(similarities, targets) + F.cross_entropy(similarities.T, targets)
    )


def diversity_loss(
    mosaics: Union[MosaicSet, npt.ArrayLike, torch.Tensor],
    normalize: bool = True,
    absolute: bool = False,
) -> torch.Tensor:
    """Mean off-diagonal entry of the mosaic Gram matrix.

    Rows are L2-normalized first unless `normalize` is False; `absolute`
    penalizes negative correlations as well.
    """
    if isinstance(mosaics, MosaicSet):
        mosaics = mosaics.rows
    rows = as_tensor(mosaics)  # type: ignore[arg-type]
    m = rows.shape[0]
    if m < 2:
        logging.warning("diversity loss is undefined for %d mosaic(s), using 0", m)
        return torch.zeros((), dtype=DTYPE)
    if normalize:
        rows = F.normalize(rows, dim=1)
    gram = rows @ rows.T
    off_diagonal = gram - torch.diag(torch.diagonal(gram))
    if absolute:
        off_diagonal = off_diagonal.abs()
    return off_diagonal.sum() / (m * m - m)


def total_loss(batch: Batch, model: EncoderModel, config: TrainConfig) -> LossBreakdown:
    image_vectors = []
    diversities = []
    for patches in batch.slides:
        mosaics, semantic = model(as_tensor(patches.data))
        image_vectors.append(semantic)
        diversities.append(
            diversity_loss(mosaics, config.normalize_mosaics_for_ld, config.abs_diversity)
        )
    text_vectors = []
    for raw in batch.texts:
        projected = model.text_vector(as_tensor(raw))
        norm = torch.linalg.vector_norm(projected)
        if norm.item() == 0.0:
            raise DegenerateInputError("projected text vector is zero")
        text_vectors.append(projected / norm)
    contrastive = info_nce_loss(
        torch.stack(image_vectors), torch.stack(text_vectors), model.temperature_logit
    )
    diversity = tree_sum(diversities) / len(diversities)
    return LossBreakdown(
        total=contrastive + config.alpha * diversity,
        contrastive=contrastive,
        diversity=diversity,
    )


def gradients(batch: Batch, model: EncoderModel, config: TrainConfig) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of the total loss for every trainable tensor."""
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericError("non-finite parameter", parameter=name)
    model.zero_grad(set_to_none=True)
    loss = total_loss(batch, model, config).total
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads: Dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NumericError("non-finite gradient", parameter=name)
        grads[name] = grad.detach().numpy().copy()
    model.zero_grad(set_to_none=True)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference relative to the tensor's numeric gradient scale."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def gradient_check(
    batch: Batch,
    model: EncoderModel,
    config: TrainConfig,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
) -> Dict[str, float]:
    """Compares reverse-mode gradients with central finite differences.

    With max_entries, only that many entries per tensor (chosen with the config
    seed) are perturbed, which keeps full-size models checkable.
    """
    analytic = gradients(batch, model, config)
    rng = np.random.default_rng(config.seed)
    errors: Dict[str, float] = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            entries = np.arange(flat.numel())
            if max_entries is not None and entries.size > max_entries:
                entries = np.sort(rng.choice(entries.size, size=max_entries, replace=False))
            numeric = np.zeros(entries.size)
            for j, i in enumerate(entries.tolist()):
                original = flat[i].item()
                flat[i] = original + h
                plus = total_loss(batch, model, config).total.item()
                flat[i] = original - h
                minus = total_loss(batch, model, config).total.item()
                flat[i] = original
                numeric[j] = (plus - minus) / (2 * h)
            errors[name] = relative_error(analytic[name].ravel()[entries], numeric)
            logging.debug("gradient check %s: relative error %.3g", name, errors[name])
    return errors


def split_samples(
    samples: Sequence[PairedSample], val_fraction: float, seed: int
) -> Tuple[List[PairedSample], List[PairedSample]]:
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(val_fraction * len(samples))) if val_fraction > 0 else 0
    n_val = max(1, n_val) if val_fraction > 0 else 0
    if len(samples) - n_val < 2:
        n_val = 0
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def _mean_losses(
    model: EncoderModel, samples: Sequence[PairedSample], config: TrainConfig
) -> Tuple[float, float, float]:
    with torch.no_grad():
        losses = total_loss(Batch.from_samples(samples), model, config)
    return losses.total.item(), losses.contrastive.item(), losses.diversity.item()


def train(
    config: TrainConfig,
    dataset: PairedDataset,
    progress: bool = False,
    model: Optional[EncoderModel] = None,
) -> TrainResult:
    """AdamW training with best-checkpoint selection on validation total loss.

    trace[0] holds the losses of the untrained model (epoch 0).
    """
    if len(dataset) < 2:
        raise DataError(f"training needs at least 2 pairs, got {len(dataset)}")
    train_samples, val_samples = split_samples(dataset.samples, config.val_fraction, config.seed)
    logging.info(
        "Training on %d pairs, validating on %d pairs", len(train_samples), len(val_samples)
    )
    if model is None:
        model = EncoderModel(config.encoder_spec(dataset.dim), seed=config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    checkpoint_samples = val_samples or train_samples

    train_loss, l_c, l_d = _mean_losses(model, train_samples, config)
    val_loss = _mean_losses(model, checkpoint_samples, config)[0]
    trace = [EpochRecord(0, train_loss, val_loss, l_c, l_d)]
    best_val, best_epoch = val_loss, 0
    best_state = copy.deepcopy(model.state_dict())

    for epoch in tqdm(range(1, config.epochs + 1), desc="epochs", disable=not progress):
        totals = np.zeros(3)
        for chunk in chunk_list(rng.permutation(len(train_samples)).tolist(), config.batch_size):
            batch = Batch.from_samples([train_samples[i] for i in chunk])
            optimizer.zero_grad(set_to_none=True)
            losses = total_loss(batch, model, config)
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch} (loss {losses.total.item()})", trace
                )
            losses.total.backward()
            optimizer.step()
            totals += len(batch) * np.array(
                [losses.total.item(), losses.contrastive.item(), losses.diversity.item()]
            )
        train_loss, l_c, l_d = (totals / len(train_samples)).tolist()
        val_loss = _mean_losses(model, checkpoint_samples, config)[0]
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss is {val_loss} at epoch {epoch}", trace)
        trace.append(EpochRecord(epoch, train_loss, val_loss, l_c, l_d))
        logging.debug("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    logging.info("Selected checkpoint from epoch %d (validation loss %.6f)", best_epoch, best_val)
    return TrainResult(model=model, trace=trace, best_epoch=best_epoch)


def write_loss_trace(trace: Sequence[EpochRecord], path: str) -> None:
    write_csv(
        path,
        ["epoch", "train_loss", "val_loss", "l_c", "l_d"],
        ([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.l_c), repr(r.l_d)] for r in trace),
    )
