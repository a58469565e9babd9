"""Patch-embedding files and paired slide/report datasets on disk.

PEMB layout (little-endian): magic "PEMB", u32 version, u32 N, u32 C, then
N x C float32 values row-major. A dataset directory holds one PEMB file per
slide under slides/ and a manifest.csv with slide_id,label,report,path.
"""

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from schema import SchemaError

from slide_search_tool.constants import MANIFEST_FILE, PEMB_MAGIC, PEMB_VERSION, SLIDES_DIR
from slide_search_tool.core import PatchEmbeddingMatrix
from slide_search_tool.encoder import TextEmbedder
from slide_search_tool.errors import DataError, DimensionError, FormatError
from slide_search_tool.schemas import MANIFEST_ROW_SCHEMA
from slide_search_tool.util import id_to_path

PEMB_HEADER = struct.Struct("<4sIII")


def write_pemb(path: str, patches: PatchEmbeddingMatrix) -> None:
    with open(path, "wb") as pemb_file:
        pemb_file.write(PEMB_HEADER.pack(PEMB_MAGIC, PEMB_VERSION, *patches.data.shape))
        pemb_file.write(patches.data.astype("<f4").tobytes())


def read_pemb(path: str) -> PatchEmbeddingMatrix:
    with open(path, "rb") as pemb_file:
        raw = pemb_file.read()
    if len(raw) < PEMB_HEADER.size:
        raise FormatError("truncated PEMB header", path=path, offset=len(raw))
    magic, version, n_patches, dim = PEMB_HEADER.unpack_from(raw, 0)
    if magic != PEMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != PEMB_VERSION:
        raise FormatError(f"unsupported PEMB version {version}", path=path, offset=4)
    expected = PEMB_HEADER.size + n_patches * dim * 4
    if len(raw) != expected:
        raise FormatError(
            f"expected {expected} bytes for {n_patches}x{dim} embeddings, got {len(raw)}",
            path=path,
            offset=min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype="<f4", offset=PEMB_HEADER.size)
    return PatchEmbeddingMatrix(values.reshape(n_patches, dim).astype(np.float64))


def read_patch_csv(path: str) -> PatchEmbeddingMatrix:
    """One patch per line, comma separated reals."""
    rows: List[List[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as csv_file:
        for line_number, row in enumerate(csv.reader(csv_file), start=1):
            if not row:
                continue
            try:
                rows.append([float(value) for value in row])
            except ValueError as err:
                raise FormatError(f"line {line_number}: {err}", path=path) from err
    if not rows:
        raise FormatError("no patch rows found", path=path, offset=0)
    if len({len(row) for row in rows}) != 1:
        raise FormatError("patch rows have different lengths", path=path)
    return PatchEmbeddingMatrix(np.array(rows, dtype=np.float64))


def read_patches(path: str) -> PatchEmbeddingMatrix:
    try:
        if path.lower().endswith(".csv"):
            return read_patch_csv(path)
        return read_pemb(path)
    except FileNotFoundError as err:
        raise DataError(f"patch embedding file not found: {path}") from err


@dataclass
class PairedSample:
    slide_id: str
    label: Optional[str]
    report: str
    patches: PatchEmbeddingMatrix
    text_vector: Optional[np.ndarray] = None


@dataclass
class PairedDataset:
    samples: List[PairedSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples[0].patches.dim

    def label_names(self) -> List[str]:
        return sorted({s.label for s in self.samples if s.label is not None})

    def label_ids(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.label_names())}


def write_dataset(dataset: PairedDataset, out_dir: str) -> str:
    slides_dir = os.path.join(out_dir, SLIDES_DIR)
    os.makedirs(slides_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    with open(manifest_path, "w", encoding="utf-8", newline="") as manifest:
        writer = csv.writer(manifest, lineterminator="\n")
        writer.writerow(["slide_id", "label", "report", "path"])
        for sample in dataset.samples:
            slide_path = id_to_path(slides_dir, sample.slide_id, ".pemb")
            write_pemb(slide_path, sample.patches)
            writer.writerow(
                [
                    sample.slide_id,
                    sample.label or "",
                    sample.report,
                    os.path.relpath(slide_path, out_dir),
                ]
            )
    logging.info("Wrote %d slides to %s", len(dataset), out_dir)
    return manifest_path


def append_to_dataset(sample: PairedSample, out_dir: str) -> None:
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    new_manifest = not os.path.exists(manifest_path)
    existing = [] if new_manifest else read_manifest(out_dir)
    if any(row["slide_id"] == sample.slide_id for row in existing):
        raise DataError(f"slide id {sample.slide_id} already present in {manifest_path}")
    if existing:
        existing_dim = read_patches(os.path.join(out_dir, existing[0]["path"])).dim
        if existing_dim != sample.patches.dim:
            raise DimensionError(
                f"slide {sample.slide_id} has dim {sample.patches.dim}, dataset uses {existing_dim}"
            )
    slides_dir = os.path.join(out_dir, SLIDES_DIR)
    os.makedirs(slides_dir, exist_ok=True)
    slide_path = id_to_path(slides_dir, sample.slide_id, ".pemb")
    write_pemb(slide_path, sample.patches)
    with open(manifest_path, "a", encoding="utf-8", newline="") as manifest:
        writer = csv.writer(manifest, lineterminator="\n")
        if new_manifest:
            writer.writerow(["slide_id", "label", "report", "path"])
        writer.writerow(
            [
                sample.slide_id,
                sample.label or "",
                sample.report,
                os.path.relpath(slide_path, out_dir),
            ]
        )


def read_manifest(data_dir: str) -> List[Dict[str, str]]:
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    try:
        with open(manifest_path, "r", encoding="utf-8", newline="") as manifest:
            rows = list(csv.DictReader(manifest))
    except FileNotFoundError as err:
        raise DataError(f"dataset manifest not found: {manifest_path}") from err
    validated = []
    for line_number, row in enumerate(rows, start=2):
        try:
            validated.append(MANIFEST_ROW_SCHEMA.validate(dict(row)))
        except SchemaError as err:
            raise FormatError(f"line {line_number}: {err}", path=manifest_path) from err
    return validated


def read_dataset(data_dir: str, embedder: Optional[TextEmbedder] = None) -> PairedDataset:
    dataset = PairedDataset()
    seen = set()
    for row in read_manifest(data_dir):
        if row["slide_id"] in seen:
            raise DataError(f"duplicate slide id {row['slide_id']} in {data_dir}")
        seen.add(row["slide_id"])
        patches = read_patches(os.path.join(data_dir, row["path"]))
        dataset.samples.append(
            PairedSample(
                slide_id=row["slide_id"],
                label=row["label"] or None,
                report=row["report"],
                patches=patches,
            )
        )
    if not dataset.samples:
        raise DataError(f"dataset {data_dir} is empty")
    dims = {s.patches.dim for s in dataset.samples}
    if len(dims) != 1:
        raise DataError(f"dataset {data_dir} mixes embedding dims {sorted(dims)}")
    if embedder is not None:
        embed_reports(dataset, embedder)
    logging.info("Loaded %d slides from %s", len(dataset), data_dir)
    return dataset


def embed_reports(dataset: PairedDataset, embedder: TextEmbedder) -> None:
    """Fills in raw text vectors for every sample with a non-empty report."""
    if embedder.dim != dataset.dim:
        raise DataError(f"text embedder dim {embedder.dim} != patch embedding dim {dataset.dim}")
    for sample in dataset.samples:
        if sample.report.strip():
            sample.text_vector = np.asarray(embedder(sample.report), dtype=np.float64)
