"""PSIX index files.

Little-endian layout:

    header   magic "PSIX", u32 version, u32 m, u32 dim, u8 float_width, u64 record_count
    labels   u32 count, then count x (u16 length, UTF-8 name)
    record   u16 id length, UTF-8 id, u16 label (0xFFFF = none),
             m x ceil(dim/8) mosaic bytes, dim x float_width semantic values,
             u8 text flag, [dim x float_width text values]
"""

import logging
import struct
from typing import Optional, Tuple

import numpy as np

from slide_search_tool.constants import NO_LABEL, PSIX_MAGIC, PSIX_VERSION, VALID_FLOAT_WIDTHS
from slide_search_tool.core import BinaryMosaicCode, SemanticVector, SlideRecord, bytes_per_code
from slide_search_tool.errors import DataError, FormatError, SlideSearchError
from slide_search_tool.index import RetrievalIndex

HEADER = struct.Struct("<4sIIIBQ")
U8 = struct.Struct("<B")
U16 = struct.Struct("<H")
U32 = struct.Struct("<I")
FLOAT_DTYPES = {4: "<f4", 8: "<f8"}


def mosaic_block_bytes(m: int, dim: int) -> int:
    return m * bytes_per_code(dim)


def semantic_block_bytes(dim: int, float_width: int) -> int:
    return dim * float_width


def _encode_string(value: str, what: str) -> bytes:
    encoded = value.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise DataError(f"{what} {value[:32]!r}... is longer than 65535 bytes")
    return U16.pack(len(encoded)) + encoded


def _encode_vector(vector: SemanticVector, float_width: int) -> bytes:
    return vector.values.astype(FLOAT_DTYPES[float_width]).tobytes()


def index_to_bytes(index: RetrievalIndex) -> bytes:
    parts = [
        HEADER.pack(PSIX_MAGIC, PSIX_VERSION, index.m, index.dim, index.float_width, len(index)),
        U32.pack(len(index.label_names)),
    ]
    parts.extend(_encode_string(name, "label") for name in index.label_names)
    for record in index.records:
        parts.append(_encode_string(record.slide_id, "slide id"))
        parts.append(U16.pack(NO_LABEL if record.label is None else record.label))
        parts.append(record.mosaic_code.to_bytes())
        parts.append(_encode_vector(record.semantic, index.float_width))
        if record.text_semantic is None:
            parts.append(U8.pack(0))
        else:
            parts.append(U8.pack(1))
            parts.append(_encode_vector(record.text_semantic, index.float_width))
    return b"".join(parts)


def save_index(index: RetrievalIndex, path: str) -> None:
    with open(path, "wb") as index_file:
        index_file.write(index_to_bytes(index))
    logging.info("Wrote %d records to %s", len(index), path)


class _Reader:
    def __init__(self, raw: bytes, path: Optional[str]):
        self.raw = raw
        self.path = path
        self.offset = 0

    def error(self, message: str, offset: Optional[int] = None) -> FormatError:
        position = self.offset if offset is None else offset
        return FormatError(message, path=self.path, offset=position)

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.raw):
            raise self.error(
                f"truncated {what}: need {size} bytes, {len(self.raw) - self.offset} left"
            )
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> Tuple:
        return layout.unpack(self.take(layout.size, what))

    def string(self, what: str) -> str:
        (length,) = self.unpack(U16, f"{what} length")
        start = self.offset
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as err:
            raise self.error(f"{what} is not valid UTF-8", offset=start) from err

    def vector(self, dim: int, float_width: int, what: str) -> SemanticVector:
        start = self.offset
        values = np.frombuffer(
            self.take(dim * float_width, what), dtype=FLOAT_DTYPES[float_width]
        ).astype(np.float64)
        try:
            return SemanticVector(values)
        except SlideSearchError as err:
            raise self.error(f"invalid {what}: {err}", offset=start) from err


def index_from_bytes(raw: bytes, path: Optional[str] = None) -> RetrievalIndex:
    reader = _Reader(raw, path)
    magic, version, m, dim, float_width, record_count = reader.unpack(HEADER, "header")
    if magic != PSIX_MAGIC:
        raise reader.error(f"bad magic {magic!r}", offset=0)
    if version != PSIX_VERSION:
        raise reader.error(f"unsupported PSIX version {version}", offset=4)
    if m < 1 or dim < 1:
        raise reader.error(f"invalid shape m={m} dim={dim}", offset=8)
    if float_width not in VALID_FLOAT_WIDTHS:
        raise reader.error(f"invalid float width {float_width}", offset=16)

    (label_count,) = reader.unpack(U32, "label count")
    labels = [reader.string("label name") for _ in range(label_count)]
    index = RetrievalIndex(m, dim, float_width=float_width)
    for name in labels:
        index.label_names.append(name)

    code_bytes = mosaic_block_bytes(m, dim)
    for _ in range(record_count):
        record_start = reader.offset
        slide_id = reader.string("slide id")
        (label,) = reader.unpack(U16, "label")
        if label != NO_LABEL and label >= label_count:
            raise reader.error(f"label id {label} outside label table", offset=reader.offset - 2)
        code_start = reader.offset
        code_block = reader.take(code_bytes, "mosaic block")
        try:
            code = BinaryMosaicCode.from_bytes(code_block, m, dim)
        except SlideSearchError as err:
            raise reader.error(f"invalid mosaic block: {err}", offset=code_start) from err
        semantic = reader.vector(dim, float_width, "semantic block")
        (flag,) = reader.unpack(U8, "text flag")
        if flag not in (0, 1):
            raise reader.error(f"invalid text flag {flag}", offset=reader.offset - 1)
        text = reader.vector(dim, float_width, "text block") if flag else None
        try:
            index.append(
                SlideRecord(
                    slide_id=slide_id,
                    label=None if label == NO_LABEL else label,
                    mosaic_code=code,
                    semantic=semantic,
                    text_semantic=text,
                )
            )
        except SlideSearchError as err:
            raise reader.error(str(err), offset=record_start) from err
    if reader.offset != len(raw):
        raise reader.error(f"{len(raw) - reader.offset} trailing bytes after last record")
    return index


def load_index(path: str) -> RetrievalIndex:
    try:
        with open(path, "rb") as index_file:
            raw = index_file.read()
    except FileNotFoundError as err:
        raise DataError(f"index file not found: {path}") from err
    index = index_from_bytes(raw, path)
    logging.info("Loaded %d records from %s", len(index), path)
    return index
