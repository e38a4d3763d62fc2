"""On-disk formats: embedding tables (CSV and binary), similarity files, reports.

Text embeddings are CSV with header ``id,label,e0,...,e{d-1}`` (UTF-8, string
ids, nonnegative integer labels, decimal float coordinates). Binary embeddings
are magic ``OBSD``, version u16 LE, u32 n, u32 d, n*d float32 LE row-major,
then n uint32 labels. Readers skip leading ``#`` comment lines in CSVs; CSV
artifacts written by the CLI carry a ``# config_hash=...`` first line. All
writes go through a temp file + rename.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"OBSD"
BINARY_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


@dataclass(frozen=True)
class EmbeddingTable:
    """Raw embedding rows as stored on disk (not necessarily unit-norm)."""

    ids: list[str]
    labels: np.ndarray
    vectors: np.ndarray

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _expected_header(dim: int) -> list[str]:
    return ["id", "label"] + [f"e{i}" for i in range(dim)]


def write_embeddings_csv(
    path: str | Path, table: EmbeddingTable, config_hash: str | None = None
) -> None:
    lines = []
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    lines.append(",".join(_expected_header(table.dim)))
    for sid, label, row in zip(table.ids, table.labels, table.vectors):
        coords = ",".join(repr(float(x)) for x in row)
        lines.append(f"{sid},{int(label)},{coords}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_embeddings_csv(path: str | Path) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as handle:
        rows = [r for r in csv.reader(line for line in handle if not line.startswith("#")) if r]
    if not rows:
        raise FormatError(f"{path}: empty embedding file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "id" or header[1] != "label":
        raise FormatError(f"{path}: header must start with id,label,e0,...")
    dim = len(header) - 2
    if header[2:] != [f"e{i}" for i in range(dim)]:
        raise FormatError(f"{path}: coordinate columns must be e0,...,e{dim - 1}")
    ids, labels, vectors = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        try:
            label = int(row[1])
            coords = [float(x) for x in row[2:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if label < 0:
            raise FormatError(f"{path}:{lineno}: label must be nonnegative")
        labels.append(label)
        vectors.append(coords)
    return EmbeddingTable(
        ids=ids, labels=np.asarray(labels, dtype=np.int64), vectors=np.asarray(vectors, dtype=np.float64)
    )


def write_embeddings_binary(path: str | Path, table: EmbeddingTable) -> None:
    labels = np.asarray(table.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint32).max:
        raise FormatError("labels must fit in uint32")
    n, d = table.vectors.shape
    payload = bytearray()
    payload += BINARY_MAGIC
    payload += struct.pack("<HII", BINARY_VERSION, n, d)
    payload += table.vectors.astype("<f4").tobytes(order="C")
    payload += labels.astype("<u4").tobytes()
    atomic_write_bytes(path, bytes(payload))


def read_embeddings_binary(path: str | Path) -> EmbeddingTable:
    blob = Path(path).read_bytes()
    head = len(BINARY_MAGIC) + struct.calcsize("<HII")
    if len(blob) < head or blob[:4] != BINARY_MAGIC:
        raise FormatError(f"{path}: not a {BINARY_MAGIC.decode()} embedding file")
    version, n, d = struct.unpack_from("<HII", blob, 4)
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = head + 4 * n * d + 4 * n
    if len(blob) < need:
        raise FormatError(f"{path}: truncated payload (need {need} bytes, have {len(blob)})")
    vectors = np.frombuffer(blob, dtype="<f4", count=n * d, offset=head).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=head + 4 * n * d)
    return EmbeddingTable(
        ids=[str(i) for i in range(n)],
        labels=labels.astype(np.int64),
        vectors=vectors.astype(np.float64),
    )


def read_embeddings_auto(path: str | Path) -> EmbeddingTable:
    """Dispatch on the binary magic; anything else is parsed as CSV."""
    with open(path, "rb") as handle:
        magic = handle.read(4)
    if magic == BINARY_MAGIC:
        return read_embeddings_binary(path)
    return read_embeddings_csv(path)


def write_similarity_csv(
    path: str | Path,
    blocks: list[tuple[int, np.ndarray, np.ndarray]],
    config_hash: str,
) -> None:
    """Long-form refined similarities: one (batch, i, j, value) row per pair.

    `blocks` holds (batch_index, global_row_indices, matrix) triples; i and j
    are row indices of the input embedding file.
    """
    lines = [f"# config_hash={config_hash}", "batch,i,j,value"]
    for batch_index, indices, matrix in blocks:
        for a, gi in enumerate(indices):
            row = matrix[a]
            for b, gj in enumerate(indices):
                lines.append(f"{batch_index},{int(gi)},{int(gj)},{float(row[b])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_similarity_csv(path: str | Path) -> dict[tuple[int, int], float]:
    """Refined similarities keyed by (i, j); later blocks overwrite earlier ones."""
    out: dict[tuple[int, int], float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        rows = [r for r in csv.reader(line for line in handle if not line.startswith("#")) if r]
    if not rows or rows[0] != ["batch", "i", "j", "value"]:
        raise FormatError(f"{path}: expected header batch,i,j,value")
    for row in rows[1:]:
        out[(int(row[1]), int(row[2]))] = float(row[3])
    return out


def write_neighbors_csv(
    path: str | Path, neighbors: list[tuple[int, list[tuple[int, float]]]], config_hash: str
) -> None:
    """Re-ranked neighbor lists: row index, rank (1-based), neighbor index, score."""
    lines = [f"# config_hash={config_hash}", "i,rank,neighbor,score"]
    for i, ranked in neighbors:
        for rank, (j, score) in enumerate(ranked, start=1):
            lines.append(f"{int(i)},{rank},{int(j)},{float(score)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path: str | Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
