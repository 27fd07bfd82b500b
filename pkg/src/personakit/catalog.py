"""Product-embedding catalog and its binary container.

Layout (little-endian): magic "SPCAT1", u32 embedding dimension, u64 row
count, then per row a u32-length-prefixed UTF-8 product id followed by the
embedding as 32-bit floats.
"""

from __future__ import annotations

import struct
from typing import IO

import numpy as np

from .errors import FormatError

CATALOG_MAGIC = b"SPCAT1"


class ProductCatalog:
    def __init__(self, product_ids: list[str], embeddings: np.ndarray):
        if embeddings.ndim != 2 or len(product_ids) != embeddings.shape[0]:
            raise FormatError("catalog ids and embedding rows must align")
        self.product_ids = list(product_ids)
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
        self._index = {pid: i for i, pid in enumerate(self.product_ids)}

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.product_ids)

    def lookup(self, product_id: str) -> np.ndarray | None:
        row = self._index.get(product_id)
        if row is None:
            return None
        return self.embeddings[row]

    def write(self, fh: IO[bytes]) -> None:
        fh.write(CATALOG_MAGIC)
        fh.write(struct.pack("<IQ", self.dim, len(self.product_ids)))
        for pid, vec in zip(self.product_ids, self.embeddings):
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())

    @classmethod
    def read(cls, fh: IO[bytes]) -> "ProductCatalog":
        magic = fh.read(len(CATALOG_MAGIC))
        if magic != CATALOG_MAGIC:
            raise FormatError(f"bad catalog magic {magic!r}")
        dim, rows = struct.unpack("<IQ", _read_exact(fh, 12))
        ids = []
        matrix = np.empty((rows, dim), dtype=np.float32)
        for i in range(rows):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4))
            ids.append(_read_exact(fh, id_len).decode("utf-8"))
            matrix[i] = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
        return cls(ids, matrix)


def _read_exact(fh: IO[bytes], n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated catalog file")
    return data
