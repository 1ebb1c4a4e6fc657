"""Memory bank of unit-norm target embeddings.

Stores one running-average vector per target sample, updated with momentum
and re-normalized after every update so cosine similarity against the bank
is always a plain dot product. Serves exact cosine k-NN queries.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

BANK_MAGIC = b"CMPL"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIQQd")  # magic, version u32, n u64, d u64, momentum f64


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("degenerate embedding: zero vector cannot be normalized")
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("degenerate embedding: zero row cannot be normalized")
    return x / norms[:, None]


class MemoryBank:
    """Fixed-size table of unit vectors with momentum updates.

    Args:
        vectors: (n, d) initial entries; rows are normalized on construction.
        momentum: blend weight of the incoming embedding in (0, 1].
    """

    def __init__(self, vectors: np.ndarray, momentum: float = 0.5):
        vectors = np.array(vectors, dtype=np.float64)  # bank owns its storage
        if vectors.ndim != 2:
            raise ValueError("bank entries must form a 2-D array")
        if vectors.shape[1] < 2:
            raise ValueError("embedding dimension must be at least 2")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("bank entries must be finite")
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        self.vectors = l2_normalize_rows(vectors)
        self.momentum = float(momentum)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def update(self, i: int, f: np.ndarray) -> np.ndarray:
        """Blend entry i with embedding f and re-normalize. Returns the new entry."""
        if not 0 <= i < self.size:
            raise IndexError(f"bank index {i} out of range [0, {self.size})")
        f = np.asarray(f, dtype=np.float64)
        blended = (1.0 - self.momentum) * self.vectors[i] + self.momentum * f
        self.vectors[i] = l2_normalize(blended)
        return self.vectors[i]

    def similarities(self, query: np.ndarray) -> np.ndarray:
        return self.vectors @ np.asarray(query, dtype=np.float64)

    def knn(self, query: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k entries with the largest dot products, descending.

        Ties resolve to the smaller index (stable sort on the negated scores).
        """
        if not 1 <= k <= self.size:
            raise ValueError(f"k must lie in [1, {self.size}], got {k}")
        sims = self.similarities(query)
        order = np.argsort(-sims, kind="stable")
        return order[:k]

    def save(self, path) -> None:
        write_bank_file(path, self.vectors, self.momentum)

    @classmethod
    def from_unit_rows(cls, vectors: np.ndarray, momentum: float) -> "MemoryBank":
        """Restore a bank from rows that are already unit, preserving their
        exact bytes so save/load and checkpoint resume round-trip bit-exactly."""
        vectors = np.array(vectors, dtype=np.float64)
        bank = cls(vectors, momentum)
        if np.max(np.abs(np.linalg.norm(vectors, axis=1) - 1.0)) <= 1e-6:
            bank.vectors = vectors
        return bank

    @classmethod
    def load(cls, path) -> "MemoryBank":
        vectors, momentum = read_bank_file(path)
        return cls.from_unit_rows(vectors, momentum)


def write_bank_file(path, vectors: np.ndarray, momentum: float = 1.0) -> None:
    """Binary layout: header (magic, version, n, d, momentum) + row-major f64."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    n, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, n, d, float(momentum)))
        fh.write(vectors.tobytes())


def read_bank_file(path) -> tuple[np.ndarray, float]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read bank file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated bank file {path}")
    magic, version, n, d, momentum = _HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise DataError(f"{path} is not a bank file (bad magic)")
    if version != BANK_VERSION:
        raise DataError(f"unsupported bank file version {version}")
    expected = _HEADER.size + 8 * n * d
    if len(raw) != expected:
        raise DataError(f"truncated bank file {path}: {len(raw)} bytes, expected {expected}")
    vectors = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, d).copy()
    return vectors, momentum
