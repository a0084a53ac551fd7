"""Residual vector quantization.

Codes are integer vectors with one index per level, level 0 the coarsest.
Encoding is greedy: each level quantizes the residual left by the levels
before it, ties going to the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import formats
from .errors import CorruptCode, InsufficientData, InvalidConfig, InvalidSignal, ShapeMismatch

# Defaults surfaced through the run config.
PAPER_LEVELS = 72
PAPER_DIM = 512
PAPER_CODES = 1024
TOY_CODES = 64

_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True, eq=False)
class CodebookSet:
    codewords: np.ndarray  # (L, K, D)

    def __post_init__(self):
        cw = np.ascontiguousarray(self.codewords, dtype=np.float32)
        if cw.ndim != 3:
            raise ShapeMismatch(f"codewords must be (L, K, D), got {cw.shape}")
        L, K, _ = cw.shape
        if L < 1 or K < 2:
            raise InvalidConfig("need at least one level and two codewords per level")
        if not np.all(np.isfinite(cw)):
            raise InvalidSignal("codebook contains non-finite values")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)

    @property
    def levels(self) -> int:
        return self.codewords.shape[0]

    @property
    def entries(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]

    def save(self, path) -> None:
        Path(path).write_bytes(formats.pack_codebooks(self.codewords))

    @classmethod
    def load(cls, path) -> "CodebookSet":
        return cls(formats.unpack_codebooks(formats._read(path)))


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact squared distances (N, K), computed from differences in float64."""
    n, k = x.shape[0], centers.shape[0]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMENTS // max(1, k * x.shape[1]))
    c = centers.astype(np.float64)
    for i in range(0, n, step):
        diff = x[i : i + step, None, :] - c[None, :, :]
        out[i : i + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center for every row; ties go to the lowest index."""
    return np.argmin(_sq_dists(np.asarray(x, dtype=np.float64), centers), axis=1)


def _check_vectors(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeMismatch(f"expected vectors of dimension {dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidSignal("input vectors contain NaN or Inf")
    return arr, single


def _check_codes(code, books: CodebookSet) -> tuple[np.ndarray, bool]:
    arr = np.asarray(code)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] > books.levels:
        raise CorruptCode(f"code has {arr.shape[1]} levels, codebooks have {books.levels}")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= books.entries):
        raise CorruptCode(f"code indices must be integers in [0, {books.entries})")
    return arr.astype(np.int64), single


def rvq_encode(x, books: CodebookSet, committed=None) -> np.ndarray:
    """Greedy residual quantization of one vector ``(D,)`` or a batch ``(N, D)``.

    ``committed`` fixes the first ``u`` levels: their codewords are subtracted
    before the search and only levels ``u..L-1`` are chosen greedily.
    """
    arr, single = _check_vectors(x, books.dim)
    n = arr.shape[0]
    codes = np.zeros((n, books.levels), dtype=np.int64)
    residual = arr.copy()
    start = 0
    if committed is not None:
        fixed, _ = _check_codes(committed, books)
        fixed = np.broadcast_to(fixed, (n, fixed.shape[1]))
        start = fixed.shape[1]
        codes[:, :start] = fixed
        for level in range(start):
            residual -= books.codewords[level][fixed[:, level]]
    for level in range(start, books.levels):
        book = books.codewords[level]
        idx = nearest(residual, book)
        codes[:, level] = idx
        residual -= book[idx]
    return codes[0] if single else codes


def rvq_decode(code, books: CodebookSet, up_to_level: int | None = None) -> np.ndarray:
    """Sum of the selected codewords over levels ``< up_to_level`` (default: all)."""
    arr, single = _check_codes(code, books)
    levels = arr.shape[1] if up_to_level is None else int(up_to_level)
    if not 1 <= levels <= arr.shape[1]:
        raise InvalidConfig(f"up_to_level must be in [1, {arr.shape[1]}], got {up_to_level}")
    out = np.zeros((arr.shape[0], books.dim))
    for level in range(levels):
        out += books.codewords[level][arr[:, level]]
    out = out.astype(np.float32)
    return out[0] if single else out


def cumulative_embeddings(codes, books: CodebookSet) -> np.ndarray:
    """Partial sums for every depth: ``out[..., l, :] == rvq_decode(code, books, l + 1)``."""
    arr, single = _check_codes(codes, books)
    parts = np.stack([books.codewords[l][arr[:, l]] for l in range(arr.shape[1])], axis=1)
    out = np.cumsum(parts.astype(np.float64), axis=1).astype(np.float32)
    return out[0] if single else out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[min(np.searchsorted(np.cumsum(closest), rng.random() * total), n - 1)]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])
    return centers


def kmeans(x: np.ndarray, k: int, iterations: int, rng: np.random.Generator):
    """Lloyd's algorithm with k-means++ seeding.

    Clusters that lose all their points are moved onto the points farthest from
    their current centers. Returns ``(centers, mse_history)``; the history holds
    the assignment MSE before each update and is non-increasing.
    """
    centers = _kmeans_pp(x, k, rng)
    history = []
    for _ in range(max(1, iterations)):
        d = _sq_dists(x, centers)
        assign = np.argmin(d, axis=1)
        err = d[np.arange(x.shape[0]), assign]
        history.append(float(err.mean()))
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        dead = np.flatnonzero(~live)
        if dead.size:
            far = np.argsort(-err, kind="stable")[: dead.size]
            centers[dead] = x[far]
    d = _sq_dists(x, centers)
    history.append(float(d.min(axis=1).mean()))
    return centers, history


def _separate_duplicates(book: np.ndarray, scale: float) -> np.ndarray:
    book = book.copy()
    _, first = np.unique(book, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(book.shape[0]), first)
    eps = 1e-3 * max(scale, 1.0)
    for n, j in enumerate(dup, start=1):
        book[j, n % book.shape[1]] += eps * n
    return book


def train_codebooks(samples, levels: int, entries: int, iterations: int = 25, seed: int = 0):
    """Fit codebooks level by level with k-means on the running residual.

    Returns ``(CodebookSet, history)`` where ``history[l]`` is the per-iteration
    MSE of level ``l``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("samples must be an (N, D) array")
    if x.shape[0] < entries:
        raise InsufficientData(f"need at least {entries} samples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InvalidSignal("training samples contain NaN or Inf")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    books, history = [], []
    scale = float(np.abs(x).max()) if x.size else 1.0
    for _ in range(levels):
        centers, hist = kmeans(residual, entries, iterations, rng)
        centers = _separate_duplicates(centers.astype(np.float32).astype(np.float64), scale)
        residual -= centers[nearest(residual, centers)]
        books.append(centers)
        history.append(hist)
    return CodebookSet(np.stack(books)), history


class ResidualVectorQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns codebooks, ``transform`` returns codes.

    >>> q = ResidualVectorQuantizer(n_levels=2, n_codes=4).fit(X)   # doctest: +SKIP
    >>> codes = q.transform(X)                                       # doctest: +SKIP
    >>> X_hat = q.inverse_transform(codes)                           # doctest: +SKIP
    """

    def __init__(self, n_levels=8, n_codes=TOY_CODES, n_iter=25, random_state=0):
        self.n_levels = n_levels
        self.n_codes = n_codes
        self.n_iter = n_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        self.codebooks_, self.history_ = train_codebooks(
            X, self.n_levels, self.n_codes, self.n_iter, self.random_state
        )
        self.n_features_in_ = self.codebooks_.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        return rvq_encode(np.atleast_2d(X), self.codebooks_)

    def inverse_transform(self, codes, up_to_level=None):
        check_is_fitted(self, "codebooks_")
        return rvq_decode(np.atleast_2d(codes), self.codebooks_, up_to_level)

    def score(self, X, y=None):
        """Negative mean squared reconstruction error."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return -float(np.mean((X - self.inverse_transform(self.transform(X))) ** 2))

    @classmethod
    def from_codebooks(cls, books: CodebookSet) -> "ResidualVectorQuantizer":
        q = cls(n_levels=books.levels, n_codes=books.entries)
        q.codebooks_, q.history_ = books, []
        q.n_features_in_ = books.dim
        return q
