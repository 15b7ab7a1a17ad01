"""Sparse count matrices: TSV ingestion, validation and held-out splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "MatrixFormatError",
    "SparseCountMatrix",
    "HeldOutSplit",
    "load_matrix",
    "save_matrix",
    "read_dictionary",
    "make_heldout_split",
]


class MatrixFormatError(ValueError):
    """Raised for malformed count files; carries the offending line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass
class SparseCountMatrix:
    """Nonnegative integer matrix stored as nonzero (row, col, count) triplets.

    Entries are kept sorted by (row, col). ``indptr`` gives, CSR style, the
    slice of entries belonging to each row.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray
    indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        counts = np.asarray(self.counts, dtype=np.int64).ravel()
        if not (rows.size == cols.size == counts.size):
            raise ValueError("rows, cols and counts must have equal length")
        if np.any(counts <= 0):
            raise ValueError("stored counts must be positive")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_rows
                          or cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("index out of bounds")
        order = np.lexsort((cols, rows))
        rows, cols, counts = rows[order], cols[order], counts[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                i = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate cell ({rows[i]}, {cols[i]})")
        self.rows, self.cols, self.counts = rows, cols, counts
        self.indptr = np.searchsorted(rows, np.arange(self.n_rows + 1))

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @property
    def nnz(self) -> int:
        return int(self.counts.size)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int64)
        out[self.rows, self.cols] = self.counts
        return out

    def row_totals(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.counts, minlength=self.n_rows).astype(np.int64)

    def row_entries(self, u):
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.cols[lo:hi], self.counts[lo:hi]

    def select_rows(self, row_ids) -> "SparseCountMatrix":
        """Submatrix of the given rows, renumbered 0..len(row_ids)-1 in order."""
        row_ids = np.asarray(row_ids, dtype=np.int64)
        pieces = [np.arange(self.indptr[u], self.indptr[u + 1]) for u in row_ids]
        idx = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
        new_rows = np.repeat(np.arange(row_ids.size), [p.size for p in pieces]) if pieces \
            else np.zeros(0, dtype=np.int64)
        return SparseCountMatrix(row_ids.size, self.n_cols, new_rows, self.cols[idx], self.counts[idx])

    def __eq__(self, other):
        if not isinstance(other, SparseCountMatrix):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.counts, other.counts))


@dataclass
class HeldOutSplit:
    """Training rows plus the observed/test halves of the held-out rows.

    ``heldout_obs`` and ``heldout_test`` share row numbering: row j of each
    is original row ``heldout_row_ids[j]``. ``train_row_ids`` maps the rows
    of ``train`` back to the original matrix.
    """

    train: SparseCountMatrix
    heldout_obs: SparseCountMatrix
    heldout_test: SparseCountMatrix
    heldout_row_ids: np.ndarray
    train_row_ids: np.ndarray


# ---------------------------------------------------------------------------
# file IO


def _parse_field(token, lineno, what, id_mode, table):
    if id_mode == "dense":
        try:
            value = int(token)
        except ValueError:
            raise MatrixFormatError(f"{what} index {token!r} is not an integer", lineno) from None
        if value < 0:
            raise MatrixFormatError(f"negative {what} index {value}", lineno)
        return value
    return table.setdefault(token, len(table))


def load_matrix(path, id_mode="dense", n_rows=None, n_cols=None, dictionary_prefix=None):
    """Read a ``row<TAB>col<TAB>count`` file into a :class:`SparseCountMatrix`.

    Lines starting with ``#`` and blank lines are skipped. Fields may be
    separated by tabs or runs of whitespace. With ``id_mode="dense"`` the
    row/column fields are 0-based integers; with ``id_mode="dictionary"``
    they are arbitrary strings numbered in order of first appearance, and
    ``<prefix>.rows.tsv`` / ``<prefix>.cols.tsv`` dictionaries are written
    next to the input (or at ``dictionary_prefix``).

    ``n_rows``/``n_cols`` override the inferred dimensions; an empty file
    needs both.
    """
    if id_mode not in ("dense", "dictionary"):
        raise ValueError(f"unknown id_mode {id_mode!r}")
    path = Path(path)
    row_table, col_table = {}, {}
    rows, cols, counts = [], [], []
    seen = {}
    declared = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if text.startswith("#"):
                meta = text[1:].strip().split("\t")
                if meta[0] == "shape" and len(meta) == 3:
                    declared = (int(meta[1]), int(meta[2]))
                continue
            if not text:
                continue
            parts = text.split("\t") if "\t" in text else text.split()
            if len(parts) != 3:
                raise MatrixFormatError(f"expected 3 fields, found {len(parts)}", lineno)
            r = _parse_field(parts[0].strip(), lineno, "row", id_mode, row_table)
            c = _parse_field(parts[1].strip(), lineno, "column", id_mode, col_table)
            try:
                y = int(parts[2])
            except ValueError:
                raise MatrixFormatError(f"count {parts[2]!r} is not an integer", lineno) from None
            if y <= 0:
                raise MatrixFormatError(f"count must be positive, got {y}", lineno)
            if (r, c) in seen:
                raise MatrixFormatError(
                    f"duplicate cell ({parts[0]}, {parts[1]}), first seen on line {seen[(r, c)]}", lineno)
            seen[(r, c)] = lineno
            rows.append(r)
            cols.append(c)
            counts.append(y)

    if id_mode == "dense":
        inferred_rows = max(rows) + 1 if rows else None
        inferred_cols = max(cols) + 1 if cols else None
    else:
        inferred_rows = len(row_table) if rows else None
        inferred_cols = len(col_table) if cols else None
    if declared is not None:
        inferred_rows, inferred_cols = (max(declared[0], inferred_rows or 0),
                                        max(declared[1], inferred_cols or 0))
    n_rows = n_rows if n_rows is not None else inferred_rows
    n_cols = n_cols if n_cols is not None else inferred_cols
    if n_rows is None or n_cols is None:
        raise MatrixFormatError(f"{path} holds no entries and no dimensions were given")
    if rows and (max(rows) >= n_rows or max(cols) >= n_cols):
        raise MatrixFormatError(f"entries exceed the declared shape ({n_rows}, {n_cols})")

    m = SparseCountMatrix(n_rows, n_cols, np.array(rows, dtype=np.int64),
                          np.array(cols, dtype=np.int64), np.array(counts, dtype=np.int64))
    if id_mode == "dictionary":
        prefix = Path(dictionary_prefix) if dictionary_prefix else path.with_suffix("")
        _write_dictionary(Path(f"{prefix}.rows.tsv"), row_table)
        _write_dictionary(Path(f"{prefix}.cols.tsv"), col_table)
    logger.info("loaded %s: %d x %d, %d nonzeros", path, n_rows, n_cols, m.nnz)
    return m


def _write_dictionary(path, table):
    with open(path, "w", encoding="utf-8") as fh:
        for key, idx in sorted(table.items(), key=lambda kv: kv[1]):
            fh.write(f"{idx}\t{key}\n")


def read_dictionary(path):
    """Read an ``index<TAB>original_id`` file into a list indexed by position."""
    ids = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            idx, _, name = line.partition("\t")
            try:
                ids[int(idx)] = name
            except ValueError:
                raise MatrixFormatError(f"bad dictionary index {idx!r}", lineno) from None
    return [ids[i] for i in range(len(ids))]


def save_matrix(m: SparseCountMatrix, path, header=None):
    """Write ``m`` as TSV triplets; ``header`` lines are emitted as ``#`` comments."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header or ():
            fh.write(f"# {line}\n")
        fh.write(f"# shape\t{m.n_rows}\t{m.n_cols}\n")
        for r, c, y in zip(m.rows.tolist(), m.cols.tolist(), m.counts.tolist()):
            fh.write(f"{r}\t{c}\t{y}\n")


# ---------------------------------------------------------------------------
# splitting


def _thin_row(counts, obs_fraction, rng, max_retries):
    """Binomially thin each cell; retry until at least one event is left for test."""
    total = counts.sum()
    if total <= 1:
        return np.zeros_like(counts)
    for _ in range(max_retries):
        obs = rng.binomial(counts, obs_fraction)
        if obs.sum() < total:
            return obs
    # vanishingly rare; keep everything for test rather than loop forever
    return np.zeros_like(counts)


def make_heldout_split(m: SparseCountMatrix, n_heldout_rows=1000, obs_fraction=0.10, seed=None,
                       exclude_rows=None, max_retries=100) -> HeldOutSplit:
    """Hold out rows and split their count events into observed and test parts.

    Held-out rows are drawn uniformly without replacement. Each individual
    count event of a held-out row goes to the observed part with
    probability ``obs_fraction`` and to the test part otherwise. A row whose
    draw leaves no test event is redrawn; a row with a single event goes
    wholly to the test part. Rows with no events at all are never held out.
    """
    if not 0.0 < obs_fraction < 1.0:
        raise ValueError(f"obs_fraction must lie in (0, 1), got {obs_fraction}")
    rng = np.random.default_rng(seed)
    totals = m.row_totals()
    candidates = np.flatnonzero(totals > 0)
    if exclude_rows is not None:
        candidates = np.setdiff1d(candidates, np.asarray(exclude_rows))
    if n_heldout_rows >= m.n_rows or n_heldout_rows > candidates.size:
        raise ValueError(f"cannot hold out {n_heldout_rows} of {m.n_rows} rows "
                         f"({candidates.size} eligible)")
    held = np.sort(rng.choice(candidates, size=n_heldout_rows, replace=False))
    train_ids = np.setdiff1d(np.arange(m.n_rows), held)

    obs_r, obs_c, obs_y = [], [], []
    test_r, test_c, test_y = [], [], []
    for j, u in enumerate(held):
        cols, counts = m.row_entries(u)
        obs = _thin_row(counts, obs_fraction, rng, max_retries)
        test = counts - obs
        keep = obs > 0
        obs_r.append(np.full(keep.sum(), j))
        obs_c.append(cols[keep])
        obs_y.append(obs[keep])
        keep = test > 0
        test_r.append(np.full(keep.sum(), j))
        test_c.append(cols[keep])
        test_y.append(test[keep])

    def build(r, c, y):
        cat = (lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
        return SparseCountMatrix(held.size, m.n_cols, cat(r), cat(c), cat(y))

    return HeldOutSplit(train=m.select_rows(train_ids),
                        heldout_obs=build(obs_r, obs_c, obs_y),
                        heldout_test=build(test_r, test_c, test_y),
                        heldout_row_ids=held, train_row_ids=train_ids)
