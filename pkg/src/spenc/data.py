"""Count matrices, dataset normalizers, file I/O, and synthetic benchmark data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .rng import make_rng, poisson

EPS_ETA = 1e-6
K_TRUE = 10
FORMATS = ("matrix-market", "csv-dense", "csv-triplet")


class FormatError(ValueError):
    """A matrix file could not be parsed."""


class ValidationError(ValueError):
    """Input data violates a value constraint."""


@dataclass(frozen=True, eq=False)
class CountMatrix:
    """Immutable sparse matrix of non-negative integer counts (users x items)."""

    csr: sp.csr_matrix

    def __post_init__(self):
        m = sp.csr_matrix(self.csr, dtype=np.int64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape[1] < 1:
            raise ValidationError(f"matrix must have at least one column, got {m.shape}")
        if m.nnz and m.data.min() < 0:
            k = int(np.argmin(m.data))
            row = int(np.searchsorted(m.indptr, k, side="right") - 1)
            raise ValidationError(f"negative count at ({row}, {m.indices[k]})")
        m.data.flags.writeable = False
        object.__setattr__(self, "csr", m)

    @classmethod
    def from_dense(cls, arr) -> "CountMatrix":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise ValidationError(f"expected a 2-d array, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            bad = np.argwhere(a != np.round(a))
            if bad.size:
                r, c = bad[0]
                raise ValidationError(f"non-integer count at ({r}, {c})")
        return cls(sp.csr_matrix(a.astype(np.int64)))

    @classmethod
    def from_entries(cls, shape: tuple[int, int], entries: dict[tuple[int, int], int]) -> "CountMatrix":
        rows = [r for r, _ in entries]
        cols = [c for _, c in entries]
        vals = list(entries.values())
        return cls(sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.int64))

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def entries(self) -> dict[tuple[int, int], int]:
        coo = self.csr.tocoo()
        return {(int(r), int(c)): int(v) for r, c, v in zip(coo.row, coo.col, coo.data)}

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def rows(self, index) -> "CountMatrix":
        return CountMatrix(self.csr[index])

    def total(self) -> int:
        return int(self.csr.sum())

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return self.shape == other.shape and (self.csr != other.csr).nnz == 0


@dataclass(frozen=True)
class ItemMeans:
    eta: np.ndarray


@dataclass(frozen=True)
class UserScales:
    xi: np.ndarray
    mode: str = "unit"


@dataclass
class SyntheticTruth:
    """Ground truth recorded by the synthetic generators."""

    kind: str
    structured_items: list[int]
    noise_rate: float
    true_decoder: np.ndarray | None = None
    true_representations: np.ndarray | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self, include_arrays: bool = False) -> dict:
        out = {
            "kind": self.kind,
            "structured_items": list(self.structured_items),
            "noise_rate": self.noise_rate,
            "seed": self.seed,
        }
        if self.true_decoder is not None:
            out["k_true"] = int(self.true_decoder.shape[0])
            if include_arrays:
                out["true_decoder"] = np.round(self.true_decoder, 9).tolist()
        return out


# ---------------------------------------------------------------------------
# normalizers


def compute_item_means(Y: CountMatrix, eps_eta: float = EPS_ETA) -> ItemMeans:
    """Per-item mean count, clamped below at ``eps_eta``."""
    col_mean = np.asarray(Y.csr.sum(axis=0), dtype=np.float64).ravel() / Y.n_rows
    return ItemMeans(np.maximum(col_mean, eps_eta))


def compute_user_scales(Y: CountMatrix, mode: str = "unit") -> UserScales:
    """User activity scales: all ones, or row sums relative to the mean row sum."""
    if mode == "unit":
        return UserScales(np.ones(Y.n_rows), mode)
    if mode == "overdispersed":
        row_sum = np.asarray(Y.csr.sum(axis=1), dtype=np.float64).ravel()
        total = row_sum.sum()
        if total <= 0:
            raise ValidationError("overdispersed user scales need a matrix with a positive total count")
        return UserScales(Y.n_rows * row_sum / total, mode)
    raise ValueError(f"unknown user-scale mode {mode!r}")


# ---------------------------------------------------------------------------
# I/O


def _parse_int(token: str, lineno: int, row: int, col: int) -> int:
    token = token.strip()
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"line {lineno}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value) or value != int(value):
        raise ValidationError(f"non-integer count {token!r} at ({row}, {col})")
    if value < 0:
        raise ValidationError(f"negative count {token} at ({row}, {col})")
    return int(value)


def _read_mtx(lines: list[str]) -> CountMatrix:
    if not lines:
        raise FormatError("line 1: empty file")
    header = lines[0].split()
    if len(header) < 5 or header[0].lower() != "%%matrixmarket":
        raise FormatError("line 1: missing %%MatrixMarket header")
    if header[1].lower() != "matrix" or header[2].lower() != "coordinate":
        raise FormatError("line 1: only 'matrix coordinate' is supported")
    if header[3].lower() not in ("integer", "real"):
        raise FormatError(f"line 1: unsupported field type {header[3]!r}")
    if header[4].lower() != "general":
        raise FormatError(f"line 1: unsupported symmetry {header[4]!r}")
    it = ((n, ln) for n, ln in enumerate(lines[1:], start=2) if ln.strip() and not ln.startswith("%"))
    try:
        lineno, size_line = next(it)
    except StopIteration:
        raise FormatError(f"line {len(lines) + 1}: missing size line") from None
    try:
        n_rows, n_cols, nnz = (int(t) for t in size_line.split())
    except ValueError:
        raise FormatError(f"line {lineno}: malformed size line {size_line.strip()!r}") from None
    rows, cols, vals = [], [], []
    for lineno, ln in it:
        parts = ln.split()
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 'row col value'")
        try:
            r, c = int(parts[0]) - 1, int(parts[1]) - 1
        except ValueError:
            raise FormatError(f"line {lineno}: bad index") from None
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            raise FormatError(f"line {lineno}: index ({r + 1}, {c + 1}) out of bounds")
        rows.append(r)
        cols.append(c)
        vals.append(_parse_int(parts[2], lineno, r, c))
    if len(vals) != nnz:
        raise FormatError(f"line {len(lines)}: expected {nnz} entries, found {len(vals)}")
    return CountMatrix(sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols), dtype=np.int64))


def _read_dense(lines: list[str]) -> CountMatrix:
    body = [(n, ln) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if not body:
        raise FormatError("line 1: empty file")
    width = None
    data = []
    for lineno, ln in body:
        tokens = ln.split(",")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, found {len(tokens)}")
        r = len(data)
        data.append([_parse_int(t, lineno, r, c) for c, t in enumerate(tokens)])
    return CountMatrix.from_dense(np.array(data, dtype=np.int64))


def _read_triplet(lines: list[str], shape: tuple[int, int] | None) -> CountMatrix:
    if not lines or not lines[0].strip():
        raise FormatError("line 1: empty file")
    if [h.strip() for h in lines[0].split(",")] != ["row", "col", "count"]:
        raise FormatError("line 1: expected header 'row,col,count'")
    rows, cols, vals = [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        parts = ln.split(",")
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields")
        try:
            r, c = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"line {lineno}: bad index") from None
        if r < 0 or c < 0:
            raise FormatError(f"line {lineno}: negative index")
        rows.append(r)
        cols.append(c)
        vals.append(_parse_int(parts[2], lineno, r, c))
    if shape is None:
        if not rows:
            raise FormatError(f"line {len(lines)}: no entries and no shape given")
        shape = (max(rows) + 1, max(cols) + 1)
    return CountMatrix(sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.int64))


def _infer_format(path: Path) -> str:
    if path.suffix == ".mtx":
        return "matrix-market"
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return "csv-triplet" if first.strip().replace(" ", "") == "row,col,count" else "csv-dense"


def load_matrix(path, format: str | None = None, shape: tuple[int, int] | None = None) -> CountMatrix:
    """Read a count matrix from disk.

    ``format`` is one of ``matrix-market``, ``csv-dense`` or ``csv-triplet``
    and is inferred from the extension and first line when omitted.  Triplet
    files carry no dimensions; pass ``shape`` to keep trailing empty rows or
    columns.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if fmt == "matrix-market":
        return _read_mtx(lines)
    if fmt == "csv-dense":
        return _read_dense(lines)
    if fmt == "csv-triplet":
        return _read_triplet(lines, shape)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def save_matrix(Y: CountMatrix, path, format: str = "matrix-market") -> None:
    path = Path(path)
    buf = io.StringIO()
    coo = Y.csr.tocoo()
    if format == "matrix-market":
        buf.write("%%MatrixMarket matrix coordinate integer general\n")
        buf.write(f"{Y.n_rows} {Y.n_cols} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            buf.write(f"{r + 1} {c + 1} {v}\n")
    elif format == "csv-dense":
        for row in Y.toarray():
            buf.write(",".join(str(v) for v in row) + "\n")
    elif format == "csv-triplet":
        buf.write("row,col,count\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            buf.write(f"{r},{c},{v}\n")
    else:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def write_dense_csv(path, arr: np.ndarray, header: Iterable[str] | None = None) -> None:
    """Write a float matrix as CSV with 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(list(header))
        for row in np.atleast_2d(arr):
            w.writerow([format_float(v) for v in row])


def format_float(v: float) -> str:
    return f"{float(v):.9g}"


# ---------------------------------------------------------------------------
# synthetic data


def structured_item_indices(n_items: int) -> list[int]:
    """Every third item, starting at index 2."""
    return list(range(2, n_items, 3))


def gen_poisson_noise(n_users: int, n_items: int, rate: float = 1.0, seed: int = 0):
    """I.i.d. Poisson(rate) counts with no structure."""
    if n_users < 1 or n_items < 1:
        raise ValueError("dimensions must be positive")
    if rate <= 0:
        raise ValueError("rate must be positive")
    rng = make_rng(seed)
    Y = poisson(np.full((n_users, n_items), float(rate)), rng)
    truth = SyntheticTruth("noise", [], float(rate), seed=seed)
    return CountMatrix(sp.csr_matrix(Y)), truth


def _dense_factor_truth(n_users: int, n_structured: int, rng: np.random.Generator):
    decoder = np.abs(rng.normal(0.0, math.sqrt(1.0 / (2 * K_TRUE)), size=(K_TRUE, n_structured)))
    theta = np.abs(rng.normal(0.0, 1.0, size=(n_users, K_TRUE)))
    return decoder, theta


def nonlinear_rate(z):
    """Rate used for structured items of the nonlinear benchmark."""
    z = np.asarray(z, dtype=np.float64)
    return z * np.exp(-z) + z * z


def _gen_structured(kind: str, n_users: int, n_items: int, seed: int):
    if n_items < 3:
        raise ValueError(f"structured generators need at least 3 items, got {n_items}")
    if n_users < 1:
        raise ValueError("dimensions must be positive")
    rng = make_rng(seed)
    structured = structured_item_indices(n_items)
    decoder, theta = _dense_factor_truth(n_users, len(structured), rng)
    linear = theta @ decoder
    rates = np.ones((n_users, n_items))
    if kind == "linear":
        rates[:, structured] = linear
    else:
        rates[:, structured] = nonlinear_rate(linear / 2.0)
    Y = poisson(rates, rng)
    full_decoder = np.zeros((K_TRUE, n_items))
    full_decoder[:, structured] = decoder
    truth = SyntheticTruth(kind, structured, 1.0, full_decoder, theta, seed=seed)
    return CountMatrix(sp.csr_matrix(Y)), truth


def gen_linear_factor(n_users: int, n_items: int, seed: int = 0):
    """Every third item follows a dense 10-factor Poisson model; the rest are Poisson(1)."""
    return _gen_structured("linear", n_users, n_items, seed)


def gen_nonlinear_factor(n_users: int, n_items: int, seed: int = 0):
    """Like :func:`gen_linear_factor` with rate z*exp(-z) + z**2, z = (theta @ B) / 2."""
    return _gen_structured("nonlinear", n_users, n_items, seed)


GENERATORS = {
    "noise": lambda U, I, seed: gen_poisson_noise(U, I, 1.0, seed),
    "linear": gen_linear_factor,
    "nonlinear": gen_nonlinear_factor,
}
