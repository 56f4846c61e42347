"""Symbolic codec: flow records <-> fixed-length symbol sentences.

Every selected feature is mapped onto one shared alphabet of K value
symbols (ids 0..K-1) plus a start symbol (id K) prepended to each row.
Numeric features bin into K intervals, either equal-width over the fitted
range or equal-frequency at empirical order statistics; categorical
features map their K-1 most frequent categories to dedicated symbols and
everything else to one overflow symbol. Encoding is total: out-of-range
values clamp into the edge bins so generated or unseen data always
encodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .ingest import CATEGORICAL, NUMERIC, TIMESTAMP, ColumnSpec, FlowTable

EQUAL_WIDTH = "equalwidth"
EQUAL_FREQUENCY = "equalfreq"
BINNING_MODES = (EQUAL_WIDTH, EQUAL_FREQUENCY)

OVERFLOW_CATEGORY = "OTHER"


@dataclass
class NumericBins:
    edges: np.ndarray  # strictly ascending, len = effective_bins + 1
    source_kind: str = NUMERIC  # Numeric or Timestamp, for decode rendering

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1


@dataclass
class CategoryMap:
    categories: list[str]  # symbol id == list position; overflow shares id K-1


@dataclass
class Codebook:
    features: list[str]  # fixed order; encoding and decoding both use it
    specs: dict[str, NumericBins | CategoryMap]
    k: int
    mode: str

    @property
    def start_symbol(self) -> int:
        return self.k

    @property
    def vocab_size(self) -> int:
        return self.k + 1

    @property
    def sequence_length(self) -> int:
        return len(self.features) + 1

    @property
    def overflow_symbol(self) -> int:
        return self.k - 1


@dataclass
class SymbolDataset:
    """Encoded corpus: one fixed-length symbol sentence per flow record."""

    sequences: np.ndarray  # [n, sequence_length] int64, column 0 is the start symbol
    vocab_size: int

    @property
    def n_sequences(self) -> int:
        return self.sequences.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.sequences.shape[1]


def _equal_width_edges(values: np.ndarray, k: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    edges = lo + (hi - lo) * (np.arange(k + 1) / k)
    edges[0], edges[-1] = lo, hi
    return edges


def _equal_frequency_edges(values: np.ndarray, k: int) -> np.ndarray:
    """Interior edges at order statistics of rank i*n//K.

    On tie-free data this puts floor(n/K) or ceil(n/K) points in every
    bin. Tied edges collapse, shrinking the effective bin count for the
    feature; the symbols beyond it simply go unused.
    """
    srt = np.sort(values)
    n = len(srt)
    cuts = [(i * n) // k for i in range(1, k)]
    edges = np.concatenate([[srt[0]], srt[cuts], [srt[-1]]])
    return np.unique(edges)  # sorted ascending, duplicates collapsed


def fit_codebook(
    table: FlowTable,
    features: list[str],
    k: int = 49,
    mode: str = EQUAL_FREQUENCY,
) -> Codebook:
    """Fit per-feature symbol maps on the given table."""
    if k < 2:
        raise UsageError(f"alphabet size K must be >= 2, got {k}")
    if mode not in BINNING_MODES:
        raise UsageError(f"unknown binning mode {mode!r}; pick one of {BINNING_MODES}")
    if not features:
        raise UsageError("no features selected")
    if len(set(features)) != len(features):
        raise UsageError("duplicate feature names")

    specs: dict[str, NumericBins | CategoryMap] = {}
    table_columns = {c.name: c.kind for c in table.schema}
    for name in features:
        if "\t" in name or "\n" in name:
            raise DataError(f"feature name {name!r} contains tab/newline")
        if name not in table_columns:
            raise DataError(f"unknown feature {name!r}")
        kind = table_columns[name]
        if kind == CATEGORICAL:
            counts: dict[str, int] = {}
            for v in table.categorical_column(name):
                counts[v] = counts.get(v, 0) + 1
            ranked = sorted(counts, key=lambda c: (-counts[c], c))
            specs[name] = CategoryMap(categories=ranked[: k - 1])
        else:
            values = table.numeric_column(name)
            if name in table.flagged_constant or np.all(values == values[0]):
                raise DataError(f"feature {name!r} is constant; exclude it via clean()")
            if mode == EQUAL_WIDTH:
                edges = _equal_width_edges(values, k)
            else:
                edges = _equal_frequency_edges(values, k)
            specs[name] = NumericBins(edges=edges, source_kind=kind)
    return Codebook(features=list(features), specs=specs, k=k, mode=mode)


def encode_numeric_column(values: np.ndarray, bins: NumericBins) -> np.ndarray:
    """Bin ids with out-of-range clamping: encoding never fails."""
    ids = np.searchsorted(bins.edges, values, side="right") - 1
    return np.clip(ids, 0, bins.n_bins - 1).astype(np.int64)


def encode_categorical_column(values: list[str], cmap: CategoryMap, overflow: int) -> np.ndarray:
    lut = {c: i for i, c in enumerate(cmap.categories)}
    return np.array([lut.get(v, overflow) for v in values], dtype=np.int64)


def encode(table: FlowTable, codebook: Codebook) -> SymbolDataset:
    """Each row becomes [start] + one symbol per feature."""
    n = table.n_rows
    cols = [np.full(n, codebook.start_symbol, dtype=np.int64)]
    for name in codebook.features:
        spec = codebook.specs[name]
        if isinstance(spec, NumericBins):
            cols.append(encode_numeric_column(table.numeric_column(name), spec))
        else:
            cols.append(encode_categorical_column(table.categorical_column(name), spec, codebook.overflow_symbol))
    return SymbolDataset(sequences=np.column_stack(cols), vocab_size=codebook.vocab_size)


def decode(data: SymbolDataset | np.ndarray, codebook: Codebook) -> tuple[FlowTable, int]:
    """Map symbol sentences back to flow rows.

    Numeric symbols decode to bin midpoints (ids past a collapsed
    feature's last bin clamp to the top bin); categorical symbols decode
    to their category, with overflow and unassigned ids as "OTHER". The
    start symbol is dropped. Malformed sequences (wrong length, start
    symbol misplaced, id >= K in a value position) are skipped and
    counted.
    """
    seqs = data.sequences if isinstance(data, SymbolDataset) else np.asarray(data)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    want_len = codebook.sequence_length
    if seqs.shape[1] != want_len:
        # every sequence has the wrong length; all skipped
        return _empty_decoded(codebook), seqs.shape[0]

    start_ok = seqs[:, 0] == codebook.start_symbol
    values_ok = np.all((seqs[:, 1:] >= 0) & (seqs[:, 1:] < codebook.k), axis=1)
    keep = start_ok & values_ok
    skipped = int((~keep).sum())
    kept = seqs[keep]

    schema: list[ColumnSpec] = []
    numeric_cols: list[np.ndarray] = []
    categorical: dict[str, list[str]] = {}
    for j, name in enumerate(codebook.features):
        spec = codebook.specs[name]
        ids = kept[:, j + 1]
        if isinstance(spec, NumericBins):
            clipped = np.minimum(ids, spec.n_bins - 1)
            mids = (spec.edges[:-1] + spec.edges[1:]) / 2.0
            numeric_cols.append(mids[clipped])
            schema.append(ColumnSpec(name, spec.source_kind, j))
        else:
            n_named = len(spec.categories)  # <= K-1, so the overflow id is never a list position
            categorical[name] = [
                spec.categories[i] if i < n_named else OVERFLOW_CATEGORY for i in ids
            ]
            schema.append(ColumnSpec(name, CATEGORICAL, j))

    numeric = (
        np.column_stack(numeric_cols)
        if numeric_cols
        else np.zeros((kept.shape[0], 0), dtype=np.float64)
    )
    table = FlowTable(
        schema=schema,
        numeric_data=numeric,
        categorical_data=categorical,
        n_rows=kept.shape[0],
    )
    return table, skipped


def _empty_decoded(codebook: Codebook) -> FlowTable:
    schema = []
    categorical: dict[str, list[str]] = {}
    n_numeric = 0
    for j, name in enumerate(codebook.features):
        spec = codebook.specs[name]
        if isinstance(spec, NumericBins):
            schema.append(ColumnSpec(name, spec.source_kind, j))
            n_numeric += 1
        else:
            schema.append(ColumnSpec(name, CATEGORICAL, j))
            categorical[name] = []
    return FlowTable(
        schema=schema,
        numeric_data=np.zeros((0, n_numeric)),
        categorical_data=categorical,
        n_rows=0,
    )


def codebook_schema_hints(codebook: Codebook) -> dict[str, str]:
    """Column-kind hints so CSVs reload with the kinds the codebook expects."""
    hints: dict[str, str] = {}
    for name in codebook.features:
        spec = codebook.specs[name]
        hints[name] = spec.source_kind if isinstance(spec, NumericBins) else CATEGORICAL
    return hints


# ---------------------------------------------------------------------------
# persistence: line-oriented UTF-8, edges as lossless hex float literals

_CODEBOOK_VERSION = "v1"
_SYMDATA_VERSION = "v1"


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    lines = [f"codebook {_CODEBOOK_VERSION} K={codebook.k} mode={codebook.mode}"]
    for name in codebook.features:
        spec = codebook.specs[name]
        if isinstance(spec, NumericBins):
            tag = "timestamp" if spec.source_kind == TIMESTAMP else "numeric"
            lines.append(f"feature\t{name}\t{tag}\t{len(spec.edges)}")
            lines.extend(float(e).hex() for e in spec.edges)
        else:
            for c in spec.categories:
                if "\t" in c or "\n" in c:
                    raise DataError(f"category {c!r} of feature {name!r} contains tab/newline")
            lines.append(f"feature\t{name}\tcategorical\t{len(spec.categories)}")
            lines.extend(f"{c}\t{i}" for i, c in enumerate(spec.categories))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty codebook file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "codebook":
        raise DataError(f"{path}: not a codebook file")
    if head[1] != _CODEBOOK_VERSION:
        raise DataError(f"{path}: codebook version {head[1]!r}, expected {_CODEBOOK_VERSION!r}")
    try:
        k = int(head[2].removeprefix("K="))
        mode = head[3].removeprefix("mode=")
    except ValueError:
        raise DataError(f"{path}: malformed codebook header {lines[0]!r}") from None
    if mode not in BINNING_MODES:
        raise DataError(f"{path}: unknown mode {mode!r}")

    features: list[str] = []
    specs: dict[str, NumericBins | CategoryMap] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split("\t")
        if parts[0] != "feature" or len(parts) != 4:
            raise DataError(f"{path}:{i + 1}: expected a feature block header, got {lines[i]!r}")
        _, name, tag, count_s = parts
        count = int(count_s)
        i += 1
        if i + count > len(lines):
            raise DataError(f"{path}: truncated block for feature {name!r}")
        if tag in ("numeric", "timestamp"):
            try:
                edges = np.array([float.fromhex(lines[i + j]) for j in range(count)])
            except ValueError:
                raise DataError(f"{path}: bad hex float in feature {name!r}") from None
            if np.any(np.diff(edges) <= 0):
                raise DataError(f"{path}: edges not strictly ascending for {name!r}")
            specs[name] = NumericBins(edges=edges, source_kind=TIMESTAMP if tag == "timestamp" else NUMERIC)
        elif tag == "categorical":
            cats: list[str] = []
            for j in range(count):
                entry = lines[i + j].split("\t")
                if len(entry) != 2 or int(entry[1]) != j:
                    raise DataError(f"{path}: bad category entry {lines[i + j]!r} for {name!r}")
                cats.append(entry[0])
            specs[name] = CategoryMap(categories=cats)
        else:
            raise DataError(f"{path}: unknown feature tag {tag!r}")
        features.append(name)
        i += count
    return Codebook(features=features, specs=specs, k=k, mode=mode)


def save_symbol_dataset(dataset: SymbolDataset, path: str | Path) -> None:
    k = dataset.vocab_size - 1
    header = f"symdata {_SYMDATA_VERSION} n={dataset.n_sequences} len={dataset.sequence_length} K={k}"
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in dataset.sequences:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_symbol_dataset(path: str | Path) -> SymbolDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 5 or head[0] != "symdata":
            raise DataError(f"{path}: not a symdata file")
        if head[1] != _SYMDATA_VERSION:
            raise DataError(f"{path}: symdata version {head[1]!r}, expected {_SYMDATA_VERSION!r}")
        try:
            n = int(head[2].removeprefix("n="))
            length = int(head[3].removeprefix("len="))
            k = int(head[4].removeprefix("K="))
        except ValueError:
            raise DataError(f"{path}: malformed symdata header") from None
        rows = np.loadtxt(fh, dtype=np.int64, ndmin=2)
    if rows.size == 0:
        rows = rows.reshape(0, length)
    if rows.shape != (n, length):
        raise DataError(f"{path}: expected {n} rows of length {length}, got shape {rows.shape}")
    if rows.size and (rows.min() < 0 or rows.max() > k):
        raise DataError(f"{path}: symbol id outside [0, {k}]")
    return SymbolDataset(sequences=rows, vocab_size=k + 1)
