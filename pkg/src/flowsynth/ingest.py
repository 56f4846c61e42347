"""Flow-feature CSV ingestion.

Parses RFC 4180 CSV into a typed FlowTable, infers per-column kinds
(numeric / categorical / timestamp), drops rows whose required cells do
not parse, and provides cleaning plus PCA explained-variance analysis.

Cells are stripped of surrounding whitespace: flow exporters routinely
pad after the comma. Timestamps ("YYYY-MM-DD HH:MM:SS[.fff]") become
seconds since midnight; the calendar date does not generalize and is
discarded.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

NUMERIC = "Numeric"
CATEGORICAL = "Categorical"
TIMESTAMP = "Timestamp"
EXPLODE_FLAGS = "ExplodeFlags"
COLUMN_KINDS = (NUMERIC, CATEGORICAL, TIMESTAMP)

EMPTY_CATEGORY = "∅"  # sentinel for blank categorical cells

_TS_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2}) (\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,3}))?$")
_NUMERIC_FRACTION = 0.99  # column kind threshold, tolerates sporadic sentinels
_FLAG_ORDER = ("URG", "ACK", "PSH", "RST", "SYN", "FIN")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    index: int


@dataclass
class FlowTable:
    """Typed flow records: one numeric matrix plus per-column categories."""

    schema: list[ColumnSpec]
    numeric_data: np.ndarray  # [n_rows, n_numeric_like_columns], schema order
    categorical_data: dict[str, list[str]]
    n_rows: int
    dropped_rows: int = 0
    flagged_constant: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if self.numeric_data.shape != (self.n_rows, len(self.numeric_names)):
            raise DataError(
                f"numeric data shape {self.numeric_data.shape} inconsistent with "
                f"{self.n_rows} rows x {len(self.numeric_names)} numeric columns"
            )
        for name, values in self.categorical_data.items():
            if len(values) != self.n_rows:
                raise DataError(f"categorical column {name!r} has {len(values)} != {self.n_rows} entries")

    @property
    def numeric_names(self) -> list[str]:
        return [c.name for c in self.schema if c.kind in (NUMERIC, TIMESTAMP)]

    @property
    def categorical_names(self) -> list[str]:
        return [c.name for c in self.schema if c.kind == CATEGORICAL]

    def column_kind(self, name: str) -> str:
        for c in self.schema:
            if c.name == name:
                return c.kind
        raise DataError(f"unknown column {name!r}")

    def numeric_column(self, name: str) -> np.ndarray:
        try:
            j = self.numeric_names.index(name)
        except ValueError:
            raise DataError(f"{name!r} is not a numeric column") from None
        return self.numeric_data[:, j]

    def categorical_column(self, name: str) -> list[str]:
        if name not in self.categorical_data:
            raise DataError(f"{name!r} is not a categorical column")
        return self.categorical_data[name]

    def numeric_matrix(self, names: list[str]) -> np.ndarray:
        return np.column_stack([self.numeric_column(n) for n in names])


@dataclass
class CleanStats:
    constant_columns: list[str] = field(default_factory=list)
    filled_cells: dict[str, int] = field(default_factory=dict)
    dropped_rows: int = 0

    @property
    def empty(self) -> bool:
        return not self.constant_columns and not self.filled_cells

    def to_text(self) -> str:
        lines = ["clean report:"]
        if self.empty:
            lines.append("  nothing to do")
        for name in self.constant_columns:
            lines.append(f"  constant numeric column flagged: {name}")
        for name in sorted(self.filled_cells):
            lines.append(f"  empty categorical cells filled with {EMPTY_CATEGORY}: {name} x{self.filled_cells[name]}")
        return "\n".join(lines)


@dataclass
class PcaResult:
    explained_variance_ratio: np.ndarray  # descending, sums to 1 over the full spectrum
    cumulative: np.ndarray


def parse_schema_hints(path: str | Path) -> dict[str, str]:
    """One `column_name=Numeric|Categorical|Timestamp|ExplodeFlags` per line."""
    hints: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected column_name=Kind, got {raw!r}")
        name, kind = line.rsplit("=", 1)
        name, kind = name.strip(), kind.strip()
        if kind not in COLUMN_KINDS + (EXPLODE_FLAGS,):
            raise DataError(f"{path}:{lineno}: unknown kind {kind!r}")
        hints[name] = kind
    return hints


def _parse_timestamp(cell: str) -> float | None:
    m = _TS_RE.match(cell)
    if not m:
        return None
    hh, mm, ss = int(m.group(4)), int(m.group(5)), int(m.group(6))
    if hh > 23 or mm > 59 or ss > 59:
        return None
    frac = m.group(7)
    millis = int(frac.ljust(3, "0")) if frac else 0
    return hh * 3600 + mm * 60 + ss + millis / 1000.0


def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _parse_flags(cell: str) -> list[float] | None:
    if len(cell) != len(_FLAG_ORDER):
        return None
    return [0.0 if ch == "." else 1.0 for ch in cell]


def _infer_kind(cells: list[str]) -> str:
    nonempty = [c for c in cells if c != ""]
    if not nonempty:
        return CATEGORICAL
    n = len(nonempty)
    ts = sum(1 for c in nonempty if _parse_timestamp(c) is not None)
    if ts / n >= _NUMERIC_FRACTION:
        return TIMESTAMP
    numeric = sum(1 for c in nonempty if _parse_float(c) is not None)
    if numeric / n >= _NUMERIC_FRACTION:
        return NUMERIC
    return CATEGORICAL


def load_csv(path: str | Path, schema_hint: dict[str, str] | None = None) -> FlowTable:
    """Parse a header-first CSV into a FlowTable.

    Kind inference: a column is Numeric if >=99% of its non-empty cells
    parse as finite floats, Timestamp if >=99% match the timestamp
    pattern, else Categorical. `schema_hint` overrides inference per
    column; the ExplodeFlags hint turns a six-letter TCP-flag string
    column into six 0/1 numeric columns. Rows whose required (non
    categorical) cells fail to parse are dropped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    hints = dict(schema_hint or {})

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        rows: list[list[str]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: row has {len(row)} cells, header has {len(header)}"
                )
            rows.append([c.strip() for c in row])

    for name in hints:
        if name not in header:
            raise DataError(f"schema hint for unknown column {name!r}")

    columns = {name: [r[j] for r in rows] for j, name in enumerate(header)}
    kinds: dict[str, str] = {}
    for name in header:
        kinds[name] = hints.get(name) or _infer_kind(columns[name])

    # output schema: exploded flag columns replace their source in place
    out_names: list[str] = []
    out_kinds: dict[str, str] = {}
    for name in header:
        if kinds[name] == EXPLODE_FLAGS:
            for suffix in _FLAG_ORDER:
                flag_col = f"{name}_{suffix}"
                out_names.append(flag_col)
                out_kinds[flag_col] = NUMERIC
        else:
            out_names.append(name)
            out_kinds[name] = kinds[name]

    numeric_names = [n for n in out_names if out_kinds[n] in (NUMERIC, TIMESTAMP)]
    categorical_names = [n for n in out_names if out_kinds[n] == CATEGORICAL]

    kept_numeric: list[list[float]] = []
    kept_categorical: dict[str, list[str]] = {n: [] for n in categorical_names}
    dropped = 0
    for row in rows:
        values: list[float] = []
        cats: dict[str, str] = {}
        ok = True
        for j, name in enumerate(header):
            cell = row[j]
            kind = kinds[name]
            if kind == NUMERIC:
                v = _parse_float(cell)
                if v is None:
                    ok = False
                    break
                values.append(v)
            elif kind == TIMESTAMP:
                v = _parse_timestamp(cell)
                if v is None:
                    ok = False
                    break
                values.append(v)
            elif kind == EXPLODE_FLAGS:
                flags = _parse_flags(cell)
                if flags is None:
                    ok = False
                    break
                values.extend(flags)
            else:
                cats[name] = cell
        if not ok:
            dropped += 1
            continue
        kept_numeric.append(values)
        for name, cell in cats.items():
            kept_categorical[name].append(cell)

    if not kept_numeric and not any(kept_categorical.values()):
        raise DataError(f"{path}: all rows dropped")

    n_rows = len(kept_numeric)
    schema = [ColumnSpec(name, out_kinds[name], i) for i, name in enumerate(out_names)]
    numeric = np.array(kept_numeric, dtype=np.float64)
    if numeric.size == 0:
        numeric = numeric.reshape(n_rows, len(numeric_names))
    return FlowTable(
        schema=schema,
        numeric_data=numeric,
        categorical_data=kept_categorical,
        n_rows=n_rows,
        dropped_rows=dropped,
    )


def save_csv(table: FlowTable, path: str | Path) -> None:
    """Write a FlowTable back out; floats at 9 significant digits,
    timestamps re-rendered on an epoch date so the column reloads as a
    timestamp."""
    numeric_names = table.numeric_names
    num_index = {n: j for j, n in enumerate(numeric_names)}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([c.name for c in table.schema])
        for i in range(table.n_rows):
            row: list[str] = []
            for col in table.schema:
                if col.kind == CATEGORICAL:
                    row.append(table.categorical_data[col.name][i])
                elif col.kind == TIMESTAMP:
                    row.append(_render_timestamp(table.numeric_data[i, num_index[col.name]]))
                else:
                    row.append(format(table.numeric_data[i, num_index[col.name]], ".9g"))
            writer.writerow(row)


def _render_timestamp(seconds: float) -> str:
    total_ms = int(round(seconds * 1000.0))
    ms = total_ms % 1000
    s = total_ms // 1000
    hh, rem = divmod(s, 3600)
    mm, ss = divmod(rem, 60)
    return f"1970-01-01 {hh:02d}:{mm:02d}:{ss:02d}.{ms:03d}"


def clean(table: FlowTable) -> tuple[FlowTable, CleanStats]:
    """Flag zero-variance numeric columns and fill empty categorical cells.

    Always succeeds; the stats carry what changed. Flagged columns stay
    in the schema and the matrix but are excluded from encoding and PCA.
    """
    stats = CleanStats(dropped_rows=table.dropped_rows)
    for j, name in enumerate(table.numeric_names):
        col = table.numeric_data[:, j]
        if table.n_rows > 0 and np.all(col == col[0]):
            stats.constant_columns.append(name)
    new_categorical: dict[str, list[str]] = {}
    for name, values in table.categorical_data.items():
        n_empty = sum(1 for v in values if v == "")
        if n_empty:
            stats.filled_cells[name] = n_empty
            new_categorical[name] = [v if v != "" else EMPTY_CATEGORY for v in values]
        else:
            new_categorical[name] = list(values)
    cleaned = FlowTable(
        schema=list(table.schema),
        numeric_data=table.numeric_data.copy(),
        categorical_data=new_categorical,
        n_rows=table.n_rows,
        dropped_rows=table.dropped_rows,
        flagged_constant=tuple(stats.constant_columns),
    )
    return cleaned, stats


def jacobi_eigenvalues(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Deterministic and dependency-free; stops when the off-diagonal norm
    falls below `tol`. Returns eigenvalues sorted descending.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"need a square matrix, got {a.shape}")
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (n * n + 1):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                for k in range(n):
                    if k == p or k == q:
                        continue
                    akp, akq = a[k, p], a[k, q]
                    a[k, p] = a[p, k] = c * akp - s * akq
                    a[k, q] = a[q, k] = s * akp + c * akq
    return np.sort(np.diag(a))[::-1].copy()


def pca_explained_variance(table: FlowTable, max_components: int | None = None) -> PcaResult:
    """Explained-variance ratios of the standardized numeric columns.

    Constant (and clean-flagged) columns are excluded; needs at least two
    usable numeric columns and two rows.
    """
    if table.n_rows < 2:
        raise DataError("PCA needs at least 2 rows")
    usable = []
    for j, name in enumerate(table.numeric_names):
        col = table.numeric_data[:, j]
        if name in table.flagged_constant or np.all(col == col[0]):
            continue
        usable.append(j)
    if len(usable) < 2:
        raise DataError(f"PCA needs at least 2 non-constant numeric columns, have {len(usable)}")
    x = table.numeric_data[:, usable]
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    cov = (x.T @ x) / (table.n_rows - 1)
    eig = jacobi_eigenvalues(cov)
    eig = np.clip(eig, 0.0, None)
    ratios = eig / eig.sum()
    if max_components is not None:
        if max_components < 1:
            raise DataError("max_components must be >= 1")
        ratios = ratios[:max_components]
    return PcaResult(explained_variance_ratio=ratios, cumulative=np.cumsum(ratios))
