"""Tabular ingestion, cleaning, encoding, imputation, splitting, partitioning.

The preparation pipeline turns a raw network-traffic CSV into dense,
fully-finite feature matrices: infinities become missing values, categorical
columns become lexicographic ordinal codes, missing cells are imputed with
the per-class mode, features are min-max normalized on the training split
only, and the training rows are dealt to clients class-by-class so every
shard mirrors the global label balance.

All operations are pure and deterministic given their seed arguments.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "NumericColumn",
    "CategoricalColumn",
    "RawTable",
    "EncodingMap",
    "NormalizationParams",
    "FeatureMatrix",
    "PartitionPlan",
    "load_csv",
    "sanitize",
    "encode_categoricals",
    "decode_categoricals",
    "impute_mode_by_class",
    "map_label",
    "build_matrix",
    "normalize",
    "stratified_split",
    "local_split",
    "partition_balanced",
    "synth_generate",
    "save_matrix_csv",
    "load_matrix_csv",
    "write_sidecar",
    "read_sidecar",
    "save_partition",
    "load_partition",
]

MISSING_TOKENS = ("", "nan", "NaN")


class DataError(ValueError):
    """Raised for malformed input data or impossible pipeline requests."""


@dataclass
class NumericColumn:
    """Float column; NaN marks a missing cell."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class CategoricalColumn:
    """Text column; None marks a missing cell."""

    values: list

    def __post_init__(self) -> None:
        self.values = list(self.values)


@dataclass
class RawTable:
    """Columnar table of numeric and categorical columns."""

    column_names: list
    columns: list

    def __post_init__(self) -> None:
        if len(self.column_names) != len(self.columns):
            raise DataError("column_names and columns must align")
        if len(set(self.column_names)) != len(self.column_names):
            raise DataError("column names must be unique")
        lengths = {len(c.values) for c in self.columns}
        if len(lengths) > 1:
            raise DataError("all columns must have identical length")

    @property
    def row_count(self) -> int:
        if not self.columns:
            return 0
        return len(self.columns[0].values)

    def column(self, name: str):
        try:
            return self.columns[self.column_names.index(name)]
        except ValueError:
            raise DataError(f"no column named {name!r}") from None


# column name -> {category text -> ordinal code}
EncodingMap = dict


def _as_number(token: str):
    """Float value of the token, or None when it is not a real number."""
    if "_" in token:
        return None
    try:
        return float(token)
    except ValueError:
        return None


def load_csv(path) -> RawTable:
    """Read a headered CSV, typing each column numeric or categorical.

    A column is numeric iff every non-missing cell parses as a real number;
    empty cells and the literal tokens "nan"/"NaN" are missing. Raises
    DataError for an unreadable file or a row whose field count disagrees
    with the header (reported with its line number).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: missing header line")
        raw_columns = [[] for _ in header]
        for line_no, row in enumerate(reader, start=2):
            if not row and len(header) == 1:
                row = [""]  # a blank line in a one-column file is one empty cell
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            for col, cell in zip(raw_columns, row):
                tok = cell.strip()
                col.append(None if tok in MISSING_TOKENS else tok)
    columns = []
    for cells in raw_columns:
        parsed = [None if c is None else _as_number(c) for c in cells]
        if all(p is not None for c, p in zip(cells, parsed) if c is not None):
            columns.append(
                NumericColumn(np.array([np.nan if p is None else p for p in parsed]))
            )
        else:
            columns.append(CategoricalColumn(cells))
    return RawTable(list(header), columns)


def sanitize(table: RawTable, drop_columns) -> RawTable:
    """Replace infinities with missing markers and drop the named columns."""
    unknown = [name for name in drop_columns if name not in table.column_names]
    if unknown:
        raise DataError(f"cannot drop unknown columns: {unknown}")
    drop = set(drop_columns)
    names, columns = [], []
    for name, col in zip(table.column_names, table.columns):
        if name in drop:
            continue
        names.append(name)
        if isinstance(col, NumericColumn):
            columns.append(
                NumericColumn(np.where(np.isinf(col.values), np.nan, col.values))
            )
        else:
            columns.append(CategoricalColumn(col.values))
    return RawTable(names, columns)


def encode_categoricals(table: RawTable) -> tuple[RawTable, EncodingMap]:
    """Replace categorical columns with dense ordinal codes.

    Codes are assigned in lexicographic order of the category text, so the
    encoding is deterministic for any row order. Missing cells stay missing.
    """
    encoding: EncodingMap = {}
    columns = []
    for name, col in zip(table.column_names, table.columns):
        if isinstance(col, NumericColumn):
            columns.append(NumericColumn(col.values.copy()))
            continue
        cats = sorted({v for v in col.values if v is not None})
        mapping = {cat: i for i, cat in enumerate(cats)}
        encoding[name] = mapping
        columns.append(
            NumericColumn(
                np.array([np.nan if v is None else float(mapping[v]) for v in col.values])
            )
        )
    return RawTable(list(table.column_names), columns), encoding


def decode_categoricals(table: RawTable, encoding: EncodingMap) -> RawTable:
    """Inverse of encode_categoricals for the columns listed in `encoding`."""
    columns = []
    for name, col in zip(table.column_names, table.columns):
        if name not in encoding:
            columns.append(col)
            continue
        reverse = {code: cat for cat, code in encoding[name].items()}
        values = []
        for v in col.values:
            if np.isnan(v):
                values.append(None)
            else:
                values.append(reverse[int(v)])
        columns.append(CategoricalColumn(values))
    return RawTable(list(table.column_names), columns)


def _mode(values):
    """Most frequent value; ties break to the smallest value."""
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def impute_mode_by_class(table: RawTable, label_column: str) -> RawTable:
    """Fill missing cells with the mode of the cell's class.

    A class with no observed value in a column falls back to the column's
    global mode. A column with no observed value anywhere is an error.
    """
    label_col = table.column(label_column)
    if isinstance(label_col, NumericColumn):
        if np.isnan(label_col.values).any():
            raise DataError(f"label column {label_column!r} has missing values")
        classes = [float(v) for v in label_col.values]
    else:
        if any(v is None for v in label_col.values):
            raise DataError(f"label column {label_column!r} has missing values")
        classes = list(label_col.values)

    columns = []
    for name, col in zip(table.column_names, table.columns):
        if name == label_column:
            columns.append(col)
            continue
        if isinstance(col, NumericColumn):
            missing = [i for i in range(len(col.values)) if np.isnan(col.values[i])]
            observed = [float(v) for v in col.values if not np.isnan(v)]
        else:
            missing = [i for i, v in enumerate(col.values) if v is None]
            observed = [v for v in col.values if v is not None]
        if not missing:
            columns.append(col)
            continue
        if not observed:
            raise DataError(f"column {name!r} has no observed values to impute from")
        global_mode = _mode(observed)
        by_class: dict = {}
        for i, v in enumerate(col.values):
            ok = not np.isnan(v) if isinstance(col, NumericColumn) else v is not None
            if ok:
                by_class.setdefault(classes[i], []).append(
                    float(v) if isinstance(col, NumericColumn) else v
                )
        class_mode = {c: _mode(vals) for c, vals in by_class.items()}
        if isinstance(col, NumericColumn):
            values = col.values.copy()
            for i in missing:
                values[i] = class_mode.get(classes[i], global_mode)
            columns.append(NumericColumn(values))
        else:
            values = list(col.values)
            for i in missing:
                values[i] = class_mode.get(classes[i], global_mode)
            columns.append(CategoricalColumn(values))
    return RawTable(list(table.column_names), columns)


def map_label(table: RawTable, label_column: str, benign_token: str) -> RawTable:
    """Rewrite the label column to numeric {0, 1} using the benign token.

    Cells equal to the benign token become 0, everything else 1. Missing
    labels are an error.
    """
    col = table.column(label_column)
    if isinstance(col, NumericColumn):
        if np.isnan(col.values).any():
            raise DataError(f"label column {label_column!r} has missing values")
        try:
            benign = float(benign_token)
        except ValueError:
            raise DataError(
                f"label column {label_column!r} is numeric but benign token "
                f"{benign_token!r} is not"
            ) from None
        mapped = np.where(col.values == benign, 0.0, 1.0)
    else:
        if any(v is None for v in col.values):
            raise DataError(f"label column {label_column!r} has missing values")
        mapped = np.array([0.0 if v == benign_token else 1.0 for v in col.values])
    columns = [
        NumericColumn(mapped) if name == label_column else col_
        for name, col_ in zip(table.column_names, table.columns)
    ]
    return RawTable(list(table.column_names), columns)


@dataclass
class FeatureMatrix:
    """Dense float features with binary labels; the unit of training."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: list

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.feature_names = list(self.feature_names)
        if self.features.ndim != 2:
            raise DataError("features must be 2-dimensional")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise DataError("labels must align with feature rows")
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature_names must align with feature columns")
        if not np.isfinite(self.features).all():
            raise DataError("features contain missing or non-finite values")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "FeatureMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureMatrix(self.features[idx], self.labels[idx], self.feature_names)


def build_matrix(table: RawTable, label_column: str) -> FeatureMatrix:
    """Assemble a FeatureMatrix from a fully numeric, fully observed table."""
    label_col = table.column(label_column)
    if not isinstance(label_col, NumericColumn):
        raise DataError(f"label column {label_column!r} must be numeric; run map_label first")
    labels = label_col.values
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DataError(f"label column {label_column!r} must contain only 0/1")
    names, feature_cols = [], []
    for name, col in zip(table.column_names, table.columns):
        if name == label_column:
            continue
        if not isinstance(col, NumericColumn):
            raise DataError(f"column {name!r} is categorical; encode it first")
        if not np.isfinite(col.values).all():
            raise DataError(f"column {name!r} still has missing or non-finite values")
        names.append(name)
        feature_cols.append(col.values)
    features = (
        np.column_stack(feature_cols) if feature_cols else np.empty((len(labels), 0))
    )
    return FeatureMatrix(features, labels.astype(np.int64), names)


@dataclass
class NormalizationParams:
    """Per-feature min/max fit on the training split only."""

    feature_names: list
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self) -> None:
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if np.any(self.maxs < self.mins):
            raise DataError("normalization requires max >= min for every feature")

    def apply(self, features: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (features - self.mins) / safe
        return np.where(span > 0, out, 0.0)


def normalize(
    train: FeatureMatrix, test: FeatureMatrix
) -> tuple[FeatureMatrix, FeatureMatrix, NormalizationParams]:
    """Min-max scale both splits with parameters fit on train only.

    Constant features map to 0 everywhere; test values outside the train
    range extrapolate linearly (they may leave [0, 1]).
    """
    if train.feature_names != test.feature_names:
        raise DataError("train and test must share feature names")
    if train.n_rows == 0:
        raise DataError("cannot fit normalization on an empty training split")
    params = NormalizationParams(
        train.feature_names,
        train.features.min(axis=0),
        train.features.max(axis=0),
    )
    return (
        FeatureMatrix(params.apply(train.features), train.labels, train.feature_names),
        FeatureMatrix(params.apply(test.features), test.labels, test.feature_names),
        params,
    )


def _floor_share(fraction: float, size: int) -> int:
    # Guard against 0.7*10 == 6.999...; the mathematical floor is intended.
    return int(math.floor(fraction * size + 1e-9))


def stratified_split(
    matrix: FeatureMatrix, train_fraction: float, seed: int
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Per-class shuffled split; each class contributes floor(fraction*size)
    rows to the training side. Deterministic for a fixed seed."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(matrix.labels == cls)
        if idx.size < 2:
            raise DataError(f"class {cls} has {idx.size} samples; need at least 2")
        perm = rng.permutation(idx)
        k = _floor_share(train_fraction, idx.size)
        train_idx.append(perm[:k])
        test_idx.append(perm[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return matrix.take(train_idx), matrix.take(test_idx)


def local_split(
    shard: FeatureMatrix, train_fraction: float, seed: int
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """A client's internal split of its own shard; same contract as
    stratified_split."""
    return stratified_split(shard, train_fraction, seed)


@dataclass
class PartitionPlan:
    """Disjoint per-client row indices covering a training matrix."""

    client_count: int
    shards: list

    def __post_init__(self) -> None:
        self.shards = [np.asarray(s, dtype=np.int64) for s in self.shards]
        if self.client_count != len(self.shards):
            raise DataError("client_count must match the number of shards")
        total = np.concatenate(self.shards) if self.shards else np.array([], np.int64)
        if len(np.unique(total)) != total.size:
            raise DataError("shards must be disjoint")


def partition_balanced(
    matrix: FeatureMatrix, client_count: int, seed: int
) -> PartitionPlan:
    """Deal rows to clients per-class round-robin after a seeded shuffle.

    Keeps every shard's positive-class fraction within one row of the
    global fraction per class.
    """
    if client_count < 1:
        raise ValueError("client_count must be >= 1")
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(client_count)]
    for cls in (0, 1):
        idx = np.flatnonzero(matrix.labels == cls)
        if idx.size < client_count:
            raise DataError(
                f"class {cls} has {idx.size} rows; need at least {client_count}"
            )
        perm = rng.permutation(idx)
        for j in range(client_count):
            shards[j].extend(perm[j::client_count].tolist())
    plan_shards = [np.sort(np.array(s, dtype=np.int64)) for s in shards]
    plan = PartitionPlan(client_count, plan_shards)
    covered = sum(s.size for s in plan.shards)
    if covered != matrix.n_rows:
        raise DataError("partition does not cover all rows")
    return plan


def synth_generate(
    n_rows: int,
    n_features: int,
    separation: float,
    positive_fraction: float,
    seed: int,
) -> FeatureMatrix:
    """Two Gaussian clusters whose means differ by `separation` along a
    seeded random direction.

    The direction is drawn from a standard normal, restricted to its
    max(2, n_features // 10) largest-magnitude coordinates, and those
    magnitudes are cubed before renormalizing, mimicking tabular traffic
    data where one or two dominant fields carry most of the detection
    signal. separation 0 makes the classes identical in distribution;
    labels are exact cluster memberships.
    """
    if n_features < 2:
        raise ValueError("n_features must be >= 2")
    if not 0 < positive_fraction < 1:
        raise ValueError("positive_fraction must be in (0, 1)")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    if n_rows < 2:
        raise ValueError("n_rows must be >= 2")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(n_features)
    keep = max(2, n_features // 10)
    top = np.argsort(-np.abs(raw), kind="stable")[:keep]
    direction = np.zeros(n_features)
    direction[top] = np.sign(raw[top]) * np.abs(raw[top]) ** 3
    direction /= np.linalg.norm(direction)
    n_pos = min(max(int(round(n_rows * positive_fraction)), 1), n_rows - 1)
    labels = rng.permutation(
        np.concatenate([np.ones(n_pos, np.int64), np.zeros(n_rows - n_pos, np.int64)])
    )
    features = rng.standard_normal((n_rows, n_features))
    features += np.where(labels == 1, 0.5, -0.5)[:, None] * separation * direction
    names = [f"f{i}" for i in range(n_features)]
    return FeatureMatrix(features, labels, names)


def save_matrix_csv(matrix: FeatureMatrix, path, label_name: str = "label") -> None:
    """Persist a matrix as CSV with exact float round-trip via repr."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join([*matrix.feature_names, label_name]) + "\n")
        for i in range(matrix.n_rows):
            cells = [repr(float(v)) for v in matrix.features[i]]
            cells.append(str(int(matrix.labels[i])))
            fh.write(",".join(cells) + "\n")


def load_matrix_csv(path, label_name: str = "label") -> FeatureMatrix:
    return build_matrix(load_csv(path), label_name)


def write_sidecar(
    path,
    label_column: str,
    params: NormalizationParams,
    encoding: EncodingMap,
) -> None:
    """Key:value metadata recording normalization and encoding choices.

    Feature names must not contain commas, colons or newlines.
    """
    for name in params.feature_names:
        if any(ch in name for ch in ",:\n"):
            raise DataError(f"feature name {name!r} cannot be stored in the sidecar")
    lines = [
        f"label_column: {label_column}",
        "feature_names: " + ",".join(params.feature_names),
    ]
    for name, lo, hi in zip(params.feature_names, params.mins, params.maxs):
        lines.append(f"norm_min.{name}: {float(lo)!r}")
        lines.append(f"norm_max.{name}: {float(hi)!r}")
    for column, mapping in encoding.items():
        for category, code in mapping.items():
            lines.append(f"encoding.{column}.{category}: {code}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path) -> tuple[str, NormalizationParams, EncodingMap]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        pairs.append((key.strip(), value.strip()))
    kv = dict(pairs)
    label_column = kv["label_column"]
    names = kv["feature_names"].split(",") if kv["feature_names"] else []
    mins = [float(kv[f"norm_min.{n}"]) for n in names]
    maxs = [float(kv[f"norm_max.{n}"]) for n in names]
    encoding: EncodingMap = {}
    for key, value in pairs:
        if key.startswith("encoding."):
            _, column, category = key.split(".", 2)
            encoding.setdefault(column, {})[category] = int(value)
    return label_column, NormalizationParams(names, mins, maxs), encoding


def save_partition(plan: PartitionPlan, path) -> None:
    obj = {"client_count": plan.client_count, "shards": [s.tolist() for s in plan.shards]}
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_partition(path) -> PartitionPlan:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return PartitionPlan(obj["client_count"], obj["shards"])
