"""Typed tabular data, numeric encoding and schema alignment."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "categorical" | "numeric"
    categories: tuple[str, ...] = ()
    min: float = 0.0
    max: float = 1.0
    # raw CSV value -> category, applied on load; "*" catches every other value
    recode: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "recode", tuple((str(k), str(v)) for k, v in dict(self.recode).items()))
        if not self.name:
            raise SchemaError("column name must be nonempty")
        if self.kind == "categorical":
            cats = tuple(str(c) for c in self.categories)
            object.__setattr__(self, "categories", cats)
            if len(cats) < 2:
                raise SchemaError(f"{self.name}: categorical column needs >= 2 categories")
            if len(set(cats)) != len(cats):
                raise SchemaError(f"{self.name}: duplicate category labels")
            bad = sorted({v for _, v in self.recode} - set(cats))
            if bad:
                raise SchemaError(f"{self.name}: recode targets {bad} are not categories")
        elif self.kind == "numeric":
            object.__setattr__(self, "min", float(self.min))
            object.__setattr__(self, "max", float(self.max))
            if not self.min < self.max:
                raise SchemaError(f"{self.name}: numeric min must be < max")
        else:
            raise SchemaError(f"{self.name}: unknown column kind {self.kind!r}")

    @classmethod
    def categorical(cls, name: str, categories: Sequence[str], recode: Mapping[str, str] | None = None) -> "ColumnSpec":
        return cls(name, "categorical", tuple(categories), recode=tuple((recode or {}).items()))

    @classmethod
    def numeric(cls, name: str, lo: float, hi: float) -> "ColumnSpec":
        return cls(name, "numeric", min=lo, max=hi)

    @property
    def cardinality(self) -> int:
        return len(self.categories)

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        if self.is_categorical:
            d = {"name": self.name, "kind": "categorical", "categories": list(self.categories)}
            if self.recode:
                d["recode"] = dict(self.recode)
            return d
        return {"name": self.name, "kind": "numeric", "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        if d.get("kind") == "categorical":
            return cls.categorical(d["name"], d["categories"], d.get("recode"))
        if d.get("kind") == "numeric":
            return cls.numeric(d["name"], d["min"], d["max"])
        raise SchemaError(f"column {d.get('name')!r}: unknown kind {d.get('kind')!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]
    label_column: str
    protected_column: str

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        for role, name in (("label", self.label_column), ("protected", self.protected_column)):
            if name not in names:
                raise SchemaError(f"{role} column {name!r} not in schema")
            col = self.column(name)
            if not col.is_categorical or col.cardinality != 2:
                raise SchemaError(f"{role} column {name!r} must be binary categorical")
        if self.label_column == self.protected_column:
            raise SchemaError("label and protected columns must differ")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def feature_columns(self) -> list[ColumnSpec]:
        """Columns other than the label and protected attribute, in schema order."""
        return [c for c in self.columns if c.name not in (self.label_column, self.protected_column)]

    def with_task(self, label: str | None = None, protected: str | None = None) -> "Schema":
        """Same columns with new roles; a label equal to the protected column swaps the two."""
        label = label or self.label_column
        if protected is None:
            protected = self.label_column if label == self.protected_column else self.protected_column
        return Schema(self.columns, label, protected)

    def select(self, names: Iterable[str]) -> "Schema":
        keep = set(names)
        return Schema(tuple(c for c in self.columns if c.name in keep),
                      self.label_column, self.protected_column)

    def to_dict(self) -> dict:
        return {
            "columns": [c.to_dict() for c in self.columns],
            "label": self.label_column,
            "protected": self.protected_column,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        return cls(tuple(ColumnSpec.from_dict(c) for c in d["columns"]), d["label"], d["protected"])

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented table: category indices (int64) or raw numeric values (float64)."""

    schema: Schema
    data: Mapping[str, np.ndarray]

    def __post_init__(self):
        cols = {}
        n = None
        for spec in self.schema.columns:
            if spec.name not in self.data:
                raise SchemaError(f"missing column {spec.name!r}")
            arr = np.asarray(self.data[spec.name])
            if spec.is_categorical:
                arr = arr.astype(np.int64)
                if arr.size and (arr.min() < 0 or arr.max() >= spec.cardinality):
                    raise RowError(f"{spec.name}: category index out of range")
            else:
                arr = arr.astype(np.float64)
                if arr.size and (arr.min() < spec.min or arr.max() > spec.max or not np.isfinite(arr).all()):
                    raise RowError(f"{spec.name}: value outside [{spec.min}, {spec.max}]")
            if arr.ndim != 1:
                raise SchemaError(f"{spec.name}: column must be one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise SchemaError("columns have different lengths")
            arr.setflags(write=False)
            cols[spec.name] = arr
        if not n:
            raise SchemaError("dataset must have at least one row")
        object.__setattr__(self, "data", cols)

    def __len__(self) -> int:
        return len(self.data[self.schema.columns[0].name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    @classmethod
    def from_rows(cls, schema: Schema, rows: Iterable[Sequence]) -> "Dataset":
        """Build from records holding category labels / numeric values in schema order."""
        rows = list(rows)
        data = {}
        for j, spec in enumerate(schema.columns):
            vals = [r[j] for r in rows]
            if spec.is_categorical:
                lookup = {c: i for i, c in enumerate(spec.categories)}
                try:
                    data[spec.name] = np.array([lookup[str(v)] for v in vals], dtype=np.int64)
                except KeyError as e:
                    raise RowError(f"{spec.name}: unknown category {e.args[0]!r}") from None
            else:
                data[spec.name] = np.array(vals, dtype=np.float64)
        return cls(schema, data)

    def rows(self) -> list[tuple]:
        """Records as tuples of category labels / floats, in schema order."""
        cols = []
        for spec in self.schema.columns:
            arr = self.data[spec.name]
            cols.append([spec.categories[i] for i in arr] if spec.is_categorical else arr.tolist())
        return list(zip(*cols))

    def take(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.schema, {k: v[index] for k, v in self.data.items()})

    def with_schema(self, schema: Schema) -> "Dataset":
        """Reinterpret (task change) or project (column subset) onto ``schema``."""
        for spec in schema.columns:
            if spec != self.schema.column(spec.name):
                raise SchemaError(f"column {spec.name!r} differs between schemas")
        return Dataset(schema, {c.name: self.data[c.name] for c in schema.columns})

    def equals(self, other: "Dataset", atol: float = 1e-9) -> bool:
        if self.schema != other.schema or len(self) != len(other):
            return False
        for spec in self.schema.columns:
            a, b = self.data[spec.name], other.data[spec.name]
            if spec.is_categorical:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0, atol=atol * (spec.max - spec.min)):
                return False
        return True

    @property
    def labels(self) -> np.ndarray:
        return self.data[self.schema.label_column]

    @property
    def protected(self) -> np.ndarray:
        return self.data[self.schema.protected_column]


# ------------------------------------------------------------------------ CSV


@dataclass
class RejectedRow:
    line: int
    reason: str


def read_csv(path: str | Path, schema: Schema, strict: bool = False) -> tuple[Dataset, list[RejectedRow]]:
    """Parse ``path`` against ``schema``; returns the dataset and the rejected rows.

    In strict mode the first invalid row raises `RowError` instead.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = [header.index(n) for n in schema.names]
        rows, rejected = [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            try:
                rows.append(_parse_record(schema, [rec[p].strip() if p < len(rec) else "" for p in pos]))
            except RowError as e:
                if strict:
                    raise RowError(f"{path}:{line}: {e}") from None
                rejected.append(RejectedRow(line, str(e)))
    if not rows:
        raise SchemaError(f"{path}: no valid rows")
    return Dataset.from_rows(schema, rows), rejected


def _parse_record(schema: Schema, values: list[str]) -> tuple:
    out = []
    for spec, raw in zip(schema.columns, values):
        if spec.is_categorical:
            if spec.recode:
                table = dict(spec.recode)
                raw = table.get(raw, table.get("*", raw))
            if raw not in spec.categories:
                raise RowError(f"{spec.name}: unknown category {raw!r}")
            out.append(raw)
        else:
            try:
                v = float(raw)
            except ValueError:
                raise RowError(f"{spec.name}: not a number {raw!r}") from None
            if not (spec.min <= v <= spec.max):
                raise RowError(f"{spec.name}: {v} outside [{spec.min}, {spec.max}]")
            out.append(v)
    return tuple(out)


def load_csv(path: str | Path, schema: Schema, strict: bool = False) -> Dataset:
    dataset, rejected = read_csv(path, schema, strict)
    if rejected:
        log.warning("%s: rejected %d row(s); first: line %d (%s)",
                    path, len(rejected), rejected[0].line, rejected[0].reason)
    return dataset


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dataset.schema.names)
        for row in dataset.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ------------------------------------------------------------------- encoding


def _width(spec: ColumnSpec) -> int:
    return spec.cardinality if spec.is_categorical else 1


def encoded_layout(schema: Schema) -> dict[str, tuple[int, int]]:
    """Index ranges per column: features in schema order, then label bit, then protected bit."""
    layout, pos = {}, 0
    for spec in schema.feature_columns:
        layout[spec.name] = (pos, pos + _width(spec))
        pos += _width(spec)
    layout[schema.label_column] = (pos, pos + 1)
    layout[schema.protected_column] = (pos + 1, pos + 2)
    return layout


def feature_width(schema: Schema) -> int:
    return sum(_width(c) for c in schema.feature_columns)


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    """Dense [0, 1] representation of a dataset.

    Categorical features are one-hot groups, numeric features min-max scaled;
    the label and the protected attribute are single bits at the end.
    """

    schema: Schema
    values: np.ndarray
    column_groups: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]

    @property
    def rows(self) -> np.ndarray:
        return self.values

    @property
    def features(self) -> np.ndarray:
        """The X block (no label, no protected bit)."""
        return self.values[:, : feature_width(self.schema)]

    @property
    def label_bit(self) -> np.ndarray:
        return self.values[:, self.column_groups[self.schema.label_column][0]]

    @property
    def protected_bit(self) -> np.ndarray:
        return self.values[:, self.column_groups[self.schema.protected_column][0]]

    def features_and_protected(self) -> np.ndarray:
        """The X x S block used by the VAE and the generator input."""
        return np.concatenate([self.features, self.protected_bit[:, None]], axis=1)


def encode(dataset: Dataset) -> EncodedMatrix:
    schema = dataset.schema
    layout = encoded_layout(schema)
    n = len(dataset)
    out = np.zeros((n, feature_width(schema) + 2))
    for spec in schema.columns:
        start, stop = layout[spec.name]
        col = dataset[spec.name]
        if spec.name in (schema.label_column, schema.protected_column):
            out[:, start] = col
        elif spec.is_categorical:
            out[np.arange(n), start + col] = 1.0
        else:
            out[:, start] = (col - spec.min) / (spec.max - spec.min)
    return EncodedMatrix(schema, out, layout)


def encode_features(dataset: Dataset) -> np.ndarray:
    return encode(dataset).features


def _argmax_lowest(block: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(block, axis=1)


def decode_block(schema: Schema, block: np.ndarray, columns: Sequence[ColumnSpec] | None = None) -> dict[str, np.ndarray]:
    """Decode a feature block laid out like ``encoded_layout`` (features only)."""
    columns = schema.feature_columns if columns is None else columns
    out, pos = {}, 0
    for spec in columns:
        w = _width(spec)
        part = block[:, pos:pos + w]
        if spec.is_categorical:
            out[spec.name] = _argmax_lowest(part)
        else:
            v = np.clip(part[:, 0], 0.0, 1.0)
            out[spec.name] = np.clip(spec.min + v * (spec.max - spec.min), spec.min, spec.max)
        pos += w
    if pos != block.shape[1]:
        raise SchemaError(f"block width {block.shape[1]} does not match schema width {pos}")
    return out


def bit_to_index(bits: np.ndarray) -> np.ndarray:
    # 0.5 ties go to index 0, matching the lowest-index argmax rule
    return (np.asarray(bits) > 0.5).astype(np.int64)


def decode(matrix: EncodedMatrix | np.ndarray, schema: Schema) -> Dataset:
    values = matrix.values if isinstance(matrix, EncodedMatrix) else np.asarray(matrix, dtype=np.float64)
    fw = feature_width(schema)
    if values.ndim != 2 or values.shape[1] != fw + 2:
        raise SchemaError(f"matrix width {values.shape[-1]} does not match encoded width {fw + 2}")
    data = decode_block(schema, values[:, :fw])
    data[schema.label_column] = bit_to_index(values[:, fw])
    data[schema.protected_column] = bit_to_index(values[:, fw + 1])
    return Dataset(schema, data)


# ------------------------------------------------------------------ alignment


@dataclass(frozen=True)
class AlignmentMap:
    shared: tuple[str, ...]
    dropped_from_target: tuple[str, ...]
    added_in_source: tuple[str, ...]

    @property
    def is_identity(self) -> bool:
        return not self.dropped_from_target and not self.added_in_source


def align(source: Schema, target: Schema) -> AlignmentMap:
    """Match columns by name and kind. Target must be a subset or superset of source.

    ``dropped_from_target`` are target columns the source lacks;
    ``added_in_source`` are source columns the target lacks.
    """
    src = {c.name: c for c in source.columns}
    tgt = {c.name: c for c in target.columns}
    shared = [c.name for c in source.columns if c.name in tgt]
    for name in shared:
        if src[name] != tgt[name]:
            raise SchemaError(f"column {name!r} has a different kind/domain in source and target")
    dropped = [c.name for c in target.columns if c.name not in src]
    added = [c.name for c in source.columns if c.name not in tgt]
    if not shared:
        raise SchemaError("source and target share no columns")
    if dropped and added:
        raise SchemaError("target columns are neither a subset nor a superset of source columns")
    return AlignmentMap(tuple(shared), tuple(dropped), tuple(added))


def realism_columns(source: Schema, target: Schema, alignment: AlignmentMap) -> list[str]:
    """Shared columns that are features on both sides: what D1 and the realism check see."""
    tgt_feats = {c.name for c in target.feature_columns}
    return [c.name for c in source.feature_columns if c.name in alignment.shared and c.name in tgt_feats]


def feature_slice_indices(schema: Schema, names: Sequence[str]) -> np.ndarray:
    """Indices into the feature block covering ``names``, in the order given."""
    layout = encoded_layout(schema)
    features = {c.name for c in schema.feature_columns}
    idx = []
    for name in names:
        if name not in features:
            raise SchemaError(f"{name!r} is not a feature column")
        start, stop = layout[name]
        idx.extend(range(start, stop))
    return np.asarray(idx, dtype=np.int64)


# ---------------------------------------------------------------------- split


def split(dataset: Dataset, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split of {n} rows by {tuple(fractions)} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    return (dataset.take(perm[:n_train]),
            dataset.take(perm[n_train:n_train + n_val]),
            dataset.take(perm[n_train + n_val:]))
