"""Ingest: dictionary-encoded tables, predicate normalization, workload files.

Every column is dictionary-encoded: code 0 is reserved for NULL (empty CSV
cell), codes 1..K address the sorted distinct raw values.  Integer columns
sort numerically so range predicates become contiguous code runs; categorical
columns sort lexicographically.  NULL never satisfies any predicate.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .schema import ColumnSpec, Edge, QueryGraph, SchemaGraph, SchemaError

OPERATORS = ("=", "!=", "<", "<=", ">", ">=", "BETWEEN", "IN")


class IngestError(ValueError):
    """Raised for malformed data files or workload entries."""


@dataclass
class Column:
    """One encoded column: sorted distinct raw values, codes with NULL=0."""

    name: str
    kind: str
    raw_values: np.ndarray  # distinct non-null values, sorted; code c -> raw_values[c-1]
    codes: np.ndarray  # int32 per row, 0 = NULL

    @property
    def dom_size(self) -> int:
        """Dictionary length including the reserved NULL slot."""
        return len(self.raw_values) + 1

    def encode_one(self, raw) -> int | None:
        """Code of a raw value, or None when absent from the dictionary."""
        idx = np.searchsorted(self.raw_values, raw)
        if idx < len(self.raw_values) and self.raw_values[idx] == raw:
            return int(idx) + 1
        return None

    def decode(self, code: int):
        if code == 0:
            return None
        return self.raw_values[code - 1]


def build_column(name: str, kind: str, cells: list) -> Column:
    """Encode raw cells (empty string or None means NULL)."""
    parsed = []
    present = []
    for row_no, cell in enumerate(cells, start=1):
        if cell is None or cell == "":
            parsed.append(None)
            continue
        if kind == "integer":
            try:
                value = int(cell)
            except (TypeError, ValueError) as exc:
                raise IngestError(
                    f"column {name!r} row {row_no}: {cell!r} is not an integer") from exc
        else:
            value = str(cell)
        parsed.append(value)
        present.append(value)
    if kind == "integer":
        raw_values = np.unique(np.asarray(present, dtype=np.int64)) if present \
            else np.empty(0, dtype=np.int64)
    else:
        raw_values = np.unique(np.asarray(present, dtype=object)) if present \
            else np.empty(0, dtype=object)
    lookup = {value: i + 1 for i, value in enumerate(raw_values.tolist())}
    codes = np.fromiter(
        (0 if v is None else lookup[v] for v in parsed), dtype=np.int32, count=len(parsed))
    return Column(name, kind, raw_values, codes)


@dataclass
class Table:
    name: str
    columns: dict[str, Column]
    row_count: int

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError as exc:
            raise IngestError(f"table {self.name!r} has no column {name!r}") from exc


@dataclass
class Dataset:
    schema: SchemaGraph
    tables: dict[str, Table]

    def column(self, attribute: str) -> Column:
        table, column = attribute.split(".", 1)
        return self.tables[table].column(column)


def load_table(path: str, name: str, specs: tuple[ColumnSpec, ...]) -> Table:
    """Load one CSV whose header must match the declared columns in order."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            header = None
        declared = [spec.name for spec in specs]
        if header is not None and header != declared:
            raise IngestError(
                f"table {name!r}: header {header} does not match declared columns {declared}")
        cells: list[list] = [[] for _ in specs]
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(specs):
                raise IngestError(
                    f"table {name!r} row {row_no}: expected {len(specs)} cells, got {len(row)}")
            for i, cell in enumerate(row):
                cells[i].append(cell)
    columns = {
        spec.name: build_column(spec.name, spec.kind, cells[i])
        for i, spec in enumerate(specs)
    }
    rows = len(cells[0]) if specs else 0
    return Table(name, columns, rows)


def load_dataset(schema: SchemaGraph, data_dir: str) -> Dataset:
    """Load {table}.csv for every declared table."""
    tables = {}
    for name, specs in schema.tables.items():
        path = os.path.join(data_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise IngestError(f"missing data file for table {name!r}: {path}")
        tables[name] = load_table(path, name, specs)
    return Dataset(schema, tables)


def write_table_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if cell is None else cell for cell in row])


@dataclass(frozen=True)
class PredicateRange:
    """Normalized predicate: the set of dictionary codes it admits.

    ``codes`` is a sorted int array over 1..dom_size-1; NULL (code 0) is never
    admitted.  ``dom_size`` pins the dictionary the codes were resolved against.
    """

    attribute: str
    op: str
    values: tuple
    codes: np.ndarray
    dom_size: int

    @property
    def selectivity_width(self) -> int:
        return len(self.codes)


def normalize_predicate(attribute: str, op: str, values: list, column: Column) -> PredicateRange:
    """Resolve one workload predicate against a column dictionary.

    Missing equality/IN literals drop out (possibly to an empty range); range
    endpoints clamp naturally because comparisons run on the raw dictionary.
    """
    if op not in OPERATORS:
        raise IngestError(f"unknown operator {op!r} for {attribute}")
    expected = {"=": 1, "!=": 1, "<": 1, "<=": 1, ">": 1, ">=": 1, "BETWEEN": 2}
    if op in expected and len(values) != expected[op]:
        raise IngestError(f"operator {op} on {attribute} takes {expected[op]} value(s), "
                          f"got {len(values)}")
    if op == "IN" and not values:
        raise IngestError(f"operator IN on {attribute} needs at least one value")

    def parse(value):
        if column.kind == "integer":
            try:
                return int(value)
            except (TypeError, ValueError) as exc:
                raise IngestError(
                    f"predicate on {attribute}: {value!r} is not an integer") from exc
        return str(value)

    literals = [parse(v) for v in values]
    raw = column.raw_values
    if op == "=":
        mask = raw == literals[0]
    elif op == "!=":
        mask = raw != literals[0]
    elif op == "<":
        mask = raw < literals[0]
    elif op == "<=":
        mask = raw <= literals[0]
    elif op == ">":
        mask = raw > literals[0]
    elif op == ">=":
        mask = raw >= literals[0]
    elif op == "BETWEEN":
        lo, hi = literals
        mask = (raw >= lo) & (raw <= hi)
    else:  # IN
        mask = np.isin(raw, np.asarray(literals, dtype=raw.dtype if len(raw) else None))
    codes = (np.flatnonzero(mask) + 1).astype(np.int32)
    return PredicateRange(attribute, op, tuple(literals), codes, column.dom_size)


@dataclass
class WorkloadQuery:
    """One parsed query: join tree, normalized predicates, optional truth."""

    graph: QueryGraph
    predicates: dict[str, PredicateRange]
    true_cardinality: int | None = None
    raw: dict = field(default_factory=dict)


@dataclass
class Workload:
    queries: list[WorkloadQuery]


def parse_workload(path: str, dataset: Dataset) -> Workload:
    """Read the workload JSON and normalize every query against the dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or "queries" not in raw:
        raise IngestError("workload must be an object with a 'queries' list")
    queries = []
    for idx, entry in enumerate(raw["queries"]):
        try:
            queries.append(parse_query(entry, dataset))
        except (IngestError, SchemaError) as exc:
            raise IngestError(f"query {idx}: {exc}") from exc
    return Workload(queries)


def parse_query(entry: dict, dataset: Dataset) -> WorkloadQuery:
    schema = dataset.schema
    edges = tuple(schema.find_edge(j["one"], j["many"]) for j in entry.get("joins", []))
    tables = tuple(entry.get("tables", []))
    graph = QueryGraph.from_edges(schema, edges, tables)
    predicates: dict[str, PredicateRange] = {}
    for pred in entry.get("predicates", []):
        attribute = pred["column"]
        table, column_name = attribute.split(".", 1)
        if table not in graph.vertices:
            raise IngestError(f"predicate on {attribute} references a table "
                              "outside the query's join graph")
        if attribute in predicates:
            raise IngestError(f"duplicate predicate on {attribute}")
        column = dataset.tables[table].column(column_name)
        predicates[attribute] = normalize_predicate(
            attribute, pred["op"], pred.get("values", []), column)
    truth = entry.get("true_cardinality")
    return WorkloadQuery(graph, predicates, truth, dict(entry))


def write_workload(entries: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"queries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
