"""Full outer joins over stars and trees, uniform join sampling, truth counts.

A star's joined relation is the full outer join of its center with every
referenced table: the center left-outer-joined with each dimension, plus each
dimension's unmatched rows padded with NULLs everywhere else.  Rows carry two
kinds of virtual attributes: a presence flag per member table and, per schema
edge leaving the star, the fanout (how many target rows match this row's
source key; 0 when the source part is absent or unmatched).

Sampling draws i.i.d. uniform rows of that relation without materializing it:
every center row owns a weight equal to its number of join rows, and an
integer draw below the weight total decodes to one concrete dimension
combination by mixed-radix arithmetic, so the sampler is exactly uniform.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import Column, Dataset, PredicateRange
from .schema import Edge, QueryGraph, SchemaGraph, Subschema

SAMPLE_MAGIC = b"CINJ1"

FLAG_FALSE = 1
FLAG_TRUE = 2


class JoinerError(ValueError):
    """Raised for join construction problems."""


class JoinTooLarge(JoinerError):
    """Raised when a materialization would exceed the configured row budget."""


def flag_name(table: str) -> str:
    return f"flag::{table}"


def fanout_name(edge: Edge) -> str:
    return f"fanout::{edge}"


@dataclass(frozen=True)
class AttributeSpec:
    """One attribute of a joined relation; codes live in [0, dom_size)."""

    name: str
    role: str  # "base" | "flag" | "fanout"
    table: str  # owning table; the source ("one") table for fanouts
    dom_size: int
    fanout_values: tuple[int, ...] | None = None  # code c >= 1 -> fanout_values[c-1]
    edge: Edge | None = None


class RelationLayout:
    """Ordered attribute layout of a joined relation.

    Order: base attributes per member table (tables sorted, columns in
    declared order), then one presence flag per member table, then one fanout
    per external edge.  The layout hash pins this structure for model files.
    """

    def __init__(self, member_tables: tuple[str, ...], attributes: tuple[AttributeSpec, ...]):
        self.member_tables = member_tables
        self.attributes = attributes
        self.index = {spec.name: i for i, spec in enumerate(attributes)}

    def position(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError as exc:
            raise JoinerError(f"layout has no attribute {name!r}") from exc

    def spec(self, name: str) -> AttributeSpec:
        return self.attributes[self.position(name)]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.attributes)

    def base_attributes(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.attributes if s.role == "base")

    @property
    def layout_hash(self) -> str:
        digest = getattr(self, "_hash", None)
        if digest is None:
            payload = [
                [s.name, s.role, s.table, s.dom_size,
                 list(s.fanout_values) if s.fanout_values is not None else None]
                for s in self.attributes
            ]
            blob = json.dumps(payload, separators=(",", ":")).encode("utf-8")
            digest = hashlib.sha256(blob).hexdigest()
            self._hash = digest
        return digest


@dataclass
class JoinedRelation:
    """Materialized join: codes[row, layout position]."""

    layout: RelationLayout
    codes: np.ndarray
    row_count: int


@dataclass
class JoinSample:
    """Uniform i.i.d. sample of a joined relation."""

    layout: RelationLayout
    codes: np.ndarray
    subschema_key: str
    seed: int
    join_row_count: int

    @property
    def sample_count(self) -> int:
        return len(self.codes)


def translate_codes(src: Column, dst: Column) -> np.ndarray:
    """Map src dictionary codes to dst codes on equal raw values; -1 when absent.

    The NULL code maps to -1: NULL never matches a join key.
    """
    table = np.full(src.dom_size, -1, dtype=np.int64)
    if len(src.raw_values) and len(dst.raw_values):
        pos = np.searchsorted(dst.raw_values, src.raw_values)
        pos_clipped = np.minimum(pos, len(dst.raw_values) - 1)
        hit = dst.raw_values[pos_clipped] == src.raw_values
        table[1:] = np.where(hit, pos_clipped + 1, -1)
    return table


def _csr_by_code(codes: np.ndarray, dom_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices grouped by code: rows with code k are order[start[k]:start[k+1]]."""
    order = np.argsort(codes, kind="stable").astype(np.int64)
    counts = np.bincount(codes, minlength=dom_size)
    start = np.zeros(dom_size + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return order, start


def fanout_counts(dataset: Dataset, edge: Edge) -> np.ndarray:
    """Per source-table row: number of target rows matching its key (0 for NULL)."""
    one = dataset.tables[edge.one_table].column(edge.one_column)
    many = dataset.tables[edge.many_table].column(edge.many_column)
    per_code = np.bincount(many.codes, minlength=many.dom_size).astype(np.int64)
    per_code[0] = 0  # NULL keys never match
    mapped = translate_codes(one, many)[one.codes]
    counts = np.where(mapped >= 0, per_code[np.maximum(mapped, 0)], 0)
    return counts.astype(np.int64)


def build_layout(dataset: Dataset, subschema: Subschema) -> RelationLayout:
    """Attribute layout of a star's joined relation."""
    return _layout_for(dataset, tuple(sorted(subschema.vertices)), subschema.external_fanout_edges)


def build_universal_layout(dataset: Dataset) -> RelationLayout:
    """Attribute layout of the whole-schema joined relation (fanouts for every edge)."""
    tables = tuple(sorted(dataset.schema.tables))
    return _layout_for(dataset, tables, tuple(sorted(dataset.schema.edges)))


def _layout_for(dataset: Dataset, member_tables: tuple[str, ...],
                fanout_edges: tuple[Edge, ...]) -> RelationLayout:
    specs: list[AttributeSpec] = []
    for table in member_tables:
        for column_name in dataset.schema.column_names(table):
            column = dataset.tables[table].column(column_name)
            specs.append(AttributeSpec(f"{table}.{column_name}", "base", table, column.dom_size))
    for table in member_tables:
        specs.append(AttributeSpec(flag_name(table), "flag", table, 3))
    for edge in fanout_edges:
        counts = fanout_counts(dataset, edge)
        values = np.unique(np.concatenate([np.zeros(1, dtype=np.int64), counts]))
        specs.append(AttributeSpec(fanout_name(edge), "fanout", edge.one_table,
                                   len(values) + 1, tuple(int(v) for v in values), edge))
    return RelationLayout(member_tables, tuple(specs))


def _assemble(dataset: Dataset, layout: RelationLayout,
              table_rows: dict[str, np.ndarray]) -> np.ndarray:
    """Encode per-table row indices (-1 = absent) into a layout codes matrix."""
    n = len(next(iter(table_rows.values())))
    codes = np.zeros((n, len(layout.attributes)), dtype=np.int32)
    count_cache: dict[Edge, np.ndarray] = {}
    for pos, spec in enumerate(layout.attributes):
        idx = table_rows[spec.table]
        present = idx >= 0
        safe = np.maximum(idx, 0)
        if spec.role == "base":
            column = dataset.column(spec.name)
            codes[:, pos] = np.where(present, column.codes[safe], 0)
        elif spec.role == "flag":
            codes[:, pos] = np.where(present, FLAG_TRUE, FLAG_FALSE)
        else:
            if spec.edge not in count_cache:
                count_cache[spec.edge] = fanout_counts(dataset, spec.edge)
            raw = np.where(present, count_cache[spec.edge][safe], 0)
            values = np.asarray(spec.fanout_values, dtype=np.int64)
            codes[:, pos] = (np.searchsorted(values, raw) + 1).astype(np.int32)
    return codes


class _DimMatch:
    """Match structure of one dimension against the star's center."""

    def __init__(self, dataset: Dataset, edge: Edge):
        self.edge = edge
        center_col = dataset.tables[edge.many_table].column(edge.many_column)
        dim_col = dataset.tables[edge.one_table].column(edge.one_column)
        self.key_codes = translate_codes(center_col, dim_col)[center_col.codes]
        self.order, self.start = _csr_by_code(dim_col.codes, dim_col.dom_size)
        per_code = np.bincount(dim_col.codes, minlength=dim_col.dom_size).astype(np.int64)
        per_code[0] = 0
        self.m = np.where(self.key_codes >= 0, per_code[np.maximum(self.key_codes, 0)], 0)
        self.base = np.maximum(self.m, 1)
        referenced = np.zeros(dim_col.dom_size, dtype=bool)
        valid = self.key_codes[self.key_codes > 0]
        referenced[valid] = True
        row_code = dim_col.codes
        self.anti_rows = np.flatnonzero(~referenced[row_code] | (row_code == 0)).astype(np.int64)

    def match_rows(self, center_rows: np.ndarray, digit: np.ndarray) -> np.ndarray:
        """The digit-th matching dimension row per center row; -1 when unmatched."""
        key = self.key_codes[center_rows]
        matched = self.m[center_rows] > 0
        slot = self.start[np.maximum(key, 0)] + digit
        rows = np.where(matched, self.order[np.minimum(slot, len(self.order) - 1)]
                        if len(self.order) else -1, -1)
        return rows.astype(np.int64)


class _StarStats:
    def __init__(self, dataset: Dataset, subschema: Subschema):
        self.subschema = subschema
        self.center = dataset.tables[subschema.center]
        self.dims = [_DimMatch(dataset, edge) for edge in subschema.edge_choice]
        n = self.center.row_count
        weights = np.ones(n, dtype=np.int64)
        for dim in self.dims:
            weights *= dim.base
        self.weights = weights
        self.cum_weights = np.cumsum(weights)
        self.matched_total = int(self.cum_weights[-1]) if n else 0
        self.anti_counts = [len(dim.anti_rows) for dim in self.dims]
        self.row_count = self.matched_total + sum(self.anti_counts)


def star_row_count(dataset: Dataset, subschema: Subschema) -> int:
    """Exact row count of the star's full outer join, without materializing."""
    return _StarStats(dataset, subschema).row_count


def sample_join(dataset: Dataset, subschema: Subschema, n: int, seed: int,
                layout: RelationLayout | None = None) -> JoinSample:
    """Draw n i.i.d. uniform rows of the star's full outer join.

    Each draw is one integer below the exact row count; integers below the
    matched-stratum weight decode to (center row, dimension combination) by
    mixed radix, the rest index the per-dimension unmatched rows.  The result
    is deterministic for fixed (data, subschema, n, seed).
    """
    if layout is None:
        layout = build_layout(dataset, subschema)
    stats = _StarStats(dataset, subschema)
    if stats.row_count == 0:
        raise JoinerError(f"join for {subschema.key} is empty; nothing to sample")
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.integers(0, stats.row_count, size=n, dtype=np.int64)
    table_rows = {t: np.full(n, -1, dtype=np.int64) for t in layout.member_tables}

    matched = draws < stats.matched_total
    if matched.any():
        sub = draws[matched]
        center_rows = np.searchsorted(stats.cum_weights, sub, side="right")
        offset = sub - (stats.cum_weights[center_rows] - stats.weights[center_rows])
        table_rows[subschema.center][matched] = center_rows
        for dim in stats.dims:
            base = dim.base[center_rows]
            digit = offset % base
            offset = offset // base
            table_rows[dim.edge.one_table][matched] = dim.match_rows(center_rows, digit)
    rest = draws[~matched] - stats.matched_total
    if len(rest):
        bounds = np.cumsum(np.asarray(stats.anti_counts, dtype=np.int64))
        bucket = np.searchsorted(bounds, rest, side="right")
        inner = rest - (bounds[bucket] - np.asarray(stats.anti_counts)[bucket])
        anti_idx = np.flatnonzero(~matched)
        for d, dim in enumerate(stats.dims):
            here = bucket == d
            if here.any():
                rows_here = dim.anti_rows[inner[here]]
                table_rows[dim.edge.one_table][anti_idx[here]] = rows_here

    codes = _assemble(dataset, layout, table_rows)
    return JoinSample(layout, codes, subschema.key, seed, stats.row_count)


def materialize(dataset: Dataset, subschema: Subschema, threshold: int = 5_000_000,
                layout: RelationLayout | None = None) -> JoinedRelation:
    """Materialize the star's full outer join (guarded by a row budget)."""
    total = star_row_count(dataset, subschema)
    if total > threshold:
        raise JoinTooLarge(
            f"join for {subschema.key} has {total} rows, over the {threshold} budget")
    if layout is None:
        layout = build_layout(dataset, subschema)
    table_rows = _fold_tree(dataset, subschema.center, subschema.edge_choice)
    codes = _assemble(dataset, layout, table_rows)
    relation = JoinedRelation(layout, codes, len(codes))
    if relation.row_count != total:
        raise JoinerError("materialized row count disagrees with the weight formula")
    return relation


def materialize_universal(dataset: Dataset, threshold: int = 5_000_000) -> JoinedRelation:
    """Materialize the whole-schema full outer join; the schema must be a tree."""
    schema = dataset.schema
    if not schema.is_tree():
        raise JoinerError("universal relation needs a tree-shaped schema")
    layout = build_universal_layout(dataset)
    root = sorted(schema.tables)[0]
    table_rows = _fold_tree(dataset, root, schema.edges)
    if len(next(iter(table_rows.values()))) > threshold:
        raise JoinTooLarge("universal relation exceeds the row budget")
    codes = _assemble(dataset, layout, table_rows)
    return JoinedRelation(layout, codes, len(codes))


def _fold_tree(dataset: Dataset, root: str,
               edges: tuple[Edge, ...]) -> dict[str, np.ndarray]:
    """Full outer join along a tree of edges, attached outward from the root.

    Returns per-table row-index vectors (-1 marks an absent part).  Each step
    replicates partial rows per matching new-table row, keeps unmatched
    partial rows NULL-padded, and appends the new table's unmatched rows.
    """
    adjacency: dict[str, list[Edge]] = {}
    for edge in edges:
        adjacency.setdefault(edge.one_table, []).append(edge)
        adjacency.setdefault(edge.many_table, []).append(edge)
    table_rows = {root: np.arange(dataset.tables[root].row_count, dtype=np.int64)}
    queue = [root]
    seen_edges: set[Edge] = set()
    while queue:
        anchor = queue.pop(0)
        for edge in sorted(adjacency.get(anchor, [])):
            if edge in seen_edges:
                continue
            seen_edges.add(edge)
            new_table = edge.many_table if edge.one_table == anchor else edge.one_table
            if new_table in table_rows:
                raise JoinerError(f"edges do not form a tree near {edge}")
            _attach(dataset, table_rows, anchor, new_table, edge)
            queue.append(new_table)
    return table_rows


def _attach(dataset: Dataset, table_rows: dict[str, np.ndarray],
            anchor: str, new_table: str, edge: Edge) -> None:
    if edge.one_table == anchor:
        anchor_col = dataset.tables[anchor].column(edge.one_column)
        new_col = dataset.tables[new_table].column(edge.many_column)
    else:
        anchor_col = dataset.tables[anchor].column(edge.many_column)
        new_col = dataset.tables[new_table].column(edge.one_column)
    mapped = translate_codes(anchor_col, new_col)
    order, start = _csr_by_code(new_col.codes, new_col.dom_size)
    per_code = np.bincount(new_col.codes, minlength=new_col.dom_size).astype(np.int64)
    per_code[0] = 0

    anchor_idx = table_rows[anchor]
    present = anchor_idx >= 0
    key = np.where(present, mapped[anchor_col.codes[np.maximum(anchor_idx, 0)]], -1)
    counts = np.where(key >= 0, per_code[np.maximum(key, 0)], 0)
    rep = np.maximum(counts, 1)

    n_partial = len(anchor_idx)
    out_of = np.repeat(np.arange(n_partial, dtype=np.int64), rep)
    ends = np.cumsum(rep)
    within = np.arange(int(ends[-1]) if n_partial else 0, dtype=np.int64) \
        - np.repeat(ends - rep, rep)
    matched_out = counts[out_of] > 0
    slot = start[np.maximum(key[out_of], 0)] + within
    new_idx = np.where(matched_out,
                       order[np.minimum(slot, max(len(order) - 1, 0))] if len(order) else -1,
                       -1).astype(np.int64)

    referenced = np.zeros(new_col.dom_size, dtype=bool)
    referenced[key[key > 0]] = True
    row_code = new_col.codes
    anti = np.flatnonzero(~referenced[row_code] | (row_code == 0)).astype(np.int64)

    total = len(out_of) + len(anti)
    for table, idx in list(table_rows.items()):
        expanded = np.full(total, -1, dtype=np.int64)
        expanded[:len(out_of)] = idx[out_of]
        table_rows[table] = expanded
    new_rows = np.full(total, -1, dtype=np.int64)
    new_rows[:len(out_of)] = new_idx
    new_rows[len(out_of):] = anti
    table_rows[new_table] = new_rows


def true_cardinality(dataset: Dataset, graph: QueryGraph,
                     predicates: dict[str, PredicateRange]) -> int:
    """Exact inner-join count with predicates, by message passing on the tree."""
    weights: dict[str, np.ndarray] = {}
    for table in graph.vertices:
        w = np.ones(dataset.tables[table].row_count, dtype=np.int64)
        weights[table] = w
    for attribute, pred in predicates.items():
        table, column_name = attribute.split(".", 1)
        column = dataset.tables[table].column(column_name)
        mask = np.zeros(column.dom_size, dtype=bool)
        mask[pred.codes] = True
        weights[table] = weights[table] * mask[column.codes]

    adjacency: dict[str, list[Edge]] = {v: [] for v in graph.vertices}
    for edge in graph.edges:
        adjacency[edge.one_table].append(edge)
        adjacency[edge.many_table].append(edge)
    root = sorted(graph.vertices)[0]
    order: list[tuple[str, str, Edge]] = []  # (child, parent, edge), leaves last
    seen = {root}
    queue = [root]
    while queue:
        parent = queue.pop(0)
        for edge in sorted(adjacency[parent]):
            child = edge.many_table if edge.one_table == parent else edge.one_table
            if child in seen:
                continue
            seen.add(child)
            order.append((child, parent, edge))
            queue.append(child)

    for child, parent, edge in reversed(order):
        if edge.one_table == parent:
            parent_col = dataset.tables[parent].column(edge.one_column)
            child_col = dataset.tables[child].column(edge.many_column)
        else:
            parent_col = dataset.tables[parent].column(edge.many_column)
            child_col = dataset.tables[child].column(edge.one_column)
        sums = np.zeros(child_col.dom_size, dtype=np.int64)
        np.add.at(sums, child_col.codes, weights[child])
        sums[0] = 0
        mapped = translate_codes(parent_col, child_col)[parent_col.codes]
        gathered = np.where(mapped >= 0, sums[np.maximum(mapped, 0)], 0)
        weights[parent] = weights[parent] * gathered
    return int(weights[root].sum())


def save_sample(sample: JoinSample, path: str) -> None:
    """Write the CINJ1 cache: header JSON plus little-endian int32 code columns."""
    header = {
        "layout_hash": sample.layout.layout_hash,
        "subschema": sample.subschema_key,
        "sample_count": sample.sample_count,
        "seed": sample.seed,
        "join_row_count": sample.join_row_count,
        "attributes": list(sample.layout.names),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for pos in range(sample.codes.shape[1]):
            fh.write(np.ascontiguousarray(sample.codes[:, pos], dtype="<i4").tobytes())


def load_sample(path: str, layout: RelationLayout) -> JoinSample:
    """Read a CINJ1 cache, refusing stale layouts."""
    with open(path, "rb") as fh:
        magic = fh.read(len(SAMPLE_MAGIC))
        if magic != SAMPLE_MAGIC:
            raise JoinerError(f"{path}: not a join sample cache (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["layout_hash"] != layout.layout_hash:
            raise JoinerError(
                f"{path}: layout hash mismatch (cache {header['layout_hash'][:12]}, "
                f"data {layout.layout_hash[:12]})")
        n = header["sample_count"]
        codes = np.empty((n, len(layout.attributes)), dtype=np.int32)
        for pos in range(len(layout.attributes)):
            codes[:, pos] = np.frombuffer(fh.read(4 * n), dtype="<i4")
    return JoinSample(layout, codes, header["subschema"], header["seed"],
                      header["join_row_count"])
