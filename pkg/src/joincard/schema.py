"""Schema graphs, star subschemas, and traversal planning.

A schema graph records the foreign-key structure of a database: a labeled
directed multigraph whose edge (one_table, many_table, (one_column,
many_column)) states that many_table.many_column references
one_table.one_column, i.e. one row on the "one" side matches many rows on
the "many" side.  The graph is partitioned into star subschemas: one star
per referencing table, holding that table (the center) together with every
table it references.  Queries are covered by a small set of stars and
estimated by walking a tree over them.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

COLUMN_KINDS = ("categorical", "integer")


class SchemaError(ValueError):
    """Raised for structurally invalid schema or query graphs."""


@dataclass(frozen=True, order=True)
class Edge:
    """One foreign-key link: many_table.many_column references one_table.one_column."""

    one_table: str
    one_column: str
    many_table: str
    many_column: str

    def __str__(self) -> str:
        return (
            f"{self.one_table}.{self.one_column}"
            f"={self.many_table}.{self.many_column}"
        )

    @classmethod
    def parse(cls, one: str, many: str) -> "Edge":
        """Build an edge from "table.column" endpoint strings."""
        try:
            one_table, one_column = one.split(".", 1)
            many_table, many_column = many.split(".", 1)
        except ValueError as exc:
            raise SchemaError(f"edge endpoint must be 'table.column': {one!r}, {many!r}") from exc
        return cls(one_table, one_column, many_table, many_column)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "categorical"

    def __post_init__(self) -> None:
        if self.kind not in COLUMN_KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for column {self.name!r}")


class SchemaGraph:
    """Validated FK graph over named tables.

    Tables map to ordered column specs.  Edges may be parallel (two FK links
    between the same table pair with different columns) but never self-loops,
    and the graph must be acyclic once parallel edges are collapsed.
    """

    def __init__(self, tables: dict[str, tuple[ColumnSpec, ...]], edges: tuple[Edge, ...]):
        self.tables = {name: tuple(cols) for name, cols in tables.items()}
        self.edges = tuple(edges)
        self._validate()

    def _validate(self) -> None:
        for name, cols in self.tables.items():
            seen = set()
            for col in cols:
                if col.name in seen:
                    raise SchemaError(f"duplicate column {col.name!r} in table {name!r}")
                seen.add(col.name)
        seen_edges = set()
        for edge in self.edges:
            for table, column in ((edge.one_table, edge.one_column), (edge.many_table, edge.many_column)):
                if table not in self.tables:
                    raise SchemaError(f"edge {edge} references unknown table {table!r}")
                if column not in self.column_names(table):
                    raise SchemaError(f"edge {edge} references unknown column {table}.{column}")
            if edge.one_table == edge.many_table:
                raise SchemaError(f"self-loop edge {edge} is not allowed")
            if edge in seen_edges:
                raise SchemaError(f"duplicate edge {edge}")
            seen_edges.add(edge)
        cycle = self._find_cycle()
        if cycle is not None:
            raise SchemaError("schema graph is cyclic: " + " -> ".join(cycle))

    def _find_cycle(self) -> list[str] | None:
        # Collapse parallel edges; DFS with a path stack to report one cycle.
        succ: dict[str, list[str]] = {t: [] for t in self.tables}
        for edge in self.edges:
            if edge.many_table not in succ[edge.one_table]:
                succ[edge.one_table].append(edge.many_table)
        state = {t: 0 for t in self.tables}  # 0 new, 1 on stack, 2 done
        path: list[str] = []

        def visit(node: str) -> list[str] | None:
            state[node] = 1
            path.append(node)
            for nxt in succ[node]:
                if state[nxt] == 1:
                    return path[path.index(nxt):] + [nxt]
                if state[nxt] == 0:
                    found = visit(nxt)
                    if found is not None:
                        return found
            path.pop()
            state[node] = 2
            return None

        for table in sorted(self.tables):
            if state[table] == 0:
                found = visit(table)
                if found is not None:
                    return found
        return None

    def column_names(self, table: str) -> tuple[str, ...]:
        return tuple(col.name for col in self.tables[table])

    def column_kind(self, table: str, column: str) -> str:
        for col in self.tables[table]:
            if col.name == column:
                return col.kind
        raise SchemaError(f"unknown column {table}.{column}")

    def attributes(self, table: str) -> tuple[str, ...]:
        """Qualified attribute names of a table, in declared column order."""
        return tuple(f"{table}.{c}" for c in self.column_names(table))

    def in_edges(self, table: str) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.many_table == table)

    def out_edges(self, table: str) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.one_table == table)

    def find_edge(self, one: str, many: str) -> Edge:
        """Resolve an edge by its "table.column" endpoint strings."""
        probe = Edge.parse(one, many)
        if probe not in self.edges:
            raise SchemaError(f"edge {probe} is not part of the schema")
        return probe

    def undirected_connected(self) -> bool:
        if not self.tables:
            return True
        parent = {t: t for t in self.tables}

        def find(x: str) -> str:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for edge in self.edges:
            parent[find(edge.one_table)] = find(edge.many_table)
        roots = {find(t) for t in self.tables}
        return len(roots) == 1

    def is_tree(self) -> bool:
        """True when the undirected graph is a tree over all tables (no parallel edges)."""
        pairs = {frozenset((e.one_table, e.many_table)) for e in self.edges}
        return (self.undirected_connected() and len(self.edges) == len(pairs)
                and len(pairs) == len(self.tables) - 1)


@dataclass(frozen=True)
class Subschema:
    """A star: a center table joined with every table it references.

    ``edge_choice`` holds exactly one FK edge per referenced table (parallel
    edges between the same pair spawn one star per choice).
    ``external_fanout_edges`` are the schema edges leaving the star: their
    source table is a member but their target is not.  Those fanouts are the
    only per-row multiplicities an estimator for this star must carry.
    """

    center: str
    vertices: frozenset[str]
    edge_choice: tuple[Edge, ...]
    external_fanout_edges: tuple[Edge, ...]

    @property
    def key(self) -> str:
        """Stable, filesystem-safe identifier."""
        parts = [self.center] + [str(e) for e in self.edge_choice]
        return "__".join(parts)

    def __str__(self) -> str:
        return f"{{{', '.join(sorted(self.vertices))}}} (center {self.center})"


@dataclass(frozen=True)
class SubschemaHypergraph:
    schema: SchemaGraph
    subschemas: tuple[Subschema, ...]

    def __iter__(self):
        return iter(self.subschemas)

    def __len__(self) -> int:
        return len(self.subschemas)

    def by_key(self, key: str) -> Subschema:
        for sub in self.subschemas:
            if sub.key == key:
                return sub
        raise KeyError(key)


def partition(schema: SchemaGraph) -> SubschemaHypergraph:
    """Split a schema graph into star subschemas.

    Every table with at least one incoming FK becomes a star center; parallel
    edges from the same referenced table yield one star per combination of
    choices.  Tables not appearing in any star get a singleton subschema so
    the union of stars always covers the whole schema.
    """
    subschemas: list[Subschema] = []
    for center in sorted(schema.tables):
        incoming = schema.in_edges(center)
        if not incoming:
            continue
        groups: dict[str, list[Edge]] = {}
        for edge in incoming:
            groups.setdefault(edge.one_table, []).append(edge)
        sources = sorted(groups)
        choices = [sorted(groups[src]) for src in sources]
        for combo in itertools.product(*choices):
            vertices = frozenset([center, *sources])
            subschemas.append(_make_subschema(schema, center, vertices, tuple(combo)))
    covered = set().union(*(s.vertices for s in subschemas)) if subschemas else set()
    for table in sorted(schema.tables):
        if table not in covered:
            subschemas.append(_make_subschema(schema, table, frozenset([table]), ()))
    return SubschemaHypergraph(schema, tuple(subschemas))


def _make_subschema(schema: SchemaGraph, center: str, vertices: frozenset[str],
                    edge_choice: tuple[Edge, ...]) -> Subschema:
    external = tuple(sorted(
        e for e in schema.edges
        if e.one_table in vertices and e.many_table not in vertices
    ))
    return Subschema(center, vertices, edge_choice, external)


def check_connected(hypergraph: SubschemaHypergraph) -> bool:
    """True when the subschema hypergraph is connected over all tables.

    Equals undirected connectivity of the schema graph: every FK edge lies
    inside its target's star, so merging tables within each star reproduces
    the schema's components exactly.
    """
    tables = list(hypergraph.schema.tables)
    if not tables:
        return True
    index = {t: i for i, t in enumerate(tables)}
    parent = list(range(len(tables)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for sub in hypergraph.subschemas:
        members = sorted(sub.vertices)
        for other in members[1:]:
            parent[find(index[members[0]])] = find(index[other])
    return len({find(i) for i in range(len(tables))}) == 1


@dataclass(frozen=True)
class QueryGraph:
    """A tree-shaped join graph: a subset of schema edges plus its tables."""

    vertices: frozenset[str]
    edges: tuple[Edge, ...]

    @classmethod
    def from_edges(cls, schema: SchemaGraph, edges: tuple[Edge, ...],
                   tables: tuple[str, ...] = ()) -> "QueryGraph":
        for edge in edges:
            if edge not in schema.edges:
                raise SchemaError(f"query edge {edge} is not part of the schema")
        vertices = {t for e in edges for t in (e.one_table, e.many_table)}
        for table in tables:
            if table not in schema.tables:
                raise SchemaError(f"query references unknown table {table!r}")
            vertices.add(table)
        if not vertices:
            raise SchemaError("query names no tables")
        graph = cls(frozenset(vertices), tuple(sorted(set(edges))))
        graph._validate_tree()
        return graph

    def _validate_tree(self) -> None:
        pairs = [frozenset((e.one_table, e.many_table)) for e in self.edges]
        if len(set(pairs)) != len(pairs):
            raise SchemaError("query joins the same table pair twice; join graph must be a tree")
        if len(self.edges) != len(self.vertices) - 1:
            raise SchemaError("query join graph must be a tree (got wrong edge count "
                              f"for {len(self.vertices)} tables)")
        if len(self.vertices) > 1:
            adj: dict[str, set[str]] = {v: set() for v in self.vertices}
            for e in self.edges:
                adj[e.one_table].add(e.many_table)
                adj[e.many_table].add(e.one_table)
            seen = set()
            stack = [next(iter(sorted(self.vertices)))]
            while stack:
                node = stack.pop()
                if node in seen:
                    continue
                seen.add(node)
                stack.extend(adj[node] - seen)
            if seen != self.vertices:
                raise SchemaError("query join graph is disconnected")


def select_subschemas(hypergraph: SubschemaHypergraph, query: QueryGraph) -> list[Subschema]:
    """Greedy minimal cover of the query's join edges by star subschemas.

    Stars are scanned in (center, edge_choice) lexicographic order; each pick
    covers the most still-uncovered query edges, ties going to smaller stars.
    A single-table query picks one star containing the table, smallest first.
    Returns the picks in selection order (the traversal planner keeps it).
    """
    ordered = sorted(hypergraph.subschemas, key=lambda s: (s.center, s.key))
    if not query.edges:
        table = next(iter(query.vertices))
        candidates = [s for s in ordered if table in s.vertices]
        if not candidates:
            raise SchemaError(f"no subschema contains table {table!r}")
        return [min(candidates, key=lambda s: (len(s.vertices), s.center, s.key))]
    uncovered = set(query.edges)
    selected: list[Subschema] = []
    while uncovered:
        best = None
        best_score = None
        for sub in ordered:
            gain = len(uncovered.intersection(sub.edge_choice))
            if gain == 0:
                continue
            score = (-gain, len(sub.vertices))
            if best_score is None or score < best_score:
                best, best_score = sub, score
        if best is None:
            edge = sorted(uncovered)[0]
            raise SchemaError(f"query edge {edge} is not covered by any subschema")
        selected.append(best)
        uncovered.difference_update(best.edge_choice)
    return selected


@dataclass(frozen=True)
class TraversalStep:
    """One BFS step: estimate within ``subschema``, then hand off to successors.

    ``common_attributes`` are the base attributes of tables shared with any
    successor; their sampled values condition the successors' estimators.
    ``fanout_edges`` are the query joins that leave this star into a successor;
    each contributes a multiplicative per-sample fanout.
    """

    subschema: Subschema
    successors: tuple[Subschema, ...]
    common_attributes: tuple[str, ...]
    fanout_edges: tuple[Edge, ...]


@dataclass(frozen=True)
class TraversalPlan:
    root: Subschema
    steps: tuple[TraversalStep, ...]


def build_traversal_plan(schema: SchemaGraph, selected: list[Subschema], query: QueryGraph,
                         root_index: int | None = None) -> TraversalPlan:
    """Arrange selected subschemas into a BFS tree and derive per-step handoffs.

    Adjacency requires a shared table.  The BFS order follows the selection
    order; the default root is the subschema with the lexicographically
    smallest center (pass ``root_index`` to override, e.g. from a seeded RNG).
    """
    if not selected:
        raise SchemaError("cannot build a traversal plan from an empty selection")
    if root_index is None:
        root = min(selected, key=lambda s: (s.center, s.key))
    else:
        root = selected[root_index % len(selected)]
    order = {sub.key: i for i, sub in enumerate(selected)}
    visited = {root.key}
    queue = [root]
    steps: list[TraversalStep] = []
    while queue:
        current = queue.pop(0)
        successors = []
        for sub in selected:
            if sub.key in visited:
                continue
            if current.vertices & sub.vertices:
                successors.append(sub)
        successors.sort(key=lambda s: order[s.key])
        for sub in successors:
            visited.add(sub.key)
            queue.append(sub)
        steps.append(_make_step(schema, current, tuple(successors), query))
    if len(visited) != len(selected):
        missing = [s.key for s in selected if s.key not in visited]
        raise SchemaError(f"selected subschemas do not overlap: unreachable {missing}")
    return TraversalPlan(root, tuple(steps))


def _make_step(schema: SchemaGraph, current: Subschema, successors: tuple[Subschema, ...],
               query: QueryGraph) -> TraversalStep:
    common: set[str] = set()
    fanout: set[Edge] = set()
    for succ in successors:
        for table in current.vertices & succ.vertices:
            common.update(schema.attributes(table))
        for edge in query.edges:
            if edge in succ.edge_choice and edge.one_table in current.vertices \
                    and edge.many_table not in current.vertices:
                fanout.add(edge)
    return TraversalStep(current, successors, tuple(sorted(common)), tuple(sorted(fanout)))


def load_schema_config(path: str) -> SchemaGraph:
    """Read the schema config JSON: {tables: [{name, columns:[{name, kind}]}], edges:[{one, many}]}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return schema_from_dict(raw)


def schema_from_dict(raw: dict) -> SchemaGraph:
    if not isinstance(raw, dict) or "tables" not in raw:
        raise SchemaError("schema config must be an object with a 'tables' list")
    tables: dict[str, tuple[ColumnSpec, ...]] = {}
    for entry in raw["tables"]:
        name = entry.get("name")
        if not name:
            raise SchemaError("table entry missing 'name'")
        if name in tables:
            raise SchemaError(f"duplicate table {name!r}")
        cols = tuple(ColumnSpec(c["name"], c.get("kind", "categorical"))
                     for c in entry.get("columns", []))
        tables[name] = cols
    edges = tuple(Edge.parse(e["one"], e["many"]) for e in raw.get("edges", []))
    return SchemaGraph(tables, edges)


def schema_to_dict(schema: SchemaGraph) -> dict:
    return {
        "tables": [
            {"name": name, "columns": [{"name": c.name, "kind": c.kind} for c in cols]}
            for name, cols in schema.tables.items()
        ],
        "edges": [
            {"one": f"{e.one_table}.{e.one_column}", "many": f"{e.many_table}.{e.many_column}"}
            for e in schema.edges
        ],
    }


def write_schema_config(schema: SchemaGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_dict(schema), fh, indent=2, sort_keys=True)
        fh.write("\n")
