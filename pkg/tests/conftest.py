"""Shared fixtures: hand-built schemas and datasets small enough to verify by eye."""

from __future__ import annotations

import pytest

from joincard.data import Dataset, Table, build_column
from joincard.schema import ColumnSpec, Edge, SchemaGraph
from joincard.synth import SynthConfig, generate_dataset


def make_schema(tables: dict[str, list[tuple[str, str]]],
                edges: list[tuple[str, str]]) -> SchemaGraph:
    specs = {
        name: tuple(ColumnSpec(col, kind) for col, kind in columns)
        for name, columns in tables.items()
    }
    return SchemaGraph(specs, tuple(Edge.parse(one, many) for one, many in edges))


def make_dataset(schema: SchemaGraph, cells: dict[str, dict[str, list]]) -> Dataset:
    tables = {}
    for name in schema.tables:
        columns = {}
        row_count = 0
        for spec in schema.tables[name]:
            column_cells = cells[name][spec.name]
            columns[spec.name] = build_column(spec.name, spec.kind, column_cells)
            row_count = len(column_cells)
        tables[name] = Table(name, columns, row_count)
    return Dataset(schema, tables)


@pytest.fixture
def fig1_schema() -> SchemaGraph:
    """Five tables; S, U, W each reference others, so they become star centers."""
    return make_schema(
        {
            "T": [("id", "integer"), ("a", "integer")],
            "V": [("id", "integer")],
            "S": [("t_id", "integer"), ("s1", "categorical")],
            "U": [("t_id", "integer"), ("v_id", "integer"), ("u1", "categorical")],
            "W": [("t_id", "integer"), ("w1", "categorical")],
        },
        [
            ("T.id", "S.t_id"),
            ("T.id", "U.t_id"),
            ("V.id", "U.v_id"),
            ("T.id", "W.t_id"),
        ],
    )


@pytest.fixture
def parallel_schema() -> SchemaGraph:
    """Two parallel FK links between the same table pair."""
    return make_schema(
        {
            "posts": [("id", "integer")],
            "postlinks": [("post_id", "integer"), ("related_id", "integer")],
        },
        [
            ("posts.id", "postlinks.post_id"),
            ("posts.id", "postlinks.related_id"),
        ],
    )


@pytest.fixture
def st_schema() -> SchemaGraph:
    return make_schema(
        {
            "S": [("id", "integer"), ("x", "categorical")],
            "T": [("t_id", "integer"), ("y", "categorical")],
        },
        [("S.id", "T.t_id")],
    )


@pytest.fixture
def st_dataset(st_schema) -> Dataset:
    """S has ids 1,2; T references 1,1,3.  The star {S,T} joins to 4 rows."""
    return make_dataset(st_schema, {
        "S": {"id": ["1", "2"], "x": ["a", "b"]},
        "T": {"t_id": ["1", "1", "3"], "y": ["p", "q", "r"]},
    })


@pytest.fixture(scope="session")
def synth_small():
    """A scaled-down correlated dataset for unit tests of the full pipeline."""
    config = SynthConfig(users=60, topics=12, threads=90, posts=120, votes=100,
                         seed=11, workload_size=10,
                         width_mix=((1, 2), (2, 3), (3, 3), (4, 1), (5, 1)))
    dataset, raw = generate_dataset(config)
    return config, dataset, raw
