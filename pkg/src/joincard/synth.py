"""Synthetic forum dataset and workload generator.

Five tables shaped like a small forum: users and topics are referenced by
threads, posts, and votes.  Rows carry a hidden per-user (and per-topic)
profile; attribute values follow the profile with a configurable probability,
which induces correlation both within a table and across foreign keys.  A
fraction of keys dangle or are NULL so that outer-join flags carry signal.
Everything is driven by one seed and regenerates byte-identically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import data
from .data import Dataset, IngestError, Table, Workload, build_column, parse_query
from .joiner import true_cardinality
from .schema import ColumnSpec, Edge, SchemaGraph, write_schema_config
from .util import derive_seed

WORDS = {
    "country": ("ar", "br", "ca", "de", "fr", "in", "jp", "us"),
    "age_group": ("18-24", "25-34", "35-44", "45-59", "60+"),
    "karma_band": ("low", "mid", "high", "top"),
    "family": ("science", "games", "music", "food", "travel", "code"),
    "audience": ("niche", "small", "large", "huge"),
    "category": ("question", "debate", "news", "guide", "meta", "story", "poll"),
    "score_band": ("cold", "warm", "hot", "viral", "mega"),
    "lang": ("de", "en", "es", "fr", "ja", "pt"),
    "length_band": ("stub", "short", "medium", "long", "epic"),
    "kind": ("up", "down", "star", "flag"),
    "weight_band": ("w1", "w2", "w3", "w4"),
}

# Non-key columns per table; keys are id / *_id integer columns.
ATTRIBUTES = {
    "users": ("country", "age_group", "karma_band"),
    "topics": ("family", "audience"),
    "threads": ("category", "score_band"),
    "posts": ("lang", "length_band"),
    "votes": ("kind", "weight_band"),
}


def build_schema() -> SchemaGraph:
    """The five-table forum schema; threads, posts, and votes are star centers."""
    tables = {
        "users": ("id",) + ATTRIBUTES["users"],
        "topics": ("id",) + ATTRIBUTES["topics"],
        "threads": ("user_id",) + ATTRIBUTES["threads"],
        "posts": ("user_id", "topic_id") + ATTRIBUTES["posts"],
        "votes": ("user_id",) + ATTRIBUTES["votes"],
    }
    specs = {
        name: tuple(ColumnSpec(c, "integer" if c.endswith("id") else "categorical")
                    for c in columns)
        for name, columns in tables.items()
    }
    edges = (
        ("users.id", "threads.user_id"),
        ("users.id", "posts.user_id"),
        ("topics.id", "posts.topic_id"),
        ("users.id", "votes.user_id"),
    )
    return SchemaGraph(specs, tuple(Edge.parse(one, many) for one, many in edges))


@dataclass
class SynthConfig:
    users: int = 300
    topics: int = 40
    threads: int = 500
    posts: int = 800
    votes: int = 600
    latent_count: int = 6
    correlation: float = 0.85        # P(attribute follows its table's profile)
    cross_correlation: float = 0.85  # P(child attribute follows the parent profile)
    dangling: float = 0.05           # FK values referencing no parent row
    null_keys: float = 0.04
    null_cells: float = 0.03
    seed: int = 0
    workload_size: int = 50
    width_mix: tuple = ((1, 8), (2, 14), (3, 14), (4, 9), (5, 5))
    predicates_per_query: tuple = (1, 3)  # inclusive bounds
    in_list_sizes: tuple = (2, 4)
    max_true_cardinality_attempts: int = 60


def _attr_cells(rng: np.random.Generator, latents: np.ndarray, words: tuple,
                attr_index: int, strength: float, null_rate: float) -> list:
    """One attribute column: profile-preferred value with prob strength, else uniform."""
    n = len(latents)
    dom = len(words)
    preferred = (latents + attr_index) % dom
    uniform = rng.integers(0, dom, n)
    follow = rng.random(n) < strength
    choice = np.where(follow, preferred, uniform)
    nulls = rng.random(n) < null_rate
    return [None if nulls[i] else words[choice[i]] for i in range(n)]


def _fk_cells(rng: np.random.Generator, parent_latents: np.ndarray, n: int,
              config: SynthConfig) -> tuple[list, np.ndarray]:
    """Foreign-key column plus the parent profile seen by each child row.

    Parent popularity is mildly skewed; dangling keys point past the parent id
    range; NULL and dangling rows fall back to a random profile.
    """
    parent_count = len(parent_latents)
    weights = rng.random(parent_count) ** 2 + 0.05
    weights /= weights.sum()
    parent = rng.choice(parent_count, size=n, p=weights)
    latents = parent_latents[parent].copy()
    roll = rng.random(n)
    dangle = roll < config.dangling
    null = (roll >= config.dangling) & (roll < config.dangling + config.null_keys)
    fallback = rng.integers(0, config.latent_count, n)
    cells: list = []
    for i in range(n):
        if null[i]:
            cells.append(None)
            latents[i] = fallback[i]
        elif dangle[i]:
            cells.append(str(parent_count + 1 + int(parent[i])))
            latents[i] = fallback[i]
        else:
            cells.append(str(int(parent[i]) + 1))
    return cells, latents


def generate_dataset(config: SynthConfig) -> tuple[Dataset, dict[str, list[list]]]:
    """Build the dataset in memory; also return raw cell columns for CSV output."""
    schema = build_schema()
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "synth-data")))
    counts = {"users": config.users, "topics": config.topics,
              "threads": config.threads, "posts": config.posts, "votes": config.votes}
    latents = {
        "users": rng.integers(0, config.latent_count, config.users),
        "topics": rng.integers(0, config.latent_count, config.topics),
    }
    cells: dict[str, dict[str, list]] = {name: {} for name in counts}
    cells["users"]["id"] = [str(i + 1) for i in range(config.users)]
    cells["topics"]["id"] = [str(i + 1) for i in range(config.topics)]

    child_profiles: dict[str, np.ndarray] = {}
    for child in ("threads", "posts", "votes"):
        fk, profile = _fk_cells(rng, latents["users"], counts[child], config)
        cells[child]["user_id"] = fk
        child_profiles[child] = profile
    topic_fk, topic_profile = _fk_cells(rng, latents["topics"], counts["posts"], config)
    cells["posts"]["topic_id"] = topic_fk

    for table, attrs in ATTRIBUTES.items():
        own = latents.get(table, child_profiles.get(table))
        for idx, attr in enumerate(attrs):
            if table in ("users", "topics"):
                strength = config.correlation
                profile = own
            else:
                strength = config.cross_correlation
                # posts split their attributes between both parents
                profile = topic_profile if (table == "posts" and idx == 1) else own
            cells[table][attr] = _attr_cells(rng, profile, WORDS[attr], idx,
                                             strength, config.null_cells)

    tables: dict[str, Table] = {}
    raw_columns: dict[str, list[list]] = {}
    for name in schema.tables:
        specs = schema.tables[name]
        columns = {}
        ordered = []
        for spec in specs:
            column_cells = cells[name][spec.name]
            columns[spec.name] = build_column(spec.name, spec.kind, column_cells)
            ordered.append(column_cells)
        tables[name] = Table(name, columns, counts[name])
        raw_columns[name] = ordered
    return Dataset(schema, tables), raw_columns


def _connected_subsets(schema: SchemaGraph) -> dict[int, list[tuple[str, ...]]]:
    """Connected table subsets of the schema, grouped by size."""
    names = sorted(schema.tables)
    pairs = {frozenset((e.one_table, e.many_table)) for e in schema.edges}
    out: dict[int, list[tuple[str, ...]]] = {}
    for mask in range(1, 1 << len(names)):
        subset = tuple(names[i] for i in range(len(names)) if mask >> i & 1)
        if len(subset) > 1:
            seen = {subset[0]}
            frontier = [subset[0]]
            while frontier:
                cur = frontier.pop()
                for other in subset:
                    if other not in seen and frozenset((cur, other)) in pairs:
                        seen.add(other)
                        frontier.append(other)
            if len(seen) != len(subset):
                continue
        out.setdefault(len(subset), []).append(subset)
    return out


def _predicate_entry(rng: np.random.Generator, dataset: Dataset, table: str,
                     attr: str, config: SynthConfig) -> dict:
    column = dataset.tables[table].column(attr)
    values = [str(v) for v in column.raw_values]
    op = str(rng.choice(["=", "IN", "BETWEEN", "<=", ">=", "!="]))
    if len(values) < 2:
        op = "="
    if op == "=" or op == "!=":
        chosen = [values[rng.integers(0, len(values))]]
    elif op == "IN":
        lo, hi = config.in_list_sizes
        k = min(int(rng.integers(lo, hi + 1)), len(values))
        chosen = sorted(rng.choice(values, size=k, replace=False).tolist())
    elif op == "BETWEEN":
        a, b = sorted(rng.integers(0, len(values), 2).tolist())
        chosen = [values[a], values[b]]
    else:
        cut = 1 + int(rng.integers(0, max(len(values) - 1, 1)))
        chosen = [values[cut if op == "<=" else len(values) - 1 - cut]]
    return {"column": f"{table}.{attr}", "op": op, "values": chosen}


def generate_workload(dataset: Dataset, config: SynthConfig) -> list[dict]:
    """Workload entries with stored true cardinalities; deterministic per seed.

    Join graphs are connected subtrees of the schema; single-table queries are
    drawn from the star centers only, where presence-flag estimation is exact.
    Queries whose true cardinality is zero are re-drawn.
    """
    schema = dataset.schema
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "synth-workload")))
    subsets = _connected_subsets(schema)
    centers = tuple(sorted({e.many_table for e in schema.edges}))
    entries: list[dict] = []
    declared = sum(count for _, count in config.width_mix)
    if declared != config.workload_size:
        raise IngestError(f"width mix covers {declared} queries, "
                          f"workload_size is {config.workload_size}")
    for width, count in config.width_mix:
        if width == 1:
            pool = [(c,) for c in centers]
        else:
            pool = subsets.get(width, [])
        if not pool:
            raise IngestError(f"no connected {width}-table subset in the schema")
        for _ in range(count):
            entry = None
            for _attempt in range(config.max_true_cardinality_attempts):
                subset = pool[rng.integers(0, len(pool))]
                joins = [{"one": f"{e.one_table}.{e.one_column}",
                          "many": f"{e.many_table}.{e.many_column}"}
                         for e in schema.edges
                         if e.one_table in subset and e.many_table in subset]
                candidates = [(t, a) for t in subset for a in ATTRIBUTES[t]]
                lo, hi = config.predicates_per_query
                k = min(int(rng.integers(lo, hi + 1)), len(candidates))
                picks = rng.choice(len(candidates), size=k, replace=False)
                preds = [_predicate_entry(rng, dataset, *candidates[p], config)
                         for p in sorted(picks.tolist())]
                draft = {"joins": joins, "predicates": preds}
                if width == 1:
                    draft["tables"] = list(subset)
                query = parse_query(draft, dataset)
                truth = true_cardinality(dataset, query.graph, query.predicates)
                if truth > 0:
                    draft["true_cardinality"] = int(truth)
                    entry = draft
                    break
            if entry is None:
                raise IngestError(f"could not draw a non-empty {width}-table query")
            entries.append(entry)
    return entries


def write_dataset(dataset: Dataset, raw_columns: dict[str, list[list]],
                  out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(dataset.schema.tables):
        header = list(dataset.schema.column_names(name))
        columns = raw_columns[name]
        rows = [[col[i] for col in columns] for i in range(dataset.tables[name].row_count)]
        data.write_table_csv(os.path.join(out_dir, f"{name}.csv"), header, rows)


def synthesize(config: SynthConfig, out_dir: str) -> dict[str, str]:
    """Generate and write dataset CSVs, schema config, and workload; return paths."""
    dataset, raw_columns = generate_dataset(config)
    os.makedirs(out_dir, exist_ok=True)
    data_dir = os.path.join(out_dir, "data")
    write_dataset(dataset, raw_columns, data_dir)
    schema_path = os.path.join(out_dir, "schema.json")
    write_schema_config(dataset.schema, schema_path)
    entries = generate_workload(dataset, config)
    workload_path = os.path.join(out_dir, "workload.json")
    data.write_workload(entries, workload_path)
    return {"data_dir": data_dir, "schema": schema_path, "workload": workload_path}


def load_workload_entries(entries: list[dict], dataset: Dataset) -> Workload:
    """Parse already-generated entries against a dataset (test convenience)."""
    return Workload([parse_query(e, dataset) for e in entries])
