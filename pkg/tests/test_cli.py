"""End-to-end command pipeline, exit codes, and byte-level determinism."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from joincard.cli import main
from joincard.data import load_dataset
from joincard.joiner import build_layout, load_sample
from joincard.schema import load_schema_config, partition


SYNTH_FLAGS = ["--users", "30", "--topics", "6", "--threads", "40",
               "--posts", "50", "--votes", "40", "--seed", "13",
               "--width-mix", "1:1,2:2,3:1"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth + join-sample + train run shared by the assertions below."""
    root = tmp_path_factory.mktemp("pipeline")
    out = root / "synth"
    assert main(["synth", "--out", str(out)] + SYNTH_FLAGS) == 0
    paths = {
        "root": root,
        "schema": str(out / "schema.json"),
        "data": str(out / "data"),
        "workload": str(out / "workload.json"),
        "samples": str(root / "samples"),
        "models": str(root / "models"),
        "config": str(root / "run.json"),
    }
    with open(paths["config"], "w") as fh:
        json.dump({
            "schema": paths["schema"],
            "data_dir": paths["data"],
            "model_dir": paths["models"],
            "train_samples": 500,
            "inference_samples": 200,
            "seed": 1,
            "dae": {"hidden": [16, 16], "steps": 80, "batch_size": 64},
        }, fh)
    assert main(["join-sample", "--config", paths["config"],
                 "--out", paths["samples"], "--samples", "300"]) == 0
    assert main(["train", "--config", paths["config"]]) == 0
    return paths


def read_tree(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as fh:
            out[name] = fh.read()
    return out


# --- individual commands -------------------------------------------------------


def test_partition_prints_stars(pipeline, capsys):
    assert main(["partition", "--schema", pipeline["schema"]]) == 0
    out = capsys.readouterr().out
    assert "3 subschemas, hypergraph connected" in out
    for center in ("threads", "posts", "votes"):
        assert f"center:  {center}" in out


def test_partition_reports_disconnected(tmp_path, capsys):
    schema = {"tables": [
        {"name": "a", "columns": [{"name": "id", "kind": "integer"}]},
        {"name": "b", "columns": [{"name": "id", "kind": "integer"}]},
    ], "edges": []}
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(schema))
    assert main(["partition", "--schema", str(path)]) == 0
    assert "disconnected" in capsys.readouterr().out


def test_join_samples_are_loadable(pipeline):
    schema = load_schema_config(pipeline["schema"])
    dataset = load_dataset(schema, pipeline["data"])
    files = sorted(os.listdir(pipeline["samples"]))
    subs = {s.key: s for s in partition(schema)}
    assert files == sorted(f"{key}.cinj" for key in subs)
    for name in files:
        sub = subs[name[:-len(".cinj")]]
        layout = build_layout(dataset, sub)
        sample = load_sample(os.path.join(pipeline["samples"], name), layout)
        assert sample.sample_count == 300
        assert sample.join_row_count > 0
        assert sample.codes.shape[1] == len(layout.attributes)


def test_join_sample_rerun_is_byte_identical(pipeline, tmp_path):
    again = tmp_path / "samples2"
    assert main(["join-sample", "--config", pipeline["config"],
                 "--out", str(again), "--samples", "300"]) == 0
    assert read_tree(pipeline["samples"]) == read_tree(str(again))


def test_training_writes_one_model_per_star(pipeline):
    schema = load_schema_config(pipeline["schema"])
    expected = sorted(f"{s.key}.cinm" for s in partition(schema))
    assert sorted(os.listdir(pipeline["models"])) == expected


def test_training_rerun_and_parallel_match(pipeline, tmp_path):
    first = read_tree(pipeline["models"])
    sequential = tmp_path / "models_seq"
    parallel = tmp_path / "models_par"
    assert main(["train", "--config", pipeline["config"],
                 "--model-dir", str(sequential)]) == 0
    assert main(["train", "--config", pipeline["config"],
                 "--model-dir", str(parallel), "--workers", "2"]) == 0
    assert read_tree(str(sequential)) == first
    assert read_tree(str(parallel)) == first


def test_estimate_writes_jsonl(pipeline, tmp_path):
    out = tmp_path / "estimates.jsonl"
    assert main(["estimate", "--config", pipeline["config"],
                 "--backend", "exact", "--out", str(out),
                 pipeline["workload"]]) == 0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 4
    for line in lines:
        record = json.loads(line)
        assert record["backend"] == "exact"
        assert record["estimate"] > 0


def test_estimate_dae_backend_uses_models(pipeline, tmp_path):
    out = tmp_path / "estimates_dae.jsonl"
    assert main(["estimate", "--config", pipeline["config"],
                 "--backend", "dae", "--out", str(out),
                 pipeline["workload"]]) == 0
    for line in out.read_text().strip().split("\n"):
        record = json.loads(line)
        assert record["backend"] == "dae"
        assert np.isfinite(record["estimate"])


def test_estimate_rerun_is_byte_identical(pipeline, tmp_path):
    one = tmp_path / "a.jsonl"
    two = tmp_path / "b.jsonl"
    for path in (one, two):
        assert main(["estimate", "--config", pipeline["config"],
                     "--backend", "exact", "--out", str(path),
                     pipeline["workload"]]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_evaluate_scores_all_methods(pipeline, tmp_path, capsys):
    out = tmp_path / "results.jsonl"
    assert main(["evaluate", "--config", pipeline["config"],
                 "--methods", "estimator,independent,universal",
                 "--out", str(out), pipeline["workload"]]) == 0
    printed = capsys.readouterr().out
    assert "q50" in printed and "estimator" in printed
    lines = out.read_text().strip().split("\n")
    records = [json.loads(line) for line in lines]
    methods = {r["method"] for r in records[:-1]}
    assert methods == {"estimator", "independent", "universal"}
    assert len(records) == 3 * 4 + 1
    summary = records[-1]["summary"]
    assert summary["estimator"]["failures"] == 0
    for record in records[:-1]:
        assert record["p_error"] >= 1.0


def test_evaluate_rerun_is_byte_identical(pipeline, tmp_path):
    one = tmp_path / "r1.jsonl"
    two = tmp_path / "r2.jsonl"
    for path in (one, two):
        assert main(["evaluate", "--config", pipeline["config"],
                     "--methods", "estimator,independent",
                     "--out", str(path), "--skip-p-error",
                     pipeline["workload"]]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_synth_rerun_matches(pipeline, tmp_path):
    again = tmp_path / "synth2"
    assert main(["synth", "--out", str(again)] + SYNTH_FLAGS) == 0
    original = os.path.dirname(pipeline["schema"])
    assert read_tree(os.path.join(original, "data")) == read_tree(str(again / "data"))
    for name in ("schema.json", "workload.json"):
        with open(os.path.join(original, name), "rb") as fa, \
                open(again / name, "rb") as fb:
            assert fa.read() == fb.read()


# --- exit codes ------------------------------------------------------------------


def test_cyclic_schema_exits_2(tmp_path, capsys):
    schema = {"tables": [
        {"name": "a", "columns": [{"name": "id", "kind": "integer"},
                                  {"name": "b_id", "kind": "integer"}]},
        {"name": "b", "columns": [{"name": "id", "kind": "integer"},
                                  {"name": "a_id", "kind": "integer"}]},
    ], "edges": [{"one": "a.id", "many": "b.a_id"},
                 {"one": "b.id", "many": "a.b_id"}]}
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(schema))
    assert main(["partition", "--schema", str(path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_method_exits_2(pipeline, tmp_path, capsys):
    code = main(["evaluate", "--config", pipeline["config"],
                 "--methods", "psychic", "--out", str(tmp_path / "r.jsonl"),
                 pipeline["workload"]])
    assert code == 2
    assert "psychic" in capsys.readouterr().err


def test_missing_table_csv_exits_2(pipeline, tmp_path, capsys):
    partial = tmp_path / "data"
    partial.mkdir()
    for name in os.listdir(pipeline["data"]):
        if name != "votes.csv":
            (partial / name).write_bytes(
                open(os.path.join(pipeline["data"], name), "rb").read())
    code = main(["estimate", "--schema", pipeline["schema"],
                 "--data-dir", str(partial), "--out", str(tmp_path / "o.jsonl"),
                 pipeline["workload"]])
    assert code == 2
    assert "votes" in capsys.readouterr().err


def test_unknown_backend_in_config_exits_2(pipeline, tmp_path, capsys):
    config = json.load(open(pipeline["config"]))
    config["backend"] = "quantum"
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    code = main(["estimate", "--config", str(path),
                 "--out", str(tmp_path / "o.jsonl"), pipeline["workload"]])
    assert code == 2
    assert "quantum" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"warp_speed": 9}))
    assert main(["partition", "--config", str(path)]) == 2
    assert "warp_speed" in capsys.readouterr().err


def test_bad_width_mix_exits_2(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "s"), "--width-mix", "1-8"])
    assert code == 2
    assert "width-mix" in capsys.readouterr().err


def test_diverged_training_exits_3(pipeline, tmp_path, capsys):
    config = json.load(open(pipeline["config"]))
    config["model_dir"] = str(tmp_path / "models")
    config["dae"] = {"hidden": [16], "steps": 50, "batch_size": 64,
                     "learning_rate": 1e16}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(path)])
    assert code == 3
    assert "training failed" in capsys.readouterr().err


def test_unknown_dae_key_exits_2(pipeline, tmp_path, capsys):
    config = json.load(open(pipeline["config"]))
    config["dae"] = {"flux_capacitor": 1}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    assert main(["train", "--config", str(path)]) == 2
    assert "flux_capacitor" in capsys.readouterr().err
