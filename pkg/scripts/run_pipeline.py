"""Run the whole pipeline against a fresh synthetic dataset.

Generates data and a workload, partitions the schema, trains one model per
subschema, then scores the learned estimator against the baselines.  Every
artifact lands under --out, so a run is easy to inspect or diff.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from joincard.cli import main as cli


def run(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = out / "synth"
    steps = [["synth", "--out", str(synth), "--seed", str(args.seed)]]

    config_path = out / "run.json"
    config_path.write_text(json.dumps({
        "schema": str(synth / "schema.json"),
        "data_dir": str(synth / "data"),
        "model_dir": str(out / "models"),
        "backend": args.backend,
        "train_samples": args.train_samples,
        "inference_samples": args.inference_samples,
        "seed": args.seed,
    }, indent=2))

    steps.append(["partition", "--config", str(config_path)])
    if args.backend == "dae":
        steps.append(["train", "--config", str(config_path),
                      "--workers", str(args.workers)])
    steps.append(["estimate", "--config", str(config_path),
                  "--out", str(out / "estimates.jsonl"), str(synth / "workload.json")])
    steps.append(["evaluate", "--config", str(config_path),
                  "--methods", "estimator,independent,universal",
                  "--out", str(out / "results.jsonl"), str(synth / "workload.json")])

    for argv in steps:
        print(f"$ joincard {' '.join(argv)}")
        code = cli(argv)
        if code != 0:
            return code
    return 0


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="pipeline_run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--backend", choices=("exact", "dae"), default="dae")
    parser.add_argument("--train-samples", type=int, default=10_000)
    parser.add_argument("--inference-samples", type=int, default=8_000)
    parser.add_argument("--workers", type=int, default=1)
    return parser.parse_args()


if __name__ == "__main__":
    sys.exit(run(parse_args()))
