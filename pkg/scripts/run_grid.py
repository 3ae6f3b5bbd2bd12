"""Run a grid spec in-process and print the table (default: the shipped ablation grid).

    python scripts/run_grid.py [spec.json] [--seeds 1 2 3] [--runs baseline KD-T]
        [--set epochs=30] [--teacher-set seed=1]
"""
from __future__ import annotations

import argparse
import json
import logging
import time

from vlmkd.cli import load_grid_spec
from vlmkd.experiments import grid_json, grid_markdown, run_experiment_grid


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("spec", nargs="?", default="ablations")
    ap.add_argument("--seeds", type=int, nargs="*")
    ap.add_argument("--runs", nargs="*", help="subset of run names")
    ap.add_argument("--json", help="also write rows here")
    ap.add_argument("--set", nargs="*", default=[], help="train overrides as key=json")
    ap.add_argument("--teacher-set", nargs="*", default=[], help="teacher overrides as key=json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    spec = load_grid_spec(args.spec)
    if args.seeds:
        spec["seeds"] = args.seeds
    if args.runs:
        spec["runs"] = [r for r in spec["runs"] if r["name"] in args.runs]
    for section, pairs in (("train", args.set), ("teacher", args.teacher_set)):
        for kv in pairs:
            k, v = kv.split("=", 1)
            spec.setdefault(section, {})[k] = json.loads(v)
    t0 = time.time()
    rows = run_experiment_grid(spec)
    print(grid_markdown(rows, spec.get("name", "")))
    for r in rows:
        if r.error:
            print(r.name, r.error)
    print(f"{time.time() - t0:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(grid_json(rows), fh, indent=2)


if __name__ == "__main__":
    main()
